#pragma once

// JSON configuration: phenotype rules, synthetic cohort specs and experiment
// configs. Unknown keys are rejected so typos surface as validation errors.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pheme/cohort.hpp"
#include "pheme/core.hpp"
#include "pheme/models.hpp"

namespace pheme {

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ValidationError(where + ": unknown key '" + it.key() + "'");
}

template <typename F>
auto with_context(const std::string& where, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ValidationError(where + ": " + e.what());
  }
}

}  // namespace detail

inline PhenotypeRule rule_from_json(const json& j) {
  detail::check_keys(j, {"disease_name", "include_codes", "exclude_codes", "keywords", "min_code_hits"}, "rule");
  return detail::with_context("rule", [&] {
    PhenotypeRule r;
    r.disease_name = j.value("disease_name", std::string{});
    const auto inc = j.value("include_codes", std::vector<std::string>{});
    const auto exc = j.value("exclude_codes", std::vector<std::string>{});
    r.include_codes = {inc.begin(), inc.end()};
    r.exclude_codes = {exc.begin(), exc.end()};
    r.keywords = j.value("keywords", std::vector<std::string>{});
    r.min_code_hits = j.value("min_code_hits", 1);
    r.validate();
    return r;
  });
}

inline json rule_to_json(const PhenotypeRule& r) {
  return json{{"disease_name", r.disease_name},
              {"include_codes", std::vector<std::string>(r.include_codes.begin(), r.include_codes.end())},
              {"exclude_codes", std::vector<std::string>(r.exclude_codes.begin(), r.exclude_codes.end())},
              {"keywords", r.keywords},
              {"min_code_hits", r.min_code_hits}};
}

inline SyntheticCohortSpec synthetic_spec_from_json(const json& j) {
  detail::check_keys(j,
                     {"disease_name", "n_cases", "n_controls", "code_vocab_size", "disease_code_pool",
                      "background_code_pool", "p_case_code", "p_control_code", "p_note_evidence_case",
                      "p_note_evidence_control", "p_code_suppression", "keywords", "evidence_templates",
                      "note_template_bank", "mean_note_sentences", "mean_background_codes", "lab_pool_size",
                      "mean_labs", "p_abnormal_lab", "seed"},
                     "synthetic");
  return detail::with_context("synthetic", [&] {
    SyntheticCohortSpec s;
    s.disease_name = j.value("disease_name", s.disease_name);
    s.n_cases = j.value("n_cases", s.n_cases);
    s.n_controls = j.value("n_controls", s.n_controls);
    s.code_vocab_size = j.value("code_vocab_size", s.code_vocab_size);
    s.disease_code_pool = j.value("disease_code_pool", s.disease_code_pool);
    s.background_code_pool = j.value("background_code_pool", s.background_code_pool);
    s.p_case_code = j.value("p_case_code", s.p_case_code);
    s.p_control_code = j.value("p_control_code", s.p_control_code);
    s.p_note_evidence_case = j.value("p_note_evidence_case", s.p_note_evidence_case);
    s.p_note_evidence_control = j.value("p_note_evidence_control", s.p_note_evidence_control);
    s.p_code_suppression = j.value("p_code_suppression", s.p_code_suppression);
    s.keywords = j.value("keywords", s.keywords);
    s.evidence_templates = j.value("evidence_templates", s.evidence_templates);
    s.note_template_bank = j.value("note_template_bank", s.note_template_bank);
    s.mean_note_sentences = j.value("mean_note_sentences", s.mean_note_sentences);
    s.mean_background_codes = j.value("mean_background_codes", s.mean_background_codes);
    s.lab_pool_size = j.value("lab_pool_size", s.lab_pool_size);
    s.mean_labs = j.value("mean_labs", s.mean_labs);
    s.p_abnormal_lab = j.value("p_abnormal_lab", s.p_abnormal_lab);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
  });
}

enum class LabelSource { rule, truth };

struct ExperimentConfig {
  std::string disease = "synthetic";
  std::optional<std::string> cohort_file;
  std::optional<SyntheticCohortSpec> synthetic;
  std::optional<PhenotypeRule> rule;
  LabelSource label_source = LabelSource::rule;
  int k = 5;
  std::uint64_t seed = 42;
  nn::TrainConfig train;
  ModelConfig model;
  std::vector<ModelKind> models = {ModelKind::structured, ModelKind::text, ModelKind::fusion};
  std::vector<ModelKind> ensemble_members = {ModelKind::structured, ModelKind::text, ModelKind::fusion};
  std::vector<std::string> ensembles = {"majority_vote", "label_model"};
  std::string output_dir = "out";
  bool parallel_folds = false;
  json raw;  // as loaded; hashed into reports

  void validate() const {
    if (k < 2) throw ValidationError("experiment: k must be >= 2");
    if (models.empty()) throw ValidationError("experiment: at least one model is required");
    if (cohort_file.has_value() == synthetic.has_value())
      throw ValidationError("experiment: cohort needs exactly one of 'file' or 'synthetic'");
    if (label_source == LabelSource::rule && !rule)
      throw ValidationError("experiment: label_source 'rule' requires a rule");
    for (const auto& e : ensembles)
      if (e != "majority_vote" && e != "label_model") throw ValidationError("experiment: unknown ensemble '" + e + "'");
    if (!ensembles.empty()) {
      if (ensemble_members.size() < 2) throw ValidationError("experiment: ensembles need at least 2 members");
      for (auto m : ensemble_members)
        if (std::find(models.begin(), models.end(), m) == models.end())
          throw ValidationError("experiment: ensemble member '" + to_string(m) + "' is not in models");
    }
    for (auto m : models)
      if (uses_text(m) && keywords().empty())
        throw ValidationError("experiment: text models need keywords (from the rule or the synthetic spec)");
    train.validate();
    model.validate();
  }

  // Keyword list k^t shared by the rule and the note extractor.
  std::vector<std::string> keywords() const {
    if (rule) return rule->keywords;
    if (synthetic) return synthetic->keywords;
    return {};
  }

  std::uint64_t config_hash() const { return fnv1a(raw.dump()); }
};

inline ExperimentConfig experiment_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  detail::check_keys(j,
                     {"disease", "cohort", "rule", "label_source", "k", "seed", "train", "model", "models",
                      "ensemble_members", "ensembles", "output_dir", "parallel_folds"},
                     "experiment");
  return detail::with_context("experiment", [&] {
    ExperimentConfig c;
    c.raw = j;
    c.disease = j.value("disease", c.disease);
    if (j.contains("cohort")) {
      const auto& cj = j["cohort"];
      detail::check_keys(cj, {"file", "synthetic"}, "cohort");
      if (cj.contains("file")) {
        std::filesystem::path p = cj["file"].get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        c.cohort_file = p.string();
      }
      if (cj.contains("synthetic")) c.synthetic = synthetic_spec_from_json(cj["synthetic"]);
    }
    if (j.contains("rule")) c.rule = rule_from_json(j["rule"]);
    const auto source = j.value("label_source", std::string("rule"));
    if (source == "rule") c.label_source = LabelSource::rule;
    else if (source == "truth") c.label_source = LabelSource::truth;
    else throw ValidationError("experiment: label_source must be 'rule' or 'truth'");
    c.k = j.value("k", c.k);
    c.seed = j.value("seed", c.seed);
    if (j.contains("train")) {
      detail::check_keys(j["train"], {"epochs", "batch_size", "lr", "seed"}, "train");
      c.train = j["train"].get<nn::TrainConfig>();
    }
    if (j.contains("model")) {
      detail::check_keys(j["model"],
                         {"structured_hidden", "fusion_hidden", "kernel_widths", "n_filters", "embed_dim", "window",
                          "fallback_sentences", "chunk_size", "max_chunks", "vocab_min_count", "token_min_count",
                          "l2", "embedding_file"},
                         "model");
      c.model = j["model"].get<ModelConfig>();
      if (!c.model.embedding_file.empty() && !base_dir.empty()) {
        std::filesystem::path p = c.model.embedding_file;
        if (p.is_relative()) c.model.embedding_file = (base_dir / p).string();
      }
    }
    if (j.contains("models")) {
      c.models.clear();
      for (const auto& m : j["models"]) c.models.push_back(parse_model_kind(m.get<std::string>()));
    }
    if (j.contains("ensemble_members")) {
      c.ensemble_members.clear();
      for (const auto& m : j["ensemble_members"]) c.ensemble_members.push_back(parse_model_kind(m.get<std::string>()));
    }
    c.ensembles = j.value("ensembles", c.ensembles);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.parallel_folds = j.value("parallel_folds", c.parallel_folds);
    if (c.rule && c.disease == "synthetic" && !c.rule->disease_name.empty()) c.disease = c.rule->disease_name;
    c.validate();
    return c;
  });
}

inline json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_from_json(read_json_file(path), std::filesystem::path(path).parent_path());
}

}  // namespace pheme
