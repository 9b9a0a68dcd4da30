#pragma once

// Patient records, the line-delimited cohort format, rule-based
// pseudo-labelling, synthetic cohorts and stratified fold splitting.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pheme/core.hpp"

namespace pheme {

using json = nlohmann::json;

struct LabResult {
  std::string test_code;
  bool abnormal = false;
};

struct NoteDocument {
  std::string note_id;
  std::string text;
};

struct PatientRecord {
  std::string patient_id;
  std::map<std::string, std::string> demographics;
  std::set<std::string> codes;  // "ICD:..." or "MED:..."
  std::vector<LabResult> labs;
  std::vector<NoteDocument> notes;
};

struct CohortDataset {
  std::vector<PatientRecord> records;
  std::optional<std::vector<int>> labels;
  std::string disease_name;

  std::size_t size() const { return records.size(); }
  bool labeled() const { return labels.has_value(); }
};

struct PhenotypeRule {
  std::string disease_name;
  std::set<std::string> include_codes;
  std::set<std::string> exclude_codes;
  std::vector<std::string> keywords;
  int min_code_hits = 1;

  void validate() const {
    if (keywords.empty()) throw ValidationError("phenotype rule: keywords must be non-empty");
    if (min_code_hits < 1) throw ValidationError("phenotype rule: min_code_hits must be >= 1");
    for (const auto& c : include_codes)
      if (exclude_codes.count(c))
        throw ValidationError("phenotype rule: code " + c + " is both included and excluded");
  }
};

inline bool valid_code_namespace(std::string_view code) {
  return (code.size() > 4 && (code.starts_with("ICD:") || code.starts_with("MED:")));
}

// ---------------------------------------------------------------------------
// Cohort file: one JSON object per line.

namespace detail {

[[noreturn]] inline void field_error(std::size_t line, std::string_view field, std::string_view what) {
  throw ValidationError("line " + std::to_string(line) + ": field '" + std::string(field) + "': " +
                        std::string(what));
}

inline const json& require(const json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) field_error(line, field, "missing");
  return *it;
}

}  // namespace detail

inline PatientRecord record_from_json(const json& obj, std::size_t line) {
  using detail::field_error;
  using detail::require;
  if (!obj.is_object()) throw ValidationError("line " + std::to_string(line) + ": not a JSON object");
  PatientRecord rec;

  const auto& id = require(obj, "patient_id", line);
  if (!id.is_string() || id.get<std::string>().empty()) field_error(line, "patient_id", "must be a non-empty string");
  rec.patient_id = id.get<std::string>();

  const auto& demo = require(obj, "demographics", line);
  if (!demo.is_object()) field_error(line, "demographics", "must be an object");
  for (auto it = demo.begin(); it != demo.end(); ++it) {
    if (!it.value().is_string()) field_error(line, "demographics", "values must be strings");
    rec.demographics[it.key()] = it.value().get<std::string>();
  }

  const auto& codes = require(obj, "codes", line);
  if (!codes.is_array()) field_error(line, "codes", "must be an array");
  for (const auto& c : codes) {
    if (!c.is_string()) field_error(line, "codes", "entries must be strings");
    auto s = c.get<std::string>();
    if (!valid_code_namespace(s)) field_error(line, "codes", "code '" + s + "' lacks an ICD: or MED: namespace");
    rec.codes.insert(std::move(s));
  }

  const auto& labs = require(obj, "labs", line);
  if (!labs.is_array()) field_error(line, "labs", "must be an array");
  for (const auto& l : labs) {
    if (!l.is_object() || !l.contains("test_code") || !l.contains("abnormal") || !l["test_code"].is_string() ||
        !l["abnormal"].is_boolean())
      field_error(line, "labs", "entries need string test_code and boolean abnormal");
    LabResult lab{l["test_code"].get<std::string>(), l["abnormal"].get<bool>()};
    if (lab.test_code.empty()) field_error(line, "labs", "test_code must be non-empty");
    rec.labs.push_back(std::move(lab));
  }

  const auto& notes = require(obj, "notes", line);
  if (!notes.is_array()) field_error(line, "notes", "must be an array");
  std::unordered_set<std::string> note_ids;
  for (const auto& n : notes) {
    if (!n.is_object() || !n.contains("note_id") || !n.contains("text") || !n["note_id"].is_string() ||
        !n["text"].is_string())
      field_error(line, "notes", "entries need string note_id and text");
    NoteDocument doc{n["note_id"].get<std::string>(), n["text"].get<std::string>()};
    if (!note_ids.insert(doc.note_id).second) field_error(line, "notes", "duplicate note_id " + doc.note_id);
    rec.notes.push_back(std::move(doc));
  }
  return rec;
}

inline json record_to_json(const PatientRecord& rec) {
  json obj;
  obj["patient_id"] = rec.patient_id;
  obj["demographics"] = json::object();
  for (const auto& [k, v] : rec.demographics) obj["demographics"][k] = v;
  obj["codes"] = json::array();
  for (const auto& c : rec.codes) obj["codes"].push_back(c);
  obj["labs"] = json::array();
  for (const auto& l : rec.labs) obj["labs"].push_back({{"test_code", l.test_code}, {"abnormal", l.abnormal}});
  obj["notes"] = json::array();
  for (const auto& n : rec.notes) obj["notes"].push_back({{"note_id", n.note_id}, {"text", n.text}});
  return obj;
}

inline CohortDataset parse_cohort(std::istream& in, std::string disease) {
  CohortDataset ds;
  ds.disease_name = std::move(disease);
  std::vector<int> labels;
  std::size_t labeled_lines = 0;
  std::unordered_set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ValidationError("line " + std::to_string(line) + ": invalid JSON: " + e.what());
    }
    auto rec = record_from_json(obj, line);
    if (!seen.insert(rec.patient_id).second)
      throw ValidationError("duplicate patient_id " + rec.patient_id + " at line " + std::to_string(line));
    if (auto it = obj.find("label"); it != obj.end()) {
      if (!it->is_number_integer() || (it->get<int>() != 0 && it->get<int>() != 1))
        detail::field_error(line, "label", "must be 0 or 1");
      labels.push_back(it->get<int>());
      ++labeled_lines;
    }
    ds.records.push_back(std::move(rec));
  }
  if (labeled_lines > 0) {
    if (labeled_lines != ds.records.size())
      throw ValidationError("field 'label' present on some records but not all");
    ds.labels = std::move(labels);
  }
  return ds;
}

inline CohortDataset load_cohort(const std::string& path, const std::string& disease) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open cohort file " + path);
  return parse_cohort(in, disease);
}

inline void write_cohort(std::ostream& out, const CohortDataset& ds) {
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    auto obj = record_to_json(ds.records[i]);
    if (ds.labels) obj["label"] = (*ds.labels)[i];
    out << obj.dump() << '\n';
  }
}

inline void save_cohort(const std::string& path, const CohortDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write cohort file " + path);
  write_cohort(out, ds);
}

// ---------------------------------------------------------------------------
// Rule-based pseudo-labelling.

inline bool notes_contain_keyword(const std::vector<NoteDocument>& notes, const std::vector<std::string>& keywords) {
  for (const auto& note : notes) {
    const auto text = normalize_text(note.text);
    for (const auto& kw : keywords) {
      const auto k = normalize_text(kw);
      if (!k.empty() && text.find(k) != std::string::npos) return true;
    }
  }
  return false;
}

inline int apply_phenotype_rule(const PatientRecord& record, const PhenotypeRule& rule) {
  for (const auto& c : record.codes)
    if (rule.exclude_codes.count(c)) return 0;
  int hits = 0;
  for (const auto& c : record.codes) hits += rule.include_codes.count(c) ? 1 : 0;
  if (hits >= rule.min_code_hits) return 1;
  return notes_contain_keyword(record.notes, rule.keywords) ? 1 : 0;
}

inline CohortDataset label_cohort(CohortDataset ds, const PhenotypeRule& rule) {
  rule.validate();
  std::vector<int> labels;
  labels.reserve(ds.records.size());
  for (const auto& r : ds.records) labels.push_back(apply_phenotype_rule(r, rule));
  ds.labels = std::move(labels);
  ds.disease_name = rule.disease_name;
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic cohorts.

struct SyntheticCohortSpec {
  std::string disease_name = "synthetic";
  int n_cases = 500;
  int n_controls = 500;
  int code_vocab_size = 400;  // background pool size when none is given
  std::vector<std::string> disease_code_pool;     // empty: ICD:D001..ICD:D008
  std::vector<std::string> background_code_pool;  // empty: generated from code_vocab_size
  double p_case_code = 0.5;
  double p_control_code = 0.0;
  double p_note_evidence_case = 0.5;
  double p_note_evidence_control = 0.0;
  double p_code_suppression = 0.0;
  std::vector<std::string> keywords = {"heart failure"};
  std::vector<std::string> evidence_templates = {
      "assessment is consistent with {kw}", "patient with known history of {kw}",
      "findings suggest worsening {kw}", "continue current management of {kw}"};
  std::vector<std::string> note_template_bank;  // empty: built-in neutral bank
  int mean_note_sentences = 12;
  double mean_background_codes = 12.0;
  int lab_pool_size = 20;
  double mean_labs = 4.0;
  double p_abnormal_lab = 0.3;
  std::uint64_t seed = 1;

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string("synthetic spec: ") + name + " must be in [0,1]");
    };
    prob(p_case_code, "p_case_code");
    prob(p_control_code, "p_control_code");
    prob(p_note_evidence_case, "p_note_evidence_case");
    prob(p_note_evidence_control, "p_note_evidence_control");
    prob(p_code_suppression, "p_code_suppression");
    prob(p_abnormal_lab, "p_abnormal_lab");
    if (n_cases < 1 || n_controls < 1) throw ValidationError("synthetic spec: n_cases and n_controls must be >= 1");
    if (code_vocab_size < 1) throw ValidationError("synthetic spec: code_vocab_size must be >= 1");
    if (mean_note_sentences < 1) throw ValidationError("synthetic spec: mean_note_sentences must be >= 1");
    if (keywords.empty()) throw ValidationError("synthetic spec: keywords must be non-empty");
    if (evidence_templates.empty()) throw ValidationError("synthetic spec: evidence_templates must be non-empty");
    const auto disease = disease_pool();
    const auto background = background_pool();
    std::set<std::string> d(disease.begin(), disease.end());
    for (const auto& c : background)
      if (d.count(c)) throw ValidationError("synthetic spec: code pools overlap on " + c);
    for (const auto& c : disease)
      if (!valid_code_namespace(c)) throw ValidationError("synthetic spec: bad code " + c);
    for (const auto& c : background)
      if (!valid_code_namespace(c)) throw ValidationError("synthetic spec: bad code " + c);
  }

  std::vector<std::string> disease_pool() const {
    if (!disease_code_pool.empty()) return disease_code_pool;
    std::vector<std::string> pool;
    for (int i = 1; i <= 8; ++i) pool.push_back("ICD:D" + std::string(i < 10 ? "00" : "0") + std::to_string(i));
    return pool;
  }

  std::vector<std::string> background_pool() const {
    if (!background_code_pool.empty()) return background_code_pool;
    std::vector<std::string> pool;
    char buf[32];
    for (int i = 0; i < code_vocab_size; ++i) {
      std::snprintf(buf, sizeof buf, "%s%04d", (i % 3 == 2) ? "MED:M" : "ICD:B", i);
      pool.emplace_back(buf);
    }
    return pool;
  }
};

inline const std::vector<std::string>& default_note_templates() {
  static const std::vector<std::string> bank = {
      "patient seen in clinic for routine follow up",
      "vital signs stable and within normal limits",
      "no acute distress noted on examination",
      "lungs clear to auscultation bilaterally",
      "abdomen soft and non tender",
      "patient tolerating diet without nausea",
      "plan to recheck laboratory values in the morning",
      "medications reviewed with the patient and family",
      "ambulating in the hallway with physical therapy",
      "skin warm and dry without rash",
      "neurologically intact with no focal deficits",
      "denies fever chills or night sweats",
      "pain controlled on current regimen",
      "discussed discharge planning with case management",
      "imaging reviewed with radiology",
      "continue home medications as prescribed",
      "patient reports sleeping well overnight",
      "urine output adequate",
      "wound clean dry and intact",
      "social work consulted for placement options",
      "blood glucose monitored before meals",
      "family updated at bedside",
      "tolerated procedure without complication",
      "encouraged incentive spirometry",
  };
  return bank;
}

inline CohortDataset generate_synthetic_cohort(const SyntheticCohortSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto disease = spec.disease_pool();
  const auto background = spec.background_pool();
  const auto& bank = spec.note_template_bank.empty() ? default_note_templates() : spec.note_template_bank;

  static const std::vector<std::string> ages = {"18-29", "30-39", "40-49", "50-59", "60-69", "70-79", "80+"};
  static const std::vector<std::string> sexes = {"F", "M"};
  static const std::vector<std::string> ethnicities = {"asian", "black", "hispanic", "other", "white"};
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& { return v[rng.below(v.size())]; };

  const int total = spec.n_cases + spec.n_controls;
  std::vector<int> order(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i < spec.n_cases ? 1 : 0;
  rng.shuffle(order);

  CohortDataset ds;
  ds.disease_name = spec.disease_name;
  ds.labels = std::vector<int>();
  char id[32];
  for (int i = 0; i < total; ++i) {
    const bool is_case = order[static_cast<std::size_t>(i)] == 1;
    PatientRecord rec;
    std::snprintf(id, sizeof id, "P%06d", i + 1);
    rec.patient_id = id;
    rec.demographics["age"] = pick(ages);
    rec.demographics["sex"] = pick(sexes);
    rec.demographics["ethnicity"] = pick(ethnicities);

    const unsigned n_background = rng.poisson(spec.mean_background_codes);
    for (unsigned b = 0; b < n_background; ++b) rec.codes.insert(pick(background));

    bool evidence_in_notes = false;
    if (is_case) {
      const bool suppressed = rng.bernoulli(spec.p_code_suppression);
      if (!suppressed) {
        bool any = false;
        for (const auto& c : disease)
          if (rng.bernoulli(spec.p_case_code)) {
            rec.codes.insert(c);
            any = true;
          }
        if (!any) rec.codes.insert(pick(disease));
      }
      evidence_in_notes = suppressed || rng.bernoulli(spec.p_note_evidence_case);
    } else {
      for (const auto& c : disease)
        if (rng.bernoulli(spec.p_control_code)) rec.codes.insert(c);
      evidence_in_notes = rng.bernoulli(spec.p_note_evidence_control);
    }

    const unsigned n_labs = rng.poisson(spec.mean_labs);
    for (unsigned l = 0; l < n_labs; ++l) {
      char code[32];
      std::snprintf(code, sizeof code, "T%02d", static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.lab_pool_size))));
      rec.labs.push_back({code, rng.bernoulli(spec.p_abnormal_lab)});
    }

    const int n_notes = 1 + static_cast<int>(rng.below(3));
    std::vector<std::vector<std::string>> sentences(static_cast<std::size_t>(n_notes));
    for (auto& note : sentences) {
      const unsigned n = std::max(1u, rng.poisson(static_cast<double>(spec.mean_note_sentences)));
      for (unsigned s = 0; s < n; ++s) note.push_back(pick(bank));
    }
    if (evidence_in_notes) {
      auto tmpl = pick(spec.evidence_templates);
      const auto& kw = pick(spec.keywords);
      if (auto pos = tmpl.find("{kw}"); pos != std::string::npos) tmpl.replace(pos, 4, kw);
      else tmpl += " " + kw;
      auto& note = sentences[rng.below(sentences.size())];
      const auto at = static_cast<std::ptrdiff_t>(rng.below(note.size() + 1));
      note.insert(note.begin() + at, tmpl);
    }
    for (int n = 0; n < n_notes; ++n) {
      std::string text;
      for (const auto& s : sentences[static_cast<std::size_t>(n)]) {
        if (!text.empty()) text += ' ';
        text += s;
        text += '.';
      }
      rec.notes.push_back({"N" + std::to_string(n + 1), std::move(text)});
    }
    ds.records.push_back(std::move(rec));
    ds.labels->push_back(is_case ? 1 : 0);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Stratified k-fold.

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline std::vector<Fold> split_stratified_kfold(const std::vector<int>& labels, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("k-fold: k must be >= 2");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  if (pos.size() < static_cast<std::size_t>(k) || neg.size() < static_cast<std::size_t>(k))
    throw ValidationError("k-fold: each class needs at least k=" + std::to_string(k) + " members (have " +
                          std::to_string(pos.size()) + " positive, " + std::to_string(neg.size()) + " negative)");
  Rng rng(seed);
  rng.shuffle(pos);
  rng.shuffle(neg);
  const auto kk = static_cast<std::size_t>(k);
  std::vector<std::size_t> fold_of(labels.size());
  for (std::size_t i = 0; i < pos.size(); ++i) fold_of[pos[i]] = i % kk;
  // Negatives continue the round robin where positives stopped so fold sizes stay balanced.
  for (std::size_t i = 0; i < neg.size(); ++i) fold_of[neg[i]] = (pos.size() + i) % kk;

  std::vector<Fold> folds(kk);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t f = 0; f < kk; ++f) (fold_of[i] == f ? folds[f].test : folds[f].train).push_back(i);
  return folds;
}

inline std::vector<Fold> split_stratified_kfold(const CohortDataset& ds, int k, std::uint64_t seed) {
  if (!ds.labels) throw ValidationError("k-fold: dataset has no labels");
  return split_stratified_kfold(*ds.labels, k, seed);
}

}  // namespace pheme
