// pheme command line.
//
//   pheme generate --config synthetic.json --out DIR
//   pheme label    --config rule.json --cohort IN.jsonl --out DIR
//   pheme train    --config experiment.json --out DIR
//   pheme ensemble --models DIR --cohort IN.jsonl --out DIR [--members a,b,c]
//   pheme evaluate --config experiment.json --out DIR
//   pheme report   --in DIR [--in DIR ...] --out DIR
//
// Exit codes: 0 success, 1 validation error, 2 runtime error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "pheme/pheme.hpp"

namespace fs = std::filesystem;
using namespace pheme;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;  // empty: config output_dir, else the working directory

  std::string out_or(const std::string& fallback = ".") const { return out.empty() ? fallback : out; }
};

std::string require_config(const Globals& g, const char* cmd) {
  if (g.config.empty()) throw ValidationError(std::string(cmd) + ": --config is required");
  return g.config;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
}

ExperimentConfig experiment(const Globals& g, const char* cmd) {
  auto cfg = load_experiment_config(require_config(g, cmd));
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.raw["seed"] = *g.seed;
  }
  return cfg;
}

int cmd_generate(const Globals& g) {
  auto j = read_json_file(require_config(g, "generate"));
  // Either a bare synthetic spec or an experiment config with one inside.
  if (j.contains("cohort")) {
    if (!j["cohort"].contains("synthetic")) throw ValidationError("generate: config has no synthetic cohort");
    j = j["cohort"]["synthetic"];
  }
  auto spec = synthetic_spec_from_json(j);
  if (g.seed) spec.seed = *g.seed;
  const auto ds = generate_synthetic_cohort(spec);
  fs::create_directories(g.out_or());
  const auto path = fs::path(g.out_or()) / "cohort.jsonl";
  save_cohort(path.string(), ds);
  std::size_t cases = 0;
  for (int y : *ds.labels) cases += y == 1;
  std::cout << "wrote " << ds.size() << " patients (" << cases << " cases) to " << path.string() << '\n';
  return 0;
}

int cmd_label(const Globals& g, const std::string& cohort) {
  const auto rule = rule_from_json(read_json_file(require_config(g, "label")));
  auto ds = label_cohort(load_cohort(cohort, rule.disease_name), rule);
  fs::create_directories(g.out_or());
  const auto path = fs::path(g.out_or()) / "labeled.jsonl";
  save_cohort(path.string(), ds);
  std::size_t pos = 0;
  for (int y : *ds.labels) pos += y == 1;
  std::cout << "labeled " << ds.size() << " patients, " << pos << " positive, to " << path.string() << '\n';
  return 0;
}

int cmd_train(const Globals& g) {
  const auto cfg = experiment(g, "train");
  const auto ds = materialize_cohort(cfg);
  std::vector<const PatientRecord*> recs;
  for (const auto& r : ds.records) recs.push_back(&r);
  const std::span<const PatientRecord* const> span(recs);
  const auto vocab = build_vocabulary(span, cfg.model.vocab_min_count);
  const fs::path dir = fs::path(g.out_or(cfg.output_dir)) / "models";
  for (std::size_t m = 0; m < cfg.models.size(); ++m) {
    auto tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, m);
    const auto model = train_model(cfg.models[m], span, *ds.labels, vocab, cfg.keywords(), cfg.model, tc);
    save_model(model, dir, to_string(cfg.models[m]));
    std::cout << to_string(cfg.models[m]) << ": final loss " << model.history.epoch_loss.back() << '\n';
  }
  std::cout << "checkpoints in " << dir.string() << '\n';
  return 0;
}

int cmd_ensemble(const Globals& g, const std::string& models_dir, const std::string& cohort,
                 std::vector<std::string> members) {
  if (members.empty()) {
    for (const auto& e : fs::directory_iterator(models_dir))
      if (e.path().extension() == ".json") members.push_back(e.path().stem().string());
    std::sort(members.begin(), members.end());
  }
  if (members.size() < 2) throw ValidationError("ensemble: need at least 2 models, found " + std::to_string(members.size()));
  std::vector<TrainedModel> models;
  for (const auto& name : members) models.push_back(load_model(models_dir, name));
  std::vector<const TrainedModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);

  const auto ds = load_cohort(cohort, "");
  std::vector<const PatientRecord*> recs;
  for (const auto& r : ds.records) recs.push_back(&r);
  auto votes = build_vote_matrix(ptrs, std::span<const PatientRecord* const>(recs));
  votes.classifier_names = members;

  fs::create_directories(g.out_or());
  {
    std::ofstream os(fs::path(g.out_or()) / "votes.csv", std::ios::binary);
    write_vote_matrix(os, votes);
  }
  const auto mv = majority_vote(votes);
  const auto params = fit_label_model(votes);
  const auto lm = label_model_predict(params, votes);
  write_text(fs::path(g.out_or()) / "label_model.json", label_model_to_json(params).dump(2) + "\n");
  std::ostringstream os;
  os << "patient_id,majority_vote,label_model,label_model_posterior\n";
  for (std::size_t i = 0; i < votes.n_patients(); ++i)
    os << votes.patient_ids[i] << ',' << mv[i] << ',' << lm.labels[i] << ',' << exact(lm.posterior[i]) << '\n';
  write_text(fs::path(g.out_or()) / "ensemble_labels.csv", os.str());
  if (params.degenerate) std::cerr << "warning: all votes identical; label model is prior-only\n";
  std::cout << "ensemble of " << members.size() << " models over " << votes.n_patients() << " patients written to "
            << g.out_or() << '\n';
  return 0;
}

int cmd_evaluate(const Globals& g) {
  const auto cfg = experiment(g, "evaluate");
  const auto reports = run_experiment(cfg);
  const auto files = write_reports(reports, g.out_or(cfg.output_dir));
  std::cout << render_table_text(reports) << "reports in " << files.csv.parent_path().string() << '\n';
  return 0;
}

int cmd_report(const Globals& g, const std::vector<std::string>& inputs) {
  std::vector<MetricsReport> all;
  for (const auto& dir : inputs) {
    std::ifstream is(fs::path(dir) / "folds.csv");
    if (!is) throw ValidationError("report: no folds.csv in " + dir);
    auto reports = parse_folds_csv(is);
    // Seed and config hash come from the matching report.csv when present.
    std::ifstream rs(fs::path(dir) / "report.csv");
    std::string line;
    if (rs && std::getline(rs, line) && std::getline(rs, line)) {
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
      if (cells.size() == 9)
        for (auto& r : reports) r.seed = std::stoull(cells[7]), r.config_hash = cells[8];
    }
    all.insert(all.end(), reports.begin(), reports.end());
  }
  write_reports(all, g.out_or());
  std::cout << render_table_text(all);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pheme: weakly supervised multi-modal phenotyping"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "configuration file (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "override the random seed");
  app.add_option("--out", g.out, "output directory");

  auto* generate = app.add_subcommand("generate", "synthetic spec -> cohort file");
  auto* label = app.add_subcommand("label", "cohort + rule -> labeled cohort");
  auto* train = app.add_subcommand("train", "experiment config -> model checkpoints");
  auto* ensemble = app.add_subcommand("ensemble", "checkpoints + cohort -> votes and ensemble labels");
  auto* evaluate = app.add_subcommand("evaluate", "experiment config -> k-fold reports");
  auto* report = app.add_subcommand("report", "fold reports -> tables");
  for (auto* s : {generate, label, train, ensemble, evaluate, report}) s->fallthrough();

  std::string cohort, models_dir;
  std::vector<std::string> members, inputs;
  label->add_option("--cohort", cohort, "cohort JSONL")->required();
  ensemble->add_option("--cohort", cohort, "cohort JSONL")->required();
  ensemble->add_option("--models", models_dir, "directory of checkpoints")->required();
  ensemble->add_option("--members", members, "model names to combine")->delimiter(',');
  report->add_option("--in", inputs, "directory holding folds.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*generate) return cmd_generate(g);
    if (*label) return cmd_label(g, cohort);
    if (*train) return cmd_train(g);
    if (*ensemble) return cmd_ensemble(g, models_dir, cohort, members);
    if (*evaluate) return cmd_evaluate(g);
    if (*report) return cmd_report(g, inputs);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
