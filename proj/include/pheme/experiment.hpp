#pragma once

// k-fold experiment runner.

#include <future>
#include <string>
#include <vector>

#include "pheme/cohort.hpp"
#include "pheme/config.hpp"
#include "pheme/ensemble.hpp"
#include "pheme/metrics.hpp"
#include "pheme/models.hpp"
#include "pheme/preprocess.hpp"

namespace pheme {

struct MetricSet {
  double auc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline constexpr const char* kMetricNames[] = {"auc", "precision", "recall", "f1"};

inline double metric_value(const MetricSet& m, std::size_t i) {
  switch (i) {
    case 0: return m.auc;
    case 1: return m.precision;
    case 2: return m.recall;
    default: return m.f1;
  }
}

inline void set_metric(MetricSet& m, std::size_t i, double v) {
  switch (i) {
    case 0: m.auc = v; break;
    case 1: m.precision = v; break;
    case 2: m.recall = v; break;
    default: m.f1 = v; break;
  }
}

inline MetricSet evaluate_scores(const std::vector<double>& scores, const std::vector<int>& hard,
                                 const std::vector<int>& labels) {
  MetricSet m;
  m.auc = roc_auc(scores, labels);
  const auto prf = precision_recall_f1(hard, labels);
  m.precision = prf.precision;
  m.recall = prf.recall;
  m.f1 = prf.f1;
  return m;
}

struct MetricsReport {
  std::string disease;
  std::string method;  // model kind or ensemble strategy
  std::vector<MetricSet> folds;
  MetricSet mean;
  MetricSet std;
  std::string config_hash;
  std::uint64_t seed = 0;

  void aggregate() {
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> xs;
      for (const auto& f : folds) xs.push_back(metric_value(f, i));
      set_metric(mean, i, mean_of(xs));
      set_metric(std, i, sample_std(xs));
    }
  }
};

struct FoldOutcome {
  std::vector<std::pair<std::string, MetricSet>> metrics;  // method -> metrics, in report order
  std::optional<LabelModelParams> label_model;
};

// Load or generate the cohort and attach labels per the config.
inline CohortDataset materialize_cohort(const ExperimentConfig& cfg) {
  CohortDataset ds = cfg.cohort_file ? load_cohort(*cfg.cohort_file, cfg.disease) : generate_synthetic_cohort(*cfg.synthetic);
  ds.disease_name = cfg.disease;
  if (cfg.label_source == LabelSource::rule) {
    ds = label_cohort(std::move(ds), *cfg.rule);
    ds.disease_name = cfg.disease;
  } else if (!ds.labels) {
    throw ValidationError("label_source 'truth' but the cohort has no labels");
  }
  return ds;
}

inline std::vector<std::string> method_names(const ExperimentConfig& cfg) {
  std::vector<std::string> names;
  for (auto m : cfg.models) names.push_back(to_string(m));
  for (const auto& e : cfg.ensembles) names.push_back(e);
  return names;
}

inline FoldOutcome run_fold(const ExperimentConfig& cfg, const CohortDataset& ds, const Fold& fold, std::size_t fold_index) {
  auto stage = [&](const std::string& name, auto&& fn) -> decltype(fn()) {
    const std::string ctx = "fold " + std::to_string(fold_index) + ", stage " + name + ": ";
    try {
      return fn();
    } catch (const ValidationError& e) {
      throw ValidationError(ctx + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error(ctx + e.what());
    }
  };

  std::vector<const PatientRecord*> train, test;
  std::vector<int> ytrain, ytest;
  for (auto i : fold.train) train.push_back(&ds.records[i]), ytrain.push_back((*ds.labels)[i]);
  for (auto i : fold.test) test.push_back(&ds.records[i]), ytest.push_back((*ds.labels)[i]);
  const std::span<const PatientRecord* const> train_span(train), test_span(test);

  const auto fold_seed = derive_seed(cfg.seed, 1000 + fold_index);
  const auto vocab = stage("vocabulary", [&] { return build_vocabulary(train_span, cfg.model.vocab_min_count); });
  const auto keywords = cfg.keywords();

  FoldOutcome out;
  std::vector<TrainedModel> models;
  std::vector<std::vector<double>> test_probs;
  for (std::size_t m = 0; m < cfg.models.size(); ++m) {
    const auto kind = cfg.models[m];
    auto tc = cfg.train;
    tc.seed = derive_seed(fold_seed, m);
    models.push_back(stage("train " + to_string(kind), [&] {
      return train_model(kind, train_span, ytrain, vocab, keywords, cfg.model, tc);
    }));
    test_probs.push_back(stage("predict " + to_string(kind), [&] { return models.back().predict_proba(test_span); }));
    std::vector<int> hard;
    for (double p : test_probs.back()) hard.push_back(hard_label(p));
    out.metrics.emplace_back(to_string(kind), stage("metrics", [&] { return evaluate_scores(test_probs.back(), hard, ytest); }));
  }

  if (cfg.ensembles.empty()) return out;
  std::vector<const TrainedModel*> members;
  for (auto kind : cfg.ensemble_members)
    for (std::size_t m = 0; m < cfg.models.size(); ++m)
      if (cfg.models[m] == kind) members.push_back(&models[m]);

  const auto test_votes = stage("votes", [&] { return build_vote_matrix(members, test_span); });
  for (const auto& e : cfg.ensembles) {
    if (e == "majority_vote") {
      const auto labels = stage("majority_vote", [&] { return majority_vote(test_votes); });
      out.metrics.emplace_back(e, evaluate_scores(mean_probability(test_votes), labels, ytest));
    } else {
      // Fitted on the training fold's votes; the label model never sees labels.
      const auto params = stage("label_model", [&] {
        return fit_label_model(build_vote_matrix(members, train_span));
      });
      const auto pred = label_model_predict(params, test_votes);
      out.metrics.emplace_back(e, evaluate_scores(pred.posterior, pred.labels, ytest));
      out.label_model = params;
    }
  }
  return out;
}

struct ExperimentResult {
  std::vector<MetricsReport> reports;
  std::vector<FoldOutcome> folds;
};

inline ExperimentResult run_experiment_detailed(const ExperimentConfig& cfg, const CohortDataset& ds) {
  cfg.validate();
  const auto folds = split_stratified_kfold(ds, cfg.k, derive_seed(cfg.seed, 0));
  std::vector<FoldOutcome> outcomes(folds.size());
  if (cfg.parallel_folds) {
    std::vector<std::future<FoldOutcome>> futures;
    for (std::size_t f = 0; f < folds.size(); ++f)
      futures.push_back(std::async(std::launch::async, [&, f] { return run_fold(cfg, ds, folds[f], f); }));
    for (std::size_t f = 0; f < folds.size(); ++f) outcomes[f] = futures[f].get();
  } else {
    for (std::size_t f = 0; f < folds.size(); ++f) outcomes[f] = run_fold(cfg, ds, folds[f], f);
  }

  ExperimentResult res;
  const auto hash = hex64(cfg.config_hash());
  for (const auto& name : method_names(cfg)) {
    MetricsReport r;
    r.disease = cfg.disease;
    r.method = name;
    r.config_hash = hash;
    r.seed = cfg.seed;
    for (const auto& o : outcomes)
      for (const auto& [method, m] : o.metrics)
        if (method == name) r.folds.push_back(m);
    r.aggregate();
    res.reports.push_back(std::move(r));
  }
  res.folds = std::move(outcomes);
  return res;
}

inline std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg) {
  const auto ds = materialize_cohort(cfg);
  return run_experiment_detailed(cfg, ds).reports;
}

}  // namespace pheme
