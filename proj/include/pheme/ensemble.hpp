#pragma once

// Combining member classifiers: majority vote and a two-class
// conditional-independence label model fitted by EM.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pheme/core.hpp"
#include "pheme/models.hpp"

namespace pheme {

inline constexpr int kAbstain = -1;

struct VoteMatrix {
  std::vector<std::string> patient_ids;
  std::vector<std::string> classifier_names;
  std::vector<std::vector<int>> votes;             // [patient][classifier] in {0, 1, kAbstain}
  std::vector<std::vector<double>> probabilities;  // NaN where abstained

  std::size_t n_patients() const { return votes.size(); }
  std::size_t n_classifiers() const { return classifier_names.size(); }

  void validate() const {
    if (probabilities.size() != votes.size()) throw ValidationError("vote matrix: shape mismatch");
    if (!patient_ids.empty() && patient_ids.size() != votes.size())
      throw ValidationError("vote matrix: patient id count mismatch");
    for (std::size_t i = 0; i < votes.size(); ++i) {
      if (votes[i].size() != n_classifiers() || probabilities[i].size() != n_classifiers())
        throw ValidationError("vote matrix: row " + std::to_string(i) + " has wrong width");
      for (std::size_t c = 0; c < n_classifiers(); ++c) {
        const int v = votes[i][c];
        const double p = probabilities[i][c];
        if (v == kAbstain) {
          if (!std::isnan(p)) throw ValidationError("vote matrix: abstained entry must have NaN probability");
          continue;
        }
        if (v != 0 && v != 1) throw ValidationError("vote matrix: votes must be 0, 1 or abstain");
        if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("vote matrix: probability outside [0,1]");
        if (v != (p >= 0.5 ? 1 : 0)) throw ValidationError("vote matrix: vote disagrees with probability threshold");
      }
    }
  }

  // Builds votes from probabilities by the 0.5 threshold.
  static VoteMatrix from_probabilities(std::vector<std::string> names, const std::vector<std::vector<double>>& probs,
                                       std::vector<std::string> ids = {}) {
    VoteMatrix vm;
    vm.classifier_names = std::move(names);
    vm.patient_ids = std::move(ids);
    vm.probabilities = probs;
    for (const auto& row : probs) {
      std::vector<int> v;
      for (double p : row) v.push_back(std::isnan(p) ? kAbstain : hard_label(p));
      vm.votes.push_back(std::move(v));
    }
    vm.validate();
    return vm;
  }
};

inline VoteMatrix build_vote_matrix(const std::vector<const TrainedModel*>& models,
                                    std::span<const PatientRecord* const> records) {
  if (models.empty()) throw ValidationError("build_vote_matrix: no models");
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;
  for (const auto* m : models) {
    names.push_back(to_string(m->kind));
    columns.push_back(m->predict_proba(records));
  }
  std::vector<std::vector<double>> rows(records.size(), std::vector<double>(models.size()));
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < records.size(); ++i) {
    ids.push_back(records[i]->patient_id);
    for (std::size_t c = 0; c < models.size(); ++c) rows[i][c] = columns[c][i];
  }
  return VoteMatrix::from_probabilities(std::move(names), rows, std::move(ids));
}

// ---------------------------------------------------------------------------
// Majority vote

// Per patient: the class with more votes; ties go to class 1 when the mean
// member probability exceeds 0.5, otherwise to class 0.
inline std::vector<int> majority_vote(const VoteMatrix& vm) {
  vm.validate();
  std::vector<int> out;
  out.reserve(vm.n_patients());
  for (std::size_t i = 0; i < vm.n_patients(); ++i) {
    int ones = 0, zeros = 0;
    double psum = 0.0;
    for (std::size_t c = 0; c < vm.n_classifiers(); ++c) {
      const int v = vm.votes[i][c];
      if (v == kAbstain) continue;
      (v == 1 ? ones : zeros) += 1;
      psum += vm.probabilities[i][c];
    }
    if (ones + zeros == 0) {
      const auto who = vm.patient_ids.empty() ? "#" + std::to_string(i) : vm.patient_ids[i];
      throw ValidationError("majority_vote: every classifier abstained on patient " + who);
    }
    if (ones != zeros) {
      out.push_back(ones > zeros ? 1 : 0);
    } else {
      out.push_back(psum / (ones + zeros) > 0.5 ? 1 : 0);
    }
  }
  return out;
}

// Mean non-abstaining member probability; the ranking score for majority vote.
inline std::vector<double> mean_probability(const VoteMatrix& vm) {
  std::vector<double> out;
  for (std::size_t i = 0; i < vm.n_patients(); ++i) {
    double s = 0.0;
    int n = 0;
    for (std::size_t c = 0; c < vm.n_classifiers(); ++c)
      if (vm.votes[i][c] != kAbstain) s += vm.probabilities[i][c], ++n;
    out.push_back(n ? s / n : 0.5);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Label model
//
// y ~ Bernoulli(prior); each member reports y with probability accuracy_i and
// the flipped label otherwise, independently given y. Fitted by EM on the
// marginal likelihood of the votes; no labels are ever used.

inline constexpr double kAccuracyMin = 0.51;
inline constexpr double kAccuracyMax = 0.99;
inline constexpr double kPriorMin = 0.01;
inline constexpr double kPriorMax = 0.99;

struct LabelModelParams {
  std::vector<std::string> classifier_names;
  std::vector<double> accuracy;
  double prior = 0.5;
  int iterations = 0;
  double log_likelihood = 0.0;
  std::vector<double> log_likelihood_trace;
  bool degenerate = false;  // all votes identical; prior-only fit
};

struct LabelModelOptions {
  int max_iters = 500;
  double tol = 1e-6;
  double init_accuracy = 0.7;
  double init_prior = 0.5;
};

namespace detail {

// Joint log-probability of a patient's votes under y = 1 and y = 0.
inline std::pair<double, double> vote_log_joint(const std::vector<int>& votes, const std::vector<double>& acc,
                                                double prior) {
  double l1 = std::log(prior), l0 = std::log(1.0 - prior);
  for (std::size_t c = 0; c < votes.size(); ++c) {
    if (votes[c] == kAbstain) continue;
    const double a = acc[c];
    l1 += std::log(votes[c] == 1 ? a : 1.0 - a);
    l0 += std::log(votes[c] == 0 ? a : 1.0 - a);
  }
  return {l1, l0};
}

inline double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double label_model_log_likelihood(const VoteMatrix& vm, const std::vector<double>& acc, double prior) {
  double ll = 0.0;
  for (const auto& row : vm.votes) {
    const auto [l1, l0] = vote_log_joint(row, acc, prior);
    ll += log_sum_exp(l1, l0);
  }
  return ll;
}

}  // namespace detail

inline std::vector<double> label_model_posterior(const LabelModelParams& params, const VoteMatrix& vm) {
  if (params.accuracy.size() != vm.n_classifiers())
    throw ValidationError("label model: classifier count differs from fitted parameters");
  std::vector<double> post;
  post.reserve(vm.n_patients());
  for (const auto& row : vm.votes) {
    const auto [l1, l0] = detail::vote_log_joint(row, params.accuracy, params.prior);
    post.push_back(1.0 / (1.0 + std::exp(l0 - l1)));
  }
  return post;
}

struct LabelModelPrediction {
  std::vector<double> posterior;  // P(y = 1 | votes)
  std::vector<int> labels;        // posterior >= 0.5
};

inline LabelModelPrediction label_model_predict(const LabelModelParams& params, const VoteMatrix& vm) {
  vm.validate();
  LabelModelPrediction out;
  out.posterior = label_model_posterior(params, vm);
  for (double p : out.posterior) out.labels.push_back(p >= 0.5 ? 1 : 0);
  return out;
}

// EM with accuracies constrained to [0.51, 0.99] and the prior to
// [0.01, 0.99]. The Q-function is concave in each parameter, so clipping the
// closed-form M-step gives the constrained maximiser and the likelihood stays
// monotone.
inline LabelModelParams fit_label_model(const VoteMatrix& vm, const LabelModelOptions& opt = {}) {
  vm.validate();
  const std::size_t n = vm.n_patients(), m = vm.n_classifiers();
  if (m < 2) throw ValidationError("fit_label_model: need at least 2 classifiers");
  if (n < 10) throw ValidationError("fit_label_model: need at least 10 patients");

  LabelModelParams params;
  params.classifier_names = vm.classifier_names;
  params.accuracy.assign(m, std::clamp(opt.init_accuracy, kAccuracyMin, kAccuracyMax));
  params.prior = std::clamp(opt.init_prior, kPriorMin, kPriorMax);

  int first = kAbstain;
  bool identical = true;
  std::size_t ones = 0, cast = 0;
  for (const auto& row : vm.votes)
    for (int v : row) {
      if (v == kAbstain) continue;
      if (first == kAbstain) first = v;
      identical = identical && v == first;
      ones += v == 1;
      ++cast;
    }
  if (identical) {
    params.degenerate = true;
    params.accuracy.assign(m, kAccuracyMin);
    params.prior = cast ? std::clamp(static_cast<double>(ones) / static_cast<double>(cast), kPriorMin, kPriorMax) : 0.5;
    params.log_likelihood = detail::label_model_log_likelihood(vm, params.accuracy, params.prior);
    params.log_likelihood_trace = {params.log_likelihood};
    return params;
  }

  double ll = detail::label_model_log_likelihood(vm, params.accuracy, params.prior);
  params.log_likelihood_trace.push_back(ll);
  std::vector<double> q(n);
  for (int it = 1; it <= opt.max_iters; ++it) {
    // E-step
    for (std::size_t i = 0; i < n; ++i) {
      const auto [l1, l0] = detail::vote_log_joint(vm.votes[i], params.accuracy, params.prior);
      q[i] = 1.0 / (1.0 + std::exp(l0 - l1));
    }
    // M-step
    double qsum = 0.0;
    for (double v : q) qsum += v;
    params.prior = std::clamp(qsum / static_cast<double>(n), kPriorMin, kPriorMax);
    for (std::size_t c = 0; c < m; ++c) {
      double agree = 0.0, total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const int v = vm.votes[i][c];
        if (v == kAbstain) continue;
        agree += v == 1 ? q[i] : 1.0 - q[i];
        total += 1.0;
      }
      params.accuracy[c] = total > 0 ? std::clamp(agree / total, kAccuracyMin, kAccuracyMax) : kAccuracyMin;
    }
    const double next = detail::label_model_log_likelihood(vm, params.accuracy, params.prior);
    params.iterations = it;
    params.log_likelihood_trace.push_back(next);
    const double gain = next - ll;
    ll = next;
    if (gain < opt.tol) break;
  }
  params.log_likelihood = ll;

  // Orientation: the clamp keeps every accuracy above 0.5, so the fitted
  // labelling already agrees with the members on average.
  return params;
}

// ---------------------------------------------------------------------------
// Serialization

inline void write_vote_matrix(std::ostream& os, const VoteMatrix& vm) {
  vm.validate();
  os << "patient_id";
  for (const auto& c : vm.classifier_names) os << ',' << c << "_vote," << c << "_prob";
  os << '\n';
  char buf[64];
  for (std::size_t i = 0; i < vm.n_patients(); ++i) {
    os << (vm.patient_ids.empty() ? std::to_string(i) : vm.patient_ids[i]);
    for (std::size_t c = 0; c < vm.n_classifiers(); ++c) {
      const double p = vm.probabilities[i][c];
      if (vm.votes[i][c] == kAbstain) {
        os << ",-1,nan";
      } else {
        std::snprintf(buf, sizeof buf, "%.17g", p);
        os << ',' << vm.votes[i][c] << ',' << buf;
      }
    }
    os << '\n';
  }
}

inline VoteMatrix read_vote_matrix(std::istream& is) {
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
  };
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("vote matrix: missing header");
  const auto header = split(line);
  if (header.empty() || header[0] != "patient_id" || header.size() % 2 != 1)
    throw ValidationError("vote matrix: bad header");
  VoteMatrix vm;
  for (std::size_t i = 1; i < header.size(); i += 2) {
    const auto& h = header[i];
    if (h.size() < 6 || h.substr(h.size() - 5) != "_vote") throw ValidationError("vote matrix: bad column " + h);
    vm.classifier_names.push_back(h.substr(0, h.size() - 5));
  }
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw ValidationError("vote matrix: line " + std::to_string(lineno) + " has wrong width");
    vm.patient_ids.push_back(cells[0]);
    std::vector<int> v;
    std::vector<double> p;
    for (std::size_t c = 1; c < cells.size(); c += 2) {
      try {
        v.push_back(std::stoi(cells[c]));
        p.push_back(cells[c + 1] == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(cells[c + 1]));
      } catch (const std::exception&) {
        throw ValidationError("vote matrix: line " + std::to_string(lineno) + " has a non-numeric cell");
      }
    }
    vm.votes.push_back(std::move(v));
    vm.probabilities.push_back(std::move(p));
  }
  vm.validate();
  return vm;
}

inline json label_model_to_json(const LabelModelParams& p) {
  json j;
  j["format"] = "pheme-label-model";
  j["classifiers"] = p.classifier_names;
  j["accuracy"] = p.accuracy;
  j["prior"] = p.prior;
  j["iterations"] = p.iterations;
  j["log_likelihood"] = p.log_likelihood;
  j["degenerate"] = p.degenerate;
  return j;
}

inline LabelModelParams label_model_from_json(const json& j) {
  if (j.value("format", "") != "pheme-label-model") throw ValidationError("not a label-model manifest");
  LabelModelParams p;
  p.classifier_names = j.at("classifiers").get<std::vector<std::string>>();
  p.accuracy = j.at("accuracy").get<std::vector<double>>();
  p.prior = j.at("prior").get<double>();
  p.iterations = j.value("iterations", 0);
  p.log_likelihood = j.value("log_likelihood", 0.0);
  p.degenerate = j.value("degenerate", false);
  if (p.accuracy.size() != p.classifier_names.size()) throw ValidationError("label model: accuracy count mismatch");
  return p;
}

}  // namespace pheme
