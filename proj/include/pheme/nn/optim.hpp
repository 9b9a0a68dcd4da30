#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pheme/core.hpp"
#include "pheme/nn/network.hpp"

namespace pheme::nn {

template <typename T>
struct AdamState {
  Parameters<T> m;
  Parameters<T> v;
  std::uint64_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState like(const Parameters<T>& params, double lr = 1e-3) {
    AdamState s;
    s.m = params.zeros_like();
    s.v = params.zeros_like();
    s.lr = lr;
    return s;
  }
};

// Bias-corrected Adam.
template <typename T>
void adam_step(Parameters<T>& params, const Gradients<T>& grads, AdamState<T>& state) {
  if (grads.layers.size() != params.layers.size() || state.m.layers.size() != params.layers.size())
    throw ValidationError("adam_step: shape mismatch");
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T step = static_cast<T>(state.lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(state.eps);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    for (std::size_t j = 0; j < params.layers[i].size(); ++j) {
      auto& p = params.layers[i][j];
      const auto& g = grads.layers[i][j];
      auto& m = state.m.layers[i][j];
      auto& v = state.v.layers[i][j];
      if (g.rows() != p.rows() || g.cols() != p.cols()) throw ValidationError("adam_step: shape mismatch");
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
      p.array() -= step * m.array() / (v.array().sqrt() * inv_sqrt_c2 + eps);
    }
  }
}

struct TrainConfig {
  int epochs = 50;
  int batch_size = 128;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ValidationError("train config: lr must be > 0");
  }
};

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean training loss per epoch, L2 term included
};

// Mini-batch Adam on mean BCE. The batch order is reshuffled every epoch from
// the config seed; the last partial batch is kept. `l2` adds (l2/2)|W|^2 for
// every dense weight matrix (biases and embeddings are not penalised).
template <typename T>
TrainHistory train_network(const Architecture& arch, Parameters<T>& params, const std::vector<Value<T>>& inputs,
                           std::span<const T> labels, const TrainConfig& cfg, double l2 = 0.0,
                           const std::function<void(int, double)>& on_epoch = {}) {
  cfg.validate();
  if (inputs.size() != arch.branches.size()) throw ValidationError("train: input branch count mismatch");
  const std::size_t n = labels.size();
  if (n == 0) throw ValidationError("train: empty training set");
  for (const auto& v : inputs)
    if (batch_size(v) != n) throw ValidationError("train: inputs and labels differ in length");

  const auto flat = arch.flat();
  auto state = AdamState<T>::like(params, cfg.lr);
  Rng shuffler(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  TrainHistory hist;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffler.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<Value<T>> batch;
      batch.reserve(inputs.size());
      for (const auto& v : inputs) batch.push_back(select(v, idx));
      std::vector<T> yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = labels[idx[i]];

      auto tr = forward(arch, params, batch);
      double loss = bce_loss(tr.output(), std::span<const T>(yb));
      auto grads = backward(arch, params, tr, std::span<const T>(yb));
      if (l2 > 0.0) {
        for (std::size_t li = 0; li < flat.size(); ++li) {
          if (flat[li]->kind != LayerKind::dense) continue;
          const auto& w = params.layers[li][0];
          grads.layers[li][0] += static_cast<T>(l2) * w;
          loss += 0.5 * l2 * static_cast<double>(w.squaredNorm());
        }
      }
      adam_step(params, grads, state);
      total += loss * static_cast<double>(idx.size());
    }
    hist.epoch_loss.push_back(total / static_cast<double>(n));
    if (on_epoch) on_epoch(epoch, hist.epoch_loss.back());
  }
  return hist;
}

// Max relative error between analytic and central-difference gradients of
// mean BCE over every parameter.
template <typename BackwardFn>
double gradient_check_with(const Architecture& arch, const Parameters<double>& params,
                           const std::vector<Value<double>>& inputs, std::span<const double> y, double h,
                           BackwardFn&& backward_fn) {
  const auto tr = forward(arch, params, inputs);
  const Gradients<double> analytic = backward_fn(arch, params, tr, y);
  Parameters<double> probe = params;
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.layers.size(); ++i) {
    for (std::size_t j = 0; j < probe.layers[i].size(); ++j) {
      auto& t = probe.layers[i][j];
      for (Eigen::Index k = 0; k < t.size(); ++k) {
        const double orig = t.data()[k];
        t.data()[k] = orig + h;
        const double up = bce_loss(forward(arch, probe, inputs).output(), y);
        t.data()[k] = orig - h;
        const double down = bce_loss(forward(arch, probe, inputs).output(), y);
        t.data()[k] = orig;
        const double numeric = (up - down) / (2.0 * h);
        const double a = analytic.layers[i][j].data()[k];
        const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

inline double gradient_check(const Architecture& arch, const Parameters<double>& params,
                             const std::vector<Value<double>>& inputs, std::span<const double> y, double h = 1e-4) {
  return gradient_check_with(arch, params, inputs, y, h,
                             [](const Architecture& a, const Parameters<double>& p, const Trace<double>& tr,
                                std::span<const double> yy) { return backward(a, p, tr, yy); });
}

}  // namespace pheme::nn
