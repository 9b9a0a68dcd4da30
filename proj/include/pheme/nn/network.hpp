#pragma once

// A small branch-and-head network interpreter with reverse-mode gradients.
//
// An Architecture is a list of input branches followed by a head. Each
// branch is a sequential layer list consuming one input Value; the head
// starts with concat_input, which joins the (dense) branch outputs, and ends
// in a single sigmoid unit. One branch + a trivial head is an ordinary MLP.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pheme/core.hpp"
#include "pheme/nn/tensor.hpp"

namespace pheme::nn {

enum class LayerKind : std::uint8_t {
  dense = 1,
  relu = 2,
  sigmoid = 3,
  conv1d = 4,
  max_over_time = 5,
  concat_input = 6,
  embed_mean = 7,  // mean of trainable token vectors per chunk
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::max_over_time: return "max_over_time";
    case LayerKind::concat_input: return "concat_input";
    case LayerKind::embed_mean: return "embed_mean";
  }
  return "?";
}

// dense: in_dim -> out_dim. conv1d: in_dim = embedding width, out_dim =
// filters per bank, one bank per kernel width. embed_mean: in_dim = token
// vocabulary size, out_dim = embedding width.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<std::size_t> kernel_widths;

  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out, {}}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, {}}; }
  static LayerSpec sigmoid() { return {LayerKind::sigmoid, 0, 0, {}}; }
  static LayerSpec conv1d(std::size_t in, std::vector<std::size_t> widths, std::size_t filters) {
    return {LayerKind::conv1d, in, filters, std::move(widths)};
  }
  static LayerSpec max_over_time() { return {LayerKind::max_over_time, 0, 0, {}}; }
  static LayerSpec concat_input() { return {LayerKind::concat_input, 0, 0, {}}; }
  static LayerSpec embed_mean(std::size_t vocab, std::size_t dim) { return {LayerKind::embed_mean, vocab, dim, {}}; }

  bool operator==(const LayerSpec&) const = default;
};

struct Architecture {
  std::vector<std::vector<LayerSpec>> branches;
  std::vector<LayerSpec> head;

  bool operator==(const Architecture&) const = default;

  std::size_t layer_count() const {
    std::size_t n = head.size();
    for (const auto& b : branches) n += b.size();
    return n;
  }

  // Flat index of branch layer / head layer; parameters use this order.
  std::size_t branch_offset(std::size_t branch) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < branch; ++i) n += branches[i].size();
    return n;
  }
  std::size_t head_offset() const { return branch_offset(branches.size()); }

  std::vector<const LayerSpec*> flat() const {
    std::vector<const LayerSpec*> out;
    for (const auto& b : branches)
      for (const auto& l : b) out.push_back(&l);
    for (const auto& l : head) out.push_back(&l);
    return out;
  }

  // Dense output width of each branch. Throws on incompatible dimensions.
  std::vector<std::size_t> validate() const {
    enum class Kind { dense, sequence, banked, tokens };
    struct Shape {
      Kind kind;
      std::size_t width;
    };
    auto fail = [](const std::string& where, const std::string& what) -> void {
      throw ValidationError("incompatible layer dims at " + where + ": " + what);
    };
    if (branches.empty()) fail("architecture", "no input branches");
    std::vector<std::size_t> widths;
    for (std::size_t b = 0; b < branches.size(); ++b) {
      const auto& layers = branches[b];
      const std::string where = "branch " + std::to_string(b);
      if (layers.empty()) fail(where, "empty branch");
      Shape s{};
      switch (layers[0].kind) {
        case LayerKind::embed_mean: s = {Kind::tokens, 0}; break;
        case LayerKind::conv1d: s = {Kind::sequence, layers[0].in_dim}; break;
        case LayerKind::dense: s = {Kind::dense, layers[0].in_dim}; break;
        default: fail(where, std::string("branch cannot start with ") + to_string(layers[0].kind));
      }
      for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string at = where + " layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
        switch (l.kind) {
          case LayerKind::dense:
            if (s.kind != Kind::dense || s.width != l.in_dim || l.in_dim == 0 || l.out_dim == 0)
              fail(at, "expects dense input of width " + std::to_string(l.in_dim));
            s = {Kind::dense, l.out_dim};
            break;
          case LayerKind::relu:
          case LayerKind::sigmoid:
            if (s.kind == Kind::tokens) fail(at, "cannot apply to tokens");
            break;
          case LayerKind::conv1d:
            if (s.kind != Kind::sequence || s.width != l.in_dim || l.out_dim == 0 || l.kernel_widths.empty())
              fail(at, "expects sequence input of width " + std::to_string(l.in_dim));
            for (auto w : l.kernel_widths)
              if (w == 0) fail(at, "kernel width must be >= 1");
            s = {Kind::banked, l.out_dim * l.kernel_widths.size()};
            break;
          case LayerKind::max_over_time:
            if (s.kind != Kind::banked) fail(at, "expects convolution output");
            s = {Kind::dense, s.width};
            break;
          case LayerKind::embed_mean:
            if (i != 0 || l.in_dim == 0 || l.out_dim == 0) fail(at, "must be the first layer with non-zero dims");
            s = {Kind::sequence, l.out_dim};
            break;
          case LayerKind::concat_input: fail(at, "concat_input only allowed at the head"); break;
        }
      }
      if (s.kind != Kind::dense) fail(where, "branch output must be dense");
      widths.push_back(s.width);
    }
    if (head.empty() || head.front().kind != LayerKind::concat_input) fail("head", "must start with concat_input");
    std::size_t width = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
    for (std::size_t i = 1; i < head.size(); ++i) {
      const auto& l = head[i];
      const std::string at = "head layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
      switch (l.kind) {
        case LayerKind::dense:
          if (l.in_dim != width || l.out_dim == 0) fail(at, "expects input width " + std::to_string(width));
          width = l.out_dim;
          break;
        case LayerKind::relu:
        case LayerKind::sigmoid: break;
        default: fail(at, "only dense/relu/sigmoid allowed in the head");
      }
    }
    if (head.back().kind != LayerKind::sigmoid || width != 1) fail("head", "must end in a single sigmoid unit");
    return widths;
  }
};

template <typename T>
struct Parameters {
  // layers[flat index] -> tensors. dense: {W, b}; conv1d: {K_0, b_0, K_1, b_1, ...}
  // with K_k of shape (width_k * in_dim) x filters; embed_mean: {E}.
  std::vector<std::vector<Tensor2D<T>>> layers;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      for (const auto& t : l) n += static_cast<std::size_t>(t.size());
    return n;
  }

  Parameters zeros_like() const {
    Parameters out;
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (const auto& t : layers[i]) out.layers[i].push_back(Tensor2D<T>::Zero(t.rows(), t.cols()));
    return out;
  }

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (const auto& t : layers[i]) out.layers[i].push_back(t.template cast<U>());
    return out;
  }

  bool operator==(const Parameters& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].size() != o.layers[i].size()) return false;
      for (std::size_t j = 0; j < layers[i].size(); ++j) {
        const auto& a = layers[i][j];
        const auto& b = o.layers[i][j];
        if (a.rows() != b.rows() || a.cols() != b.cols() || a != b) return false;
      }
    }
    return true;
  }
};

template <typename T>
using Gradients = Parameters<T>;

// Glorot-uniform weights, zero biases.
template <typename T>
Parameters<T> init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  auto glorot = [&](Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor2D<T> w(rows, cols);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.uniform(-limit, limit));
    return w;
  };
  Parameters<T> p;
  for (const LayerSpec* l : arch.flat()) {
    std::vector<Tensor2D<T>> tensors;
    const auto in = static_cast<Eigen::Index>(l->in_dim);
    const auto out = static_cast<Eigen::Index>(l->out_dim);
    switch (l->kind) {
      case LayerKind::dense:
        tensors.push_back(glorot(in, out, double(in), double(out)));
        tensors.push_back(Tensor2D<T>::Zero(1, out));
        break;
      case LayerKind::conv1d:
        for (auto w : l->kernel_widths) {
          const auto rows = static_cast<Eigen::Index>(w) * in;
          tensors.push_back(glorot(rows, out, double(rows), double(out)));
          tensors.push_back(Tensor2D<T>::Zero(1, out));
        }
        break;
      case LayerKind::embed_mean: tensors.push_back(glorot(in, out, double(in), double(out))); break;
      default: break;
    }
    p.layers.push_back(std::move(tensors));
  }
  return p;
}

template <typename T>
struct Trace {
  // branch[b][0] is the input; branch[b][i + 1] the output of layer i.
  std::vector<std::vector<Value<T>>> branch;
  // head[i] is the output of head layer i (head[0] = concatenation).
  std::vector<Tensor2D<T>> head;

  const Tensor2D<T>& output() const { return head.back(); }
};

namespace detail {

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

// Fraction of non-zeros below which the first dense layer walks non-zeros.
inline constexpr double kSparseDensity = 0.2;

template <typename T>
bool mostly_zero(const Tensor2D<T>& x) {
  const auto nnz = (x.array() != T(0)).count();
  return static_cast<double>(nnz) < kSparseDensity * static_cast<double>(x.size());
}

template <typename T>
Tensor2D<T> dense_forward(const Tensor2D<T>& x, const Tensor2D<T>& w, const Tensor2D<T>& b) {
  Tensor2D<T> y(x.rows(), w.cols());
  if (mostly_zero(x)) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      y.row(r) = b.row(0);
      for (Eigen::Index k = 0; k < x.cols(); ++k)
        if (x(r, k) != T(0)) y.row(r).noalias() += x(r, k) * w.row(k);
    }
  } else {
    y.noalias() = x * w;
    y.rowwise() += b.row(0);
  }
  return y;
}

// Rows of sample b that kernel offset o touches: [o, o + count).
inline Eigen::Index conv_rows(Eigen::Index n, Eigen::Index width, Eigen::Index offset) {
  const Eigen::Index positions = std::max(n, width) - width + 1;
  return std::max<Eigen::Index>(0, std::min(positions, n - offset));
}

template <typename T>
std::vector<Tensor2D<T>> conv_bank_forward(const Sequences<T>& xs, const Tensor2D<T>& kernel, const Tensor2D<T>& bias,
                                           Eigen::Index width) {
  const Eigen::Index d = kernel.rows() / width;
  std::vector<Tensor2D<T>> out;
  out.reserve(xs.size());
  for (const auto& x : xs) {
    const Eigen::Index positions = std::max<Eigen::Index>(x.rows(), width) - width + 1;
    Tensor2D<T> y(positions, kernel.cols());
    y.rowwise() = bias.row(0);
    out.push_back(std::move(y));
  }
  // Zero padding rows contribute nothing, so only real rows are gathered.
  for (Eigen::Index o = 0; o < width; ++o) {
    Eigen::Index m = 0;
    for (const auto& x : xs) m += conv_rows(x.rows(), width, o);
    if (m == 0) continue;
    Tensor2D<T> gathered(m, d);
    Eigen::Index at = 0;
    for (const auto& x : xs) {
      const auto c = conv_rows(x.rows(), width, o);
      if (c) gathered.middleRows(at, c) = x.middleRows(o, c);
      at += c;
    }
    Tensor2D<T> r = gathered * kernel.middleRows(o * d, d);
    at = 0;
    for (std::size_t b = 0; b < xs.size(); ++b) {
      const auto c = conv_rows(xs[b].rows(), width, o);
      if (c) out[b].topRows(c) += r.middleRows(at, c);
      at += c;
    }
  }
  return out;
}

template <typename T>
void conv_bank_backward(const Sequences<T>& xs, const Tensor2D<T>& kernel, Eigen::Index width,
                        const std::vector<const Tensor2D<T>*>& dys, Tensor2D<T>& dkernel, Tensor2D<T>& dbias,
                        Sequences<T>* dxs) {
  const Eigen::Index d = kernel.rows() / width;
  for (const auto* dy : dys) dbias.row(0) += dy->colwise().sum();
  for (Eigen::Index o = 0; o < width; ++o) {
    Eigen::Index m = 0;
    for (const auto& x : xs) m += conv_rows(x.rows(), width, o);
    if (m == 0) continue;
    Tensor2D<T> gathered(m, d);
    Tensor2D<T> g(m, kernel.cols());
    Eigen::Index at = 0;
    for (std::size_t b = 0; b < xs.size(); ++b) {
      const auto c = conv_rows(xs[b].rows(), width, o);
      if (c) {
        gathered.middleRows(at, c) = xs[b].middleRows(o, c);
        g.middleRows(at, c) = dys[b]->topRows(c);
      }
      at += c;
    }
    dkernel.middleRows(o * d, d).noalias() += gathered.transpose() * g;
    if (dxs) {
      Tensor2D<T> dg = g * kernel.middleRows(o * d, d).transpose();
      at = 0;
      for (std::size_t b = 0; b < xs.size(); ++b) {
        const auto c = conv_rows(xs[b].rows(), width, o);
        if (c) (*dxs)[b].middleRows(o, c) += dg.middleRows(at, c);
        at += c;
      }
    }
  }
}

template <typename T>
Value<T> apply_elementwise(const Value<T>& v, LayerKind kind) {
  auto f = [kind](const Tensor2D<T>& x) -> Tensor2D<T> {
    if (kind == LayerKind::relu) return x.cwiseMax(T(0));
    return x.unaryExpr([](T z) { return sigmoid(z); });
  };
  if (auto* m = std::get_if<Tensor2D<T>>(&v)) return f(*m);
  if (auto* s = std::get_if<Sequences<T>>(&v)) {
    Sequences<T> out;
    for (const auto& x : *s) out.push_back(f(x));
    return out;
  }
  const auto& banked = std::get<Banked<T>>(v);
  Banked<T> out;
  for (const auto& sample : banked) {
    std::vector<Tensor2D<T>> banks;
    for (const auto& x : sample) banks.push_back(f(x));
    out.push_back(std::move(banks));
  }
  return out;
}

// dX given dY and the layer's output Y.
template <typename T>
Tensor2D<T> elementwise_backward(const Tensor2D<T>& dy, const Tensor2D<T>& y, LayerKind kind) {
  if (kind == LayerKind::relu) return (y.array() > T(0)).select(dy, T(0));
  return dy.cwiseProduct(y.unaryExpr([](T s) { return s * (T(1) - s); }));
}

template <typename T>
Value<T> elementwise_backward(const Value<T>& dy, const Value<T>& y, LayerKind kind) {
  if (auto* m = std::get_if<Tensor2D<T>>(&dy)) return elementwise_backward(*m, std::get<Tensor2D<T>>(y), kind);
  if (auto* s = std::get_if<Sequences<T>>(&dy)) {
    const auto& ys = std::get<Sequences<T>>(y);
    Sequences<T> out;
    for (std::size_t i = 0; i < s->size(); ++i) out.push_back(elementwise_backward((*s)[i], ys[i], kind));
    return out;
  }
  const auto& db = std::get<Banked<T>>(dy);
  const auto& yb = std::get<Banked<T>>(y);
  Banked<T> out(db.size());
  for (std::size_t i = 0; i < db.size(); ++i)
    for (std::size_t k = 0; k < db[i].size(); ++k) out[i].push_back(elementwise_backward(db[i][k], yb[i][k], kind));
  return out;
}

template <typename T>
Tensor2D<T> max_over_time_forward(const Banked<T>& x) {
  if (x.empty()) return Tensor2D<T>(0, 0);
  Eigen::Index width = 0;
  for (const auto& bank : x.front()) width += bank.cols();
  Tensor2D<T> y(static_cast<Eigen::Index>(x.size()), width);
  for (std::size_t b = 0; b < x.size(); ++b) {
    Eigen::Index col = 0;
    for (const auto& bank : x[b]) {
      y.row(static_cast<Eigen::Index>(b)).segment(col, bank.cols()) = bank.colwise().maxCoeff();
      col += bank.cols();
    }
  }
  return y;
}

// Gradient flows to the first position holding each filter's maximum.
template <typename T>
Banked<T> max_over_time_backward(const Tensor2D<T>& dy, const Banked<T>& x) {
  Banked<T> dx(x.size());
  for (std::size_t b = 0; b < x.size(); ++b) {
    Eigen::Index col = 0;
    for (const auto& bank : x[b]) {
      Tensor2D<T> g = Tensor2D<T>::Zero(bank.rows(), bank.cols());
      for (Eigen::Index f = 0; f < bank.cols(); ++f) {
        Eigen::Index arg = 0;
        bank.col(f).maxCoeff(&arg);
        g(arg, f) = dy(static_cast<Eigen::Index>(b), col + f);
      }
      dx[b].push_back(std::move(g));
      col += bank.cols();
    }
  }
  return dx;
}

template <typename T>
Sequences<T> embed_mean_forward(const TokenBatch& tokens, const Tensor2D<T>& table) {
  Sequences<T> out;
  out.reserve(tokens.size());
  for (const auto& sample : tokens) {
    Tensor2D<T> s = Tensor2D<T>::Zero(static_cast<Eigen::Index>(sample.size()), table.cols());
    for (std::size_t i = 0; i < sample.size(); ++i) {
      const auto& chunk = sample[i];
      if (chunk.empty()) continue;
      for (auto t : chunk) {
        if (t >= static_cast<std::uint32_t>(table.rows())) throw ValidationError("token id out of range");
        s.row(static_cast<Eigen::Index>(i)) += table.row(t);
      }
      s.row(static_cast<Eigen::Index>(i)) /= static_cast<T>(chunk.size());
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
void embed_mean_backward(const TokenBatch& tokens, const Sequences<T>& ds, Tensor2D<T>& dtable) {
  for (std::size_t b = 0; b < tokens.size(); ++b) {
    for (std::size_t i = 0; i < tokens[b].size(); ++i) {
      const auto& chunk = tokens[b][i];
      if (chunk.empty()) continue;
      const T scale = T(1) / static_cast<T>(chunk.size());
      for (auto t : chunk) dtable.row(t) += scale * ds[b].row(static_cast<Eigen::Index>(i));
    }
  }
}

template <typename T>
Value<T> layer_forward(const LayerSpec& l, const std::vector<Tensor2D<T>>& p, const Value<T>& x) {
  switch (l.kind) {
    case LayerKind::dense: return dense_forward(std::get<Tensor2D<T>>(x), p[0], p[1]);
    case LayerKind::relu:
    case LayerKind::sigmoid: return apply_elementwise(x, l.kind);
    case LayerKind::conv1d: {
      const auto& xs = std::get<Sequences<T>>(x);
      Banked<T> out(xs.size());
      for (std::size_t k = 0; k < l.kernel_widths.size(); ++k) {
        auto bank = conv_bank_forward(xs, p[2 * k], p[2 * k + 1], static_cast<Eigen::Index>(l.kernel_widths[k]));
        for (std::size_t b = 0; b < xs.size(); ++b) out[b].push_back(std::move(bank[b]));
      }
      return out;
    }
    case LayerKind::max_over_time: return max_over_time_forward(std::get<Banked<T>>(x));
    case LayerKind::embed_mean: return embed_mean_forward(std::get<TokenBatch>(x), p[0]);
    case LayerKind::concat_input: break;
  }
  throw std::logic_error("unexpected layer kind in branch");
}

template <typename T>
void check_input(const LayerSpec& first, const Value<T>& x, std::size_t branch) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("input for branch " + std::to_string(branch) + ": " + what);
  };
  switch (first.kind) {
    case LayerKind::dense: {
      auto* m = std::get_if<Tensor2D<T>>(&x);
      if (!m || static_cast<std::size_t>(m->cols()) != first.in_dim)
        fail("expected dense input of width " + std::to_string(first.in_dim));
      break;
    }
    case LayerKind::conv1d: {
      auto* s = std::get_if<Sequences<T>>(&x);
      if (!s) fail("expected chunk-embedding sequences");
      for (const auto& m : *s)
        if (static_cast<std::size_t>(m.cols()) != first.in_dim)
          fail("expected sequence width " + std::to_string(first.in_dim));
      break;
    }
    case LayerKind::embed_mean:
      if (!std::holds_alternative<TokenBatch>(x)) fail("expected token ids");
      break;
    default: fail("unsupported first layer");
  }
}

}  // namespace detail

template <typename T>
Trace<T> forward(const Architecture& arch, const Parameters<T>& params, const std::vector<Value<T>>& inputs) {
  if (inputs.size() != arch.branches.size())
    throw ValidationError("forward: expected " + std::to_string(arch.branches.size()) + " inputs, got " +
                          std::to_string(inputs.size()));
  Trace<T> tr;
  std::size_t batch = 0;
  for (std::size_t b = 0; b < arch.branches.size(); ++b) {
    const auto& layers = arch.branches[b];
    detail::check_input(layers.front(), inputs[b], b);
    if (b == 0) batch = batch_size(inputs[b]);
    else if (batch_size(inputs[b]) != batch) throw ValidationError("forward: branch batch sizes differ");
    std::vector<Value<T>> vals;
    vals.reserve(layers.size() + 1);
    vals.push_back(inputs[b]);
    const std::size_t off = arch.branch_offset(b);
    for (std::size_t i = 0; i < layers.size(); ++i)
      vals.push_back(detail::layer_forward(layers[i], params.layers[off + i], vals.back()));
    tr.branch.push_back(std::move(vals));
  }
  // concat_input
  Eigen::Index width = 0;
  for (const auto& vals : tr.branch) width += std::get<Tensor2D<T>>(vals.back()).cols();
  Tensor2D<T> cat(static_cast<Eigen::Index>(batch), width);
  Eigen::Index col = 0;
  for (const auto& vals : tr.branch) {
    const auto& m = std::get<Tensor2D<T>>(vals.back());
    cat.middleCols(col, m.cols()) = m;
    col += m.cols();
  }
  tr.head.push_back(std::move(cat));
  const std::size_t off = arch.head_offset();
  for (std::size_t i = 1; i < arch.head.size(); ++i) {
    const auto& l = arch.head[i];
    const auto& x = tr.head.back();
    if (l.kind == LayerKind::dense)
      tr.head.push_back(detail::dense_forward(x, params.layers[off + i][0], params.layers[off + i][1]));
    else
      tr.head.push_back(std::get<Tensor2D<T>>(detail::apply_elementwise(Value<T>(x), l.kind)));
  }
  return tr;
}

inline constexpr double kProbClamp = 1e-7;

// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
inline double bce_loss(std::span<const double> p, std::span<const double> y) {
  if (p.size() != y.size()) throw ValidationError("bce_loss: length mismatch");
  if (p.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    sum -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  return sum / static_cast<double>(p.size());
}

template <typename T>
double bce_loss(const Tensor2D<T>& p, std::span<const T> y) {
  if (p.cols() != 1 || static_cast<std::size_t>(p.rows()) != y.size()) throw ValidationError("bce_loss: length mismatch");
  std::vector<double> pd(y.size()), yd(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    pd[i] = static_cast<double>(p(static_cast<Eigen::Index>(i), 0));
    yd[i] = static_cast<double>(y[i]);
  }
  return bce_loss(std::span<const double>(pd), std::span<const double>(yd));
}

// Gradients of mean BCE with respect to every parameter. The sigmoid output
// and the loss are differentiated together: dL/dz = (p - y) / batch.
template <typename T>
Gradients<T> backward(const Architecture& arch, const Parameters<T>& params, const Trace<T>& tr,
                      std::span<const T> y) {
  const auto& p = tr.output();
  const auto batch = p.rows();
  if (static_cast<std::size_t>(batch) != y.size()) throw ValidationError("backward: label count mismatch");
  Gradients<T> g = params.zeros_like();

  Tensor2D<T> dy(batch, 1);
  for (Eigen::Index i = 0; i < batch; ++i) dy(i, 0) = (p(i, 0) - y[static_cast<std::size_t>(i)]) / static_cast<T>(batch);

  const std::size_t hoff = arch.head_offset();
  // Last head layer is the sigmoid folded into dy above.
  for (std::size_t i = arch.head.size() - 2; i >= 1; --i) {
    const auto& l = arch.head[i];
    const auto& x = tr.head[i - 1];
    if (l.kind == LayerKind::dense) {
      const auto& w = params.layers[hoff + i][0];
      auto& gw = g.layers[hoff + i][0];
      auto& gb = g.layers[hoff + i][1];
      gw.noalias() += x.transpose() * dy;
      gb.row(0) += dy.colwise().sum();
      dy = (dy * w.transpose()).eval();
    } else {
      dy = detail::elementwise_backward(dy, tr.head[i], l.kind);
    }
  }

  Eigen::Index col = 0;
  for (std::size_t b = 0; b < arch.branches.size(); ++b) {
    const auto& layers = arch.branches[b];
    const auto& vals = tr.branch[b];
    const auto width = std::get<Tensor2D<T>>(vals.back()).cols();
    Value<T> d = Tensor2D<T>(dy.middleCols(col, width));
    col += width;
    const std::size_t off = arch.branch_offset(b);
    for (std::size_t ii = layers.size(); ii-- > 0;) {
      const auto& l = layers[ii];
      const auto& x = vals[ii];
      const bool need_dx = ii > 0;
      auto& pl = params.layers[off + ii];
      auto& gl = g.layers[off + ii];
      switch (l.kind) {
        case LayerKind::dense: {
          const auto& xm = std::get<Tensor2D<T>>(x);
          const auto& dm = std::get<Tensor2D<T>>(d);
          if (detail::mostly_zero(xm)) {
            for (Eigen::Index r = 0; r < xm.rows(); ++r)
              for (Eigen::Index k = 0; k < xm.cols(); ++k)
                if (xm(r, k) != T(0)) gl[0].row(k).noalias() += xm(r, k) * dm.row(r);
          } else {
            gl[0].noalias() += xm.transpose() * dm;
          }
          gl[1].row(0) += dm.colwise().sum();
          if (need_dx) d = Tensor2D<T>(dm * pl[0].transpose());
          break;
        }
        case LayerKind::relu:
        case LayerKind::sigmoid: d = detail::elementwise_backward(d, vals[ii + 1], l.kind); break;
        case LayerKind::max_over_time: d = detail::max_over_time_backward(std::get<Tensor2D<T>>(d), std::get<Banked<T>>(x)); break;
        case LayerKind::conv1d: {
          const auto& xs = std::get<Sequences<T>>(x);
          const auto& db = std::get<Banked<T>>(d);
          Sequences<T> dxs;
          if (need_dx)
            for (const auto& m : xs) dxs.push_back(Tensor2D<T>::Zero(m.rows(), m.cols()));
          for (std::size_t k = 0; k < l.kernel_widths.size(); ++k) {
            std::vector<const Tensor2D<T>*> dys;
            dys.reserve(db.size());
            for (const auto& sample : db) dys.push_back(&sample[k]);
            detail::conv_bank_backward(xs, pl[2 * k], static_cast<Eigen::Index>(l.kernel_widths[k]), dys, gl[2 * k],
                                       gl[2 * k + 1], need_dx ? &dxs : nullptr);
          }
          if (need_dx) d = std::move(dxs);
          break;
        }
        case LayerKind::embed_mean:
          detail::embed_mean_backward(std::get<TokenBatch>(x), std::get<Sequences<T>>(d), gl[0]);
          break;
        case LayerKind::concat_input: break;
      }
    }
  }
  return g;
}

}  // namespace pheme::nn
