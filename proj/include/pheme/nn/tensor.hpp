#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace pheme::nn {

template <typename T>
using Tensor2D = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Token ids of one sample, grouped by chunk.
using TokenSample = std::vector<std::vector<std::uint32_t>>;

// Batch values flowing between layers.
//   Tensor2D         dense batch, one row per sample
//   Sequences        one N_b x d matrix per sample (chunk axis = rows)
//   Banked           per sample, one P x F matrix per convolution bank
//   TokenBatch       raw token ids, input to embed_mean only
template <typename T>
using Sequences = std::vector<Tensor2D<T>>;
template <typename T>
using Banked = std::vector<std::vector<Tensor2D<T>>>;
using TokenBatch = std::vector<TokenSample>;

template <typename T>
using Value = std::variant<Tensor2D<T>, Sequences<T>, Banked<T>, TokenBatch>;

template <typename T>
std::size_t batch_size(const Value<T>& v) {
  return std::visit(
      [](const auto& x) -> std::size_t {
        using X = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<X, Tensor2D<T>>) return static_cast<std::size_t>(x.rows());
        else return x.size();
      },
      v);
}

// Rows of `v` at `idx`, in that order.
template <typename T>
Value<T> select(const Value<T>& v, const std::vector<std::size_t>& idx) {
  return std::visit(
      [&](const auto& x) -> Value<T> {
        using X = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<X, Tensor2D<T>>) {
          Tensor2D<T> out(static_cast<Eigen::Index>(idx.size()), x.cols());
          for (std::size_t i = 0; i < idx.size(); ++i)
            out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
          return out;
        } else {
          X out;
          out.reserve(idx.size());
          for (auto i : idx) out.push_back(x[i]);
          return out;
        }
      },
      v);
}

template <typename To, typename From>
Tensor2D<To> cast(const Tensor2D<From>& m) {
  return m.template cast<To>();
}

}  // namespace pheme::nn
