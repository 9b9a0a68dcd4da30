#pragma once

// Parameter checkpoint, little-endian:
//   "PHEW" | version u32 | layer_count u32
//   per layer: branch u32 (0xFFFFFFFF = head) | kind u8 | in_dim u32 | out_dim u32
//              | n_widths u32 | widths u32[n] | n_tensors u32
//              | per tensor: rows u32 | cols u32 | float32[rows*cols] (row-major)

#include <fstream>
#include <string>
#include <utility>

#include "pheme/core.hpp"
#include "pheme/nn/network.hpp"

namespace pheme::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kHeadBranch = 0xFFFFFFFFu;

template <typename T>
void write_checkpoint(std::ostream& os, const Architecture& arch, const Parameters<T>& params) {
  arch.validate();
  const auto flat = arch.flat();
  if (flat.size() != params.layers.size()) throw ValidationError("checkpoint: parameter/layer count mismatch");
  io::write_magic(os, "PHEW");
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(flat.size()));
  std::size_t li = 0;
  auto emit = [&](std::uint32_t branch, const LayerSpec& l) {
    io::write_le<std::uint32_t>(os, branch);
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.kind));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.in_dim));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.out_dim));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.kernel_widths.size()));
    for (auto w : l.kernel_widths) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w));
    const auto& tensors = params.layers[li++];
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rows()));
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.cols()));
      for (Eigen::Index k = 0; k < t.size(); ++k) io::write_le<float>(os, static_cast<float>(t.data()[k]));
    }
  };
  for (std::size_t b = 0; b < arch.branches.size(); ++b)
    for (const auto& l : arch.branches[b]) emit(static_cast<std::uint32_t>(b), l);
  for (const auto& l : arch.head) emit(kHeadBranch, l);
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline std::pair<Architecture, Parameters<float>> read_checkpoint(std::istream& is) {
  io::expect_magic(is, "PHEW");
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = io::read_le<std::uint32_t>(is, "layer count");
  Architecture arch;
  Parameters<float> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto branch = io::read_le<std::uint32_t>(is, "branch");
    LayerSpec l;
    l.kind = static_cast<LayerKind>(io::read_le<std::uint8_t>(is, "kind"));
    if (l.kind < LayerKind::dense || l.kind > LayerKind::embed_mean) throw ValidationError("checkpoint: bad layer kind");
    l.in_dim = io::read_le<std::uint32_t>(is, "in_dim");
    l.out_dim = io::read_le<std::uint32_t>(is, "out_dim");
    const auto nw = io::read_le<std::uint32_t>(is, "n_widths");
    for (std::uint32_t w = 0; w < nw; ++w) l.kernel_widths.push_back(io::read_le<std::uint32_t>(is, "width"));
    const auto nt = io::read_le<std::uint32_t>(is, "n_tensors");
    std::vector<Tensor2D<float>> tensors;
    for (std::uint32_t t = 0; t < nt; ++t) {
      const auto rows = io::read_le<std::uint32_t>(is, "rows");
      const auto cols = io::read_le<std::uint32_t>(is, "cols");
      Tensor2D<float> m(rows, cols);
      if (!is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(float) * m.size())))
        throw ValidationError("checkpoint: truncated tensor payload");
      tensors.push_back(std::move(m));
    }
    if (branch == kHeadBranch) {
      arch.head.push_back(l);
    } else {
      if (!arch.head.empty() || branch > arch.branches.size()) throw ValidationError("checkpoint: layers out of order");
      if (branch == arch.branches.size()) arch.branches.emplace_back();
      arch.branches[branch].push_back(l);
    }
    params.layers.push_back(std::move(tensors));
  }
  arch.validate();
  // Tensor shapes must match what the architecture implies.
  const auto expect = init_params<float>(arch, 0);
  for (std::size_t i = 0; i < expect.layers.size(); ++i) {
    if (expect.layers[i].size() != params.layers[i].size()) throw ValidationError("checkpoint: tensor count mismatch");
    for (std::size_t j = 0; j < expect.layers[i].size(); ++j)
      if (expect.layers[i][j].rows() != params.layers[i][j].rows() ||
          expect.layers[i][j].cols() != params.layers[i][j].cols())
        throw ValidationError("checkpoint: tensor shape mismatch");
  }
  return {std::move(arch), std::move(params)};
}

template <typename T>
void save_checkpoint(const std::string& path, const Architecture& arch, const Parameters<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  write_checkpoint(os, arch, params);
}

inline std::pair<Architecture, Parameters<float>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace pheme::nn
