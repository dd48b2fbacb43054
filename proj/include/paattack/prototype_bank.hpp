#pragma once

#include "paattack/binary_io.hpp"
#include "paattack/core.hpp"
#include "paattack/encoder.hpp"
#include "paattack/kmeans.hpp"
#include "paattack/objective.hpp"
#include "paattack/pca.hpp"
#include "paattack/random.hpp"

#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace paattack {

enum class GuidanceMode { FarthestPrototype, NearestPrototype, FarthestSample, NearestSample, MeanSample };

inline std::string to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::FarthestPrototype: return "farthest_prototype";
    case GuidanceMode::NearestPrototype: return "nearest_prototype";
    case GuidanceMode::FarthestSample: return "farthest_sample";
    case GuidanceMode::NearestSample: return "nearest_sample";
    case GuidanceMode::MeanSample: return "mean_sample";
  }
  return "farthest_prototype";
}

inline GuidanceMode parse_guidance_mode(const std::string& s) {
  for (auto m : {GuidanceMode::FarthestPrototype, GuidanceMode::NearestPrototype, GuidanceMode::FarthestSample,
                 GuidanceMode::NearestSample, GuidanceMode::MeanSample})
    if (to_string(m) == s) return m;
  throw Error(ErrorCode::InvalidConfig, "unknown guidance mode: " + s);
}

struct GuidanceMemory {
  std::vector<Matrix<double>> entries;  // patch grids, [N, d] each
  std::vector<std::string> source_ids;

  size_t size() const { return entries.size(); }

  // Row-major flattening of every entry: [m, N*d].
  Matrix<double> flattened() const {
    require(!entries.empty(), ErrorCode::Precondition, "empty guidance memory");
    const auto width = entries.front().size();
    Matrix<double> out(static_cast<Eigen::Index>(entries.size()), width);
    for (size_t i = 0; i < entries.size(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Vector<double>>(entries[i].data(), width).transpose();
    return out;
  }

  std::uint64_t data_hash() const {
    ByteWriter w;
    for (const auto& e : entries)
      for (Eigen::Index i = 0; i < e.size(); ++i) w.f64(e.data()[i]);
    return fnv1a64(w.bytes());
  }
};

template <typename T>
GuidanceMemory build_memory(const Encoder<T>& encoder, const std::vector<ImageTensor<T>>& images,
                            const std::vector<std::string>& source_ids, const std::set<std::string>& eval_ids) {
  require(images.size() == source_ids.size(), ErrorCode::Precondition, "one source id per guidance image");
  for (const auto& id : source_ids)
    require(!eval_ids.contains(id), ErrorCode::Disjointness, "guidance image '" + id + "' is also an evaluation image");
  GuidanceMemory memory;
  memory.source_ids = source_ids;
  memory.entries.reserve(images.size());
  for (const auto& img : images) {
    require(img.valid(), ErrorCode::Precondition, "guidance image pixels must lie in [0,1]");
    memory.entries.push_back(encoder.encode(img).features.patch_tokens.template cast<double>());
  }
  return memory;
}

struct PrototypeBank {
  std::vector<Matrix<double>> prototypes;  // K grids [N, d]
  std::vector<int> assignments;            // 0-based cluster per memory entry
  std::vector<int> cluster_sizes;
  GuidanceMode mode = GuidanceMode::FarthestPrototype;
  std::uint64_t seed = 0;
  std::uint64_t data_hash = 0;
  int pca_dim = 0;
  GuidanceMemory memory;  // kept for the sample-based guidance variants

  int num_prototypes() const { return static_cast<int>(prototypes.size()); }
  int num_tokens() const { return prototypes.empty() ? 0 : static_cast<int>(prototypes.front().rows()); }
  int dim() const { return prototypes.empty() ? 0 : static_cast<int>(prototypes.front().cols()); }
};

// Cluster means in the original feature space.
inline PrototypeBank build_prototypes(const GuidanceMemory& memory, const std::vector<int>& assignments, int k,
                                      GuidanceMode mode) {
  require(assignments.size() == memory.size(), ErrorCode::Precondition, "one assignment per memory entry");
  require(k >= 1 && !memory.entries.empty(), ErrorCode::Precondition, "need K >= 1 and a non-empty memory");
  PrototypeBank bank;
  bank.mode = mode;
  bank.assignments = assignments;
  bank.cluster_sizes.assign(k, 0);
  bank.prototypes.assign(k, Matrix<double>::Zero(memory.entries.front().rows(), memory.entries.front().cols()));
  for (size_t t = 0; t < memory.size(); ++t) {
    const int c = assignments[t];
    require(c >= 0 && c < k, ErrorCode::OutOfRange, "cluster index out of range");
    bank.prototypes[c] += memory.entries[t];
    ++bank.cluster_sizes[c];
  }
  for (int c = 0; c < k; ++c) {
    require(bank.cluster_sizes[c] > 0, ErrorCode::EmptyCluster, "cluster " + std::to_string(c) + " is empty");
    bank.prototypes[c] /= static_cast<double>(bank.cluster_sizes[c]);
  }
  bank.memory = memory;
  bank.data_hash = memory.data_hash();
  return bank;
}

struct PrototypeOptions {
  int pca_dim = 16;
  int clusters = 4;
  std::uint64_t seed = 0;
  GuidanceMode mode = GuidanceMode::FarthestPrototype;
};

using WarningSink = std::function<void(const std::string&)>;

inline void warn_to_stderr(const std::string& msg) { std::cerr << "WARNING: " << msg << "\n"; }

// Memory -> PCA -> K-Means on the projection -> raw-space prototypes. The PCA
// dimension is clamped to the data rank (min(m, N*d)) with a warning.
inline PrototypeBank build_prototype_bank(const GuidanceMemory& memory, const PrototypeOptions& opt,
                                          const WarningSink& warn = warn_to_stderr) {
  require(!memory.entries.empty(), ErrorCode::Precondition, "empty guidance memory");
  require(opt.clusters <= static_cast<int>(memory.size()), ErrorCode::OutOfRange,
          "K too large: K=" + std::to_string(opt.clusters) + " exceeds memory size m=" + std::to_string(memory.size()));
  const Matrix<double> flat = memory.flattened();
  const int rank_cap = static_cast<int>(std::min<Eigen::Index>(flat.rows(), flat.cols()));
  int w = opt.pca_dim;
  if (w > rank_cap) {
    if (warn) warn("PCA dimension " + std::to_string(w) + " clamped to " + std::to_string(rank_cap));
    w = rank_cap;
  }
  const PcaModel pca = pca_fit(flat, w);
  const KMeansResult km = kmeans(pca.project(flat), opt.clusters, opt.seed);
  PrototypeBank bank = build_prototypes(memory, km.assignments, opt.clusters, opt.mode);
  bank.seed = opt.seed;
  bank.pca_dim = w;
  return bank;
}

struct AnchorChoice {
  Matrix<double> anchor;
  int index = -1;  // prototype or memory index; -1 for the memory mean
  double similarity = 0.0;
};

// Anchor for one attacked image. Similarity is the mean per-token cosine;
// ties resolve to the lowest index.
inline AnchorChoice select_anchor(const PrototypeBank& bank, const Matrix<double>& v, GuidanceMode mode) {
  auto scan = [&](const std::vector<Matrix<double>>& candidates, bool farthest) {
    require(!candidates.empty(), ErrorCode::Precondition, "no guidance candidates");
    AnchorChoice best;
    for (size_t k = 0; k < candidates.size(); ++k) {
      const double s = mean_token_cosine(v, candidates[k]);
      if (best.index < 0 || (farthest ? s < best.similarity : s > best.similarity)) {
        best.index = static_cast<int>(k);
        best.similarity = s;
      }
    }
    best.anchor = candidates[best.index];
    return best;
  };
  switch (mode) {
    case GuidanceMode::FarthestPrototype: return scan(bank.prototypes, true);
    case GuidanceMode::NearestPrototype: return scan(bank.prototypes, false);
    case GuidanceMode::FarthestSample: return scan(bank.memory.entries, true);
    case GuidanceMode::NearestSample: return scan(bank.memory.entries, false);
    case GuidanceMode::MeanSample: {
      require(!bank.memory.entries.empty(), ErrorCode::Precondition, "bank carries no guidance memory");
      AnchorChoice out;
      out.anchor = Matrix<double>::Zero(v.rows(), v.cols());
      for (const auto& e : bank.memory.entries) out.anchor += e;
      out.anchor /= static_cast<double>(bank.memory.size());
      out.similarity = mean_token_cosine(v, out.anchor);
      return out;
    }
  }
  throw Error(ErrorCode::InvalidConfig, "unknown guidance mode");
}

inline AnchorChoice select_anchor(const PrototypeBank& bank, const Matrix<double>& v) {
  return select_anchor(bank, v, bank.mode);
}

// Bank container ("PAPB"), little-endian:
//   magic "PAPB" | u32 version=1 | u32 K | u32 N | u32 d | u32 mode | u64 seed |
//   u64 data hash | u32 m | u32 pca_dim | f64 prototypes[K][N][d] |
//   u32 assignments[m] | u32 cluster_sizes[K] | u32 has_memory |
//   (if has_memory) f64 memory[m][N][d] and m length-prefixed source ids.
inline std::string encode_bank(const PrototypeBank& bank) {
  ByteWriter w;
  w.magic("PAPB");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(bank.num_prototypes()));
  w.u32(static_cast<std::uint32_t>(bank.num_tokens()));
  w.u32(static_cast<std::uint32_t>(bank.dim()));
  w.u32(static_cast<std::uint32_t>(bank.mode));
  w.u64(bank.seed);
  w.u64(bank.data_hash);
  w.u32(static_cast<std::uint32_t>(bank.assignments.size()));
  w.u32(static_cast<std::uint32_t>(bank.pca_dim));
  for (const auto& p : bank.prototypes)
    for (Eigen::Index i = 0; i < p.size(); ++i) w.f64(p.data()[i]);
  for (int a : bank.assignments) w.u32(static_cast<std::uint32_t>(a));
  for (int s : bank.cluster_sizes) w.u32(static_cast<std::uint32_t>(s));
  const bool has_memory = !bank.memory.entries.empty();
  w.u32(has_memory ? 1 : 0);
  if (has_memory) {
    for (const auto& e : bank.memory.entries)
      for (Eigen::Index i = 0; i < e.size(); ++i) w.f64(e.data()[i]);
    for (const auto& id : bank.memory.source_ids) w.str(id);
  }
  return w.bytes();
}

inline PrototypeBank decode_bank(std::string bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic("PAPB");
  require(r.u32() == 1, ErrorCode::Io, "unsupported bank version");
  PrototypeBank bank;
  const auto k = r.u32(), n = r.u32(), d = r.u32(), mode = r.u32();
  require(k >= 1 && n >= 1 && d >= 1 && mode <= 4, ErrorCode::Io, "bad bank header");
  bank.mode = static_cast<GuidanceMode>(mode);
  bank.seed = r.u64();
  bank.data_hash = r.u64();
  const auto m = r.u32();
  bank.pca_dim = static_cast<int>(r.u32());
  auto read_grid = [&] {
    Matrix<double> g(n, d);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = r.f64();
    return g;
  };
  for (std::uint32_t i = 0; i < k; ++i) bank.prototypes.push_back(read_grid());
  for (std::uint32_t i = 0; i < m; ++i) bank.assignments.push_back(static_cast<int>(r.u32()));
  for (std::uint32_t i = 0; i < k; ++i) bank.cluster_sizes.push_back(static_cast<int>(r.u32()));
  if (r.u32() == 1) {
    for (std::uint32_t i = 0; i < m; ++i) bank.memory.entries.push_back(read_grid());
    for (std::uint32_t i = 0; i < m; ++i) bank.memory.source_ids.push_back(r.str());
  }
  require(r.at_end(), ErrorCode::Io, "trailing bytes in bank container");
  return bank;
}

}  // namespace paattack
