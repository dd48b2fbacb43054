#pragma once

#include "paattack/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace paattack {

struct SrrReport {
  double score_clean = 0.0;
  double score_adv = 0.0;
  double srr = 0.0;
};

// Score reduction rate, 1 - adv/clean.
inline SrrReport srr(double score_clean, double score_adv) {
  require(score_clean > 0.0, ErrorCode::Precondition, "clean score must be positive");
  require(score_adv >= 0.0, ErrorCode::Precondition, "adversarial score must be nonnegative");
  return {score_clean, score_adv, 1.0 - score_adv / score_clean};
}

// Ranks starting at 1, ties share their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return saa == sbb ? 1.0 : 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorCode::ShapeMismatch, "spearman needs equal lengths >= 2");
  return pearson(average_ranks(a), average_ranks(b));
}

struct AttentionShift {
  double spearman = 1.0;
  double l1 = 0.0;
  double top_k_overlap = 1.0;
  int k = 0;
};

// Indices of the k largest entries, ties to the lower index.
inline std::vector<size_t> top_k_indices(const std::vector<double>& v, int k) {
  std::vector<size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] > v[b]; });
  order.resize(std::min<size_t>(static_cast<size_t>(k), order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

inline AttentionShift attention_shift(const std::vector<double>& a, const std::vector<double>& b, int k) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch, "weight vectors differ in length");
  require(k >= 1, ErrorCode::Precondition, "top-k needs k >= 1");
  AttentionShift out;
  out.k = k;
  out.spearman = spearman(a, b);
  for (size_t i = 0; i < a.size(); ++i) out.l1 += std::abs(a[i] - b[i]);
  const auto ta = top_k_indices(a, k), tb = top_k_indices(b, k);
  std::vector<size_t> common;
  std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
  out.top_k_overlap = static_cast<double>(common.size()) / static_cast<double>(ta.size());
  return out;
}

template <typename T>
std::vector<double> to_std_vector(const Vector<T>& v) {
  std::vector<double> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v(i));
  return out;
}

}  // namespace paattack
