#pragma once

#include "paattack/core.hpp"
#include "paattack/random.hpp"

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace paattack {

// Downstream read-out of a patch-token grid.
//   MeanPooled: mean over the N rows (the default).
//   Tokens:     unit-normalized rows concatenated row-major ([N*d]).
// Rows flagged in `masked` count as zero in either form.
enum class ProbeFeatures { MeanPooled, Tokens };

inline std::string to_string(ProbeFeatures f) { return f == ProbeFeatures::MeanPooled ? "mean" : "tokens"; }

inline ProbeFeatures parse_probe_features(const std::string& s) {
  if (s == "mean") return ProbeFeatures::MeanPooled;
  if (s == "tokens") return ProbeFeatures::Tokens;
  throw Error(ErrorCode::InvalidConfig, "probe features must be mean or tokens: " + s);
}

template <typename T>
Vector<double> probe_features(const Matrix<T>& patch_tokens, ProbeFeatures kind,
                              const std::vector<bool>* masked = nullptr) {
  const auto n = patch_tokens.rows(), d = patch_tokens.cols();
  if (kind == ProbeFeatures::MeanPooled) {
    Vector<double> acc = Vector<double>::Zero(d);
    for (Eigen::Index j = 0; j < n; ++j)
      if (!(masked && (*masked)[j])) acc += patch_tokens.row(j).transpose().template cast<double>();
    return acc / static_cast<double>(n);
  }
  Vector<double> out = Vector<double>::Zero(n * d);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (masked && (*masked)[j]) continue;
    const Vector<double> row = patch_tokens.row(j).transpose().template cast<double>();
    const double norm = row.norm();
    if (norm > 0.0) out.segment(j * d, d) = row / norm;
  }
  return out;
}

struct ProbeOptions {
  double learning_rate = 0.5;
  double l2 = 1e-4;
  double tolerance = 1e-6;  // stop when |loss change| falls below this
  int max_iterations = 20000;
  bool center = true;    // subtract the training mean before scaling
  bool fit_bias = true;  // false keeps the logits homogeneous in the features
};

// Multinomial logistic regression on per-feature scaled inputs. Without
// centering, an all-zero input block contributes nothing to the logits.
struct LinearProbe {
  Vector<double> feature_mean;
  Vector<double> feature_scale;
  Matrix<double> weights;  // [classes, d]
  Vector<double> bias;     // [classes]
  int iterations = 0;
  double final_loss = 0.0;

  int classes() const { return static_cast<int>(weights.rows()); }

  Vector<double> logits(const Vector<double>& features) const {
    const Vector<double> z = (features - feature_mean).cwiseQuotient(feature_scale);
    return weights * z + bias;
  }

  int predict(const Vector<double>& features) const {
    const Vector<double> s = logits(features);
    int best = 0;
    for (int c = 1; c < s.size(); ++c)
      if (s(c) > s(best)) best = c;
    return best;
  }
};

inline LinearProbe fit_linear_probe(const std::vector<Vector<double>>& features, const std::vector<int>& labels,
                                    std::uint64_t seed, const ProbeOptions& opt = {}) {
  require(features.size() == labels.size() && !features.empty(), ErrorCode::Precondition,
          "one label per feature vector");
  int classes = 0;
  for (int l : labels) {
    require(l >= 0, ErrorCode::DegenerateLabels, "labels must be nonnegative");
    classes = std::max(classes, l + 1);
  }
  std::vector<int> counts(classes, 0);
  for (int l : labels) ++counts[l];
  int present = 0;
  for (int c : counts) {
    if (c > 0) ++present;
    require(c == 0 || c >= 2, ErrorCode::DegenerateLabels, "every class needs at least 2 examples");
  }
  require(present >= 2, ErrorCode::DegenerateLabels, "need at least 2 classes");

  const auto n = static_cast<Eigen::Index>(features.size());
  const auto d = features.front().size();
  Matrix<double> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = features[i].transpose();

  LinearProbe probe;
  probe.feature_mean = opt.center ? Vector<double>(x.colwise().mean().transpose()) : Vector<double>::Zero(d);
  probe.feature_scale =
      ((x.rowwise() - probe.feature_mean.transpose()).array().square().colwise().mean().sqrt().transpose())
          .max(1e-8)
          .matrix();
  const Matrix<double> z =
      (x.rowwise() - probe.feature_mean.transpose()).array().rowwise() / probe.feature_scale.transpose().array();

  Rng rng(derive_seed(seed, "probe"));
  probe.weights.resize(classes, d);
  for (Eigen::Index i = 0; i < probe.weights.size(); ++i) probe.weights.data()[i] = rng.uniform(-0.01, 0.01);
  probe.bias = Vector<double>::Zero(classes);

  Matrix<double> onehot = Matrix<double>::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, labels[i]) = 1.0;

  double previous = std::numeric_limits<double>::infinity();
  for (int it = 0; it < opt.max_iterations; ++it) {
    Matrix<double> scores = z * probe.weights.transpose();
    scores.rowwise() += probe.bias.transpose();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = scores.row(i).maxCoeff();
      scores.row(i) = (scores.row(i).array() - mx).exp();
      const double sum = scores.row(i).sum();
      scores.row(i) /= sum;
      loss -= std::log(std::max(scores(i, labels[i]), 1e-300));
    }
    loss = loss / static_cast<double>(n) + 0.5 * opt.l2 * probe.weights.squaredNorm();
    probe.iterations = it + 1;
    probe.final_loss = loss;
    if (std::abs(previous - loss) < opt.tolerance) break;
    previous = loss;
    const Matrix<double> residual = (scores - onehot) / static_cast<double>(n);
    probe.weights -= opt.learning_rate * (residual.transpose() * z + opt.l2 * probe.weights);
    if (opt.fit_bias) probe.bias -= opt.learning_rate * residual.colwise().sum().transpose();
  }
  return probe;
}

}  // namespace paattack
