#pragma once

#include "paattack/core.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <string>

namespace paattack {

struct PcaModel {
  Vector<double> mean;               // [D]
  Matrix<double> components;         // [w, D], orthonormal rows
  Vector<double> explained_variance; // [w], non-increasing

  int dim() const { return static_cast<int>(components.rows()); }

  Matrix<double> project(const Matrix<double>& rows) const {
    return (rows.rowwise() - mean.transpose()) * components.transpose();
  }
};

// Flip each component so its largest-magnitude entry is positive (first index
// wins ties).
inline void canonicalize_signs(Matrix<double>& components) {
  for (Eigen::Index r = 0; r < components.rows(); ++r) {
    Eigen::Index best = 0;
    double best_abs = -1.0;
    for (Eigen::Index c = 0; c < components.cols(); ++c) {
      const double a = std::abs(components(r, c));
      if (a > best_abs) {
        best_abs = a;
        best = c;
      }
    }
    if (components(r, best) < 0.0) components.row(r) *= -1.0;
  }
}

// Fits a rank-w PCA on the rows of `data` ([m, D]) through a thin SVD of the
// centered matrix. Variances use the (m - 1) denominator.
inline PcaModel pca_fit(const Matrix<double>& data, int w) {
  const auto m = data.rows(), dims = data.cols();
  require(m >= 1 && dims >= 1, ErrorCode::Precondition, "empty memory");
  require(w >= 1 && w <= std::min<Eigen::Index>(m, dims), ErrorCode::OutOfRange,
          "PCA dimension " + std::to_string(w) + " outside 1.." + std::to_string(std::min<Eigen::Index>(m, dims)));
  PcaModel model;
  model.mean = data.colwise().mean().transpose();
  const Matrix<double> centered = data.rowwise() - model.mean.transpose();
  require(centered.cwiseAbs().maxCoeff() > 0.0, ErrorCode::DegenerateMemory,
          "all memory entries identical: zero variance");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double denom = m > 1 ? static_cast<double>(m - 1) : 1.0;
  model.components = svd.matrixV().leftCols(w).transpose();
  model.explained_variance = sv.head(w).array().square() / denom;
  canonicalize_signs(model.components);
  return model;
}

}  // namespace paattack
