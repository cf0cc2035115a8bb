#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "pvi/errors.hpp"
#include "pvi/numerics.hpp"

namespace pvi {

/// Inputs (D x input_dim) and targets (D x 1). Targets are either regression
/// values or class indices stored as reals. When the data was standardized,
/// the per-feature mean/scale are kept so predictions can be mapped back.
struct Dataset {
  Matrix inputs;
  Matrix targets;
  Vector input_mean;
  Vector input_scale;
  double target_mean = 0.0;
  double target_scale = 1.0;

  Dataset() = default;
  Dataset(Matrix x, Matrix y) : inputs(std::move(x)), targets(std::move(y)) {
    if (inputs.rows() != targets.rows()) throw DimensionMismatch("Dataset: inputs and targets differ in length");
    input_mean.assign(inputs.cols(), 0.0);
    input_scale.assign(inputs.cols(), 1.0);
  }

  std::size_t size() const noexcept { return inputs.rows(); }
  bool empty() const noexcept { return inputs.rows() == 0; }
  std::span<const double> x(std::size_t d) const { return inputs.row(d); }
  std::span<const double> y(std::size_t d) const { return targets.row(d); }

  /// Rows selected by index, keeping the normalization.
  Dataset subset(std::span<const std::size_t> idx) const {
    Matrix xs(idx.size(), inputs.cols());
    Matrix ys(idx.size(), targets.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy(inputs.row(idx[r]).begin(), inputs.row(idx[r]).end(), xs.row(r).begin());
      std::copy(targets.row(idx[r]).begin(), targets.row(idx[r]).end(), ys.row(r).begin());
    }
    Dataset out(std::move(xs), std::move(ys));
    out.input_mean = input_mean;
    out.input_scale = input_scale;
    out.target_mean = target_mean;
    out.target_scale = target_scale;
    return out;
  }

  void require_finite() const {
    if (!inputs.all_finite() || !targets.all_finite()) throw Error("Dataset: non-finite entries");
  }
};

}  // namespace pvi
