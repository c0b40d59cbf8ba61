#pragma once

/* Image-style quality metrics between a reconstructed latent and a reference
 * latent.
 *
 * Both operands are first mapped through the same affine normalization,
 * derived from the REFERENCE's value range, so that the reference occupies
 * [0, 1].  All statistics are then accumulated in double precision:
 *
 *   mse   mean squared difference over the normalized values
 *   psnr  10 * log10(1 / mse), with +infinity when mse == 0
 *   ssim  structural similarity with K1 = 0.01, K2 = 0.03 and dynamic
 *         range 1 (the normalized range).  By default one global window
 *         covers the whole matrix; a positive `window` instead averages
 *         the same statistic over non-overlapping window x window tiles of
 *         the 2-D grid (edge tiles may be smaller).
 *
 * A reference with zero spread (max == min) degenerates the normalization;
 * in that case values are only shifted by the reference minimum so that the
 * reference maps to all zeros and differences keep their scale.
 */

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace ulysim {

struct QualityMetrics {
  double mse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

namespace detail {

/* SSIM over one rectangular patch of the normalized operands. */
inline double ssim_patch(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                         Eigen::Index r0, Eigen::Index c0, Eigen::Index rows,
                         Eigen::Index cols) {
  const double n = static_cast<double>(rows) * static_cast<double>(cols);
  double sx = 0.0, sy = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      sx += x(r0 + i, c0 + j);
      sy += y(r0 + i, c0 + j);
    }
  const double mx = sx / n;
  const double my = sy / n;
  double vx = 0.0, vy = 0.0, cov = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double dx = x(r0 + i, c0 + j) - mx;
      const double dy = y(r0 + i, c0 + j) - my;
      vx += dx * dx;
      vy += dy * dy;
      cov += dx * dy;
    }
  vx /= n;
  vy /= n;
  cov /= n;
  constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
  constexpr double kC2 = 0.03 * 0.03;  // (K2 * L)^2 with L = 1
  return ((2.0 * mx * my + kC1) * (2.0 * cov + kC2)) /
         ((mx * mx + my * my + kC1) * (vx + vy + kC2));
}

}  // namespace detail

/* Compare `test` against `reference`; both must have identical shape.
 * `window` <= 0 selects the single global SSIM window. */
inline QualityMetrics quality_metrics(const Eigen::MatrixXf& test,
                                      const Eigen::MatrixXf& reference,
                                      int window = 0) {
  if (test.rows() != reference.rows() || test.cols() != reference.cols())
    throw std::invalid_argument(fmt::format(
        "[metrics] shape mismatch: {}x{} vs {}x{}", test.rows(), test.cols(),
        reference.rows(), reference.cols()));
  if (reference.size() == 0)
    throw std::invalid_argument("[metrics] empty operands");

  const double ref_min = static_cast<double>(reference.minCoeff());
  const double ref_max = static_cast<double>(reference.maxCoeff());
  const double span = ref_max > ref_min ? ref_max - ref_min : 1.0;

  const Eigen::Index rows = test.rows(), cols = test.cols();
  Eigen::MatrixXd x(rows, cols), y(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      x(i, j) = (static_cast<double>(test(i, j)) - ref_min) / span;
      y(i, j) = (static_cast<double>(reference(i, j)) - ref_min) / span;
    }

  QualityMetrics q;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      const double d = x(i, j) - y(i, j);
      acc += d * d;
    }
  q.mse = acc / (static_cast<double>(rows) * static_cast<double>(cols));
  q.psnr = q.mse == 0.0 ? std::numeric_limits<double>::infinity()
                        : 10.0 * std::log10(1.0 / q.mse);

  if (window <= 0) {
    q.ssim = detail::ssim_patch(x, y, 0, 0, rows, cols);
  } else {
    const Eigen::Index w = window;
    double total = 0.0;
    std::int64_t patches = 0;
    for (Eigen::Index r0 = 0; r0 < rows; r0 += w)
      for (Eigen::Index c0 = 0; c0 < cols; c0 += w) {
        total += detail::ssim_patch(x, y, r0, c0, std::min(w, rows - r0),
                                    std::min(w, cols - c0));
        ++patches;
      }
    q.ssim = total / static_cast<double>(patches);
  }
  return q;
}

}  // namespace ulysim
