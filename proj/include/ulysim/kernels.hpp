#pragma once
/*
 * Dense math kernels for the transformer block, templated on the scalar
 * type with Eigen as the only dependency.
 *
 * Conventions shared by every kernel:
 *   - activations are [rows x channels] matrices whose rows are token rows
 *     in batch-major order (row = b * tokens_per_sequence + t) and whose
 *     columns are head-major channels (head h owns the contiguous block
 *     [h*head_dim, (h+1)*head_dim));
 *   - kernels never care whether the rows at hand are a full sequence or a
 *     shard of one; callers pass whatever slab they hold.
 */

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace ulysim {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/* Linear projection x * w, returned as an expression. */
template <class D1, class D2>
auto project(const Eigen::MatrixBase<D1>& x, const Eigen::MatrixBase<D2>& w) {
  return x.derived() * w.derived();
}

/* Root-mean-square normalization applied independently to each head's
 * channel block of each row, with a per-channel gain. */
template <class D1, class D2>
Mat<typename D1::Scalar> rmsnorm(const Eigen::MatrixBase<D1>& x,
                                 const Eigen::MatrixBase<D2>& gains, int heads,
                                 typename D1::Scalar eps = 1e-6) {
  using S = typename D1::Scalar;
  const Eigen::Index cols = x.cols();
  if (heads <= 0 || cols % heads != 0)
    throw std::invalid_argument("rmsnorm: channels not divisible into heads");
  if (gains.size() != cols)
    throw std::invalid_argument("rmsnorm: gain size does not match channels");
  const Eigen::Index d = cols / heads;
  Mat<S> out(x.rows(), cols);
  for (int h = 0; h < heads; ++h) {
    auto block = x.derived().middleCols(h * d, d);
    // 1/rms per row of this head's block.
    Vec<S> inv = (block.array().square().rowwise().mean() + eps)
                     .rsqrt()
                     .matrix();
    out.middleCols(h * d, d) =
        block.array().colwise() * inv.array();
  }
  out.array().rowwise() *= gains.derived().transpose().array();
  return out;
}

/* Rotary position embedding over interleaved channel pairs within each
 * head: pair i of a head rotates by positions[row] * base^(-2i/d).
 * Positions are absolute token indices, so a shard of a sequence embeds
 * identically to the same rows inside the full sequence. */
template <class D1>
Mat<typename D1::Scalar> rope(const Eigen::MatrixBase<D1>& x,
                              const std::vector<double>& positions, int heads,
                              double base = 10000.0) {
  using S = typename D1::Scalar;
  const Eigen::Index cols = x.cols();
  if (heads <= 0 || cols % heads != 0)
    throw std::invalid_argument("rope: channels not divisible into heads");
  const Eigen::Index d = cols / heads;
  if (d % 2 != 0)
    throw std::invalid_argument("rope: head size must be even");
  if (static_cast<Eigen::Index>(positions.size()) != x.rows())
    throw std::invalid_argument("rope: one position per row required");
  Mat<S> out(x.rows(), cols);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (int h = 0; h < heads; ++h) {
      for (Eigen::Index i = 0; i < d / 2; ++i) {
        const double theta =
            positions[r] * std::pow(base, -2.0 * static_cast<double>(i) /
                                              static_cast<double>(d));
        const S c = static_cast<S>(std::cos(theta));
        const S s = static_cast<S>(std::sin(theta));
        const Eigen::Index j = h * d + 2 * i;
        const S x0 = x(r, j);
        const S x1 = x(r, j + 1);
        out(r, j) = x0 * c - x1 * s;
        out(r, j + 1) = x0 * s + x1 * c;
      }
    }
  }
  return out;
}

/* Numerically stable row softmax (max-subtracted), in place. */
template <class Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& m) {
  using S = typename Derived::Scalar;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.derived().row(r);
    const S peak = row.maxCoeff();
    row = (row.array() - peak).exp();
    row /= row.sum();
  }
}

/* Scaled dot-product attention, evaluated independently per sequence and
 * per head.  q, k, v are [batch*tokens x heads*head_dim]; the result has
 * the same shape.  No masking: every token attends to every token. */
template <class D1, class D2, class D3>
Mat<typename D1::Scalar> attention(const Eigen::MatrixBase<D1>& q,
                                   const Eigen::MatrixBase<D2>& k,
                                   const Eigen::MatrixBase<D3>& v, int batch,
                                   int heads) {
  using S = typename D1::Scalar;
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols() ||
      q.cols() != v.cols())
    throw std::invalid_argument("attention: q/k/v shapes differ");
  if (batch <= 0 || q.rows() % batch != 0)
    throw std::invalid_argument("attention: rows not divisible into batch");
  if (heads <= 0 || q.cols() % heads != 0)
    throw std::invalid_argument("attention: channels not divisible into heads");
  const Eigen::Index tokens = q.rows() / batch;
  const Eigen::Index d = q.cols() / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  Mat<S> out(q.rows(), q.cols());
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = q.derived().block(b * tokens, h * d, tokens, d);
      auto kb = k.derived().block(b * tokens, h * d, tokens, d);
      auto vb = v.derived().block(b * tokens, h * d, tokens, d);
      Mat<S> scores = (qb * kb.transpose()) * scale;
      softmax_rows(scores);
      out.block(b * tokens, h * d, tokens, d) = scores * vb;
    }
  }
  return out;
}

/* Per-row L1 distance between two equally shaped matrices. */
template <class D1, class D2>
Vec<typename D1::Scalar> l1_rowdist(const Eigen::MatrixBase<D1>& a,
                                    const Eigen::MatrixBase<D2>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("l1_rowdist: shapes differ");
  return (a.derived() - b.derived()).cwiseAbs().rowwise().sum();
}

/* Copy of the selected rows, in index order. */
template <class Derived>
Mat<typename Derived::Scalar> gather_rows(const Eigen::MatrixBase<Derived>& x,
                                          const std::vector<int>& idx) {
  Mat<typename Derived::Scalar> out(static_cast<Eigen::Index>(idx.size()),
                                    x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.rows())
      throw std::out_of_range("gather_rows: index outside the matrix");
    out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
  }
  return out;
}

/* Write src's rows into dst at the given row indices. */
template <class D1, class D2>
void scatter_rows(Eigen::MatrixBase<D1>& dst, const std::vector<int>& idx,
                  const Eigen::MatrixBase<D2>& src) {
  if (static_cast<Eigen::Index>(idx.size()) != src.rows())
    throw std::invalid_argument("scatter_rows: one index per source row");
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= dst.rows())
      throw std::out_of_range("scatter_rows: index outside the matrix");
    dst.derived().row(idx[i]) = src.row(static_cast<Eigen::Index>(i));
  }
}

}  // namespace ulysim
