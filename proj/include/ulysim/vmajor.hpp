#pragma once
/*
 * Selective-communication machinery: decide per denoising step which token
 * projections actually need to travel through the inter-GPU exchange, and
 * reconstruct the full head-parallel tensors on the receiving side from a
 * cache of previously exchanged values.
 *
 * The mechanism rests on one observation: between consecutive denoising
 * steps most token projections barely change, and the per-token change in V
 * tracks the change in Q and K closely enough to act as a proxy for all
 * three.  After V's intra-GPU exchange (which always runs at full volume —
 * the selector needs the complete result), one designated tile per GPU
 * compares the fresh rows against last step's rows, keeps the least-changed
 * fraction `r` cached, and ships only the rest.  Receivers overwrite the
 * shipped rows in their cached head-parallel tensors; untouched rows keep
 * the values from an earlier step, and a periodic full synchronization
 * bounds how stale those can get.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "ulysim/kernels.hpp"

namespace ulysim {

/* ---------------------------------------------------------------- schedule */

enum class RatioCurve { Linear, Fixed };

/*
 * Time-varying cache-ratio schedule.  The ratio r in [0,1] is the fraction
 * of token projections served from cache (r = 0: ship everything, r = 1:
 * ship nothing).  Three mechanisms compose:
 *   - warmup: the first `warmup_steps` steps run at r = 0 to populate the
 *     caches with exact values;
 *   - periodic sync: every `sync_interval` steps after warmup, r is forced
 *     to 0 so stale cache rows are flushed with exact current values;
 *   - the curve: Linear ramps r from 0 at the first post-warmup step to 1
 *     at the final step (early steps move large global updates, late steps
 *     only local refinements); Fixed holds a constant ratio instead.
 */
struct CacheSchedule {
  int warmup_steps = 5;
  int sync_interval = 10;
  RatioCurve curve = RatioCurve::Linear;
  double fixed_ratio = 0.0;  // only read when curve == Fixed

  void validate() const {
    if (warmup_steps < 1)
      throw std::invalid_argument("CacheSchedule: warmup_steps must be >= 1");
    if (sync_interval < 1)
      throw std::invalid_argument("CacheSchedule: sync_interval must be >= 1");
    if (curve == RatioCurve::Fixed &&
        (!(fixed_ratio >= 0.0) || !(fixed_ratio <= 1.0)))
      throw std::invalid_argument("CacheSchedule: fixed_ratio outside [0,1]");
  }

  static CacheSchedule linear(int warmup = 5, int sync = 10) {
    CacheSchedule s;
    s.warmup_steps = warmup;
    s.sync_interval = sync;
    s.curve = RatioCurve::Linear;
    return s;
  }
  static CacheSchedule fixed(double r, int warmup = 5, int sync = 10) {
    CacheSchedule s;
    s.warmup_steps = warmup;
    s.sync_interval = sync;
    s.curve = RatioCurve::Fixed;
    s.fixed_ratio = r;
    return s;
  }
};

/*
 * Cache ratio for step t of a total_steps-long run.  Returns 0 during
 * warmup and on every periodic-sync step; otherwise evaluates the curve.
 * A schedule whose warmup covers the whole run degenerates to r = 0
 * everywhere, i.e. to the full two-phase exchange.
 */
inline double ratio_at(int t, const CacheSchedule& sched, int total_steps) {
  sched.validate();
  if (t < 0 || t >= total_steps)
    throw std::invalid_argument("ratio_at: step outside [0, total_steps)");
  if (total_steps <= sched.warmup_steps) return 0.0;
  if (t < sched.warmup_steps) return 0.0;
  if ((t - sched.warmup_steps) % sched.sync_interval == 0) return 0.0;
  if (sched.curve == RatioCurve::Fixed) return sched.fixed_ratio;
  // Linear ramp: 0 at the first post-warmup step, 1 at step total_steps-1.
  const double denom =
      static_cast<double>(total_steps - 1 - sched.warmup_steps);
  const double r = static_cast<double>(t - sched.warmup_steps) / denom;
  return std::clamp(r, 0.0, 1.0);
}

/* --------------------------------------------------------------- selection */

/*
 * Given one change score per token row, split the rows into a cached set
 * (the floor(r*n) rows with the smallest scores — they changed least, so
 * their cached values are still good) and an active set (everything else,
 * which must be shipped).  Ties break toward caching the lower row index so
 * selection is deterministic.  Returns the active indices in ascending
 * order.
 */
inline std::vector<int> select_active_from_scores(
    const std::vector<double>& scores, double r) {
  if (!(r >= 0.0) || !(r <= 1.0))
    throw std::invalid_argument("select_active: ratio outside [0,1]");
  const int n = static_cast<int>(scores.size());
  const int cached = static_cast<int>(std::floor(r * n));
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });
  std::vector<int> active(order.begin() + cached, order.end());
  std::sort(active.begin(), active.end());
  return active;
}

/*
 * Active-row selection from tensors: score each row by the L1 distance
 * between the freshly exchanged values and the cached ones, then keep the
 * least-changed fraction r cached.  Runs on the designated tile of each
 * GPU, on that tile's head-column slice of V; the resulting index set
 * stands in for the whole token across Q, K and V.
 */
template <class S>
std::vector<int> select_active(const Mat<S>& v_new, const Mat<S>& v_cached,
                               double r) {
  if (v_new.rows() != v_cached.rows() || v_new.cols() != v_cached.cols())
    throw std::invalid_argument("select_active: tensor shapes differ");
  const auto dist = l1_rowdist(v_new, v_cached);
  std::vector<double> scores(static_cast<std::size_t>(dist.size()));
  for (Eigen::Index i = 0; i < dist.size(); ++i)
    scores[static_cast<std::size_t>(i)] = static_cast<double>(dist[i]);
  return select_active_from_scores(scores, r);
}

/*
 * Compact the active rows of x into a dense matrix (rows in index order)
 * and report the wire size of the result at the given per-value width.
 */
template <class S>
struct GatheredRows {
  Mat<S> rows;
  std::int64_t bytes = 0;
};

template <class S>
GatheredRows<S> gather_active(const Mat<S>& x, const std::vector<int>& idx,
                              int bytes_per_value) {
  if (bytes_per_value <= 0)
    throw std::invalid_argument("gather_active: bytes_per_value must be > 0");
  GatheredRows<S> out;
  out.rows = gather_rows(x, idx);
  out.bytes = static_cast<std::int64_t>(idx.size()) * x.cols() *
              bytes_per_value;
  return out;
}

/*
 * Receiver-side reconstruction: last step's full tensor with the shipped
 * rows overwritten in place of their stale predecessors.  Rows outside idx
 * are bit-identical to prev.
 */
template <class S>
Mat<S> scatter_reconstruct(const Mat<S>& prev, const Mat<S>& active_rows,
                           const std::vector<int>& idx) {
  if (static_cast<Eigen::Index>(idx.size()) != active_rows.rows())
    throw std::invalid_argument(
        "scatter_reconstruct: one index per shipped row");
  if (active_rows.rows() > 0 && active_rows.cols() != prev.cols())
    throw std::invalid_argument("scatter_reconstruct: column counts differ");
  Mat<S> out = prev;
  scatter_rows(out, idx, active_rows);
  return out;
}

/* ------------------------------------------------------------------ caches */

/*
 * Per-layer cache bank held by one rank.  Four tensors:
 *   - v_p1: the previous step's full intra-GPU exchange result for V (the
 *     selector's comparison baseline; populated only on the designated
 *     tile, tile 0 of each GPU, and refreshed in full every step);
 *   - q_p2 / k_p2 / v_p2: the head-parallel tensors assembled after the
 *     inter-GPU exchange, carried across steps so selective steps only
 *     overwrite the shipped rows.
 * Every cached value is a bit-copy of something that actually travelled
 * through an exchange — caches are never recomputed locally.
 *
 * row_update_step tracks, per global token row of the head-parallel
 * tensors, the step that last overwrote it; the periodic full sync bounds
 * the age of every row by the sync interval.
 */
template <class S>
struct ProjectionCacheT {
  Mat<S> v_p1;
  Mat<S> q_p2;
  Mat<S> k_p2;
  Mat<S> v_p2;
  int last_full_sync = -1;
  std::vector<int> row_update_step;  // one entry per head-parallel row

  /* Record a full-volume refresh of the head-parallel tensors at step t. */
  void note_full_update(int t) {
    last_full_sync = t;
    row_update_step.assign(
        static_cast<std::size_t>(std::max<Eigen::Index>(q_p2.rows(), 0)), t);
  }

  /* Record a selective refresh: only the given global rows were shipped. */
  void note_selective_update(int t, const std::vector<int>& global_rows) {
    for (int r : global_rows) {
      if (r < 0 || r >= static_cast<int>(row_update_step.size()))
        throw std::out_of_range("ProjectionCache: row outside the tensor");
      row_update_step[static_cast<std::size_t>(r)] = t;
    }
  }

  /* Age, in steps, of the stalest head-parallel row as of step t. */
  int max_row_age(int t) const {
    if (row_update_step.empty()) return 0;
    const int oldest =
        *std::min_element(row_update_step.begin(), row_update_step.end());
    return t - oldest;
  }
};

using ProjectionCache = ProjectionCacheT<double>;

/* Structured record of one layer's selection at one step, for debug dumps
 * and per-step reporting. */
struct SelectiveStats {
  int step = 0;
  int layer = 0;
  double ratio = 0.0;  // scheduled cache ratio at this step
  int active_rows = 0;
  int total_rows = 0;
  int max_row_age = 0;  // stalest head-parallel cache row after this step

  double active_fraction() const {
    return total_rows == 0 ? 1.0
                           : static_cast<double>(active_rows) / total_rows;
  }
};

/* -------------------------------------------------------------- accounting */

/*
 * Bytes of projection cache a single tile carries, at a nominal storage
 * width.  Per layer the four cached tensors are the same size — each holds
 * this tile's share of one full projection, batch * tokens * heads *
 * head_dim / world values — so the total is
 *
 *     layers * 4 * batch * tokens * (heads / world) * head_dim * width.
 *
 * The footprint grows linearly with the batch and shrinks inversely with
 * the world size at fixed model shape.
 */
inline std::int64_t cache_footprint_bytes(int layers, int batch, int tokens,
                                          int heads, int head_dim, int world,
                                          int bytes_per_value) {
  if (layers <= 0 || batch <= 0 || tokens <= 0 || heads <= 0 ||
      head_dim <= 0 || world <= 0 || bytes_per_value <= 0)
    throw std::invalid_argument(
        "cache_footprint_bytes: all arguments must be positive");
  if (heads % world != 0)
    throw std::invalid_argument(
        "cache_footprint_bytes: heads must divide evenly across the world");
  return static_cast<std::int64_t>(layers) * 4 * batch * tokens *
         (heads / world) * head_dim * bytes_per_value;
}

}  // namespace ulysim
