#pragma once
/*
 * dit.hpp — a miniature diffusion transformer whose attention tensors are
 * resharded through the simulated network, under a pluggable exchange mode.
 *
 * The model itself is deliberately small and fixed: L pre-norm-free blocks
 * of {QKV projection, per-head QK normalization, rotary embedding,
 * full (non-causal) attention, output projection, pointwise MLP}, driven by
 * a plain Euler denoising loop x <- x - (1/T) * F(x, t) from seeded Gaussian
 * noise, with a sinusoidal step embedding added before the first block.
 * Weights are randomly initialized — there is no training — so quality
 * statements are always relative: the flat-exchange run of the same seed is
 * the reference output.
 *
 * Every rank executes the same program on its token shard; the three
 * exchange modes move identical values along different routes:
 *
 *   flat      one direct all-to-all carrying Q, K and V together, then the
 *             mirror-image inverse after attention;
 *   tapa      the two-phase route (intra-GPU tile exchange, then the
 *             per-tile-index mesh), all legs blocking and at full volume;
 *   cocodiff  the two-phase route with V's first leg posted to the
 *             background channel before Q and K are computed, and — on
 *             steps where the cache schedule engages — only the
 *             most-changed token rows shipped, receivers patching their
 *             cached head-parallel tensors in place.
 *
 * Full-volume routes only rearrange data, so flat, tapa and cocodiff with
 * the cache disabled produce bit-identical hidden states; selective steps
 * are the one deliberate approximation in the system.
 *
 * Modeled time is injected per named operation (ComputeCosts) and charged
 * on the simulator clocks; the host-side arithmetic itself is exact and
 * identical across modes.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "ulysim/collectives.hpp"
#include "ulysim/kernels.hpp"
#include "ulysim/schedule.hpp"
#include "ulysim/simnet.hpp"
#include "ulysim/topology.hpp"
#include "ulysim/vmajor.hpp"

namespace ulysim {

/* ------------------------------------------------------------------ config */

struct ModelConfig {
  int layers = 4;
  int heads = 12;
  int head_dim = 16;
  int tokens = 96;  // per sequence, across all ranks
  int batch = 2;
  std::uint64_t weight_seed = 1;

  int model_dim() const { return heads * head_dim; }

  ShardDims shard_dims() const {
    ShardDims d;
    d.batch = batch;
    d.tokens = tokens;
    d.heads = heads;
    d.head_dim = head_dim;
    return d;
  }

  /* Shape checks that do not involve the parallel layout. */
  void validate_shape() const {
    if (layers < 1)
      throw std::invalid_argument("[dit] layers must be >= 1");
    if (heads < 1 || head_dim < 1 || tokens < 1 || batch < 1)
      throw std::invalid_argument(fmt::format(
          "[dit] non-positive extent in heads={} head_dim={} tokens={} "
          "batch={}",
          heads, head_dim, tokens, batch));
    if (head_dim % 2 != 0)
      throw std::invalid_argument(fmt::format(
          "[dit] head_dim={} must be even for rotary channel pairs",
          head_dim));
  }

  /* Shape checks plus the even-split requirements of the rank layout. */
  void validate(const TopologyConfig& topo) const {
    validate_shape();
    const int P = topo.world_size();
    if (tokens % P != 0)
      throw std::invalid_argument(fmt::format(
          "[dit] tokens N={} must split evenly over P={} ranks", tokens, P));
    if (heads % P != 0)
      throw std::invalid_argument(fmt::format(
          "[dit] heads H={} must split evenly over P={} ranks", heads, P));
  }
};

struct DenoiseConfig {
  int steps = 20;
  std::uint64_t noise_seed = 2;

  void validate() const {
    if (steps < 1)
      throw std::invalid_argument("[dit] denoising needs at least one step");
  }
};

/* ----------------------------------------------------------------- weights */

struct LayerWeights {
  Mat<float> w_q, w_k, w_v, w_o;  // D x D
  Vec<float> q_gains, k_gains;    // per-channel normalization gains
  Mat<float> w_mlp_in;            // D x 4D
  Mat<float> w_mlp_out;           // 4D x D
};

namespace detail {

/* Independent deterministic stream per (seed, layer, slot). */
inline std::uint64_t weight_stream_seed(std::uint64_t seed, int layer,
                                        int slot) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL *
                               (static_cast<std::uint64_t>(layer) * 16 +
                                static_cast<std::uint64_t>(slot) + 1);
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

/* Gaussian fill in Eigen storage (column-major) order; values are drawn in
 * double and rounded once to the working precision. */
inline Mat<float> gaussian_matrix(std::uint64_t seed, Eigen::Index rows,
                                  Eigen::Index cols, double center,
                                  double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat<float> m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r)
      m(r, c) = static_cast<float>(center + scale * normal(rng));
  return m;
}

inline Vec<float> gaussian_vector(std::uint64_t seed, Eigen::Index n,
                                  double center, double scale) {
  return gaussian_matrix(seed, n, 1, center, scale).col(0);
}

}  // namespace detail

/* Replicated, read-only layer weights: matrices at a small scale around
 * zero, normalization gains jittered around unity with the same scale. */
inline LayerWeights make_layer_weights(const ModelConfig& m, int layer) {
  m.validate_shape();
  if (layer < 0 || layer >= m.layers)
    throw std::out_of_range("[dit] layer index outside the model");
  constexpr double kScale = 0.02;
  const Eigen::Index D = m.model_dim();
  auto mat = [&](int slot, Eigen::Index rows, Eigen::Index cols,
                 double center) {
    return detail::gaussian_matrix(
        detail::weight_stream_seed(m.weight_seed, layer, slot), rows, cols,
        center, kScale);
  };
  LayerWeights w;
  w.w_q = mat(0, D, D, 0.0);
  w.w_k = mat(1, D, D, 0.0);
  w.w_v = mat(2, D, D, 0.0);
  w.w_o = mat(3, D, D, 0.0);
  w.w_mlp_in = mat(4, D, 4 * D, 0.0);
  w.w_mlp_out = mat(5, 4 * D, D, 0.0);
  w.q_gains = detail::gaussian_vector(
      detail::weight_stream_seed(m.weight_seed, layer, 6), D, 1.0, kScale);
  w.k_gains = detail::gaussian_vector(
      detail::weight_stream_seed(m.weight_seed, layer, 7), D, 1.0, kScale);
  return w;
}

inline std::vector<LayerWeights> make_weights(const ModelConfig& m) {
  std::vector<LayerWeights> w;
  w.reserve(static_cast<std::size_t>(m.layers));
  for (int l = 0; l < m.layers; ++l) w.push_back(make_layer_weights(m, l));
  return w;
}

/* ------------------------------------------------------- inputs and costs */

/* Seeded standard-normal starting latent [batch*tokens x D], generated
 * row-major so every rank derives identical values before slicing off its
 * shard. */
inline Mat<float> initial_latent(const ModelConfig& m,
                                 std::uint64_t noise_seed) {
  m.validate_shape();
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat<float> x(static_cast<Eigen::Index>(m.batch) * m.tokens, m.model_dim());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      x(r, c) = static_cast<float>(normal(rng));
  return x;
}

/* Classic sinusoidal code of width dim evaluated at the step index. */
inline Vec<float> timestep_embedding(int dim, int step) {
  if (dim < 2 || dim % 2 != 0)
    throw std::invalid_argument(
        "[dit] embedding width must be even and >= 2");
  Vec<float> e(dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    e[2 * i] = static_cast<float>(std::sin(step * freq));
    e[2 * i + 1] = static_cast<float>(std::cos(step * freq));
  }
  return e;
}

/* Exact (erf-based) GELU, elementwise, evaluated in double and rounded
 * once to the working precision. */
template <class S>
Mat<S> gelu(const Mat<S>& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Mat<S> y(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double v = static_cast<double>(x(r, c));
      y(r, c) = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
  return y;
}

/*
 * Modeled per-operation times from arithmetic element counts at a nominal
 * device throughput (values/s).  The constants are plain operation counts
 * of the kernels involved; absolute accuracy is irrelevant — these only
 * need to scale sensibly with the model so overlap behavior is plausible.
 * The background handoff overhead stays zero unless set explicitly.
 */
inline ComputeCosts derive_compute_costs(const TopologyConfig& topo,
                                         const ModelConfig& m,
                                         double values_per_second = 50e12) {
  if (!(values_per_second > 0.0))
    throw std::invalid_argument("[dit] throughput must be > 0");
  m.validate(topo);
  const double P = topo.world_size();
  const double D = m.model_dim();
  const double N = m.tokens;
  const double d = m.head_dim;
  const double rows = m.batch * N / P;             // tokens projected here
  const double heads_here = m.heads / P;           // heads attended here
  const double rows_gpu = m.batch * (N / P) * topo.tiles_per_gpu;
  ComputeCosts cc;
  cc.c_v = 2.0 * rows * D * D / values_per_second;
  cc.c_q = (2.0 * rows * D * D + 8.0 * rows * D) / values_per_second;
  cc.c_k = cc.c_q;
  cc.c_attn = m.batch * heads_here * (4.0 * N * N * d + 3.0 * N * N) /
              values_per_second;
  cc.c_misc =
      (18.0 * rows * D * D + 10.0 * rows * D) / values_per_second;
  cc.c_sel = 3.0 * rows_gpu * (D / topo.tiles_per_gpu) / values_per_second;
  cc.c_off = 0.0;
  return cc;
}

/* ------------------------------------------------- shared per-block math */

namespace detail {

/* Q/K branch: projection, per-head normalization, rotary embedding.  One
 * definition serves the parallel path and the single-process reference so
 * their floating-point expressions are literally identical. */
template <class S>
Mat<S> qk_path(const Mat<S>& h, const Mat<S>& w, const Vec<S>& gains,
               const std::vector<double>& positions, int heads) {
  return rope(rmsnorm(Mat<S>(project(h, w)), gains, heads), positions,
              heads);
}

/* Post-attention tail: output projection with residual, then the pointwise
 * MLP with residual. */
template <class S>
Mat<S> block_tail(const Mat<S>& h, const Mat<S>& attn_out,
                  const LayerWeights& w) {
  Mat<S> y = h + Mat<S>(project(attn_out, w.w_o));
  Mat<S> act = gelu(Mat<S>(project(y, w.w_mlp_in)));
  return y + Mat<S>(project(act, w.w_mlp_out));
}

/* Absolute token index of every shard row (batch-major rows, token offset
 * per rank). */
inline std::vector<double> shard_positions(int batch, int rows_per_seq,
                                           int first_token) {
  std::vector<double> pos(static_cast<std::size_t>(batch) * rows_per_seq);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < rows_per_seq; ++i)
      pos[static_cast<std::size_t>(b) * rows_per_seq + i] = first_token + i;
  return pos;
}

}  // namespace detail

/* --------------------------------------------------- reference execution */

/*
 * Single-process forward of one block on the full hidden tensor
 * [batch*tokens x D].  Parallel full-volume runs must reproduce it bit for
 * bit at P = 1 (and produce the same values at any P, head block by head
 * block).
 */
inline Mat<float> reference_block_forward(const ModelConfig& m,
                                          const LayerWeights& w,
                                          const Mat<float>& h,
                                          bool identity_attention = false) {
  m.validate_shape();
  if (h.rows() != static_cast<Eigen::Index>(m.batch) * m.tokens ||
      h.cols() != m.model_dim())
    throw std::invalid_argument("[dit] hidden tensor has the wrong shape");
  const auto pos = detail::shard_positions(m.batch, m.tokens, 0);
  Mat<float> v = project(h, w.w_v);
  Mat<float> q = detail::qk_path(h, w.w_q, w.q_gains, pos, m.heads);
  Mat<float> k = detail::qk_path(h, w.w_k, w.k_gains, pos, m.heads);
  Mat<float> attn =
      identity_attention ? v : attention(q, k, v, m.batch, m.heads);
  return detail::block_tail(h, attn, w);
}

/* Full denoising loop in a single process, no communication anywhere. */
inline Mat<float> reference_denoise(const ModelConfig& m,
                                    const DenoiseConfig& dn) {
  m.validate_shape();
  dn.validate();
  const auto weights = make_weights(m);
  Mat<float> x = initial_latent(m, dn.noise_seed);
  const float euler = static_cast<float>(1.0 / dn.steps);
  for (int t = 0; t < dn.steps; ++t) {
    Mat<float> h = x;
    h.rowwise() += timestep_embedding(m.model_dim(), t).transpose();
    for (int l = 0; l < m.layers; ++l)
      h = reference_block_forward(m, weights[static_cast<std::size_t>(l)], h);
    x -= euler * h;
  }
  return x;
}

/* ------------------------------------------------------------- run driver */

struct DitRunOptions {
  int wire_bytes_per_value = 4;
  ComputeCosts costs = {};      // modeled op times; c_off is the background
                                // handoff overhead as well
  CacheSchedule schedule = {};  // consulted only in cocodiff mode

  bool identity_attention = false;  // diagnostic: pass V through unchanged
  bool record_v_coherence = false;  // per-step L1 drift of the V projection
  bool record_active_sets = false;  // keep every decoded active-row set

  // Diagnostic entry point: start from this latent instead of seeded noise.
  std::optional<Mat<float>> initial_latent_override;
};

struct DenoiseResult {
  Mat<float> latent;  // gathered [batch*tokens x D]

  double makespan = 0.0;
  std::vector<double> rank_clock;
  std::vector<Segment> timeline;          // merged, rank-major
  std::vector<TransferRecord> transfers;  // merged, rank-major

  // One record per (step, layer), taken on GPU 0's designated tile; active
  // counts are identical on every GPU by construction.  Cocodiff only.
  std::vector<SelectiveStats> selection;

  // [step*layers + layer][gpu] -> that GPU's active rows (GPU-block row
  // indices); empty per-step entry on full-volume steps.  Filled when
  // record_active_sets is set.  Cocodiff only.
  std::vector<std::vector<std::vector<int>>> active_sets;

  // [step][layer]: mean per-token L1 distance of the V projection from the
  // previous step (0 at step 0).  Filled when record_v_coherence is set.
  std::vector<std::vector<double>> v_drift;

  std::int64_t cache_bytes_per_rank = 0;  // allocated projection caches
};

namespace detail {

inline std::vector<int> decode_row_indices(const Bytes& blob) {
  if (blob.size() % 4 != 0)
    throw std::runtime_error("[dit] row-index message has a partial entry");
  std::vector<std::int32_t> raw(blob.size() / 4);
  if (!raw.empty()) std::memcpy(raw.data(), blob.data(), blob.size());
  return std::vector<int>(raw.begin(), raw.end());
}

inline Bytes encode_row_indices(const std::vector<int>& rows) {
  std::vector<std::int32_t> raw(rows.begin(), rows.end());
  Bytes blob(raw.size() * 4);
  if (!raw.empty()) std::memcpy(blob.data(), raw.data(), blob.size());
  return blob;
}

}  // namespace detail

/*
 * Run the full denoising loop as one simulated program per rank and gather
 * the final latent.  Throws on invalid configuration, on a non-finite
 * hidden state (identifying the first step and layer), and on any
 * cross-rank disagreement the run detects.
 */
inline DenoiseResult denoise(const TopologyConfig& topo,
                             const ModelConfig& model,
                             const DenoiseConfig& dn, RunMode mode,
                             const DitRunOptions& opts = {}) {
  topo.validate();
  model.validate(topo);
  dn.validate();
  opts.costs.validate();
  opts.schedule.validate();
  if (opts.wire_bytes_per_value <= 0)
    throw std::invalid_argument("[dit] wire_bytes_per_value must be > 0");

  const ShardDims dims = model.shard_dims();
  const int P = topo.world_size();
  const int L = model.layers;
  const int T = dn.steps;
  const int D = model.model_dim();
  const int N = model.tokens;
  const int B = model.batch;
  const int nl = dims.tokens_per_rank(topo);
  const int ng = dims.tokens_per_gpu(topo);
  const int tg = topo.tiles_per_gpu;
  const int G = P / tg;
  const int bc = dims.block_cols(topo);
  const int hpr = dims.heads_per_rank(topo);
  const int wire = opts.wire_bytes_per_value;
  const ComputeCosts cc = opts.costs;

  const std::vector<LayerWeights> weights = make_weights(model);
  Mat<float> x0;
  if (opts.initial_latent_override) {
    x0 = *opts.initial_latent_override;
    if (x0.rows() != static_cast<Eigen::Index>(B) * N || x0.cols() != D)
      throw std::invalid_argument(
          "[dit] initial latent override has the wrong shape");
  } else {
    x0 = initial_latent(model, dn.noise_seed);
  }
  std::vector<Vec<float>> embeddings;
  embeddings.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) embeddings.push_back(timestep_embedding(D, t));
  const float euler = static_cast<float>(1.0 / T);

  // Per-rank output slots (disjoint writes; no locking needed).
  struct FirstNonFinite {
    int step = std::numeric_limits<int>::max();
    int layer = std::numeric_limits<int>::max();
  };
  std::vector<Mat<float>> final_shard(static_cast<std::size_t>(P));
  std::vector<FirstNonFinite> nonfinite(static_cast<std::size_t>(P));
  std::vector<std::vector<std::vector<std::vector<int>>>> recorded_sets(
      static_cast<std::size_t>(P));
  std::vector<std::vector<std::vector<double>>> drift_sums(
      static_cast<std::size_t>(P));
  std::vector<SelectiveStats> selection;  // written by rank 0 only
  std::int64_t cache_bytes = 0;           // written by rank 0 only

  SimOptions sopts;
  sopts.offload_overhead = cc.c_off;
  Simulator sim(topo, sopts);

  sim.run([&](Rank& r) {
    const int me = r.id();
    const int my_gpu = gpu_linear_index(topo, me);
    const int my_tile = rank_to_coord(topo, me).tile;
    const bool designated = my_tile == 0;
    const std::vector<int> intra = gpu_ranks(topo, me);
    const std::vector<int> p2g = phase2_group(topo, me);
    std::vector<int> world_group(static_cast<std::size_t>(P));
    std::iota(world_group.begin(), world_group.end(), 0);
    const int my_intra_pos = static_cast<int>(
        std::find(intra.begin(), intra.end(), me) - intra.begin());
    const auto positions = detail::shard_positions(B, nl, me * nl);

    // This rank's token shard of the starting latent.
    Mat<float> x(static_cast<Eigen::Index>(B) * nl, D);
    for (int b = 0; b < B; ++b)
      x.middleRows(static_cast<Eigen::Index>(b) * nl, nl) =
          x0.middleRows(static_cast<Eigen::Index>(b) * N + me * nl, nl);

    std::vector<ProjectionCacheT<float>> caches;
    if (mode == RunMode::Cocodiff) {
      caches.resize(static_cast<std::size_t>(L));
      for (auto& c : caches) {
        c.v_p1 = Mat<float>::Zero(static_cast<Eigen::Index>(B) * ng,
                                  static_cast<Eigen::Index>(G) * bc);
        c.q_p2 = Mat<float>::Zero(static_cast<Eigen::Index>(B) * N, bc);
        c.k_p2 = c.q_p2;
        c.v_p2 = c.q_p2;
      }
      if (me == 0) {
        std::int64_t total = 0;
        for (const auto& c : caches)
          total += static_cast<std::int64_t>(c.v_p1.size() + c.q_p2.size() +
                                             c.k_p2.size() + c.v_p2.size()) *
                   static_cast<std::int64_t>(sizeof(float));
        cache_bytes = total;
      }
    }
    if (opts.record_active_sets)
      recorded_sets[static_cast<std::size_t>(me)].resize(
          static_cast<std::size_t>(T) * L);
    if (opts.record_v_coherence)
      drift_sums[static_cast<std::size_t>(me)].assign(
          static_cast<std::size_t>(T),
          std::vector<double>(static_cast<std::size_t>(L), 0.0));
    std::vector<Mat<float>> prev_v(
        static_cast<std::size_t>(opts.record_v_coherence ? L : 0));

    auto block = [&](const Mat<float>& h, int l, int step) -> Mat<float> {
      const LayerWeights& w = weights[static_cast<std::size_t>(l)];

      // V first: it only needs the projection, so its exchange can start
      // while Q and K are still being computed.
      r.compute(cc.c_v, "v_proj");
      Mat<float> V = project(h, w.w_v);
      if (opts.record_v_coherence) {
        auto& slot = prev_v[static_cast<std::size_t>(l)];
        if (step > 0)
          drift_sums[static_cast<std::size_t>(me)]
                    [static_cast<std::size_t>(step)]
                    [static_cast<std::size_t>(l)] =
                        l1_rowdist(V, slot).template cast<double>().sum();
        slot = V;
      }

      Mat<float> q_slab, k_slab, v_slab;  // head-parallel [B*N x bc]

      if (mode == RunMode::Flat) {
        r.compute(cc.c_q, "q_path");
        Mat<float> Q = detail::qk_path(h, w.w_q, w.q_gains, positions,
                                       model.heads);
        r.compute(cc.c_k, "k_path");
        Mat<float> K = detail::qk_path(h, w.w_k, w.k_gains, positions,
                                       model.heads);

        // One direct exchange carrying all three tensors: per destination,
        // the Q, K and V blocks ride back to back in one message.
        auto opq = pack_flat<float>(topo, dims, me, Q, wire);
        auto opk = pack_flat<float>(topo, dims, me, K, wire);
        auto opv = pack_flat<float>(topo, dims, me, V, wire);
        std::vector<std::int64_t> bytes(static_cast<std::size_t>(P));
        std::vector<Bytes> payload(static_cast<std::size_t>(P));
        for (int j = 0; j < P; ++j) {
          const auto ju = static_cast<std::size_t>(j);
          bytes[ju] = 3 * opq.bytes_to[ju];
          Bytes m;
          m.reserve(opq.payloads[ju].size() + opk.payloads[ju].size() +
                    opv.payloads[ju].size());
          m.insert(m.end(), opq.payloads[ju].begin(), opq.payloads[ju].end());
          m.insert(m.end(), opk.payloads[ju].begin(), opk.payloads[ju].end());
          m.insert(m.end(), opv.payloads[ju].begin(), opv.payloads[ju].end());
          payload[ju] = std::move(m);
        }
        auto inbox = r.all_to_all(world_group, bytes, std::move(payload),
                                  CommPolicy::PairwiseRounds, "flat_a2a",
                                  "flat_a2a");
        std::vector<Bytes> iq(static_cast<std::size_t>(P)),
            ik(static_cast<std::size_t>(P)), iv(static_cast<std::size_t>(P));
        for (int j = 0; j < P; ++j) {
          const auto ju = static_cast<std::size_t>(j);
          const Bytes& m = inbox[ju];
          if (m.size() % 3 != 0)
            throw std::runtime_error(
                "[dit] combined exchange message not splittable in three");
          const std::size_t third = m.size() / 3;
          iq[ju].assign(m.begin(), m.begin() + third);
          ik[ju].assign(m.begin() + third, m.begin() + 2 * third);
          iv[ju].assign(m.begin() + 2 * third, m.end());
        }
        q_slab = unpack_flat<float>(topo, dims, me, iq);
        k_slab = unpack_flat<float>(topo, dims, me, ik);
        v_slab = unpack_flat<float>(topo, dims, me, iv);
      } else if (mode == RunMode::Tapa) {
        r.compute(cc.c_q, "q_path");
        Mat<float> Q = detail::qk_path(h, w.w_q, w.q_gains, positions,
                                       model.heads);
        r.compute(cc.c_k, "k_path");
        Mat<float> K = detail::qk_path(h, w.w_k, w.k_gains, positions,
                                       model.heads);
        Mat<float> vi =
            tapa_phase1<float>(r, dims, V, wire, "vp1", "tapa_p1");
        Mat<float> qi =
            tapa_phase1<float>(r, dims, Q, wire, "qp1", "tapa_p1");
        Mat<float> ki =
            tapa_phase1<float>(r, dims, K, wire, "kp1", "tapa_p1");
        v_slab = tapa_phase2<float>(r, dims, vi, wire, "vp2", "tapa_p2");
        q_slab = tapa_phase2<float>(r, dims, qi, wire, "qp2", "tapa_p2");
        k_slab = tapa_phase2<float>(r, dims, ki, wire, "kp2", "tapa_p2");
      } else {
        // cocodiff: V's intra-GPU leg rides the background channel while Q
        // and K are still being computed.
        auto op_v1 = pack_phase1<float>(topo, dims, me, V, wire);
        const BgHandle h_v1 = r.post_all_to_all(
            intra, op_v1.bytes_to,
            [p = std::move(op_v1.payloads)]() { return p; },
            CommPolicy::PairwiseRounds, "vp1", "tapa_p1");

        r.compute(cc.c_q, "q_path");
        Mat<float> Q = detail::qk_path(h, w.w_q, w.q_gains, positions,
                                       model.heads);
        r.compute(cc.c_k, "k_path");
        Mat<float> K = detail::qk_path(h, w.w_k, w.k_gains, positions,
                                       model.heads);

        auto v1_inbox = r.wait(h_v1);
        Mat<float> vi = unpack_phase1<float>(topo, dims, me, v1_inbox);

        ProjectionCacheT<float>& cache = caches[static_cast<std::size_t>(l)];
        const double ratio = ratio_at(step, opts.schedule, T);
        const bool selective = ratio > 0.0;
        std::vector<std::vector<int>> actives;

        if (selective) {
          // The designated tile scores its head slice of V against last
          // step's values and broadcasts the chosen row set to everyone.
          Bytes blob;
          if (designated) {
            r.compute(cc.c_sel, "select");
            std::vector<int> act;
            if (vi.allFinite() && cache.v_p1.allFinite()) {
              act = select_active(vi, cache.v_p1, ratio);
            } else {
              // Scores would be meaningless (and unsortable); ship every
              // row and let the non-finite check below abort the run.
              act.resize(static_cast<std::size_t>(B) * ng);
              std::iota(act.begin(), act.end(), 0);
            }
            blob = detail::encode_row_indices(act);
          }
          std::vector<std::int64_t> agb(static_cast<std::size_t>(P), 0);
          std::vector<Bytes> agp(static_cast<std::size_t>(P));
          if (designated) {
            for (int j = 0; j < P; ++j) {
              const auto ju = static_cast<std::size_t>(j);
              if (j != me)
                agb[ju] = static_cast<std::int64_t>(blob.size());
              agp[ju] = blob;
            }
          }
          auto ag_in = r.all_to_all(world_group, agb, std::move(agp),
                                    CommPolicy::SlowestLinkSerial,
                                    "idx_allgather", "idx_allgather");
          actives.resize(static_cast<std::size_t>(G));
          for (int g = 0; g < G; ++g)
            actives[static_cast<std::size_t>(g)] = detail::decode_row_indices(
                ag_in[static_cast<std::size_t>(g) * tg]);
        }

        const std::vector<int>* own =
            selective ? &actives[static_cast<std::size_t>(my_gpu)] : nullptr;
        const std::int64_t p2_rows =
            selective ? static_cast<std::int64_t>(own->size())
                      : static_cast<std::int64_t>(B) * ng;
        const auto p2_bytes = phase2_wire_sizes(topo, dims, me, p2_rows, wire);

        const BgHandle h_v2 = r.post_all_to_all(
            p2g, p2_bytes,
            [&, own]() {
              return pack_phase2<float>(topo, dims, me, vi, wire, own, true)
                  .payloads;
            },
            CommPolicy::ConcurrentMesh, "vp2", "tapa_p2");

        std::vector<std::int64_t> p1_bytes(static_cast<std::size_t>(tg));
        if (selective) {
          const auto sender = phase1_selective_wire_sizes(topo, dims, *own,
                                                          wire);
          p1_bytes.assign(static_cast<std::size_t>(tg),
                          sender[static_cast<std::size_t>(my_tile)]);
        } else {
          p1_bytes.assign(static_cast<std::size_t>(tg),
                          dims.pair_values(topo) * G * wire);
        }
        p1_bytes[static_cast<std::size_t>(my_intra_pos)] = 0;

        auto build_p1 = [&, own](const Mat<float>& tensor) {
          return (selective
                      ? pack_phase1_selective<float>(topo, dims, me, tensor,
                                                     *own, wire)
                      : pack_phase1<float>(topo, dims, me, tensor, wire))
              .payloads;
        };
        const BgHandle h_q1 = r.post_all_to_all(
            intra, p1_bytes, [&]() { return build_p1(Q); },
            CommPolicy::PairwiseRounds, "qp1", "tapa_p1");
        const BgHandle h_k1 = r.post_all_to_all(
            intra, p1_bytes, [&]() { return build_p1(K); },
            CommPolicy::PairwiseRounds, "kp1", "tapa_p1");

        // The phase-2 builders consume the phase-1 results through the
        // engine: those ops are never waited on directly, so their inboxes
        // stay readable here.
        auto assemble_inter = [&, own](const std::vector<Bytes>& inbox) {
          if (!selective) return unpack_phase1<float>(topo, dims, me, inbox);
          Mat<float> inter =
              Mat<float>::Zero(static_cast<Eigen::Index>(B) * ng,
                               static_cast<Eigen::Index>(G) * bc);
          unpack_phase1_selective<float>(topo, dims, me, inbox, *own, inter);
          return inter;
        };
        const BgHandle h_q2 = r.post_all_to_all(
            p2g, p2_bytes,
            [&, own]() {
              Mat<float> qi = assemble_inter(r.bg_result(h_q1));
              return pack_phase2<float>(topo, dims, me, qi, wire, own,
                                        !selective)
                  .payloads;
            },
            CommPolicy::ConcurrentMesh, "qp2", "tapa_p2");
        const BgHandle h_k2 = r.post_all_to_all(
            p2g, p2_bytes,
            [&, own]() {
              Mat<float> ki = assemble_inter(r.bg_result(h_k1));
              return pack_phase2<float>(topo, dims, me, ki, wire, own,
                                        !selective)
                  .payloads;
            },
            CommPolicy::ConcurrentMesh, "kp2", "tapa_p2");

        auto v2_in = r.wait(h_v2);
        auto q2_in = r.wait(h_q2);
        auto k2_in = r.wait(h_k2);
        if (selective) {
          scatter_phase2<float>(topo, dims, me, v2_in, actives, cache.v_p2,
                                true);
          scatter_phase2<float>(topo, dims, me, q2_in, actives, cache.q_p2,
                                false);
          scatter_phase2<float>(topo, dims, me, k2_in, actives, cache.k_p2,
                                false);
          std::vector<int> global_rows;
          for (int g = 0; g < G; ++g)
            for (int row : actives[static_cast<std::size_t>(g)])
              global_rows.push_back((row / ng) * N + g * ng + row % ng);
          cache.note_selective_update(step, global_rows);
        } else {
          cache.v_p2 = unpack_phase2<float>(topo, dims, me, v2_in);
          cache.q_p2 = unpack_phase2<float>(topo, dims, me, q2_in);
          cache.k_p2 = unpack_phase2<float>(topo, dims, me, k2_in);
          cache.note_full_update(step);
        }
        v_slab = cache.v_p2;
        q_slab = cache.q_p2;
        k_slab = cache.k_p2;
        if (designated) cache.v_p1 = vi;  // selector baseline, every step

        if (me == 0) {
          SelectiveStats st;
          st.step = step;
          st.layer = l;
          st.ratio = ratio;
          st.total_rows = B * ng;
          st.active_rows =
              selective ? static_cast<int>(actives[0].size()) : B * ng;
          st.max_row_age = cache.max_row_age(step);
          selection.push_back(st);
        }
        if (opts.record_active_sets)
          recorded_sets[static_cast<std::size_t>(me)]
                       [static_cast<std::size_t>(step) * L +
                        static_cast<std::size_t>(l)] = actives;
      }

      r.compute(cc.c_attn, "attention");
      Mat<float> attn = opts.identity_attention
                            ? v_slab
                            : attention(q_slab, k_slab, v_slab, B, hpr);
      Mat<float> back =
          mode == RunMode::Flat
              ? flat_alltoall_inverse<float>(r, dims, attn, wire)
              : tapa_alltoall_inverse<float>(r, dims, attn, wire);
      r.compute(cc.c_misc, "mlp");
      return detail::block_tail(h, back, w);
    };

    for (int t = 0; t < T; ++t) {
      Mat<float> h = x;
      h.rowwise() += embeddings[static_cast<std::size_t>(t)].transpose();
      for (int l = 0; l < L; ++l) {
        h = block(h, l, t);
        auto& err = nonfinite[static_cast<std::size_t>(me)];
        if (err.step == std::numeric_limits<int>::max() && !h.allFinite()) {
          err.step = t;
          err.layer = l;
        }
      }
      x -= euler * h;
    }
    final_shard[static_cast<std::size_t>(me)] = std::move(x);
  });

  FirstNonFinite first;
  for (const auto& e : nonfinite)
    if (e.step < first.step ||
        (e.step == first.step && e.layer < first.layer))
      first = e;
  if (first.step != std::numeric_limits<int>::max())
    throw std::runtime_error(
        fmt::format("[dit] non-finite hidden state at step {}, layer {}",
                    first.step, first.layer));

  if (opts.record_active_sets)
    for (int rk = 1; rk < P; ++rk)
      if (recorded_sets[static_cast<std::size_t>(rk)] != recorded_sets[0])
        throw std::logic_error(fmt::format(
            "[dit] rank {} decoded different active-row sets than rank 0",
            rk));

  DenoiseResult out;
  out.latent.resize(static_cast<Eigen::Index>(B) * N, D);
  for (int rk = 0; rk < P; ++rk)
    for (int b = 0; b < B; ++b)
      out.latent.middleRows(static_cast<Eigen::Index>(b) * N + rk * nl, nl) =
          final_shard[static_cast<std::size_t>(rk)].middleRows(
              static_cast<Eigen::Index>(b) * nl, nl);
  out.makespan = sim.makespan();
  out.rank_clock.resize(static_cast<std::size_t>(P));
  for (int rk = 0; rk < P; ++rk)
    out.rank_clock[static_cast<std::size_t>(rk)] = sim.clock(rk);
  out.timeline = sim.merged_timeline();
  out.transfers = sim.merged_transfers();
  out.selection = std::move(selection);
  if (opts.record_active_sets) out.active_sets = std::move(recorded_sets[0]);
  if (opts.record_v_coherence) {
    out.v_drift.assign(static_cast<std::size_t>(T),
                       std::vector<double>(static_cast<std::size_t>(L), 0.0));
    const double tokens_total = static_cast<double>(B) * N;
    for (int rk = 0; rk < P; ++rk)
      for (int t = 0; t < T; ++t)
        for (int l = 0; l < L; ++l)
          out.v_drift[static_cast<std::size_t>(t)]
                     [static_cast<std::size_t>(l)] +=
              drift_sums[static_cast<std::size_t>(rk)]
                        [static_cast<std::size_t>(t)]
                        [static_cast<std::size_t>(l)] /
              tokens_total;
  }
  out.cache_bytes_per_rank = cache_bytes;
  return out;
}

}  // namespace ulysim
