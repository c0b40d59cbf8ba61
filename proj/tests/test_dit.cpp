#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

#include "doctest.h"
#include "ulysim/dit.hpp"

using namespace ulysim;

namespace {

TopologyConfig make(int nodes, int gpus, int tiles) {
  TopologyConfig t;
  t.nodes = nodes;
  t.gpus_per_node = gpus;
  t.tiles_per_gpu = tiles;
  return t;
}

ModelConfig model_cfg(int layers, int tokens, int heads, int head_dim,
                      int batch, std::uint64_t seed = 1) {
  ModelConfig m;
  m.layers = layers;
  m.tokens = tokens;
  m.heads = heads;
  m.head_dim = head_dim;
  m.batch = batch;
  m.weight_seed = seed;
  return m;
}

bool same_bits(const Mat<float>& a, const Mat<float>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(),
                     sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

double max_abs_diff(const Mat<float>& a, const Mat<float>& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

double mse(const Mat<float>& a, const Mat<float>& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  double s = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c)
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      const double d =
          static_cast<double>(a(r, c)) - static_cast<double>(b(r, c));
      s += d * d;
    }
  return s / static_cast<double>(a.size());
}

std::int64_t label_bytes(const std::vector<TransferRecord>& transfers,
                         std::string_view label) {
  std::int64_t s = 0;
  for (const auto& t : transfers)
    if (t.label == label) s += t.bytes;
  return s;
}

}  // namespace

TEST_CASE("single-rank run reproduces the reference forward bit for bit") {
  const auto topo = make(1, 1, 1);
  const auto m = model_cfg(2, 8, 2, 4, 2, 11);
  const DenoiseConfig dn{3, 21};
  const auto ref = reference_denoise(m, dn);
  const auto run = denoise(topo, m, dn, RunMode::Flat);
  CHECK(same_bits(run.latent, ref));
  CHECK(run.makespan > 0.0);
}

TEST_CASE("one denoising step is exactly one Euler update") {
  const auto m = model_cfg(2, 8, 4, 4, 2, 5);
  const DenoiseConfig dn{1, 33};
  const int D = m.model_dim();

  // Hand-rolled x - (1/T) * F(x, 0) with T = 1.
  const auto weights = make_weights(m);
  const Mat<float> x0 = initial_latent(m, dn.noise_seed);
  Mat<float> h = x0;
  h.rowwise() += timestep_embedding(D, 0).transpose();
  for (int l = 0; l < m.layers; ++l)
    h = reference_block_forward(m, weights[static_cast<std::size_t>(l)], h);
  Mat<float> expected = x0;
  expected -= 1.0f * h;

  CHECK(same_bits(reference_denoise(m, dn), expected));
  CHECK(same_bits(denoise(make(1, 1, 1), m, dn, RunMode::Flat).latent,
                  expected));
  // Across ranks the same values flow through real exchanges; the gathered
  // result agrees to rounding differences of the sharded projections only.
  const auto par = denoise(make(1, 2, 2), m, dn, RunMode::Flat);
  CHECK(max_abs_diff(par.latent, expected) < 1e-4);
}

TEST_CASE("full-volume modes produce bit-identical latents at P=12") {
  const auto topo = make(1, 6, 2);
  const auto m = model_cfg(2, 24, 12, 4, 2, 7);
  const DenoiseConfig dn{3, 9};

  const auto flat = denoise(topo, m, dn, RunMode::Flat);

  const auto tapa = denoise(topo, m, dn, RunMode::Tapa);
  CHECK(same_bits(tapa.latent, flat.latent));

  // Cache never engaged: warmup spans the whole run.
  DitRunOptions warm;
  warm.schedule = CacheSchedule::linear(dn.steps, 10);
  const auto cocod_warm = denoise(topo, m, dn, RunMode::Cocodiff, warm);
  CHECK(same_bits(cocod_warm.latent, flat.latent));

  // Cache ratio pinned to zero: every step ships full volume.
  DitRunOptions zero;
  zero.schedule = CacheSchedule::fixed(0.0, 1, 10);
  const auto cocod_zero = denoise(topo, m, dn, RunMode::Cocodiff, zero);
  CHECK(same_bits(cocod_zero.latent, tapa.latent));

  // Selection bookkeeping reports every step at full volume.
  for (const auto& st : cocod_warm.selection) {
    CHECK(st.ratio == 0.0);
    CHECK(st.active_rows == st.total_rows);
  }
}

TEST_CASE("identity attention makes block output independent of the mode") {
  const auto topo = make(1, 6, 2);
  const auto m = model_cfg(2, 24, 12, 4, 2, 3);
  const DenoiseConfig dn{2, 17};
  DitRunOptions opts;
  opts.identity_attention = true;
  opts.schedule = CacheSchedule::linear(dn.steps, 10);  // cache disabled

  const auto flat = denoise(topo, m, dn, RunMode::Flat, opts);
  const auto tapa = denoise(topo, m, dn, RunMode::Tapa, opts);
  const auto cocod = denoise(topo, m, dn, RunMode::Cocodiff, opts);
  CHECK(same_bits(flat.latent, tapa.latent));
  CHECK(same_bits(flat.latent, cocod.latent));
}

TEST_CASE("selective runs are deterministic and rank-consistent") {
  const auto topo = make(1, 2, 2);
  const auto m = model_cfg(2, 16, 4, 8, 2, 13);
  const DenoiseConfig dn{12, 41};
  const auto sched = CacheSchedule::linear(2, 5);
  DitRunOptions opts;
  opts.schedule = sched;
  opts.record_active_sets = true;  // also arms the cross-rank agreement check

  const auto a = denoise(topo, m, dn, RunMode::Cocodiff, opts);
  const auto b = denoise(topo, m, dn, RunMode::Cocodiff, opts);
  CHECK(same_bits(a.latent, b.latent));
  CHECK(a.makespan == b.makespan);
  CHECK(a.active_sets == b.active_sets);

  const ShardDims dims = m.shard_dims();
  const int n = m.batch * dims.tokens_per_gpu(topo);
  const int L = m.layers;
  const int G = topo.world_size() / topo.tiles_per_gpu;
  REQUIRE(static_cast<int>(a.selection.size()) == dn.steps * L);
  for (int t = 0; t < dn.steps; ++t) {
    const double r = ratio_at(t, sched, dn.steps);
    const int expected_active = n - static_cast<int>(std::floor(r * n));
    for (int l = 0; l < L; ++l) {
      const auto& st = a.selection[static_cast<std::size_t>(t * L + l)];
      CHECK(st.step == t);
      CHECK(st.layer == l);
      CHECK(st.ratio == r);
      CHECK(st.total_rows == n);
      CHECK(st.active_rows == expected_active);
      CHECK(st.max_row_age <= sched.sync_interval - 1);

      const auto& sets = a.active_sets[static_cast<std::size_t>(t * L + l)];
      if (r == 0.0) {
        CHECK(sets.empty());
      } else {
        REQUIRE(static_cast<int>(sets.size()) == G);
        for (const auto& rows : sets) {
          CHECK(static_cast<int>(rows.size()) == expected_active);
          CHECK(std::is_sorted(rows.begin(), rows.end()));
          for (std::size_t i = 0; i + 1 < rows.size(); ++i)
            CHECK(rows[i] < rows[i + 1]);
          if (!rows.empty()) {
            CHECK(rows.front() >= 0);
            CHECK(rows.back() < n);
          }
        }
      }
    }
  }
}

TEST_CASE("transfer ledger obeys the selective volume law") {
  const auto topo = make(1, 2, 2);
  const auto m = model_cfg(2, 16, 4, 8, 2, 19);
  const int T = 6;
  const DenoiseConfig dn{T, 55};
  const ShardDims dims = m.shard_dims();
  const int P = topo.world_size();
  const int tg = topo.tiles_per_gpu;
  const int G = P / tg;
  const int bc = dims.block_cols(topo);
  const int wire = 4;
  const int n = m.batch * dims.tokens_per_gpu(topo);
  const std::int64_t pv = dims.pair_values(topo);

  // One full phase-1 leg, totalled over all senders of one layer.
  const std::int64_t p1_full =
      static_cast<std::int64_t>(P) * (tg - 1) * pv * G * wire;
  // One full phase-2 leg, totalled over all senders of one layer.
  const std::int64_t p2_full = static_cast<std::int64_t>(tg) * (G - 1) * G *
                               n * bc * wire;

  for (const double r : {0.25, 0.5, 0.75}) {
    // warmup=1 makes step 0 full, the first post-warmup step is a periodic
    // sync, and every later step runs at the fixed ratio.
    DitRunOptions opts;
    opts.schedule = CacheSchedule::fixed(r, 1, T);
    opts.wire_bytes_per_value = wire;
    const auto run = denoise(topo, m, dn, RunMode::Cocodiff, opts);

    const int count = n - static_cast<int>(std::floor(r * n));
    const int full_steps = 2;
    const int sel_steps = T - full_steps;
    const int L = m.layers;

    // Selective phase-2 volume is the active fraction of the full volume,
    // exactly: per layer it is p2_full * count / n with no rounding.
    const std::int64_t p2_sel =
        static_cast<std::int64_t>(tg) * (G - 1) * G * count * bc * wire;
    CHECK(p2_sel * n == p2_full * count);

    const std::int64_t expect_p2 =
        static_cast<std::int64_t>(L) *
        (full_steps * p2_full + static_cast<std::int64_t>(sel_steps) * p2_sel);
    CHECK(label_bytes(run.transfers, "vp2") == expect_p2);
    CHECK(label_bytes(run.transfers, "qp2") == expect_p2);
    CHECK(label_bytes(run.transfers, "kp2") == expect_p2);

    // V's first leg never shrinks: the selector needs the complete result.
    CHECK(label_bytes(run.transfers, "vp1") ==
          static_cast<std::int64_t>(T) * L * p1_full);

    // Q/K first legs ship only the active rows on selective steps.  Row
    // ownership splits across tiles, but the total over a GPU is the
    // active count, so the per-layer total is exact.
    const std::int64_t p1_sel = static_cast<std::int64_t>(tg - 1) * G * bc *
                                wire * (static_cast<std::int64_t>(G) * count);
    const std::int64_t expect_p1 =
        static_cast<std::int64_t>(L) *
        (full_steps * p1_full + static_cast<std::int64_t>(sel_steps) * p1_sel);
    CHECK(label_bytes(run.transfers, "qp1") == expect_p1);
    CHECK(label_bytes(run.transfers, "kp1") == expect_p1);

    // Index broadcast: each designated tile ships its GPU's active count at
    // four bytes per row index to every other rank, selective steps only.
    const std::int64_t expect_idx =
        static_cast<std::int64_t>(L) * sel_steps * G *
        (static_cast<std::int64_t>(count) * 4) * (P - 1);
    CHECK(label_bytes(run.transfers, "idx_allgather") == expect_idx);

    // The inverse path always runs at full volume.
    CHECK(label_bytes(run.transfers, "a2a_inv_p2") ==
          static_cast<std::int64_t>(T) * L * p2_full);
    CHECK(label_bytes(run.transfers, "a2a_inv_p1") ==
          static_cast<std::int64_t>(T) * L * p1_full);
  }
}

TEST_CASE("chained analytical walks reproduce the simulated clock exactly") {
  ComputeCosts cc;
  cc.c_v = 1e-4;
  cc.c_q = 5e-4;
  cc.c_k = 5e-4;
  cc.c_sel = 5e-5;
  cc.c_attn = 8e-4;
  cc.c_misc = 1.2e-3;
  cc.c_off = 2e-6;

  SUBCASE("flat and tapa, uniform layers") {
    const auto topo = make(1, 2, 2);
    const auto m = model_cfg(2, 16, 4, 8, 2, 23);
    const DenoiseConfig dn{4, 71};
    const ShardDims dims = m.shard_dims();
    const int wire = 2048;
    for (const RunMode mode : {RunMode::Flat, RunMode::Tapa}) {
      DitRunOptions opts;
      opts.costs = cc;
      opts.wire_bytes_per_value = wire;
      const auto run = denoise(topo, m, dn, mode, opts);
      const auto lc =
          build_layer_costs(topo, dims, wire, mode, false, {}, cc);
      const auto plan = plan_layer(mode, 0, CacheSchedule{}, dn.steps);
      double t = 0.0;
      for (int s = 0; s < dn.steps; ++s)
        for (int l = 0; l < m.layers; ++l) t = critical_path(plan, lc, t);
      CHECK(t == run.makespan);
    }
  }

  SUBCASE("cocodiff with a live cache schedule") {
    const auto topo = make(1, 2, 2);
    const auto m = model_cfg(2, 16, 4, 8, 2, 23);
    const DenoiseConfig dn{10, 71};
    const ShardDims dims = m.shard_dims();
    const int wire = 2048;
    const auto sched = CacheSchedule::linear(2, 4);
    DitRunOptions opts;
    opts.costs = cc;
    opts.wire_bytes_per_value = wire;
    opts.schedule = sched;
    opts.record_active_sets = true;
    const auto run = denoise(topo, m, dn, RunMode::Cocodiff, opts);

    double t = 0.0;
    for (int s = 0; s < dn.steps; ++s) {
      const auto plan = plan_layer(RunMode::Cocodiff, s, sched, dn.steps);
      for (int l = 0; l < m.layers; ++l) {
        const auto& sets =
            run.active_sets[static_cast<std::size_t>(s * m.layers + l)];
        const auto lc = build_layer_costs(topo, dims, wire,
                                          RunMode::Cocodiff, plan.selective,
                                          sets, cc);
        t = critical_path(plan, lc, t);
      }
    }
    CHECK(t == run.makespan);
  }

  SUBCASE("cocodiff at twelve ranks, ramp reaching full caching") {
    const auto topo = make(1, 6, 2);
    const auto m = model_cfg(1, 24, 12, 4, 2, 29);
    const DenoiseConfig dn{3, 77};
    const ShardDims dims = m.shard_dims();
    const int wire = 2048;
    // Final step ratio reaches 1: the active set is empty and every
    // selective exchange carries zero bytes.
    const auto sched = CacheSchedule::linear(1, 5);
    DitRunOptions opts;
    opts.costs = cc;
    opts.wire_bytes_per_value = wire;
    opts.schedule = sched;
    opts.record_active_sets = true;
    const auto run = denoise(topo, m, dn, RunMode::Cocodiff, opts);

    REQUIRE(ratio_at(2, sched, dn.steps) == 1.0);
    const auto& last = run.active_sets.back();
    REQUIRE(!last.empty());
    for (const auto& rows : last) CHECK(rows.empty());

    double t = 0.0;
    for (int s = 0; s < dn.steps; ++s) {
      const auto plan = plan_layer(RunMode::Cocodiff, s, sched, dn.steps);
      for (int l = 0; l < m.layers; ++l) {
        const auto& sets =
            run.active_sets[static_cast<std::size_t>(s * m.layers + l)];
        const auto lc = build_layer_costs(topo, dims, wire,
                                          RunMode::Cocodiff, plan.selective,
                                          sets, cc);
        t = critical_path(plan, lc, t);
      }
    }
    CHECK(t == run.makespan);
  }
}

TEST_CASE("V projections drift less between adjacent steps late in the run") {
  const auto topo = make(1, 2, 1);
  const auto m = model_cfg(2, 16, 4, 8, 2, 31);
  const int T = 16;
  int decaying = 0;
  const int seeds = 10;
  for (int s = 0; s < seeds; ++s) {
    DitRunOptions opts;
    opts.record_v_coherence = true;
    const DenoiseConfig dn{T, 1000 + static_cast<std::uint64_t>(s)};
    const auto run = denoise(topo, m, dn, RunMode::Flat, opts);
    auto mean_drift = [&](int lo, int hi) {
      double acc = 0.0;
      for (int t = lo; t < hi; ++t)
        for (int l = 0; l < m.layers; ++l)
          acc += run.v_drift[static_cast<std::size_t>(t)]
                            [static_cast<std::size_t>(l)];
      return acc / (hi - lo);
    };
    // Third quarter vs. fourth quarter of the schedule.
    if (mean_drift(3 * T / 4, T) < mean_drift(T / 2, 3 * T / 4)) ++decaying;
  }
  CHECK(decaying >= (8 * seeds) / 10);
}

TEST_CASE("projection-cache footprint matches the allocated bytes") {
  const auto dn = DenoiseConfig{2, 3};
  DitRunOptions opts;
  opts.schedule = CacheSchedule::linear(5, 10);  // warmup covers both steps

  const auto m = model_cfg(2, 16, 8, 8, 2, 37);
  const auto p4 = denoise(make(1, 2, 2), m, dn, RunMode::Cocodiff, opts);
  CHECK(p4.cache_bytes_per_rank ==
        cache_footprint_bytes(m.layers, m.batch, m.tokens, m.heads,
                              m.head_dim, 4, static_cast<int>(sizeof(float))));

  // Twice the batch doubles it; twice the world size halves it.
  auto m2 = m;
  m2.batch = 2 * m.batch;
  const auto p4b = denoise(make(1, 2, 2), m2, dn, RunMode::Cocodiff, opts);
  CHECK(p4b.cache_bytes_per_rank == 2 * p4.cache_bytes_per_rank);

  const auto p8 = denoise(make(1, 4, 2), m, dn, RunMode::Cocodiff, opts);
  CHECK(2 * p8.cache_bytes_per_rank == p4.cache_bytes_per_rank);

  // Non-caching modes allocate nothing.
  CHECK(denoise(make(1, 2, 2), m, dn, RunMode::Flat).cache_bytes_per_rank ==
        0);
}

TEST_CASE("gentle cache ramps track the reference better than heavy fixed "
          "caching") {
  const auto topo = make(1, 2, 2);
  const auto m = model_cfg(2, 16, 4, 8, 2, 43);
  const int T = 30;
  double mse_ramp = 0.0;
  double mse_heavy = 0.0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    const DenoiseConfig dn{T, 9000 + static_cast<std::uint64_t>(s)};
    const auto flat = denoise(topo, m, dn, RunMode::Flat);

    DitRunOptions ramp;
    ramp.schedule = CacheSchedule::linear(5, 10);
    const auto a = denoise(topo, m, dn, RunMode::Cocodiff, ramp);

    DitRunOptions heavy;
    heavy.schedule = CacheSchedule::fixed(0.9, 5, 10);
    const auto b = denoise(topo, m, dn, RunMode::Cocodiff, heavy);

    const double ma = mse(a.latent, flat.latent);
    const double mb = mse(b.latent, flat.latent);
    CHECK(std::isfinite(ma));
    CHECK(std::isfinite(mb));
    mse_ramp += ma;
    mse_heavy += mb;
  }
  CHECK(mse_ramp / seeds <= mse_heavy / seeds);
  CHECK(mse_ramp > 0.0);  // selective steps genuinely approximate
}

TEST_CASE("non-finite states abort naming the first step and layer") {
  const auto topo = make(1, 2, 2);
  const auto m = model_cfg(2, 16, 4, 8, 2, 47);
  const DenoiseConfig dn{2, 61};
  DitRunOptions opts;
  Mat<float> bad = initial_latent(m, dn.noise_seed);
  bad(bad.rows() - 1, 2) = std::numeric_limits<float>::infinity();
  opts.initial_latent_override = bad;
  CHECK_THROWS_WITH_AS(denoise(topo, m, dn, RunMode::Flat, opts),
                       "[dit] non-finite hidden state at step 0, layer 0",
                       std::runtime_error);
}

TEST_CASE("invalid setups are rejected with the offending numbers") {
  const auto topo = make(1, 2, 2);
  CHECK_THROWS_WITH_AS(
      denoise(topo, model_cfg(1, 10, 4, 2, 1), DenoiseConfig{1, 1},
              RunMode::Flat),
      "[dit] tokens N=10 must split evenly over P=4 ranks",
      std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      denoise(topo, model_cfg(1, 16, 6, 2, 1), DenoiseConfig{1, 1},
              RunMode::Flat),
      "[dit] heads H=6 must split evenly over P=4 ranks",
      std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      denoise(topo, model_cfg(1, 16, 4, 3, 1), DenoiseConfig{1, 1},
              RunMode::Flat),
      "[dit] head_dim=3 must be even for rotary channel pairs",
      std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      denoise(topo, model_cfg(1, 16, 4, 2, 1), DenoiseConfig{0, 1},
              RunMode::Flat),
      "[dit] denoising needs at least one step", std::invalid_argument);

  DitRunOptions opts;
  opts.wire_bytes_per_value = 0;
  CHECK_THROWS_WITH_AS(
      denoise(topo, model_cfg(1, 16, 4, 2, 1), DenoiseConfig{1, 1},
              RunMode::Flat, opts),
      "[dit] wire_bytes_per_value must be > 0", std::invalid_argument);

  DitRunOptions shape;
  shape.initial_latent_override = Mat<float>::Zero(3, 3);
  CHECK_THROWS_WITH_AS(
      denoise(topo, model_cfg(1, 16, 4, 2, 1), DenoiseConfig{1, 1},
              RunMode::Flat, shape),
      "[dit] initial latent override has the wrong shape",
      std::invalid_argument);

  CHECK_THROWS_AS(make_layer_weights(model_cfg(1, 8, 2, 2, 1), 1),
                  std::out_of_range);
  CHECK_THROWS_AS(derive_compute_costs(topo, model_cfg(1, 16, 4, 2, 1), 0.0),
                  std::invalid_argument);
  const auto costs = derive_compute_costs(topo, model_cfg(1, 16, 4, 2, 1));
  CHECK(costs.c_v > 0.0);
  CHECK(costs.c_attn > 0.0);
  CHECK(costs.c_off == 0.0);
}
