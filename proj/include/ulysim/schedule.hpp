#pragma once
/*
 * Layer execution planning and the analytical latency model.
 *
 * Three execution shapes share one layer structure (QKV projections,
 * resharding exchange, attention, inverse resharding, remaining block):
 *
 *   flat      all three projections, then one blocking all-to-all carrying
 *             Q, K and V together, attention, one blocking inverse.
 *   tapa      all three projections, then blocking per-tensor two-phase
 *             exchanges (three phase-1, three phase-2), attention, blocking
 *             two-phase inverse.
 *   cocodiff  V's projection runs first and V's phase 1 is posted to the
 *             background engine immediately, so it rides behind Q's and
 *             K's projection/normalization/rotation.  On selective steps
 *             the designated tile then scores the fresh V rows, the active
 *             sets are all-gathered, and the five remaining exchanges (V
 *             phase 2, Q/K phase 1, Q/K phase 2) are posted to the
 *             background engine at reduced volume, chained FIFO.
 *
 * critical_path() computes a layer's duration analytically by replaying
 * the same additions and maxima the rank simulator performs, so the two
 * agree bit for bit: the analytical model and the simulator share one
 * truth.  Cost inputs come from build_layer_costs(), which prices every
 * exchange with the same collective_duration() the simulator uses.
 */

#include <fmt/format.h>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "ulysim/collectives.hpp"
#include "ulysim/simnet.hpp"
#include "ulysim/topology.hpp"
#include "ulysim/vmajor.hpp"

namespace ulysim {

enum class RunMode { Flat, Tapa, Cocodiff };

inline std::string_view to_string(RunMode m) {
  switch (m) {
    case RunMode::Flat: return "flat";
    case RunMode::Tapa: return "tapa";
    case RunMode::Cocodiff: return "cocodiff";
  }
  return "?";
}

inline RunMode parse_run_mode(std::string_view s) {
  if (s == "flat") return RunMode::Flat;
  if (s == "tapa") return RunMode::Tapa;
  if (s == "cocodiff") return RunMode::Cocodiff;
  throw std::invalid_argument(fmt::format(
      "[schedule] unknown mode '{}' (expected flat, tapa, or cocodiff)", s));
}

/* ------------------------------------------------------------------ costs */

/* Per-layer compute costs in seconds.  Defaults follow the shape of the
 * reference setup: V's projection is cheap, Q and K pay extra for
 * normalization and rotation, attention and the remaining block dominate. */
struct ComputeCosts {
  double c_v = 1.0e-4;    // V projection
  double c_q = 5.0e-4;    // Q projection + normalization + rotation
  double c_k = 5.0e-4;    // K projection + normalization + rotation
  double c_sel = 2.0e-6;  // active-row scoring on the designated tile
  double c_attn = 8.0e-4;
  double c_misc = 1.2e-3;  // output projection, MLP, residuals
  double c_off = 0.0;      // background preparation per posted exchange

  void validate() const {
    for (double v : {c_v, c_q, c_k, c_sel, c_attn, c_misc, c_off})
      if (!(v >= 0.0))
        throw std::invalid_argument("[schedule] compute costs must be >= 0");
  }
};

/* Everything the analytical model needs to price one layer: the compute
 * costs plus the duration of every exchange the mode issues, as produced
 * by the shared collective cost model.  Q/K phase-1 durations are held per
 * GPU because selective steps partition each GPU's active rows across its
 * tiles differently. */
struct LayerCosts {
  double c_v = 0, c_q = 0, c_k = 0, c_sel = 0, c_attn = 0, c_misc = 0;
  double c_off = 0;

  double t_vp1 = 0;               // V's phase 1 (always full volume)
  std::vector<double> t_qk_p1;    // per GPU: one tensor's phase-1 duration
  double t_p2 = 0;                // one tensor's phase-2 duration
  double t_ag = 0;                // active-index all-gather
  double t_flat = 0;              // flat forward exchange (Q,K,V together)
  double t_inv_flat = 0;          // flat inverse exchange
  double t_inv_p2 = 0;            // inverse route, cross-GPU half
  double t_inv_p1 = 0;            // inverse route, intra-GPU half

  void validate() const {
    for (double v : {c_v, c_q, c_k, c_sel, c_attn, c_misc, c_off, t_vp1,
                     t_p2, t_ag, t_flat, t_inv_flat, t_inv_p2, t_inv_p1})
      if (!(v >= 0.0))
        throw std::invalid_argument("[schedule] layer costs must be >= 0");
    for (double v : t_qk_p1)
      if (!(v >= 0.0))
        throw std::invalid_argument("[schedule] layer costs must be >= 0");
  }
};

/* Seconds of V's phase 1 left exposed on the critical path after hiding it
 * behind Q's and K's processing.  Zero exactly when the overlap window
 * covers the exchange; positive values flag the large-batch risk where V's
 * projection grows and the window no longer suffices. */
inline double exposed_vp1(const LayerCosts& costs) {
  return std::max(0.0, costs.t_vp1 - (costs.c_q + costs.c_k));
}

/* ------------------------------------------------------------------- plan */

struct PlanOp {
  std::string name;
  SegmentKind kind = SegmentKind::Compute;  // Compute or Comm
  Lane lane = Lane::Main;
  std::vector<int> deps;  // indices of earlier ops this one needs
};

struct LayerPlan {
  RunMode mode = RunMode::Flat;
  bool selective = false;  // cocodiff only: reduced-volume step
  std::vector<PlanOp> ops;

  /* Communication nodes before the attention node: the forward exchange
   * structure (1 for flat; per-tensor phases otherwise). */
  int forward_comm_nodes() const {
    int n = 0;
    for (const auto& op : ops) {
      if (op.name == "attention") break;
      if (op.kind == SegmentKind::Comm) ++n;
    }
    return n;
  }

  bool has_op(std::string_view name) const {
    for (const auto& op : ops)
      if (op.name == name) return true;
    return false;
  }

  /* Labeled DAG listing for timeline debugging. */
  std::string describe() const {
    std::string out;
    for (const auto& op : ops) {
      out += fmt::format("{:<14} [{} {}]", op.name,
                         op.lane == Lane::Main ? "main" : "bg",
                         op.kind == SegmentKind::Comm ? "comm" : "compute");
      if (!op.deps.empty()) {
        out += " <-";
        for (int d : op.deps) out += fmt::format(" {}", ops[d].name);
      }
      out += '\n';
    }
    return out;
  }
};

/* Throws if the plan's dependency graph has a cycle or a dangling edge. */
inline void validate_plan(const LayerPlan& plan) {
  const int n = static_cast<int>(plan.ops.size());
  std::vector<int> indegree(n, 0);
  for (const auto& op : plan.ops)
    for (int d : op.deps) {
      if (d < 0 || d >= n)
        throw std::invalid_argument(
            "[schedule] plan references an op outside the list");
      ++indegree[d];
    }
  // Kahn's algorithm over reversed edges; order does not matter.
  std::vector<int> ready;
  for (int i = 0; i < n; ++i)
    if (indegree[i] == 0) ready.push_back(i);
  int seen = 0;
  while (!ready.empty()) {
    const int i = ready.back();
    ready.pop_back();
    ++seen;
    for (int d : plan.ops[i].deps)
      if (--indegree[d] == 0) ready.push_back(d);
  }
  if (seen != n)
    throw std::invalid_argument("[schedule] plan has a dependency cycle");
}

/* Build the dependency-respecting op order for one layer of a run.  The
 * cocodiff plan skips selection (and runs every exchange at full volume)
 * on warmup and periodic-sync steps, where the schedule's ratio is zero. */
inline LayerPlan plan_layer(RunMode mode, int step, const CacheSchedule& sched,
                            int total_steps) {
  LayerPlan p;
  p.mode = mode;
  auto add = [&p](std::string_view name, SegmentKind kind, Lane lane,
                  std::vector<int> deps) {
    p.ops.push_back(PlanOp{std::string(name), kind, lane, std::move(deps)});
    return static_cast<int>(p.ops.size()) - 1;
  };
  const auto kC = SegmentKind::Compute;
  const auto kX = SegmentKind::Comm;

  if (mode == RunMode::Flat) {
    const int v = add("v_proj", kC, Lane::Main, {});
    const int q = add("q_path", kC, Lane::Main, {v});
    const int k = add("k_path", kC, Lane::Main, {q});
    const int x = add("flat_a2a", kX, Lane::Main, {k});
    const int a = add("attention", kC, Lane::Main, {x});
    const int i = add("a2a_inv", kX, Lane::Main, {a});
    add("misc", kC, Lane::Main, {i});
    return p;
  }
  if (mode == RunMode::Tapa) {
    const int v = add("v_proj", kC, Lane::Main, {});
    const int q = add("q_path", kC, Lane::Main, {v});
    const int k = add("k_path", kC, Lane::Main, {q});
    const int v1 = add("v_p1", kX, Lane::Main, {k});
    const int q1 = add("q_p1", kX, Lane::Main, {v1});
    const int k1 = add("k_p1", kX, Lane::Main, {q1});
    const int v2 = add("v_p2", kX, Lane::Main, {k1});
    const int q2 = add("q_p2", kX, Lane::Main, {v2});
    const int k2 = add("k_p2", kX, Lane::Main, {q2});
    const int a = add("attention", kC, Lane::Main, {k2});
    const int i = add("a2a_inv", kX, Lane::Main, {a});
    add("misc", kC, Lane::Main, {i});
    return p;
  }

  p.selective = ratio_at(step, sched, total_steps) > 0.0;
  const int v = add("v_proj", kC, Lane::Main, {});
  const int v1 = add("vp1", kX, Lane::Background, {v});
  const int q = add("q_path", kC, Lane::Main, {v});
  const int k = add("k_path", kC, Lane::Main, {q});
  int gate = k;  // last main-lane op before the exchange posts
  if (p.selective) {
    const int s = add("select", kC, Lane::Main, {k, v1});
    gate = add("idx_allgather", kX, Lane::Main, {s});
  }
  const int v2 = add("vp2", kX, Lane::Background, {gate, v1});
  const int qk1 = add("qk_p1", kX, Lane::Background, {gate, q, k});
  const int qk2 = add("qk_p2", kX, Lane::Background, {qk1});
  const int rec = add("reconstruct", kC, Lane::Main, {v2, qk2});
  const int a = add("attention", kC, Lane::Main, {rec});
  const int i = add("a2a_inv", kX, Lane::Main, {a});
  add("misc", kC, Lane::Main, {i});
  return p;
}

/* ---------------------------------------------------------- critical path */

/*
 * Completion clock of one layer under the two-channel execution rule: the
 * main channel runs ops serially, the background channel resolves posted
 * exchanges FIFO (pickup at max(channel free, post time) plus the
 * preparation overhead), and waits join the two.  The walk performs the
 * exact additions and maxima of the simulator's arithmetic, in the same
 * order, so results match a simulated replay bit for bit.
 *
 * start_time is the main-channel clock at layer entry; chaining calls
 * layer by layer (feeding each result into the next start_time) therefore
 * reproduces a multi-layer run's final clock exactly, which a sum of
 * zero-based per-layer durations would not — floating-point addition is
 * not shift-invariant.  Layer-end waits always drain the background
 * channel past its last pickup, so no background state carries over.
 */
inline double critical_path(const LayerPlan& plan, const LayerCosts& c,
                            double start_time = 0.0) {
  validate_plan(plan);
  c.validate();
  if (!(start_time >= 0.0))
    throw std::invalid_argument("[schedule] start_time must be >= 0");

  if (plan.mode == RunMode::Flat) {
    double t = start_time;
    t += c.c_v;
    t += c.c_q;
    t += c.c_k;
    t += c.t_flat;
    t += c.c_attn;
    t += c.t_inv_flat;
    t += c.c_misc;
    return t;
  }

  const std::size_t gpus = c.t_qk_p1.size();
  if (gpus == 0)
    throw std::invalid_argument(
        "[schedule] two-phase modes need per-GPU phase-1 durations");

  if (plan.mode == RunMode::Tapa) {
    // Tiles of one GPU stay in lockstep through the intra-GPU exchanges;
    // GPUs rejoin at the first cross-GPU exchange.
    double joined = 0.0;
    for (std::size_t g = 0; g < gpus; ++g) {
      double t = start_time;
      t += c.c_v;
      t += c.c_q;
      t += c.c_k;
      t += c.t_vp1;
      t += c.t_qk_p1[g];  // Q phase 1
      t += c.t_qk_p1[g];  // K phase 1
      joined = std::max(joined, t);
    }
    joined += c.t_p2;  // V phase 2
    joined += c.t_p2;  // Q phase 2
    joined += c.t_p2;  // K phase 2
    joined += c.c_attn;
    joined += c.t_inv_p2;
    joined += c.t_inv_p1;
    joined += c.c_misc;
    return joined;
  }

  // cocodiff: V's phase 1 posted right after V's projection.
  double t = start_time;
  t += c.c_v;
  double bg = std::max(0.0, t);  // pickup of the freshly posted exchange
  bg += c.c_off;
  const double done_vp1 = bg + c.t_vp1;
  t += c.c_q;
  t += c.c_k;
  t = std::max(t, done_vp1);  // wait for V's phase 1
  if (plan.selective) {
    t += c.c_sel;  // designated tile scores rows; the others idle
    t += c.t_ag;   // gather starts at the designated tile's arrival
  }
  // Five posts at time t; the background channel resolves them FIFO.
  double chain = std::max(done_vp1, t);
  chain += c.c_off;
  const double done_vp2 = chain + c.t_p2;
  // Q/K phase 1 runs per GPU; the slowest GPU gates Q's phase 2.
  double slowest = 0.0;
  for (std::size_t g = 0; g < gpus; ++g) {
    double b = std::max(done_vp2, t);
    b += c.c_off;
    const double done_q = b + c.t_qk_p1[g];
    double b2 = std::max(done_q, t);
    b2 += c.c_off;
    const double done_k = b2 + c.t_qk_p1[g];
    double e = std::max(done_k, t);
    e += c.c_off;
    slowest = std::max(slowest, e);
  }
  const double done_qp2 = slowest + c.t_p2;
  double e2 = std::max(done_qp2, t);
  e2 += c.c_off;
  const double done_kp2 = e2 + c.t_p2;
  t = std::max(t, done_vp2);
  t = std::max(t, done_qp2);
  t = std::max(t, done_kp2);
  t += c.c_attn;
  t += c.t_inv_p2;
  t += c.t_inv_p1;
  t += c.c_misc;
  return t;
}

/* ------------------------------------------------------------ cost builder */

/* Square byte matrix with one off-diagonal value. */
inline std::vector<std::vector<std::int64_t>> uniform_exchange(
    int g, std::int64_t bytes) {
  std::vector<std::vector<std::int64_t>> m(
      g, std::vector<std::int64_t>(g, bytes));
  for (int i = 0; i < g; ++i) m[i][i] = 0;
  return m;
}

/*
 * Price every exchange of one layer with the simulator's collective cost
 * model.  For selective steps, actives_per_gpu holds each GPU's active
 * rows (batch-major GPU-block indices); full-volume steps pass an empty
 * list.  The index all-gather is priced at 4 bytes per shipped index.
 */
inline LayerCosts build_layer_costs(
    const TopologyConfig& topo, const ShardDims& dims,
    int wire_bytes_per_value, RunMode mode, bool selective,
    const std::vector<std::vector<int>>& actives_per_gpu,
    const ComputeCosts& cc = {}) {
  cc.validate();
  dims.validate(topo);
  if (selective && mode != RunMode::Cocodiff)
    throw std::invalid_argument(
        "[schedule] selective steps exist only in cocodiff mode");
  const int P = topo.world_size();
  const int tg = topo.tiles_per_gpu;
  const int gpus = P / tg;
  const int bc = dims.block_cols(topo);

  LayerCosts lc;
  lc.c_v = cc.c_v;
  lc.c_q = cc.c_q;
  lc.c_k = cc.c_k;
  lc.c_sel = cc.c_sel;
  lc.c_attn = cc.c_attn;
  lc.c_misc = cc.c_misc;
  lc.c_off = cc.c_off;

  std::vector<int> world(static_cast<std::size_t>(P));
  std::iota(world.begin(), world.end(), 0);
  const std::int64_t pair =
      dims.pair_values(topo) * wire_bytes_per_value;  // one tensor, one peer

  // Flat route: forward ships Q, K and V together; the inverse ships the
  // single attention output.
  lc.t_flat = collective_duration(topo, world, uniform_exchange(P, 3 * pair),
                                  CommPolicy::PairwiseRounds);
  lc.t_inv_flat = collective_duration(topo, world, uniform_exchange(P, pair),
                                      CommPolicy::PairwiseRounds);

  // Two-phase full-volume building blocks.
  const auto intra = gpu_ranks(topo, 0);
  const auto p2g = phase2_group(topo, 0);
  const double t_p1_full = collective_duration(
      topo, intra, uniform_exchange(tg, pair * gpus),
      CommPolicy::PairwiseRounds);
  const std::int64_t p2_full_bytes =
      static_cast<std::int64_t>(dims.batch) * dims.tokens_per_gpu(topo) * bc *
      wire_bytes_per_value;
  const double t_p2_full = collective_duration(
      topo, p2g, uniform_exchange(gpus, p2_full_bytes),
      CommPolicy::ConcurrentMesh);
  lc.t_vp1 = t_p1_full;  // V's phase 1 never shrinks
  lc.t_inv_p2 = t_p2_full;
  lc.t_inv_p1 = t_p1_full;

  if (!selective) {
    lc.t_qk_p1.assign(static_cast<std::size_t>(gpus), t_p1_full);
    lc.t_p2 = t_p2_full;
    return lc;
  }

  if (static_cast<int>(actives_per_gpu.size()) != gpus)
    throw std::invalid_argument(fmt::format(
        "[schedule] got active lists for {} GPUs, topology has {}",
        actives_per_gpu.size(), gpus));

  lc.t_qk_p1.resize(gpus);
  for (int g = 0; g < gpus; ++g) {
    const auto sender = phase1_selective_wire_sizes(
        topo, dims, actives_per_gpu[g], wire_bytes_per_value);
    std::vector<std::vector<std::int64_t>> m(
        tg, std::vector<std::int64_t>(tg, 0));
    for (int s = 0; s < tg; ++s)
      for (int d = 0; d < tg; ++d)
        if (s != d) m[s][d] = sender[s];
    lc.t_qk_p1[g] = collective_duration(topo, gpu_ranks(topo, g * tg), m,
                                        CommPolicy::PairwiseRounds);
  }

  std::vector<std::vector<std::int64_t>> p2m(
      gpus, std::vector<std::int64_t>(gpus, 0));
  for (int a = 0; a < gpus; ++a)
    for (int b = 0; b < gpus; ++b)
      if (a != b)
        p2m[a][b] = static_cast<std::int64_t>(actives_per_gpu[a].size()) *
                    bc * wire_bytes_per_value;
  lc.t_p2 = collective_duration(topo, p2g, p2m, CommPolicy::ConcurrentMesh);

  std::vector<std::vector<std::int64_t>> agm(
      P, std::vector<std::int64_t>(P, 0));
  for (int g = 0; g < gpus; ++g) {
    const int designated = g * tg;
    for (int j = 0; j < P; ++j)
      if (j != designated)
        agm[designated][j] =
            static_cast<std::int64_t>(actives_per_gpu[g].size()) * 4;
  }
  lc.t_ag = collective_duration(topo, world, agm,
                                CommPolicy::SlowestLinkSerial);
  return lc;
}

}  // namespace ulysim
