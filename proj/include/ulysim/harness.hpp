#pragma once

/* Experiment driver.
 *
 * run_experiment() simulates one denoising run in the requested mode and
 * summarizes it as a RunReport.  For the overlapped modes the same seeds
 * are re-run in flat mode to provide the latency baseline (speedup =
 * flat / mode) and the reference latent for the quality metrics; a flat
 * run is its own reference, so it reports speedup exactly 1 and an
 * infinite distortion ratio.  The run's RNG streams derive from the
 * config seed: weights use `seed`, the initial noise uses `seed + 1`.
 *
 * Kernel timings come from the default modeled compute costs, which are
 * sized so that projection compute and the intra-GPU leg are of the same
 * order — the operating point the overlapped schedule targets.
 *
 * sweep() runs the standard mode grid {flat, tapa, overlapped+linear,
 * overlapped+fixed r in {0.2, 0.4, 0.6, 0.8}} over `seeds` consecutive
 * seeds, sharing one flat reference per seed.
 *
 * microbench() prices the raw reshard exchange at growing sizes: the
 * direct single-phase route against the two-phase route, using the same
 * collective cost model as the simulator.
 */

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "ulysim/config.hpp"
#include "ulysim/dit.hpp"
#include "ulysim/latent_io.hpp"
#include "ulysim/metrics.hpp"
#include "ulysim/report.hpp"

namespace ulysim {

struct ExperimentResult {
  RunReport report;
  Mat<float> latent;  // this run's final latent
  DenoiseResult run;  // full simulation record
};

inline std::string schedule_tag(RunMode mode, const CacheSchedule& s) {
  if (mode != RunMode::Cocodiff) return "";
  if (s.curve == RatioCurve::Linear) return "linear";
  return fmt::format("fixed_{}", s.fixed_ratio);
}

namespace detail {

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    throw std::runtime_error(
        fmt::format("[harness] cannot open '{}' for writing", path.string()));
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f)
    throw std::runtime_error(
        fmt::format("[harness] write to '{}' failed", path.string()));
}

}  // namespace detail

/* Run one experiment.  When `flat_reference` is non-null it must be the
 * flat-mode result for the same topology, model and seeds, and is used
 * instead of re-simulating the baseline. */
inline ExperimentResult run_experiment_with_reference(
    const ExperimentConfig& cfg, const DenoiseResult* flat_reference) {
  ModelConfig m = cfg.model;
  m.weight_seed = cfg.seed;
  DenoiseConfig dn = cfg.denoise;
  dn.noise_seed = cfg.seed + 1;
  DitRunOptions opts;
  opts.schedule = cfg.schedule;

  DenoiseResult run = denoise(cfg.topology, m, dn, cfg.mode, opts);

  RunReport rep;
  rep.mode = std::string(to_string(cfg.mode));
  rep.schedule = schedule_tag(cfg.mode, cfg.schedule);
  rep.seed = cfg.seed;
  rep.total_seconds = run.makespan;
  rep.breakdown = classify_rank_segments(run.timeline, 0);
  const auto traffic = bytes_by_link_class(run.transfers);
  rep.intra_gpu_bytes = traffic[0];
  rep.intra_node_bytes = traffic[1];
  rep.inter_node_bytes = traffic[2];
  rep.cache_bytes_per_rank = run.cache_bytes_per_rank;
  if (cfg.mode == RunMode::Cocodiff) {
    const std::size_t layers = static_cast<std::size_t>(m.layers);
    if (run.selection.size() !=
        static_cast<std::size_t>(dn.steps) * layers)
      throw std::logic_error("[harness] incomplete selection trace");
    rep.active_fractions.reserve(static_cast<std::size_t>(dn.steps));
    for (int t = 0; t < dn.steps; ++t)
      rep.active_fractions.push_back(
          run.selection[static_cast<std::size_t>(t) * layers]
              .active_fraction());
  }

  if (cfg.mode == RunMode::Flat) {
    rep.flat_total_seconds = run.makespan;
    rep.speedup_vs_flat = 1.0;
    // A run is not compared against itself: zero error, infinite ratio.
  } else {
    DenoiseResult local_flat;
    const DenoiseResult* flat = flat_reference;
    if (flat == nullptr) {
      local_flat = denoise(cfg.topology, m, dn, RunMode::Flat, {});
      flat = &local_flat;
    }
    rep.flat_total_seconds = flat->makespan;
    rep.speedup_vs_flat = flat->makespan / run.makespan;
    const QualityMetrics q =
        quality_metrics(run.latent, flat->latent, cfg.ssim_window);
    rep.mse = q.mse;
    rep.psnr_db = q.psnr;
    rep.ssim = q.ssim;
  }

  if (!cfg.out.empty()) {
    const std::filesystem::path dir(cfg.out);
    std::filesystem::create_directories(dir);
    const bool csv = cfg.format == "csv";
    const char* ext = csv ? "csv" : "jsonl";
    detail::write_text_file(
        dir / fmt::format("report.{}", ext),
        csv ? reports_to_csv({rep}) : reports_to_jsonl({rep}));
    detail::write_text_file(dir / fmt::format("timeline.{}", ext),
                            csv ? timeline_to_csv(run.timeline)
                                : timeline_to_jsonl(run.timeline));
    write_latent(dir / "latent.bin", run.latent);
  }

  ExperimentResult res;
  res.report = std::move(rep);
  res.latent = run.latent;
  res.run = std::move(run);
  return res;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  return run_experiment_with_reference(cfg, nullptr);
}

/* The standard comparison grid over `seeds` consecutive seeds starting at
 * base.seed.  Rows are ordered configuration-major in the listed order,
 * seeds ascending within each configuration.  Individual runs write no
 * files; the caller decides what to do with the rows. */
inline std::vector<RunReport> sweep(const ExperimentConfig& base,
                                    int seeds = 5) {
  if (seeds < 1)
    throw std::invalid_argument("[harness] sweep needs at least one seed");

  struct Variant {
    RunMode mode;
    CacheSchedule schedule;
  };
  std::vector<Variant> grid;
  grid.push_back({RunMode::Flat, base.schedule});
  grid.push_back({RunMode::Tapa, base.schedule});
  {
    CacheSchedule linear = base.schedule;
    linear.curve = RatioCurve::Linear;
    grid.push_back({RunMode::Cocodiff, linear});
    for (double r : {0.2, 0.4, 0.6, 0.8}) {
      CacheSchedule fixed = base.schedule;
      fixed.curve = RatioCurve::Fixed;
      fixed.fixed_ratio = r;
      grid.push_back({RunMode::Cocodiff, fixed});
    }
  }

  // One flat baseline per seed, shared by every variant at that seed.
  std::vector<DenoiseResult> flat_runs;
  flat_runs.reserve(static_cast<std::size_t>(seeds));
  std::vector<RunReport> flat_reports;
  for (int s = 0; s < seeds; ++s) {
    ExperimentConfig cfg = base;
    cfg.out.clear();
    cfg.mode = RunMode::Flat;
    cfg.seed = base.seed + static_cast<std::uint64_t>(s);
    ExperimentResult res = run_experiment(cfg);
    flat_reports.push_back(std::move(res.report));
    flat_runs.push_back(std::move(res.run));
  }

  std::vector<RunReport> rows;
  for (const Variant& v : grid) {
    for (int s = 0; s < seeds; ++s) {
      if (v.mode == RunMode::Flat) {
        rows.push_back(flat_reports[static_cast<std::size_t>(s)]);
        continue;
      }
      ExperimentConfig cfg = base;
      cfg.out.clear();
      cfg.mode = v.mode;
      cfg.schedule = v.schedule;
      cfg.seed = base.seed + static_cast<std::uint64_t>(s);
      rows.push_back(run_experiment_with_reference(
                         cfg, &flat_runs[static_cast<std::size_t>(s)])
                         .report);
    }
  }
  return rows;
}

/* ----------------------------------------------------------- microbench */

inline std::vector<std::int64_t> default_microbench_sizes() {
  std::vector<std::int64_t> sizes;
  for (std::int64_t mib : {3, 6, 12, 24, 48}) sizes.push_back(mib << 20);
  return sizes;
}

/* Price the reshard of a per-rank payload of each given size, both routes.
 * Sizes must be positive; rows come back sorted by size.  Per-pair volumes
 * follow the reshard layout: the direct route moves size/P to every peer;
 * the two-phase route bundles size/P * G per intra-GPU peer, then moves
 * size/G per GPU pair across the mesh. */
inline std::vector<MicrobenchRow> microbench(std::vector<std::int64_t> sizes,
                                             const TopologyConfig& topo) {
  topo.validate();
  if (sizes.empty())
    throw std::invalid_argument("[harness] microbench needs at least one size");
  for (std::int64_t s : sizes)
    if (s <= 0)
      throw std::invalid_argument(fmt::format(
          "[harness] microbench sizes must be > 0, got {}", s));
  std::sort(sizes.begin(), sizes.end());

  const int P = topo.world_size();
  const int G = topo.nodes * topo.gpus_per_node;
  const int tg = topo.tiles_per_gpu;
  std::vector<int> world(static_cast<std::size_t>(P));
  std::iota(world.begin(), world.end(), 0);
  const auto intra = gpu_ranks(topo, 0);
  const auto mesh = phase2_group(topo, 0);

  std::vector<MicrobenchRow> rows;
  rows.reserve(sizes.size());
  for (std::int64_t s : sizes) {
    MicrobenchRow row;
    row.size_bytes = s;
    row.flat_seconds =
        collective_duration(topo, world, uniform_exchange(P, s / P),
                            CommPolicy::PairwiseRounds);
    row.phase1_seconds = collective_duration(
        topo, intra, uniform_exchange(tg, (s / P) * G),
        CommPolicy::PairwiseRounds);
    row.phase2_seconds =
        collective_duration(topo, mesh, uniform_exchange(G, s / G),
                            CommPolicy::ConcurrentMesh);
    row.tapa_total_seconds = row.phase1_seconds + row.phase2_seconds;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ulysim
