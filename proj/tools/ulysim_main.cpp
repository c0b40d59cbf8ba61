/* Command-line front end: run | sweep | microbench.
 *
 *   ulysim run        one simulated denoising run plus its flat baseline
 *   ulysim sweep      the standard mode grid over consecutive seeds
 *   ulysim microbench exchange pricing at growing payload sizes
 *
 * Configuration resolves in order: built-in defaults, then --config FILE,
 * then each --override KEY=VALUE (dotted path), then the explicit flags
 * --mode / --seed / --out / --format.
 */

#include <cstdint>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "ulysim/config.hpp"
#include "ulysim/harness.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string mode;
  std::uint64_t seed = 0;
  std::string out;
  std::string format;
  std::vector<std::string> overrides;

  CLI::Option* mode_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* format_opt = nullptr;
};

void attach_flags(CLI::App& cmd, CommonFlags& f, bool with_mode) {
  cmd.add_option("--config", f.config_path, "JSON configuration file");
  if (with_mode)
    f.mode_opt = cmd.add_option("--mode", f.mode, "Execution mode")
                     ->check(CLI::IsMember({"flat", "tapa", "cocodiff"}));
  f.seed_opt = cmd.add_option("--seed", f.seed, "Base RNG seed");
  f.out_opt = cmd.add_option("--out", f.out, "Output directory");
  f.format_opt = cmd.add_option("--format", f.format, "Output file format")
                     ->check(CLI::IsMember({"csv", "jsonl"}));
  cmd.add_option("--override", f.overrides,
                 "Config override as section.key=value; repeatable");
}

ulysim::ExperimentConfig resolve(const CommonFlags& f) {
  ulysim::ExperimentConfig cfg =
      ulysim::resolve_config(f.config_path, f.overrides);
  if (f.mode_opt != nullptr && f.mode_opt->count() > 0)
    cfg.mode = ulysim::mode_from_string(f.mode);
  if (f.seed_opt->count() > 0) cfg.seed = f.seed;
  if (f.out_opt->count() > 0) cfg.out = f.out;
  if (f.format_opt->count() > 0) cfg.format = f.format;
  return cfg;
}

std::string fraction_summary(const std::vector<double>& fr) {
  if (fr.empty()) return "n/a";
  double sum = 0.0;
  for (double v : fr) sum += v;
  return fmt::format("{:.3f}", sum / static_cast<double>(fr.size()));
}

int cmd_run(const CommonFlags& f) {
  const ulysim::ExperimentConfig cfg = resolve(f);
  const ulysim::ExperimentResult res = ulysim::run_experiment(cfg);
  const ulysim::RunReport& r = res.report;
  fmt::print(
      "run mode={} seed={} total={:.6e}s flat={:.6e}s speedup={:.5f} "
      "mse={:.3e} psnr={}dB ssim={:.6f} shipped_fraction_mean={}\n",
      r.mode, r.seed, r.total_seconds, r.flat_total_seconds,
      r.speedup_vs_flat, r.mse,
      std::isinf(r.psnr_db) ? "inf" : fmt::format("{:.2f}", r.psnr_db),
      r.ssim, fraction_summary(r.active_fractions));
  if (!cfg.out.empty())
    fmt::print("wrote report.{0}, timeline.{0}, latent.bin to {1}\n",
               cfg.format, cfg.out);
  return 0;
}

int cmd_sweep(const CommonFlags& f) {
  const ulysim::ExperimentConfig cfg = resolve(f);
  const std::vector<ulysim::RunReport> rows = ulysim::sweep(cfg);
  for (const ulysim::RunReport& r : rows)
    fmt::print("sweep mode={}{}{} seed={} total={:.6e}s speedup={:.5f}\n",
               r.mode, r.schedule.empty() ? "" : "/", r.schedule, r.seed,
               r.total_seconds, r.speedup_vs_flat);
  if (!cfg.out.empty()) {
    const std::filesystem::path dir(cfg.out);
    std::filesystem::create_directories(dir);
    const bool csv = cfg.format == "csv";
    const auto path = dir / fmt::format("sweep.{}", cfg.format);
    ulysim::detail::write_text_file(path, csv
                                              ? ulysim::reports_to_csv(rows)
                                              : ulysim::reports_to_jsonl(rows));
    fmt::print("wrote {} rows to {}\n", rows.size(), path.string());
  }
  return 0;
}

int cmd_microbench(const CommonFlags& f) {
  const ulysim::ExperimentConfig cfg = resolve(f);
  const std::vector<ulysim::MicrobenchRow> rows =
      ulysim::microbench(ulysim::default_microbench_sizes(), cfg.topology);
  for (const ulysim::MicrobenchRow& r : rows)
    fmt::print(
        "microbench size={}B flat={:.6e}s tapa={:.6e}s (phase1={:.6e}s "
        "phase2={:.6e}s) ratio={:.3f}\n",
        r.size_bytes, r.flat_seconds, r.tapa_total_seconds, r.phase1_seconds,
        r.phase2_seconds, r.flat_seconds / r.tapa_total_seconds);
  if (!cfg.out.empty()) {
    const std::filesystem::path dir(cfg.out);
    std::filesystem::create_directories(dir);
    const bool csv = cfg.format == "csv";
    const auto path = dir / fmt::format("microbench.{}", cfg.format);
    ulysim::detail::write_text_file(
        path, csv ? ulysim::microbench_to_csv(rows)
                  : ulysim::microbench_to_jsonl(rows));
    fmt::print("wrote {} size points to {}\n", rows.size(), path.string());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Desk-scale simulator for sequence-parallel attention resharding: "
      "direct, two-phase, and overlapped-selective exchanges"};
  app.require_subcommand(1);

  CommonFlags run_flags, sweep_flags, bench_flags;
  CLI::App* run_cmd =
      app.add_subcommand("run", "Simulate one denoising run");
  attach_flags(*run_cmd, run_flags, /*with_mode=*/true);
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "Run the standard mode/seed grid");
  attach_flags(*sweep_cmd, sweep_flags, /*with_mode=*/false);
  CLI::App* bench_cmd = app.add_subcommand(
      "microbench", "Price the raw reshard exchange at growing sizes");
  attach_flags(*bench_cmd, bench_flags, /*with_mode=*/false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) return cmd_run(run_flags);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_flags);
    if (bench_cmd->parsed()) return cmd_microbench(bench_flags);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
