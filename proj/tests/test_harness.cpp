#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ulysim/config.hpp"
#include "ulysim/harness.hpp"
#include "ulysim/latent_io.hpp"
#include "ulysim/vmajor.hpp"

using namespace ulysim;
namespace fs = std::filesystem;

namespace {

/* Fresh scratch directory per call; removed and recreated. */
fs::path tmp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ulysim_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  REQUIRE(f.good());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

bool same_bits(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(),
                      static_cast<std::size_t>(a.size()) * sizeof(float)) == 0);
}

/* Small four-rank experiment that finishes in milliseconds. */
ExperimentConfig small_config(RunMode mode, std::uint64_t seed) {
  ExperimentConfig c;
  c.topology.nodes = 1;
  c.topology.gpus_per_node = 2;
  c.topology.tiles_per_gpu = 2;
  c.model.layers = 2;
  c.model.tokens = 16;
  c.model.heads = 4;
  c.model.head_dim = 8;
  c.model.batch = 2;
  c.denoise.steps = 8;
  // Warmup 2, sync every 7: the sync lands on step 2 and the linear ramp
  // is free to reach r = 1 on the final step.
  c.schedule = CacheSchedule::linear(2, 7);
  c.mode = mode;
  c.seed = seed;
  return c;
}

}  // namespace

/* ================================================================ config */

TEST_CASE("empty document and canonical json both resolve to the defaults") {
  const ExperimentConfig d;
  for (const auto& c : {parse_config_json(nlohmann::json::object()),
                        parse_config_json(config_to_json(d))}) {
    CHECK(c.topology.nodes == d.topology.nodes);
    CHECK(c.topology.gpus_per_node == d.topology.gpus_per_node);
    CHECK(c.topology.tiles_per_gpu == d.topology.tiles_per_gpu);
    CHECK(c.topology.bandwidth[0] == d.topology.bandwidth[0]);
    CHECK(c.topology.bandwidth[1] == d.topology.bandwidth[1]);
    CHECK(c.topology.bandwidth[2] == d.topology.bandwidth[2]);
    CHECK(c.topology.latency[0] == d.topology.latency[0]);
    CHECK(c.topology.latency[1] == d.topology.latency[1]);
    CHECK(c.topology.latency[2] == d.topology.latency[2]);
    CHECK(c.topology.full_duplex == d.topology.full_duplex);
    CHECK(c.topology.nics_per_node == d.topology.nics_per_node);
    CHECK(c.model.layers == d.model.layers);
    CHECK(c.model.tokens == d.model.tokens);
    CHECK(c.model.heads == d.model.heads);
    CHECK(c.model.head_dim == d.model.head_dim);
    CHECK(c.model.batch == d.model.batch);
    CHECK(c.denoise.steps == d.denoise.steps);
    CHECK(c.schedule.warmup_steps == d.schedule.warmup_steps);
    CHECK(c.schedule.sync_interval == d.schedule.sync_interval);
    CHECK(c.schedule.curve == d.schedule.curve);
    CHECK(c.schedule.fixed_ratio == d.schedule.fixed_ratio);
    CHECK(c.mode == d.mode);
    CHECK(c.seed == d.seed);
    CHECK(c.out == d.out);
    CHECK(c.format == d.format);
    CHECK(c.ssim_window == d.ssim_window);
  }
}

TEST_CASE("partial config file merges over defaults") {
  const auto dir = tmp_dir("config_partial");
  spit(dir / "cfg.json",
       R"({"model":{"layers":2,"tokens":32},"mode":"tapa",
           "schedule":{"curve":"fixed","fixed_ratio":0.5},
           "topology":{"bandwidth":{"inter_node":5e9}}})");
  const auto c = resolve_config(dir / "cfg.json", {});
  CHECK(c.model.layers == 2);
  CHECK(c.model.tokens == 32);
  CHECK(c.model.heads == 12);  // untouched default
  CHECK(c.mode == RunMode::Tapa);
  CHECK(c.schedule.curve == RatioCurve::Fixed);
  CHECK(c.schedule.fixed_ratio == 0.5);
  CHECK(c.topology.bandwidth[2] == 5e9);
  CHECK(c.topology.bandwidth[0] == 185e9);  // sibling keys survive the merge
  CHECK(c.topology.bandwidth[1] == 15e9);
}

TEST_CASE("overrides take dotted paths, after the file, before validation") {
  const auto dir = tmp_dir("config_override");
  spit(dir / "cfg.json", R"({"model":{"layers":2}})");
  const auto c = resolve_config(
      dir / "cfg.json",
      {"model.layers=8", "mode=cocodiff", "topology.full_duplex=false",
       "topology.latency.intra_gpu=0", "schedule.curve=fixed",
       "schedule.fixed_ratio=0.25", "seed=99", "format=jsonl",
       "denoise.ssim_window=7"});
  CHECK(c.model.layers == 8);  // override beats the file
  CHECK(c.mode == RunMode::Cocodiff);
  CHECK(c.topology.full_duplex == false);
  CHECK(c.topology.latency[0] == 0.0);
  CHECK(c.schedule.curve == RatioCurve::Fixed);
  CHECK(c.schedule.fixed_ratio == 0.25);
  CHECK(c.seed == 99);
  CHECK(c.format == "jsonl");
  CHECK(c.ssim_window == 7);
}

TEST_CASE("config rejections carry the offending key") {
  CHECK_THROWS_WITH_AS(
      parse_config_json(nlohmann::json::parse(R"({"model":{"lyrs":1}})")),
      "[config] unknown key 'lyrs' in section 'model'", std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config_json(nlohmann::json::parse(R"({"speed":1})")),
      "[config] unknown top-level key 'speed'", std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config_json(nlohmann::json::parse(R"({"model":{"layers":"x"}})")),
      "[config] key 'model.layers' must be an integer", std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config_json(
          nlohmann::json::parse(R"({"topology":{"bandwidth":{"nvlink":1}}})")),
      "[config] unknown key 'nvlink' in 'topology.bandwidth' (expected "
      "intra_gpu, intra_node, inter_node)",
      std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config_json(nlohmann::json::parse(
                           R"({"schedule":{"curve":"cosine"}})")),
                       "[config] schedule.curve must be linear or fixed, got "
                       "'cosine'",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config_json(nlohmann::json::parse(R"({"mode":"fast"})")),
      "[config] unknown mode 'fast' (expected flat, tapa or cocodiff)",
      std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config_json(nlohmann::json::parse(R"({"format":"xml"})")),
      "[config] format must be csv or jsonl, got 'xml'",
      std::invalid_argument);

  CHECK_THROWS_WITH_AS(override_as_patch("no_equals"),
                       "[config] override must look like section.key=value, "
                       "got 'no_equals'",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(override_as_patch("=5"),
                       "[config] override must look like section.key=value, "
                       "got '=5'",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      override_as_patch("model..layers=5"),
      "[config] override key 'model..layers' has an empty path component",
      std::invalid_argument);
  // A typo'd override dies at final validation.
  CHECK_THROWS_WITH_AS(resolve_config("", {"model.lyrs=1"}),
                       "[config] unknown key 'lyrs' in section 'model'",
                       std::invalid_argument);

  const auto dir = tmp_dir("config_bad_file");
  CHECK_THROWS_AS(resolve_config(dir / "missing.json", {}),
                  std::runtime_error);
  spit(dir / "broken.json", "{not json");
  CHECK_THROWS_AS(resolve_config(dir / "broken.json", {}),
                  std::runtime_error);
  spit(dir / "unknown.json", R"({"model":{"lyrs":1}})");
  CHECK_THROWS_AS(resolve_config(dir / "unknown.json", {}),
                  std::invalid_argument);
}

/* ============================================================= latent io */

TEST_CASE("latent dumps: header layout, row-major payload, round trip") {
  Eigen::MatrixXf m(2, 3);
  m << 1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f;
  const std::string bytes = serialize_latent(m);
  REQUIRE(bytes.size() == kLatentHeaderBytes + 6 * sizeof(float));
  CHECK(bytes.compare(0, 4, "ULAT") == 0);
  std::uint32_t version = 0, dtype = 0;
  std::int64_t rows = 0, cols = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&rows, bytes.data() + 8, 8);
  std::memcpy(&cols, bytes.data() + 16, 8);
  std::memcpy(&dtype, bytes.data() + 24, 4);
  CHECK(version == 1);
  CHECK(rows == 2);
  CHECK(cols == 3);
  CHECK(dtype == 0);
  // Row-major payload: the first stored row is (1, 2, 3).
  float payload[6];
  std::memcpy(payload, bytes.data() + kLatentHeaderBytes, sizeof(payload));
  const float expect[6] = {1, 2, 3, 4, 5, 6};
  CHECK(std::memcmp(payload, expect, sizeof(expect)) == 0);

  const Eigen::MatrixXf back = parse_latent(bytes);
  CHECK(same_bits(back, m));
  CHECK(serialize_latent(back) == bytes);  // byte-identical re-dump

  const auto dir = tmp_dir("latent_file");
  write_latent(dir / "x.bin", m);
  CHECK(same_bits(read_latent(dir / "x.bin"), m));
  CHECK(slurp(dir / "x.bin") == bytes);
}

TEST_CASE("latent dumps reject malformed input") {
  Eigen::MatrixXf m = Eigen::MatrixXf::Zero(3, 2);
  std::string good = serialize_latent(m);

  CHECK_THROWS_WITH_AS(parse_latent(std::string_view(good).substr(0, 10)),
                       "[latent] file too short for header: 10 bytes",
                       std::runtime_error);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(parse_latent(bad_magic), "[latent] bad magic",
                       std::runtime_error);

  std::string bad_version = good;
  bad_version[4] = 9;
  CHECK_THROWS_WITH_AS(parse_latent(bad_version),
                       "[latent] unsupported version 9", std::runtime_error);

  std::string bad_dtype = good;
  bad_dtype[24] = 7;
  CHECK_THROWS_WITH_AS(parse_latent(bad_dtype),
                       "[latent] unsupported dtype code 7",
                       std::runtime_error);

  std::string truncated = good;
  truncated.pop_back();
  CHECK_THROWS_WITH_AS(
      parse_latent(truncated),
      "[latent] payload size mismatch: expected 24 bytes, found 23",
      std::runtime_error);

  const auto dir = tmp_dir("latent_missing");
  CHECK_THROWS_AS(read_latent(dir / "absent.bin"), std::runtime_error);
}

/* ======================================================= report encoding */

namespace {

std::vector<RunReport> sample_reports() {
  RunReport a;  // a flat row: infinite ratio, no fractions
  a.mode = "flat";
  a.seed = 3;
  a.total_seconds = 0.2514001504864856;
  a.flat_total_seconds = a.total_seconds;
  a.speedup_vs_flat = 1.0;
  a.breakdown.compute = 0.2481;
  a.breakdown.flat_a2a = 0.0033001504864856;
  a.intra_gpu_bytes = 123;
  a.intra_node_bytes = 456789;
  a.inter_node_bytes = 0;

  RunReport b;  // an overlapped row with every field busy
  b.mode = "cocodiff";
  b.schedule = "fixed_0.4";
  b.seed = 11;
  b.total_seconds = 0.2504777694558552;
  b.flat_total_seconds = 0.2514001504864856;
  b.speedup_vs_flat = b.flat_total_seconds / b.total_seconds;
  b.breakdown.compute = 0.24810399999999994;
  b.breakdown.phase1_exposed = 1.25e-6;
  b.breakdown.phase2 = 0.0015601899243239982;
  b.breakdown.inverse_a2a = 0.0008135795315312735;
  b.breakdown.idle = 3.5e-9;
  b.intra_gpu_bytes = 19704960;
  b.intra_node_bytes = 29748480;
  b.inter_node_bytes = 1 << 30;
  b.mse = 3.1996199224997675e-06;
  b.psnr_db = 54.94901607731528;
  b.ssim = 0.9999028651628453;
  b.cache_bytes_per_rank = 196608;
  b.active_fractions = {1.0, 1.0, 0.9375, 0.875, 0.0};
  return {a, b};
}

}  // namespace

TEST_CASE("report rows survive csv and jsonl round trips byte for byte") {
  const auto rows = sample_reports();

  const std::string csv = reports_to_csv(rows);
  const auto csv_back = reports_from_csv(csv);
  REQUIRE(csv_back.size() == 2);
  CHECK(reports_to_csv(csv_back) == csv);

  const std::string jsonl = reports_to_jsonl(rows);
  const auto jsonl_back = reports_from_jsonl(jsonl);
  REQUIRE(jsonl_back.size() == 2);
  CHECK(reports_to_jsonl(jsonl_back) == jsonl);

  // Cross-check a few fields landed intact through both decoders.
  for (const auto& back : {csv_back, jsonl_back}) {
    CHECK(back[0].mode == "flat");
    CHECK(back[0].schedule.empty());
    CHECK(back[0].speedup_vs_flat == 1.0);
    CHECK(std::isinf(back[0].psnr_db));
    CHECK(back[0].active_fractions.empty());
    CHECK(back[1].mode == "cocodiff");
    CHECK(back[1].schedule == "fixed_0.4");
    CHECK(back[1].seed == 11);
    CHECK(back[1].total_seconds == rows[1].total_seconds);
    CHECK(back[1].breakdown.phase2 == rows[1].breakdown.phase2);
    CHECK(back[1].psnr_db == rows[1].psnr_db);
    CHECK(back[1].inter_node_bytes == (1 << 30));
    CHECK(back[1].active_fractions == rows[1].active_fractions);
  }
}

TEST_CASE("report decoding rejects malformed tables") {
  CHECK_THROWS_WITH_AS(reports_from_csv("not,a,header\n"),
                       "[report] missing or unexpected csv header",
                       std::invalid_argument);
  const std::string csv = reports_to_csv(sample_reports());
  CHECK_THROWS_AS(reports_from_csv(csv + "short,row\n"),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      reports_from_jsonl(R"({"mode":"flat"})" "\n"),
      nlohmann::json::exception);
  const std::string jsonl = reports_to_jsonl({sample_reports()[0]});
  // Corrupt the inf sentinel.
  std::string bad = jsonl;
  const auto pos = bad.find("\"inf\"");
  REQUIRE(pos != std::string::npos);
  bad.replace(pos, 5, "\"NaN\"");
  CHECK_THROWS_AS(reports_from_jsonl(bad), std::invalid_argument);
}

/* ================================================== experiment reports */

TEST_CASE("flat experiment is its own baseline") {
  const auto res = run_experiment(small_config(RunMode::Flat, 21));
  const RunReport& r = res.report;
  CHECK(r.mode == "flat");
  CHECK(r.schedule.empty());
  CHECK(r.speedup_vs_flat == 1.0);  // exactly, by definition
  CHECK(r.flat_total_seconds == r.total_seconds);
  CHECK(r.mse == 0.0);
  CHECK(std::isinf(r.psnr_db));
  CHECK(r.ssim == 1.0);
  CHECK(r.cache_bytes_per_rank == 0);
  CHECK(r.active_fractions.empty());
  // Flat traffic rides the direct exchange only.
  CHECK(r.breakdown.flat_a2a > 0.0);
  CHECK(r.breakdown.phase1_exposed == 0.0);
  CHECK(r.breakdown.phase2 == 0.0);
  CHECK(r.total_seconds == res.run.makespan);
  CHECK(std::abs(r.breakdown.sum() - r.total_seconds) <= 1e-9);
}

TEST_CASE("two-phase run: identical pixels, faster clock") {
  const auto flat = run_experiment(small_config(RunMode::Flat, 21));
  const auto res = run_experiment(small_config(RunMode::Tapa, 21));
  const RunReport& r = res.report;
  CHECK(r.mode == "tapa");
  // Same seeds -> the internal reference equals an explicit flat run.
  CHECK(r.flat_total_seconds == flat.report.total_seconds);
  CHECK(same_bits(res.latent, flat.latent));
  CHECK(r.mse == 0.0);
  CHECK(std::isinf(r.psnr_db));
  CHECK(r.ssim == 1.0);
  CHECK(r.speedup_vs_flat == r.flat_total_seconds / r.total_seconds);
  CHECK(r.breakdown.flat_a2a == 0.0);
  CHECK(r.breakdown.phase1_exposed > 0.0);
  CHECK(r.breakdown.phase2 > 0.0);
  CHECK(std::abs(r.breakdown.sum() - r.total_seconds) <= 1e-9);
}

TEST_CASE("overlapped selective run: breakdown, traffic, fractions, files") {
  ExperimentConfig cfg = small_config(RunMode::Cocodiff, 21);
  const auto dir = tmp_dir("cocodiff_out");
  cfg.out = (dir / "run").string();
  cfg.format = "csv";
  const auto res = run_experiment(cfg);
  const RunReport& r = res.report;

  CHECK(r.mode == "cocodiff");
  CHECK(r.schedule == "linear");
  CHECK(r.total_seconds == res.run.makespan);
  CHECK(std::abs(r.breakdown.sum() - r.total_seconds) <= 1e-9);
  CHECK(std::isfinite(r.psnr_db));
  CHECK(r.mse > 0.0);
  CHECK(r.ssim > 0.0);
  CHECK(r.ssim < 1.0);

  // Traffic buckets replay the transfer ledger exactly.
  std::int64_t by_class[3] = {0, 0, 0};
  for (const auto& t : res.run.transfers)
    by_class[static_cast<int>(t.link)] += t.bytes;
  CHECK(r.intra_gpu_bytes == by_class[0]);
  CHECK(r.intra_node_bytes == by_class[1]);
  CHECK(r.inter_node_bytes == by_class[2]);
  CHECK(r.inter_node_bytes == 0);  // single-node topology

  // Warmup steps ship everything; the ramp then thins the stream; the
  // final step of a linear ramp ships nothing.
  REQUIRE(r.active_fractions.size() == 8);
  CHECK(r.active_fractions[0] == 1.0);
  CHECK(r.active_fractions[1] == 1.0);
  CHECK(r.active_fractions.back() == 0.0);
  for (double f : r.active_fractions) {
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }

  // Cache accounting matches the closed form.
  CHECK(r.cache_bytes_per_rank ==
        cache_footprint_bytes(cfg.model.layers, cfg.model.batch,
                              cfg.model.tokens, cfg.model.heads,
                              cfg.model.head_dim,
                              cfg.topology.world_size(), 4));

  // The output directory holds the three artifacts, all consistent with
  // the in-memory result.
  CHECK(reports_to_csv({r}) == slurp(dir / "run" / "report.csv"));
  CHECK(timeline_to_csv(res.run.timeline) ==
        slurp(dir / "run" / "timeline.csv"));
  CHECK(same_bits(read_latent(dir / "run" / "latent.bin"), res.latent));
  const auto parsed = reports_from_csv(slurp(dir / "run" / "report.csv"));
  REQUIRE(parsed.size() == 1);
  CHECK(parsed[0].total_seconds == r.total_seconds);
  CHECK(parsed[0].active_fractions == r.active_fractions);
}

TEST_CASE("seed plumbing: config seed drives weights, seed+1 drives noise") {
  ExperimentConfig cfg;
  cfg.topology.nodes = 1;
  cfg.topology.gpus_per_node = 1;
  cfg.topology.tiles_per_gpu = 1;
  cfg.model.layers = 2;
  cfg.model.tokens = 8;
  cfg.model.heads = 2;
  cfg.model.head_dim = 4;
  cfg.model.batch = 2;
  cfg.denoise.steps = 3;
  cfg.mode = RunMode::Flat;
  cfg.seed = 5;
  const auto res = run_experiment(cfg);

  ModelConfig m = cfg.model;
  m.weight_seed = 5;
  DenoiseConfig dn = cfg.denoise;
  dn.noise_seed = 6;
  CHECK(same_bits(res.latent, reference_denoise(m, dn)));
}

TEST_CASE("experiment rejects a model that does not fit the topology") {
  ExperimentConfig cfg = small_config(RunMode::Flat, 1);
  cfg.model.tokens = 10;  // not divisible by P = 4
  CHECK_THROWS_AS(run_experiment(cfg), std::invalid_argument);
}

TEST_CASE("experiment determinism: byte-identical artifacts across reruns") {
  ExperimentConfig cfg = small_config(RunMode::Cocodiff, 9);
  const auto a = run_experiment(cfg);
  const auto b = run_experiment(cfg);
  CHECK(same_bits(a.latent, b.latent));
  CHECK(reports_to_csv({a.report}) == reports_to_csv({b.report}));
  CHECK(reports_to_jsonl({a.report}) == reports_to_jsonl({b.report}));
  CHECK(timeline_to_csv(a.run.timeline) == timeline_to_csv(b.run.timeline));
  CHECK(serialize_latent(a.latent) == serialize_latent(b.latent));
}

/* ================================================================ sweep */

TEST_CASE("sweep covers the mode grid and shares one baseline per seed") {
  ExperimentConfig base = small_config(RunMode::Flat, 31);
  const auto rows = sweep(base, 2);
  REQUIRE(rows.size() == 14);  // 7 configurations x 2 seeds

  const std::vector<std::pair<std::string, std::string>> expect = {
      {"flat", ""},           {"tapa", ""},
      {"cocodiff", "linear"}, {"cocodiff", "fixed_0.2"},
      {"cocodiff", "fixed_0.4"}, {"cocodiff", "fixed_0.6"},
      {"cocodiff", "fixed_0.8"}};
  for (std::size_t v = 0; v < expect.size(); ++v) {
    for (std::size_t s = 0; s < 2; ++s) {
      const RunReport& r = rows[v * 2 + s];
      CHECK(r.mode == expect[v].first);
      CHECK(r.schedule == expect[v].second);
      CHECK(r.seed == 31 + s);
      CHECK(r.speedup_vs_flat ==
            r.flat_total_seconds / r.total_seconds);
      CHECK(std::abs(r.breakdown.sum() - r.total_seconds) <= 1e-9);
    }
  }
  // Every variant at one seed quotes the same flat baseline.
  for (std::size_t v = 0; v < expect.size(); ++v)
    for (std::size_t s = 0; s < 2; ++s)
      CHECK(rows[v * 2 + s].flat_total_seconds ==
            rows[s].flat_total_seconds);
  // Flat rows are self-referential.
  CHECK(rows[0].speedup_vs_flat == 1.0);
  CHECK(rows[1].speedup_vs_flat == 1.0);

  // Determinism across re-invocation.
  const auto rows2 = sweep(base, 2);
  CHECK(reports_to_csv(rows) == reports_to_csv(rows2));

  CHECK_THROWS_WITH_AS(sweep(base, 0),
                       "[harness] sweep needs at least one seed",
                       std::invalid_argument);
}

/* =========================================================== microbench */

TEST_CASE("microbench rows come back sorted with positive-size guard") {
  TopologyConfig topo;  // default two-tier fabric
  const auto rows = microbench({48LL << 20, 3LL << 20, 12LL << 20}, topo);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].size_bytes == (3LL << 20));
  CHECK(rows[1].size_bytes == (12LL << 20));
  CHECK(rows[2].size_bytes == (48LL << 20));
  for (const auto& r : rows) {
    CHECK(r.tapa_total_seconds == r.phase1_seconds + r.phase2_seconds);
    CHECK(r.flat_seconds > 0.0);
  }
  CHECK_THROWS_WITH_AS(microbench({}, topo),
                       "[harness] microbench needs at least one size",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(microbench({1024, 0}, topo),
                       "[harness] microbench sizes must be > 0, got 0",
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(microbench({-5}, topo),
                       "[harness] microbench sizes must be > 0, got -5",
                       std::invalid_argument);
}

TEST_CASE("microbench crossover shape on the default fabric") {
  TopologyConfig topo;
  const auto rows = microbench(default_microbench_sizes(), topo);
  REQUIRE(rows.size() == 5);

  // The two-phase route wins at every probed size, and its advantage
  // widens with size.
  double prev_ratio = 0.0;
  for (const auto& r : rows) {
    CHECK(r.tapa_total_seconds < r.flat_seconds);
    const double ratio = r.flat_seconds / r.tapa_total_seconds;
    CHECK(ratio > prev_ratio);
    prev_ratio = ratio;
  }
  CHECK(rows.back().flat_seconds / rows.back().tapa_total_seconds >= 3.0);

  // Phase 1 rides the fast intra-GPU links: across a 16x payload range it
  // moves less than 10x, while the direct route scales with full linearity.
  CHECK(rows.back().phase1_seconds / rows.front().phase1_seconds < 10.0);
  CHECK(rows.back().flat_seconds / rows.front().flat_seconds == 16.0);
}

TEST_CASE("microbench vanishes with the payload on a latency-free fabric") {
  TopologyConfig topo;
  topo.latency[0] = topo.latency[1] = topo.latency[2] = 0.0;
  // Below one byte per pair on every leg (the cross-GPU mesh divides by
  // six), all transfers round to zero volume.
  const auto rows = microbench({1, 4, 5}, topo);
  for (const auto& r : rows) {
    CHECK(r.flat_seconds == 0.0);
    CHECK(r.tapa_total_seconds == 0.0);
  }
  // One byte per pair is already nonzero.
  const auto nonzero = microbench({12}, topo);
  CHECK(nonzero[0].flat_seconds > 0.0);
}
