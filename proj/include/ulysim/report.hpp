#pragma once

/* Run summaries and their on-disk forms.
 *
 * A RunReport condenses one simulated denoising run: wall-clock makespan,
 * a six-way time breakdown of rank 0's main execution lane, traffic per
 * link class, quality versus the flat single-exchange reference, cache
 * footprint, and the per-step fraction of rows shipped.
 *
 * Breakdown buckets (seconds, rank 0, main lane only):
 *   compute          every modeled kernel, including active-row selection
 *   phase1_exposed   intra-GPU reshard time not hidden behind compute:
 *                    blocking phase-1 exchanges plus stalls waiting on a
 *                    backgrounded phase 1
 *   phase2           cross-GPU exchange time, stalls included, plus the
 *                    active-index all-gather that gates it
 *   flat_a2a         the single-phase direct exchange (flat mode only)
 *   inverse_a2a      the post-attention inverse reshard
 *   idle             anything else the main lane spent blocked
 *
 * Buckets sum to the rank's total simulated time (within rounding); the
 * total itself is the simulator's makespan.
 *
 * Serialization: CSV (one header line, one row per report) and JSON lines
 * (one object per row).  Both forms parse back and re-serialize to the
 * identical bytes; doubles use shortest round-trip formatting, and an
 * infinite distortion ratio is written as the string "inf".
 */

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "json.hpp"
#include "ulysim/simnet.hpp"

namespace ulysim {

struct TimeBreakdown {
  double compute = 0.0;
  double phase1_exposed = 0.0;
  double phase2 = 0.0;
  double flat_a2a = 0.0;
  double inverse_a2a = 0.0;
  double idle = 0.0;

  double sum() const {
    return compute + phase1_exposed + phase2 + flat_a2a + inverse_a2a + idle;
  }
};

/* Bucket one rank's main-lane segments.  Comm and stall segments are
 * attributed by their exchange phase; a comm phase this table does not
 * know is a logic error, not an idle second. */
inline TimeBreakdown classify_rank_segments(const std::vector<Segment>& merged,
                                            int rank) {
  TimeBreakdown b;
  for (const Segment& s : merged) {
    if (s.rank != rank || s.lane != Lane::Main) continue;
    const double w = s.t1 - s.t0;
    if (s.kind == SegmentKind::Compute) {
      b.compute += w;
    } else if (s.label == "tapa_p1") {
      b.phase1_exposed += w;
    } else if (s.label == "tapa_p2" || s.label == "idx_allgather") {
      b.phase2 += w;
    } else if (s.label == "flat_a2a") {
      b.flat_a2a += w;
    } else if (s.label == "a2a_inv") {
      b.inverse_a2a += w;
    } else if (s.kind == SegmentKind::Idle) {
      b.idle += w;
    } else {
      throw std::logic_error(fmt::format(
          "[report] unclassified communication phase '{}'", s.label));
    }
  }
  return b;
}

/* Total transferred bytes indexed by LinkClass. */
inline std::array<std::int64_t, 3> bytes_by_link_class(
    const std::vector<TransferRecord>& transfers) {
  std::array<std::int64_t, 3> out{0, 0, 0};
  for (const TransferRecord& t : transfers)
    out[static_cast<std::size_t>(t.link)] += t.bytes;
  return out;
}

struct RunReport {
  std::string mode = "flat";       // flat | tapa | cocodiff
  std::string schedule;            // cache curve tag; empty outside cocodiff
  std::uint64_t seed = 0;
  double total_seconds = 0.0;      // this run's makespan
  double flat_total_seconds = 0.0; // reference makespan (same seeds)
  double speedup_vs_flat = 1.0;    // flat_total_seconds / total_seconds
  TimeBreakdown breakdown;
  std::int64_t intra_gpu_bytes = 0;
  std::int64_t intra_node_bytes = 0;
  std::int64_t inter_node_bytes = 0;
  double mse = 0.0;
  double psnr_db = std::numeric_limits<double>::infinity();
  double ssim = 1.0;
  std::int64_t cache_bytes_per_rank = 0;
  std::vector<double> active_fractions;  // one per denoise step; cocodiff only
};

namespace detail {

/* Shortest representation that parses back to the same double; infinities
 * print as inf/-inf. */
inline std::string fmt_double(double v) { return fmt::format("{}", v); }

inline double parse_double(std::string_view s, const char* what) {
  if (s.empty())
    throw std::invalid_argument(
        fmt::format("[report] empty {} field", what));
  char* end = nullptr;
  const std::string owned(s);
  const double v = std::strtod(owned.c_str(), &end);
  if (end != owned.c_str() + owned.size())
    throw std::invalid_argument(
        fmt::format("[report] bad {} value '{}'", what, owned));
  return v;
}

inline std::int64_t parse_i64(std::string_view s, const char* what) {
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw std::invalid_argument(fmt::format("[report] bad {} value '{}'",
                                            what, std::string(s)));
  return v;
}

inline std::uint64_t parse_u64(std::string_view s, const char* what) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw std::invalid_argument(fmt::format("[report] bad {} value '{}'",
                                            what, std::string(s)));
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline constexpr std::string_view kReportCsvHeader =
    "mode,schedule,seed,total_seconds,flat_total_seconds,speedup_vs_flat,"
    "compute_seconds,phase1_exposed_seconds,phase2_seconds,flat_a2a_seconds,"
    "inverse_a2a_seconds,idle_seconds,intra_gpu_bytes,intra_node_bytes,"
    "inter_node_bytes,mse,psnr_db,ssim,cache_bytes_per_rank,active_fractions";

}  // namespace detail

inline std::string reports_to_csv(const std::vector<RunReport>& rows) {
  std::string out(detail::kReportCsvHeader);
  out += '\n';
  for (const RunReport& r : rows) {
    std::string fr;
    for (std::size_t i = 0; i < r.active_fractions.size(); ++i) {
      if (i) fr += ';';
      fr += detail::fmt_double(r.active_fractions[i]);
    }
    out += fmt::format(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.mode, r.schedule, r.seed, detail::fmt_double(r.total_seconds),
        detail::fmt_double(r.flat_total_seconds),
        detail::fmt_double(r.speedup_vs_flat),
        detail::fmt_double(r.breakdown.compute),
        detail::fmt_double(r.breakdown.phase1_exposed),
        detail::fmt_double(r.breakdown.phase2),
        detail::fmt_double(r.breakdown.flat_a2a),
        detail::fmt_double(r.breakdown.inverse_a2a),
        detail::fmt_double(r.breakdown.idle), r.intra_gpu_bytes,
        r.intra_node_bytes, r.inter_node_bytes, detail::fmt_double(r.mse),
        detail::fmt_double(r.psnr_db), detail::fmt_double(r.ssim),
        r.cache_bytes_per_rank, fr);
  }
  return out;
}

inline std::vector<RunReport> reports_from_csv(std::string_view text) {
  auto lines = detail::split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty() || lines[0] != detail::kReportCsvHeader)
    throw std::invalid_argument("[report] missing or unexpected csv header");
  std::vector<RunReport> rows;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto f = detail::split(lines[li], ',');
    if (f.size() != 20)
      throw std::invalid_argument(fmt::format(
          "[report] csv row {} has {} fields, expected 20", li, f.size()));
    RunReport r;
    r.mode = std::string(f[0]);
    r.schedule = std::string(f[1]);
    r.seed = detail::parse_u64(f[2], "seed");
    r.total_seconds = detail::parse_double(f[3], "total_seconds");
    r.flat_total_seconds = detail::parse_double(f[4], "flat_total_seconds");
    r.speedup_vs_flat = detail::parse_double(f[5], "speedup_vs_flat");
    r.breakdown.compute = detail::parse_double(f[6], "compute_seconds");
    r.breakdown.phase1_exposed =
        detail::parse_double(f[7], "phase1_exposed_seconds");
    r.breakdown.phase2 = detail::parse_double(f[8], "phase2_seconds");
    r.breakdown.flat_a2a = detail::parse_double(f[9], "flat_a2a_seconds");
    r.breakdown.inverse_a2a =
        detail::parse_double(f[10], "inverse_a2a_seconds");
    r.breakdown.idle = detail::parse_double(f[11], "idle_seconds");
    r.intra_gpu_bytes = detail::parse_i64(f[12], "intra_gpu_bytes");
    r.intra_node_bytes = detail::parse_i64(f[13], "intra_node_bytes");
    r.inter_node_bytes = detail::parse_i64(f[14], "inter_node_bytes");
    r.mse = detail::parse_double(f[15], "mse");
    r.psnr_db = detail::parse_double(f[16], "psnr_db");
    r.ssim = detail::parse_double(f[17], "ssim");
    r.cache_bytes_per_rank = detail::parse_i64(f[18], "cache_bytes_per_rank");
    if (!f[19].empty())
      for (const auto part : detail::split(f[19], ';'))
        r.active_fractions.push_back(
            detail::parse_double(part, "active_fractions"));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline nlohmann::json report_to_json(const RunReport& r) {
  nlohmann::json j;
  j["mode"] = r.mode;
  j["schedule"] = r.schedule;
  j["seed"] = r.seed;
  j["total_seconds"] = r.total_seconds;
  j["flat_total_seconds"] = r.flat_total_seconds;
  j["speedup_vs_flat"] = r.speedup_vs_flat;
  j["compute_seconds"] = r.breakdown.compute;
  j["phase1_exposed_seconds"] = r.breakdown.phase1_exposed;
  j["phase2_seconds"] = r.breakdown.phase2;
  j["flat_a2a_seconds"] = r.breakdown.flat_a2a;
  j["inverse_a2a_seconds"] = r.breakdown.inverse_a2a;
  j["idle_seconds"] = r.breakdown.idle;
  j["intra_gpu_bytes"] = r.intra_gpu_bytes;
  j["intra_node_bytes"] = r.intra_node_bytes;
  j["inter_node_bytes"] = r.inter_node_bytes;
  j["mse"] = r.mse;
  if (std::isinf(r.psnr_db))
    j["psnr_db"] = "inf";
  else
    j["psnr_db"] = r.psnr_db;
  j["ssim"] = r.ssim;
  j["cache_bytes_per_rank"] = r.cache_bytes_per_rank;
  j["active_fractions"] = r.active_fractions;
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.mode = j.at("mode").get<std::string>();
  r.schedule = j.at("schedule").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.total_seconds = j.at("total_seconds").get<double>();
  r.flat_total_seconds = j.at("flat_total_seconds").get<double>();
  r.speedup_vs_flat = j.at("speedup_vs_flat").get<double>();
  r.breakdown.compute = j.at("compute_seconds").get<double>();
  r.breakdown.phase1_exposed = j.at("phase1_exposed_seconds").get<double>();
  r.breakdown.phase2 = j.at("phase2_seconds").get<double>();
  r.breakdown.flat_a2a = j.at("flat_a2a_seconds").get<double>();
  r.breakdown.inverse_a2a = j.at("inverse_a2a_seconds").get<double>();
  r.breakdown.idle = j.at("idle_seconds").get<double>();
  r.intra_gpu_bytes = j.at("intra_gpu_bytes").get<std::int64_t>();
  r.intra_node_bytes = j.at("intra_node_bytes").get<std::int64_t>();
  r.inter_node_bytes = j.at("inter_node_bytes").get<std::int64_t>();
  r.mse = j.at("mse").get<double>();
  const auto& p = j.at("psnr_db");
  if (p.is_string()) {
    if (p.get<std::string>() != "inf")
      throw std::invalid_argument(fmt::format(
          "[report] bad psnr_db value '{}'", p.get<std::string>()));
    r.psnr_db = std::numeric_limits<double>::infinity();
  } else {
    r.psnr_db = p.get<double>();
  }
  r.ssim = j.at("ssim").get<double>();
  r.cache_bytes_per_rank = j.at("cache_bytes_per_rank").get<std::int64_t>();
  r.active_fractions =
      j.at("active_fractions").get<std::vector<double>>();
  return r;
}

inline std::string reports_to_jsonl(const std::vector<RunReport>& rows) {
  std::string out;
  for (const RunReport& r : rows) {
    out += report_to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<RunReport> reports_from_jsonl(std::string_view text) {
  std::vector<RunReport> rows;
  auto lines = detail::split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  for (const auto line : lines)
    rows.push_back(report_from_json(nlohmann::json::parse(line)));
  return rows;
}

/* ------------------------------------------------------------- timeline */

inline std::string_view to_string(Lane l) {
  return l == Lane::Main ? "main" : "bg";
}

inline std::string timeline_to_csv(const std::vector<Segment>& segments) {
  std::string out = "rank,lane,kind,t0,t1,label\n";
  for (const Segment& s : segments)
    out += fmt::format("{},{},{},{},{},{}\n", s.rank, to_string(s.lane),
                       to_string(s.kind), detail::fmt_double(s.t0),
                       detail::fmt_double(s.t1), s.label);
  return out;
}

inline std::string timeline_to_jsonl(const std::vector<Segment>& segments) {
  std::string out;
  for (const Segment& s : segments) {
    nlohmann::json j;
    j["rank"] = s.rank;
    j["lane"] = std::string(to_string(s.lane));
    j["kind"] = std::string(to_string(s.kind));
    j["t0"] = s.t0;
    j["t1"] = s.t1;
    j["label"] = s.label;
    out += j.dump();
    out += '\n';
  }
  return out;
}

/* ----------------------------------------------------------- microbench */

/* One size point: the direct single-phase exchange versus the two-phase
 * route, priced by the shared collective cost model. */
struct MicrobenchRow {
  std::int64_t size_bytes = 0;     // per-rank payload being reshard
  double flat_seconds = 0.0;       // single direct exchange
  double tapa_total_seconds = 0.0; // phase1_seconds + phase2_seconds
  double phase1_seconds = 0.0;     // intra-GPU leg
  double phase2_seconds = 0.0;     // cross-GPU leg
};

inline std::string microbench_to_csv(const std::vector<MicrobenchRow>& rows) {
  std::string out = "mode,size_bytes,total_seconds,phase1_seconds,phase2_seconds\n";
  for (const MicrobenchRow& r : rows)
    out += fmt::format("flat,{},{},,\n", r.size_bytes,
                       detail::fmt_double(r.flat_seconds));
  for (const MicrobenchRow& r : rows)
    out += fmt::format("tapa,{},{},{},{}\n", r.size_bytes,
                       detail::fmt_double(r.tapa_total_seconds),
                       detail::fmt_double(r.phase1_seconds),
                       detail::fmt_double(r.phase2_seconds));
  return out;
}

inline std::string microbench_to_jsonl(
    const std::vector<MicrobenchRow>& rows) {
  std::string out;
  for (const MicrobenchRow& r : rows) {
    nlohmann::json j;
    j["mode"] = "flat";
    j["size_bytes"] = r.size_bytes;
    j["total_seconds"] = r.flat_seconds;
    out += j.dump();
    out += '\n';
  }
  for (const MicrobenchRow& r : rows) {
    nlohmann::json j;
    j["mode"] = "tapa";
    j["size_bytes"] = r.size_bytes;
    j["total_seconds"] = r.tapa_total_seconds;
    j["phase1_seconds"] = r.phase1_seconds;
    j["phase2_seconds"] = r.phase2_seconds;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace ulysim
