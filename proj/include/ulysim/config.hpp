#pragma once

/* Experiment configuration: one JSON file with four sections
 *
 *   topology  nodes / gpus_per_node / tiles_per_gpu / bandwidth / latency /
 *             full_duplex / nics_per_node
 *   model     layers / tokens / heads / head_dim / batch
 *   denoise   steps / ssim_window
 *   schedule  warmup_steps / sync_interval / curve / fixed_ratio
 *
 * plus the top-level keys mode, seed, out, format.  Bandwidth and latency
 * are objects keyed by link class: intra_gpu, intra_node, inter_node.
 *
 * A config file may specify any subset; unspecified keys keep their
 * defaults.  Unknown keys anywhere are rejected.  Command-line overrides
 * use dotted paths into the same schema, e.g.
 *
 *   --override topology.gpus_per_node=4
 *   --override schedule.curve=fixed --override schedule.fixed_ratio=0.5
 *
 * The run's RNG seeds derive from the single top-level seed: the weight
 * stream uses `seed` and the noise stream uses `seed + 1`.
 */

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "json.hpp"
#include "ulysim/dit.hpp"
#include "ulysim/schedule.hpp"
#include "ulysim/topology.hpp"
#include "ulysim/vmajor.hpp"

namespace ulysim {

struct ExperimentConfig {
  TopologyConfig topology;
  ModelConfig model;
  DenoiseConfig denoise;
  CacheSchedule schedule;

  RunMode mode = RunMode::Flat;
  std::uint64_t seed = 1;
  std::string out;             // output directory; empty = write nothing
  std::string format = "csv";  // csv | jsonl
  int ssim_window = 0;         // 0 = one global similarity window
};

inline RunMode mode_from_string(std::string_view s) {
  if (s == "flat") return RunMode::Flat;
  if (s == "tapa") return RunMode::Tapa;
  if (s == "cocodiff") return RunMode::Cocodiff;
  throw std::invalid_argument(
      fmt::format("[config] unknown mode '{}' (expected flat, tapa or "
                  "cocodiff)",
                  s));
}

namespace detail {

using nlohmann::json;

[[noreturn]] inline void bad_type(const std::string& path,
                                  const char* expected) {
  throw std::invalid_argument(
      fmt::format("[config] key '{}' must be {}", path, expected));
}

inline int get_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) bad_type(path, "an integer");
  return v.get<int>();
}

inline double get_num(const json& v, const std::string& path) {
  if (!v.is_number()) bad_type(path, "a number");
  return v.get<double>();
}

inline bool get_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) bad_type(path, "a boolean");
  return v.get<bool>();
}

inline std::string get_str(const json& v, const std::string& path) {
  if (!v.is_string()) bad_type(path, "a string");
  return v.get<std::string>();
}

inline void parse_link_array(const json& v, const std::string& path,
                             double out[3]) {
  if (!v.is_object()) bad_type(path, "an object with per-link-class keys");
  for (const auto& [key, val] : v.items()) {
    if (key == "intra_gpu")
      out[0] = get_num(val, path + ".intra_gpu");
    else if (key == "intra_node")
      out[1] = get_num(val, path + ".intra_node");
    else if (key == "inter_node")
      out[2] = get_num(val, path + ".inter_node");
    else
      throw std::invalid_argument(fmt::format(
          "[config] unknown key '{}' in '{}' (expected intra_gpu, "
          "intra_node, inter_node)",
          key, path));
  }
}

inline void parse_topology(const json& j, TopologyConfig& t) {
  for (const auto& [key, v] : j.items()) {
    if (key == "nodes")
      t.nodes = get_int(v, "topology.nodes");
    else if (key == "gpus_per_node")
      t.gpus_per_node = get_int(v, "topology.gpus_per_node");
    else if (key == "tiles_per_gpu")
      t.tiles_per_gpu = get_int(v, "topology.tiles_per_gpu");
    else if (key == "bandwidth")
      parse_link_array(v, "topology.bandwidth", t.bandwidth);
    else if (key == "latency")
      parse_link_array(v, "topology.latency", t.latency);
    else if (key == "full_duplex")
      t.full_duplex = get_bool(v, "topology.full_duplex");
    else if (key == "nics_per_node")
      t.nics_per_node = get_int(v, "topology.nics_per_node");
    else
      throw std::invalid_argument(fmt::format(
          "[config] unknown key '{}' in section 'topology'", key));
  }
}

inline void parse_model(const json& j, ModelConfig& m) {
  for (const auto& [key, v] : j.items()) {
    if (key == "layers")
      m.layers = get_int(v, "model.layers");
    else if (key == "tokens")
      m.tokens = get_int(v, "model.tokens");
    else if (key == "heads")
      m.heads = get_int(v, "model.heads");
    else if (key == "head_dim")
      m.head_dim = get_int(v, "model.head_dim");
    else if (key == "batch")
      m.batch = get_int(v, "model.batch");
    else
      throw std::invalid_argument(
          fmt::format("[config] unknown key '{}' in section 'model'", key));
  }
}

inline void parse_denoise(const json& j, ExperimentConfig& c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "steps")
      c.denoise.steps = get_int(v, "denoise.steps");
    else if (key == "ssim_window")
      c.ssim_window = get_int(v, "denoise.ssim_window");
    else
      throw std::invalid_argument(
          fmt::format("[config] unknown key '{}' in section 'denoise'", key));
  }
}

inline void parse_schedule(const json& j, CacheSchedule& s) {
  for (const auto& [key, v] : j.items()) {
    if (key == "warmup_steps")
      s.warmup_steps = get_int(v, "schedule.warmup_steps");
    else if (key == "sync_interval")
      s.sync_interval = get_int(v, "schedule.sync_interval");
    else if (key == "curve") {
      const std::string name = get_str(v, "schedule.curve");
      if (name == "linear")
        s.curve = RatioCurve::Linear;
      else if (name == "fixed")
        s.curve = RatioCurve::Fixed;
      else
        throw std::invalid_argument(fmt::format(
            "[config] schedule.curve must be linear or fixed, got '{}'",
            name));
    } else if (key == "fixed_ratio")
      s.fixed_ratio = get_num(v, "schedule.fixed_ratio");
    else
      throw std::invalid_argument(fmt::format(
          "[config] unknown key '{}' in section 'schedule'", key));
  }
}

}  // namespace detail

/* Interpret a complete JSON document as a configuration.  Sections and keys
 * may be omitted (defaults apply); unknown ones throw. */
inline ExperimentConfig parse_config_json(const nlohmann::json& j) {
  if (!j.is_object())
    throw std::invalid_argument("[config] top level must be an object");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "topology") {
      if (!v.is_object()) detail::bad_type("topology", "an object");
      detail::parse_topology(v, c.topology);
    } else if (key == "model") {
      if (!v.is_object()) detail::bad_type("model", "an object");
      detail::parse_model(v, c.model);
    } else if (key == "denoise") {
      if (!v.is_object()) detail::bad_type("denoise", "an object");
      detail::parse_denoise(v, c);
    } else if (key == "schedule") {
      if (!v.is_object()) detail::bad_type("schedule", "an object");
      detail::parse_schedule(v, c.schedule);
    } else if (key == "mode") {
      c.mode = mode_from_string(detail::get_str(v, "mode"));
    } else if (key == "seed") {
      if (!v.is_number_integer()) detail::bad_type("seed", "an integer");
      c.seed = v.get<std::uint64_t>();
    } else if (key == "out") {
      c.out = detail::get_str(v, "out");
    } else if (key == "format") {
      c.format = detail::get_str(v, "format");
      if (c.format != "csv" && c.format != "jsonl")
        throw std::invalid_argument(fmt::format(
            "[config] format must be csv or jsonl, got '{}'", c.format));
    } else {
      throw std::invalid_argument(
          fmt::format("[config] unknown top-level key '{}'", key));
    }
  }
  return c;
}

/* Canonical JSON for a configuration; parse_config_json inverts it. */
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["topology"] = {
      {"nodes", c.topology.nodes},
      {"gpus_per_node", c.topology.gpus_per_node},
      {"tiles_per_gpu", c.topology.tiles_per_gpu},
      {"bandwidth",
       {{"intra_gpu", c.topology.bandwidth[0]},
        {"intra_node", c.topology.bandwidth[1]},
        {"inter_node", c.topology.bandwidth[2]}}},
      {"latency",
       {{"intra_gpu", c.topology.latency[0]},
        {"intra_node", c.topology.latency[1]},
        {"inter_node", c.topology.latency[2]}}},
      {"full_duplex", c.topology.full_duplex},
      {"nics_per_node", c.topology.nics_per_node},
  };
  j["model"] = {
      {"layers", c.model.layers},     {"tokens", c.model.tokens},
      {"heads", c.model.heads},       {"head_dim", c.model.head_dim},
      {"batch", c.model.batch},
  };
  j["denoise"] = {
      {"steps", c.denoise.steps},
      {"ssim_window", c.ssim_window},
  };
  j["schedule"] = {
      {"warmup_steps", c.schedule.warmup_steps},
      {"sync_interval", c.schedule.sync_interval},
      {"curve", c.schedule.curve == RatioCurve::Linear ? "linear" : "fixed"},
      {"fixed_ratio", c.schedule.fixed_ratio},
  };
  j["mode"] = std::string(to_string(c.mode));
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["format"] = c.format;
  return j;
}

/* Apply one dotted-path override, e.g. "model.layers=8" or "mode=tapa".
 * The value is parsed as a JSON literal when possible and as a bare string
 * otherwise, then the full document is re-validated. */
inline nlohmann::json override_as_patch(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw std::invalid_argument(fmt::format(
        "[config] override must look like section.key=value, got '{}'",
        assignment));
  const std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));
  nlohmann::json parsed =
      nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded() || value.empty())
    parsed = value;  // bare words (mode names, paths) are strings

  nlohmann::json patch;
  nlohmann::json* cursor = &patch;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part =
        key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty())
      throw std::invalid_argument(fmt::format(
          "[config] override key '{}' has an empty path component", key));
    if (dot == std::string::npos) {
      (*cursor)[part] = std::move(parsed);
      break;
    }
    cursor = &(*cursor)[part];
    start = dot + 1;
  }
  return patch;
}

/* Resolve a configuration: optional file, then overrides, then validation.
 * An empty path skips the file and starts from defaults. */
inline ExperimentConfig resolve_config(
    const std::filesystem::path& path,
    const std::vector<std::string>& overrides) {
  nlohmann::json doc = config_to_json(ExperimentConfig{});
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f)
      throw std::runtime_error(fmt::format(
          "[config] cannot open '{}' for reading", path.string()));
    nlohmann::json file_json;
    try {
      file_json = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(fmt::format("[config] '{}' is not valid JSON: {}",
                                           path.string(), e.what()));
    }
    // Reject unknown keys up front so typos fail even when merge would
    // silently deep-merge them into the document.
    parse_config_json(file_json);
    doc.merge_patch(file_json);
  }
  for (const auto& o : overrides) doc.merge_patch(override_as_patch(o));
  return parse_config_json(doc);
}

}  // namespace ulysim
