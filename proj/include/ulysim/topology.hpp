/*
 * topology.hpp — rank addressing and the alpha-beta link model for a tiled
 * multi-GPU cluster.
 *
 * The machine model is node -> GPU -> tile, with one simulated rank per tile.
 * Rank order is tile-fastest: consecutive ranks are the tiles of one GPU, then
 * GPUs within a node, then nodes.  Every distinct rank pair is reachable over
 * exactly one of three link classes, each with its own latency/bandwidth pair:
 *
 *   IntraGpu       same node, same GPU (tile-to-tile inside a package)
 *   IntraNodeRing  same node, different GPU (the per-tile-index ring/mesh)
 *   InterNode      different node (fabric NICs)
 *
 * Transfer time is affine: xfer_time = latency(class) + bytes / bandwidth(class).
 * Links are full-duplex by default.  There is no routing or congestion model;
 * concurrency policy (what shares a link, what runs in parallel) lives with the
 * collective algorithms, not here.
 */
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ulysim {

enum class LinkClass : int { IntraGpu = 0, IntraNodeRing = 1, InterNode = 2 };

const char* to_string(LinkClass c);

struct RankCoord {
  int node = 0;
  int gpu = 0;
  int tile = 0;
  bool operator==(const RankCoord&) const = default;
};

struct TopologyConfig {
  int nodes = 1;
  int gpus_per_node = 6;
  int tiles_per_gpu = 2;

  // Per-class unidirectional bandwidth (bytes/s) and latency (s), indexed by
  // LinkClass.  Defaults follow the published per-link figures of the target
  // cluster; the nonzero intra-GPU latency models per-transfer launch overhead.
  double bandwidth[3] = {185e9, 15e9, 25e9};
  double latency[3] = {10e-6, 0.0, 0.0};

  // Full-duplex: a simultaneous send and receive each get the full
  // unidirectional bandwidth.  Half-duplex doubles exchange durations.
  bool full_duplex = true;

  // Inter-node bandwidth is uniform; NIC aggregation is a sensitivity knob
  // that scales it rather than being modeled per-NIC.
  int nics_per_node = 1;

  int world_size() const { return nodes * gpus_per_node * tiles_per_gpu; }

  // Throws std::invalid_argument if any extent or rate is out of range.
  void validate() const;
};

// Tile-fastest rank <-> coordinate mapping.  Both throw on out-of-range input.
RankCoord rank_to_coord(const TopologyConfig& cfg, int rank);
int coord_to_rank(const TopologyConfig& cfg, const RankCoord& coord);

// Link class for a distinct rank pair; symmetric.  Throws if a == b or either
// rank is out of range.
LinkClass classify(const TopologyConfig& cfg, int a, int b);

// Seconds to move `bytes` over one link of class `c`.  Affine in bytes.
double xfer_time(const TopologyConfig& cfg, std::int64_t bytes, LinkClass c);

// Effective unidirectional bandwidth for a class (applies the NIC knob).
double effective_bandwidth(const TopologyConfig& cfg, LinkClass c);

// The phase-2 group of `rank`: all ranks sharing its tile index, ascending.
// Groups partition the rank set; each has nodes * gpus_per_node members.
std::vector<int> phase2_group(const TopologyConfig& cfg, int rank);

// Slowest link class present in this topology (lowest effective bandwidth
// among classes that at least one rank pair uses).
LinkClass slowest_link_class(const TopologyConfig& cfg);

// Ranks belonging to the same GPU as `rank` (its phase-1 peers plus itself),
// ascending.  Size tiles_per_gpu.
std::vector<int> gpu_ranks(const TopologyConfig& cfg, int rank);

// First global token-row owner ordering helper: the GPU index of a rank in
// linearized (node-major) order.
int gpu_linear_index(const TopologyConfig& cfg, int rank);

}  // namespace ulysim
