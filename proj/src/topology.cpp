#include "ulysim/topology.hpp"

#include <limits>
#include <stdexcept>

#include <fmt/format.h>

namespace ulysim {

const char* to_string(LinkClass c) {
  switch (c) {
    case LinkClass::IntraGpu:
      return "intra_gpu";
    case LinkClass::IntraNodeRing:
      return "intra_node_ring";
    case LinkClass::InterNode:
      return "inter_node";
  }
  return "?";
}

void TopologyConfig::validate() const {
  if (nodes < 1 || gpus_per_node < 1 || tiles_per_gpu < 1) {
    throw std::invalid_argument(fmt::format(
        "[topology] extents must be >= 1, got nodes={} gpus_per_node={} "
        "tiles_per_gpu={}",
        nodes, gpus_per_node, tiles_per_gpu));
  }
  for (int i = 0; i < 3; ++i) {
    if (!(bandwidth[i] > 0.0)) {
      throw std::invalid_argument(
          fmt::format("[topology] bandwidth[{}] must be > 0", i));
    }
    if (latency[i] < 0.0) {
      throw std::invalid_argument(
          fmt::format("[topology] latency[{}] must be >= 0", i));
    }
  }
  if (nics_per_node < 1) {
    throw std::invalid_argument("[topology] nics_per_node must be >= 1");
  }
}

static void check_rank(const TopologyConfig& cfg, int rank, const char* who) {
  if (rank < 0 || rank >= cfg.world_size()) {
    throw std::invalid_argument(fmt::format("[topology] {}: rank {} out of range [0, {})",
                                            who, rank, cfg.world_size()));
  }
}

RankCoord rank_to_coord(const TopologyConfig& cfg, int rank) {
  check_rank(cfg, rank, "rank_to_coord");
  RankCoord c;
  c.tile = rank % cfg.tiles_per_gpu;
  c.gpu = (rank / cfg.tiles_per_gpu) % cfg.gpus_per_node;
  c.node = rank / (cfg.tiles_per_gpu * cfg.gpus_per_node);
  return c;
}

int coord_to_rank(const TopologyConfig& cfg, const RankCoord& coord) {
  if (coord.node < 0 || coord.node >= cfg.nodes || coord.gpu < 0 ||
      coord.gpu >= cfg.gpus_per_node || coord.tile < 0 ||
      coord.tile >= cfg.tiles_per_gpu) {
    throw std::invalid_argument(
        fmt::format("[topology] coord_to_rank: coordinate ({},{},{}) out of range",
                    coord.node, coord.gpu, coord.tile));
  }
  return (coord.node * cfg.gpus_per_node + coord.gpu) * cfg.tiles_per_gpu +
         coord.tile;
}

LinkClass classify(const TopologyConfig& cfg, int a, int b) {
  check_rank(cfg, a, "classify");
  check_rank(cfg, b, "classify");
  if (a == b) {
    throw std::invalid_argument(
        "[topology] classify requires two distinct ranks");
  }
  const RankCoord ca = rank_to_coord(cfg, a);
  const RankCoord cb = rank_to_coord(cfg, b);
  if (ca.node != cb.node) return LinkClass::InterNode;
  if (ca.gpu != cb.gpu) return LinkClass::IntraNodeRing;
  return LinkClass::IntraGpu;
}

double effective_bandwidth(const TopologyConfig& cfg, LinkClass c) {
  double bw = cfg.bandwidth[static_cast<int>(c)];
  if (c == LinkClass::InterNode) bw *= cfg.nics_per_node;
  return bw;
}

double xfer_time(const TopologyConfig& cfg, std::int64_t bytes, LinkClass c) {
  if (bytes < 0) {
    throw std::invalid_argument("[topology] xfer_time: bytes must be >= 0");
  }
  return cfg.latency[static_cast<int>(c)] +
         static_cast<double>(bytes) / effective_bandwidth(cfg, c);
}

std::vector<int> phase2_group(const TopologyConfig& cfg, int rank) {
  check_rank(cfg, rank, "phase2_group");
  const int tile = rank % cfg.tiles_per_gpu;
  std::vector<int> group;
  group.reserve(static_cast<std::size_t>(cfg.nodes) * cfg.gpus_per_node);
  for (int r = tile; r < cfg.world_size(); r += cfg.tiles_per_gpu) {
    group.push_back(r);
  }
  return group;
}

LinkClass slowest_link_class(const TopologyConfig& cfg) {
  LinkClass best = LinkClass::IntraGpu;
  bool found = false;
  double best_bw = std::numeric_limits<double>::infinity();
  auto consider = [&](LinkClass c, bool present) {
    if (!present) return;
    const double bw = effective_bandwidth(cfg, c);
    if (!found || bw < best_bw) {
      found = true;
      best = c;
      best_bw = bw;
    }
  };
  consider(LinkClass::IntraGpu, cfg.tiles_per_gpu >= 2);
  consider(LinkClass::IntraNodeRing, cfg.gpus_per_node >= 2);
  consider(LinkClass::InterNode, cfg.nodes >= 2);
  if (!found) {
    // Single-rank machine: no links at all; report the fastest class so that
    // degenerate collectives cost only their (zero-byte) latency.
    best = LinkClass::IntraGpu;
  }
  return best;
}

std::vector<int> gpu_ranks(const TopologyConfig& cfg, int rank) {
  check_rank(cfg, rank, "gpu_ranks");
  const int base = (rank / cfg.tiles_per_gpu) * cfg.tiles_per_gpu;
  std::vector<int> out;
  out.reserve(cfg.tiles_per_gpu);
  for (int t = 0; t < cfg.tiles_per_gpu; ++t) out.push_back(base + t);
  return out;
}

int gpu_linear_index(const TopologyConfig& cfg, int rank) {
  check_rank(cfg, rank, "gpu_linear_index");
  return rank / cfg.tiles_per_gpu;
}

}  // namespace ulysim
