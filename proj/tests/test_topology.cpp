/*
 * Tests for rank addressing, link classification, the affine transfer-time
 * model, and phase-2 group construction.  Expected values that are plain
 * arithmetic are hand-computed and frozen here.
 */
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "ulysim/topology.hpp"

using namespace ulysim;

static TopologyConfig make(int nodes, int gpus, int tiles) {
  TopologyConfig cfg;
  cfg.nodes = nodes;
  cfg.gpus_per_node = gpus;
  cfg.tiles_per_gpu = tiles;
  return cfg;
}

TEST_CASE("rank_to_coord is tile-fastest") {
  TopologyConfig cfg = make(2, 6, 2);
  // 24 ranks: rank 13 = second tile of the first GPU on the second node.
  RankCoord c = rank_to_coord(cfg, 13);
  CHECK(c.node == 1);
  CHECK(c.gpu == 0);
  CHECK(c.tile == 1);
  CHECK(rank_to_coord(cfg, 0) == RankCoord{0, 0, 0});
  CHECK(rank_to_coord(cfg, 11) == RankCoord{0, 5, 1});
  CHECK(rank_to_coord(cfg, 12) == RankCoord{1, 0, 0});
}

TEST_CASE("rank/coord round-trip is a bijection") {
  for (auto [n, g, t] : {std::tuple{1, 2, 2}, {1, 6, 2}, {2, 6, 2}, {3, 4, 1},
                         {2, 3, 3}}) {
    TopologyConfig cfg = make(n, g, t);
    std::set<int> seen;
    for (int r = 0; r < cfg.world_size(); ++r) {
      const RankCoord c = rank_to_coord(cfg, r);
      CHECK(coord_to_rank(cfg, c) == r);
      seen.insert(r);
    }
    CHECK(static_cast<int>(seen.size()) == cfg.world_size());
  }
}

TEST_CASE("classify covers the three link classes") {
  TopologyConfig cfg = make(2, 6, 2);
  CHECK(classify(cfg, 0, 1) == LinkClass::IntraGpu);        // same GPU
  CHECK(classify(cfg, 0, 2) == LinkClass::IntraNodeRing);   // same node
  CHECK(classify(cfg, 0, 3) == LinkClass::IntraNodeRing);   // cross-tile too
  CHECK(classify(cfg, 0, 12) == LinkClass::InterNode);
  CHECK(classify(cfg, 11, 13) == LinkClass::InterNode);
}

TEST_CASE("classify is symmetric and total on distinct pairs") {
  TopologyConfig cfg = make(2, 3, 2);
  for (int a = 0; a < cfg.world_size(); ++a) {
    for (int b = 0; b < cfg.world_size(); ++b) {
      if (a == b) {
        CHECK_THROWS_AS((void)classify(cfg, a, b), std::invalid_argument);
      } else {
        CHECK(classify(cfg, a, b) == classify(cfg, b, a));
      }
    }
  }
  CHECK_THROWS_AS((void)classify(cfg, 0, 99), std::invalid_argument);
}

TEST_CASE("xfer_time matches hand-computed values") {
  TopologyConfig cfg = make(1, 6, 2);
  cfg.latency[0] = cfg.latency[1] = cfg.latency[2] = 0.0;
  // 14 MB across the intra-GPU link at 185 GB/s.
  CHECK(xfer_time(cfg, 14'000'000, LinkClass::IntraGpu) ==
        doctest::Approx(7.5675675675e-5).epsilon(1e-9));
  // 48 MB across the ring at 15 GB/s.
  CHECK(xfer_time(cfg, 48'000'000, LinkClass::IntraNodeRing) ==
        doctest::Approx(3.2e-3).epsilon(1e-12));
  CHECK(xfer_time(cfg, 0, LinkClass::InterNode) == 0.0);
  CHECK_THROWS_AS((void)xfer_time(cfg, -1, LinkClass::IntraGpu),
                  std::invalid_argument);
}

TEST_CASE("xfer_time is affine: additive up to one latency") {
  TopologyConfig cfg = make(2, 6, 2);
  cfg.latency[0] = 1e-5;
  cfg.latency[1] = 2e-6;
  cfg.latency[2] = 3e-6;
  for (LinkClass c : {LinkClass::IntraGpu, LinkClass::IntraNodeRing,
                      LinkClass::InterNode}) {
    const double a = xfer_time(cfg, 1 << 20, c);
    const double b = xfer_time(cfg, 7 << 20, c);
    const double ab = xfer_time(cfg, (1 << 20) + (7 << 20), c);
    const double lat = cfg.latency[static_cast<int>(c)];
    CHECK(ab == doctest::Approx(a + b - lat).epsilon(1e-12));
  }
}

TEST_CASE("NIC knob scales inter-node bandwidth only") {
  TopologyConfig cfg = make(2, 6, 2);
  cfg.latency[2] = 0.0;
  const double one = xfer_time(cfg, 25'000'000'000, LinkClass::InterNode);
  cfg.nics_per_node = 8;
  const double eight = xfer_time(cfg, 25'000'000'000, LinkClass::InterNode);
  CHECK(one == doctest::Approx(1.0));
  CHECK(eight == doctest::Approx(0.125));
  CHECK(effective_bandwidth(cfg, LinkClass::IntraGpu) == 185e9);
}

TEST_CASE("phase2_group on a single node of six dual-tile GPUs") {
  TopologyConfig cfg = make(1, 6, 2);
  CHECK(phase2_group(cfg, 0) == std::vector<int>{0, 2, 4, 6, 8, 10});
  CHECK(phase2_group(cfg, 1) == std::vector<int>{1, 3, 5, 7, 9, 11});
  CHECK(phase2_group(cfg, 4) == std::vector<int>{0, 2, 4, 6, 8, 10});
}

TEST_CASE("phase2 groups partition the rank set") {
  for (auto [n, g, t] : {std::tuple{1, 6, 2}, {2, 6, 2}, {2, 4, 3}, {1, 2, 1}}) {
    TopologyConfig cfg = make(n, g, t);
    std::set<int> covered;
    for (int tile = 0; tile < t; ++tile) {
      const auto group = phase2_group(cfg, tile);
      CHECK(static_cast<int>(group.size()) == n * g);
      for (int r : group) {
        CHECK(covered.insert(r).second);  // no overlap between groups
        CHECK(rank_to_coord(cfg, r).tile == tile);
      }
      // Every member maps to the same group.
      for (int r : group) CHECK(phase2_group(cfg, r) == group);
    }
    CHECK(static_cast<int>(covered.size()) == cfg.world_size());
  }
}

TEST_CASE("slowest_link_class tracks the lowest effective bandwidth present") {
  TopologyConfig one_gpu = make(1, 1, 2);
  CHECK(slowest_link_class(one_gpu) == LinkClass::IntraGpu);
  TopologyConfig one_node = make(1, 6, 2);
  CHECK(slowest_link_class(one_node) == LinkClass::IntraNodeRing);
  // Ring (15 GB/s) is slower than a single 25 GB/s NIC, so it stays slowest
  // even across nodes.
  TopologyConfig two_node = make(2, 6, 2);
  CHECK(slowest_link_class(two_node) == LinkClass::IntraNodeRing);
  // With one GPU per node only the fabric remains.
  TopologyConfig fabric_only = make(2, 1, 2);
  fabric_only.bandwidth[0] = 500e9;
  CHECK(slowest_link_class(fabric_only) == LinkClass::InterNode);
}

TEST_CASE("config validation rejects bad extents and rates") {
  TopologyConfig cfg = make(0, 6, 2);
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = make(1, 6, 2);
  cfg.bandwidth[1] = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = make(1, 6, 2);
  cfg.latency[0] = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  make(1, 6, 2).validate();  // defaults are valid
}
