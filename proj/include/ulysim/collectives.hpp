#pragma once
/*
 * Resharding collectives between the two layouts of attention activations:
 *
 *   sequence-sharded  [batch * tokens/P  x  heads * head_dim]   (all heads)
 *   head-sharded      [batch * tokens    x  heads/P * head_dim] (all tokens)
 *
 * Rows are batch-major (row = b * rows_per_sequence + t); channels are
 * head-major.  Rank r owns token rows [r*N/P, (r+1)*N/P) in the first
 * layout and head block [r*H/P, (r+1)*H/P) in the second.
 *
 * Two routes move between the layouts:
 *
 *   flat     one all-to-all over every rank pair, mapped as serialized
 *            shifted pairwise rounds;
 *   two-phase
 *     phase 1: tiles of one GPU exchange over the intra-GPU fabric so that
 *              each tile ends up with the GPU's whole token block restricted
 *              to the heads its cross-GPU group owns;
 *     phase 2: each per-tile-index group (one tile per GPU) runs an
 *              all-to-all of whole-GPU token blocks, mapped as a concurrent
 *              mesh; groups proceed in parallel.
 *
 * Both routes produce bit-identical head-sharded slabs: they are pure data
 * movement.  Both phases of the two-phase route optionally restrict the
 * rows they ship to an active subset: selective phase 1 scatters fresh rows
 * into an intermediate whose other rows are never read, and selective
 * phase 2 scatters shipped rows into a cached slab on arrival.  V's phase 1
 * always runs at full volume (the selector needs its complete output), so
 * V's phase-2 self slot can carry the full locally-available block; Q and K
 * run phase 1 selectively, so their self slots carry active rows only.
 *
 * The pack/unpack helpers here are pure layout functions shared by the
 * blocking wrappers below and by schedules that post the same exchanges on
 * the background engine.
 */

#include <fmt/format.h>

#include <cstring>
#include <string_view>
#include <vector>

#include "ulysim/kernels.hpp"
#include "ulysim/simnet.hpp"
#include "ulysim/topology.hpp"

namespace ulysim {

/* Logical tensor extents shared by every rank of a run. */
struct ShardDims {
  int batch = 1;
  int tokens = 0;    // per sequence, summed over ranks
  int heads = 0;     // summed over ranks
  int head_dim = 0;

  int channels() const { return heads * head_dim; }

  void validate(const TopologyConfig& topo) const {
    const int P = topo.world_size();
    if (batch < 1 || tokens < 1 || heads < 1 || head_dim < 1)
      throw std::invalid_argument(
          fmt::format("[collectives] non-positive extent in "
                      "batch={} tokens={} heads={} head_dim={}",
                      batch, tokens, heads, head_dim));
    if (tokens % P != 0)
      throw std::invalid_argument(fmt::format(
          "[collectives] tokens={} not divisible by world size {}", tokens,
          P));
    if (heads % P != 0)
      throw std::invalid_argument(fmt::format(
          "[collectives] heads={} not divisible by world size {}", heads, P));
  }

  int tokens_per_rank(const TopologyConfig& t) const {
    return tokens / t.world_size();
  }
  int tokens_per_gpu(const TopologyConfig& t) const {
    return tokens_per_rank(t) * t.tiles_per_gpu;
  }
  int heads_per_rank(const TopologyConfig& t) const {
    return heads / t.world_size();
  }
  /* Channel count of one rank's head block. */
  int block_cols(const TopologyConfig& t) const {
    return heads_per_rank(t) * head_dim;
  }
  /* Values in one flat pair message. */
  std::int64_t pair_values(const TopologyConfig& t) const {
    return static_cast<std::int64_t>(batch) * tokens_per_rank(t) *
           block_cols(t);
  }
};

/* Payload (de)serialization: raw column-major scalar data.  The receiver
 * names the shape it expects; a size mismatch is a protocol error. */
template <class S>
Bytes pack_matrix(const Mat<S>& m) {
  Bytes b(static_cast<std::size_t>(m.size()) * sizeof(S));
  std::memcpy(b.data(), m.data(), b.size());
  return b;
}

template <class S>
Mat<S> unpack_matrix(const Bytes& b, Eigen::Index rows, Eigen::Index cols) {
  if (b.size() != static_cast<std::size_t>(rows) * cols * sizeof(S))
    throw std::invalid_argument(
        fmt::format("[collectives] payload holds {} bytes where a {}x{} "
                    "matrix of {}-byte values was expected",
                    b.size(), rows, cols, sizeof(S)));
  Mat<S> m(rows, cols);
  std::memcpy(m.data(), b.data(), b.size());
  return m;
}

/* One exchange, ready for Rank::all_to_all or post_all_to_all. */
struct PackedOp {
  std::vector<int> group;
  std::vector<std::int64_t> bytes_to;
  std::vector<Bytes> payloads;
};

/* ---------------- flat route ---------------- */

template <class S>
PackedOp pack_flat(const TopologyConfig& topo, const ShardDims& dims, int me,
                   const Mat<S>& shard, int wire_bytes_per_value) {
  const int P = topo.world_size();
  const int bc = dims.block_cols(topo);
  PackedOp op;
  op.group.resize(P);
  for (int j = 0; j < P; ++j) op.group[j] = j;
  op.bytes_to.assign(P, dims.pair_values(topo) * wire_bytes_per_value);
  op.bytes_to[me] = 0;
  op.payloads.resize(P);
  for (int j = 0; j < P; ++j)
    op.payloads[j] = pack_matrix<S>(shard.middleCols(j * bc, bc).eval());
  return op;
}

template <class S>
Mat<S> unpack_flat(const TopologyConfig& topo, const ShardDims& dims, int me,
                   const std::vector<Bytes>& inbox) {
  (void)me;
  const int P = topo.world_size();
  const int nl = dims.tokens_per_rank(topo);
  const int bc = dims.block_cols(topo);
  Mat<S> slab(static_cast<Eigen::Index>(dims.batch) * dims.tokens, bc);
  for (int i = 0; i < P; ++i) {
    const Mat<S> m = unpack_matrix<S>(
        inbox[i], static_cast<Eigen::Index>(dims.batch) * nl, bc);
    for (int b = 0; b < dims.batch; ++b)
      slab.middleRows(static_cast<Eigen::Index>(b) * dims.tokens + i * nl,
                      nl) = m.middleRows(static_cast<Eigen::Index>(b) * nl,
                                         nl);
  }
  return slab;
}

template <class S>
PackedOp pack_flat_inverse(const TopologyConfig& topo, const ShardDims& dims,
                           int me, const Mat<S>& slab,
                           int wire_bytes_per_value) {
  const int P = topo.world_size();
  const int nl = dims.tokens_per_rank(topo);
  const int bc = dims.block_cols(topo);
  PackedOp op;
  op.group.resize(P);
  for (int j = 0; j < P; ++j) op.group[j] = j;
  op.bytes_to.assign(P, dims.pair_values(topo) * wire_bytes_per_value);
  op.bytes_to[me] = 0;
  op.payloads.resize(P);
  for (int i = 0; i < P; ++i) {
    Mat<S> chunk(static_cast<Eigen::Index>(dims.batch) * nl, bc);
    for (int b = 0; b < dims.batch; ++b)
      chunk.middleRows(static_cast<Eigen::Index>(b) * nl, nl) =
          slab.middleRows(static_cast<Eigen::Index>(b) * dims.tokens + i * nl,
                          nl);
    op.payloads[i] = pack_matrix<S>(chunk);
  }
  return op;
}

template <class S>
Mat<S> unpack_flat_inverse(const TopologyConfig& topo, const ShardDims& dims,
                           int me, const std::vector<Bytes>& inbox) {
  (void)me;
  const int P = topo.world_size();
  const int nl = dims.tokens_per_rank(topo);
  const int bc = dims.block_cols(topo);
  Mat<S> shard(static_cast<Eigen::Index>(dims.batch) * nl, dims.channels());
  for (int j = 0; j < P; ++j)
    shard.middleCols(j * bc, bc) = unpack_matrix<S>(
        inbox[j], static_cast<Eigen::Index>(dims.batch) * nl, bc);
  return shard;
}

/* ---------------- two-phase route ---------------- */

/* Phase 1: tile sigma receives, from every tile of its GPU, that tile's
 * token rows restricted to the heads owned by sigma's cross-GPU group.
 * The group's heads are strided across the channel axis (one block per
 * member rank); messages and intermediates keep them in ascending global
 * head order. */
template <class S>
PackedOp pack_phase1(const TopologyConfig& topo, const ShardDims& dims,
                     int me, const Mat<S>& shard, int wire_bytes_per_value) {
  const int tg = topo.tiles_per_gpu;
  const int groups = topo.world_size() / tg;  // ranks per phase-2 group
  const int bc = dims.block_cols(topo);
  PackedOp op;
  op.group = gpu_ranks(topo, me);
  op.bytes_to.assign(tg, dims.pair_values(topo) * groups *
                             wire_bytes_per_value);
  op.payloads.resize(tg);
  for (int s = 0; s < tg; ++s) {
    if (op.group[s] == me) op.bytes_to[s] = 0;
    Mat<S> slice(shard.rows(), static_cast<Eigen::Index>(groups) * bc);
    for (int g = 0; g < groups; ++g)
      slice.middleCols(static_cast<Eigen::Index>(g) * bc, bc) =
          shard.middleCols((g * tg + s) * bc, bc);
    op.payloads[s] = pack_matrix<S>(slice);
  }
  return op;
}

template <class S>
Mat<S> unpack_phase1(const TopologyConfig& topo, const ShardDims& dims,
                     int me, const std::vector<Bytes>& inbox) {
  (void)me;
  const int tg = topo.tiles_per_gpu;
  const int groups = topo.world_size() / tg;
  const int nl = dims.tokens_per_rank(topo);
  const int ng = dims.tokens_per_gpu(topo);
  const int cols = groups * dims.block_cols(topo);
  Mat<S> inter(static_cast<Eigen::Index>(dims.batch) * ng, cols);
  for (int s = 0; s < tg; ++s) {
    const Mat<S> m = unpack_matrix<S>(
        inbox[s], static_cast<Eigen::Index>(dims.batch) * nl, cols);
    for (int b = 0; b < dims.batch; ++b)
      inter.middleRows(static_cast<Eigen::Index>(b) * ng + s * nl, nl) =
          m.middleRows(static_cast<Eigen::Index>(b) * nl, nl);
  }
  return inter;
}

/* Owning tile of a GPU-block row (batch-major index in
 * [0, batch * tokens_per_gpu)). */
inline int tile_of_gpu_row(const TopologyConfig& topo, const ShardDims& dims,
                           int row) {
  const int ng = dims.tokens_per_gpu(topo);
  if (row < 0 || row >= dims.batch * ng)
    throw std::out_of_range("[collectives] row outside the GPU block");
  return (row % ng) / dims.tokens_per_rank(topo);
}

/* Split a sorted GPU-block row list by owning tile, preserving order. */
inline std::vector<std::vector<int>> partition_rows_by_tile(
    const TopologyConfig& topo, const ShardDims& dims,
    const std::vector<int>& rows) {
  std::vector<std::vector<int>> per_tile(
      static_cast<std::size_t>(topo.tiles_per_gpu));
  for (int r : rows)
    per_tile[static_cast<std::size_t>(tile_of_gpu_row(topo, dims, r))]
        .push_back(r);
  return per_tile;
}

/* Per-sender wire sizes of a selective phase-1 exchange: each tile ships
 * only its own active rows, so its message to every peer is its active
 * count times the peer-group channel width. */
inline std::vector<std::int64_t> phase1_selective_wire_sizes(
    const TopologyConfig& topo, const ShardDims& dims,
    const std::vector<int>& gpu_active_rows, int wire_bytes_per_value) {
  const int groups = topo.world_size() / topo.tiles_per_gpu;
  const auto per_tile = partition_rows_by_tile(topo, dims, gpu_active_rows);
  std::vector<std::int64_t> bytes(per_tile.size());
  for (std::size_t s = 0; s < per_tile.size(); ++s)
    bytes[s] = static_cast<std::int64_t>(per_tile[s].size()) * groups *
               dims.block_cols(topo) * wire_bytes_per_value;
  return bytes;
}

/* Selective phase 1 (Q/K path): ship only this tile's active rows, every
 * destination getting the same rows restricted to its group's heads.  The
 * self slot carries the tile's own active rows at zero wire cost. */
template <class S>
PackedOp pack_phase1_selective(const TopologyConfig& topo,
                               const ShardDims& dims, int me,
                               const Mat<S>& shard,
                               const std::vector<int>& gpu_active_rows,
                               int wire_bytes_per_value) {
  const int tg = topo.tiles_per_gpu;
  const int groups = topo.world_size() / tg;
  const int bc = dims.block_cols(topo);
  const int nl = dims.tokens_per_rank(topo);
  const int ng = dims.tokens_per_gpu(topo);
  const int my_tile = rank_to_coord(topo, me).tile;
  const auto sender_bytes =
      phase1_selective_wire_sizes(topo, dims, gpu_active_rows,
                                  wire_bytes_per_value);
  const auto mine = partition_rows_by_tile(topo, dims, gpu_active_rows)
      [static_cast<std::size_t>(my_tile)];

  // This tile's active rows, compacted, over all channels.
  Mat<S> active(static_cast<Eigen::Index>(mine.size()), shard.cols());
  for (std::size_t j = 0; j < mine.size(); ++j) {
    const int b = mine[j] / ng;
    const int trel = mine[j] % ng;
    active.row(static_cast<Eigen::Index>(j)) =
        shard.row(static_cast<Eigen::Index>(b) * nl + (trel - my_tile * nl));
  }

  PackedOp op;
  op.group = gpu_ranks(topo, me);
  op.bytes_to.assign(static_cast<std::size_t>(tg),
                     sender_bytes[static_cast<std::size_t>(my_tile)]);
  op.payloads.resize(static_cast<std::size_t>(tg));
  for (int s = 0; s < tg; ++s) {
    if (op.group[s] == me) op.bytes_to[static_cast<std::size_t>(s)] = 0;
    Mat<S> slice(active.rows(), static_cast<Eigen::Index>(groups) * bc);
    for (int g = 0; g < groups; ++g)
      slice.middleCols(static_cast<Eigen::Index>(g) * bc, bc) =
          active.middleCols((g * tg + s) * bc, bc);
    op.payloads[static_cast<std::size_t>(s)] = pack_matrix<S>(slice);
  }
  return op;
}

/* Scatter a selective phase-1 inbox into an intermediate slab.  Only the
 * GPU's active rows are written; whatever the other rows hold is left
 * alone, and correct use never reads them.  `inter` must be preallocated
 * to the full intermediate shape. */
template <class S>
void unpack_phase1_selective(const TopologyConfig& topo,
                             const ShardDims& dims, int me,
                             const std::vector<Bytes>& inbox,
                             const std::vector<int>& gpu_active_rows,
                             Mat<S>& inter) {
  (void)me;
  const int tg = topo.tiles_per_gpu;
  const int groups = topo.world_size() / tg;
  const int ng = dims.tokens_per_gpu(topo);
  const Eigen::Index cols =
      static_cast<Eigen::Index>(groups) * dims.block_cols(topo);
  if (inter.rows() != static_cast<Eigen::Index>(dims.batch) * ng ||
      inter.cols() != cols)
    throw std::invalid_argument(
        "[collectives] intermediate slab has wrong shape");
  const auto per_tile = partition_rows_by_tile(topo, dims, gpu_active_rows);
  for (int s = 0; s < tg; ++s) {
    const auto& rows = per_tile[static_cast<std::size_t>(s)];
    const Mat<S> m = unpack_matrix<S>(
        inbox[static_cast<std::size_t>(s)],
        static_cast<Eigen::Index>(rows.size()), cols);
    for (std::size_t j = 0; j < rows.size(); ++j)
      inter.row(rows[j]) = m.row(static_cast<Eigen::Index>(j));
  }
}

/* Per-peer wire sizes of a phase-2 exchange shipping `rows` rows. */
inline std::vector<std::int64_t> phase2_wire_sizes(const TopologyConfig& topo,
                                                   const ShardDims& dims,
                                                   int me, std::int64_t rows,
                                                   int wire_bytes_per_value) {
  const auto group = phase2_group(topo, me);
  std::vector<std::int64_t> sizes(
      group.size(),
      rows * dims.block_cols(topo) * wire_bytes_per_value);
  sizes[gpu_linear_index(topo, me)] = 0;
  return sizes;
}

/* Phase 2: group member gamma ships its GPU's token block (or the active
 * subset of its rows) to each member, restricted to that member's head
 * block.  With self_full, the self slot carries the full block — correct
 * whenever the whole intermediate is fresh (V's path), since a rank's own
 * GPU rows are locally available for free.  Without it (Q/K after a
 * selective phase 1, where only active intermediate rows are meaningful)
 * the self slot carries active rows like every other slot. */
template <class S>
PackedOp pack_phase2(const TopologyConfig& topo, const ShardDims& dims,
                     int me, const Mat<S>& inter, int wire_bytes_per_value,
                     const std::vector<int>* active_rows = nullptr,
                     bool self_full = true) {
  const int bc = dims.block_cols(topo);
  const int self = gpu_linear_index(topo, me);
  PackedOp op;
  op.group = phase2_group(topo, me);
  const int g = static_cast<int>(op.group.size());
  Mat<S> rows_src;
  if (active_rows != nullptr) {
    rows_src = gather_rows(inter, *active_rows);
  } else {
    rows_src = inter;
  }
  op.bytes_to = phase2_wire_sizes(topo, dims, me, rows_src.rows(),
                                  wire_bytes_per_value);
  op.payloads.resize(g);
  for (int a = 0; a < g; ++a) {
    if (a == self && self_full)
      op.payloads[a] = pack_matrix<S>(
          inter.middleCols(static_cast<Eigen::Index>(a) * bc, bc).eval());
    else
      op.payloads[a] = pack_matrix<S>(
          rows_src.middleCols(static_cast<Eigen::Index>(a) * bc, bc).eval());
  }
  return op;
}

/* Full-row assembly of the head-sharded slab from a phase-2 inbox. */
template <class S>
Mat<S> unpack_phase2(const TopologyConfig& topo, const ShardDims& dims,
                     int me, const std::vector<Bytes>& inbox) {
  (void)me;
  const int g = static_cast<int>(inbox.size());
  const int ng = dims.tokens_per_gpu(topo);
  const int bc = dims.block_cols(topo);
  Mat<S> slab(static_cast<Eigen::Index>(dims.batch) * dims.tokens, bc);
  for (int a = 0; a < g; ++a) {
    const Mat<S> m = unpack_matrix<S>(
        inbox[a], static_cast<Eigen::Index>(dims.batch) * ng, bc);
    for (int b = 0; b < dims.batch; ++b)
      slab.middleRows(static_cast<Eigen::Index>(b) * dims.tokens + a * ng,
                      ng) = m.middleRows(static_cast<Eigen::Index>(b) * ng,
                                         ng);
  }
  return slab;
}

/* Selective assembly: scatter each member's active rows into a cached
 * slab.  actives[a] holds member a's shipped row indices within its GPU
 * block, batch-major in [0, batch * tokens_per_gpu).  With self_full the
 * self entry of actives is ignored — that slot carries the full block. */
template <class S>
void scatter_phase2(const TopologyConfig& topo, const ShardDims& dims, int me,
                    const std::vector<Bytes>& inbox,
                    const std::vector<std::vector<int>>& actives,
                    Mat<S>& cache, bool self_full = true) {
  const int g = static_cast<int>(inbox.size());
  const int ng = dims.tokens_per_gpu(topo);
  const int bc = dims.block_cols(topo);
  const int self = gpu_linear_index(topo, me);
  if (cache.rows() != static_cast<Eigen::Index>(dims.batch) * dims.tokens ||
      cache.cols() != bc)
    throw std::invalid_argument("[collectives] cache slab has wrong shape");
  for (int a = 0; a < g; ++a) {
    if (a == self && self_full) {
      const Mat<S> m = unpack_matrix<S>(
          inbox[a], static_cast<Eigen::Index>(dims.batch) * ng, bc);
      for (int b = 0; b < dims.batch; ++b)
        cache.middleRows(static_cast<Eigen::Index>(b) * dims.tokens + a * ng,
                         ng) = m.middleRows(static_cast<Eigen::Index>(b) * ng,
                                            ng);
      continue;
    }
    const auto& act = actives[a];
    const Mat<S> m = unpack_matrix<S>(
        inbox[a], static_cast<Eigen::Index>(act.size()), bc);
    for (std::size_t j = 0; j < act.size(); ++j) {
      const int b = act[j] / ng;
      const int trel = act[j] % ng;
      cache.row(static_cast<Eigen::Index>(b) * dims.tokens + a * ng + trel) =
          m.row(static_cast<Eigen::Index>(j));
    }
  }
}

/* Inverse phase 2: each member sends every other member that member's own
 * GPU token rows of the head-sharded slab.  The result shares the layout
 * of the forward phase-1 intermediate. */
template <class S>
PackedOp pack_phase2_inverse(const TopologyConfig& topo,
                             const ShardDims& dims, int me,
                             const Mat<S>& slab, int wire_bytes_per_value) {
  const int ng = dims.tokens_per_gpu(topo);
  const int bc = dims.block_cols(topo);
  PackedOp op;
  op.group = phase2_group(topo, me);
  const int g = static_cast<int>(op.group.size());
  op.bytes_to = phase2_wire_sizes(
      topo, dims, me, static_cast<std::int64_t>(dims.batch) * ng,
      wire_bytes_per_value);
  op.payloads.resize(g);
  for (int a = 0; a < g; ++a) {
    Mat<S> chunk(static_cast<Eigen::Index>(dims.batch) * ng, bc);
    for (int b = 0; b < dims.batch; ++b)
      chunk.middleRows(static_cast<Eigen::Index>(b) * ng, ng) =
          slab.middleRows(static_cast<Eigen::Index>(b) * dims.tokens + a * ng,
                          ng);
    op.payloads[a] = pack_matrix<S>(chunk);
  }
  return op;
}

template <class S>
Mat<S> unpack_phase2_inverse(const TopologyConfig& topo,
                             const ShardDims& dims, int me,
                             const std::vector<Bytes>& inbox) {
  (void)me;
  const int g = static_cast<int>(inbox.size());
  const int ng = dims.tokens_per_gpu(topo);
  const int bc = dims.block_cols(topo);
  Mat<S> inter(static_cast<Eigen::Index>(dims.batch) * ng,
               static_cast<Eigen::Index>(g) * bc);
  for (int a = 0; a < g; ++a)
    inter.middleCols(static_cast<Eigen::Index>(a) * bc, bc) =
        unpack_matrix<S>(inbox[a],
                         static_cast<Eigen::Index>(dims.batch) * ng, bc);
  return inter;
}

/* Inverse phase 1: tiles of one GPU redistribute the intermediate so each
 * tile ends with its own token rows across all heads. */
template <class S>
PackedOp pack_phase1_inverse(const TopologyConfig& topo,
                             const ShardDims& dims, int me,
                             const Mat<S>& inter, int wire_bytes_per_value) {
  const int tg = topo.tiles_per_gpu;
  const int groups = topo.world_size() / tg;
  const int nl = dims.tokens_per_rank(topo);
  const int ng = dims.tokens_per_gpu(topo);
  PackedOp op;
  op.group = gpu_ranks(topo, me);
  op.bytes_to.assign(tg, dims.pair_values(topo) * groups *
                             wire_bytes_per_value);
  op.payloads.resize(tg);
  for (int s = 0; s < tg; ++s) {
    if (op.group[s] == me) op.bytes_to[s] = 0;
    Mat<S> chunk(static_cast<Eigen::Index>(dims.batch) * nl, inter.cols());
    for (int b = 0; b < dims.batch; ++b)
      chunk.middleRows(static_cast<Eigen::Index>(b) * nl, nl) =
          inter.middleRows(static_cast<Eigen::Index>(b) * ng + s * nl, nl);
    op.payloads[s] = pack_matrix<S>(chunk);
  }
  return op;
}

template <class S>
Mat<S> unpack_phase1_inverse(const TopologyConfig& topo,
                             const ShardDims& dims, int me,
                             const std::vector<Bytes>& inbox) {
  (void)me;
  const int tg = topo.tiles_per_gpu;
  const int groups = topo.world_size() / tg;
  const int nl = dims.tokens_per_rank(topo);
  const int bc = dims.block_cols(topo);
  Mat<S> shard(static_cast<Eigen::Index>(dims.batch) * nl, dims.channels());
  for (int s = 0; s < tg; ++s) {
    const Mat<S> m = unpack_matrix<S>(
        inbox[s], static_cast<Eigen::Index>(dims.batch) * nl,
        static_cast<Eigen::Index>(groups) * bc);
    for (int g = 0; g < groups; ++g)
      shard.middleCols((g * tg + s) * bc, bc) =
          m.middleCols(static_cast<Eigen::Index>(g) * bc, bc);
  }
  return shard;
}

/* ---------------- blocking wrappers ---------------- */

template <class S>
Mat<S> flat_alltoall(Rank& r, const ShardDims& dims, const Mat<S>& shard,
                     int wire_bytes_per_value,
                     std::string_view label = "flat_a2a") {
  auto op = pack_flat<S>(r.topology(), dims, r.id(), shard,
                         wire_bytes_per_value);
  auto inbox = r.all_to_all(op.group, op.bytes_to, std::move(op.payloads),
                            CommPolicy::PairwiseRounds, label, label);
  return unpack_flat<S>(r.topology(), dims, r.id(), inbox);
}

template <class S>
Mat<S> flat_alltoall_inverse(Rank& r, const ShardDims& dims,
                             const Mat<S>& slab, int wire_bytes_per_value,
                             std::string_view label = "a2a_inv") {
  auto op = pack_flat_inverse<S>(r.topology(), dims, r.id(), slab,
                                 wire_bytes_per_value);
  auto inbox = r.all_to_all(op.group, op.bytes_to, std::move(op.payloads),
                            CommPolicy::PairwiseRounds, label, label);
  return unpack_flat_inverse<S>(r.topology(), dims, r.id(), inbox);
}

template <class S>
Mat<S> tapa_phase1(Rank& r, const ShardDims& dims, const Mat<S>& shard,
                   int wire_bytes_per_value, std::string_view label = "p1",
                   std::string_view phase = "tapa_p1") {
  auto op = pack_phase1<S>(r.topology(), dims, r.id(), shard,
                           wire_bytes_per_value);
  auto inbox = r.all_to_all(op.group, op.bytes_to, std::move(op.payloads),
                            CommPolicy::PairwiseRounds, label, phase);
  return unpack_phase1<S>(r.topology(), dims, r.id(), inbox);
}

template <class S>
Mat<S> tapa_phase2(Rank& r, const ShardDims& dims, const Mat<S>& inter,
                   int wire_bytes_per_value, std::string_view label = "p2",
                   std::string_view phase = "tapa_p2") {
  auto op = pack_phase2<S>(r.topology(), dims, r.id(), inter,
                           wire_bytes_per_value);
  auto inbox = r.all_to_all(op.group, op.bytes_to, std::move(op.payloads),
                            CommPolicy::ConcurrentMesh, label, phase);
  return unpack_phase2<S>(r.topology(), dims, r.id(), inbox);
}

template <class S>
Mat<S> tapa_alltoall(Rank& r, const ShardDims& dims, const Mat<S>& shard,
                     int wire_bytes_per_value) {
  return tapa_phase2<S>(
      r, dims,
      tapa_phase1<S>(r, dims, shard, wire_bytes_per_value),
      wire_bytes_per_value);
}

template <class S>
Mat<S> tapa_alltoall_inverse(Rank& r, const ShardDims& dims,
                             const Mat<S>& slab, int wire_bytes_per_value) {
  auto op2 = pack_phase2_inverse<S>(r.topology(), dims, r.id(), slab,
                                    wire_bytes_per_value);
  auto inbox2 = r.all_to_all(op2.group, op2.bytes_to,
                             std::move(op2.payloads),
                             CommPolicy::ConcurrentMesh, "a2a_inv_p2",
                             "a2a_inv");
  const Mat<S> inter =
      unpack_phase2_inverse<S>(r.topology(), dims, r.id(), inbox2);
  auto op1 = pack_phase1_inverse<S>(r.topology(), dims, r.id(), inter,
                                    wire_bytes_per_value);
  auto inbox1 = r.all_to_all(op1.group, op1.bytes_to,
                             std::move(op1.payloads),
                             CommPolicy::PairwiseRounds, "a2a_inv_p1",
                             "a2a_inv");
  return unpack_phase1_inverse<S>(r.topology(), dims, r.id(), inbox1);
}

}  // namespace ulysim
