#pragma once
/*
 * Deterministic simulator for per-rank communication programs.
 *
 * Every rank runs the same user program on its own host thread and keeps a
 * local clock in simulated seconds.  Ranks interact only through a central
 * mailbox of FIFO channels keyed by (src, dst, stream); all timing metadata
 * (arrival times, per-peer byte counts) rides the message envelopes, so every
 * participant of an operation computes the identical completion time from the
 * identical inputs with the identical arithmetic.  Host scheduling therefore
 * never changes a simulated result, only the wall time it takes to produce
 * it.
 *
 * Each rank owns two lanes:
 *   - the main lane, advanced by compute(), blocking transfers, and wait();
 *   - a background lane, a single engine that executes posted collectives in
 *     FIFO order.  Posting is free on the main lane; the engine starts an op
 *     at max(engine free time, post time), pays a configurable offload
 *     overhead, and the op completes once every participant has arrived.
 *     wait() blocks the main lane until the op (and all ops posted before
 *     it) has completed, recording any gap as an idle segment.
 *
 * Progress contract: the engine executes at its own rank's wait() calls and
 * at the end-of-program drain, not concurrently with the main lane.  A
 * program must therefore never require a peer's engine to progress while
 * that peer's main lane is blocked on this rank; such schedules abort with
 * the deadlock diagnostic.  Symmetric schedules — every rank posting,
 * communicating, and waiting in the same order — always satisfy this.
 *
 * A collective among a group completes at
 *     max over participants of arrival time  +  collective_duration(...)
 * where the duration depends on the mapping policy below.  Completed
 * operations leave two records behind: timeline segments (what each lane was
 * doing when) and transfer records (who sent how many bytes over which link
 * class), both reproducible bit-for-bit across runs.
 *
 * If every live rank is blocked and no pending message can wake any of them,
 * the run aborts with a diagnostic naming each blocked rank and the message
 * it was waiting for.
 */

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ulysim/topology.hpp"

namespace ulysim {

using Bytes = std::vector<std::byte>;

/* What a lane spent an interval of simulated time on. */
enum class SegmentKind { Compute, Comm, Idle };
const char* to_string(SegmentKind kind);

enum class Lane { Main = 0, Background = 1 };

struct Segment {
  int rank = 0;
  double t0 = 0.0;
  double t1 = 0.0;
  SegmentKind kind = SegmentKind::Compute;
  Lane lane = Lane::Main;
  std::string label;
};

/* One directed transfer inside a completed operation, for volume accounting.
 * Each rank records only its outgoing transfers, so merging per-rank lists
 * counts every byte exactly once. */
struct TransferRecord {
  int src = 0;
  int dst = 0;
  std::int64_t bytes = 0;
  LinkClass link = LinkClass::IntraGpu;
  double t0 = 0.0;
  double t1 = 0.0;
  std::string label;
};

/* How a group collective maps onto links.
 *
 * PairwiseRounds:    shifted pairwise rounds (round k pairs i with i+k mod G),
 *                    each round as slow as its slowest pair, rounds serialized.
 * ConcurrentMesh:    every ordered pair transfers at once on a dedicated link;
 *                    the collective is as slow as the slowest pair.
 * SlowestLinkSerial: all bytes of the operation cross the slowest link class
 *                    present in the topology back to back; a conservative
 *                    model for broadcast-style metadata exchange.
 *
 * Zero-byte pairs cost nothing.  Half-duplex links double any interval in
 * which a link must carry both directions at once: the whole duration under
 * ConcurrentMesh, and only the self-conjugate round (k == G-k) under
 * PairwiseRounds, since the other rounds use each link in one direction.
 */
enum class CommPolicy { PairwiseRounds, ConcurrentMesh, SlowestLinkSerial };
const char* to_string(CommPolicy policy);

/* Duration of a group collective in which group[a] sends bytes[a][b] to
 * group[b].  Shared by the simulator, the analytical layer model, and the
 * microbenchmark so that all three quote the same cost for the same op. */
double collective_duration(const TopologyConfig& topo,
                           const std::vector<int>& group,
                           const std::vector<std::vector<std::int64_t>>& bytes,
                           CommPolicy policy);

/* Raised on protocol violations (mismatched operations, deadlock). */
struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SimOptions {
  /* Main-lane seconds consumed on the background engine before a posted
   * collective may begin transferring. */
  double offload_overhead = 0.0;
};

/* Handle to a posted background operation. */
struct BgHandle {
  int rank = -1;
  int index = -1;
};

/* Builds the outgoing payloads of a posted collective at the moment the
 * background engine executes it (one entry per group member, self slot
 * passed through locally).  Deferring the build lets a program post an op
 * whose inputs are produced by an earlier op in the same queue. */
using PayloadBuilder = std::function<std::vector<Bytes>()>;

class Simulator;

/* Per-rank execution context handed to the user program. */
class Rank {
 public:
  int id() const { return id_; }
  int world() const;
  double now() const;
  const TopologyConfig& topology() const;

  /* Advance the main lane by `seconds` of modeled computation. */
  void compute(double seconds, std::string_view label);

  /* Blocking one-way transfer of `wire_bytes` simulated bytes; both sides
   * advance to max(sender arrival, receiver arrival) + transfer time.  The
   * payload is host data and need not match the simulated size. */
  void send(int dst, std::int64_t wire_bytes, Bytes payload,
            std::string_view label);
  Bytes recv(int src, std::string_view label);

  /* Blocking collective among `group` (ascending, must contain this rank).
   * wire_bytes_to[j] is what this rank sends to group[j] (self slot 0);
   * payloads[j] is the data for group[j]; the returned vector holds what
   * each member sent here, with the self slot passed through unchanged.
   * `label` names the op in transfer records, `phase` in the timeline. */
  std::vector<Bytes> all_to_all(const std::vector<int>& group,
                                const std::vector<std::int64_t>& wire_bytes_to,
                                std::vector<Bytes> payloads, CommPolicy policy,
                                std::string_view label, std::string_view phase);

  /* Queue the same collective on the background engine.  Every group member
   * must post it in the same FIFO position relative to their shared ops. */
  BgHandle post_all_to_all(const std::vector<int>& group,
                           std::vector<std::int64_t> wire_bytes_to,
                           PayloadBuilder build, CommPolicy policy,
                           std::string_view label, std::string_view phase);

  /* Block the main lane until the posted op completes and return its
   * incoming payloads.  Resolves earlier queue entries first; waiting on an
   * op that already finished costs nothing. */
  std::vector<Bytes> wait(BgHandle handle);

  /* Incoming payloads of an already-executed posted op, readable from the
   * payload builder of a later op in the same queue (engine-internal
   * chaining: the main lane neither advances nor consumes the op).  Valid
   * until the op is waited on; builders should copy what they need. */
  const std::vector<Bytes>& bg_result(BgHandle handle) const;

 private:
  friend class Simulator;
  Rank(Simulator* sim, int id) : sim_(sim), id_(id) {}
  Simulator* sim_;
  int id_;
};

class Simulator {
 public:
  explicit Simulator(TopologyConfig topo, SimOptions opts = {});
  ~Simulator();
  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  /* Run `program` once on every rank, each on its own thread, and join.
   * Throws SimError if any rank fails or the run deadlocks. */
  void run(const std::function<void(Rank&)>& program);

  /* Results; valid after run(). */
  double clock(int rank) const;  // final main-lane time
  double makespan() const;       // max over ranks
  const std::vector<Segment>& timeline(int rank) const;
  const std::vector<TransferRecord>& transfers(int rank) const;
  std::vector<Segment> merged_timeline() const;          // rank-major
  std::vector<TransferRecord> merged_transfers() const;  // rank-major

  const TopologyConfig& topology() const;

 private:
  friend class Rank;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ulysim
