#include "ulysim/simnet.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <thread>
#include <tuple>
#include <utility>

namespace ulysim {

const char* to_string(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::Compute: return "compute";
    case SegmentKind::Comm: return "comm";
    case SegmentKind::Idle: return "idle";
  }
  return "?";
}

const char* to_string(CommPolicy policy) {
  switch (policy) {
    case CommPolicy::PairwiseRounds: return "pairwise_rounds";
    case CommPolicy::ConcurrentMesh: return "concurrent_mesh";
    case CommPolicy::SlowestLinkSerial: return "slowest_link_serial";
  }
  return "?";
}

double collective_duration(const TopologyConfig& topo,
                           const std::vector<int>& group,
                           const std::vector<std::vector<std::int64_t>>& bytes,
                           CommPolicy policy) {
  const int g = static_cast<int>(group.size());
  if (static_cast<int>(bytes.size()) != g)
    throw std::invalid_argument(
        fmt::format("[simnet] byte matrix has {} rows for a group of {}",
                    bytes.size(), g));
  for (const auto& row : bytes)
    if (static_cast<int>(row.size()) != g)
      throw std::invalid_argument("[simnet] byte matrix is not square");
  if (g <= 1) return 0.0;

  auto pair_time = [&](int a, int b) -> double {
    if (bytes[a][b] <= 0) return 0.0;
    return xfer_time(topo, bytes[a][b], classify(topo, group[a], group[b]));
  };

  switch (policy) {
    case CommPolicy::ConcurrentMesh: {
      double worst = 0.0;
      for (int a = 0; a < g; ++a)
        for (int b = 0; b < g; ++b)
          if (a != b) worst = std::max(worst, pair_time(a, b));
      return topo.full_duplex ? worst : 2.0 * worst;
    }
    case CommPolicy::PairwiseRounds: {
      double total = 0.0;
      for (int k = 1; k < g; ++k) {
        double round = 0.0;
        for (int i = 0; i < g; ++i)
          round = std::max(round, pair_time(i, (i + k) % g));
        if (!topo.full_duplex && 2 * k == g) round *= 2.0;
        total += round;
      }
      return total;
    }
    case CommPolicy::SlowestLinkSerial: {
      std::int64_t total = 0;
      for (const auto& row : bytes)
        for (std::int64_t v : row) total += std::max<std::int64_t>(v, 0);
      if (total == 0) return 0.0;
      return xfer_time(topo, total, slowest_link_class(topo));
    }
  }
  throw std::invalid_argument("[simnet] unknown collective policy");
}

namespace {

enum class EnvKind { Data, Header, Ack };

const char* to_string(EnvKind k) {
  switch (k) {
    case EnvKind::Data: return "data";
    case EnvKind::Header: return "header";
    case EnvKind::Ack: return "ack";
  }
  return "?";
}

struct Envelope {
  EnvKind kind = EnvKind::Data;
  std::uint64_t seq = 0;
  std::string label;
  double e = 0.0;  // sender's arrival time at the op
  std::vector<std::int64_t> bytes_row;
  Bytes payload;
};

struct Channel {
  std::deque<Envelope> q;
  std::uint64_t next_send = 0;
  std::uint64_t next_recv = 0;
};

struct BgOp {
  std::vector<int> group;
  std::vector<std::int64_t> bytes_to;
  PayloadBuilder build;
  CommPolicy policy;
  std::string label;
  std::string phase;
  double t_post = 0.0;
  bool resolved = false;
  bool consumed = false;
  double completion = 0.0;
  std::vector<Bytes> inbox;
};

struct RankState {
  double clock = 0.0;    // main lane
  double bg_free = 0.0;  // background engine free from this time on
  std::vector<Segment> timeline;
  std::vector<TransferRecord> transfers;
  std::deque<BgOp> bg_queue;
  int bg_resolved = 0;  // queue entries [0, bg_resolved) are done
};

}  // namespace

struct Simulator::Impl {
  TopologyConfig topo;
  SimOptions opts;
  std::vector<RankState> ranks;
  bool ran = false;

  std::mutex mu;
  std::condition_variable cv;
  std::map<std::tuple<int, int, Lane>, Channel> channels;
  int alive = 0;
  int blocked = 0;
  std::vector<std::string> block_diag;           // per rank, while blocked
  std::vector<const std::function<bool()>*> block_pred;
  std::string error;

  explicit Impl(TopologyConfig t, SimOptions o)
      : topo(std::move(t)), opts(o) {
    topo.validate();
    ranks.resize(topo.world_size());
    block_diag.resize(topo.world_size());
    block_pred.assign(topo.world_size(), nullptr);
  }

  void fail(std::string msg) {
    // First failure wins; later ones are consequences of the wakeup.
    if (error.empty()) error = std::move(msg);
    cv.notify_all();
  }

  /* If every live rank is blocked and none of their predicates hold, no
   * message can ever arrive: report who waits for what. */
  void maybe_flag_deadlock() {
    if (alive == 0 || blocked < alive || !error.empty()) return;
    for (const auto* pred : block_pred)
      if (pred != nullptr && (*pred)()) return;
    std::string msg = "[simnet] deadlock:";
    for (int r = 0; r < static_cast<int>(block_diag.size()); ++r)
      if (block_pred[r] != nullptr)
        msg += fmt::format(" rank {} blocked on {};", r, block_diag[r]);
    fail(std::move(msg));
  }

  /* Block rank r until pred() holds, participating in deadlock detection. */
  void blocking_wait(std::unique_lock<std::mutex>& lock, int r,
                     const std::function<bool()>& pred, std::string diag) {
    if (pred()) return;
    block_diag[r] = std::move(diag);
    block_pred[r] = &pred;
    ++blocked;
    maybe_flag_deadlock();
    cv.wait(lock, [&] { return pred() || !error.empty(); });
    --blocked;
    block_pred[r] = nullptr;
    block_diag[r].clear();
    if (!error.empty()) throw SimError(error);
  }

  void push(int src, int dst, Lane stream, Envelope env) {
    std::unique_lock<std::mutex> lock(mu);
    Channel& ch = channels[{src, dst, stream}];
    env.seq = ch.next_send++;
    ch.q.push_back(std::move(env));
    cv.notify_all();
  }

  Envelope pop(int me, int src, Lane stream, EnvKind want_kind,
               std::string_view want_label) {
    std::unique_lock<std::mutex> lock(mu);
    Channel& ch = channels[{src, me, stream}];
    const std::function<bool()> ready = [&ch] { return !ch.q.empty(); };
    blocking_wait(lock, me, ready,
                  fmt::format("{} \"{}\" from rank {} ({} stream)",
                              to_string(want_kind), want_label, src,
                              stream == Lane::Main ? "main" : "bg"));
    Envelope env = std::move(ch.q.front());
    ch.q.pop_front();
    if (env.seq != ch.next_recv++)
      throw SimError(fmt::format(
          "[simnet] rank {}: channel {}->{} delivered sequence {} where {} "
          "was expected",
          me, src, me, env.seq, ch.next_recv - 1));
    if (env.kind != want_kind || env.label != want_label)
      throw SimError(fmt::format(
          "[simnet] rank {}: expected {} \"{}\" from rank {} but found {} "
          "\"{}\" — mismatched operation order",
          me, to_string(want_kind), want_label, src, to_string(env.kind),
          env.label));
    return env;
  }

  void add_segment(int r, double t0, double t1, SegmentKind kind, Lane lane,
                   std::string label) {
    if (t1 <= t0) return;
    ranks[r].timeline.push_back(Segment{r, t0, t1, kind, lane, std::move(label)});
  }

  /* Header+payload exchange and the shared completion arithmetic for a
   * collective; used by both the blocking path and the background engine.
   * Returns {start, completion} and fills `inbox`. */
  std::pair<double, double> run_collective(
      int me, Lane stream, const std::vector<int>& group,
      const std::vector<std::int64_t>& bytes_to, std::vector<Bytes> payloads,
      CommPolicy policy, const std::string& label, double e_local,
      std::vector<Bytes>& inbox) {
    const int g = static_cast<int>(group.size());
    const auto self_it = std::find(group.begin(), group.end(), me);
    if (self_it == group.end())
      throw SimError(fmt::format(
          "[simnet] rank {} ran collective \"{}\" without being in its group",
          me, label));
    if (!std::is_sorted(group.begin(), group.end()) ||
        std::adjacent_find(group.begin(), group.end()) != group.end())
      throw SimError(fmt::format(
          "[simnet] collective \"{}\": group must be ascending and unique",
          label));
    const int self = static_cast<int>(self_it - group.begin());
    if (static_cast<int>(bytes_to.size()) != g ||
        static_cast<int>(payloads.size()) != g)
      throw SimError(fmt::format(
          "[simnet] collective \"{}\": rank {} passed {} sizes / {} payloads "
          "for a group of {}",
          label, me, bytes_to.size(), payloads.size(), g));
    if (bytes_to[self] != 0)
      throw SimError(fmt::format(
          "[simnet] collective \"{}\": rank {} assigned {} wire bytes to "
          "itself",
          label, me, bytes_to[self]));

    for (int j = 0; j < g; ++j) {
      if (j == self) continue;
      Envelope env;
      env.kind = EnvKind::Header;
      env.label = label;
      env.e = e_local;
      env.bytes_row = bytes_to;
      env.payload = std::move(payloads[j]);
      push(me, group[j], stream, std::move(env));
    }

    std::vector<std::vector<std::int64_t>> matrix(g);
    std::vector<double> arrivals(g, 0.0);
    inbox.assign(g, Bytes{});
    matrix[self] = bytes_to;
    arrivals[self] = e_local;
    inbox[self] = std::move(payloads[self]);
    for (int j = 0; j < g; ++j) {
      if (j == self) continue;
      Envelope env = pop(me, group[j], stream, EnvKind::Header, label);
      matrix[j] = std::move(env.bytes_row);
      arrivals[j] = env.e;
      inbox[j] = std::move(env.payload);
    }

    double start = 0.0;
    for (double a : arrivals) start = std::max(start, a);
    const double completion =
        start + collective_duration(topo, group, matrix, policy);

    for (int j = 0; j < g; ++j) {
      if (j == self || bytes_to[j] <= 0) continue;
      ranks[me].transfers.push_back(
          TransferRecord{me, group[j], bytes_to[j],
                         classify(topo, me, group[j]), start, completion,
                         label});
    }
    return {start, completion};
  }

  /* Execute queue entry `k` of rank `r` on its background engine. */
  void resolve_bg(int r, int k) {
    RankState& st = ranks[r];
    BgOp& op = st.bg_queue[k];
    const double pickup = std::max(st.bg_free, op.t_post);
    const double e_local = pickup + opts.offload_overhead;
    std::vector<Bytes> out = op.build ? op.build() : std::vector<Bytes>{};
    if (out.empty()) out.assign(op.group.size(), Bytes{});
    auto [start, completion] =
        run_collective(r, Lane::Background, op.group, op.bytes_to,
                       std::move(out), op.policy, op.label, e_local, op.inbox);
    add_segment(r, pickup, e_local, SegmentKind::Compute, Lane::Background,
                op.label);
    add_segment(r, e_local, start, SegmentKind::Idle, Lane::Background,
                op.phase);
    add_segment(r, start, completion, SegmentKind::Comm, Lane::Background,
                op.phase);
    st.bg_free = completion;
    op.completion = completion;
    op.resolved = true;
    st.bg_resolved = k + 1;
  }

  void finish_thread(int r) {
    // Drain un-waited background ops so peers that do wait are not starved,
    // then retire from the deadlock census.
    RankState& st = ranks[r];
    while (st.bg_resolved < static_cast<int>(st.bg_queue.size()))
      resolve_bg(r, st.bg_resolved);
    std::unique_lock<std::mutex> lock(mu);
    --alive;
    maybe_flag_deadlock();
    cv.notify_all();
  }
};

Simulator::Simulator(TopologyConfig topo, SimOptions opts)
    : impl_(std::make_unique<Impl>(std::move(topo), opts)) {}

Simulator::~Simulator() = default;

void Simulator::run(const std::function<void(Rank&)>& program) {
  Impl& im = *impl_;
  if (im.ran) throw std::logic_error("[simnet] a Simulator runs only once");
  im.ran = true;
  const int world = im.topo.world_size();
  im.alive = world;
  std::vector<std::thread> threads;
  threads.reserve(world);
  for (int r = 0; r < world; ++r) {
    threads.emplace_back([this, r, &program, &im] {
      Rank ctx(this, r);
      try {
        program(ctx);
        im.finish_thread(r);
      } catch (const std::exception& ex) {
        std::unique_lock<std::mutex> lock(im.mu);
        --im.alive;
        im.fail(ex.what());
      }
    });
  }
  for (auto& t : threads) t.join();
  if (!im.error.empty()) throw SimError(im.error);
}

double Simulator::clock(int rank) const { return impl_->ranks.at(rank).clock; }

double Simulator::makespan() const {
  double m = 0.0;
  for (const auto& st : impl_->ranks) m = std::max(m, st.clock);
  return m;
}

const std::vector<Segment>& Simulator::timeline(int rank) const {
  return impl_->ranks.at(rank).timeline;
}

const std::vector<TransferRecord>& Simulator::transfers(int rank) const {
  return impl_->ranks.at(rank).transfers;
}

std::vector<Segment> Simulator::merged_timeline() const {
  std::vector<Segment> all;
  for (const auto& st : impl_->ranks)
    all.insert(all.end(), st.timeline.begin(), st.timeline.end());
  return all;
}

std::vector<TransferRecord> Simulator::merged_transfers() const {
  std::vector<TransferRecord> all;
  for (const auto& st : impl_->ranks)
    all.insert(all.end(), st.transfers.begin(), st.transfers.end());
  return all;
}

const TopologyConfig& Simulator::topology() const { return impl_->topo; }

int Rank::world() const { return sim_->impl_->topo.world_size(); }

double Rank::now() const { return sim_->impl_->ranks[id_].clock; }

const TopologyConfig& Rank::topology() const { return sim_->impl_->topo; }

void Rank::compute(double seconds, std::string_view label) {
  if (seconds < 0.0)
    throw SimError(fmt::format("[simnet] rank {}: negative compute time {}",
                               id_, seconds));
  if (seconds == 0.0) return;
  RankState& st = sim_->impl_->ranks[id_];
  sim_->impl_->add_segment(id_, st.clock, st.clock + seconds,
                           SegmentKind::Compute, Lane::Main,
                           std::string(label));
  st.clock += seconds;
}

void Rank::send(int dst, std::int64_t wire_bytes, Bytes payload,
                std::string_view label) {
  auto& im = *sim_->impl_;
  if (wire_bytes < 0)
    throw SimError(fmt::format("[simnet] rank {}: negative send size", id_));
  RankState& st = im.ranks[id_];
  const LinkClass link = classify(im.topo, id_, dst);
  Envelope env;
  env.kind = EnvKind::Data;
  env.label = std::string(label);
  env.e = st.clock;
  env.bytes_row = {wire_bytes};
  env.payload = std::move(payload);
  im.push(id_, dst, Lane::Main, std::move(env));
  // The receiver acks with its own arrival time; both sides then agree on
  // start and completion.
  Envelope ack = im.pop(id_, dst, Lane::Main, EnvKind::Ack, std::string(label));
  const double start = std::max(st.clock, ack.e);
  const double completion =
      start + (wire_bytes > 0 ? xfer_time(im.topo, wire_bytes, link) : 0.0);
  im.add_segment(id_, st.clock, start, SegmentKind::Idle, Lane::Main,
                 std::string(label));
  im.add_segment(id_, start, completion, SegmentKind::Comm, Lane::Main,
                 std::string(label));
  if (wire_bytes > 0)
    st.transfers.push_back(TransferRecord{id_, dst, wire_bytes, link, start,
                                          completion, std::string(label)});
  st.clock = completion;
}

Bytes Rank::recv(int src, std::string_view label) {
  auto& im = *sim_->impl_;
  RankState& st = im.ranks[id_];
  const double e_here = st.clock;
  Envelope env = im.pop(id_, src, Lane::Main, EnvKind::Data, label);
  Envelope ack;
  ack.kind = EnvKind::Ack;
  ack.label = std::string(label);
  ack.e = e_here;
  im.push(id_, src, Lane::Main, std::move(ack));
  const std::int64_t wire_bytes = env.bytes_row.at(0);
  const double start = std::max(env.e, e_here);
  const double completion =
      start +
      (wire_bytes > 0 ? xfer_time(im.topo, wire_bytes,
                                  classify(im.topo, src, id_))
                      : 0.0);
  im.add_segment(id_, e_here, start, SegmentKind::Idle, Lane::Main,
                 std::string(label));
  im.add_segment(id_, start, completion, SegmentKind::Comm, Lane::Main,
                 std::string(label));
  st.clock = completion;
  return std::move(env.payload);
}

std::vector<Bytes> Rank::all_to_all(const std::vector<int>& group,
                                    const std::vector<std::int64_t>& bytes_to,
                                    std::vector<Bytes> payloads,
                                    CommPolicy policy, std::string_view label,
                                    std::string_view phase) {
  auto& im = *sim_->impl_;
  RankState& st = im.ranks[id_];
  std::vector<Bytes> inbox;
  auto [start, completion] =
      im.run_collective(id_, Lane::Main, group, bytes_to, std::move(payloads),
                        policy, std::string(label), st.clock, inbox);
  im.add_segment(id_, st.clock, start, SegmentKind::Idle, Lane::Main,
                 std::string(phase));
  im.add_segment(id_, start, completion, SegmentKind::Comm, Lane::Main,
                 std::string(phase));
  st.clock = completion;
  return inbox;
}

BgHandle Rank::post_all_to_all(const std::vector<int>& group,
                               std::vector<std::int64_t> bytes_to,
                               PayloadBuilder build, CommPolicy policy,
                               std::string_view label, std::string_view phase) {
  RankState& st = sim_->impl_->ranks[id_];
  BgOp op;
  op.group = group;
  op.bytes_to = std::move(bytes_to);
  op.build = std::move(build);
  op.policy = policy;
  op.label = std::string(label);
  op.phase = std::string(phase);
  op.t_post = st.clock;
  st.bg_queue.push_back(std::move(op));
  return BgHandle{id_, static_cast<int>(st.bg_queue.size()) - 1};
}

const std::vector<Bytes>& Rank::bg_result(BgHandle handle) const {
  RankState& st = sim_->impl_->ranks[id_];
  if (handle.rank != id_ || handle.index < 0 ||
      handle.index >= static_cast<int>(st.bg_queue.size()))
    throw SimError(fmt::format(
        "[simnet] rank {}: bg_result on a handle it never posted", id_));
  const BgOp& op = st.bg_queue[handle.index];
  if (!op.resolved)
    throw SimError(fmt::format(
        "[simnet] rank {}: bg_result on \"{}\" before the engine ran it",
        id_, op.label));
  return op.inbox;
}

std::vector<Bytes> Rank::wait(BgHandle handle) {
  auto& im = *sim_->impl_;
  RankState& st = im.ranks[id_];
  if (handle.rank != id_ || handle.index < 0 ||
      handle.index >= static_cast<int>(st.bg_queue.size()))
    throw SimError(fmt::format(
        "[simnet] rank {}: wait on a handle it never posted", id_));
  while (st.bg_resolved <= handle.index) im.resolve_bg(id_, st.bg_resolved);
  BgOp& op = st.bg_queue[handle.index];
  if (op.consumed)
    throw SimError(fmt::format(
        "[simnet] rank {}: op \"{}\" waited on twice", id_, op.label));
  op.consumed = true;
  if (op.completion > st.clock) {
    im.add_segment(id_, st.clock, op.completion, SegmentKind::Idle, Lane::Main,
                   op.phase);
    st.clock = op.completion;
  }
  return std::move(op.inbox);
}

}  // namespace ulysim
