#include "patchsweep/runtime.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <deque>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "json.hpp"

namespace patchsweep {

TerminationMode termination_from_string(std::string_view name) {
    if (name == "workload") return TerminationMode::Workload;
    if (name == "consensus") return TerminationMode::Consensus;
    throw std::invalid_argument("unknown termination mode: " + std::string(name));
}

SweepMode sweep_mode_from_string(std::string_view name) {
    if (name == "dag") return SweepMode::Dag;
    if (name == "cg") return SweepMode::Cg;
    throw std::invalid_argument("unknown sweep mode: " + std::string(name));
}

RouteTable make_route_table(int patches, int processes) {
    RouteTable t;
    t.processes = processes;
    t.process_of_patch.resize(static_cast<std::size_t>(patches));
    for (int p = 0; p < patches; ++p) t.process_of_patch[static_cast<std::size_t>(p)] = p % processes;
    return t;
}

std::pair<int, int> route(const Stream& s, const RouteTable& table) {
    if (s.tgt_patch < 0 || static_cast<std::size_t>(s.tgt_patch) >= table.process_of_patch.size())
        throw std::invalid_argument("route: stream targets an unknown patch-program");
    return {table.home_process(s.tgt_patch), -1};
}

int assign_on_activation(const std::vector<std::int64_t>& worker_loads) {
    if (worker_loads.empty()) throw std::invalid_argument("assign_on_activation: no workers");
    int best = 0;
    for (int w = 1; w < static_cast<int>(worker_loads.size()); ++w)
        if (worker_loads[static_cast<std::size_t>(w)] < worker_loads[static_cast<std::size_t>(best)])
            best = w;
    return best;
}

SafraProcess::Step SafraProcess::step(bool passive) {
    Step result;
    if (!token_ || !passive) return result;
    if (rank_ != 0) {
        SafraToken t = *token_;
        token_.reset();
        t.count += counter_;
        t.black = t.black || machine_black_;
        machine_black_ = false;
        result.forward = t;
        return result;
    }
    if (token_->circulated && !token_->black && !machine_black_ && token_->count + counter_ == 0) {
        result.announce = true;
        return result;
    }
    // Start a fresh probe.
    token_.reset();
    machine_black_ = false;
    if (total_ == 1) {
        token_ = SafraToken{false, 0, true};
        return result;
    }
    result.forward = SafraToken{false, 0, false};
    return result;
}

void RuntimeMetrics::merge(const RuntimeMetrics& o) {
    if (per_worker.size() < o.per_worker.size()) per_worker.resize(o.per_worker.size());
    for (std::size_t i = 0; i < o.per_worker.size(); ++i) {
        per_worker[i].graph_op_ns += o.per_worker[i].graph_op_ns;
        per_worker[i].pack_unpack_ns += o.per_worker[i].pack_unpack_ns;
        per_worker[i].kernel_ns += o.per_worker[i].kernel_ns;
        per_worker[i].comm_ns += o.per_worker[i].comm_ns;
        per_worker[i].idle_ns += o.per_worker[i].idle_ns;
        per_worker[i].wall_ns += o.per_worker[i].wall_ns;
    }
    streams_sent += o.streams_sent;
    streams_received += o.streams_received;
    bytes_sent += o.bytes_sent;
    activations += o.activations;
    scheduling_events += o.scheduling_events;
    kernel_invocations += o.kernel_invocations;
    cg_build_ns += o.cg_build_ns;
    iterations += o.iterations;
}

std::string metrics_to_json(const RuntimeMetrics& m) {
    nlohmann::json workers = nlohmann::json::array();
    for (const WorkerMetrics& w : m.per_worker)
        workers.push_back({{"graph_op_ns", w.graph_op_ns},
                           {"pack_unpack_ns", w.pack_unpack_ns},
                           {"kernel_ns", w.kernel_ns},
                           {"comm_ns", w.comm_ns},
                           {"idle_ns", w.idle_ns},
                           {"wall_ns", w.wall_ns}});
    return nlohmann::json{{"per_worker", std::move(workers)},
                          {"streams_sent", m.streams_sent},
                          {"bytes_sent", m.bytes_sent},
                          {"activations", m.activations},
                          {"iterations", m.iterations},
                          {"scheduling_events", m.scheduling_events},
                          {"kernel_invocations", m.kernel_invocations},
                          {"cg_build_ns", m.cg_build_ns}}
        .dump();
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::int64_t now_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// In-memory transport between the simulated processes. FIFO per (src, tgt)
// channel; optional seed-driven latency measured in delivery ticks (one tick
// per master step of the receiving process, applied to channel heads).
class Transport {
  public:
    struct Delivery {
        bool is_token = false;
        SafraToken token;
        std::vector<std::byte> bytes;
    };

    Transport(int nprocs, std::uint64_t seed, std::uint32_t max_latency)
        : nprocs_(nprocs), seed_(seed), max_latency_(max_latency),
          channels_(static_cast<std::size_t>(nprocs) * static_cast<std::size_t>(nprocs)) {}

    void send_stream(int src, int tgt, std::vector<std::byte> bytes) {
        std::lock_guard lock(mtx_);
        ++streams_sent_;
        bytes_sent_ += static_cast<std::int64_t>(bytes.size());
        channel(src, tgt).push_back({next_delay(), Delivery{false, {}, std::move(bytes)}});
    }

    void send_token(int src, int tgt, const SafraToken& t) {
        std::lock_guard lock(mtx_);
        channel(src, tgt).push_back({next_delay(), Delivery{true, t, {}}});
    }

    void tick(int tgt) {
        std::lock_guard lock(mtx_);
        for (int src = 0; src < nprocs_; ++src) {
            auto& ch = channel(src, tgt);
            if (!ch.empty() && ch.front().first > 0) --ch.front().first;
        }
    }

    std::optional<Delivery> poll(int tgt) {
        std::lock_guard lock(mtx_);
        for (int src = 0; src < nprocs_; ++src) {
            auto& ch = channel(src, tgt);
            if (ch.empty() || ch.front().first > 0) continue;
            Delivery d = std::move(ch.front().second);
            ch.pop_front();
            if (!d.is_token) ++streams_received_;
            return d;
        }
        return std::nullopt;
    }

    bool balanced() const {
        std::lock_guard lock(mtx_);
        return streams_sent_ == streams_received_;
    }
    std::int64_t streams_sent() const { std::lock_guard lock(mtx_); return streams_sent_; }
    std::int64_t streams_received() const { std::lock_guard lock(mtx_); return streams_received_; }
    std::int64_t bytes_sent() const { std::lock_guard lock(mtx_); return bytes_sent_; }

  private:
    std::deque<std::pair<std::uint32_t, Delivery>>& channel(int src, int tgt) {
        return channels_[static_cast<std::size_t>(src) * static_cast<std::size_t>(nprocs_) +
                         static_cast<std::size_t>(tgt)];
    }
    std::uint32_t next_delay() {
        if (max_latency_ == 0) return 0;
        return static_cast<std::uint32_t>(splitmix64(seed_ ^ static_cast<std::uint64_t>(seq_++)) %
                                          (max_latency_ + 1));
    }

    int nprocs_;
    std::uint64_t seed_;
    std::uint32_t max_latency_;
    std::vector<std::deque<std::pair<std::uint32_t, Delivery>>> channels_;
    std::uint64_t seq_ = 0;
    std::int64_t streams_sent_ = 0;
    std::int64_t streams_received_ = 0;
    std::int64_t bytes_sent_ = 0;
    mutable std::mutex mtx_;
};

// Sweep over the coarse vertices owned by one (patch, task): in-degree
// counting over the coarsened graph, each coarse vertex replaying its
// recorded fine cluster through the kernel.
class CgProgram : public PatchProgram {
  public:
    CgProgram(const UnstructuredMesh& mesh, const PatchSubgraph& subgraph,
              const CoarsenedGraph& cg, VertexKernel kernel, ProgramConfig cfg, SweepAudit* audit)
        : PatchProgram({subgraph.patch_id, subgraph.angle}),
          mesh_(&mesh),
          subgraph_(&subgraph),
          cg_(&cg),
          kernel_(std::move(kernel)),
          cfg_(cfg),
          audit_(audit) {
        for (const CoarseVertex& cv : cg.cvertices)
            if (cv.patch == id().patch) {
                owned_index_[cv.id] = static_cast<int>(owned_.size());
                owned_.push_back(cv.id);
            }
    }

    void init() override {
        mark_initialized();
        counts_.resize(owned_.size());
        for (std::size_t i = 0; i < owned_.size(); ++i)
            counts_[i] = cg_->in_degree[static_cast<std::size_t>(owned_[i])];
        store_.init(*mesh_, *subgraph_, cfg_.boundary_influx);
        for (std::size_t i = 0; i < owned_.size(); ++i)
            if (counts_[i] == 0) queue_.push(owned_[i]);
    }

    void input(const Stream& s) override {
        if (!initialized()) throw std::logic_error("patch-program input before init");
        if (s.tgt_patch != id().patch || s.tgt_task != id().task)
            throw std::logic_error("stream delivered to the wrong patch-program");
        for (const Stream::CoarseSection& sec : s.sections) {
            const CoarseEdge& e = cg_->cedges.at(static_cast<std::size_t>(sec.cedge));
            const auto it = owned_index_.find(e.tgt);
            if (it == owned_index_.end())
                throw std::runtime_error("coarse stream targets a non-local cluster");
            for (const StreamRecord& r : sec.records)
                store_.store_incoming(*mesh_, *subgraph_, r.v, r.u, r.value);
            if (counts_[static_cast<std::size_t>(it->second)] == 0)
                throw std::runtime_error("duplicate coarse delivery: count underflow");
            ++counters_.graph_ops;
            if (--counts_[static_cast<std::size_t>(it->second)] == 0) queue_.push(e.tgt);
        }
    }

    std::vector<CellId> compute() override {
        if (!initialized()) throw std::logic_error("patch-program compute before init");
        const std::uint64_t grain =
            cfg_.grain == 0 ? std::numeric_limits<std::uint64_t>::max() : cfg_.grain;
        std::vector<CellId> computed;
        while (!queue_.empty()) {
            const std::int64_t cvid = queue_.top();
            const CoarseVertex& cv = cg_->cvertices[static_cast<std::size_t>(cvid)];
            if (!computed.empty() && computed.size() + cv.members.size() > grain) break;
            queue_.pop();
            ++counters_.graph_ops;
            ++counters_.scheduling_events;
            solve_members(cv, computed);
            for (std::int64_t eidx : cg_->out_edges[static_cast<std::size_t>(cvid)]) {
                const CoarseEdge& e = cg_->cedges[static_cast<std::size_t>(eidx)];
                const auto it = owned_index_.find(e.tgt);
                if (it != owned_index_.end()) {
                    if (counts_[static_cast<std::size_t>(it->second)] == 0)
                        throw std::runtime_error("coarse count underflow");
                    ++counters_.graph_ops;
                    if (--counts_[static_cast<std::size_t>(it->second)] == 0) queue_.push(e.tgt);
                    continue;
                }
                const int tgt_patch = cg_->cvertices[static_cast<std::size_t>(e.tgt)].patch;
                Stream& s = outstreams_[{tgt_patch, id().task}];
                if (s.records.empty() && s.sections.empty()) {
                    s.src_patch = id().patch;
                    s.src_task = id().task;
                    s.tgt_patch = tgt_patch;
                    s.tgt_task = id().task;
                }
                Stream::CoarseSection sec;
                sec.cedge = eidx;
                for (std::size_t i = 0; i < e.src_members.size(); ++i) {
                    const CellId u = static_cast<CellId>(e.src_members[i]);
                    sec.records.push_back(
                        {u, static_cast<CellId>(e.tgt_members[i]),
                         store_.psi[static_cast<std::size_t>(subgraph_->local_index.at(u))]});
                }
                s.sections.push_back(std::move(sec));
            }
        }
        computed_count_ += static_cast<std::int64_t>(computed.size());
        return computed;
    }

    std::optional<Stream> output() override {
        if (outstreams_.empty()) return std::nullopt;
        auto it = outstreams_.begin();
        Stream s = std::move(it->second);
        outstreams_.erase(it);
        return s;
    }

    bool vote_to_halt() const override { return queue_.empty(); }

    std::int64_t remaining() const override {
        return static_cast<std::int64_t>(subgraph_->local_count()) - computed_count_;
    }

    const std::vector<double>& psi_local() const override { return store_.psi; }

  private:
    void solve_members(const CoarseVertex& cv, std::vector<CellId>& computed) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<double> face_in;
        for (std::int64_t member : cv.members) {
            const CellId c = static_cast<CellId>(member);
            store_.fill_face_in(*mesh_, *subgraph_, c, face_in);
            store_.psi[static_cast<std::size_t>(subgraph_->local_index.at(c))] =
                kernel_(c, id().task, face_in);
            computed.push_back(c);
            if (audit_) {
                ++audit_->kernel_count[static_cast<std::size_t>(id().task)][static_cast<std::size_t>(c)];
                audit_->stamp[static_cast<std::size_t>(id().task)][static_cast<std::size_t>(c)] =
                    audit_->next_stamp.fetch_add(1);
            }
        }
        ++counters_.kernel_invocations;
        counters_.kernel_ns += cfg_.virtual_clock
                                   ? static_cast<std::int64_t>(cv.members.size())
                                   : std::chrono::duration_cast<std::chrono::nanoseconds>(
                                         std::chrono::steady_clock::now() - t0)
                                         .count();
    }

    const UnstructuredMesh* mesh_;
    const PatchSubgraph* subgraph_;
    const CoarsenedGraph* cg_;
    VertexKernel kernel_;
    ProgramConfig cfg_;
    SweepAudit* audit_;

    std::vector<std::int64_t> owned_;
    std::unordered_map<std::int64_t, int> owned_index_;
    std::vector<int> counts_;
    std::priority_queue<std::int64_t, std::vector<std::int64_t>, std::greater<>> queue_;
    std::map<std::pair<int, int>, Stream> outstreams_;
    PatchFieldStore store_;
    std::int64_t computed_count_ = 0;
};

struct Deliver {
    int program = -1;
    bool rebind = false;
    std::optional<Stream> stream;
};

struct Report {
    int program = -1;
    bool ran = false;
    bool halted = false;
    std::int64_t computed_delta = 0;
    std::size_t streams_consumed = 0;
    std::vector<Stream> outbound;
    std::optional<Stream> bounced;
};

struct WorkerState {
    int process = 0;
    int index = 0;

    std::mutex inbox_mtx;
    std::deque<Deliver> inbox;

    // Worker-confined state.
    std::set<int> bound;
    std::set<int> active;
    std::map<int, std::deque<Stream>> pending;

    WorkerMetrics metrics;
};

struct ProcessState {
    int rank = 0;
    std::vector<int> programs;  // slot indices, (angle, patch) ascending

    std::atomic<std::int64_t> ledger{0};           // remaining (cell, angle)s
    std::atomic<std::int64_t> in_flight_local{0};  // delivered, not yet consumed

    std::mutex report_mtx;
    std::deque<Report> reports;

    std::vector<std::unique_ptr<WorkerState>> workers;
    std::vector<std::int64_t> worker_load;  // master view
    SafraProcess safra{0, 1};
    WorkerMetrics metrics;  // master thread accounting
};

struct ProgramSlot {
    std::unique_ptr<PatchProgram> program;
    int patch = -1;
    int angle = -1;
    int home = -1;
    std::int64_t priority = 0;

    // Owned by the home process's master.
    bool active = true;
    int worker = -1;
    std::int64_t master_remaining = 0;
};

constexpr std::int64_t kWatchdogIdleRounds = 1'000'000;

class Engine {
  public:
    Engine(const UnstructuredMesh& mesh, const Decomposition& decomp, const DirectionSet& dirs,
           const RuntimeConfig& config, const VertexKernel& kernel, const SweepGraphs& graphs,
           const std::vector<CoarsenedGraph>* cgs)
        : mesh_(mesh), decomp_(decomp), dirs_(dirs), config_(config), kernel_(kernel),
          graphs_(graphs), is_dag_(cgs == nullptr),
          transport_(config.processes, config.seed, config.max_latency) {
        if (config.processes < 1 || config.workers < 1)
            throw std::invalid_argument("runtime: process and worker counts must be >= 1");
        const int angles = dirs.count();
        const int npatches = decomp.patch_count();

        ProgramConfig pcfg;
        pcfg.grain = config.grain;
        pcfg.boundary_influx = config.boundary_influx;
        pcfg.record_trace = config.record_trace;
        pcfg.virtual_clock = config.deterministic;

        audit_.reset(angles, mesh.cell_count());

        slots_.resize(static_cast<std::size_t>(angles) * static_cast<std::size_t>(npatches));
        for (int a = 0; a < angles; ++a) {
            for (int p = 0; p < npatches; ++p) {
                ProgramSlot& slot = slots_[slot_index(p, a)];
                slot.patch = p;
                slot.angle = a;
                slot.home = graphs.routes.home_process(p);
                slot.priority = combined_priority(graphs.priorities, p, a);
                const PatchSubgraph& sub = graphs.subgraphs[static_cast<std::size_t>(a)][static_cast<std::size_t>(p)];
                slot.master_remaining = sub.local_count();
                if (cgs) {
                    slot.program = std::make_unique<CgProgram>(
                        mesh, sub, (*cgs)[static_cast<std::size_t>(a)], kernel, pcfg, &audit_);
                } else {
                    auto prog = std::make_unique<SweepProgram>(
                        mesh, sub, &graphs.priorities.per_angle[static_cast<std::size_t>(a)].vertex,
                        kernel, pcfg);
                    prog->attach_audit(&audit_);
                    slot.program = std::move(prog);
                }
            }
        }

        procs_.resize(static_cast<std::size_t>(config.processes));
        for (int r = 0; r < config.processes; ++r) {
            procs_[static_cast<std::size_t>(r)] = std::make_unique<ProcessState>();
            ProcessState& ps = *procs_[static_cast<std::size_t>(r)];
            ps.rank = r;
            ps.safra = SafraProcess(r, config.processes);
            ps.worker_load.assign(static_cast<std::size_t>(config.workers), 0);
            for (int w = 0; w < config.workers; ++w) {
                ps.workers.push_back(std::make_unique<WorkerState>());
                ps.workers.back()->process = r;
                ps.workers.back()->index = w;
            }
        }
        // Initial even assignment: (angle, patch) ascending, dealt round-robin.
        for (int a = 0; a < angles; ++a)
            for (int p = 0; p < npatches; ++p)
                procs_[static_cast<std::size_t>(graphs.routes.home_process(p))]->programs.push_back(
                    static_cast<int>(slot_index(p, a)));
        for (auto& psp : procs_) {
            ProcessState& ps = *psp;
            int seq = 0;
            for (int idx : ps.programs) {
                ProgramSlot& slot = slots_[static_cast<std::size_t>(idx)];
                const int w = seq++ % config_.workers;
                slot.active = true;
                slot.worker = w;
                ps.worker_load[static_cast<std::size_t>(w)] += slot.master_remaining;
                ps.ledger += slot.master_remaining;
                WorkerState& ws = *ps.workers[static_cast<std::size_t>(w)];
                ws.bound.insert(idx);
                ws.active.insert(idx);
                ++activations_;
            }
        }
#ifdef PATCHSWEEP_FAULT_INJECTION
        fault_pending_ = std::getenv("PATCHSWEEP_FAULT_CORRUPT_FIRST_STREAM") != nullptr;
#endif
    }

    SweepResult run() {
        if (config_.deterministic)
            run_deterministic();
        else
            run_threaded();
        return finalize();
    }

  private:
    std::size_t slot_index(int patch, int angle) const {
        return static_cast<std::size_t>(angle) * static_cast<std::size_t>(decomp_.patch_count()) +
               static_cast<std::size_t>(patch);
    }

    bool workload_done() const {
        for (const auto& ps : procs_)
            if (ps->ledger.load() != 0) return false;
        return transport_.balanced();
    }

    bool process_passive(ProcessState& ps) const {
        return ps.ledger.load() == 0 && ps.in_flight_local.load() == 0;
    }

    void deliver_local(ProcessState& ps, Stream s) {
        const std::size_t idx = slot_index(s.tgt_patch, s.tgt_task);
        ProgramSlot& slot = slots_.at(idx);
        if (slot.home != ps.rank) throw std::logic_error("stream routed to the wrong process");
        if (!slot.active) {
            const int w = assign_on_activation(ps.worker_load);
            if (config_.record_decisions) {
                std::lock_guard lock(decision_mtx_);
                decisions_.push_back({ps.worker_load, w});
            }
            slot.active = true;
            slot.worker = w;
            ps.worker_load[static_cast<std::size_t>(w)] += slot.master_remaining;
            ++activations_;
            WorkerState& ws = *ps.workers[static_cast<std::size_t>(w)];
            std::lock_guard lock(ws.inbox_mtx);
            ws.inbox.push_back({static_cast<int>(idx), true, std::move(s)});
        } else {
            WorkerState& ws = *ps.workers[static_cast<std::size_t>(slot.worker)];
            std::lock_guard lock(ws.inbox_mtx);
            ws.inbox.push_back({static_cast<int>(idx), false, std::move(s)});
        }
        ++ps.in_flight_local;
    }

    void send_remote(ProcessState& ps, int tgt, Stream s) {
#ifdef PATCHSWEEP_FAULT_INJECTION
        if (fault_pending_) {
            fault_pending_ = false;
            for (StreamRecord& r : s.records) r.value = 0.0;
            for (auto& sec : s.sections)
                for (StreamRecord& r : sec.records) r.value = 0.0;
        }
#endif
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::byte> bytes = pack_stream(s);
        const std::int64_t nbytes = static_cast<std::int64_t>(bytes.size());
        if (config_.deterministic)
            ps.metrics.pack_unpack_ns += nbytes;
        else
            ps.metrics.pack_unpack_ns += std::chrono::duration_cast<std::chrono::nanoseconds>(
                                             std::chrono::steady_clock::now() - t0)
                                             .count();
        const auto c0 = std::chrono::steady_clock::now();
        transport_.send_stream(ps.rank, tgt, std::move(bytes));
        if (config_.termination == TerminationMode::Consensus) ps.safra.on_basic_send();
        ps.metrics.comm_ns += config_.deterministic
                                  ? 1
                                  : std::chrono::duration_cast<std::chrono::nanoseconds>(
                                        std::chrono::steady_clock::now() - c0)
                                        .count();
    }

    bool master_step(ProcessState& ps) {
        bool progressed = false;
        const auto t0 = std::chrono::steady_clock::now();

        transport_.tick(ps.rank);
        while (true) {
            const auto c0 = std::chrono::steady_clock::now();
            auto d = transport_.poll(ps.rank);
            if (!config_.deterministic)
                ps.metrics.comm_ns += std::chrono::duration_cast<std::chrono::nanoseconds>(
                                          std::chrono::steady_clock::now() - c0)
                                          .count();
            if (!d) break;
            progressed = true;
            if (d->is_token) {
                ps.safra.receive_token(d->token);
                continue;
            }
            if (config_.termination == TerminationMode::Consensus) ps.safra.on_basic_receive();
            const auto u0 = std::chrono::steady_clock::now();
            Stream s = unpack_stream(d->bytes);
            if (config_.deterministic) {
                ps.metrics.pack_unpack_ns += static_cast<std::int64_t>(d->bytes.size());
                ps.metrics.comm_ns += 1;
            } else {
                ps.metrics.pack_unpack_ns += std::chrono::duration_cast<std::chrono::nanoseconds>(
                                                 std::chrono::steady_clock::now() - u0)
                                                 .count();
            }
            deliver_local(ps, std::move(s));
        }

        std::deque<Report> batch;
        {
            std::lock_guard lock(ps.report_mtx);
            batch.swap(ps.reports);
        }
        for (Report& r : batch) {
            progressed = true;
            if (r.bounced) {
                // Returned undelivered; the re-delivery below re-counts it.
                --ps.in_flight_local;
                deliver_local(ps, std::move(*r.bounced));
            }
            if (!r.ran) continue;
            ProgramSlot& slot = slots_.at(static_cast<std::size_t>(r.program));
            slot.master_remaining -= r.computed_delta;
            if (slot.worker >= 0)
                ps.worker_load[static_cast<std::size_t>(slot.worker)] -= r.computed_delta;
            if (r.halted && slot.active) {
                if (slot.worker >= 0)
                    ps.worker_load[static_cast<std::size_t>(slot.worker)] -= slot.master_remaining;
                slot.active = false;
                slot.worker = -1;
            }
            ps.in_flight_local -= static_cast<std::int64_t>(r.streams_consumed);
            for (Stream& s : r.outbound) {
                const int tgt = graphs_.routes.home_process(s.tgt_patch);
                if (tgt == ps.rank)
                    deliver_local(ps, std::move(s));
                else
                    send_remote(ps, tgt, std::move(s));
            }
        }

        if (config_.termination == TerminationMode::Consensus && !done_.load()) {
            if (ps.rank == 0) ps.safra.prime_initiator();
            if (ps.safra.holds_token()) {
                const auto st = ps.safra.step(process_passive(ps));
                if (st.announce) {
                    done_.store(true);
                    progressed = true;
                } else if (st.forward) {
                    transport_.send_token(ps.rank, (ps.rank + 1) % config_.processes, *st.forward);
                    ps.metrics.comm_ns += config_.deterministic ? 1 : 0;
                    progressed = true;
                }
            }
        }

        if (config_.deterministic) {
            if (!progressed) ps.metrics.idle_ns += 1;
        } else {
            const std::int64_t dt = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                        std::chrono::steady_clock::now() - t0)
                                        .count();
            ps.metrics.wall_ns += dt;
            if (!progressed) ps.metrics.idle_ns += dt;
        }
        return progressed;
    }

    bool worker_step(ProcessState& ps, WorkerState& ws) {
        bool progressed = false;
        const auto t0 = std::chrono::steady_clock::now();

        std::deque<Deliver> batch;
        {
            std::lock_guard lock(ws.inbox_mtx);
            batch.swap(ws.inbox);
        }
        for (Deliver& d : batch) {
            progressed = true;
            if (d.rebind) ws.bound.insert(d.program);
            if (!ws.bound.contains(d.program)) {
                // Arrived after this worker released the program; hand it back
                // to the master for re-routing.
                Report r;
                r.bounced = std::move(d.stream);
                std::lock_guard lock(ps.report_mtx);
                ps.reports.push_back(std::move(r));
                continue;
            }
            if (d.stream) ws.pending[d.program].push_back(std::move(*d.stream));
            ws.active.insert(d.program);
        }

        int best = -1;
        for (int prog : ws.active) {
            if (best < 0 || slots_[static_cast<std::size_t>(prog)].priority >
                                slots_[static_cast<std::size_t>(best)].priority)
                best = prog;
        }
        if (best < 0) {
            if (config_.deterministic) {
                if (!progressed) ws.metrics.idle_ns += 1;
            } else {
                const std::int64_t dt = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                            std::chrono::steady_clock::now() - t0)
                                            .count();
                ws.metrics.wall_ns += dt;
                if (!progressed) ws.metrics.idle_ns += dt;
            }
            return progressed;
        }

        progressed = true;
        ProgramSlot& slot = slots_[static_cast<std::size_t>(best)];
        auto& pending = ws.pending[best];
        const auto r0 = std::chrono::steady_clock::now();
        ProgramRunResult rr = run_program_once(*slot.program, pending);
        const ProgramCounters pc = slot.program->take_counters();

        if (config_.deterministic) {
            ws.metrics.graph_op_ns += pc.graph_ops;
            ws.metrics.kernel_ns += pc.kernel_ns;
        } else {
            const std::int64_t total = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                           std::chrono::steady_clock::now() - r0)
                                           .count();
            ws.metrics.kernel_ns += pc.kernel_ns;
            ws.metrics.graph_op_ns += std::max<std::int64_t>(0, total - pc.kernel_ns);
        }
        scheduling_events_ += pc.scheduling_events;
        kernel_invocations_ += pc.kernel_invocations;

        ps.ledger -= static_cast<std::int64_t>(rr.computed.size());
        if (rr.halted) {
            ws.bound.erase(best);
            ws.active.erase(best);
            ws.pending.erase(best);
        }
        Report report;
        report.program = best;
        report.ran = true;
        report.halted = rr.halted;
        report.computed_delta = static_cast<std::int64_t>(rr.computed.size());
        report.streams_consumed = rr.streams_consumed;
        report.outbound = std::move(rr.outbound);
        {
            std::lock_guard lock(ps.report_mtx);
            ps.reports.push_back(std::move(report));
        }
        if (!config_.deterministic)
            ws.metrics.wall_ns += std::chrono::duration_cast<std::chrono::nanoseconds>(
                                      std::chrono::steady_clock::now() - t0)
                                      .count();
        return progressed;
    }

    void run_deterministic() {
        std::int64_t idle_rounds = 0;
        while (!done_.load()) {
            bool progressed = false;
            for (auto& ps : procs_) progressed |= master_step(*ps);
            for (auto& ps : procs_)
                for (auto& ws : ps->workers) progressed |= worker_step(*ps, *ws);
            if (config_.termination == TerminationMode::Workload && workload_done())
                done_.store(true);
            if (progressed) {
                idle_rounds = 0;
            } else if (++idle_rounds > kWatchdogIdleRounds) {
                throw std::runtime_error("sweep stalled (watchdog): " + stall_diagnostic());
            }
        }
        drain_reports();
    }

    void run_threaded() {
        std::atomic<std::int64_t> activity{0};
        std::vector<std::thread> threads;
        for (auto& psp : procs_) {
            ProcessState* ps = psp.get();
            threads.emplace_back([this, ps, &activity] {
                const auto start = std::chrono::steady_clock::now();
                while (!done_.load(std::memory_order_relaxed)) {
                    if (master_step(*ps))
                        activity.fetch_add(1, std::memory_order_relaxed);
                    else
                        std::this_thread::yield();
                }
                ps->metrics.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                          std::chrono::steady_clock::now() - start)
                                          .count();
            });
            for (auto& wsp : ps->workers) {
                WorkerState* ws = wsp.get();
                threads.emplace_back([this, ps, ws, &activity] {
                    const auto start = std::chrono::steady_clock::now();
                    while (!done_.load(std::memory_order_relaxed)) {
                        if (worker_step(*ps, *ws))
                            activity.fetch_add(1, std::memory_order_relaxed);
                        else
                            std::this_thread::yield();
                    }
                    ws->metrics.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                              std::chrono::steady_clock::now() - start)
                                              .count();
                });
            }
        }
        std::int64_t last_activity = -1;
        auto last_change = std::chrono::steady_clock::now();
        std::string stall;
        while (!done_.load()) {
            if (config_.termination == TerminationMode::Workload && workload_done())
                done_.store(true);
            const std::int64_t a = activity.load();
            const auto now = std::chrono::steady_clock::now();
            if (a != last_activity) {
                last_activity = a;
                last_change = now;
            } else if (now - last_change > std::chrono::seconds(30)) {
                stall = stall_diagnostic();
                done_.store(true);
            }
            std::this_thread::sleep_for(std::chrono::microseconds(100));
        }
        for (auto& t : threads) t.join();
        if (!stall.empty()) throw std::runtime_error("sweep stalled (watchdog): " + stall);
        drain_reports();
    }

    // Reports left queued when termination fired carry only bookkeeping; any
    // remaining payload would violate the termination conditions.
    void drain_reports() {
        for (auto& ps : procs_) {
            std::lock_guard lock(ps->report_mtx);
            for (Report& r : ps->reports) {
                if (r.bounced || !r.outbound.empty())
                    throw std::logic_error("stream in flight after termination was declared");
                ps->in_flight_local -= static_cast<std::int64_t>(r.streams_consumed);
            }
            ps->reports.clear();
        }
    }

    std::string stall_diagnostic() const {
        std::ostringstream os;
        os << "no progress; pending programs:";
        int listed = 0;
        for (const ProgramSlot& slot : slots_) {
            if (slot.master_remaining == 0) continue;
            if (++listed > 16) {
                os << " ...";
                break;
            }
            os << " (patch " << slot.patch << ", angle " << slot.angle << ", remaining "
               << slot.master_remaining << (slot.active ? ", active)" : ", inactive)");
        }
        for (const auto& ps : procs_) os << "; ledger[" << ps->rank << "]=" << ps->ledger.load();
        return os.str();
    }

    SweepResult finalize() {
        SweepResult result;
        const int angles = dirs_.count();
        result.psi.assign(static_cast<std::size_t>(angles),
                          std::vector<double>(mesh_.cell_count(), 0.0));
        for (const ProgramSlot& slot : slots_) {
            const auto& sub =
                graphs_.subgraphs[static_cast<std::size_t>(slot.angle)][static_cast<std::size_t>(slot.patch)];
            const std::vector<double>& psi = slot.program->psi_local();
            for (int i = 0; i < sub.local_count(); ++i)
                result.psi[static_cast<std::size_t>(slot.angle)]
                          [static_cast<std::size_t>(sub.local_cells[static_cast<std::size_t>(i)])] =
                    psi[static_cast<std::size_t>(i)];
            if (config_.record_trace && is_dag_) {
                const auto* sp = static_cast<const SweepProgram*>(slot.program.get());
                ClusterTrace trace;
                trace.patch = slot.patch;
                trace.task = slot.angle;
                for (const auto& cluster : sp->cluster_trace()) {
                    trace.clusters.emplace_back();
                    for (CellId c : cluster) trace.clusters.back().push_back(c);
                }
                result.traces.push_back(std::move(trace));
            }
        }

        RuntimeMetrics& m = result.metrics;
        for (const auto& ps : procs_) {
            m.per_worker.push_back(ps->metrics);  // master entry first
            for (const auto& ws : ps->workers) m.per_worker.push_back(ws->metrics);
        }
        if (config_.deterministic)
            for (WorkerMetrics& w : m.per_worker)
                w.wall_ns = w.graph_op_ns + w.pack_unpack_ns + w.kernel_ns + w.comm_ns + w.idle_ns;
        m.streams_sent = transport_.streams_sent();
        m.streams_received = transport_.streams_received();
        m.bytes_sent = transport_.bytes_sent();
        m.activations = activations_.load();
        m.scheduling_events = scheduling_events_.load();
        m.kernel_invocations = kernel_invocations_.load();
        m.iterations = 1;

        result.audit.kernel_count = audit_.kernel_count;
        result.audit.stamp = audit_.stamp;
        result.decisions = decisions_;
        return result;
    }

    const UnstructuredMesh& mesh_;
    const Decomposition& decomp_;
    const DirectionSet& dirs_;
    RuntimeConfig config_;
    const VertexKernel& kernel_;
    const SweepGraphs& graphs_;
    bool is_dag_;
    Transport transport_;

    std::vector<ProgramSlot> slots_;
    std::vector<std::unique_ptr<ProcessState>> procs_;
    SweepAudit audit_;

    std::atomic<bool> done_{false};
    std::atomic<std::int64_t> activations_{0};
    std::atomic<std::int64_t> scheduling_events_{0};
    std::atomic<std::int64_t> kernel_invocations_{0};

    std::mutex decision_mtx_;
    std::vector<AssignmentDecision> decisions_;

#ifdef PATCHSWEEP_FAULT_INJECTION
    bool fault_pending_ = false;
#endif
};

}  // namespace

SweepGraphs SweepGraphs::build(const UnstructuredMesh& mesh, const Decomposition& decomp,
                               const DirectionSet& dirs, Strategy strategy, int processes) {
    SweepGraphs g;
    g.routes = make_route_table(decomp.patch_count(), processes);
    const int angles = dirs.count();
    g.subgraphs.resize(static_cast<std::size_t>(angles));
    for (int a = 0; a < angles; ++a) {
        const auto& omega = dirs.ordinates[static_cast<std::size_t>(a)].omega;
        const auto residual = detect_cycles(mesh, omega);
        if (!residual.empty()) {
            std::ostringstream os;
            os << "sweep graph for angle " << a << " is cyclic; residual cells:";
            for (std::size_t i = 0; i < residual.size() && i < 16; ++i) os << " " << residual[i];
            if (residual.size() > 16) os << " ...";
            throw std::runtime_error(os.str());
        }
        for (int p = 0; p < decomp.patch_count(); ++p)
            g.subgraphs[static_cast<std::size_t>(a)].push_back(
                build_patch_subgraph(mesh, decomp, p, a, omega));
    }
    g.priorities = build_priorities(mesh, decomp, g.subgraphs, dirs, strategy,
                                    &g.routes.process_of_patch);
    return g;
}

SweepResult run_sweep(const UnstructuredMesh& mesh, const Decomposition& decomp,
                      const DirectionSet& dirs, const RuntimeConfig& config,
                      const VertexKernel& kernel, const SweepGraphs& graphs) {
    Engine engine(mesh, decomp, dirs, config, kernel, graphs, nullptr);
    return engine.run();
}

SweepResult run_sweep_cg(const UnstructuredMesh& mesh, const Decomposition& decomp,
                         const DirectionSet& dirs, const RuntimeConfig& config,
                         const VertexKernel& kernel, const SweepGraphs& graphs,
                         const std::vector<CoarsenedGraph>& cgs) {
    if (static_cast<int>(cgs.size()) != dirs.count())
        throw std::runtime_error("stale coarsened graph: angle count mismatch");
    for (const CoarsenedGraph& cg : cgs)
        if (cg.fine_vertex_count != static_cast<std::int64_t>(mesh.cell_count()) ||
            cg.source_patches != decomp.patch_count())
            throw std::runtime_error("stale coarsened graph: mesh or decomposition changed");
    Engine engine(mesh, decomp, dirs, config, kernel, graphs, &cgs);
    return engine.run();
}

}  // namespace patchsweep
