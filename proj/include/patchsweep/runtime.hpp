// Simulated multi-process master/worker runtime: stream routing, load
// balancing, termination detection and sweep orchestration.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "patchsweep/coarsen.hpp"
#include "patchsweep/patch_program.hpp"
#include "patchsweep/sweep_graph.hpp"

namespace patchsweep {

enum class TerminationMode { Workload, Consensus };
enum class SweepMode { Dag, Cg };

TerminationMode termination_from_string(std::string_view name);
SweepMode sweep_mode_from_string(std::string_view name);

struct RuntimeConfig {
    int processes = 1;
    int workers = 1;  // per process
    std::uint64_t grain = 0;  // 0 = unbounded
    Strategy strategy = Strategy::Slbd;
    TerminationMode termination = TerminationMode::Workload;
    SweepMode mode = SweepMode::Dag;
    std::uint64_t seed = 0;
    bool deterministic = false;   // round-robin interleave, virtual clock
    std::uint32_t max_latency = 0;  // injected transport latency (poll ticks)
    double boundary_influx = 0.0;
    bool record_trace = false;      // record cluster traces (CG construction)
    bool record_decisions = false;  // log worker-assignment decisions for tests
};

struct WorkerMetrics {
    std::int64_t graph_op_ns = 0;
    std::int64_t pack_unpack_ns = 0;
    std::int64_t kernel_ns = 0;
    std::int64_t comm_ns = 0;
    std::int64_t idle_ns = 0;
    std::int64_t wall_ns = 0;
};

struct RuntimeMetrics {
    std::vector<WorkerMetrics> per_worker;  // process-major
    std::int64_t streams_sent = 0;      // remote (serialized) streams
    std::int64_t streams_received = 0;
    std::int64_t bytes_sent = 0;
    std::int64_t activations = 0;
    std::int64_t scheduling_events = 0;  // ready-queue dequeues (fine or coarse)
    std::int64_t kernel_invocations = 0; // cluster solves
    std::int64_t cg_build_ns = 0;
    int iterations = 0;

    void merge(const RuntimeMetrics& o);
};

// (patch, task) -> (process, worker). The home process of a patch never
// changes; the worker binding may change only while the program is inactive.
struct RouteTable {
    int processes = 1;
    std::vector<int> process_of_patch;

    int home_process(int patch) const { return process_of_patch.at(patch); }
};

RouteTable make_route_table(int patches, int processes);

// Resolves a stream to its target process; the worker is chosen by that
// process's master on activation (-1 = deferred).
std::pair<int, int> route(const Stream& s, const RouteTable& table);

// Lightest-worker policy: argmin load, ties to the lowest worker id.
int assign_on_activation(const std::vector<std::int64_t>& worker_loads);

// Safra-style token-ring termination over the simulated processes.
struct SafraToken {
    bool black = false;
    std::int64_t count = 0;
    bool circulated = false;  // completed a full round back to the initiator
};

class SafraProcess {
  public:
    SafraProcess(int rank, int total) : rank_(rank), total_(total) {}

    void on_basic_send() { ++counter_; }
    void on_basic_receive() { --counter_; machine_black_ = true; }
    void receive_token(const SafraToken& t) {
        token_ = t;
        if (rank_ == 0) token_->circulated = true;
    }
    bool holds_token() const { return token_.has_value(); }

    // When passive and holding the token, either announces termination (a
    // circulated white token with zero balance back at a white, passive
    // initiator) or emits the token to forward to (rank + 1) % total.
    struct Step {
        bool announce = false;
        std::optional<SafraToken> forward;
    };
    Step step(bool passive);

    // Rank 0 starts with a synthetic token so a single passive process with
    // zero balance terminates immediately.
    void prime_initiator() {
        if (rank_ == 0 && !token_) token_ = SafraToken{false, 0, total_ == 1};
    }
    int rank() const { return rank_; }

  private:
    int rank_;
    int total_;
    std::int64_t counter_ = 0;  // basic messages: sent - received
    bool machine_black_ = false;
    std::optional<SafraToken> token_;
};

struct AssignmentDecision {
    std::vector<std::int64_t> loads;
    int chosen = -1;
};

// Exactly-once / topological-soundness evidence captured during a sweep.
struct AuditReport {
    std::vector<std::vector<std::int32_t>> kernel_count;  // [angle][cell]
    std::vector<std::vector<std::int64_t>> stamp;         // [angle][cell], global order
};

struct SweepResult {
    std::vector<std::vector<double>> psi;  // [angle][cell]
    RuntimeMetrics metrics;
    AuditReport audit;
    std::vector<ClusterTrace> traces;  // when record_trace; one per (patch, angle)
    std::vector<AssignmentDecision> decisions;  // when record_decisions
};

// Immutable per-sweep graph data shared across iterations.
struct SweepGraphs {
    std::vector<std::vector<PatchSubgraph>> subgraphs;  // [angle][patch]
    PriorityAssignment priorities;
    RouteTable routes;

    static SweepGraphs build(const UnstructuredMesh& mesh, const Decomposition& decomp,
                             const DirectionSet& dirs, Strategy strategy, int processes);
};

// One data-driven sweep of every angle. All (patch, angle) programs start
// active and evenly pre-bound; masters route streams and detect termination.
// Throws on vertex-level cycles and on a stalled schedule (watchdog).
SweepResult run_sweep(const UnstructuredMesh& mesh, const Decomposition& decomp,
                      const DirectionSet& dirs, const RuntimeConfig& config,
                      const VertexKernel& kernel, const SweepGraphs& graphs);

// Sweep over prebuilt coarsened graphs (one per angle) recorded from an
// earlier DAG sweep of the same mesh/decomposition. Throws a stale-graph
// error when the fingerprint does not match.
SweepResult run_sweep_cg(const UnstructuredMesh& mesh, const Decomposition& decomp,
                         const DirectionSet& dirs, const RuntimeConfig& config,
                         const VertexKernel& kernel, const SweepGraphs& graphs,
                         const std::vector<CoarsenedGraph>& cgs);

std::string metrics_to_json(const RuntimeMetrics& m);

}  // namespace patchsweep
