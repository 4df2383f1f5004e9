// Reentrant patch-program abstraction and its data-driven sweep instantiation.
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <vector>

#include "patchsweep/sweep_graph.hpp"

namespace patchsweep {

struct StreamRecord {
    CellId u = 0;  // upwind cell (source of the fine edge)
    CellId v = 0;  // downwind cell, local to the target patch
    double value = 0.0;
};

// Routable message between two (patch, task) programs. Sweep streams never
// cross angles: src_task == tgt_task.
struct Stream {
    int src_patch = -1;
    int src_task = -1;
    int tgt_patch = -1;
    int tgt_task = -1;
    std::vector<StreamRecord> records;  // fine payload (DAG mode)

    struct CoarseSection {
        std::int64_t cedge = -1;  // coarse edge id in the target's graph
        std::vector<StreamRecord> records;
    };
    std::vector<CoarseSection> sections;  // coarse payload (CG mode)

    std::size_t record_count() const;
    std::size_t byte_size() const;
};

std::vector<std::byte> pack_stream(const Stream& s);
Stream unpack_stream(std::span<const std::byte> bytes);

enum class ProgramStatus { Active, Inactive };

struct PatchProgramId {
    int patch = -1;
    int task = -1;  // angle index

    friend bool operator==(const PatchProgramId&, const PatchProgramId&) = default;
    friend auto operator<=>(const PatchProgramId&, const PatchProgramId&) = default;
};

// Kernel applied to a single (cell, angle) vertex. face_in holds one value per
// face of the cell; entries for upwind faces are populated (boundary influx
// for BOUNDARY faces), others are zero.
using VertexKernel =
    std::function<double(CellId cell, int angle, std::span<const double> face_in)>;

// Hooks the runtime uses to assert exactly-once execution and topological
// soundness of the schedule.
struct SweepAudit {
    std::vector<std::vector<std::int32_t>> kernel_count;  // [angle][cell]
    std::vector<std::vector<std::int64_t>> stamp;         // [angle][cell], global order
    std::atomic<std::int64_t> next_stamp{0};

    void reset(int angles, std::size_t cells);
};

struct ProgramConfig {
    std::uint64_t grain = 0;  // vertex clustering grain; 0 = unbounded
    double boundary_influx = 0.0;
    bool record_trace = false;
    bool virtual_clock = false;  // count operations instead of reading the clock
};

// Overhead accounting drained by the executing worker after each activation.
struct ProgramCounters {
    std::int64_t kernel_ns = 0;         // operation count under a virtual clock
    std::int64_t graph_ops = 0;         // dequeues + count decrements
    std::int64_t kernel_invocations = 0;
    std::int64_t scheduling_events = 0;  // ready-queue dequeues (fine or coarse)
};

// Per-patch angular-flux storage shared by the DAG and CG program flavors.
struct PatchFieldStore {
    std::vector<double> psi;                    // by local index
    std::vector<std::vector<double>> incoming;  // [local index][face]

    void init(const UnstructuredMesh& mesh, const PatchSubgraph& g, double influx);
    // face_in for the kernel: local upwind neighbors read psi, remote ones the
    // received values, boundary faces the influx stored at init.
    void fill_face_in(const UnstructuredMesh& mesh, const PatchSubgraph& g, CellId cell,
                      std::vector<double>& out) const;
    // Record (u -> v, value) from a stream; fills every matching face of v.
    void store_incoming(const UnstructuredMesh& mesh, const PatchSubgraph& g, CellId v, CellId u,
                        double value);
};

// The five-function interface executed by the Alg.-1 driver below.
class PatchProgram {
  public:
    explicit PatchProgram(PatchProgramId id) : id_(id) {}
    virtual ~PatchProgram() = default;

    virtual void init() = 0;
    virtual void input(const Stream& s) = 0;
    virtual std::vector<CellId> compute() = 0;  // one cluster; returns computed cells
    virtual std::optional<Stream> output() = 0;
    virtual bool vote_to_halt() const = 0;

    // Remaining (cell, angle) workload this program commits to the ledger.
    virtual std::int64_t remaining() const = 0;

    virtual const std::vector<double>& psi_local() const = 0;

    ProgramCounters take_counters() {
        ProgramCounters out = counters_;
        counters_ = {};
        return out;
    }

    PatchProgramId id() const { return id_; }
    bool initialized() const { return initialized_; }

  protected:
    void mark_initialized();
    ProgramCounters counters_;

  private:
    PatchProgramId id_;
    bool initialized_ = false;
};

struct ProgramRunResult {
    std::vector<Stream> outbound;
    std::vector<CellId> computed;
    std::size_t streams_consumed = 0;
    std::size_t records_consumed = 0;
    bool halted = false;
};

// Execution semantics of one activation: init (first time) -> drain inputs ->
// compute -> drain outputs -> vote_to_halt.
ProgramRunResult run_program_once(PatchProgram& program, std::deque<Stream>& pending);

// Data-driven sweep over one patch subgraph (the fine DAG path).
class SweepProgram : public PatchProgram {
  public:
    SweepProgram(const UnstructuredMesh& mesh, const PatchSubgraph& subgraph,
                 const std::vector<std::int64_t>* vertex_priority, VertexKernel kernel,
                 ProgramConfig cfg);

    void init() override;
    void input(const Stream& s) override;
    std::vector<CellId> compute() override;
    std::optional<Stream> output() override;
    bool vote_to_halt() const override;
    std::int64_t remaining() const override;

    std::int64_t computed_count() const { return computed_count_; }
    const std::vector<double>& psi() const { return store_.psi; }
    const std::vector<double>& psi_local() const override { return store_.psi; }
    const PatchSubgraph& subgraph() const { return *subgraph_; }
    const std::vector<std::vector<CellId>>& cluster_trace() const { return cluster_trace_; }

    void attach_audit(SweepAudit* audit) { audit_ = audit; }

  private:
    void enqueue(CellId cell);
    void solve_cluster(const std::vector<CellId>& cells);

    const UnstructuredMesh* mesh_;
    const PatchSubgraph* subgraph_;
    const std::vector<std::int64_t>* vertex_priority_;  // by cell id; null = all equal
    VertexKernel kernel_;
    ProgramConfig cfg_;

    struct QueueEntry {
        std::int64_t priority;
        CellId cell;
        bool operator<(const QueueEntry& o) const {
            if (priority != o.priority) return priority < o.priority;
            return cell > o.cell;  // ascending cell id wins ties
        }
    };

    std::vector<int> counts_;  // by local index
    std::priority_queue<QueueEntry> queue_;
    std::map<std::pair<int, int>, Stream> outstreams_;  // (tgt_patch, task) -> stream
    PatchFieldStore store_;
    std::int64_t computed_count_ = 0;
    std::vector<std::vector<CellId>> cluster_trace_;
    SweepAudit* audit_ = nullptr;
};

}  // namespace patchsweep
