// Per-(patch, angle) dependency subgraphs, cycle detection and priorities.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "patchsweep/mesh.hpp"

namespace patchsweep {

// Faces with |omega . n| <= kGrazingEps carry no dependency in either direction.
inline constexpr double kGrazingEps = 1e-12;

struct SweepVertex {
    CellId cell = 0;
    int angle = 0;

    friend bool operator==(const SweepVertex&, const SweepVertex&) = default;
};

// Face indices of `cell` whose outward normal opposes omega (upwind side).
std::vector<int> upwind_faces(const Cell& cell, const std::array<double, 3>& omega);
std::vector<int> downwind_faces(const Cell& cell, const std::array<double, 3>& omega);

struct PatchSubgraph {
    int patch_id = -1;
    int angle = -1;
    std::vector<CellId> local_cells;  // ascending
    std::unordered_map<CellId, int> local_index;

    std::vector<std::pair<CellId, CellId>> local_edges;  // (u, v), both local
    struct InCut {
        CellId u_remote;
        CellId v_local;
        int src_patch;
    };
    struct OutCut {
        CellId u_local;
        CellId v_remote;
        int tgt_patch;
    };
    std::vector<InCut> in_cut_edges;
    std::vector<OutCut> out_cut_edges;

    std::vector<int> upwind_count;  // by local index, in-degree over local + in-cut

    // Downwind neighbors of each local cell in face-index order; drives the
    // deterministic order of count decrements and stream records.
    std::vector<std::vector<CellId>> down_local;                    // by local index
    std::vector<std::vector<std::pair<CellId, int>>> down_remote;   // (cell, tgt_patch)

    int local_count() const { return static_cast<int>(local_cells.size()); }
};

PatchSubgraph build_patch_subgraph(const UnstructuredMesh& mesh, const Decomposition& decomp,
                                   int patch, int angle, const std::array<double, 3>& omega);

// Kahn's algorithm over the global (cell, angle) graph for one direction.
// Returns the residual cells when the topological sort is incomplete; empty
// means acyclic.
std::vector<CellId> detect_cycles(const UnstructuredMesh& mesh,
                                  const std::array<double, 3>& omega);

enum class Strategy { Ldcp, Bfs, Slbd };

Strategy strategy_from_string(std::string_view name);
std::string strategy_name(Strategy s);

// Vertex priorities for one angle, indexed by cell id. Higher = dequeued
// earlier; ties broken by ascending cell id at the queue.
std::vector<std::int64_t> compute_vertex_priority(const UnstructuredMesh& mesh,
                                                  const Decomposition& decomp,
                                                  const std::vector<PatchSubgraph>& subgraphs,
                                                  const std::array<double, 3>& omega,
                                                  Strategy strategy);

// Patch priorities for one angle over the patch condensation graph. A cyclic
// condensation is permitted (falls back to BFS depth with DFS back-edges
// ignored). `process_of_patch` feeds the SLBD process-boundary distance; null
// or a single process defaults SLBD to the BFS value.
std::vector<std::int64_t> compute_patch_priority(const Decomposition& decomp,
                                                 const std::vector<PatchSubgraph>& subgraphs,
                                                 Strategy strategy,
                                                 const std::vector<int>* process_of_patch = nullptr);

struct AnglePriorities {
    std::vector<std::int64_t> vertex;  // by cell id
    std::vector<std::int64_t> patch;   // by patch id
};

struct PriorityAssignment {
    Strategy strategy = Strategy::Slbd;
    std::vector<AnglePriorities> per_angle;
    std::vector<std::int64_t> angle_priority;  // [a] = number of angles - a
    std::int64_t C = 1;                        // 1 + max |patch priority|
};

PriorityAssignment build_priorities(const UnstructuredMesh& mesh, const Decomposition& decomp,
                                    const std::vector<std::vector<PatchSubgraph>>& subgraphs_by_angle,
                                    const DirectionSet& dirs, Strategy strategy,
                                    const std::vector<int>* process_of_patch = nullptr);

std::int64_t combined_priority(const PriorityAssignment& pa, int patch, int angle);

std::string subgraph_to_dot(const PatchSubgraph& g);

}  // namespace patchsweep
