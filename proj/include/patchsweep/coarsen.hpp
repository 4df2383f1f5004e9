// Coarsened graph built from recorded vertex clusters of a first sweep.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "patchsweep/mesh.hpp"
#include "patchsweep/sweep_graph.hpp"

namespace patchsweep {

// Patch-owned fine graph for one angle, independent of mesh geometry so the
// coarsening machinery can be exercised on synthetic DAGs.
struct FineGraphView {
    std::int64_t vertex_count = 0;                             // ids 0..n-1
    std::vector<std::pair<std::int64_t, std::int64_t>> edges;  // u -> v, multi-edges allowed
    std::vector<int> owner;                                    // patch of each vertex
};

FineGraphView fine_graph_view(const UnstructuredMesh& mesh, const Decomposition& decomp,
                              const std::array<double, 3>& omega);

// Clusters recorded by one (patch, task) program, in execution order.
struct ClusterTrace {
    int patch = -1;
    int task = -1;
    std::vector<std::vector<std::int64_t>> clusters;
};

struct CoarseVertex {
    std::int64_t id = -1;
    int patch = -1;
    int task = -1;
    std::vector<std::int64_t> members;  // P(cv), recorded execution order
};

struct CoarseEdge {
    std::int64_t src = -1;
    std::int64_t tgt = -1;
    // P(ce): aligned source/target vertices of the combined fine edges.
    std::vector<std::int64_t> src_members;
    std::vector<std::int64_t> tgt_members;
};

struct CoarsenedGraph {
    int task = -1;
    std::vector<CoarseVertex> cvertices;  // ids = index, patch-major order
    std::vector<CoarseEdge> cedges;
    std::vector<std::vector<std::int64_t>> out_edges;  // cv id -> cedge indices
    std::vector<int> in_degree;                        // by cv id

    // Fingerprint of the run the trace came from; sweeps reject stale graphs.
    std::int64_t fine_vertex_count = 0;
    int source_patches = 0;
};

// One coarse vertex per recorded cluster, ids assigned patch-major in each
// patch's execution order; coarse edges aggregate all fine edges whose
// endpoints lie in different clusters. Throws when the trace does not cover
// every fine vertex.
CoarsenedGraph build_coarsened_graph(const FineGraphView& fine,
                                     const std::vector<ClusterTrace>& traces, int task);

// Kahn over the coarse edges. A cycle here is a construction bug (the fine
// graph was a DAG), so failure throws std::logic_error naming the cycle.
void verify_acyclic(const CoarsenedGraph& cg);

std::string cg_to_dot(const CoarsenedGraph& cg);

}  // namespace patchsweep
