#include "patchsweep/coarsen.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <sstream>
#include <stdexcept>

namespace patchsweep {

FineGraphView fine_graph_view(const UnstructuredMesh& mesh, const Decomposition& decomp,
                              const std::array<double, 3>& omega) {
    FineGraphView view;
    view.vertex_count = static_cast<std::int64_t>(mesh.cell_count());
    view.owner.resize(mesh.cell_count());
    for (std::size_t c = 0; c < mesh.cell_count(); ++c)
        view.owner[c] = decomp.patch_of_cell[c];
    for (const Cell& c : mesh.cells)
        for (int f : upwind_faces(c, omega)) {
            const CellId nb = c.faces[static_cast<std::size_t>(f)].neighbor;
            if (nb != kBoundary) view.edges.emplace_back(nb, c.id);
        }
    return view;
}

CoarsenedGraph build_coarsened_graph(const FineGraphView& fine,
                                     const std::vector<ClusterTrace>& traces, int task) {
    CoarsenedGraph cg;
    cg.task = task;
    cg.fine_vertex_count = fine.vertex_count;
    for (int o : fine.owner) cg.source_patches = std::max(cg.source_patches, o + 1);

    // Coarse vertex ids are patch-major: traces sorted by patch, clusters in
    // each patch's recorded execution order.
    std::vector<const ClusterTrace*> ordered;
    for (const ClusterTrace& t : traces) ordered.push_back(&t);
    std::sort(ordered.begin(), ordered.end(),
              [](const ClusterTrace* a, const ClusterTrace* b) { return a->patch < b->patch; });

    std::vector<std::int64_t> cluster_of(static_cast<std::size_t>(fine.vertex_count), -1);
    for (const ClusterTrace* t : ordered)
        for (const auto& cluster : t->clusters) {
            CoarseVertex cv;
            cv.id = static_cast<std::int64_t>(cg.cvertices.size());
            cv.patch = t->patch;
            cv.task = t->task;
            cv.members = cluster;
            for (std::int64_t v : cluster) {
                if (v < 0 || v >= fine.vertex_count)
                    throw std::invalid_argument("cluster trace references unknown vertex");
                if (cluster_of[static_cast<std::size_t>(v)] >= 0)
                    throw std::invalid_argument("cluster trace assigns a vertex twice");
                cluster_of[static_cast<std::size_t>(v)] = cv.id;
            }
            cg.cvertices.push_back(std::move(cv));
        }
    for (std::int64_t v = 0; v < fine.vertex_count; ++v)
        if (cluster_of[static_cast<std::size_t>(v)] < 0)
            throw std::invalid_argument("incomplete trace: vertex " + std::to_string(v) +
                                        " belongs to no recorded cluster");

    // Aggregate fine inter-cluster edges; duplicate (src, tgt) pairs merge.
    // Enumeration order: source cluster, then position in P(cv), then the
    // fine edge order within the view (face order for sweep graphs).
    std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> out_of(
        static_cast<std::size_t>(fine.vertex_count));
    for (const auto& [u, v] : fine.edges) out_of[static_cast<std::size_t>(u)].emplace_back(u, v);

    std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> edge_index;
    for (const CoarseVertex& cv : cg.cvertices)
        for (std::int64_t u : cv.members)
            for (const auto& [eu, ev] : out_of[static_cast<std::size_t>(u)]) {
                const std::int64_t tgt = cluster_of[static_cast<std::size_t>(ev)];
                if (tgt == cv.id) continue;
                const auto key = std::make_pair(cv.id, tgt);
                auto it = edge_index.find(key);
                if (it == edge_index.end()) {
                    it = edge_index.emplace(key, cg.cedges.size()).first;
                    cg.cedges.push_back({cv.id, tgt, {}, {}});
                }
                cg.cedges[it->second].src_members.push_back(eu);
                cg.cedges[it->second].tgt_members.push_back(ev);
            }

    cg.out_edges.resize(cg.cvertices.size());
    cg.in_degree.assign(cg.cvertices.size(), 0);
    for (std::size_t e = 0; e < cg.cedges.size(); ++e) {
        cg.out_edges[static_cast<std::size_t>(cg.cedges[e].src)].push_back(static_cast<std::int64_t>(e));
        ++cg.in_degree[static_cast<std::size_t>(cg.cedges[e].tgt)];
    }
    return cg;
}

void verify_acyclic(const CoarsenedGraph& cg) {
    std::vector<int> deg = cg.in_degree;
    std::deque<std::int64_t> ready;
    for (std::size_t v = 0; v < deg.size(); ++v)
        if (deg[v] == 0) ready.push_back(static_cast<std::int64_t>(v));
    std::size_t consumed = 0;
    while (!ready.empty()) {
        const std::int64_t u = ready.front();
        ready.pop_front();
        ++consumed;
        for (std::int64_t e : cg.out_edges[static_cast<std::size_t>(u)])
            if (--deg[static_cast<std::size_t>(cg.cedges[static_cast<std::size_t>(e)].tgt)] == 0)
                ready.push_back(cg.cedges[static_cast<std::size_t>(e)].tgt);
    }
    if (consumed == cg.cvertices.size()) return;
    std::ostringstream os;
    os << "coarsened graph is cyclic (construction bug); residual coarse vertices:";
    for (std::size_t v = 0; v < deg.size(); ++v)
        if (deg[v] > 0) os << " cv" << v;
    throw std::logic_error(os.str());
}

std::string cg_to_dot(const CoarsenedGraph& cg) {
    std::ostringstream os;
    os << "digraph coarsened_angle_" << cg.task << " {\n";
    for (const CoarseVertex& cv : cg.cvertices) {
        os << "  cv" << cv.id << " [label=\"cv" << cv.id << " p" << cv.patch << " (";
        for (std::size_t i = 0; i < cv.members.size(); ++i)
            os << (i ? "," : "") << cv.members[i];
        os << ")\"];\n";
    }
    for (const CoarseEdge& e : cg.cedges) os << "  cv" << e.src << " -> cv" << e.tgt << ";\n";
    os << "}\n";
    return os.str();
}

}  // namespace patchsweep
