#include "patchsweep/sweep_graph.hpp"

#include <algorithm>
#include <deque>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

namespace patchsweep {

namespace {

double dot(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

// Global fine adjacency for one direction: adj[u] = downwind neighbors of u,
// one entry per face, ascending cell then face order.
std::vector<std::vector<CellId>> downwind_adjacency(const UnstructuredMesh& mesh,
                                                    const std::array<double, 3>& omega) {
    std::vector<std::vector<CellId>> adj(mesh.cell_count());
    for (const Cell& c : mesh.cells)
        for (int f : downwind_faces(c, omega)) {
            const CellId nb = c.faces[static_cast<std::size_t>(f)].neighbor;
            if (nb != kBoundary) adj[static_cast<std::size_t>(c.id)].push_back(nb);
        }
    return adj;
}

std::vector<int> in_degrees(const std::vector<std::vector<CellId>>& adj) {
    std::vector<int> deg(adj.size(), 0);
    for (const auto& outs : adj)
        for (CellId v : outs) ++deg[static_cast<std::size_t>(v)];
    return deg;
}

}  // namespace

std::vector<int> upwind_faces(const Cell& cell, const std::array<double, 3>& omega) {
    std::vector<int> result;
    for (int f = 0; f < static_cast<int>(cell.faces.size()); ++f)
        if (dot(omega, cell.faces[static_cast<std::size_t>(f)].normal) < -kGrazingEps)
            result.push_back(f);
    return result;
}

std::vector<int> downwind_faces(const Cell& cell, const std::array<double, 3>& omega) {
    std::vector<int> result;
    for (int f = 0; f < static_cast<int>(cell.faces.size()); ++f)
        if (dot(omega, cell.faces[static_cast<std::size_t>(f)].normal) > kGrazingEps)
            result.push_back(f);
    return result;
}

PatchSubgraph build_patch_subgraph(const UnstructuredMesh& mesh, const Decomposition& decomp,
                                   int patch, int angle, const std::array<double, 3>& omega) {
    const Patch& p = decomp.patches.at(static_cast<std::size_t>(patch));
    PatchSubgraph g;
    g.patch_id = patch;
    g.angle = angle;
    g.local_cells = p.local_cells;
    for (int i = 0; i < g.local_count(); ++i) g.local_index[g.local_cells[static_cast<std::size_t>(i)]] = i;
    g.upwind_count.assign(static_cast<std::size_t>(g.local_count()), 0);
    g.down_local.resize(static_cast<std::size_t>(g.local_count()));
    g.down_remote.resize(static_cast<std::size_t>(g.local_count()));

    for (int i = 0; i < g.local_count(); ++i) {
        const CellId cid = g.local_cells[static_cast<std::size_t>(i)];
        const Cell& cell = mesh.cells[static_cast<std::size_t>(cid)];
        for (int f : upwind_faces(cell, omega)) {
            const CellId nb = cell.faces[static_cast<std::size_t>(f)].neighbor;
            if (nb == kBoundary) continue;  // boundary influx is a kernel input
            ++g.upwind_count[static_cast<std::size_t>(i)];
            const int owner = decomp.patch_of_cell[static_cast<std::size_t>(nb)];
            if (owner == patch)
                g.local_edges.emplace_back(nb, cid);
            else
                g.in_cut_edges.push_back({nb, cid, owner});
        }
        for (int f : downwind_faces(cell, omega)) {
            const CellId nb = cell.faces[static_cast<std::size_t>(f)].neighbor;
            if (nb == kBoundary) continue;
            const int owner = decomp.patch_of_cell[static_cast<std::size_t>(nb)];
            if (owner == patch) {
                g.down_local[static_cast<std::size_t>(i)].push_back(nb);
            } else {
                g.down_remote[static_cast<std::size_t>(i)].emplace_back(nb, owner);
                g.out_cut_edges.push_back({cid, nb, owner});
            }
        }
    }
    return g;
}

std::vector<CellId> detect_cycles(const UnstructuredMesh& mesh,
                                  const std::array<double, 3>& omega) {
    const auto adj = downwind_adjacency(mesh, omega);
    std::vector<int> deg = in_degrees(adj);
    std::deque<CellId> ready;
    for (std::size_t c = 0; c < deg.size(); ++c)
        if (deg[c] == 0) ready.push_back(static_cast<CellId>(c));
    std::size_t consumed = 0;
    while (!ready.empty()) {
        const CellId u = ready.front();
        ready.pop_front();
        ++consumed;
        for (CellId v : adj[static_cast<std::size_t>(u)])
            if (--deg[static_cast<std::size_t>(v)] == 0) ready.push_back(v);
    }
    std::vector<CellId> residual;
    if (consumed == mesh.cell_count()) return residual;
    for (std::size_t c = 0; c < deg.size(); ++c)
        if (deg[c] > 0) residual.push_back(static_cast<CellId>(c));
    return residual;
}

Strategy strategy_from_string(std::string_view name) {
    if (name == "ldcp") return Strategy::Ldcp;
    if (name == "bfs") return Strategy::Bfs;
    if (name == "slbd") return Strategy::Slbd;
    throw std::invalid_argument("unknown priority strategy: " + std::string(name));
}

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Ldcp: return "ldcp";
        case Strategy::Bfs: return "bfs";
        case Strategy::Slbd: return "slbd";
    }
    return "?";
}

namespace {

// Kahn order of the global angle graph; throws when cyclic.
std::vector<CellId> topological_order(const std::vector<std::vector<CellId>>& adj) {
    std::vector<int> deg = in_degrees(adj);
    std::deque<CellId> ready;
    for (std::size_t c = 0; c < deg.size(); ++c)
        if (deg[c] == 0) ready.push_back(static_cast<CellId>(c));
    std::vector<CellId> order;
    order.reserve(adj.size());
    while (!ready.empty()) {
        const CellId u = ready.front();
        ready.pop_front();
        order.push_back(u);
        for (CellId v : adj[static_cast<std::size_t>(u)])
            if (--deg[static_cast<std::size_t>(v)] == 0) ready.push_back(v);
    }
    if (order.size() != adj.size())
        throw std::runtime_error("sweep graph contains a cycle; run detect_cycles for details");
    return order;
}

std::vector<std::int64_t> longest_distance_to_sink(const std::vector<std::vector<CellId>>& adj) {
    const auto order = topological_order(adj);
    std::vector<std::int64_t> dist(adj.size(), 0);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        for (CellId v : adj[static_cast<std::size_t>(*it)])
            dist[static_cast<std::size_t>(*it)] =
                std::max(dist[static_cast<std::size_t>(*it)], dist[static_cast<std::size_t>(v)] + 1);
    return dist;
}

std::vector<std::int64_t> bfs_depth_from_sources(const std::vector<std::vector<CellId>>& adj) {
    std::vector<int> deg = in_degrees(adj);
    std::vector<std::int64_t> depth(adj.size(), -1);
    std::deque<CellId> frontier;
    for (std::size_t c = 0; c < deg.size(); ++c)
        if (deg[c] == 0) {
            depth[c] = 0;
            frontier.push_back(static_cast<CellId>(c));
        }
    while (!frontier.empty()) {
        const CellId u = frontier.front();
        frontier.pop_front();
        for (CellId v : adj[static_cast<std::size_t>(u)])
            if (depth[static_cast<std::size_t>(v)] < 0) {
                depth[static_cast<std::size_t>(v)] = depth[static_cast<std::size_t>(u)] + 1;
                frontier.push_back(v);
            }
    }
    return depth;
}

}  // namespace

std::vector<std::int64_t> compute_vertex_priority(const UnstructuredMesh& mesh,
                                                  const Decomposition& decomp,
                                                  const std::vector<PatchSubgraph>& subgraphs,
                                                  const std::array<double, 3>& omega,
                                                  Strategy strategy) {
    const std::size_t n = mesh.cell_count();
    std::vector<std::int64_t> prio(n, 0);
    switch (strategy) {
        case Strategy::Ldcp: {
            prio = longest_distance_to_sink(downwind_adjacency(mesh, omega));
            break;
        }
        case Strategy::Bfs: {
            const auto depth = bfs_depth_from_sources(downwind_adjacency(mesh, omega));
            for (std::size_t c = 0; c < n; ++c) prio[c] = -depth[c];
            break;
        }
        case Strategy::Slbd: {
            for (const PatchSubgraph& g : subgraphs) {
                const std::size_t local = static_cast<std::size_t>(g.local_count());
                // Undirected local adjacency, by local index.
                std::vector<std::vector<int>> und(local);
                for (const auto& [u, v] : g.local_edges) {
                    const int iu = g.local_index.at(u), iv = g.local_index.at(v);
                    und[static_cast<std::size_t>(iu)].push_back(iv);
                    und[static_cast<std::size_t>(iv)].push_back(iu);
                }
                std::vector<char> boundary(local, 0);
                for (const auto& e : g.out_cut_edges)
                    boundary[static_cast<std::size_t>(g.local_index.at(e.u_local))] = 1;

                if (g.out_cut_edges.empty()) {
                    // No boundary to prefer; fall back to minus the local
                    // longest distance to a local sink.
                    std::vector<std::vector<CellId>> local_adj(local);
                    for (const auto& [u, v] : g.local_edges)
                        local_adj[static_cast<std::size_t>(g.local_index.at(u))].push_back(
                            static_cast<CellId>(g.local_index.at(v)));
                    const auto dist = longest_distance_to_sink(local_adj);
                    for (std::size_t i = 0; i < local; ++i)
                        prio[static_cast<std::size_t>(g.local_cells[i])] = -dist[i];
                    continue;
                }
                std::vector<std::int64_t> dist(local, -1);
                std::deque<int> frontier;
                for (std::size_t i = 0; i < local; ++i)
                    if (boundary[i]) {
                        dist[i] = 0;
                        frontier.push_back(static_cast<int>(i));
                    }
                while (!frontier.empty()) {
                    const int u = frontier.front();
                    frontier.pop_front();
                    for (int v : und[static_cast<std::size_t>(u)])
                        if (dist[static_cast<std::size_t>(v)] < 0) {
                            dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
                            frontier.push_back(v);
                        }
                }
                for (std::size_t i = 0; i < local; ++i) {
                    const std::int64_t dd = dist[i] >= 0 ? dist[i] : static_cast<std::int64_t>(local);
                    prio[static_cast<std::size_t>(g.local_cells[i])] = -dd;
                }
            }
            break;
        }
    }
    (void)decomp;
    return prio;
}

namespace {

// Patch condensation for one angle: edge p -> q iff any cut edge crosses.
std::vector<std::vector<CellId>> patch_condensation(const Decomposition& decomp,
                                                    const std::vector<PatchSubgraph>& subgraphs) {
    std::vector<std::set<int>> outs(static_cast<std::size_t>(decomp.patch_count()));
    for (const PatchSubgraph& g : subgraphs)
        for (const auto& e : g.out_cut_edges) outs[static_cast<std::size_t>(g.patch_id)].insert(e.tgt_patch);
    std::vector<std::vector<CellId>> adj(static_cast<std::size_t>(decomp.patch_count()));
    for (std::size_t p = 0; p < outs.size(); ++p)
        adj[p].assign(outs[p].begin(), outs[p].end());
    return adj;
}

bool is_acyclic(const std::vector<std::vector<CellId>>& adj) {
    std::vector<int> deg = in_degrees(adj);
    std::deque<CellId> ready;
    for (std::size_t c = 0; c < deg.size(); ++c)
        if (deg[c] == 0) ready.push_back(static_cast<CellId>(c));
    std::size_t consumed = 0;
    while (!ready.empty()) {
        const CellId u = ready.front();
        ready.pop_front();
        ++consumed;
        for (CellId v : adj[static_cast<std::size_t>(u)])
            if (--deg[static_cast<std::size_t>(v)] == 0) ready.push_back(v);
    }
    return consumed == adj.size();
}

// DFS from ascending node id; drops back edges (targets on the DFS stack).
std::vector<std::vector<CellId>> drop_back_edges(const std::vector<std::vector<CellId>>& adj) {
    const std::size_t n = adj.size();
    std::vector<std::vector<CellId>> kept(n);
    std::vector<int> state(n, 0);  // 0 unvisited, 1 on stack, 2 done
    for (std::size_t root = 0; root < n; ++root) {
        if (state[root]) continue;
        std::vector<std::pair<CellId, std::size_t>> stack{{static_cast<CellId>(root), 0}};
        state[root] = 1;
        while (!stack.empty()) {
            auto& [u, next] = stack.back();
            if (next < adj[static_cast<std::size_t>(u)].size()) {
                const CellId v = adj[static_cast<std::size_t>(u)][next++];
                if (state[static_cast<std::size_t>(v)] == 1) continue;  // back edge
                kept[static_cast<std::size_t>(u)].push_back(v);
                if (state[static_cast<std::size_t>(v)] == 0) {
                    state[static_cast<std::size_t>(v)] = 1;
                    stack.emplace_back(v, 0);
                }
            } else {
                state[static_cast<std::size_t>(u)] = 2;
                stack.pop_back();
            }
        }
    }
    return kept;
}

}  // namespace

std::vector<std::int64_t> compute_patch_priority(const Decomposition& decomp,
                                                 const std::vector<PatchSubgraph>& subgraphs,
                                                 Strategy strategy,
                                                 const std::vector<int>* process_of_patch) {
    const std::size_t np = static_cast<std::size_t>(decomp.patch_count());
    const auto cond = patch_condensation(decomp, subgraphs);
    const bool acyclic = is_acyclic(cond);

    const bool multi_process = [&] {
        if (!process_of_patch || process_of_patch->empty()) return false;
        return !std::all_of(process_of_patch->begin(), process_of_patch->end(),
                            [&](int r) { return r == process_of_patch->front(); });
    }();

    std::vector<std::int64_t> prio(np, 0);
    if (strategy == Strategy::Slbd && multi_process) {
        // Distance over patch adjacency to the nearest patch that borders a
        // different process partition.
        std::vector<std::int64_t> dist(np, -1);
        std::deque<int> frontier;
        for (std::size_t p = 0; p < np; ++p)
            for (int q : decomp.patch_adjacency[p])
                if ((*process_of_patch)[p] != (*process_of_patch)[static_cast<std::size_t>(q)]) {
                    dist[p] = 0;
                    frontier.push_back(static_cast<int>(p));
                    break;
                }
        while (!frontier.empty()) {
            const int u = frontier.front();
            frontier.pop_front();
            for (int v : decomp.patch_adjacency[static_cast<std::size_t>(u)])
                if (dist[static_cast<std::size_t>(v)] < 0) {
                    dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
                    frontier.push_back(v);
                }
        }
        for (std::size_t p = 0; p < np; ++p)
            prio[p] = -(dist[p] >= 0 ? dist[p] : static_cast<std::int64_t>(np));
        return prio;
    }

    if (!acyclic || strategy == Strategy::Bfs || strategy == Strategy::Slbd) {
        // Interleaved patch dependencies are normal; schedule by BFS depth
        // with DFS back edges ignored (shallower = earlier).
        const auto dag = acyclic ? cond : drop_back_edges(cond);
        const auto depth = bfs_depth_from_sources(dag);
        for (std::size_t p = 0; p < np; ++p) prio[p] = -depth[p];
        return prio;
    }
    return longest_distance_to_sink(cond);  // LDCP on the acyclic patch DAG
}

PriorityAssignment build_priorities(const UnstructuredMesh& mesh, const Decomposition& decomp,
                                    const std::vector<std::vector<PatchSubgraph>>& subgraphs_by_angle,
                                    const DirectionSet& dirs, Strategy strategy,
                                    const std::vector<int>* process_of_patch) {
    PriorityAssignment pa;
    pa.strategy = strategy;
    const int angles = dirs.count();
    pa.per_angle.resize(static_cast<std::size_t>(angles));
    pa.angle_priority.resize(static_cast<std::size_t>(angles));
    std::int64_t max_abs = 0;
    for (int a = 0; a < angles; ++a) {
        auto& ap = pa.per_angle[static_cast<std::size_t>(a)];
        ap.vertex = compute_vertex_priority(mesh, decomp, subgraphs_by_angle[static_cast<std::size_t>(a)],
                                            dirs.ordinates[static_cast<std::size_t>(a)].omega, strategy);
        ap.patch = compute_patch_priority(decomp, subgraphs_by_angle[static_cast<std::size_t>(a)],
                                          strategy, process_of_patch);
        for (std::int64_t v : ap.patch) max_abs = std::max(max_abs, std::abs(v));
        pa.angle_priority[static_cast<std::size_t>(a)] = angles - a;
    }
    pa.C = 1 + max_abs;
    return pa;
}

std::int64_t combined_priority(const PriorityAssignment& pa, int patch, int angle) {
    return pa.angle_priority.at(static_cast<std::size_t>(angle)) * pa.C +
           pa.per_angle.at(static_cast<std::size_t>(angle)).patch.at(static_cast<std::size_t>(patch));
}

std::string subgraph_to_dot(const PatchSubgraph& g) {
    std::ostringstream os;
    os << "digraph patch_" << g.patch_id << "_angle_" << g.angle << " {\n";
    for (CellId c : g.local_cells) os << "  c" << c << ";\n";
    for (const auto& [u, v] : g.local_edges) os << "  c" << u << " -> c" << v << ";\n";
    for (const auto& e : g.in_cut_edges)
        os << "  c" << e.u_remote << " -> c" << e.v_local << " [style=dashed, label=\"p"
           << e.src_patch << "\"];\n";
    for (const auto& e : g.out_cut_edges)
        os << "  c" << e.u_local << " -> c" << e.v_remote << " [style=dotted, label=\"p"
           << e.tgt_patch << "\"];\n";
    os << "}\n";
    return os.str();
}

}  // namespace patchsweep
