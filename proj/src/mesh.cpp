#include "patchsweep/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace patchsweep {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Face order of a hexahedral cell: -x, +x, -y, +y, -z, +z.
const std::array<std::array<double, 3>, 6> kAxisNormals = {{
    {-1.0, 0.0, 0.0}, {1.0, 0.0, 0.0},
    {0.0, -1.0, 0.0}, {0.0, 1.0, 0.0},
    {0.0, 0.0, -1.0}, {0.0, 0.0, 1.0},
}};

}  // namespace

UnstructuredMesh build_structured_mesh(const StructuredMeshSpec& spec) {
    for (int a = 0; a < 3; ++a) {
        if (spec.dims[a] < 1) throw std::invalid_argument("structured mesh: dims must be >= 1");
        if (!(spec.cell_extent[a] > 0.0))
            throw std::invalid_argument("structured mesh: cell extents must be > 0");
    }
    const auto [nx, ny, nz] = spec.dims;
    if (nx > std::numeric_limits<CellId>::max() / ny ||
        nx * ny > std::numeric_limits<CellId>::max() / nz)
        throw std::length_error("structured mesh: cell count exceeds addressable range");
    const std::int64_t total = nx * ny * nz;

    const auto [ex, ey, ez] = spec.cell_extent;
    const double volume = ex * ey * ez;
    const std::array<double, 6> areas = {ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey};

    UnstructuredMesh mesh;
    mesh.structured = spec;
    mesh.cells.resize(static_cast<std::size_t>(total));
    auto cell_at = [&](std::int64_t i, std::int64_t j, std::int64_t k) -> CellId {
        return static_cast<CellId>(i + nx * (j + ny * k));
    };
    for (std::int64_t k = 0; k < nz; ++k) {
        for (std::int64_t j = 0; j < ny; ++j) {
            for (std::int64_t i = 0; i < nx; ++i) {
                Cell& c = mesh.cells[static_cast<std::size_t>(cell_at(i, j, k))];
                c.id = cell_at(i, j, k);
                c.centroid = {(i + 0.5) * ex, (j + 0.5) * ey, (k + 0.5) * ez};
                c.volume = volume;
                c.faces.resize(6);
                const std::array<CellId, 6> neighbors = {
                    i > 0 ? cell_at(i - 1, j, k) : kBoundary,
                    i + 1 < nx ? cell_at(i + 1, j, k) : kBoundary,
                    j > 0 ? cell_at(i, j - 1, k) : kBoundary,
                    j + 1 < ny ? cell_at(i, j + 1, k) : kBoundary,
                    k > 0 ? cell_at(i, j, k - 1) : kBoundary,
                    k + 1 < nz ? cell_at(i, j, k + 1) : kBoundary,
                };
                for (int f = 0; f < 6; ++f) {
                    c.faces[f].area = areas[f];
                    c.faces[f].normal = kAxisNormals[f];
                    c.faces[f].neighbor = neighbors[f];
                }
            }
        }
    }
    return mesh;
}

void validate_mesh(const UnstructuredMesh& mesh) {
    const std::size_t n = mesh.cells.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Cell& c = mesh.cells[i];
        if (static_cast<std::size_t>(c.id) != i)
            throw std::invalid_argument("mesh: cell ids must be dense 0..N-1");
        if (!(c.volume > 0.0)) throw std::invalid_argument("mesh: cell volume must be > 0");
        for (const Face& f : c.faces) {
            if (!(f.area > 0.0)) throw std::invalid_argument("mesh: face area must be > 0");
            const double len = std::sqrt(f.normal[0] * f.normal[0] + f.normal[1] * f.normal[1] +
                                         f.normal[2] * f.normal[2]);
            if (std::abs(len - 1.0) > 1e-9)
                throw std::invalid_argument("mesh: face normal must be a unit vector");
            if (f.neighbor == kBoundary) continue;
            if (f.neighbor < 0 || static_cast<std::size_t>(f.neighbor) >= n)
                throw std::invalid_argument("mesh: face neighbor out of range");
            const Cell& other = mesh.cells[static_cast<std::size_t>(f.neighbor)];
            const bool back = std::any_of(other.faces.begin(), other.faces.end(),
                                          [&](const Face& g) { return g.neighbor == c.id; });
            if (!back) throw std::invalid_argument("mesh: face adjacency is not symmetric");
        }
    }
}

UnstructuredMesh mesh_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    if (!j.contains("cells") || !j["cells"].is_array())
        throw std::invalid_argument("mesh json: missing cells array");
    UnstructuredMesh mesh;
    mesh.cells.resize(j["cells"].size());
    for (const auto& jc : j["cells"]) {
        const CellId id = jc.at("id").get<CellId>();
        if (id < 0 || static_cast<std::size_t>(id) >= mesh.cells.size())
            throw std::invalid_argument("mesh json: cell id out of range");
        Cell& c = mesh.cells[static_cast<std::size_t>(id)];
        c.id = id;
        const auto& cen = jc.at("centroid");
        c.centroid = {cen.at(0).get<double>(), cen.at(1).get<double>(), cen.at(2).get<double>()};
        c.volume = jc.value("volume", 1.0);
        for (const auto& jf : jc.at("faces")) {
            Face f;
            f.area = jf.at("area").get<double>();
            const auto& nrm = jf.at("normal");
            f.normal = {nrm.at(0).get<double>(), nrm.at(1).get<double>(), nrm.at(2).get<double>()};
            const auto& nb = jf.at("neighbor");
            if (nb.is_string()) {
                if (nb.get<std::string>() != "BOUNDARY")
                    throw std::invalid_argument("mesh json: bad neighbor string");
                f.neighbor = kBoundary;
            } else {
                f.neighbor = nb.get<CellId>();
                if (f.neighbor < 0) f.neighbor = kBoundary;
            }
            c.faces.push_back(f);
        }
    }
    validate_mesh(mesh);
    return mesh;
}

std::string mesh_to_json(const UnstructuredMesh& mesh) {
    nlohmann::json cells = nlohmann::json::array();
    for (const Cell& c : mesh.cells) {
        nlohmann::json faces = nlohmann::json::array();
        for (const Face& f : c.faces) {
            nlohmann::json jf = {{"area", f.area},
                                 {"normal", {f.normal[0], f.normal[1], f.normal[2]}}};
            if (f.neighbor == kBoundary)
                jf["neighbor"] = "BOUNDARY";
            else
                jf["neighbor"] = f.neighbor;
            faces.push_back(std::move(jf));
        }
        cells.push_back({{"id", c.id},
                         {"centroid", {c.centroid[0], c.centroid[1], c.centroid[2]}},
                         {"volume", c.volume},
                         {"faces", std::move(faces)}});
    }
    return nlohmann::json{{"cells", std::move(cells)}}.dump();
}

UnstructuredMesh load_mesh_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open mesh file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return mesh_from_json(ss.str());
}

namespace {

// Ghosts, owners and adjacency derived from the local cell sets.
void finish_decomposition(const UnstructuredMesh& mesh, Decomposition& d) {
    const int np = d.patch_count();
    d.patch_adjacency.assign(static_cast<std::size_t>(np), {});
    std::vector<std::set<int>> adj(static_cast<std::size_t>(np));
    for (Patch& p : d.patches) {
        std::set<CellId> ghosts;
        for (CellId c : p.local_cells) {
            for (const Face& f : mesh.cells[static_cast<std::size_t>(c)].faces) {
                if (f.neighbor == kBoundary) continue;
                const int owner = d.patch_of_cell[static_cast<std::size_t>(f.neighbor)];
                if (owner == p.patch_id) continue;
                ghosts.insert(f.neighbor);
                p.owner_of_ghost[f.neighbor] = owner;
                adj[static_cast<std::size_t>(p.patch_id)].insert(owner);
            }
        }
        p.ghost_cells.assign(ghosts.begin(), ghosts.end());
    }
    for (int p = 0; p < np; ++p)
        d.patch_adjacency[static_cast<std::size_t>(p)].assign(adj[static_cast<std::size_t>(p)].begin(),
                                                              adj[static_cast<std::size_t>(p)].end());
}

}  // namespace

Decomposition decompose_structured(const UnstructuredMesh& mesh,
                                   std::array<std::int64_t, 3> patch_dims) {
    if (!mesh.structured)
        throw std::invalid_argument("decompose_structured: mesh carries no structured metadata");
    for (int a = 0; a < 3; ++a)
        if (patch_dims[a] < 1)
            throw std::invalid_argument("decompose_structured: patch dims must be >= 1");

    const auto dims = mesh.structured->dims;
    std::array<std::int64_t, 3> blocks{};
    for (int a = 0; a < 3; ++a) blocks[a] = (dims[a] + patch_dims[a] - 1) / patch_dims[a];

    Decomposition d;
    d.patch_of_cell.assign(mesh.cell_count(), -1);
    const std::int64_t np = blocks[0] * blocks[1] * blocks[2];
    d.patches.resize(static_cast<std::size_t>(np));
    for (std::int64_t bk = 0; bk < blocks[2]; ++bk) {
        for (std::int64_t bj = 0; bj < blocks[1]; ++bj) {
            for (std::int64_t bi = 0; bi < blocks[0]; ++bi) {
                const int pid = static_cast<int>(bi + blocks[0] * (bj + blocks[1] * bk));
                Patch& p = d.patches[static_cast<std::size_t>(pid)];
                p.patch_id = pid;
                for (std::int64_t k = bk * patch_dims[2]; k < std::min((bk + 1) * patch_dims[2], dims[2]); ++k)
                    for (std::int64_t j = bj * patch_dims[1]; j < std::min((bj + 1) * patch_dims[1], dims[1]); ++j)
                        for (std::int64_t i = bi * patch_dims[0]; i < std::min((bi + 1) * patch_dims[0], dims[0]); ++i) {
                            const CellId c = static_cast<CellId>(i + dims[0] * (j + dims[1] * k));
                            p.local_cells.push_back(c);
                            d.patch_of_cell[static_cast<std::size_t>(c)] = pid;
                        }
                std::sort(p.local_cells.begin(), p.local_cells.end());
            }
        }
    }
    finish_decomposition(mesh, d);
    return d;
}

Decomposition decompose_unstructured(const UnstructuredMesh& mesh,
                                     std::int64_t target_cells_per_patch, std::uint64_t) {
    if (mesh.cells.empty()) throw std::invalid_argument("decompose_unstructured: empty mesh");
    if (target_cells_per_patch < 1)
        throw std::invalid_argument("decompose_unstructured: target must be >= 1");

    // Greedy BFS growth from the lowest unassigned cell id; deterministic for
    // a given mesh and target. The seed is reserved for a randomized variant.
    Decomposition d;
    d.patch_of_cell.assign(mesh.cell_count(), -1);
    CellId cursor = 0;
    while (true) {
        while (cursor < static_cast<CellId>(mesh.cell_count()) &&
               d.patch_of_cell[static_cast<std::size_t>(cursor)] >= 0)
            ++cursor;
        if (cursor >= static_cast<CellId>(mesh.cell_count())) break;

        Patch p;
        p.patch_id = d.patch_count();
        std::deque<CellId> frontier{cursor};
        d.patch_of_cell[static_cast<std::size_t>(cursor)] = p.patch_id;
        while (!frontier.empty() &&
               static_cast<std::int64_t>(p.local_cells.size()) < target_cells_per_patch) {
            const CellId c = frontier.front();
            frontier.pop_front();
            p.local_cells.push_back(c);
            for (const Face& f : mesh.cells[static_cast<std::size_t>(c)].faces) {
                if (f.neighbor == kBoundary) continue;
                if (d.patch_of_cell[static_cast<std::size_t>(f.neighbor)] >= 0) continue;
                if (static_cast<std::int64_t>(p.local_cells.size() + frontier.size()) >=
                    target_cells_per_patch)
                    continue;
                d.patch_of_cell[static_cast<std::size_t>(f.neighbor)] = p.patch_id;
                frontier.push_back(f.neighbor);
            }
        }
        std::sort(p.local_cells.begin(), p.local_cells.end());
        d.patches.push_back(std::move(p));
    }
    finish_decomposition(mesh, d);
    return d;
}

void validate_decomposition(const UnstructuredMesh& mesh, const Decomposition& d) {
    std::vector<int> seen(mesh.cell_count(), 0);
    for (const Patch& p : d.patches) {
        for (CellId c : p.local_cells) {
            if (c < 0 || static_cast<std::size_t>(c) >= mesh.cell_count())
                throw std::invalid_argument("decomposition: local cell out of range");
            if (seen[static_cast<std::size_t>(c)]++)
                throw std::invalid_argument("decomposition: local cell sets overlap");
            if (d.patch_of_cell[static_cast<std::size_t>(c)] != p.patch_id)
                throw std::invalid_argument("decomposition: patch_of_cell inconsistent");
        }
        for (CellId g : p.ghost_cells) {
            if (std::binary_search(p.local_cells.begin(), p.local_cells.end(), g))
                throw std::invalid_argument("decomposition: ghost cell is also local");
            const auto it = p.owner_of_ghost.find(g);
            if (it == p.owner_of_ghost.end() ||
                it->second != d.patch_of_cell[static_cast<std::size_t>(g)])
                throw std::invalid_argument("decomposition: ghost owner wrong");
        }
        // Ghost closure: every cut-face neighbor appears with correct owner.
        for (CellId c : p.local_cells)
            for (const Face& f : mesh.cells[static_cast<std::size_t>(c)].faces) {
                if (f.neighbor == kBoundary) continue;
                if (d.patch_of_cell[static_cast<std::size_t>(f.neighbor)] == p.patch_id) continue;
                if (!std::binary_search(p.ghost_cells.begin(), p.ghost_cells.end(), f.neighbor))
                    throw std::invalid_argument("decomposition: missing ghost cell");
            }
    }
    for (std::size_t c = 0; c < mesh.cell_count(); ++c)
        if (!seen[c]) throw std::invalid_argument("decomposition: cell not covered by any patch");
    for (int p = 0; p < d.patch_count(); ++p)
        for (int q : d.patch_adjacency[static_cast<std::size_t>(p)]) {
            const auto& back = d.patch_adjacency[static_cast<std::size_t>(q)];
            if (!std::binary_search(back.begin(), back.end(), p))
                throw std::invalid_argument("decomposition: patch adjacency not symmetric");
        }
}

DirectionSet level_symmetric_directions(int n) {
    if (n < 2 || n % 2 != 0)
        throw std::invalid_argument("level_symmetric_directions: order must be even and >= 2");

    // One triangular point set per octant at equal-angle latitudes, mirrored
    // over all 8 sign octants; uniform weights. Only the sign pattern matters
    // for sweep ordering on structured meshes.
    const int levels = n / 2;
    std::vector<std::array<double, 3>> octant;
    for (int i = 1; i <= levels; ++i) {
        const double theta = kPi / 2.0 * i / (levels + 1);
        for (int j = 1; j <= i; ++j) {
            const double phi = kPi / 2.0 * (j - 0.5) / i;
            octant.push_back({std::sin(theta) * std::cos(phi),
                              std::sin(theta) * std::sin(phi), std::cos(theta)});
        }
    }
    DirectionSet dirs;
    dirs.order = n;
    const int total = n * (n + 2);
    const double w = 1.0 / total;
    for (int sz = 0; sz < 2; ++sz)
        for (int sy = 0; sy < 2; ++sy)
            for (int sx = 0; sx < 2; ++sx)
                for (const auto& base : octant)
                    dirs.ordinates.push_back({{sx ? -base[0] : base[0], sy ? -base[1] : base[1],
                                               sz ? -base[2] : base[2]},
                                              w});
    return dirs;
}

}  // namespace patchsweep
