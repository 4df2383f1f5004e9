// Mesh representation, patch decomposition and discrete-ordinate direction sets.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace patchsweep {

using CellId = std::int32_t;
inline constexpr CellId kBoundary = -1;

struct Face {
    double area = 0.0;
    std::array<double, 3> normal{0.0, 0.0, 0.0};  // outward unit vector
    CellId neighbor = kBoundary;
};

struct Cell {
    CellId id = 0;
    std::array<double, 3> centroid{0.0, 0.0, 0.0};
    double volume = 1.0;
    std::vector<Face> faces;
};

struct StructuredMeshSpec {
    std::array<std::int64_t, 3> dims{1, 1, 1};           // cells per axis
    std::array<double, 3> cell_extent{1.0, 1.0, 1.0};    // cell edge lengths
};

// Unified cell/face representation. Structured meshes are lowered into it;
// structured-ness survives only as metadata.
struct UnstructuredMesh {
    std::vector<Cell> cells;
    std::optional<StructuredMeshSpec> structured;

    std::size_t cell_count() const { return cells.size(); }
};

struct Patch {
    int patch_id = 0;
    std::vector<CellId> local_cells;   // ascending
    std::vector<CellId> ghost_cells;   // ascending, owned by other patches
    std::unordered_map<CellId, int> owner_of_ghost;
};

struct Decomposition {
    std::vector<Patch> patches;
    std::vector<int> patch_of_cell;
    std::vector<std::vector<int>> patch_adjacency;  // symmetric, ascending

    int patch_count() const { return static_cast<int>(patches.size()); }
};

struct DirectionSet {
    struct Ordinate {
        std::array<double, 3> omega{0.0, 0.0, 0.0};  // unit vector
        double weight = 0.0;
    };
    std::vector<Ordinate> ordinates;
    int order = 0;  // Sn order n

    int count() const { return static_cast<int>(ordinates.size()); }
};

UnstructuredMesh build_structured_mesh(const StructuredMeshSpec& spec);

// Throws std::invalid_argument when an invariant is violated (asymmetric
// adjacency, non-unit normal, non-dense ids, ...).
void validate_mesh(const UnstructuredMesh& mesh);

UnstructuredMesh mesh_from_json(const std::string& text);
std::string mesh_to_json(const UnstructuredMesh& mesh);
UnstructuredMesh load_mesh_file(const std::string& path);

Decomposition decompose_structured(const UnstructuredMesh& mesh,
                                   std::array<std::int64_t, 3> patch_dims);
Decomposition decompose_unstructured(const UnstructuredMesh& mesh,
                                     std::int64_t target_cells_per_patch,
                                     std::uint64_t seed = 0);
void validate_decomposition(const UnstructuredMesh& mesh, const Decomposition& d);

DirectionSet level_symmetric_directions(int n);

}  // namespace patchsweep
