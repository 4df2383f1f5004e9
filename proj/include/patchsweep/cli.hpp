// CLI entry points; the binary in tools/ is a thin flag parser over these.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "patchsweep/runtime.hpp"
#include "patchsweep/solver.hpp"

namespace patchsweep::cli {

struct RunSpec {
    // Mesh source: exactly one of dims / mesh_file.
    std::vector<std::int64_t> dims;     // structured cells per axis
    std::vector<double> extent{1.0, 1.0, 1.0};
    std::string mesh_file;

    std::vector<std::int64_t> patch_dims;  // structured patch size
    std::int64_t patch_cells = 0;          // unstructured target cells per patch
    int sn = 2;
    std::uint64_t grain = 0;   // 0 = module default (1000 structured, 64 unstructured)
    bool grain_set = false;
    std::string priority = "slbd";
    int procs = 1;
    int workers = 1;
    std::string mode = "dag";
    std::string term = "workload";
    double tol = 1e-8;
    int max_iters = 200;
    std::uint64_t seed = 0;
    bool deterministic = false;
    std::string xs_file;
    std::string fields_out;
    std::string metrics_out;
    std::string dot_dir;  // when set, dump subgraph/CG DOT files here
};

int cmd_run(const RunSpec& spec);
int cmd_verify(const RunSpec& spec);
int cmd_bench(const RunSpec& spec, const std::string& axis,
              const std::vector<std::string>& values, const std::string& csv_out);

int run_cli(int argc, const char* const* argv);

}  // namespace patchsweep::cli
