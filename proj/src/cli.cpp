#include "patchsweep/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "patchsweep/coarsen.hpp"

namespace patchsweep::cli {

namespace {

struct Problem {
    UnstructuredMesh mesh;
    Decomposition decomp;
    DirectionSet dirs;
    CrossSections xs;
    SolverConfig solver_cfg;
    RuntimeConfig runtime_cfg;
};

Problem setup(const RunSpec& spec) {
    Problem pr;
    if (!spec.dims.empty() && !spec.mesh_file.empty())
        throw std::invalid_argument("give either --dims or --mesh-file, not both");
    if (spec.dims.empty() && spec.mesh_file.empty())
        throw std::invalid_argument("a mesh source is required (--dims or --mesh-file)");

    if (!spec.dims.empty()) {
        if (spec.dims.size() != 3) throw std::invalid_argument("--dims needs three values");
        StructuredMeshSpec ms;
        ms.dims = {spec.dims[0], spec.dims[1], spec.dims[2]};
        if (spec.extent.size() != 3) throw std::invalid_argument("--extent needs three values");
        ms.cell_extent = {spec.extent[0], spec.extent[1], spec.extent[2]};
        pr.mesh = build_structured_mesh(ms);
        std::array<std::int64_t, 3> pd = {20, 20, 20};
        if (!spec.patch_dims.empty()) {
            if (spec.patch_dims.size() != 3) throw std::invalid_argument("--patch needs three values");
            pd = {spec.patch_dims[0], spec.patch_dims[1], spec.patch_dims[2]};
        }
        pr.decomp = decompose_structured(pr.mesh, pd);
    } else {
        pr.mesh = load_mesh_file(spec.mesh_file);
        const std::int64_t target = spec.patch_cells > 0 ? spec.patch_cells : 500;
        pr.decomp = decompose_unstructured(pr.mesh, target, spec.seed);
    }

    pr.dirs = level_symmetric_directions(spec.sn);

    if (!spec.xs_file.empty()) {
        std::ifstream in(spec.xs_file);
        if (!in) throw std::runtime_error("cannot open cross-section file: " + spec.xs_file);
        std::stringstream ss;
        ss << in.rdbuf();
        pr.xs = xs_from_json(ss.str(), pr.mesh.cell_count());
    } else {
        pr.xs = CrossSections::uniform(pr.mesh.cell_count(), 1.0, 0.5, 1.0);
    }

    pr.solver_cfg.tol = spec.tol;
    pr.solver_cfg.max_iters = spec.max_iters;

    pr.runtime_cfg.processes = spec.procs;
    pr.runtime_cfg.workers = spec.workers;
    pr.runtime_cfg.grain = spec.grain_set ? spec.grain
                                          : (pr.mesh.structured ? 1000u : 64u);
    pr.runtime_cfg.strategy = strategy_from_string(spec.priority);
    pr.runtime_cfg.termination = termination_from_string(spec.term);
    pr.runtime_cfg.mode = sweep_mode_from_string(spec.mode);
    pr.runtime_cfg.seed = spec.seed;
    pr.runtime_cfg.deterministic = spec.deterministic;
    return pr;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

void dump_dot(const Problem& pr, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const SweepGraphs graphs = SweepGraphs::build(pr.mesh, pr.decomp, pr.dirs,
                                                  pr.runtime_cfg.strategy, pr.runtime_cfg.processes);
    for (int a = 0; a < pr.dirs.count(); ++a)
        for (int p = 0; p < pr.decomp.patch_count(); ++p) {
            std::ostringstream name;
            name << dir << "/subgraph_a" << a << "_p" << p << ".dot";
            write_file(name.str(), subgraph_to_dot(
                                        graphs.subgraphs[static_cast<std::size_t>(a)][static_cast<std::size_t>(p)]));
        }
    if (pr.runtime_cfg.mode == SweepMode::Cg) {
        // One recorded sweep provides the clusters behind each angle's CG.
        RuntimeConfig rc = pr.runtime_cfg;
        rc.mode = SweepMode::Dag;
        rc.record_trace = true;
        const std::vector<double> s0(pr.mesh.cell_count(), 0.0);
        const VertexKernel kernel = [&](CellId cell, int angle,
                                        std::span<const double> face_in) {
            const Cell& c = pr.mesh.cells[static_cast<std::size_t>(cell)];
            return transport_kernel(c, pr.dirs.ordinates[static_cast<std::size_t>(angle)].omega,
                                    pr.xs.sigma_t[static_cast<std::size_t>(cell)],
                                    pr.xs.q_ext[static_cast<std::size_t>(cell)],
                                    s0[static_cast<std::size_t>(cell)], face_in);
        };
        const SweepResult r = run_sweep(pr.mesh, pr.decomp, pr.dirs, rc, kernel, graphs);
        for (int a = 0; a < pr.dirs.count(); ++a) {
            const FineGraphView view =
                fine_graph_view(pr.mesh, pr.decomp, pr.dirs.ordinates[static_cast<std::size_t>(a)].omega);
            std::vector<ClusterTrace> traces;
            for (const ClusterTrace& t : r.traces)
                if (t.task == a) traces.push_back(t);
            std::ostringstream name;
            name << dir << "/cg_a" << a << ".dot";
            write_file(name.str(), cg_to_dot(build_coarsened_graph(view, traces, a)));
        }
    }
}

}  // namespace

int cmd_run(const RunSpec& spec) {
    try {
        const Problem pr = setup(spec);
        if (!spec.dot_dir.empty()) dump_dot(pr, spec.dot_dir);

        RuntimeMetrics metrics;
        const auto t0 = std::chrono::steady_clock::now();
        const SolutionState state = source_iteration(pr.mesh, pr.decomp, pr.dirs, pr.xs,
                                                     pr.solver_cfg, pr.runtime_cfg, &metrics);
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        if (!spec.fields_out.empty()) write_file(spec.fields_out, fields_to_json(state));
        if (!spec.metrics_out.empty()) write_file(spec.metrics_out, metrics_to_json(metrics));
        std::cout << "iterations=" << state.iterations << " residual=" << state.residual
                  << " wall_s=" << wall << " streams=" << metrics.streams_sent
                  << (state.converged ? "" : " (unconverged)") << "\n";
        return state.converged ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_verify(const RunSpec& spec) {
    try {
        const Problem pr = setup(spec);
        const std::size_t vertices = pr.mesh.cell_count() * static_cast<std::size_t>(pr.dirs.count());
        if (vertices > 1000000)
            throw std::invalid_argument("verify guard: more than 1e6 (cell, angle) vertices");

        const SolutionState got = source_iteration(pr.mesh, pr.decomp, pr.dirs, pr.xs,
                                                   pr.solver_cfg, pr.runtime_cfg);
        const SolutionState want =
            source_iteration_oracle(pr.mesh, pr.dirs, pr.xs, pr.solver_cfg);

        for (int m = 0; m < pr.dirs.count(); ++m)
            for (std::size_t c = 0; c < pr.mesh.cell_count(); ++c)
                if (got.psi[static_cast<std::size_t>(m)][c] != want.psi[static_cast<std::size_t>(m)][c]) {
                    std::cout << "DIVERGED at (cell " << c << ", angle " << m
                              << "): runtime=" << got.psi[static_cast<std::size_t>(m)][c]
                              << " oracle=" << want.psi[static_cast<std::size_t>(m)][c] << "\n";
                    return 1;
                }
        std::cout << "verified: runtime matches sequential oracle bitwise ("
                  << pr.mesh.cell_count() << " cells, " << pr.dirs.count() << " angles)\n";
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int cmd_bench(const RunSpec& spec, const std::string& axis,
              const std::vector<std::string>& values, const std::string& csv_out) {
    try {
        std::ostringstream csv;
        csv << "axis,value,wall_ns,graph_op_ns,pack_unpack_ns,kernel_ns,comm_ns,idle_ns\n";
        for (const std::string& value : values) {
            RunSpec point = spec;
            if (axis == "grain") {
                point.grain = std::stoull(value);
                point.grain_set = true;
            } else if (axis == "patch") {
                point.patch_dims.clear();
                std::stringstream ss(value);
                std::string part;
                while (std::getline(ss, part, 'x')) point.patch_dims.push_back(std::stoll(part));
                point.patch_cells = point.patch_dims.size() == 1 ? point.patch_dims[0] : 0;
            } else if (axis == "strategy") {
                point.priority = value;
            } else if (axis == "workers") {
                point.workers = std::stoi(value);
            } else {
                throw std::invalid_argument("bench axis must be grain|patch|strategy|workers");
            }

            const Problem pr = setup(point);
            RuntimeMetrics metrics;
            const auto t0 = std::chrono::steady_clock::now();
            source_iteration(pr.mesh, pr.decomp, pr.dirs, pr.xs, pr.solver_cfg, pr.runtime_cfg,
                             &metrics);
            const std::int64_t wall = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                          std::chrono::steady_clock::now() - t0)
                                          .count();
            WorkerMetrics sum;
            for (const WorkerMetrics& w : metrics.per_worker) {
                sum.graph_op_ns += w.graph_op_ns;
                sum.pack_unpack_ns += w.pack_unpack_ns;
                sum.kernel_ns += w.kernel_ns;
                sum.comm_ns += w.comm_ns;
                sum.idle_ns += w.idle_ns;
            }
            csv << axis << "," << value << "," << wall << "," << sum.graph_op_ns << ","
                << sum.pack_unpack_ns << "," << sum.kernel_ns << "," << sum.comm_ns << ","
                << sum.idle_ns << "\n";
        }
        if (csv_out.empty())
            std::cout << csv.str();
        else
            write_file(csv_out, csv.str());
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

namespace {

void add_common_flags(CLI::App* cmd, RunSpec& spec) {
    cmd->add_option("--dims", spec.dims, "structured mesh cells per axis (x,y,z)")
        ->delimiter(',');
    cmd->add_option("--extent", spec.extent, "cell edge lengths (x,y,z)")->delimiter(',');
    cmd->add_option("--mesh-file", spec.mesh_file, "unstructured mesh JSON file");
    cmd->add_option("--patch", spec.patch_dims, "structured patch size (x,y,z)")->delimiter(',');
    cmd->add_option("--patch-cells", spec.patch_cells, "unstructured target cells per patch");
    cmd->add_option("--sn", spec.sn, "discrete-ordinates order (even)");
    cmd->add_option("--grain", spec.grain, "vertex clustering grain (0 = unbounded)")
        ->each([&spec](const std::string&) { spec.grain_set = true; });
    cmd->add_option("--priority", spec.priority, "priority strategy: ldcp|bfs|slbd");
    cmd->add_option("--procs", spec.procs, "simulated process count");
    cmd->add_option("--workers", spec.workers, "worker threads per process");
    cmd->add_option("--mode", spec.mode, "sweep mode: dag|cg");
    cmd->add_option("--term", spec.term, "termination mode: workload|consensus");
    cmd->add_option("--tol", spec.tol, "source-iteration tolerance (max-norm on phi)");
    cmd->add_option("--max-iters", spec.max_iters, "source-iteration cap");
    cmd->add_option("--seed", spec.seed, "rng seed (latency schedules)");
    cmd->add_flag("--deterministic", spec.deterministic,
                  "single-threaded round-robin interleave with a virtual clock");
    cmd->add_option("--xs-file", spec.xs_file, "cross sections JSON");
    cmd->add_option("--fields-out", spec.fields_out, "write fields JSON here");
    cmd->add_option("--metrics-out", spec.metrics_out, "write metrics JSON here");
    cmd->add_option("--dump-dot", spec.dot_dir, "dump DOT graphs into this directory");
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"patch-centric data-driven transport sweeps"};
    app.require_subcommand(1);

    RunSpec run_spec;
    CLI::App* run = app.add_subcommand("run", "source iteration, fields and metrics out");
    add_common_flags(run, run_spec);

    RunSpec verify_spec;
    CLI::App* verify = app.add_subcommand("verify", "compare runtime against the sequential oracle");
    add_common_flags(verify, verify_spec);

    RunSpec bench_spec;
    std::string axis;
    std::vector<std::string> values;
    std::string csv_out;
    CLI::App* bench = app.add_subcommand("bench", "parameter sweep, CSV out");
    add_common_flags(bench, bench_spec);
    bench->add_option("--axis", axis, "grain|patch|strategy|workers")->required();
    bench->add_option("--values", values, "comma-separated axis values")
        ->delimiter(',')
        ->required();
    bench->add_option("--csv-out", csv_out, "write CSV here (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    if (run->parsed()) return cmd_run(run_spec);
    if (verify->parsed()) return cmd_verify(verify_spec);
    if (bench->parsed()) return cmd_bench(bench_spec, axis, values, csv_out);
    return 1;
}

}  // namespace patchsweep::cli
