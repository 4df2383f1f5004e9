#include "patchsweep/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <queue>
#include <stdexcept>

#include "json.hpp"

namespace patchsweep {

CrossSections CrossSections::uniform(std::size_t cells, double st, double ss, double q) {
    CrossSections xs;
    xs.sigma_t.assign(cells, st);
    xs.sigma_s.assign(cells, ss);
    xs.q_ext.assign(cells, q);
    return xs;
}

void CrossSections::validate(const UnstructuredMesh& mesh) const {
    const std::size_t n = mesh.cell_count();
    if (sigma_t.size() != n || sigma_s.size() != n || q_ext.size() != n)
        throw std::invalid_argument("cross sections: per-cell array size mismatch");
    for (std::size_t c = 0; c < n; ++c) {
        if (sigma_t[c] < 0.0 || sigma_s[c] < 0.0 || q_ext[c] < 0.0)
            throw std::invalid_argument("cross sections: negative value");
        if (sigma_s[c] > sigma_t[c])
            throw std::invalid_argument("cross sections: sigma_s must not exceed sigma_t");
    }
}

CrossSections xs_from_json(const std::string& text, std::size_t cells) {
    const nlohmann::json j = nlohmann::json::parse(text);
    if (j.contains("uniform")) {
        const auto& u = j["uniform"];
        return CrossSections::uniform(cells, u.at("sigma_t").get<double>(),
                                      u.at("sigma_s").get<double>(), u.at("q_ext").get<double>());
    }
    if (j.contains("per_cell")) {
        const auto& p = j["per_cell"];
        CrossSections xs;
        xs.sigma_t = p.at("sigma_t").get<std::vector<double>>();
        xs.sigma_s = p.at("sigma_s").get<std::vector<double>>();
        xs.q_ext = p.at("q_ext").get<std::vector<double>>();
        if (xs.sigma_t.size() != cells)
            throw std::invalid_argument("cross sections: per-cell arrays must match cell count");
        return xs;
    }
    throw std::invalid_argument("cross sections json: expected 'uniform' or 'per_cell'");
}

std::string fields_to_json(const SolutionState& state) {
    nlohmann::json psi = nlohmann::json::array();
    for (const auto& a : state.psi) psi.push_back(a);
    return nlohmann::json{{"iterations", state.iterations},
                          {"residual", state.residual},
                          {"converged", state.converged},
                          {"phi", state.phi},
                          {"psi", std::move(psi)}}
        .dump();
}

double transport_kernel(const Cell& cell, const std::array<double, 3>& omega, double sigma_t,
                        double q_ext, double s_scat, std::span<const double> face_in) {
    double numerator = (q_ext + s_scat) * cell.volume;
    double denominator = sigma_t * cell.volume;
    // Fixed ascending face order keeps the sums bitwise schedule-independent.
    for (int f : upwind_faces(cell, omega)) {
        const Face& face = cell.faces[static_cast<std::size_t>(f)];
        const double alpha = std::abs(omega[0] * face.normal[0] + omega[1] * face.normal[1] +
                                      omega[2] * face.normal[2]) *
                             face.area;
        numerator += alpha * face_in[static_cast<std::size_t>(f)];
        denominator += alpha;
    }
    if (denominator == 0.0)
        throw std::runtime_error("transport kernel: degenerate cell " + std::to_string(cell.id) +
                                 " (zero removal and no incoming faces)");
    return numerator / denominator;
}

std::vector<double> update_scattering_source(const CrossSections& xs,
                                             const std::vector<double>& phi) {
    std::vector<double> s(phi.size());
    for (std::size_t c = 0; c < phi.size(); ++c) s[c] = xs.sigma_s[c] * phi[c];
    return s;
}

std::vector<double> scalar_flux(const DirectionSet& dirs,
                                const std::vector<std::vector<double>>& psi) {
    if (psi.empty()) return {};
    std::vector<double> phi(psi.front().size(), 0.0);
    for (int m = 0; m < dirs.count(); ++m) {
        const double w = dirs.ordinates[static_cast<std::size_t>(m)].weight;
        const auto& pm = psi[static_cast<std::size_t>(m)];
        for (std::size_t c = 0; c < phi.size(); ++c) phi[c] += w * pm[c];
    }
    return phi;
}

namespace {

// Kernel closure shared by the runtime and oracle paths.
VertexKernel make_kernel(const UnstructuredMesh& mesh, const DirectionSet& dirs,
                         const CrossSections& xs, const std::vector<double>& s_scat) {
    return [&mesh, &dirs, &xs, &s_scat](CellId cell, int angle,
                                        std::span<const double> face_in) -> double {
        const Cell& c = mesh.cells[static_cast<std::size_t>(cell)];
        return transport_kernel(c, dirs.ordinates[static_cast<std::size_t>(angle)].omega,
                                xs.sigma_t[static_cast<std::size_t>(cell)],
                                xs.q_ext[static_cast<std::size_t>(cell)],
                                s_scat[static_cast<std::size_t>(cell)], face_in);
    };
}

}  // namespace

SolutionState sequential_oracle_sweep(const UnstructuredMesh& mesh, const DirectionSet& dirs,
                                      const CrossSections& xs, const std::vector<double>& s_scat,
                                      double boundary_influx) {
    const std::size_t n = mesh.cell_count();
    SolutionState state;
    state.psi.assign(static_cast<std::size_t>(dirs.count()), std::vector<double>(n, 0.0));

    std::vector<double> face_in;
    for (int m = 0; m < dirs.count(); ++m) {
        const auto& omega = dirs.ordinates[static_cast<std::size_t>(m)].omega;
        std::vector<int> counts(n, 0);
        for (const Cell& c : mesh.cells)
            for (int f : upwind_faces(c, omega))
                if (c.faces[static_cast<std::size_t>(f)].neighbor != kBoundary)
                    ++counts[static_cast<std::size_t>(c.id)];

        std::priority_queue<CellId, std::vector<CellId>, std::greater<>> ready;
        for (std::size_t c = 0; c < n; ++c)
            if (counts[c] == 0) ready.push(static_cast<CellId>(c));

        auto& psi_m = state.psi[static_cast<std::size_t>(m)];
        std::size_t computed = 0;
        while (!ready.empty()) {
            const CellId cid = ready.top();
            ready.pop();
            const Cell& cell = mesh.cells[static_cast<std::size_t>(cid)];
            face_in.assign(cell.faces.size(), 0.0);
            for (int f : upwind_faces(cell, omega)) {
                const CellId nb = cell.faces[static_cast<std::size_t>(f)].neighbor;
                face_in[static_cast<std::size_t>(f)] =
                    nb == kBoundary ? boundary_influx : psi_m[static_cast<std::size_t>(nb)];
            }
            psi_m[static_cast<std::size_t>(cid)] =
                transport_kernel(cell, omega, xs.sigma_t[static_cast<std::size_t>(cid)],
                                 xs.q_ext[static_cast<std::size_t>(cid)],
                                 s_scat[static_cast<std::size_t>(cid)], face_in);
            ++computed;
            for (int f : downwind_faces(cell, omega)) {
                const CellId nb = cell.faces[static_cast<std::size_t>(f)].neighbor;
                if (nb != kBoundary && --counts[static_cast<std::size_t>(nb)] == 0) ready.push(nb);
            }
        }
        if (computed != n)
            throw std::runtime_error("oracle sweep: cycle detected for angle " + std::to_string(m));
    }
    state.phi = scalar_flux(dirs, state.psi);
    return state;
}

namespace {

template <typename SweepFn>
SolutionState iterate_to_fixed_point(const UnstructuredMesh& mesh, const DirectionSet& dirs,
                                     const CrossSections& xs, const SolverConfig& cfg,
                                     SweepFn&& sweep) {
    xs.validate(mesh);
    if (!(cfg.tol > 0.0)) throw std::invalid_argument("source iteration: tolerance must be > 0");
    const std::size_t n = mesh.cell_count();
    SolutionState state;
    state.phi.assign(n, 0.0);

    for (int iter = 1; iter <= cfg.max_iters; ++iter) {
        const std::vector<double> s_scat = update_scattering_source(xs, state.phi);
        std::vector<std::vector<double>> psi = sweep(s_scat, iter);
        std::vector<double> phi = scalar_flux(dirs, psi);

        double residual = 0.0;
        for (std::size_t c = 0; c < n; ++c)
            residual = std::max(residual, std::abs(phi[c] - state.phi[c]));

        state.psi = std::move(psi);
        state.phi = std::move(phi);
        state.iterations = iter;
        state.residual = residual;
        if (residual < cfg.tol) {
            state.converged = true;
            break;
        }
    }
    return state;
}

}  // namespace

SolutionState source_iteration(const UnstructuredMesh& mesh, const Decomposition& decomp,
                               const DirectionSet& dirs, const CrossSections& xs,
                               const SolverConfig& solver_cfg, const RuntimeConfig& runtime_cfg,
                               RuntimeMetrics* metrics_out, AuditReport* last_audit_out) {
    RuntimeConfig rc = runtime_cfg;
    rc.boundary_influx = solver_cfg.boundary_influx;

    const SweepGraphs graphs = SweepGraphs::build(mesh, decomp, dirs, rc.strategy, rc.processes);

    std::vector<CoarsenedGraph> cgs;
    RuntimeMetrics metrics;
    const SolutionState state = iterate_to_fixed_point(
        mesh, dirs, xs, solver_cfg,
        [&](const std::vector<double>& s_scat, int iter) {
            const VertexKernel kernel = make_kernel(mesh, dirs, xs, s_scat);
            SweepResult r;
            if (rc.mode == SweepMode::Cg && iter > 1) {
                r = run_sweep_cg(mesh, decomp, dirs, rc, kernel, graphs, cgs);
            } else {
                RuntimeConfig first = rc;
                first.record_trace = rc.mode == SweepMode::Cg || rc.record_trace;
                r = run_sweep(mesh, decomp, dirs, first, kernel, graphs);
                if (rc.mode == SweepMode::Cg) {
                    const auto t0 = std::chrono::steady_clock::now();
                    cgs.clear();
                    for (int a = 0; a < dirs.count(); ++a) {
                        const FineGraphView view = fine_graph_view(
                            mesh, decomp, dirs.ordinates[static_cast<std::size_t>(a)].omega);
                        std::vector<ClusterTrace> angle_traces;
                        for (const ClusterTrace& t : r.traces)
                            if (t.task == a) angle_traces.push_back(t);
                        cgs.push_back(build_coarsened_graph(view, angle_traces, a));
                        verify_acyclic(cgs.back());
                    }
                    metrics.cg_build_ns += std::chrono::duration_cast<std::chrono::nanoseconds>(
                                               std::chrono::steady_clock::now() - t0)
                                               .count();
                }
            }
            metrics.merge(r.metrics);
            if (last_audit_out) *last_audit_out = std::move(r.audit);
            return std::move(r.psi);
        });

    if (metrics_out) {
        metrics.iterations = state.iterations;
        *metrics_out = std::move(metrics);
    }
    return state;
}

SolutionState source_iteration_oracle(const UnstructuredMesh& mesh, const DirectionSet& dirs,
                                      const CrossSections& xs, const SolverConfig& solver_cfg) {
    return iterate_to_fixed_point(mesh, dirs, xs, solver_cfg,
                                  [&](const std::vector<double>& s_scat, int) {
                                      return sequential_oracle_sweep(mesh, dirs, xs, s_scat,
                                                                     solver_cfg.boundary_influx)
                                          .psi;
                                  });
}

}  // namespace patchsweep
