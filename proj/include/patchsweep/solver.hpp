// Single-group Sn source iteration: transport kernel, scattering update,
// residual loop and the sequential topological-traversal oracle.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "patchsweep/mesh.hpp"
#include "patchsweep/runtime.hpp"

namespace patchsweep {

struct CrossSections {
    std::vector<double> sigma_t;  // total, 1/length
    std::vector<double> sigma_s;  // scattering, 1/length
    std::vector<double> q_ext;    // external source, per volume

    static CrossSections uniform(std::size_t cells, double st, double ss, double q);
    void validate(const UnstructuredMesh& mesh) const;
};

CrossSections xs_from_json(const std::string& text, std::size_t cells);

struct SolutionState {
    std::vector<std::vector<double>> psi;  // [angle][cell]
    std::vector<double> phi;               // scalar flux
    int iterations = 0;
    double residual = 0.0;
    bool converged = false;
};

std::string fields_to_json(const SolutionState& state);

struct SolverConfig {
    double tol = 1e-8;       // max-norm on phi
    int max_iters = 200;
    double boundary_influx = 0.0;
};

// Step-upwind finite volume update for one (cell, angle) vertex. face_in must
// hold the incoming value for every upwind face (boundary influx included);
// the incoming sum runs in ascending face-index order. Throws on a degenerate
// cell (zero denominator).
double transport_kernel(const Cell& cell, const std::array<double, 3>& omega, double sigma_t,
                        double q_ext, double s_scat, std::span<const double> face_in);

std::vector<double> update_scattering_source(const CrossSections& xs,
                                             const std::vector<double>& phi);

// phi(c) = sum_m w_m psi(c, m), accumulated in ascending angle order.
std::vector<double> scalar_flux(const DirectionSet& dirs,
                                const std::vector<std::vector<double>>& psi);

// Single-threaded patch-free Kahn traversal per angle, ascending cell-id
// tie-break, same kernel and summation order as the runtime path. Ground
// truth for all equivalence tests.
SolutionState sequential_oracle_sweep(const UnstructuredMesh& mesh, const DirectionSet& dirs,
                                      const CrossSections& xs, const std::vector<double>& s_scat,
                                      double boundary_influx);

SolutionState source_iteration(const UnstructuredMesh& mesh, const Decomposition& decomp,
                               const DirectionSet& dirs, const CrossSections& xs,
                               const SolverConfig& solver_cfg, const RuntimeConfig& runtime_cfg,
                               RuntimeMetrics* metrics_out = nullptr,
                               AuditReport* last_audit_out = nullptr);

// Same fixed-point loop driven by the sequential oracle sweep.
SolutionState source_iteration_oracle(const UnstructuredMesh& mesh, const DirectionSet& dirs,
                                      const CrossSections& xs, const SolverConfig& solver_cfg);

}  // namespace patchsweep
