#pragma once

#include <Eigen/Dense>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "nafons/spin_system.hpp"

namespace nafons {

using HermitianOperator = Eigen::MatrixXcd;

enum class PauliAxis { X, Y, Z };

// Dense diagonalization budget: 2^10 = 1024.
inline constexpr int kDefaultMaxSpins = 10;

// I (x) ... (x) sigma_axis (x) ... (x) I with the Pauli factor at `site`.
HermitianOperator pauli_embed(PauliAxis axis, int site, int n_spins,
                              int max_spins = kDefaultMaxSpins);

// Internal Hamiltonian in rad/s:
//   H = sum_j pi*nu_j Z_j
//     + sum_{j<k} pi*(D_jk + J_jk) Z_j Z_k                      (all pairs)
//     + sum_{j<k homonuclear} pi*(J_jk - D_jk/2) (X_j X_k + Y_j Y_k)
// Eigenvalue differences divided by 2*pi are transition frequencies in Hz.
HermitianOperator build_hamiltonian(const SpinSystem& sys, const HamiltonianParams& params,
                                    int max_spins = kDefaultMaxSpins);

// d(build_hamiltonian)/d(param), in rad/s per Hz. Same Pauli-string
// structure as the corresponding term above.
HermitianOperator param_derivative_operator(const SpinSystem& sys, const ParamId& id,
                                            int max_spins = kDefaultMaxSpins);

// Sub-system containing only the kept species, with intra-subset shifts and
// couplings copied and everything touching a removed spin dropped. Models
// ideal heteronuclear decoupling.
std::pair<SpinSystem, HamiltonianParams> restrict_to_species(
    const SpinSystem& sys, const HamiltonianParams& params,
    const std::set<std::string>& keep);

// Site indices (in `sys` order) retained by restrict_to_species.
std::vector<int> restriction_sites(const SpinSystem& sys, const std::set<std::string>& keep);

// Quadrature detection: sum over observed spins of sigma+_k, sigma+ = (X+iY)/2.
Eigen::MatrixXcd detection_operator(const SpinSystem& sys, const std::string& observe,
                                    int max_spins = kDefaultMaxSpins);

// sigma+ embedded at one site.
Eigen::MatrixXcd single_spin_raising(int site, int n_spins, int max_spins = kDefaultMaxSpins);

// Diagonal of sum_{k in species} Z_k in the computational basis; used for
// coherence-order bookkeeping.
Eigen::VectorXd species_z_diagonal(const SpinSystem& sys, const std::string& observe);

// sub_op acting on the listed sites (ascending, in sub-op order) tensored
// with identity on all other sites of an n_full-spin register.
Eigen::MatrixXcd embed_operator(const Eigen::MatrixXcd& sub_op, const std::vector<int>& sites,
                                int n_full, int max_spins = kDefaultMaxSpins);

bool is_hermitian(const Eigen::MatrixXcd& m, double tol_abs = 1e-12);

}  // namespace nafons
