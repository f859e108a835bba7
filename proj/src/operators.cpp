#include "nafons/operators.hpp"

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>

namespace nafons {

namespace {

using cplx = std::complex<double>;
constexpr double kPi = std::numbers::pi;

void check_spin_budget(int n_spins, int max_spins) {
  if (n_spins < 1) throw std::invalid_argument("spin count must be positive");
  if (n_spins > max_spins)
    throw std::invalid_argument("spin count " + std::to_string(n_spins) +
                                " exceeds the dense-matrix budget of " + std::to_string(max_spins));
}

// Spin `site` occupies bit (n-1-site) of the basis index: spin 0 is the
// leftmost tensor factor. Bit 0 means |0> with Z|0> = +|0>.
inline int bit_of(int basis, int site, int n_spins) {
  return (basis >> (n_spins - 1 - site)) & 1;
}

inline double zval(int basis, int site, int n_spins) {
  return bit_of(basis, site, n_spins) ? -1.0 : 1.0;
}

inline int flip(int basis, int site, int n_spins) { return basis ^ (1 << (n_spins - 1 - site)); }

}  // namespace

HermitianOperator pauli_embed(PauliAxis axis, int site, int n_spins, int max_spins) {
  check_spin_budget(n_spins, max_spins);
  if (site < 0 || site >= n_spins)
    throw std::invalid_argument("pauli site index out of range");
  const int dim = 1 << n_spins;
  HermitianOperator m = HermitianOperator::Zero(dim, dim);
  for (int b = 0; b < dim; ++b) {
    switch (axis) {
      case PauliAxis::Z: m(b, b) = zval(b, site, n_spins); break;
      case PauliAxis::X: m(flip(b, site, n_spins), b) = 1.0; break;
      case PauliAxis::Y:
        // Y|0> = i|1>, Y|1> = -i|0>
        m(flip(b, site, n_spins), b) = bit_of(b, site, n_spins) ? cplx(0, -1) : cplx(0, 1);
        break;
    }
  }
  return m;
}

HermitianOperator build_hamiltonian(const SpinSystem& sys, const HamiltonianParams& params,
                                    int max_spins) {
  const int n = sys.size();
  check_spin_budget(n, max_spins);
  params.validate(n);
  const int dim = 1 << n;
  HermitianOperator h = HermitianOperator::Zero(dim, dim);
  for (int b = 0; b < dim; ++b) {
    double diag = 0.0;
    for (int j = 0; j < n; ++j) diag += kPi * params.shifts_hz[j] * zval(b, j, n);
    for (int j = 0; j < n; ++j) {
      const double zj = zval(b, j, n);
      for (int k = j + 1; k < n; ++k) {
        const double d = params.dipolar_hz(j, k);
        const double sj = params.scalar_hz(j, k);
        diag += kPi * (d + sj) * zj * zval(b, k, n);
        // Flip-flop only between anti-aligned homonuclear pairs;
        // <b'|XX+YY|b> = 2 for b' = b with both bits flipped.
        if (sys.homonuclear(j, k) && zj * zval(b, k, n) < 0.0) {
          const int b2 = flip(flip(b, j, n), k, n);
          h(b2, b) += kPi * (2.0 * sj - d);
        }
      }
    }
    h(b, b) += diag;
  }
  return h;
}

HermitianOperator param_derivative_operator(const SpinSystem& sys, const ParamId& id,
                                            int max_spins) {
  const int n = sys.size();
  check_spin_budget(n, max_spins);
  const int dim = 1 << n;
  HermitianOperator m = HermitianOperator::Zero(dim, dim);
  if (id.kind == ParamKind::Shift) {
    if (id.j < 0 || id.j >= n) throw std::invalid_argument("parameter site out of range");
    for (int b = 0; b < dim; ++b) m(b, b) = kPi * zval(b, id.j, n);
    return m;
  }
  if (id.j < 0 || id.k <= id.j || id.k >= n)
    throw std::invalid_argument("parameter pair out of range");
  const bool homo = sys.homonuclear(id.j, id.k);
  // ZZ coefficient is pi for both parameter kinds; the transverse part is
  // -pi/2 (XX+YY) for dipolar and +pi (XX+YY) for scalar, homonuclear only.
  const double xy_coeff = id.kind == ParamKind::Dipolar ? -0.5 * kPi : kPi;
  for (int b = 0; b < dim; ++b) {
    const double zz = zval(b, id.j, n) * zval(b, id.k, n);
    m(b, b) = kPi * zz;
    if (homo && zz < 0.0) {
      const int b2 = flip(flip(b, id.j, n), id.k, n);
      m(b2, b) += 2.0 * xy_coeff;
    }
  }
  return m;
}

std::vector<int> restriction_sites(const SpinSystem& sys, const std::set<std::string>& keep) {
  if (keep.empty()) throw std::invalid_argument("species restriction set is empty");
  for (const std::string& s : keep)
    if (!sys.has_species(s))
      throw std::invalid_argument("species '" + s + "' not present in the spin system");
  std::vector<int> sites;
  for (int i = 0; i < sys.size(); ++i)
    if (keep.count(sys.spin(i).species)) sites.push_back(i);
  return sites;
}

std::pair<SpinSystem, HamiltonianParams> restrict_to_species(
    const SpinSystem& sys, const HamiltonianParams& params, const std::set<std::string>& keep) {
  params.validate(sys.size());
  const std::vector<int> sites = restriction_sites(sys, keep);
  const int m = static_cast<int>(sites.size());
  std::vector<Spin> spins;
  spins.reserve(sites.size());
  for (int s : sites) spins.push_back(sys.spin(s));
  HamiltonianParams sub = HamiltonianParams::zeros(m);
  for (int a = 0; a < m; ++a) {
    sub.shifts_hz[a] = params.shifts_hz[sites[static_cast<std::size_t>(a)]];
    for (int b = 0; b < m; ++b) {
      sub.dipolar_hz(a, b) =
          params.dipolar_hz(sites[static_cast<std::size_t>(a)], sites[static_cast<std::size_t>(b)]);
      sub.scalar_hz(a, b) =
          params.scalar_hz(sites[static_cast<std::size_t>(a)], sites[static_cast<std::size_t>(b)]);
    }
  }
  return {SpinSystem(std::move(spins)), std::move(sub)};
}

Eigen::MatrixXcd single_spin_raising(int site, int n_spins, int max_spins) {
  check_spin_budget(n_spins, max_spins);
  if (site < 0 || site >= n_spins) throw std::invalid_argument("site index out of range");
  const int dim = 1 << n_spins;
  Eigen::MatrixXcd m = Eigen::MatrixXcd::Zero(dim, dim);
  // sigma+ = (X + iY)/2 maps |1> -> |0>.
  for (int b = 0; b < dim; ++b)
    if (bit_of(b, site, n_spins)) m(flip(b, site, n_spins), b) = 1.0;
  return m;
}

Eigen::MatrixXcd detection_operator(const SpinSystem& sys, const std::string& observe,
                                    int max_spins) {
  if (!sys.has_species(observe))
    throw std::invalid_argument("observed species '" + observe + "' not present");
  const int n = sys.size();
  check_spin_budget(n, max_spins);
  const int dim = 1 << n;
  Eigen::MatrixXcd m = Eigen::MatrixXcd::Zero(dim, dim);
  for (int site : sys.sites_of_species(observe))
    for (int b = 0; b < dim; ++b)
      if (bit_of(b, site, n)) m(flip(b, site, n), b) += 1.0;
  return m;
}

Eigen::VectorXd species_z_diagonal(const SpinSystem& sys, const std::string& observe) {
  if (!sys.has_species(observe))
    throw std::invalid_argument("observed species '" + observe + "' not present");
  const int n = sys.size();
  const int dim = 1 << n;
  Eigen::VectorXd z = Eigen::VectorXd::Zero(dim);
  for (int site : sys.sites_of_species(observe))
    for (int b = 0; b < dim; ++b) z[b] += zval(b, site, n);
  return z;
}

Eigen::MatrixXcd embed_operator(const Eigen::MatrixXcd& sub_op, const std::vector<int>& sites,
                                int n_full, int max_spins) {
  check_spin_budget(n_full, max_spins);
  const int m = static_cast<int>(sites.size());
  if (sub_op.rows() != (1 << m) || sub_op.cols() != (1 << m))
    throw std::invalid_argument("sub-operator dimension does not match site count");
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (sites[i] < 0 || sites[i] >= n_full) throw std::invalid_argument("embed site out of range");
    if (i > 0 && sites[i] <= sites[i - 1])
      throw std::invalid_argument("embed sites must be strictly ascending");
  }
  const int dim = 1 << n_full;
  // Masks to split a full basis index into (sub bits, spectator bits).
  auto sub_index = [&](int b) {
    int s = 0;
    for (int i = 0; i < m; ++i) s = (s << 1) | bit_of(b, sites[static_cast<std::size_t>(i)], n_full);
    return s;
  };
  int spectator_mask = dim - 1;
  for (int s : sites) spectator_mask &= ~(1 << (n_full - 1 - s));

  Eigen::MatrixXcd out = Eigen::MatrixXcd::Zero(dim, dim);
  for (int col = 0; col < dim; ++col) {
    const int spect = col & spectator_mask;
    const int sc = sub_index(col);
    for (int sr = 0; sr < (1 << m); ++sr) {
      const cplx v = sub_op(sr, sc);
      if (v == cplx(0, 0)) continue;
      // Rebuild the row index: spectator bits unchanged, sub bits = sr.
      int row = spect;
      for (int i = 0; i < m; ++i)
        if ((sr >> (m - 1 - i)) & 1) row |= 1 << (n_full - 1 - sites[static_cast<std::size_t>(i)]);
      out(row, col) = v;
    }
  }
  return out;
}

bool is_hermitian(const Eigen::MatrixXcd& m, double tol_abs) {
  if (m.rows() != m.cols()) return false;
  return (m - m.adjoint()).cwiseAbs().maxCoeff() <= tol_abs;
}

}  // namespace nafons
