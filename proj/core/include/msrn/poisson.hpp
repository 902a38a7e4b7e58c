#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msrn/averaging.hpp"

namespace msrn {

// One upper bound considered when selecting the fluctuation exponent p
// (r_N = N^p).  `active` is false when the bound's defining set is empty.
struct ExponentBound {
  std::string name;
  bool active = false;
  Rational value;
};

// Ledger entry for one candidate term of the first-order correction G1.
// Every term is classified by exact exponent arithmetic before any numeric
// evaluation happens.
struct CorrectionTerm {
  int level = 1;        // 2 = fastest-level corrector, 1 = intermediate
  std::string kind;     // which structural sum the term belongs to
  std::size_t reaction = 0;
  std::string status;   // "zero (pairing)", "zero (exponent)", "active",
                        // "unevaluated"
};

// Correction layer on top of an averaged decomposition: solves the Poisson
// equations for the correctors by a linear ansatz in the fast coordinates,
// selects p, and assembles the correction drifts G0, G1 and the diffusion
// matrix Gbar with its symmetric square root.
class CorrectionModel {
 public:
  explicit CorrectionModel(const AveragingEngine& avg);

  const AveragingEngine& averaging() const { return *avg_; }
  const Rational& p() const { return p_; }
  const std::string& binding_bound() const { return binding_; }
  const std::vector<ExponentBound>& bounds() const { return bounds_; }
  double r(double N) const { return std::pow(N, p_.to_double()); }

  // Linear-ansatz coefficients of the correctors, one row per slow
  // component.  The first corrector h1 is linear in the level-1 coordinates
  // (the single fast level of a two-scale network, the intermediate level of
  // a three-scale one); h2 and h3 are linear in the fastest coordinates and
  // exist only for three-scale networks.
  Eigen::MatrixXd first_corrector(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd second_corrector(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd third_corrector(const Eigen::VectorXd& v) const;

  // Indices (into the decomposition's direction list) of the coordinates the
  // respective corrector is linear in.
  const std::vector<std::size_t>& first_corrector_dirs() const;
  const std::vector<std::size_t>& fast_corrector_dirs() const;

  // Linear parts of the correctors at v (additive constants are irrelevant:
  // the correctors only enter through differences and derivatives).
  Eigen::VectorXd h1(const Eigen::VectorXd& v) const;
  Eigen::VectorXd h23(const Eigen::VectorXd& v) const;
  // H_N = r_{1,N}^{-1} h1 + r_{2,N}^{-1} (h2 + h3) with r_{i,N} = N^{m_i}.
  Eigen::VectorXd corrector(const Eigen::VectorXd& v, double N) const;

  // Verification hooks: sup-norm residual of generator(h) - rhs over the
  // coordinate probe points around v, and the equilibrium average of the
  // Poisson right-hand sides (Fredholm solvability).
  double poisson_residual(const Eigen::VectorXd& v) const;
  double centering_residual(const Eigen::VectorXd& v) const;

  Eigen::VectorXd G0(const Eigen::VectorXd& v) const;
  Eigen::VectorXd G1(const Eigen::VectorXd& v) const;
  bool G0_identically_zero() const { return g0_pairs_.empty(); }
  bool G1_identically_zero() const;
  const std::vector<CorrectionTerm>& term_ledger() const { return ledger_; }
  bool has_unevaluated_terms() const;

  // Diffusion matrix of the slow block and its symmetric PSD square root.
  Eigen::MatrixXd Gbar(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd sigma(const Eigen::VectorXd& v) const;

 private:
  struct Amplitude {
    Rational exponent;   // N^{-e} prefactor of this jump amplitude
    int source;          // 0 = slow coordinate itself, 1 = h1, 2 = h2+h3
    std::size_t dir;     // direction index (slow l for source 0, else the
                         // corrector coordinate)
  };

  // Exact-exponent selection of the G1 terms a reaction contributes at one
  // corrector level; `grad` lists coordinate directions whose first-order gap
  // equals p, `curv` the evaluable second-order pairs.
  struct KeptTerms {
    int level = 1;
    std::size_t reaction = 0;
    std::vector<std::size_t> grad;
    std::vector<std::pair<std::size_t, std::size_t>> curv;
    bool unevaluated = false;
  };

  Rational exact_pairing(std::size_t l, std::size_t k) const;
  Eigen::MatrixXd fast_solve(const Eigen::VectorXd& v, bool third) const;
  Eigen::MatrixXd mid_solve(const Eigen::VectorXd& v) const;
  KeptTerms kept_terms(int level, std::size_t k) const;
  void build_ledger();

  const AveragingEngine* avg_;
  const MultiscaleDecomposition* D_;
  std::size_t s0_ = 0;
  std::size_t nr_ = 0;
  bool three_scale_ = false;
  Rational m1_, m2_;
  Rational p_;
  std::string binding_;
  std::vector<ExponentBound> bounds_;
  std::vector<std::pair<std::size_t, std::size_t>> g0_pairs_;  // (slow l, k)
  std::vector<std::vector<Amplitude>> amps_;                   // per reaction
  std::vector<CorrectionTerm> ledger_;
  std::vector<KeptTerms> active_;
};

// Exact normalized propensity at finite N:
//   kappa_k prod_i prod_{j<nu_ik} (z_i - j N^{-alpha_i}).
double finite_N_propensity(const MultiscaleDecomposition& D, std::size_t k,
                           const Eigen::VectorXd& z, double N);

// Exact compensator drift of the slow functionals at finite N, one component
// per slow dynamical direction:  sum_k N^{rho_k - alpha_l} lambda~_k (theta_l . zeta_k).
Eigen::VectorXd finite_N_slow_drift(const MultiscaleDecomposition& D,
                                    const Eigen::VectorXd& v, double N);

}  // namespace msrn
