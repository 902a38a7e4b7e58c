#include "msrn/poisson.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include <Eigen/Eigenvalues>

namespace msrn {

namespace {

constexpr double kCoeffStep = 1e-6;  // central-difference step for corrector
                                     // coefficient derivatives

Eigen::Index ei(std::size_t x) { return static_cast<Eigen::Index>(x); }

// Solves W . B = S for W (row-by-row transposed systems share one LU).
Eigen::MatrixXd solve_matching(const Eigen::MatrixXd& B, const Eigen::MatrixXd& S,
                               const char* what) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(B.transpose());
  if (!lu.isInvertible()) throw PipelineError(PipelineError::Code::SingularSystem, what);
  return lu.solve(S.transpose()).transpose();
}

Eigen::VectorXd subvector(const Eigen::VectorXd& v, const std::vector<std::size_t>& idx) {
  Eigen::VectorXd out(ei(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out(ei(j)) = v(ei(idx[j]));
  return out;
}

bool contains(const std::vector<std::size_t>& xs, std::size_t x) {
  return std::find(xs.begin(), xs.end(), x) != xs.end();
}

}  // namespace

CorrectionModel::CorrectionModel(const AveragingEngine& avg)
    : avg_(&avg), D_(&avg.decomposition()) {
  s0_ = avg.slow_dirs().size();
  nr_ = D_->net.reaction_count();
  three_scale_ = avg.fastest_level() == 2;
  if (D_->level1.m.finite) m1_ = D_->level1.m.m;
  if (D_->level2.m.finite) m2_ = D_->level2.m.m;

  const auto& slow = avg.slow_dirs();
  const auto& l1 = first_corrector_dirs();
  const auto& fd = avg.fast_dirs();
  auto alpha_of = [&](std::size_t dir) { return D_->directions[dir].dir.alpha; };

  // Jump amplitudes of the perturbed slow functionals theta0.Z - H_N: the
  // bare slow pairing plus one corrector term per coordinate the correctors
  // are linear in.  Exponents are exact; the numeric factors come later.
  amps_.resize(nr_);
  for (std::size_t k = 0; k < nr_; ++k) {
    for (std::size_t l = 0; l < s0_; ++l)
      if (!exact_pairing(slow[l], k).is_zero())
        amps_[k].push_back({alpha_of(slow[l]), 0, l});
    if (avg.has_fast_level())
      for (std::size_t j = 0; j < l1.size(); ++j)
        if (!exact_pairing(l1[j], k).is_zero())
          amps_[k].push_back({m1_ + alpha_of(l1[j]), 1, j});
    if (three_scale_)
      for (std::size_t j = 0; j < fd.size(); ++j)
        if (!exact_pairing(fd[j], k).is_zero())
          amps_[k].push_back({m2_ + alpha_of(fd[j]), 2, j});
  }

  // Upper bounds on the fluctuation exponent p.
  bounds_.resize(6);
  bounds_[0].name = "slow drift gap";
  bounds_[1].name = "level-2 jump gap";
  bounds_[2].name = "level-2 curvature gap";
  bounds_[3].name = "level-1 jump gap";
  bounds_[4].name = "level-1 curvature gap";
  bounds_[5].name = "slow quadratic variation";
  auto tighten = [](ExponentBound& b, const Rational& r, bool use_max) {
    if (!b.active) {
      b.active = true;
      b.value = r;
    } else if (use_max ? r > b.value : r < b.value) {
      b.value = r;
    }
  };

  for (std::size_t k = 0; k < nr_; ++k) {
    const Rational& rho = D_->rho[k];

    for (std::size_t l = 0; l < s0_; ++l)
      if (!exact_pairing(slow[l], k).is_zero() && rho < alpha_of(slow[l]))
        tighten(bounds_[0], alpha_of(slow[l]) - rho, /*use_max=*/true);

    if (three_scale_) {
      const auto& zk = D_->net.reactions[k].net;
      for (std::size_t i = 0; i < zk.size(); ++i) {
        if (zk[i] == 0) continue;
        const Rational& ai = D_->net.species[i].alpha;
        Rational gap = ai + m2_ - rho;
        if (gap > Rational(0)) tighten(bounds_[1], gap, false);
        if (ai > Rational(0)) tighten(bounds_[2], ai + ai + m2_ - rho, false);
      }
    }
    if (avg.has_fast_level()) {
      for (std::size_t j = 0; j < l1.size(); ++j) {
        if (exact_pairing(l1[j], k).is_zero()) continue;
        Rational a = alpha_of(l1[j]);
        Rational gap = a + m1_ - rho;
        if (gap > Rational(0)) tighten(bounds_[3], gap, false);
        if (a > Rational(0)) tighten(bounds_[4], a + a + m1_ - rho, false);
      }
    }
    for (const auto& a : amps_[k])
      for (const auto& b : amps_[k])
        tighten(bounds_[5], (a.exponent + b.exponent - rho) / Rational(2), false);
  }

  if (!bounds_[5].active)
    throw PipelineError(PipelineError::Code::Unsupported,
                        "CLT scaling unavailable: the slow block has no jump amplitudes");
  bool first = true;
  for (const auto& b : bounds_) {
    if (!b.active) continue;
    if (first || b.value < p_) p_ = b.value;
    first = false;
  }
  for (const auto& b : bounds_)
    if (b.active && b.value == p_) {
      binding_ = b.name;
      break;
    }
  if (!(p_ > Rational(0)))
    throw PipelineError(PipelineError::Code::Unsupported,
                        "CLT scaling unavailable: nonpositive fluctuation exponent p = " + p_.str());
  if (p_ != bounds_[5].value)
    throw PipelineError(
        PipelineError::Code::Unsupported,
        "CLT scaling unavailable: the slow quadratic variation scales as N^{-2*(" +
            bounds_[5].value.str() + ")} and vanishes under the binding bound " + binding_ +
            " = " + p_.str());
  if (avg.has_fast_level() && !(p_ < m1_))
    throw PipelineError(PipelineError::Code::Unsupported,
                        "CLT scaling unavailable: fluctuation exponent p = " + p_.str() +
                            " is not below the first corrector scale m1 = " + m1_.str());

  // Reactions feeding the residual slow drift G0: slow pairings whose rate
  // deficit alpha_theta - rho equals p exactly.
  for (std::size_t l = 0; l < s0_; ++l)
    for (std::size_t k = 0; k < nr_; ++k)
      if (!exact_pairing(slow[l], k).is_zero() && alpha_of(slow[l]) - D_->rho[k] == p_)
        g0_pairs_.emplace_back(l, k);

  build_ledger();
}

Rational CorrectionModel::exact_pairing(std::size_t l, std::size_t k) const {
  const auto& g = D_->directions[l].dir.generator;
  const auto& zk = D_->net.reactions[k].net;
  Rational s(0);
  for (std::size_t i = 0; i < zk.size(); ++i)
    if (zk[i] != 0) s += g[i] * Rational(zk[i]);
  return s;
}

const std::vector<std::size_t>& CorrectionModel::first_corrector_dirs() const {
  return three_scale_ ? avg_->mid_dirs() : avg_->fast_dirs();
}

const std::vector<std::size_t>& CorrectionModel::fast_corrector_dirs() const {
  return avg_->fast_dirs();
}

Eigen::MatrixXd CorrectionModel::fast_solve(const Eigen::VectorXd& v, bool third) const {
  const auto& fd = avg_->fast_dirs();
  const std::size_t nf = fd.size();
  if (nf == 0 || (third && !three_scale_))
    return Eigen::MatrixXd::Zero(ei(s0_), ei(nf));

  const auto& slow = avg_->slow_dirs();
  const auto& md = avg_->mid_dirs();
  const auto& src = third ? md : slow;
  std::vector<char> need(nr_, 0);
  for (std::size_t k = 0; k < nr_; ++k) {
    for (auto j : fd)
      if (avg_->survives(j, k)) need[k] = 1;
    for (auto l : src)
      if (avg_->survives(l, k)) need[k] = 1;
  }

  // Propensity slopes along the fastest coordinates; exact because the
  // propensities are affine there (checked).
  Eigen::VectorXd z = avg_->state_from_v(v);
  Eigen::MatrixXd slope = Eigen::MatrixXd::Zero(ei(nr_), ei(nf));
  for (std::size_t k = 0; k < nr_; ++k) {
    if (!need[k]) continue;
    avg_->check_affine(k, fd, "the fluctuation corrector");
    double base = avg_->limit_propensity(k, z);
    for (std::size_t i = 0; i < nf; ++i) {
      Eigen::VectorXd zp = z + D_->T.row(ei(fd[i])).transpose();
      slope(ei(k), ei(i)) = avg_->limit_propensity(k, zp) - base;
    }
  }

  // Matching matrix: derivative of the fastest coordinate drifts.
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(ei(nf), ei(nf));
  for (std::size_t j = 0; j < nf; ++j)
    for (std::size_t k = 0; k < nr_; ++k)
      if (need[k] && avg_->survives(fd[j], k))
        B.row(ei(j)) += avg_->pairings()(ei(fd[j]), ei(k)) * slope.row(ei(k));

  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(ei(s0_), ei(nf));
  if (!third) {
    // rhs slopes of F - F1_bar (the averaged part is flat in the fast block).
    for (std::size_t l = 0; l < s0_; ++l)
      for (std::size_t k = 0; k < nr_; ++k)
        if (avg_->survives(slow[l], k))
          S.row(ei(l)) += avg_->pairings()(ei(slow[l]), ei(k)) * slope.row(ei(k));
  } else {
    // rhs slopes of L1_bar h1 - L1 h1 = sum_j u_lj (Dbar_j - D_j).
    Eigen::MatrixXd Dm = Eigen::MatrixXd::Zero(ei(md.size()), ei(nf));
    for (std::size_t j = 0; j < md.size(); ++j)
      for (std::size_t k = 0; k < nr_; ++k)
        if (avg_->survives(md[j], k))
          Dm.row(ei(j)) += avg_->pairings()(ei(md[j]), ei(k)) * slope.row(ei(k));
    S = -mid_solve(v) * Dm;
  }
  return solve_matching(B, S, "matching matrix of the fastest-level corrector is singular");
}

Eigen::MatrixXd CorrectionModel::mid_solve(const Eigen::VectorXd& v) const {
  const auto& md = avg_->mid_dirs();
  const std::size_t nm = md.size();
  if (nm == 0) return Eigen::MatrixXd::Zero(ei(s0_), 0);

  const auto& slow = avg_->slow_dirs();
  std::vector<std::size_t> ks;
  for (std::size_t k = 0; k < nr_; ++k) {
    bool used = false;
    for (auto j : md) used = used || avg_->survives(j, k);
    for (auto l : slow) used = used || avg_->survives(l, k);
    if (used) ks.push_back(k);
  }
  auto lin = avg_->mid_linearize(v, ks, /*verify=*/true);

  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(ei(nm), ei(nm));
  for (std::size_t j = 0; j < nm; ++j)
    for (auto k : ks)
      if (avg_->survives(md[j], k))
        B.row(ei(j)) += avg_->pairings()(ei(md[j]), ei(k)) * lin.slopes.row(ei(k));
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(ei(s0_), ei(nm));
  for (std::size_t l = 0; l < s0_; ++l)
    for (auto k : ks)
      if (avg_->survives(slow[l], k))
        S.row(ei(l)) += avg_->pairings()(ei(slow[l]), ei(k)) * lin.slopes.row(ei(k));
  return solve_matching(B, S, "matching matrix of the intermediate-level corrector is singular");
}

Eigen::MatrixXd CorrectionModel::first_corrector(const Eigen::VectorXd& v) const {
  if (!avg_->has_fast_level()) return Eigen::MatrixXd::Zero(ei(s0_), 0);
  return three_scale_ ? mid_solve(v) : fast_solve(v, /*third=*/false);
}

Eigen::MatrixXd CorrectionModel::second_corrector(const Eigen::VectorXd& v) const {
  if (!three_scale_) return Eigen::MatrixXd::Zero(ei(s0_), 0);
  return fast_solve(v, /*third=*/false);
}

Eigen::MatrixXd CorrectionModel::third_corrector(const Eigen::VectorXd& v) const {
  if (!three_scale_) return Eigen::MatrixXd::Zero(ei(s0_), 0);
  return fast_solve(v, /*third=*/true);
}

Eigen::VectorXd CorrectionModel::h1(const Eigen::VectorXd& v) const {
  if (!avg_->has_fast_level()) return Eigen::VectorXd::Zero(ei(s0_));
  return first_corrector(v) * subvector(v, first_corrector_dirs());
}

Eigen::VectorXd CorrectionModel::h23(const Eigen::VectorXd& v) const {
  if (!three_scale_) return Eigen::VectorXd::Zero(ei(s0_));
  Eigen::MatrixXd W = second_corrector(v) + third_corrector(v);
  return W * subvector(v, avg_->fast_dirs());
}

Eigen::VectorXd CorrectionModel::corrector(const Eigen::VectorXd& v, double N) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(ei(s0_));
  if (!avg_->has_fast_level()) return out;
  out = std::pow(N, -m1_.to_double()) * h1(v);
  if (three_scale_) out += std::pow(N, -m2_.to_double()) * h23(v);
  return out;
}

double CorrectionModel::poisson_residual(const Eigen::VectorXd& v) const {
  if (!avg_->has_fast_level()) return 0.0;
  const auto& fd = avg_->fast_dirs();
  const auto& md = avg_->mid_dirs();
  const auto& slow = avg_->slow_dirs();
  double worst = 0.0;

  Eigen::MatrixXd W = fast_solve(v, false);
  Eigen::VectorXd f1bar = avg_->F1_bar(v);
  Eigen::MatrixXd U, W3;
  Eigen::VectorXd fbar = f1bar, dbar;
  if (three_scale_) {
    U = mid_solve(v);
    W3 = fast_solve(v, true);
    fbar = avg_->F_bar(v);
    auto eq = avg_->fast_equilibrium(v);
    dbar = Eigen::VectorXd::Zero(ei(md.size()));
    for (std::size_t j = 0; j < md.size(); ++j)
      for (std::size_t k = 0; k < nr_; ++k)
        if (avg_->survives(md[j], k))
          dbar(ei(j)) += avg_->average_over(k, eq, v) * avg_->pairings()(ei(md[j]), ei(k));
  }

  // Fastest-level equations, probed one unit along each fast coordinate.
  Eigen::VectorXd z0 = avg_->state_from_v(v);
  std::vector<Eigen::VectorXd> probes{z0};
  for (auto j : fd) {
    probes.push_back(z0 + D_->T.row(ei(j)).transpose());
    probes.push_back(z0 - D_->T.row(ei(j)).transpose());
  }
  for (const auto& z : probes) {
    Eigen::VectorXd Df = Eigen::VectorXd::Zero(ei(fd.size()));
    for (std::size_t j = 0; j < fd.size(); ++j)
      for (std::size_t k = 0; k < nr_; ++k)
        if (avg_->survives(fd[j], k))
          Df(ei(j)) += avg_->limit_propensity(k, z) * avg_->pairings()(ei(fd[j]), ei(k));
    for (std::size_t l = 0; l < s0_; ++l) {
      double F_l = 0.0;
      for (std::size_t k = 0; k < nr_; ++k)
        if (avg_->survives(slow[l], k))
          F_l += avg_->limit_propensity(k, z) * avg_->pairings()(ei(slow[l]), ei(k));
      double target = three_scale_ ? F_l - f1bar(ei(l)) : F_l - fbar(ei(l));
      worst = std::max(worst, std::abs(W.row(ei(l)).dot(Df) - target));
    }
    if (three_scale_) {
      Eigen::VectorXd Dm = Eigen::VectorXd::Zero(ei(md.size()));
      for (std::size_t j = 0; j < md.size(); ++j)
        for (std::size_t k = 0; k < nr_; ++k)
          if (avg_->survives(md[j], k))
            Dm(ei(j)) += avg_->limit_propensity(k, z) * avg_->pairings()(ei(md[j]), ei(k));
      for (std::size_t l = 0; l < s0_; ++l) {
        double rhs = U.row(ei(l)).dot(dbar - Dm);
        worst = std::max(worst, std::abs(W3.row(ei(l)).dot(Df) - rhs));
      }
    }
  }

  // Intermediate-level equation, probed along the level-1 lattice (skipping
  // probes outside the feasible region).
  if (three_scale_) {
    for (std::size_t j = 0; j < md.size(); ++j) {
      double step = avg_->lattice_step(md[j]);
      for (double sgn : {1.0, -1.0}) {
        Eigen::VectorXd vp = v;
        vp(ei(md[j])) += sgn * step;
        try {
          auto eqp = avg_->fast_equilibrium(vp);
          Eigen::VectorXd Dbarp = Eigen::VectorXd::Zero(ei(md.size()));
          for (std::size_t q = 0; q < md.size(); ++q)
            for (std::size_t k = 0; k < nr_; ++k)
              if (avg_->survives(md[q], k))
                Dbarp(ei(q)) +=
                    avg_->average_over(k, eqp, vp) * avg_->pairings()(ei(md[q]), ei(k));
          Eigen::VectorXd f1p = avg_->F1_bar(vp);
          for (std::size_t l = 0; l < s0_; ++l)
            worst = std::max(worst, std::abs(U.row(ei(l)).dot(Dbarp) -
                                             (f1p(ei(l)) - fbar(ei(l)))));
        } catch (const PipelineError& e) {
          if (e.code() != PipelineError::Code::UnboundedFastChain &&
              e.code() != PipelineError::Code::Unsupported)
            throw;
        }
      }
    }
  }
  return worst;
}

double CorrectionModel::centering_residual(const Eigen::VectorXd& v) const {
  if (!avg_->has_fast_level()) return 0.0;
  const auto& fd = avg_->fast_dirs();
  const auto& md = avg_->mid_dirs();
  double worst = 0.0;

  // Fredholm condition at the fastest level: the conditional equilibrium
  // annihilates the drift of every fast coordinate.
  auto eq = avg_->fast_equilibrium(v);
  for (std::size_t j = 0; j < fd.size(); ++j) {
    double mean = 0.0;
    for (std::size_t k = 0; k < nr_; ++k)
      if (avg_->survives(fd[j], k))
        mean += avg_->average_over(k, eq, v) * avg_->pairings()(ei(fd[j]), ei(k));
    worst = std::max(worst, std::abs(mean));
  }

  // Same at the intermediate level, under its stationary first moments.
  if (three_scale_) {
    Eigen::VectorXd mm = avg_->mid_moments(v);
    Eigen::VectorXd vm = subvector(v, md);
    std::vector<std::size_t> ks;
    for (std::size_t k = 0; k < nr_; ++k)
      for (auto j : md)
        if (avg_->survives(j, k) && (ks.empty() || ks.back() != k)) ks.push_back(k);
    auto lin = avg_->mid_linearize(v, ks, /*verify=*/false);
    for (std::size_t j = 0; j < md.size(); ++j) {
      double mean = 0.0;
      for (auto k : ks)
        if (avg_->survives(md[j], k))
          mean += (lin.base[k] + lin.slopes.row(ei(k)).dot(mm - vm)) *
                  avg_->pairings()(ei(md[j]), ei(k));
      worst = std::max(worst, std::abs(mean));
    }
  }
  return worst;
}

Eigen::VectorXd CorrectionModel::G0(const Eigen::VectorXd& v) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(ei(s0_));
  if (g0_pairs_.empty()) return out;
  Eigen::VectorXd z = avg_->state_from_v(v);
  const auto& slow = avg_->slow_dirs();
  for (const auto& [l, k] : g0_pairs_)
    out(ei(l)) += avg_->limit_propensity(k, z) * avg_->pairings()(ei(slow[l]), ei(k));
  return out;
}

CorrectionModel::KeptTerms CorrectionModel::kept_terms(int level, std::size_t k) const {
  KeptTerms t;
  t.level = level;
  t.reaction = k;
  const Rational& rho = D_->rho[k];
  const Rational& m = level == 2 ? m2_ : m1_;
  auto alpha_of = [&](std::size_t dir) { return D_->directions[dir].dir.alpha; };

  // Coordinates the corrector value or its coefficients depend on: the
  // corrector's own block, plus (fastest level only) the intermediate block
  // through the coefficient matrices.
  std::vector<std::size_t> coords = level == 2 ? avg_->fast_dirs() : first_corrector_dirs();
  std::vector<std::size_t> carriers;  // coefficient-carrying directions
  if (level == 2) carriers = avg_->mid_dirs();

  std::vector<std::size_t> all(coords);
  all.insert(all.end(), carriers.begin(), carriers.end());

  const auto& jump = level == 2 ? D_->level2.jump_class : D_->level1.jump_class;
  bool is_jump = std::find(jump.begin(), jump.end(), k) != jump.end();

  for (auto q : all) {
    if (exact_pairing(q, k).is_zero()) continue;
    Rational gap = alpha_of(q) + m - rho;
    if (gap == p_) {
      t.grad.push_back(q);
    } else if (gap > Rational(0) && gap < p_) {
      throw PipelineError(PipelineError::Code::DivergentCorrection,
                          "reaction '" + D_->net.reactions[k].name +
                              "' contributes a first-order correction growing like N^{" +
                              (p_ - gap).str() + "}");
    }
  }
  for (auto q : all) {
    if (exact_pairing(q, k).is_zero()) continue;
    for (auto q2 : all) {
      if (exact_pairing(q2, k).is_zero()) continue;
      Rational gq = alpha_of(q) + m - rho, gq2 = alpha_of(q2) + m - rho;
      if (is_jump && (gq <= Rational(0) || gq2 <= Rational(0))) continue;
      Rational expo = alpha_of(q) + alpha_of(q2) + m - rho;
      bool linear_pair = contains(coords, q) && contains(coords, q2);
      if (expo == p_) {
        if (linear_pair) continue;  // second derivative of a linear function
        if (!contains(coords, q) && !contains(coords, q2)) {
          t.unevaluated = true;  // needs second derivatives of the coefficients
          continue;
        }
        t.curv.emplace_back(q, q2);
      } else if (expo > Rational(0) && expo < p_ && !linear_pair) {
        throw PipelineError(PipelineError::Code::DivergentCorrection,
                            "reaction '" + D_->net.reactions[k].name +
                                "' contributes a second-order correction growing like N^{" +
                                (p_ - expo).str() + "}");
      }
    }
  }
  return t;
}

void CorrectionModel::build_ledger() {
  if (!avg_->has_fast_level()) return;
  std::vector<int> levels;
  if (three_scale_) levels.push_back(2);
  levels.push_back(1);

  for (int level : levels) {
    std::vector<std::size_t> coords =
        level == 2 ? avg_->fast_dirs() : first_corrector_dirs();
    std::vector<std::size_t> all(coords);
    if (level == 2)
      all.insert(all.end(), avg_->mid_dirs().begin(), avg_->mid_dirs().end());
    for (std::size_t k = 0; k < nr_; ++k) {
      bool pairs_any = false;
      for (auto q : all) pairs_any = pairs_any || !exact_pairing(q, k).is_zero();
      auto t = kept_terms(level, k);

      CorrectionTerm grad{level, "gradient gap", k, ""};
      grad.status = !pairs_any          ? "zero (pairing)"
                    : t.grad.empty()    ? "zero (exponent)"
                                        : "active";
      ledger_.push_back(grad);

      CorrectionTerm curv{level, "curvature gap", k, ""};
      if (!pairs_any)
        curv.status = "zero (pairing)";
      else if (t.unevaluated)
        curv.status = "unevaluated";
      else if (!t.curv.empty())
        curv.status = "active";
      else if (level == 1)
        curv.status = "zero (linearity)";
      else
        curv.status = "zero (exponent)";
      ledger_.push_back(curv);

      if (!t.grad.empty() || !t.curv.empty() || t.unevaluated) active_.push_back(t);
    }
  }
}

bool CorrectionModel::G1_identically_zero() const {
  for (const auto& t : active_)
    if (!t.grad.empty() || !t.curv.empty()) return false;
  return true;
}

bool CorrectionModel::has_unevaluated_terms() const {
  for (const auto& t : active_)
    if (t.unevaluated) return true;
  return false;
}

Eigen::VectorXd CorrectionModel::G1(const Eigen::VectorXd& v) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(ei(s0_));
  if (G1_identically_zero()) return out;

  const auto& fd = avg_->fast_dirs();
  const auto& md = avg_->mid_dirs();
  Eigen::VectorXd z = avg_->state_from_v(v);
  Eigen::MatrixXd M1 = first_corrector(v);

  bool need_level2 = false, need_carrier = false;
  for (const auto& t : active_) {
    need_level2 = need_level2 || t.level == 2;
    for (auto q : t.grad)
      if (t.level == 2 && !contains(fd, q)) need_carrier = true;
    if (!t.curv.empty()) need_carrier = true;
  }

  Eigen::MatrixXd Wsum;
  std::vector<Eigen::MatrixXd> dW(md.size());  // d(W2+W3)/d v_mid
  if (need_level2) Wsum = second_corrector(v) + third_corrector(v);
  if (need_carrier) {
    for (std::size_t q = 0; q < md.size(); ++q) {
      double h = kCoeffStep * std::max(1.0, std::abs(v(ei(md[q]))));
      Eigen::VectorXd va = v, vb = v;
      va(ei(md[q])) += h;
      vb(ei(md[q])) -= h;
      Eigen::MatrixXd Wa = fast_solve(va, false) + fast_solve(va, true);
      Eigen::MatrixXd Wb = fast_solve(vb, false) + fast_solve(vb, true);
      dW[q] = (Wa - Wb) / (2.0 * h);
    }
  }

  auto pos_in = [](const std::vector<std::size_t>& xs, std::size_t x) {
    return static_cast<std::size_t>(std::find(xs.begin(), xs.end(), x) - xs.begin());
  };

  for (const auto& t : active_) {
    double lam = avg_->limit_propensity(t.reaction, z);
    if (lam == 0.0 && t.curv.empty() && t.grad.empty()) continue;
    const auto& jump = t.level == 2 ? D_->level2.jump_class : D_->level1.jump_class;
    bool is_jump = std::find(jump.begin(), jump.end(), t.reaction) != jump.end();

    for (auto q : t.grad) {
      double pair = avg_->pairings()(ei(q), ei(t.reaction));
      if (t.level == 1) {
        out += lam * pair * M1.col(ei(pos_in(first_corrector_dirs(), q)));
      } else if (contains(fd, q)) {
        out += lam * pair * Wsum.col(ei(pos_in(fd, q)));
      } else {
        // Coefficient variation along a carrier coordinate; for a jump-class
        // reaction the fast block sits at the displaced point.
        std::size_t qm = pos_in(md, q);
        for (std::size_t l = 0; l < s0_; ++l) {
          double acc = 0.0;
          for (std::size_t j = 0; j < fd.size(); ++j) {
            double vf = v(ei(fd[j]));
            if (is_jump && avg_->survives(fd[j], t.reaction))
              vf += avg_->pairings()(ei(fd[j]), ei(t.reaction));
            acc += dW[qm](ei(l), ei(j)) * vf;
          }
          out(ei(l)) += lam * pair * acc;
        }
      }
    }
    for (const auto& [q, q2] : t.curv) {
      // Exactly one of the pair is a fast coordinate, the other a carrier.
      std::size_t f = contains(fd, q) ? q : q2;
      std::size_t c = contains(fd, q) ? q2 : q;
      double w = avg_->pairings()(ei(q), ei(t.reaction)) *
                 avg_->pairings()(ei(q2), ei(t.reaction));
      out += 0.5 * lam * w * dW[pos_in(md, c)].col(ei(pos_in(fd, f)));
    }
  }
  return out;
}

Eigen::MatrixXd CorrectionModel::Gbar(const Eigen::VectorXd& v) const {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(ei(s0_), ei(s0_));
  const auto& slow = avg_->slow_dirs();
  const auto& l1 = first_corrector_dirs();
  const auto& fd = avg_->fast_dirs();
  const auto& md = avg_->mid_dirs();
  const Rational two_p = p_ + p_;

  // Kept and structurally divergent ordered amplitude pairs per reaction.
  struct Pair {
    std::size_t k;
    const Amplitude* a;
    const Amplitude* b;
    bool divergent;
  };
  std::vector<Pair> pairs;
  std::vector<char> need(nr_, 0);
  bool uses_corrector = false, uses_fast_amp = false;
  for (std::size_t k = 0; k < nr_; ++k)
    for (const auto& a : amps_[k])
      for (const auto& b : amps_[k]) {
        Rational expo = two_p + D_->rho[k] - a.exponent - b.exponent;
        if (expo.is_zero() || expo > Rational(0)) {
          pairs.push_back({k, &a, &b, !expo.is_zero()});
          need[k] = 1;
          uses_corrector = uses_corrector || a.source != 0 || b.source != 0;
          uses_fast_amp = uses_fast_amp || a.source == 2 || b.source == 2;
        }
      }
  if (pairs.empty()) return out;

  // Doubly averaged propensities and corrector coefficients evaluated with
  // the intermediate block at its stationary first moments.
  std::vector<double> lbb(nr_, 0.0);
  Eigen::MatrixXd U, Wsum;
  if (three_scale_) {
    Eigen::VectorXd mm = avg_->mid_moments(v);
    Eigen::VectorXd vm = subvector(v, md);
    std::vector<std::size_t> ks;
    for (std::size_t k = 0; k < nr_; ++k)
      if (need[k]) ks.push_back(k);
    auto lin = avg_->mid_linearize(v, ks, /*verify=*/true);
    for (auto k : ks) lbb[k] = lin.base[k] + lin.slopes.row(ei(k)).dot(mm - vm);

    if (uses_corrector) U = mid_solve(v);
    if (uses_fast_amp) {
      Eigen::VectorXd vbar = v;
      for (std::size_t j = 0; j < md.size(); ++j) vbar(ei(md[j])) = mm(ei(j));
      Wsum = fast_solve(vbar, false) + fast_solve(vbar, true);
      // The quadratic-variation average needs these coefficients constant
      // across the intermediate equilibrium; verify on a lattice step.
      for (std::size_t j = 0; j < md.size(); ++j) {
        Eigen::VectorXd vp = vbar;
        vp(ei(md[j])) += avg_->lattice_step(md[j]);
        Eigen::MatrixXd Wp = fast_solve(vp, false) + fast_solve(vp, true);
        if ((Wp - Wsum).cwiseAbs().maxCoeff() >
            1e-6 * std::max(1.0, Wsum.cwiseAbs().maxCoeff()))
          throw PipelineError(
              PipelineError::Code::MomentClosureUnavailable,
              "diffusion matrix requires second moments of the intermediate level: "
              "the fastest-corrector coefficients vary across its equilibrium");
      }
    }
  } else if (avg_->has_fast_level()) {
    auto eq = avg_->fast_equilibrium(v);
    for (std::size_t k = 0; k < nr_; ++k)
      if (need[k]) lbb[k] = avg_->average_over(k, eq, v);
    if (uses_corrector) U = fast_solve(v, false);
  } else {
    Eigen::VectorXd z = avg_->state_from_v(v);
    for (std::size_t k = 0; k < nr_; ++k)
      if (need[k]) lbb[k] = avg_->limit_propensity(k, z);
  }

  auto amp_vec = [&](const Amplitude& a, std::size_t k) {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(ei(s0_));
    if (a.source == 0)
      x(ei(a.dir)) = avg_->pairings()(ei(slow[a.dir]), ei(k));
    else if (a.source == 1)
      x = -avg_->pairings()(ei(l1[a.dir]), ei(k)) * U.col(ei(a.dir));
    else
      x = -avg_->pairings()(ei(fd[a.dir]), ei(k)) * Wsum.col(ei(a.dir));
    return x;
  };

  for (const auto& pr : pairs) {
    Eigen::VectorXd va = amp_vec(*pr.a, pr.k), vb = amp_vec(*pr.b, pr.k);
    if (pr.divergent) {
      if (va.norm() > 1e-10 && vb.norm() > 1e-10)
        throw PipelineError(PipelineError::Code::DivergentCorrection,
                            "diffusion matrix grows with N: reaction '" +
                                D_->net.reactions[pr.k].name +
                                "' pairs jump amplitudes above the N^{-2p} scale");
      continue;
    }
    out += lbb[pr.k] * va * vb.transpose();
  }
  return 0.5 * (out + out.transpose());
}

Eigen::MatrixXd CorrectionModel::sigma(const Eigen::VectorXd& v) const {
  Eigen::MatrixXd G = Gbar(v);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  if (es.info() != Eigen::Success)
    throw PipelineError(PipelineError::Code::SingularSystem,
                        "eigendecomposition of the diffusion matrix failed");
  Eigen::VectorXd ev = es.eigenvalues();
  double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  Eigen::VectorXd root(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-10 * scale)
      throw PipelineError(PipelineError::Code::Unsupported,
                          "diffusion matrix has a negative eigenvalue");
    root(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double finite_N_propensity(const MultiscaleDecomposition& D, std::size_t k,
                           const Eigen::VectorXd& z, double N) {
  const auto& r = D.net.reactions[k];
  double acc = r.kappa;
  for (std::size_t i = 0; i < D.net.species.size(); ++i) {
    double unit = std::pow(N, -D.net.species[i].alpha.to_double());
    for (std::int64_t j = 0; j < r.inputs[i]; ++j)
      acc *= z(static_cast<Eigen::Index>(i)) - static_cast<double>(j) * unit;
  }
  return acc;
}

Eigen::VectorXd finite_N_slow_drift(const MultiscaleDecomposition& D,
                                    const Eigen::VectorXd& v, double N) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(D.s0));
  std::vector<double> vv(v.data(), v.data() + v.size());
  auto zz = D.state_from_functionals(vv);
  Eigen::VectorXd z = Eigen::Map<Eigen::VectorXd>(zz.data(), static_cast<Eigen::Index>(zz.size()));
  for (std::size_t l = 0; l < D.s0; ++l) {
    double alpha_l = D.directions[l].dir.alpha.to_double();
    for (std::size_t k = 0; k < D.net.reaction_count(); ++k) {
      double pairing = 0.0;
      for (std::size_t i = 0; i < D.net.species.size(); ++i)
        pairing += D.T(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(i)) *
                   static_cast<double>(D.net.reactions[k].net[i]);
      if (pairing == 0.0) continue;
      out(static_cast<Eigen::Index>(l)) += std::pow(N, D.rho[k].to_double() - alpha_l) *
                                           finite_N_propensity(D, k, z, N) * pairing;
    }
  }
  return out;
}

}  // namespace msrn
