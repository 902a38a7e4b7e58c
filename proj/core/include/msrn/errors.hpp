#pragma once

#include <stdexcept>
#include <string>

namespace msrn {

// Structural or numerical failure of the analysis pipeline (distinct from
// ParseError). The CLI maps ParseError -> exit 1, PipelineError -> exit 2.
class PipelineError : public std::runtime_error {
 public:
  enum class Code {
    SlowJumpClass,       // slow level keeps a jump term: no deterministic limit
    TooManyLevels,       // more than two fast time scales
    TimeNotNormalized,   // slowest exponent m0 != 0; rerun with the suggested gamma
    NoSlowDynamics,      // every slow direction is conserved
    NoHomogeneousBasis,  // subspace mixes abundance exponents
    ReducibleFastChain,  // conditional equilibrium not unique
    UnboundedFastChain,  // finite-state solve impossible
    MomentClosureUnavailable,
    SingularSystem,
    CenteringFailure,     // Poisson right-hand side not centered
    DivergentCorrection,  // diffusion term grows with N
    SimulationFailure,    // event cap, propensity overflow, non-finite state
    Unsupported,
  };

  PipelineError(Code c, const std::string& msg) : std::runtime_error(msg), code_(c) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

}  // namespace msrn
