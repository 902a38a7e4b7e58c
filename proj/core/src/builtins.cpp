#include "msrn/builtins.hpp"

#include <stdexcept>

namespace msrn {

namespace {

const std::string k_viral = R"raw(# Intracellular viral infection: template T, genome G, structural protein S.
network viral
species T alpha 0 init 0
species G alpha 2/3 init 10
species S alpha 1 init 0
reaction genome_prod : T -> T + G kappa 1 beta 0
reaction template_form : G -> T kappa 2.5 beta -2/3
reaction protein_prod : T -> T + S kappa 1 beta 1
reaction template_deg : T -> 0 kappa 0.25 beta 0
reaction protein_deg : S -> 0 kappa 2 beta 0
reaction assembly : G + S -> 0 kappa 0.75 beta -5/3
N 1000
gamma 2/3
tend 1.5
seed 42
)raw";
const std::string k_michaelis_menten = R"raw(# Michaelis-Menten enzyme kinetics with M = 5 enzyme molecules.
network michaelis-menten
species E alpha 0 init 5
species S alpha 1 init 50
species SE alpha 0 init 0
species P alpha 1 init 0
reaction bind : E + S -> SE kappa 0.1 beta 0
reaction unbind : SE -> E + S kappa 5 beta 1
reaction convert : SE -> E + P kappa 1 beta 1
N 100
gamma 0
tend 30
seed 42
)raw";
const std::string k_enzyme3 = R"raw(# Enzyme kinetics with an inactive enzyme form F flipping on a faster scale.
network enzyme3
species E alpha 0 init 5
species S alpha 1 init 50
species SE alpha 0 init 0
species P alpha 1 init 0
species F alpha 0 init 0
reaction bind : E + S -> SE kappa 0.5 beta 0
reaction unbind : SE -> E + S kappa 5 beta 1
reaction convert : SE -> E + P kappa 1 beta 1
reaction deactivate : E -> F kappa 0.5 beta 2
reaction activate : F -> E kappa 0.5 beta 2
N 100
gamma 0
tend 15
seed 42
)raw";

}  // namespace

std::vector<std::string> builtin_names() { return {"viral", "michaelis-menten", "enzyme3"}; }

const std::string& builtin_text(const std::string& name) {
  if (name == "viral") return k_viral;
  if (name == "michaelis-menten") return k_michaelis_menten;
  if (name == "enzyme3") return k_enzyme3;
  throw std::invalid_argument("unknown builtin network '" + name +
                              "' (available: viral, michaelis-menten, enzyme3)");
}

ParsedNetwork builtin_network(const std::string& name) {
  return parse_network(builtin_text(name));
}

}  // namespace msrn
