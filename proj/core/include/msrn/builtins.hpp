#pragma once

#include <string>
#include <vector>

#include "msrn/network.hpp"

namespace msrn {

// Names of the networks shipped with the library.
std::vector<std::string> builtin_names();

// Source text of a builtin network, byte-identical to the corresponding
// tools/networks/<name>.net file; throws std::invalid_argument for unknown
// names.
const std::string& builtin_text(const std::string& name);

// Parsed form of a builtin (text is canonical, so this cannot fail).
ParsedNetwork builtin_network(const std::string& name);

}  // namespace msrn
