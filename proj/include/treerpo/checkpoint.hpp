// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "treerpo/model.hpp"

namespace treerpo {

// Versioned binary container: magic "TRPO", a format version, a JSON header
// (architecture config, vocabulary, parameter names and shapes) and the raw
// parameter data as little-endian IEEE-754 doubles in row-major order.
void save_checkpoint(const std::string& path, const PolicyModel& model);
PolicyModel load_checkpoint(const std::string& path);

}  // namespace treerpo
