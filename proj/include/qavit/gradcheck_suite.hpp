// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qavit/gradcheck.hpp"

namespace qavit {

struct SuiteEntry {
    std::string module;
    GradcheckReport report;
};

struct SuiteResult {
    std::vector<SuiteEntry> modules;
    GradcheckReport overall;
};

/// Float64 finite-difference check of every differentiable module: the
/// primitive ops, segmented attention, and two full models whose backbone,
/// question pathway, fused layers (gates open), LoRA paths and heads are
/// all checked through the task losses. About 6000 coordinates.
SuiteResult run_gradcheck_suite(std::uint64_t seed = 0, double tolerance = 1e-4);

}  // namespace qavit
