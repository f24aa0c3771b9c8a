// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qavit/tensor.hpp"

namespace qavit {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct GradcheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates = 0;
    bool pass = true;
};

struct GradcheckOptions {
    double h = 1e-5;
    std::size_t sample_count = 200;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences (f(θ+h) − f(θ−h)) / 2h on up to `sample_count` coordinates
/// drawn uniformly without replacement across all `params`.
/// Relative error is |a − n| / max(|a|, |n|, 1e-12).
GradcheckReport gradcheck(const std::function<Tensor()>& f, std::span<const NamedTensor> params,
                          const GradcheckOptions& options = {});

/// Folds `other` into `into`, keeping the worse offender.
void merge_reports(GradcheckReport& into, const GradcheckReport& other);

}  // namespace qavit
