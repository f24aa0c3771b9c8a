// SPDX-License-Identifier: Apache-2.0

#include "qavit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace qavit {

GradcheckReport gradcheck(const std::function<Tensor()>& f, std::span<const NamedTensor> params,
                          const GradcheckOptions& options) {
    if (options.h < 1e-7 || options.h > 1e-3) {
        throw RangeError("gradcheck: h must lie in [1e-7, 1e-3]");
    }
    for (const auto& p : params) {
        if (p.tensor.dtype() != DType::f64) {
            throw ShapeError("gradcheck: parameter " + p.name + " is not float64");
        }
    }

    for (const auto& p : params) {
        const_cast<Tensor&>(p.tensor).zero_grad();
    }
    backward(f());
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p.tensor.grad_vector());
    }

    // (param, index) pairs, sampled without replacement.
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].tensor.numel(); ++j) {
            coords.emplace_back(i, j);
        }
    }
    if (coords.size() > options.sample_count) {
        std::mt19937_64 rng(options.seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(options.sample_count);
        std::sort(coords.begin(), coords.end());
    }

    GradcheckReport report;
    NoGradGuard no_grad;
    for (auto [pi, j] : coords) {
        Tensor t = params[pi].tensor;
        const double original = t.at(j);
        t.set(j, original + options.h);
        const double plus = f().item();
        t.set(j, original - options.h);
        const double minus = f().item();
        t.set(j, original);
        const double numeric = (plus - minus) / (2.0 * options.h);
        const double a = analytic[pi][j];
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
        ++report.coordinates;
        if (report.coordinates == 1 || rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_param = params[pi].name;
            report.worst_index = j;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report.pass = report.max_rel_err < options.tolerance;
    return report;
}

void merge_reports(GradcheckReport& into, const GradcheckReport& other) {
    if (other.coordinates > 0 &&
        (into.coordinates == 0 || other.max_rel_err > into.max_rel_err)) {
        into.max_rel_err = other.max_rel_err;
        into.worst_param = other.worst_param;
        into.worst_index = other.worst_index;
        into.worst_analytic = other.worst_analytic;
        into.worst_numeric = other.worst_numeric;
    }
    into.coordinates += other.coordinates;
    into.pass = into.pass && other.pass;
}

}  // namespace qavit
