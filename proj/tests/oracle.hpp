// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "qavit/layers.hpp"

// Loop-level reference implementations shared by the unit and acceptance
// suites. They read weights through Tensor::at and nothing else.
namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat rows_of(const qavit::Tensor& t) {
    Mat m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i * t.cols() + j);
    return m;
}

inline std::vector<double> ln_row(const std::vector<double>& x, const qavit::LayerNormWeights& ln) {
    double mu = std::accumulate(x.begin(), x.end(), 0.0) / x.size(), var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= x.size();
    std::vector<double> y(x.size());
    for (std::size_t j = 0; j < x.size(); ++j)
        y[j] = (x[j] - mu) / std::sqrt(var + ln.eps) * ln.gamma.at(j) + ln.beta.at(j);
    return y;
}

inline std::vector<double> affine_row(const qavit::Linear& l, const std::vector<double>& x) {
    std::vector<double> y(l.out_features());
    for (std::size_t o = 0; o < y.size(); ++o) {
        y[o] = l.bias.at(o);
        for (std::size_t k = 0; k < x.size(); ++k) y[o] += l.weight.at(o * x.size() + k) * x[k];
    }
    return y;
}

// Each visual query attends over all M + K normalized rows.
inline Mat brute_fused(const Mat& fv, const Mat& fq, const qavit::BlockWeights& w, std::size_t heads) {
    Mat seq;
    for (const auto& r : fv) seq.push_back(ln_row(r, w.ln1));
    for (const auto& r : fq) seq.push_back(ln_row(r, w.ln1));
    const std::size_t c = fv[0].size(), d = c / heads;
    Mat out(fv.size(), std::vector<double>(c, 0.0));
    for (std::size_t i = 0; i < fv.size(); ++i) {
        auto q = affine_row(w.q, seq[i]);
        for (std::size_t h = 0; h < heads; ++h) {
            std::vector<double> s;
            Mat vals;
            for (const auto& row : seq) {
                auto k = affine_row(w.k, row);
                double dot = 0;
                for (std::size_t e = 0; e < d; ++e) dot += q[h * d + e] * k[h * d + e];
                s.push_back(dot / std::sqrt(static_cast<double>(d)));
                vals.push_back(affine_row(w.v, row));
            }
            double mx = *std::max_element(s.begin(), s.end()), z = 0;
            for (auto& x : s) z += (x = std::exp(x - mx));
            for (std::size_t j = 0; j < s.size(); ++j)
                for (std::size_t e = 0; e < d; ++e) out[i][h * d + e] += s[j] / z * vals[j][h * d + e];
        }
    }
    return out;
}

inline double max_abs_diff(const qavit::Tensor& a, const qavit::Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
    return m;
}

}  // namespace oracle
