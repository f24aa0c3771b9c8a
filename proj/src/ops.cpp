// SPDX-License-Identifier: Apache-2.0

#include "qavit/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

namespace qavit {

namespace debug {

namespace {
std::atomic<GradientFault> g_fault{GradientFault::none};
}

void set_gradient_fault(GradientFault fault) { g_fault.store(fault); }
GradientFault gradient_fault() { return g_fault.load(); }

}  // namespace debug

namespace {

using detail::grad_span;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<MatRM<T>>;
template <class T>
using CMap = Eigen::Map<const MatRM<T>>;

template <class T>
CMap<T> cmap(const TensorImpl& impl, std::size_t r, std::size_t c) {
    return CMap<T>(detail::buffer_as<T>(impl.data).data(), static_cast<Eigen::Index>(r),
                   static_cast<Eigen::Index>(c));
}

template <class T>
Map<T> gmap(TensorImpl& impl, std::size_t r, std::size_t c) {
    return Map<T>(grad_span<T>(impl).data(), static_cast<Eigen::Index>(r),
                  static_cast<Eigen::Index>(c));
}

template <class T>
std::span<const T> data_of(const TensorImpl& impl) {
    return detail::buffer_as<T>(impl.data);
}

template <class T>
std::span<const T> grad_of(const TensorImpl& impl) {
    return detail::buffer_as<T>(*impl.grad);
}

void check_finite(const Tensor& out, const char* op) {
    if (!numeric_checks_enabled()) {
        return;
    }
    bool ok = dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto v = out.values<T>();
        return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
    });
    if (!ok) {
        throw NumericFault(std::string("non-finite value produced by ") + op);
    }
}

// Records `fn` as the backward rule of `out` when any input needs a gradient.
void record(Tensor& out, const char* op, std::initializer_list<const Tensor*> inputs,
            std::function<void(TensorImpl&)> fn) {
    check_finite(out, op);
    if (!grad_mode_enabled()) {
        return;
    }
    bool any = false;
    for (const auto* t : inputs) {
        any = any || t->impl()->needs_grad();
    }
    if (!any) {
        return;
    }
    auto node = std::make_shared<detail::Node>();
    node->op = op;
    for (const auto* t : inputs) {
        node->inputs.push_back(t->impl());
    }
    node->backward = std::move(fn);
    out.impl()->node = std::move(node);
}

void record_many(Tensor& out, const char* op, std::span<const Tensor> inputs,
                 std::function<void(TensorImpl&)> fn) {
    check_finite(out, op);
    if (!grad_mode_enabled()) {
        return;
    }
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.impl()->needs_grad(); });
    if (!any) {
        return;
    }
    auto node = std::make_shared<detail::Node>();
    node->op = op;
    for (const auto& t : inputs) {
        node->inputs.push_back(t.impl());
    }
    node->backward = std::move(fn);
    out.impl()->node = std::move(node);
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype()) {
        throw ShapeError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()) + ")");
    }
}

void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require_same_dtype(a, b, op);
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <class T>
T uniform01(std::mt19937_64& rng) {
    return static_cast<T>(static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

}  // namespace

std::vector<std::size_t> uniform_offsets(std::size_t count, std::size_t n) {
    std::vector<std::size_t> offsets(count + 1);
    for (std::size_t i = 0; i <= count; ++i) {
        offsets[i] = i * n;
    }
    return offsets;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    require_same_dtype(a, b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        Map<T>(out.values<T>().data(), m, n).noalias() = cmap<T>(*a.impl(), m, k) * cmap<T>(*b.impl(), k, n);
        ImplPtr ai = a.impl(), bi = b.impl();
        record(out, "matmul", {&a, &b}, [ai, bi, m, k, n](TensorImpl& o) {
            auto dc = CMap<T>(grad_of<T>(o).data(), m, n);
            if (ai->needs_grad()) {
                gmap<T>(*ai, m, k).noalias() += dc * cmap<T>(*bi, k, n).transpose();
            }
            if (bi->needs_grad()) {
                gmap<T>(*bi, k, n).noalias() += cmap<T>(*ai, m, k).transpose() * dc;
            }
        });
    });
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_matrix(x, "linear");
    require_matrix(weight, "linear");
    require_same_dtype(x, weight, "linear");
    const std::size_t m = x.rows(), in = x.cols(), outw = weight.rows();
    if (weight.cols() != in) {
        throw ShapeError("linear: input width " + std::to_string(in) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const bool has_bias = bias.defined();
    if (has_bias) {
        require_same_dtype(x, bias, "linear");
        if (bias.numel() != outw) {
            throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
        }
    }
    Tensor out = Tensor::zeros({m, outw}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto y = Map<T>(out.values<T>().data(), m, outw);
        y.noalias() = cmap<T>(*x.impl(), m, in) * cmap<T>(*weight.impl(), outw, in).transpose();
        if (has_bias) {
            y.rowwise() += cmap<T>(*bias.impl(), 1, outw).row(0);
        }
        ImplPtr xi = x.impl(), wi = weight.impl();
        ImplPtr bi = has_bias ? bias.impl() : nullptr;
        auto fn = [xi, wi, bi, m, in, outw](TensorImpl& o) {
            auto dy = CMap<T>(grad_of<T>(o).data(), m, outw);
            if (xi->needs_grad()) {
                gmap<T>(*xi, m, in).noalias() += dy * cmap<T>(*wi, outw, in);
            }
            if (wi->needs_grad()) {
                gmap<T>(*wi, outw, in).noalias() += dy.transpose() * cmap<T>(*xi, m, in);
            }
            if (bi && bi->needs_grad()) {
                gmap<T>(*bi, 1, outw) += dy.colwise().sum();
            }
        };
        if (has_bias) {
            record(out, "linear", {&x, &weight, &bias}, fn);
        } else {
            record(out, "linear", {&x, &weight}, fn);
        }
    });
    return out;
}

namespace {

// Elementwise binary op with same shapes. `fwd(a,b)`; `da(a,b,g)`, `db(a,b,g)`.
template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, DA da, DB db) {
    require_same_shape(a, b, op);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto av = a.values<T>();
        auto bv = b.values<T>();
        auto ov = out.values<T>();
        for (std::size_t i = 0; i < ov.size(); ++i) {
            ov[i] = fwd(av[i], bv[i]);
        }
        ImplPtr ai = a.impl(), bi = b.impl();
        record(out, op, {&a, &b}, [ai, bi, da, db](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto av = data_of<T>(*ai);
            auto bv = data_of<T>(*bi);
            if (ai->needs_grad()) {
                auto ga = grad_span<T>(*ai);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += da(av[i], bv[i], g[i]);
                }
            }
            if (bi->needs_grad()) {
                auto gb = grad_span<T>(*bi);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gb[i] += db(av[i], bv[i], g[i]);
                }
            }
        });
    });
    return out;
}

// Elementwise unary op; derivative expressed from input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv) {
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        auto ov = out.values<T>();
        for (std::size_t i = 0; i < ov.size(); ++i) {
            ov[i] = fwd(xv[i]);
        }
        ImplPtr xi = x.impl();
        std::vector<T> saved(ov.begin(), ov.end());
        record(out, op, {&x}, [xi, deriv, saved = std::move(saved)](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto xv = data_of<T>(*xi);
            auto gx = grad_span<T>(*xi);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i] * deriv(xv[i], saved[i]);
            }
        });
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "add", [](auto x, auto y) { return x + y; },
        [](auto, auto, auto g) { return g; }, [](auto, auto, auto g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "sub", [](auto x, auto y) { return x - y; },
        [](auto, auto, auto g) { return g; }, [](auto, auto, auto g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "mul", [](auto x, auto y) { return x * y; },
        [](auto, auto y, auto g) { return g * y; }, [](auto x, auto, auto g) { return g * x; });
}

Tensor scale(const Tensor& a, double factor) {
    return dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T f = static_cast<T>(factor);
        return unary(
            a, "scale", [f](T x) { return x * f; }, [f](T, T) { return f; });
    });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
    require_same_dtype(x, s, "scale_by");
    if (s.numel() != 1) {
        throw ShapeError("scale_by: factor must have one element, got " + shape_str(s.shape()));
    }
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T f = s.values<T>()[0];
        auto xv = x.values<T>();
        auto ov = out.values<T>();
        for (std::size_t i = 0; i < ov.size(); ++i) {
            ov[i] = xv[i] * f;
        }
        ImplPtr xi = x.impl(), si = s.impl();
        record(out, "scale_by", {&x, &s}, [xi, si](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto xv = data_of<T>(*xi);
            const T f = data_of<T>(*si)[0];
            if (xi->needs_grad()) {
                auto gx = grad_span<T>(*xi);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gx[i] += g[i] * f;
                }
            }
            if (si->needs_grad()) {
                T acc = 0;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    acc += g[i] * xv[i];
                }
                grad_span<T>(*si)[0] += acc;
            }
        });
    });
    return out;
}

Tensor add_row(const Tensor& x, const Tensor& b) {
    require_matrix(x, "add_row");
    require_same_dtype(x, b, "add_row");
    const std::size_t m = x.rows(), n = x.cols();
    if (b.numel() != n) {
        throw ShapeError("add_row: " + shape_str(b.shape()) + " cannot broadcast over " +
                         shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({m, n}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        Map<T>(out.values<T>().data(), m, n) = cmap<T>(*x.impl(), m, n).rowwise() + cmap<T>(*b.impl(), 1, n).row(0);
        ImplPtr xi = x.impl(), bi = b.impl();
        record(out, "add_row", {&x, &b}, [xi, bi, m, n](TensorImpl& o) {
            auto g = CMap<T>(grad_of<T>(o).data(), m, n);
            if (xi->needs_grad()) {
                gmap<T>(*xi, m, n) += g;
            }
            if (bi->needs_grad()) {
                gmap<T>(*bi, 1, n) += g.colwise().sum();
            }
        });
    });
    return out;
}

Tensor add_tiled(const Tensor& x, const Tensor& t) {
    require_matrix(x, "add_tiled");
    require_matrix(t, "add_tiled");
    require_same_dtype(x, t, "add_tiled");
    const std::size_t r = t.rows(), n = t.cols();
    if (x.cols() != n || r == 0 || x.rows() % r != 0) {
        throw ShapeError("add_tiled: " + shape_str(t.shape()) + " does not tile " +
                         shape_str(x.shape()));
    }
    const std::size_t groups = x.rows() / r;
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        auto tv = t.values<T>();
        auto ov = out.values<T>();
        for (std::size_t g = 0; g < groups; ++g) {
            for (std::size_t i = 0; i < r * n; ++i) {
                ov[g * r * n + i] = xv[g * r * n + i] + tv[i];
            }
        }
        ImplPtr xi = x.impl(), ti = t.impl();
        record(out, "add_tiled", {&x, &t}, [xi, ti, groups, r, n](TensorImpl& o) {
            auto g = grad_of<T>(o);
            if (xi->needs_grad()) {
                auto gx = grad_span<T>(*xi);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gx[i] += g[i];
                }
            }
            if (ti->needs_grad()) {
                auto gt = grad_span<T>(*ti);
                for (std::size_t k = 0; k < groups; ++k) {
                    for (std::size_t i = 0; i < r * n; ++i) {
                        gt[i] += g[k * r * n + i];
                    }
                }
            }
        });
    });
    return out;
}

Tensor gelu(const Tensor& x) {
    return dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        return unary(
            x, "gelu",
            [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2))); },
            [](T v, T) {
                T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
                T pdf = std::exp(T(-0.5) * v * v) * T(0.5 * M_2_SQRTPI * M_SQRT1_2);
                T d = cdf + v * pdf;
                return debug::gradient_fault() == debug::GradientFault::gelu_sign_flip ? -d : d;
            });
    });
}

Tensor tanh(const Tensor& x) {
    return dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        return unary(
            x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
    });
}

Tensor dropout(const Tensor& x, double p, bool train, std::mt19937_64& rng) {
    if (p < 0.0 || p >= 1.0) {
        throw RangeError("dropout: p must lie in [0, 1)");
    }
    if (!train || p == 0.0) {
        return x;
    }
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        auto ov = out.values<T>();
        std::vector<T> mask(xv.size());
        const T keep = static_cast<T>(1.0 / (1.0 - p));
        for (std::size_t i = 0; i < xv.size(); ++i) {
            mask[i] = uniform01<double>(rng) < p ? T(0) : keep;
            ov[i] = xv[i] * mask[i];
        }
        ImplPtr xi = x.impl();
        record(out, "dropout", {&x}, [xi, mask = std::move(mask)](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto gx = grad_span<T>(*xi);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i] * mask[i];
            }
        });
    });
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    require_matrix(x, "softmax_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (m == 0 || n == 0) {
        throw ShapeError("softmax_rows: empty input " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({m, n}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        auto ov = out.values<T>();
        for (std::size_t i = 0; i < m; ++i) {
            const T* row = xv.data() + i * n;
            T* dst = ov.data() + i * n;
            T mx = *std::max_element(row, row + n);
            T total = 0;
            for (std::size_t j = 0; j < n; ++j) {
                dst[j] = std::exp(row[j] - mx);
                total += dst[j];
            }
            for (std::size_t j = 0; j < n; ++j) {
                dst[j] /= total;
            }
        }
        ImplPtr xi = x.impl();
        std::vector<T> y(ov.begin(), ov.end());
        record(out, "softmax_rows", {&x}, [xi, y = std::move(y), m, n](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto gx = grad_span<T>(*xi);
            for (std::size_t i = 0; i < m; ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    dot += g[i * n + j] * y[i * n + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                }
            }
        });
    });
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_matrix(x, "layernorm");
    require_same_dtype(x, gamma, "layernorm");
    require_same_dtype(x, beta, "layernorm");
    if (!(eps > 0.0)) {
        throw RangeError("layernorm: eps must be positive");
    }
    const std::size_t m = x.rows(), c = x.cols();
    if (gamma.numel() != c || beta.numel() != c) {
        throw ShapeError("layernorm: affine parameters do not match width " + std::to_string(c));
    }
    Tensor out = Tensor::zeros({m, c}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        auto gv = gamma.values<T>();
        auto bv = beta.values<T>();
        auto ov = out.values<T>();
        std::vector<T> xhat(m * c);
        std::vector<T> rstd(m);
        for (std::size_t i = 0; i < m; ++i) {
            const T* row = xv.data() + i * c;
            T mu = 0;
            for (std::size_t j = 0; j < c; ++j) {
                mu += row[j];
            }
            mu /= static_cast<T>(c);
            T var = 0;
            for (std::size_t j = 0; j < c; ++j) {
                var += (row[j] - mu) * (row[j] - mu);
            }
            var /= static_cast<T>(c);
            rstd[i] = T(1) / std::sqrt(var + static_cast<T>(eps));
            for (std::size_t j = 0; j < c; ++j) {
                xhat[i * c + j] = (row[j] - mu) * rstd[i];
                ov[i * c + j] = gv[j] * xhat[i * c + j] + bv[j];
            }
        }
        ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
        record(out, "layernorm", {&x, &gamma, &beta},
               [xi, gi, bi, xhat = std::move(xhat), rstd = std::move(rstd), m, c](TensorImpl& o) {
                   auto g = grad_of<T>(o);
                   auto gv = data_of<T>(*gi);
                   if (gi->needs_grad() || bi->needs_grad()) {
                       for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t j = 0; j < c; ++j) {
                               if (gi->needs_grad()) {
                                   grad_span<T>(*gi)[j] += g[i * c + j] * xhat[i * c + j];
                               }
                               if (bi->needs_grad()) {
                                   grad_span<T>(*bi)[j] += g[i * c + j];
                               }
                           }
                       }
                   }
                   if (!xi->needs_grad()) {
                       return;
                   }
                   auto gx = grad_span<T>(*xi);
                   std::vector<T> dxhat(c);
                   for (std::size_t i = 0; i < m; ++i) {
                       T mean_d = 0, mean_dx = 0;
                       for (std::size_t j = 0; j < c; ++j) {
                           dxhat[j] = g[i * c + j] * gv[j];
                           mean_d += dxhat[j];
                           mean_dx += dxhat[j] * xhat[i * c + j];
                       }
                       mean_d /= static_cast<T>(c);
                       mean_dx /= static_cast<T>(c);
                       for (std::size_t j = 0; j < c; ++j) {
                           gx[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                       }
                   }
               });
    });
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    const Tensor parts[] = {a, b};
    return concat_rows(std::span<const Tensor>(parts));
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    require_matrix(parts[0], "concat_rows");
    const std::size_t c = parts[0].cols();
    std::size_t total = 0;
    std::vector<std::size_t> offsets;
    offsets.reserve(parts.size() + 1);
    for (const auto& p : parts) {
        require_matrix(p, "concat_rows");
        require_same_dtype(parts[0], p, "concat_rows");
        if (p.cols() != c) {
            throw ShapeError("concat_rows: column counts differ (" + std::to_string(c) + " vs " +
                             std::to_string(p.cols()) + ")");
        }
        offsets.push_back(total);
        total += p.rows();
    }
    offsets.push_back(total);
    Tensor out = Tensor::zeros({total, c}, parts[0].dtype());
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto ov = out.values<T>();
        std::vector<ImplPtr> impls;
        impls.reserve(parts.size());
        for (std::size_t i = 0; i < parts.size(); ++i) {
            auto pv = parts[i].values<T>();
            std::copy(pv.begin(), pv.end(), ov.begin() + static_cast<std::ptrdiff_t>(offsets[i] * c));
            impls.push_back(parts[i].impl());
        }
        record_many(out, "concat_rows", parts,
                    [impls = std::move(impls), offsets, c](TensorImpl& o) {
                        auto g = grad_of<T>(o);
                        for (std::size_t i = 0; i < impls.size(); ++i) {
                            if (!impls[i]->needs_grad()) {
                                continue;
                            }
                            auto gp = grad_span<T>(*impls[i]);
                            const T* src = g.data() + offsets[i] * c;
                            for (std::size_t j = 0; j < gp.size(); ++j) {
                                gp[j] += src[j];
                            }
                        }
                    });
    });
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t end) {
    require_matrix(x, "slice_rows");
    if (start > end || end > x.rows()) {
        throw RangeError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(end) +
                         ") outside " + std::to_string(x.rows()) + " rows");
    }
    const std::size_t c = x.cols();
    Tensor out = Tensor::zeros({end - start, c}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        auto ov = out.values<T>();
        std::copy(xv.begin() + static_cast<std::ptrdiff_t>(start * c),
                  xv.begin() + static_cast<std::ptrdiff_t>(end * c), ov.begin());
        ImplPtr xi = x.impl();
        record(out, "slice_rows", {&x}, [xi, start, c](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto gx = grad_span<T>(*xi);
            for (std::size_t j = 0; j < g.size(); ++j) {
                gx[start * c + j] += g[j];
            }
        });
    });
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t end) {
    require_matrix(x, "slice_cols");
    if (start > end || end > x.cols()) {
        throw RangeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(end) +
                         ") outside " + std::to_string(x.cols()) + " columns");
    }
    const std::size_t m = x.rows(), c = x.cols(), w = end - start;
    Tensor out = Tensor::zeros({m, w}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        auto ov = out.values<T>();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                ov[i * w + j] = xv[i * c + start + j];
            }
        }
        ImplPtr xi = x.impl();
        record(out, "slice_cols", {&x}, [xi, start, m, c, w](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto gx = grad_span<T>(*xi);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    gx[i * c + start + j] += g[i * w + j];
                }
            }
        });
    });
    return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
    require_matrix(table, "gather_rows");
    const std::size_t rows = table.rows(), c = table.cols();
    for (auto id : ids) {
        if (id >= rows) {
            throw RangeError("gather_rows: id " + std::to_string(id) + " out of range for " +
                             std::to_string(rows) + " rows");
        }
    }
    Tensor out = Tensor::zeros({ids.size(), c}, table.dtype());
    dispatch(table.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto tv = table.values<T>();
        auto ov = out.values<T>();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * c), c,
                        ov.begin() + static_cast<std::ptrdiff_t>(i * c));
        }
        ImplPtr ti = table.impl();
        std::vector<std::size_t> saved(ids.begin(), ids.end());
        record(out, "gather_rows", {&table}, [ti, saved = std::move(saved), c](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto gt = grad_span<T>(*ti);
            for (std::size_t i = 0; i < saved.size(); ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    gt[saved[i] * c + j] += g[i * c + j];
                }
            }
        });
    });
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        out.values<T>()[0] = std::accumulate(xv.begin(), xv.end(), T(0));
        ImplPtr xi = x.impl();
        record(out, "sum", {&x}, [xi](TensorImpl& o) {
            const T g = grad_of<T>(o)[0];
            for (auto& v : grad_span<T>(*xi)) {
                v += g;
            }
        });
    });
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) {
        throw ShapeError("mean: empty input");
    }
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_rows(const Tensor& x, std::size_t group) {
    require_matrix(x, "mean_rows");
    if (group == 0 || x.rows() % group != 0) {
        throw ShapeError("mean_rows: group " + std::to_string(group) + " does not divide " +
                         std::to_string(x.rows()) + " rows");
    }
    return segment_mean_rows(x, uniform_offsets(x.rows() / group, group));
}

Tensor segment_mean_rows(const Tensor& x, std::span<const std::size_t> offsets) {
    require_matrix(x, "segment_mean_rows");
    if (offsets.empty() || offsets.front() != 0 || offsets.back() != x.rows() ||
        !std::is_sorted(offsets.begin(), offsets.end())) {
        throw ShapeError("segment_mean_rows: offsets do not partition the rows");
    }
    const std::size_t segs = offsets.size() - 1, c = x.cols();
    Tensor out = Tensor::zeros({segs, c}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.values<T>();
        auto ov = out.values<T>();
        for (std::size_t s = 0; s < segs; ++s) {
            const std::size_t n = offsets[s + 1] - offsets[s];
            if (n == 0) {
                continue;
            }
            for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) {
                for (std::size_t j = 0; j < c; ++j) {
                    ov[s * c + j] += xv[r * c + j];
                }
            }
            for (std::size_t j = 0; j < c; ++j) {
                ov[s * c + j] /= static_cast<T>(n);
            }
        }
        ImplPtr xi = x.impl();
        std::vector<std::size_t> offs(offsets.begin(), offsets.end());
        record(out, "segment_mean_rows", {&x}, [xi, offs = std::move(offs), segs, c](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto gx = grad_span<T>(*xi);
            for (std::size_t s = 0; s < segs; ++s) {
                const std::size_t n = offs[s + 1] - offs[s];
                if (n == 0) {
                    continue;
                }
                const T inv = T(1) / static_cast<T>(n);
                for (std::size_t r = offs[s]; r < offs[s + 1]; ++r) {
                    for (std::size_t j = 0; j < c; ++j) {
                        gx[r * c + j] += g[s * c + j] * inv;
                    }
                }
            }
        });
    });
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    require_matrix(logits, "cross_entropy");
    const std::size_t b = logits.rows(), v = logits.cols();
    if (labels.size() != b || b == 0) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
    }
    for (auto l : labels) {
        if (l >= v) {
            throw RangeError("cross_entropy: label " + std::to_string(l) + " out of range");
        }
    }
    Tensor out = Tensor::zeros({}, logits.dtype());
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto lv = logits.values<T>();
        std::vector<T> probs(b * v);
        T total = 0;
        for (std::size_t i = 0; i < b; ++i) {
            const T* row = lv.data() + i * v;
            T mx = *std::max_element(row, row + v);
            T z = 0;
            for (std::size_t j = 0; j < v; ++j) {
                probs[i * v + j] = std::exp(row[j] - mx);
                z += probs[i * v + j];
            }
            for (std::size_t j = 0; j < v; ++j) {
                probs[i * v + j] /= z;
            }
            total += (std::log(z) + mx) - row[labels[i]];
        }
        out.values<T>()[0] = total / static_cast<T>(b);
        ImplPtr li = logits.impl();
        std::vector<std::size_t> labs(labels.begin(), labels.end());
        record(out, "cross_entropy", {&logits},
               [li, probs = std::move(probs), labs = std::move(labs), b, v](TensorImpl& o) {
                   const T g = grad_of<T>(o)[0] / static_cast<T>(b);
                   auto gl = grad_span<T>(*li);
                   for (std::size_t i = 0; i < b; ++i) {
                       for (std::size_t j = 0; j < v; ++j) {
                           gl[i * v + j] += g * (probs[i * v + j] - (j == labs[i] ? T(1) : T(0)));
                       }
                   }
               });
    });
    return out;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    require_same_shape(logits, targets, "bce_with_logits");
    if (logits.numel() == 0) {
        throw ShapeError("bce_with_logits: empty input");
    }
    Tensor out = Tensor::zeros({}, logits.dtype());
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = logits.values<T>();
        auto tv = targets.values<T>();
        const std::size_t n = xv.size();
        T total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const T x = xv[i];
            total += std::max(x, T(0)) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
        }
        out.values<T>()[0] = total / static_cast<T>(n);
        ImplPtr li = logits.impl(), ti = targets.impl();
        record(out, "bce_with_logits", {&logits}, [li, ti, n](TensorImpl& o) {
            const T g = grad_of<T>(o)[0] / static_cast<T>(n);
            auto xv = data_of<T>(*li);
            auto tv = data_of<T>(*ti);
            auto gl = grad_span<T>(*li);
            for (std::size_t i = 0; i < n; ++i) {
                const T sig = T(1) / (T(1) + std::exp(-xv[i]));
                gl[i] += g * (sig - tv[i]);
            }
        });
    });
    return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::size_t> q_offsets, std::span<const std::size_t> kv_offsets,
                 std::vector<std::vector<double>>* probs_out) {
    require_matrix(q, "attention");
    require_matrix(k, "attention");
    require_matrix(v, "attention");
    require_same_dtype(q, k, "attention");
    require_same_dtype(q, v, "attention");
    const std::size_t c = q.cols();
    if (k.cols() != c || v.cols() != c || k.rows() != v.rows()) {
        throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " are inconsistent");
    }
    if (heads == 0 || c % heads != 0) {
        throw ShapeError("attention: width " + std::to_string(c) + " not divisible by " +
                         std::to_string(heads) + " heads");
    }
    if (q_offsets.size() != kv_offsets.size() || q_offsets.size() < 2 ||
        q_offsets.front() != 0 || kv_offsets.front() != 0 || q_offsets.back() != q.rows() ||
        kv_offsets.back() != k.rows() || !std::is_sorted(q_offsets.begin(), q_offsets.end()) ||
        !std::is_sorted(kv_offsets.begin(), kv_offsets.end())) {
        throw ShapeError("attention: segment offsets do not partition the inputs");
    }
    const std::size_t segs = q_offsets.size() - 1, dh = c / heads;
    std::vector<std::size_t> p_offsets(segs + 1, 0);
    for (std::size_t s = 0; s < segs; ++s) {
        const std::size_t nq = q_offsets[s + 1] - q_offsets[s];
        const std::size_t nk = kv_offsets[s + 1] - kv_offsets[s];
        if (nq > 0 && nk == 0) {
            throw ShapeError("attention: segment " + std::to_string(s) + " has queries but no keys");
        }
        p_offsets[s + 1] = p_offsets[s] + heads * nq * nk;
    }
    if (probs_out) {
        probs_out->clear();
    }
    Tensor out = Tensor::zeros(q.shape(), q.dtype());
    dispatch(q.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto qv = q.values<T>();
        auto kvals = k.values<T>();
        auto vv = v.values<T>();
        auto ov = out.values<T>();
        const T sc = T(1) / std::sqrt(static_cast<T>(dh));
        std::vector<T> probs(p_offsets.back());
        for (std::size_t s = 0; s < segs; ++s) {
            const std::size_t q0 = q_offsets[s], nq = q_offsets[s + 1] - q0;
            const std::size_t k0 = kv_offsets[s], nk = kv_offsets[s + 1] - k0;
            for (std::size_t h = 0; h < heads; ++h) {
                T* p = probs.data() + p_offsets[s] + h * nq * nk;
                for (std::size_t i = 0; i < nq; ++i) {
                    const T* qi = qv.data() + (q0 + i) * c + h * dh;
                    T* pi = p + i * nk;
                    T mx = -std::numeric_limits<T>::infinity();
                    for (std::size_t j = 0; j < nk; ++j) {
                        const T* kj = kvals.data() + (k0 + j) * c + h * dh;
                        T dot = 0;
                        for (std::size_t d = 0; d < dh; ++d) {
                            dot += qi[d] * kj[d];
                        }
                        pi[j] = dot * sc;
                        mx = std::max(mx, pi[j]);
                    }
                    T z = 0;
                    for (std::size_t j = 0; j < nk; ++j) {
                        pi[j] = std::exp(pi[j] - mx);
                        z += pi[j];
                    }
                    T* oi = ov.data() + (q0 + i) * c + h * dh;
                    for (std::size_t j = 0; j < nk; ++j) {
                        pi[j] /= z;
                        const T* vj = vv.data() + (k0 + j) * c + h * dh;
                        for (std::size_t d = 0; d < dh; ++d) {
                            oi[d] += pi[j] * vj[d];
                        }
                    }
                }
                if (probs_out) {
                    probs_out->emplace_back(p, p + nq * nk);
                }
            }
        }
        ImplPtr qi_ = q.impl(), ki_ = k.impl(), vi_ = v.impl();
        std::vector<std::size_t> qo(q_offsets.begin(), q_offsets.end());
        std::vector<std::size_t> ko(kv_offsets.begin(), kv_offsets.end());
        record(out, "attention", {&q, &k, &v},
               [qi_, ki_, vi_, probs = std::move(probs), p_offsets, qo = std::move(qo),
                ko = std::move(ko), heads, c, dh, sc, segs](TensorImpl& o) {
                   auto g = grad_of<T>(o);
                   auto qv = data_of<T>(*qi_);
                   auto kvals = data_of<T>(*ki_);
                   auto vv = data_of<T>(*vi_);
                   const bool need_q = qi_->needs_grad();
                   const bool need_k = ki_->needs_grad();
                   const bool need_v = vi_->needs_grad();
                   std::span<T> gq, gk, gv;
                   if (need_q) gq = grad_span<T>(*qi_);
                   if (need_k) gk = grad_span<T>(*ki_);
                   if (need_v) gv = grad_span<T>(*vi_);
                   std::vector<T> dp;
                   for (std::size_t s = 0; s < segs; ++s) {
                       const std::size_t q0 = qo[s], nq = qo[s + 1] - q0;
                       const std::size_t k0 = ko[s], nk = ko[s + 1] - k0;
                       dp.resize(nk);
                       for (std::size_t h = 0; h < heads; ++h) {
                           const T* p = probs.data() + p_offsets[s] + h * nq * nk;
                           for (std::size_t i = 0; i < nq; ++i) {
                               const T* gi = g.data() + (q0 + i) * c + h * dh;
                               const T* pi = p + i * nk;
                               T dot = 0;
                               for (std::size_t j = 0; j < nk; ++j) {
                                   const T* vj = vv.data() + (k0 + j) * c + h * dh;
                                   T acc = 0;
                                   for (std::size_t d = 0; d < dh; ++d) {
                                       acc += gi[d] * vj[d];
                                   }
                                   dp[j] = acc;
                                   dot += acc * pi[j];
                                   if (need_v) {
                                       T* gvj = gv.data() + (k0 + j) * c + h * dh;
                                       for (std::size_t d = 0; d < dh; ++d) {
                                           gvj[d] += pi[j] * gi[d];
                                       }
                                   }
                               }
                               if (!need_q && !need_k) {
                                   continue;
                               }
                               const T* qrow = qv.data() + (q0 + i) * c + h * dh;
                               T* gqi = need_q ? gq.data() + (q0 + i) * c + h * dh : nullptr;
                               for (std::size_t j = 0; j < nk; ++j) {
                                   const T ds = pi[j] * (dp[j] - dot) * sc;
                                   if (need_q) {
                                       const T* kj = kvals.data() + (k0 + j) * c + h * dh;
                                       for (std::size_t d = 0; d < dh; ++d) {
                                           gqi[d] += ds * kj[d];
                                       }
                                   }
                                   if (need_k) {
                                       T* gkj = gk.data() + (k0 + j) * c + h * dh;
                                       for (std::size_t d = 0; d < dh; ++d) {
                                           gkj[d] += ds * qrow[d];
                                       }
                                   }
                               }
                           }
                       }
                   }
               });
    });
    return out;
}

Tensor Tensor::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(shape()) + " as " +
                         shape_str(new_shape));
    }
    Tensor out = Tensor::zeros(std::move(new_shape), dtype());
    out.impl()->data = impl_->data;
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        ImplPtr xi = impl_;
        record(out, "reshape", {this}, [xi](TensorImpl& o) {
            auto g = grad_of<T>(o);
            auto gx = grad_span<T>(*xi);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
            }
        });
    });
    return out;
}

}  // namespace qavit
