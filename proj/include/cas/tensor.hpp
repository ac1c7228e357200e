#pragma once

// Reverse-mode autodiff over dense row-major tensors. The op set is the
// closed list the pipeline needs: matmul, add/sub/mul/scale, masked softmax,
// log_softmax, layer_norm, gelu, log/exp/minimum/clamp (policy objective),
// gather/concat/slice/reshape/broadcast structural ops, mean/sum reductions
// and cross_entropy. Dense storage, no broadcasting beyond leading-batch
// (suffix-shape) expansion.

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "cas/common.hpp"

namespace cas {

using shape_t = std::vector<int>;

inline size_t numel(const shape_t& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const shape_t& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {
// Thread-local switch: when false, ops do not record parents or backward
// closures, so intermediates are plain values.
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

struct no_grad_guard {
    bool prev;
    no_grad_guard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~no_grad_guard() { detail::grad_enabled_flag() = prev; }
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <class S>
struct tensor_node {
    shape_t shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated on first use
    bool requires_grad = false;
    std::vector<std::shared_ptr<tensor_node<S>>> parents;
    std::function<void(tensor_node<S>&)> backprop;  // pulls self.grad into parents

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

template <class S = double>
class tensor {
public:
    using node_t = tensor_node<S>;
    using node_ptr = std::shared_ptr<node_t>;

    tensor() = default;
    explicit tensor(node_ptr n) : n_(std::move(n)) {}

    static tensor zeros(shape_t shape) {
        auto n = std::make_shared<node_t>();
        n->value.assign(numel(shape), S(0));
        n->shape = std::move(shape);
        return tensor(n);
    }

    static tensor full(shape_t shape, S v) {
        tensor t = zeros(std::move(shape));
        std::fill(t.n_->value.begin(), t.n_->value.end(), v);
        return t;
    }

    static tensor from_data(shape_t shape, std::vector<S> data) {
        if (numel(shape) != data.size())
            throw shape_error("tensor::from_data: shape " + shape_str(shape) + " does not match data length " +
                              std::to_string(data.size()));
        auto n = std::make_shared<node_t>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return tensor(n);
    }

    static tensor scalar(S v) { return from_data({1}, {v}); }

    // Trainable leaf.
    static tensor param(shape_t shape, std::vector<S> data) {
        tensor t = from_data(std::move(shape), std::move(data));
        t.n_->requires_grad = true;
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const shape_t& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    size_t size() const { return n_->value.size(); }
    std::vector<S>& value() { return n_->value; }
    const std::vector<S>& value() const { return n_->value; }
    std::vector<S>& grad() { return n_->grad; }
    const std::vector<S>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }
    node_ptr node() const { return n_; }

    S item() const {
        if (size() != 1) throw contract_error("tensor::item: tensor has " + std::to_string(size()) + " elements");
        return n_->value[0];
    }

    S at(int i) const { return n_->value[static_cast<size_t>(i)]; }
    S at(int i, int j) const {
        return n_->value[static_cast<size_t>(i) * dim(1) + j];
    }
    S at(int i, int j, int k) const {
        return n_->value[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
    }

    void ensure_grad() { n_->ensure_grad(); }
    void zero_grad() {
        n_->ensure_grad();
        n_->zero_grad();
    }

private:
    node_ptr n_;
};

namespace detail {

template <class S>
std::shared_ptr<tensor_node<S>> make_node(shape_t shape, std::vector<S> value,
                                          std::vector<std::shared_ptr<tensor_node<S>>> parents,
                                          std::function<void(tensor_node<S>&)> backprop) {
    auto n = std::make_shared<tensor_node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_enabled_flag()) {
        bool any = false;
        for (auto& p : parents)
            if (p->requires_grad) any = true;
        if (any) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(backprop);
        }
    }
    return n;
}

template <class S>
using emat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using emap = Eigen::Map<emat<S>>;
template <class S>
using cemap = Eigen::Map<const emat<S>>;

}  // namespace detail

// Custom-op escape hatch used by sba_align and tests.
template <class S>
tensor<S> make_op(shape_t shape, std::vector<S> value, std::vector<tensor<S>> parents,
                  std::function<void(tensor_node<S>&)> backprop) {
    std::vector<std::shared_ptr<tensor_node<S>>> pn;
    pn.reserve(parents.size());
    for (auto& p : parents) pn.push_back(p.node());
    return tensor<S>(detail::make_node<S>(std::move(shape), std::move(value), std::move(pn), std::move(backprop)));
}

// ---------------------------------------------------------------------------
// matmul: supports [m,k]x[k,n], [B,m,k]x[k,n] (shared rhs) and
// [B,m,k]x[B,k,n]; transpose_b treats rhs as [n,k] (or [B,n,k]).
// ---------------------------------------------------------------------------
template <class S>
tensor<S> matmul(const tensor<S>& a, const tensor<S>& b, bool transpose_b = false) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if ((as.size() != 2 && as.size() != 3) || (bs.size() != 2 && bs.size() != 3))
        throw shape_error("matmul: operands must be 2-d or 3-d, got " + shape_str(as) + " and " + shape_str(bs));
    if (bs.size() == 3 && as.size() != 3)
        throw shape_error("matmul: 3-d rhs requires 3-d lhs, got " + shape_str(as) + " and " + shape_str(bs));

    const int batch = as.size() == 3 ? as[0] : 1;
    const int m = as.size() == 3 ? as[1] : as[0];
    const int k = as.size() == 3 ? as[2] : as[1];
    const bool b_batched = bs.size() == 3;
    if (b_batched && bs[0] != batch)
        throw shape_error("matmul: batch extents differ: " + shape_str(as) + " vs " + shape_str(bs));
    const int bk = b_batched ? (transpose_b ? bs[2] : bs[1]) : (transpose_b ? bs[1] : bs[0]);
    const int n = b_batched ? (transpose_b ? bs[1] : bs[2]) : (transpose_b ? bs[0] : bs[1]);
    if (bk != k)
        throw shape_error("matmul: inner extents differ: " + shape_str(as) + " vs " + shape_str(bs) +
                          (transpose_b ? " (rhs transposed)" : ""));

    shape_t out_shape = as.size() == 3 ? shape_t{batch, m, n} : shape_t{m, n};
    std::vector<S> out(numel(out_shape));

    const size_t a_stride = static_cast<size_t>(m) * k;
    const size_t b_stride = b_batched ? static_cast<size_t>(k) * n : 0;
    const size_t c_stride = static_cast<size_t>(m) * n;

    using detail::cemap;
    using detail::emap;
    for (int bi = 0; bi < batch; ++bi) {
        cemap<S> A(a.value().data() + bi * a_stride, m, k);
        emap<S> C(out.data() + bi * c_stride, m, n);
        if (transpose_b) {
            cemap<S> B(b.value().data() + bi * b_stride, n, k);
            C.noalias() = A * B.transpose();
        } else {
            cemap<S> B(b.value().data() + bi * b_stride, k, n);
            C.noalias() = A * B;
        }
    }

    auto an = a.node();
    auto bn = b.node();
    auto backprop = [an, bn, batch, m, k, n, transpose_b, b_batched, a_stride, b_stride,
                     c_stride](tensor_node<S>& self) {
        using detail::cemap;
        using detail::emap;
        const bool need_a = an->requires_grad;
        const bool need_b = bn->requires_grad;
        if (need_a) an->ensure_grad();
        if (need_b) bn->ensure_grad();
        for (int bi = 0; bi < batch; ++bi) {
            cemap<S> G(self.grad.data() + bi * c_stride, m, n);
            cemap<S> A(an->value.data() + bi * a_stride, m, k);
            if (transpose_b) {
                cemap<S> B(bn->value.data() + bi * b_stride, n, k);
                if (need_a) {
                    emap<S> GA(an->grad.data() + bi * a_stride, m, k);
                    GA.noalias() += G * B;
                }
                if (need_b) {
                    emap<S> GB(bn->grad.data() + bi * b_stride, n, k);
                    GB.noalias() += G.transpose() * A;
                }
            } else {
                cemap<S> B(bn->value.data() + bi * b_stride, k, n);
                if (need_a) {
                    emap<S> GA(an->grad.data() + bi * a_stride, m, k);
                    GA.noalias() += G * B.transpose();
                }
                if (need_b) {
                    emap<S> GB(bn->grad.data() + bi * b_stride, k, n);
                    GB.noalias() += A.transpose() * G;
                }
            }
        }
    };
    return tensor<S>(detail::make_node<S>(std::move(out_shape), std::move(out), {an, bn}, std::move(backprop)));
}

namespace detail {
// b's shape must equal a's shape or a suffix of it (leading-batch expansion).
template <class S>
size_t suffix_repeat(const tensor<S>& a, const tensor<S>& b, const char* op) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() > as.size())
        throw shape_error(std::string(op) + ": rhs rank exceeds lhs: " + shape_str(as) + " vs " + shape_str(bs));
    size_t off = as.size() - bs.size();
    for (size_t i = 0; i < bs.size(); ++i)
        if (as[off + i] != bs[i])
            throw shape_error(std::string(op) + ": shapes not suffix-compatible: " + shape_str(as) + " vs " +
                              shape_str(bs));
    return a.size() / std::max<size_t>(b.size(), 1);
}
}  // namespace detail

template <class S>
tensor<S> add(const tensor<S>& a, const tensor<S>& b) {
    const size_t repeats = detail::suffix_repeat(a, b, "add");
    const size_t bn_ = b.size();
    std::vector<S> out(a.value());
    for (size_t r = 0; r < repeats; ++r) {
        S* o = out.data() + r * bn_;
        const S* bp = b.value().data();
        for (size_t i = 0; i < bn_; ++i) o[i] += bp[i];
    }
    auto an = a.node();
    auto bn = b.node();
    auto backprop = [an, bn, repeats, bn_](tensor_node<S>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t r = 0; r < repeats; ++r) {
                const S* g = self.grad.data() + r * bn_;
                for (size_t i = 0; i < bn_; ++i) bn->grad[i] += g[i];
            }
        }
    };
    return tensor<S>(detail::make_node<S>(a.shape(), std::move(out), {an, bn}, std::move(backprop)));
}

template <class S>
tensor<S> sub(const tensor<S>& a, const tensor<S>& b) {
    const size_t repeats = detail::suffix_repeat(a, b, "sub");
    const size_t bn_ = b.size();
    std::vector<S> out(a.value());
    for (size_t r = 0; r < repeats; ++r) {
        S* o = out.data() + r * bn_;
        const S* bp = b.value().data();
        for (size_t i = 0; i < bn_; ++i) o[i] -= bp[i];
    }
    auto an = a.node();
    auto bn = b.node();
    auto backprop = [an, bn, repeats, bn_](tensor_node<S>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t r = 0; r < repeats; ++r) {
                const S* g = self.grad.data() + r * bn_;
                for (size_t i = 0; i < bn_; ++i) bn->grad[i] -= g[i];
            }
        }
    };
    return tensor<S>(detail::make_node<S>(a.shape(), std::move(out), {an, bn}, std::move(backprop)));
}

// Elementwise product; same-shape only.
template <class S>
tensor<S> mul(const tensor<S>& a, const tensor<S>& b) {
    if (a.shape() != b.shape())
        throw shape_error("mul: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto an = a.node();
    auto bn = b.node();
    auto backprop = [an, bn](tensor_node<S>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
        }
    };
    return tensor<S>(detail::make_node<S>(a.shape(), std::move(out), {an, bn}, std::move(backprop)));
}

template <class S>
tensor<S> scale(const tensor<S>& a, S c) {
    std::vector<S> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
    auto an = a.node();
    auto backprop = [an, c](tensor_node<S>& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    };
    return tensor<S>(detail::make_node<S>(a.shape(), std::move(out), {an}, std::move(backprop)));
}

// ---------------------------------------------------------------------------
// masked softmax over the last axis. key_mask (optional) marks valid keys:
// length Tk (shared) or B*Tk when x is [B, Tq, Tk]. causal masks key j > i
// for query row i. Fully-masked rows yield all-zero output.
// ---------------------------------------------------------------------------
template <class S>
tensor<S> masked_softmax(const tensor<S>& x, const std::vector<uint8_t>* key_mask = nullptr, bool causal = false) {
    const auto& xs = x.shape();
    if (xs.size() < 1) throw shape_error("masked_softmax: rank-0 input");
    const int tk = xs.back();
    const int tq = xs.size() >= 2 ? xs[xs.size() - 2] : 1;
    const size_t rows = x.size() / static_cast<size_t>(tk);
    const size_t rows_per_batch = static_cast<size_t>(tq);
    const size_t n_batches = rows / rows_per_batch;
    bool per_batch_mask = false;
    if (key_mask) {
        if (key_mask->size() == n_batches * static_cast<size_t>(tk))
            per_batch_mask = n_batches > 1;
        else if (key_mask->size() != static_cast<size_t>(tk))
            throw shape_error("masked_softmax: key mask length " + std::to_string(key_mask->size()) +
                              " matches neither Tk nor B*Tk for " + shape_str(xs));
    }

    std::vector<S> out(x.size());
    for (size_t r = 0; r < rows; ++r) {
        const S* in = x.value().data() + r * tk;
        S* o = out.data() + r * tk;
        const size_t batch = r / rows_per_batch;
        const int qi = static_cast<int>(r % rows_per_batch);
        const uint8_t* mask_row =
            key_mask ? key_mask->data() + (per_batch_mask ? batch * tk : 0) : nullptr;
        S mx = -std::numeric_limits<S>::infinity();
        for (int j = 0; j < tk; ++j) {
            if (mask_row && !mask_row[j]) continue;
            if (causal && j > qi) continue;
            if (std::isnan(static_cast<double>(in[j])))
                throw numeric_error("masked_softmax: NaN input");
            mx = std::max(mx, in[j]);
        }
        S denom = S(0);
        for (int j = 0; j < tk; ++j) {
            const bool dead = (mask_row && !mask_row[j]) || (causal && j > qi);
            if (dead) {
                o[j] = S(0);
            } else {
                o[j] = std::exp(in[j] - mx);
                denom += o[j];
            }
        }
        if (denom > S(0)) {
            const S inv = S(1) / denom;
            for (int j = 0; j < tk; ++j) o[j] *= inv;
        }
    }

    auto xn = x.node();
    auto backprop = [xn, tk, rows](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const S* p = self.value.data() + r * tk;
            const S* g = self.grad.data() + r * tk;
            S dot = S(0);
            for (int j = 0; j < tk; ++j) dot += p[j] * g[j];
            S* gx = xn->grad.data() + r * tk;
            for (int j = 0; j < tk; ++j) gx[j] += p[j] * (g[j] - dot);
        }
    };
    return tensor<S>(detail::make_node<S>(x.shape(), std::move(out), {xn}, std::move(backprop)));
}

template <class S>
tensor<S> softmax(const tensor<S>& x) {
    return masked_softmax(x, nullptr, false);
}

// log softmax over the last axis (no masking; used by the policy head).
template <class S>
tensor<S> log_softmax(const tensor<S>& x) {
    const int k = x.shape().back();
    const size_t rows = x.size() / static_cast<size_t>(k);
    std::vector<S> out(x.size());
    for (size_t r = 0; r < rows; ++r) {
        const S* in = x.value().data() + r * k;
        S* o = out.data() + r * k;
        S mx = in[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, in[j]);
        if (std::isnan(static_cast<double>(mx))) throw numeric_error("log_softmax: NaN input");
        S denom = S(0);
        for (int j = 0; j < k; ++j) denom += std::exp(in[j] - mx);
        const S lse = mx + std::log(denom);
        for (int j = 0; j < k; ++j) o[j] = in[j] - lse;
    }
    auto xn = x.node();
    auto backprop = [xn, k, rows](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const S* lp = self.value.data() + r * k;
            const S* g = self.grad.data() + r * k;
            S gsum = S(0);
            for (int j = 0; j < k; ++j) gsum += g[j];
            S* gx = xn->grad.data() + r * k;
            for (int j = 0; j < k; ++j) gx[j] += g[j] - std::exp(lp[j]) * gsum;
        }
    };
    return tensor<S>(detail::make_node<S>(x.shape(), std::move(out), {xn}, std::move(backprop)));
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis with affine gain/bias of shape [d].
// ---------------------------------------------------------------------------
template <class S>
tensor<S> layer_norm(const tensor<S>& x, const tensor<S>& gain, const tensor<S>& bias, S eps = S(1e-5)) {
    const int d = x.shape().back();
    if (d < 1) throw shape_error("layer_norm: empty last axis");
    if (static_cast<int>(gain.size()) != d || static_cast<int>(bias.size()) != d)
        throw shape_error("layer_norm: gain/bias must have extent " + std::to_string(d));
    const size_t rows = x.size() / static_cast<size_t>(d);
    std::vector<S> out(x.size());
    std::vector<S> inv_std(rows), means(rows);
    for (size_t r = 0; r < rows; ++r) {
        const S* in = x.value().data() + r * d;
        S mean = S(0);
        for (int j = 0; j < d; ++j) mean += in[j];
        mean /= S(d);
        S var = S(0);
        for (int j = 0; j < d; ++j) {
            const S c = in[j] - mean;
            var += c * c;
        }
        var /= S(d);
        const S istd = S(1) / std::sqrt(var + eps);
        means[r] = mean;
        inv_std[r] = istd;
        S* o = out.data() + r * d;
        for (int j = 0; j < d; ++j) o[j] = (in[j] - mean) * istd * gain.value()[j] + bias.value()[j];
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    auto backprop = [xn, gn, bn, d, rows, means, inv_std](tensor_node<S>& self) {
        const bool need_x = xn->requires_grad;
        if (need_x) xn->ensure_grad();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const S* in = xn->value.data() + r * d;
            const S* g = self.grad.data() + r * d;
            const S istd = inv_std[r];
            const S mean = means[r];
            if (gn->requires_grad || bn->requires_grad) {
                for (int j = 0; j < d; ++j) {
                    const S xhat = (in[j] - mean) * istd;
                    if (gn->requires_grad) gn->grad[j] += g[j] * xhat;
                    if (bn->requires_grad) bn->grad[j] += g[j];
                }
            }
            if (need_x) {
                // dL/dx = istd/d * (d*gy - sum(gy) - xhat * sum(gy*xhat)), gy = g*gain
                S sum_gy = S(0), sum_gy_xhat = S(0);
                for (int j = 0; j < d; ++j) {
                    const S xhat = (in[j] - mean) * istd;
                    const S gy = g[j] * gn->value[j];
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                }
                S* gx = xn->grad.data() + r * d;
                for (int j = 0; j < d; ++j) {
                    const S xhat = (in[j] - mean) * istd;
                    const S gy = g[j] * gn->value[j];
                    gx[j] += istd * (gy - (sum_gy + xhat * sum_gy_xhat) / S(d));
                }
            }
        }
    };
    return tensor<S>(detail::make_node<S>(x.shape(), std::move(out), {xn, gn, bn}, std::move(backprop)));
}

namespace detail {
inline constexpr double inv_sqrt2 = 0.7071067811865476;
inline constexpr double inv_sqrt2pi = 0.3989422804014327;
}  // namespace detail

template <class S>
tensor<S> gelu(const tensor<S>& x) {
    using detail::inv_sqrt2;
    std::vector<S> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double v = static_cast<double>(x.value()[i]);
        out[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    auto xn = x.node();
    auto backprop = [xn](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double v = static_cast<double>(xn->value[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v * detail::inv_sqrt2));
            const double pdf = detail::inv_sqrt2pi * std::exp(-0.5 * v * v);
            xn->grad[i] += self.grad[i] * static_cast<S>(cdf + v * pdf);
        }
    };
    return tensor<S>(detail::make_node<S>(x.shape(), std::move(out), {xn}, std::move(backprop)));
}

template <class S>
tensor<S> exp_op(const tensor<S>& x) {
    std::vector<S> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.value()[i]);
    auto xn = x.node();
    auto backprop = [xn](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * self.value[i];
    };
    return tensor<S>(detail::make_node<S>(x.shape(), std::move(out), {xn}, std::move(backprop)));
}

template <class S>
tensor<S> log_op(const tensor<S>& x) {
    std::vector<S> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (!(x.value()[i] > S(0))) throw numeric_error("log: non-positive input");
        out[i] = std::log(x.value()[i]);
    }
    auto xn = x.node();
    auto backprop = [xn](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] / xn->value[i];
    };
    return tensor<S>(detail::make_node<S>(x.shape(), std::move(out), {xn}, std::move(backprop)));
}

// Elementwise min; gradient follows the smaller operand (ties go to a).
template <class S>
tensor<S> minimum(const tensor<S>& a, const tensor<S>& b) {
    if (a.shape() != b.shape())
        throw shape_error("minimum: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
    auto an = a.node();
    auto bn = b.node();
    auto backprop = [an, bn](tensor_node<S>& self) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            if (an->value[i] <= bn->value[i]) {
                if (an->requires_grad) an->grad[i] += self.grad[i];
            } else {
                if (bn->requires_grad) bn->grad[i] += self.grad[i];
            }
        }
    };
    return tensor<S>(detail::make_node<S>(a.shape(), std::move(out), {an, bn}, std::move(backprop)));
}

// Clamp to [lo, hi]; zero gradient outside the interval.
template <class S>
tensor<S> clamp(const tensor<S>& x, S lo, S hi) {
    std::vector<S> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, x.value()[i]));
    auto xn = x.node();
    auto backprop = [xn, lo, hi](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const S v = xn->value[i];
            if (v > lo && v < hi) xn->grad[i] += self.grad[i];
        }
    };
    return tensor<S>(detail::make_node<S>(x.shape(), std::move(out), {xn}, std::move(backprop)));
}

// Copy-reshape; same element count, pass-through gradient.
template <class S>
tensor<S> reshape(const tensor<S>& x, shape_t shape) {
    if (numel(shape) != x.size())
        throw shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto xn = x.node();
    auto backprop = [xn](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    };
    return tensor<S>(detail::make_node<S>(std::move(shape), x.value(), {xn}, std::move(backprop)));
}

// Row gather from a 2-d table; used for embedding lookup and for pulling
// selected states out of the encoder output. Gradient scatter-adds.
template <class S>
tensor<S> gather_rows(const tensor<S>& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw shape_error("gather_rows: table must be 2-d, got " + shape_str(table.shape()));
    const int rows = table.dim(0);
    const int d = table.dim(1);
    std::vector<S> out(ids.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || id >= rows)
            throw index_error("gather_rows: index " + std::to_string(id) + " out of range [0," + std::to_string(rows) +
                              ")");
        std::copy_n(table.value().data() + static_cast<size_t>(id) * d, d, out.data() + i * d);
    }
    auto tn = table.node();
    auto ids_copy = ids;
    auto backprop = [tn, ids_copy, d](tensor_node<S>& self) {
        tn->ensure_grad();
        for (size_t i = 0; i < ids_copy.size(); ++i) {
            const S* g = self.grad.data() + i * d;
            S* dst = tn->grad.data() + static_cast<size_t>(ids_copy[i]) * d;
            for (int j = 0; j < d; ++j) dst[j] += g[j];
        }
    };
    return tensor<S>(detail::make_node<S>({static_cast<int>(ids.size()), d}, std::move(out), {tn}, std::move(backprop)));
}

// Repeat a [d] (or [r,d]) tensor n times along a new leading axis.
template <class S>
tensor<S> broadcast_rows(const tensor<S>& x, int n) {
    if (n < 1) throw arg_error("broadcast_rows: n must be >= 1");
    shape_t out_shape;
    out_shape.push_back(n);
    for (int d : x.shape()) out_shape.push_back(d);
    std::vector<S> out(numel(out_shape));
    for (int i = 0; i < n; ++i)
        std::copy(x.value().begin(), x.value().end(), out.begin() + static_cast<size_t>(i) * x.size());
    auto xn = x.node();
    const size_t chunk = x.size();
    auto backprop = [xn, n, chunk](tensor_node<S>& self) {
        xn->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const S* g = self.grad.data() + static_cast<size_t>(i) * chunk;
            for (size_t j = 0; j < chunk; ++j) xn->grad[j] += g[j];
        }
    };
    return tensor<S>(detail::make_node<S>(std::move(out_shape), std::move(out), {xn}, std::move(backprop)));
}

// Concatenate along the last axis; all other extents must agree.
template <class S>
tensor<S> concat_last(const std::vector<tensor<S>>& xs) {
    if (xs.empty()) throw arg_error("concat_last: empty input list");
    shape_t base = xs[0].shape();
    int total = 0;
    for (const auto& x : xs) {
        if (x.ndim() != static_cast<int>(base.size()))
            throw shape_error("concat_last: rank mismatch");
        for (size_t i = 0; i + 1 < base.size(); ++i)
            if (x.shape()[i] != base[i]) throw shape_error("concat_last: leading extents differ");
        total += x.shape().back();
    }
    shape_t out_shape = base;
    out_shape.back() = total;
    const size_t rows = numel(out_shape) / static_cast<size_t>(total);
    std::vector<S> out(numel(out_shape));
    std::vector<int> offsets;
    int off = 0;
    for (const auto& x : xs) {
        const int w = x.shape().back();
        offsets.push_back(off);
        for (size_t r = 0; r < rows; ++r)
            std::copy_n(x.value().data() + r * w, w, out.data() + r * total + off);
        off += w;
    }
    std::vector<std::shared_ptr<tensor_node<S>>> parents;
    std::vector<int> widths;
    for (const auto& x : xs) {
        parents.push_back(x.node());
        widths.push_back(x.shape().back());
    }
    auto backprop = [parents, widths, offsets, rows, total](tensor_node<S>& self) {
        for (size_t pi = 0; pi < parents.size(); ++pi) {
            if (!parents[pi]->requires_grad) continue;
            parents[pi]->ensure_grad();
            const int w = widths[pi];
            const int o = offsets[pi];
            for (size_t r = 0; r < rows; ++r) {
                const S* g = self.grad.data() + r * total + o;
                S* dst = parents[pi]->grad.data() + r * w;
                for (int j = 0; j < w; ++j) dst[j] += g[j];
            }
        }
    };
    return tensor<S>(detail::make_node<S>(std::move(out_shape), std::move(out), std::move(parents), std::move(backprop)));
}

// Slice [from, to) along the last axis.
template <class S>
tensor<S> slice_last(const tensor<S>& x, int from, int to) {
    const int w = x.shape().back();
    if (from < 0 || to > w || from >= to)
        throw arg_error("slice_last: bad range [" + std::to_string(from) + "," + std::to_string(to) + ") for extent " +
                        std::to_string(w));
    const int nw = to - from;
    shape_t out_shape = x.shape();
    out_shape.back() = nw;
    const size_t rows = x.size() / static_cast<size_t>(w);
    std::vector<S> out(rows * static_cast<size_t>(nw));
    for (size_t r = 0; r < rows; ++r)
        std::copy_n(x.value().data() + r * w + from, nw, out.data() + r * nw);
    auto xn = x.node();
    auto backprop = [xn, w, from, nw, rows](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const S* g = self.grad.data() + r * nw;
            S* dst = xn->grad.data() + r * w + from;
            for (int j = 0; j < nw; ++j) dst[j] += g[j];
        }
    };
    return tensor<S>(detail::make_node<S>(std::move(out_shape), std::move(out), {xn}, std::move(backprop)));
}

// Per-row pick from a 2-d tensor: out[i] = x[i, idx[i]].
template <class S>
tensor<S> take_per_row(const tensor<S>& x, const std::vector<int>& idx) {
    if (x.ndim() != 2) throw shape_error("take_per_row: need 2-d input");
    const int n = x.dim(0), k = x.dim(1);
    if (static_cast<int>(idx.size()) != n) throw shape_error("take_per_row: index count mismatch");
    std::vector<S> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        if (idx[i] < 0 || idx[i] >= k) throw index_error("take_per_row: column out of range");
        out[static_cast<size_t>(i)] = x.at(i, idx[i]);
    }
    auto xn = x.node();
    auto ids = idx;
    auto backprop = [xn, ids, k](tensor_node<S>& self) {
        xn->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i)
            xn->grad[i * k + ids[i]] += self.grad[i];
    };
    return tensor<S>(detail::make_node<S>({n}, std::move(out), {xn}, std::move(backprop)));
}

template <class S>
tensor<S> sum_all(const tensor<S>& x) {
    S acc = S(0);
    for (S v : x.value()) acc += v;
    auto xn = x.node();
    auto backprop = [xn](tensor_node<S>& self) {
        xn->ensure_grad();
        const S g = self.grad[0];
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
    return tensor<S>(detail::make_node<S>({1}, {acc}, {xn}, std::move(backprop)));
}

template <class S>
tensor<S> mean_all(const tensor<S>& x) {
    if (x.size() == 0) throw contract_error("mean_all: empty tensor");
    S acc = S(0);
    for (S v : x.value()) acc += v;
    const S inv = S(1) / S(x.size());
    auto xn = x.node();
    auto backprop = [xn, inv](tensor_node<S>& self) {
        xn->ensure_grad();
        const S g = self.grad[0] * inv;
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    };
    return tensor<S>(detail::make_node<S>({1}, {acc * inv}, {xn}, std::move(backprop)));
}

// Mean negative log-likelihood of targets under row-wise softmax of logits.
template <class S>
tensor<S> cross_entropy(const tensor<S>& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2) throw shape_error("cross_entropy: logits must be 2-d, got " + shape_str(logits.shape()));
    const int m = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != m)
        throw shape_error("cross_entropy: got " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                          " rows");
    S loss = S(0);
    for (int i = 0; i < m; ++i) {
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= v)
            throw index_error("cross_entropy: target " + std::to_string(t) + " out of range [0," + std::to_string(v) +
                              ")");
        const S* row = logits.value().data() + static_cast<size_t>(i) * v;
        S mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        S denom = S(0);
        for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        loss += mx + std::log(denom) - row[t];
    }
    loss /= S(m);
    auto ln = logits.node();
    auto tg = targets;
    auto backprop = [ln, tg, m, v](tensor_node<S>& self) {
        ln->ensure_grad();
        const S g = self.grad[0] / S(m);
        for (int i = 0; i < m; ++i) {
            const S* row = ln->value.data() + static_cast<size_t>(i) * v;
            S* grow = ln->grad.data() + static_cast<size_t>(i) * v;
            S mx = row[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            S denom = S(0);
            for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
            const S inv = S(1) / denom;
            for (int j = 0; j < v; ++j) grow[j] += g * std::exp(row[j] - mx) * inv;
            grow[tg[static_cast<size_t>(i)]] -= g;
        }
    };
    return tensor<S>(detail::make_node<S>({1}, {loss}, {ln}, std::move(backprop)));
}

// A detached copy: same values, no graph history.
template <class S>
tensor<S> detach(const tensor<S>& x) {
    return tensor<S>::from_data(x.shape(), x.value());
}

// ---------------------------------------------------------------------------
// Tape and backward.
// ---------------------------------------------------------------------------
template <class S>
struct tape {
    // Topological order: every node appears before all of its parents when
    // traversed front to back, so front-to-back is a valid reverse pass.
    std::vector<tensor_node<S>*> order;
};

template <class S>
tape<S> build_tape(const tensor<S>& root) {
    tape<S> t;
    std::unordered_set<const tensor_node<S>*> seen;
    // Iterative post-order DFS, then reverse: children end up before parents.
    std::vector<std::pair<tensor_node<S>*, size_t>> stack;
    stack.push_back({root.node().get(), 0});
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            tensor_node<S>* p = node->parents[idx].get();
            ++idx;
            if (p->backprop || p->requires_grad) {
                if (seen.insert(p).second) stack.push_back({p, 0});
            }
        } else {
            t.order.push_back(node);
            stack.pop_back();
        }
    }
    std::reverse(t.order.begin(), t.order.end());
    return t;
}

// Backpropagate from a scalar loss. Leaf gradients accumulate across calls;
// interior op-node gradients are scratch and reset per pass.
template <class S>
void backward(const tensor<S>& loss) {
    if (loss.size() != 1) throw contract_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.node()->backprop && !loss.node()->requires_grad) return;  // constant graph
    tape<S> t = build_tape(loss);
    for (tensor_node<S>* n : t.order) {
        if (n->backprop) {
            n->ensure_grad();
            n->zero_grad();
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += S(1);
    for (tensor_node<S>* n : t.order) {
        if (n->backprop) n->backprop(*n);
    }
}

}  // namespace cas
