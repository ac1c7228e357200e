#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cas/adam.hpp"
#include "cas/tensor.hpp"

namespace cas {

template <class S>
struct linear {
    tensor<S> w;  // [in, out]
    tensor<S> b;  // [out]

    tensor<S> operator()(const tensor<S>& x) const { return add(matmul(x, w), b); }
};

template <class S>
linear<S> make_linear(param_store<S>& ps, const std::string& name, int in, int out, rng& r, double stddev = 0.02,
                      bool zero_init = false) {
    std::vector<S> wdata(static_cast<size_t>(in) * out);
    if (!zero_init)
        for (auto& v : wdata) v = static_cast<S>(r.normal(0.0, stddev));
    linear<S> l;
    l.w = ps.add(name + ".w", tensor<S>::from_data({in, out}, std::move(wdata)));
    l.b = ps.add(name + ".b", tensor<S>::zeros({out}));
    return l;
}

template <class S>
struct norm_params {
    tensor<S> gain;
    tensor<S> bias;

    tensor<S> operator()(const tensor<S>& x) const { return layer_norm(x, gain, bias); }
};

template <class S>
norm_params<S> make_norm(param_store<S>& ps, const std::string& name, int d) {
    norm_params<S> n;
    n.gain = ps.add(name + ".gain", tensor<S>::full({d}, S(1)));
    n.bias = ps.add(name + ".bias", tensor<S>::zeros({d}));
    return n;
}

template <class S>
struct attention_params {
    linear<S> q, k, v, o;
    int heads = 1;
};

template <class S>
attention_params<S> make_attention(param_store<S>& ps, const std::string& name, int d, int heads, rng& r) {
    if (heads < 1 || d % heads != 0)
        throw arg_error("attention: hidden size " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                        " heads");
    attention_params<S> a;
    a.q = make_linear(ps, name + ".q", d, d, r);
    a.k = make_linear(ps, name + ".k", d, d, r);
    a.v = make_linear(ps, name + ".v", d, d, r);
    a.o = make_linear(ps, name + ".o", d, d, r);
    a.heads = heads;
    return a;
}

// Multi-head scaled dot-product attention. xq: [.., Tq, d], xkv: [.., Tk, d]
// (both 2-d or both 3-d with equal batch). key_mask marks valid keys; causal
// restricts key j <= query i. When head_probs is given, each head's
// post-softmax matrix values are appended (detached).
template <class S>
tensor<S> multi_head_attention(const tensor<S>& xq, const tensor<S>& xkv, const attention_params<S>& p,
                               const std::vector<uint8_t>* key_mask = nullptr, bool causal = false,
                               std::vector<std::vector<S>>* head_probs = nullptr) {
    const int d = xq.shape().back();
    const int dh = d / p.heads;
    const S inv_sqrt_dh = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));
    tensor<S> q = p.q(xq);
    tensor<S> k = p.k(xkv);
    tensor<S> v = p.v(xkv);
    std::vector<tensor<S>> ctx;
    ctx.reserve(static_cast<size_t>(p.heads));
    for (int h = 0; h < p.heads; ++h) {
        tensor<S> qh = slice_last(q, h * dh, (h + 1) * dh);
        tensor<S> kh = slice_last(k, h * dh, (h + 1) * dh);
        tensor<S> vh = slice_last(v, h * dh, (h + 1) * dh);
        tensor<S> scores = scale(matmul(qh, kh, /*transpose_b=*/true), inv_sqrt_dh);
        tensor<S> probs = masked_softmax(scores, key_mask, causal);
        if (head_probs) head_probs->push_back(probs.value());
        ctx.push_back(matmul(probs, vh));
    }
    return p.o(concat_last(ctx));
}

// Three-layer feed-forward net: in -> h1 -> h2 -> out with GELU between.
template <class S>
struct ffn3 {
    linear<S> l1, l2, l3;

    tensor<S> operator()(const tensor<S>& x) const { return l3(gelu(l2(gelu(l1(x))))); }
};

template <class S>
ffn3<S> make_ffn3(param_store<S>& ps, const std::string& name, int in, int h1, int h2, int out, rng& r,
                  bool zero_final = false) {
    ffn3<S> f;
    f.l1 = make_linear(ps, name + ".l1", in, h1, r);
    f.l2 = make_linear(ps, name + ".l2", h1, h2, r);
    f.l3 = make_linear(ps, name + ".l3", h2, out, r, 0.02, zero_final);
    return f;
}

// Inverted dropout as a masked multiply; identity when p <= 0 or rng absent.
template <class S>
tensor<S> dropout(const tensor<S>& x, double p, rng* r) {
    if (p <= 0.0 || r == nullptr) return x;
    if (p >= 1.0) throw arg_error("dropout: rate must be < 1");
    std::vector<S> mask(x.size());
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    for (auto& m : mask) m = r->uniform() < p ? S(0) : keep_scale;
    return mul(x, tensor<S>::from_data(x.shape(), std::move(mask)));
}

}  // namespace cas
