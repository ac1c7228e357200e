#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cas/tensor.hpp"

namespace cas {

template <class S>
struct param_store {
    std::vector<std::string> names;
    std::vector<tensor<S>> params;

    tensor<S> add(const std::string& name, tensor<S> t) {
        t.set_requires_grad(true);
        names.push_back(name);
        params.push_back(t);
        return t;
    }

    size_t count() const { return params.size(); }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& p : params) n += p.size();
        return n;
    }

    void zero_grads() {
        for (auto& p : params) p.zero_grad();
    }

    // Order-independent fingerprint of parameter values, for freeze checks.
    double checksum() const {
        double acc = 0.0;
        for (const auto& p : params)
            for (S v : p.value()) acc += static_cast<double>(v);
        return acc;
    }
};

// Adam with bias correction. Moments are kept per parameter tensor, in the
// order the parameters were registered.
template <class S>
struct adam_state {
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
    long step = 0;
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;

    void init(const param_store<S>& ps) {
        m.clear();
        v.clear();
        for (const auto& p : ps.params) {
            m.emplace_back(p.size(), S(0));
            v.emplace_back(p.size(), S(0));
        }
        step = 0;
    }
};

template <class S>
void adam_step(param_store<S>& ps, adam_state<S>& st, S lr) {
    if (st.m.size() != ps.params.size())
        throw contract_error("adam_step: state not initialized for this parameter set");
    st.step += 1;
    const S b1t = S(1) - static_cast<S>(std::pow(static_cast<double>(st.beta1), static_cast<double>(st.step)));
    const S b2t = S(1) - static_cast<S>(std::pow(static_cast<double>(st.beta2), static_cast<double>(st.step)));
    for (size_t pi = 0; pi < ps.params.size(); ++pi) {
        auto& p = ps.params[pi];
        p.ensure_grad();
        if (p.grad().size() != p.size()) throw shape_error("adam_step: grad/param shape mismatch");
        S* pv = p.value().data();
        const S* g = p.grad().data();
        S* mv = st.m[pi].data();
        S* vv = st.v[pi].data();
        for (size_t i = 0; i < p.size(); ++i) {
            mv[i] = st.beta1 * mv[i] + (S(1) - st.beta1) * g[i];
            vv[i] = st.beta2 * vv[i] + (S(1) - st.beta2) * g[i] * g[i];
            const S mhat = mv[i] / b1t;
            const S vhat = vv[i] / b2t;
            pv[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// Inverse-sqrt schedule with linear warmup; step is 1-based.
inline double lr_schedule(long step, double base = 5e-3, long warmup = 2500) {
    if (step < 1) step = 1;
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    return base * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

}  // namespace cas
