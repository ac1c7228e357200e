#pragma once

// Actor-critic token selector. Walks chunks in order; within a chunk all
// real interior tokens are scored in parallel against the current running
// mean of selected states, and the mean is updated at the chunk boundary.
// A chunk whose sampled actions are all "skip" has them flipped to "select".

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "cas/encoder.hpp"
#include "cas/nn.hpp"
#include "cas/tensor.hpp"

namespace cas {

constexpr int ACTION_SKIP = 0;
constexpr int ACTION_SELECT = 1;

enum class selection_mode { sample, greedy };

template <class S>
struct selector_policy {
    int d = 0;
    ffn3<S> actor;   // concat(h_bar, h_token): 2d -> d -> d/2 -> 2 logits
    ffn3<S> critic;  // same input -> 1 value
    param_store<S> params;

    selector_policy() = default;

    selector_policy(int hidden, rng& r) : d(hidden) {
        const int h2 = std::max(1, hidden / 2);
        // zero-initialized output layers: the initial policy is uniform and
        // the initial value estimate is zero
        actor = make_ffn3(params, "selector.actor", 2 * hidden, hidden, h2, 2, r, /*zero_final=*/true);
        critic = make_ffn3(params, "selector.critic", 2 * hidden, hidden, h2, 1, r, /*zero_final=*/true);
    }

    tensor<S> actor_logits(const tensor<S>& x) const { return actor(x); }
    tensor<S> critic_value(const tensor<S>& x) const { return critic(x); }
};

template <class S>
struct selector_state {
    std::vector<S> init_mean;     // mean of chunk BOS states, used while nothing is selected
    std::vector<S> selected_sum;  // running sum of selected states
    long n_selected = 0;
    int next_chunk = 1;           // 1-based chunk id expected by step_chunk

    std::vector<S> mean() const {
        if (n_selected == 0) return init_mean;
        std::vector<S> m(selected_sum);
        const S inv = S(1) / static_cast<S>(n_selected);
        for (auto& v : m) v *= inv;
        return m;
    }
};

template <class S>
selector_state<S> init_state(const hidden_batch<S>& hb) {
    const int b = hb.b_chunks();
    const int w = hb.width();
    const int d = hb.hidden();
    selector_state<S> st;
    st.init_mean.assign(static_cast<size_t>(d), S(0));
    const auto& val = hb.states.value();
    // shifted mean: identical (post-aligned) BOS states reproduce bitwise
    const S* ref = val.data();
    for (int k = 0; k < b; ++k) {
        const S* bos = val.data() + static_cast<size_t>(k) * w * d;
        for (int j = 0; j < d; ++j) st.init_mean[static_cast<size_t>(j)] += bos[j] - ref[j];
    }
    const S inv = S(1) / S(b);
    for (int j = 0; j < d; ++j) st.init_mean[static_cast<size_t>(j)] = ref[j] + st.init_mean[static_cast<size_t>(j)] * inv;
    st.selected_sum.assign(static_cast<size_t>(d), S(0));
    return st;
}

struct decision {
    int j = 0;        // 1-based original position
    int k = 0;        // 1-based chunk id
    int i = 0;        // 1-based within-chunk id
    int action = ACTION_SKIP;
    double logp = 0.0;         // log-prob of the taken action
    double value = 0.0;        // critic estimate
    double prob_select = 0.0;
    bool fallback = false;     // action came from the all-skip flip
    double reward = 0.0;       // filled by the reward pass
    double advantage = 0.0;    // filled by GAE
    double ret = 0.0;          // filled by GAE
};

struct selection_trace {
    std::vector<decision> steps;   // one per real interior token, j ascending
    int n = 0;                     // real token count
    int b_chunks = 0;
    int l_select = 0;              // number of select actions (interior only)
    int fallback_chunks = 0;
};

// Selected sequence layout: grid row indices into the flattened [B*(S+2), d]
// encoder output. Slot 0 is the aligned BOS state, last slot the aligned
// EOS state; interior slots are selected tokens in position order.
struct selected_sequence {
    std::vector<int> grid_rows;
    std::vector<int> positions;  // original j per interior slot (0 for BOS/EOS)

    int length() const { return static_cast<int>(grid_rows.size()); }
    int interior() const { return length() - 2; }
};

template <class S>
struct chunk_step_result {
    std::vector<int> real_idx;    // within-chunk 1-based ids scored
    std::vector<int> actions;
    std::vector<double> logp;
    std::vector<double> value;
    std::vector<double> prob_select;
    bool fallback = false;
    std::vector<S> features;      // n_real x 2d rows fed to the policy
};

// Score one chunk. state must be at chunk k; it is advanced in place.
template <class S>
chunk_step_result<S> step_chunk(const selector_policy<S>& policy, selector_state<S>& state,
                                const hidden_batch<S>& hb, int k, selection_mode mode, rng& r) {
    if (k != state.next_chunk)
        throw contract_error("step_chunk: chunk " + std::to_string(k) + " out of order, expected " +
                             std::to_string(state.next_chunk));
    const int w = hb.width();
    const int d = hb.hidden();
    const int s = hb.body_size;
    chunk_step_result<S> res;
    for (int i = 1; i <= s; ++i)
        if (hb.mask[(static_cast<size_t>(k) - 1) * w + i]) res.real_idx.push_back(i);
    const int n = static_cast<int>(res.real_idx.size());
    if (n == 0) {
        state.next_chunk += 1;
        return res;
    }

    const std::vector<S> h_bar = state.mean();
    res.features.resize(static_cast<size_t>(n) * 2 * d);
    const auto& val = hb.states.value();
    for (int t = 0; t < n; ++t) {
        S* row = res.features.data() + static_cast<size_t>(t) * 2 * d;
        std::copy(h_bar.begin(), h_bar.end(), row);
        const S* h = val.data() + ((static_cast<size_t>(k) - 1) * w + res.real_idx[static_cast<size_t>(t)]) * d;
        std::copy_n(h, d, row + d);
    }

    std::vector<double> logp_sel(static_cast<size_t>(n)), logp_skip(static_cast<size_t>(n));
    {
        no_grad_guard ng;
        tensor<S> x = tensor<S>::from_data({n, 2 * d}, res.features);
        tensor<S> ls = log_softmax(policy.actor_logits(x));
        tensor<S> v = policy.critic_value(x);
        res.value.resize(static_cast<size_t>(n));
        for (int t = 0; t < n; ++t) {
            logp_skip[static_cast<size_t>(t)] = static_cast<double>(ls.at(t, ACTION_SKIP));
            logp_sel[static_cast<size_t>(t)] = static_cast<double>(ls.at(t, ACTION_SELECT));
            res.value[static_cast<size_t>(t)] = static_cast<double>(v.at(t, 0));
        }
    }

    res.actions.resize(static_cast<size_t>(n));
    res.prob_select.resize(static_cast<size_t>(n));
    res.logp.resize(static_cast<size_t>(n));
    bool any_select = false;
    for (int t = 0; t < n; ++t) {
        const double p_sel = std::exp(logp_sel[static_cast<size_t>(t)]);
        res.prob_select[static_cast<size_t>(t)] = p_sel;
        int a;
        if (mode == selection_mode::greedy)
            a = p_sel >= 0.5 ? ACTION_SELECT : ACTION_SKIP;
        else
            a = r.bernoulli(p_sel) ? ACTION_SELECT : ACTION_SKIP;
        res.actions[static_cast<size_t>(t)] = a;
        any_select = any_select || a == ACTION_SELECT;
    }
    if (!any_select) {
        res.fallback = true;
        for (int t = 0; t < n; ++t) res.actions[static_cast<size_t>(t)] = ACTION_SELECT;
    }
    for (int t = 0; t < n; ++t)
        res.logp[static_cast<size_t>(t)] = res.actions[static_cast<size_t>(t)] == ACTION_SELECT
                                               ? logp_sel[static_cast<size_t>(t)]
                                               : logp_skip[static_cast<size_t>(t)];

    // Chunk-boundary state transition (Eq. 6 running mean in j order).
    for (int t = 0; t < n; ++t) {
        if (res.actions[static_cast<size_t>(t)] != ACTION_SELECT) continue;
        const S* h = val.data() + ((static_cast<size_t>(k) - 1) * w + res.real_idx[static_cast<size_t>(t)]) * d;
        for (int j = 0; j < d; ++j) state.selected_sum[static_cast<size_t>(j)] += h[j];
        state.n_selected += 1;
    }
    state.next_chunk += 1;
    return res;
}

template <class S>
struct selection_result {
    selection_trace trace;
    selected_sequence selected;
    std::vector<S> features;  // n x 2d, row t belongs to trace.steps[t]
    int feat_dim = 0;
};

template <class S>
selection_result<S> run_selection(const selector_policy<S>& policy, const hidden_batch<S>& hb, selection_mode mode,
                                  rng& r) {
    const int b = hb.b_chunks();
    const int w = hb.width();
    const int d = hb.hidden();
    selection_result<S> out;
    out.feat_dim = 2 * d;
    out.trace.b_chunks = b;
    selector_state<S> state = init_state(hb);
    out.selected.grid_rows.push_back(0);  // aligned BOS slot (chunk 1)
    out.selected.positions.push_back(0);
    for (int k = 1; k <= b; ++k) {
        chunk_step_result<S> res = step_chunk(policy, state, hb, k, mode, r);
        if (res.fallback) out.trace.fallback_chunks += 1;
        for (size_t t = 0; t < res.real_idx.size(); ++t) {
            decision dec;
            dec.k = k;
            dec.i = res.real_idx[t];
            dec.j = flat_index(k, dec.i, hb.body_size);
            dec.action = res.actions[t];
            dec.logp = res.logp[t];
            dec.value = res.value[t];
            dec.prob_select = res.prob_select[t];
            dec.fallback = res.fallback;
            out.trace.steps.push_back(dec);
            if (dec.action == ACTION_SELECT) {
                out.selected.grid_rows.push_back((k - 1) * w + dec.i);
                out.selected.positions.push_back(dec.j);
                out.trace.l_select += 1;
            }
        }
        out.features.insert(out.features.end(), res.features.begin(), res.features.end());
    }
    out.selected.grid_rows.push_back(w - 1);  // aligned EOS slot (chunk 1)
    out.selected.positions.push_back(0);
    out.trace.n = static_cast<int>(out.trace.steps.size());
    return out;
}

// Materialize the selected sequence as a [L_sel+2, d] tensor; gradient flows
// back into the encoder states through the gather.
template <class S>
tensor<S> gather_selected(const hidden_batch<S>& hb, const selected_sequence& sel) {
    tensor<S> flat = reshape(hb.states, {hb.b_chunks() * hb.width(), hb.hidden()});
    return gather_rows(flat, sel.grid_rows);
}

// Line-delimited trace dump: one record per decision.
inline void write_trace(std::ostream& os, const selection_trace& trace) {
    os << "# j k action prob_select value reward advantage\n";
    for (const auto& s : trace.steps)
        os << s.j << " " << s.k << " " << (s.action == ACTION_SELECT ? "select" : "skip") << " " << s.prob_select
           << " " << s.value << " " << s.reward << " " << s.advantage << "\n";
}

}  // namespace cas
