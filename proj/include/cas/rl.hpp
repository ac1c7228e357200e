#pragma once

// Reward computation over decoder cross-attention, generalized advantage
// estimation, and clipped-ratio PPO updates for the selector policy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cas/adam.hpp"
#include "cas/decoder.hpp"
#include "cas/selector.hpp"
#include "cas/tensor.hpp"

namespace cas {

struct reward_config {
    double xi = 10.0;       // reward magnification
    int l_hyper = 256;      // soft budget on selected count
    double gamma = 1.0;
    double lambda = 0.95;
    double clip_eps = 0.2;
    int ppo_epochs = 4;
    int minibatch = 256;
    double value_coef = 0.5;
    double entropy_coef = 0.01;
    bool literal_eq10 = false;  // renormalize by 1-a0 only (EOS mass not folded)
    bool normalize_advantages = true;

    void validate() const {
        if (xi <= 0) throw arg_error("reward_config: xi must be > 0");
        if (l_hyper < 1) throw arg_error("reward_config: l_hyper must be >= 1");
        if (gamma < 0 || gamma > 1 || lambda < 0 || lambda > 1)
            throw arg_error("reward_config: gamma and lambda must lie in [0,1]");
        if (clip_eps <= 0 || clip_eps >= 1) throw arg_error("reward_config: clip_eps must lie in (0,1)");
        if (ppo_epochs < 1 || minibatch < 1) throw arg_error("reward_config: ppo_epochs and minibatch must be >= 1");
    }
};

// Sequence-level reward: xi * exp(mean target log-likelihood).
inline double lm_reward(double lm_loss_value, double xi) { return xi * std::exp(-lm_loss_value); }

struct attention_aggregate {
    int m = 0;
    int l_sel = 0;
    std::vector<double> mean_matrix;  // M x L_sel mean over layers and heads
    std::vector<double> col_mean;     // per selected slot, mean over target steps
};

template <class S>
attention_aggregate aggregate_attention(const cross_attention_record<S>& rec) {
    attention_aggregate agg;
    agg.m = rec.m;
    agg.l_sel = rec.l_sel;
    const size_t sz = static_cast<size_t>(rec.m) * rec.l_sel;
    agg.mean_matrix.assign(sz, 0.0);
    const double inv = 1.0 / (static_cast<double>(rec.n_layers) * rec.heads);
    for (const auto& mat : rec.mats)
        for (size_t i = 0; i < sz; ++i) agg.mean_matrix[i] += static_cast<double>(mat[i]) * inv;
    agg.col_mean.assign(static_cast<size_t>(rec.l_sel), 0.0);
    const double inv_m = 1.0 / rec.m;
    for (int i = 0; i < rec.m; ++i)
        for (int j = 0; j < rec.l_sel; ++j)
            agg.col_mean[static_cast<size_t>(j)] += agg.mean_matrix[static_cast<size_t>(i) * rec.l_sel + j] * inv_m;
    return agg;
}

// Per-slot rewards for the interior of the selected sequence (slots
// 1..L_sel-2). The BOS slot's attention mass is excluded from the
// denominator; by default the EOS slot's mass is folded in as well so the
// interior rewards sum to exactly R_LM.
inline std::vector<double> select_rewards(const attention_aggregate& agg, double r_lm_value,
                                          bool literal_eq10 = false) {
    if (agg.l_sel < 2) throw contract_error("select_rewards: selected sequence too short");
    const int interior = agg.l_sel - 2;
    std::vector<double> out(static_cast<size_t>(std::max(interior, 0)), 0.0);
    if (interior == 0) return out;
    const double a0 = agg.col_mean.front();
    const double a_last = agg.col_mean.back();
    const double denom = literal_eq10 ? 1.0 - a0 : 1.0 - a0 - a_last;
    if (!(denom > 1e-12)) {
        warn("select_rewards: attention mass concentrated on BOS/EOS; distributing reward uniformly");
        const double uniform = r_lm_value / interior;
        std::fill(out.begin(), out.end(), uniform);
        return out;
    }
    const double coeff = r_lm_value / denom;
    for (int j = 1; j <= interior; ++j) out[static_cast<size_t>(j - 1)] = agg.col_mean[static_cast<size_t>(j)] * coeff;
    return out;
}

// Reward shared by every skip action in the episode.
inline double skip_reward(int l_all, int l_select, int l_hyper, double r_lm_value) {
    if (l_select < 1 || l_all < l_select)
        throw arg_error("skip_reward: need l_all >= l_select >= 1");
    return l_select < l_hyper ? r_lm_value / l_all : r_lm_value / l_select;
}

// Fill decision rewards in a trace from the attention aggregate. Select
// actions get their selected-slot reward, skip actions the shared skip
// reward. Slot s of the aggregate's interior corresponds to the s-th select
// action in j order.
template <class S = double>
void assign_rewards(selection_trace& trace, const attention_aggregate& agg, double r_lm_value,
                    const reward_config& cfg) {
    const std::vector<double> sel_rewards = select_rewards(agg, r_lm_value, cfg.literal_eq10);
    if (static_cast<int>(sel_rewards.size()) != trace.l_select)
        throw contract_error("assign_rewards: attention slots (" + std::to_string(sel_rewards.size()) +
                             ") do not match select actions (" + std::to_string(trace.l_select) + ")");
    const double r_skip = skip_reward(trace.n, std::max(trace.l_select, 1), cfg.l_hyper, r_lm_value);
    size_t slot = 0;
    for (auto& step : trace.steps) {
        if (step.action == ACTION_SELECT)
            step.reward = sel_rewards[slot++];
        else
            step.reward = r_skip;
    }
}

struct gae_result {
    std::vector<double> advantages;
    std::vector<double> returns;
};

// One episode, terminal bootstrap value 0:
//   delta_t = r_t + gamma*V(s_{t+1}) - V(s_t);  A_t = sum_k (gamma*lambda)^k delta_{t+k}
inline gae_result compute_gae(const std::vector<double>& rewards, const std::vector<double>& values, double gamma,
                              double lambda) {
    if (rewards.empty()) throw contract_error("compute_gae: empty episode");
    if (rewards.size() != values.size()) throw shape_error("compute_gae: rewards/values length mismatch");
    const size_t n = rewards.size();
    gae_result g;
    g.advantages.assign(n, 0.0);
    g.returns.assign(n, 0.0);
    double acc = 0.0;
    for (size_t t = n; t-- > 0;) {
        const double next_v = t + 1 < n ? values[t + 1] : 0.0;
        const double delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        g.advantages[t] = acc;
        g.returns[t] = acc + values[t];
    }
    return g;
}

// Flattened rollout transitions across a batch of episodes. Feature rows are
// frozen at rollout time, as are the old log-probs.
template <class S>
struct transition_buffer {
    int feat_dim = 0;
    std::vector<S> features;  // count x feat_dim
    std::vector<int> actions;
    std::vector<double> old_logp;
    std::vector<double> rewards;
    std::vector<double> values;
    std::vector<double> advantages;
    std::vector<double> returns;

    size_t count() const { return actions.size(); }

    void add_episode(const selection_result<S>& rollout, const gae_result& gae) {
        if (feat_dim == 0) feat_dim = rollout.feat_dim;
        if (feat_dim != rollout.feat_dim) throw shape_error("transition_buffer: feature width mismatch");
        features.insert(features.end(), rollout.features.begin(), rollout.features.end());
        for (size_t t = 0; t < rollout.trace.steps.size(); ++t) {
            const auto& d = rollout.trace.steps[t];
            actions.push_back(d.action);
            old_logp.push_back(d.logp);
            rewards.push_back(d.reward);
            values.push_back(d.value);
            advantages.push_back(gae.advantages[t]);
            returns.push_back(gae.returns[t]);
        }
    }

    // Zero-mean unit-variance advantages across the whole buffer.
    void normalize_advantages() {
        if (advantages.empty()) throw contract_error("transition_buffer: empty buffer");
        double mean = 0.0;
        for (double a : advantages) mean += a;
        mean /= static_cast<double>(advantages.size());
        double var = 0.0;
        for (double a : advantages) var += (a - mean) * (a - mean);
        var /= static_cast<double>(advantages.size());
        const double inv_std = 1.0 / std::sqrt(var + 1e-8);
        for (double& a : advantages) a = (a - mean) * inv_std;
    }
};

struct ppo_stats {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double clip_fraction = 0.0;
    double approx_kl = 0.0;
    int minibatches = 0;
    int skipped = 0;
};

// Clipped-ratio PPO over the frozen buffer; gradients reach only the actor
// and critic parameters (feature rows are constants).
template <class S>
ppo_stats ppo_update(selector_policy<S>& policy, const transition_buffer<S>& buf, const reward_config& cfg,
                     adam_state<S>& opt, double lr, rng& r) {
    cfg.validate();
    if (buf.count() == 0) throw contract_error("ppo_update: empty buffer");
    ppo_stats stats;
    double sum_pl = 0.0, sum_vl = 0.0, sum_ent = 0.0, sum_clip = 0.0, sum_kl = 0.0;
    long counted = 0;

    std::vector<size_t> order(buf.count());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
        r.shuffle(order);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.minibatch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.minibatch));
            const int mb = static_cast<int>(end - start);
            std::vector<S> feats(static_cast<size_t>(mb) * buf.feat_dim);
            std::vector<int> acts(static_cast<size_t>(mb));
            std::vector<S> old_lp(static_cast<size_t>(mb)), adv(static_cast<size_t>(mb)), ret(static_cast<size_t>(mb));
            for (int t = 0; t < mb; ++t) {
                const size_t src = order[start + static_cast<size_t>(t)];
                std::copy_n(buf.features.data() + src * buf.feat_dim, buf.feat_dim,
                            feats.data() + static_cast<size_t>(t) * buf.feat_dim);
                acts[static_cast<size_t>(t)] = buf.actions[src];
                old_lp[static_cast<size_t>(t)] = static_cast<S>(buf.old_logp[src]);
                adv[static_cast<size_t>(t)] = static_cast<S>(buf.advantages[src]);
                ret[static_cast<size_t>(t)] = static_cast<S>(buf.returns[src]);
            }
            tensor<S> x = tensor<S>::from_data({mb, buf.feat_dim}, std::move(feats));
            tensor<S> old_lp_t = tensor<S>::from_data({mb}, std::move(old_lp));
            tensor<S> adv_t = tensor<S>::from_data({mb}, std::move(adv));
            tensor<S> ret_t = tensor<S>::from_data({mb}, std::move(ret));

            tensor<S> logp_all = log_softmax(policy.actor_logits(x));
            tensor<S> new_lp = take_per_row(logp_all, acts);
            tensor<S> ratio = exp_op(sub(new_lp, old_lp_t));

            bool finite = true;
            for (S v : ratio.value())
                if (!std::isfinite(static_cast<double>(v))) finite = false;
            if (!finite) {
                warn("ppo_update: non-finite probability ratio; skipping minibatch");
                stats.skipped += 1;
                continue;
            }

            tensor<S> surr = mul(ratio, adv_t);
            tensor<S> clipped = mul(clamp(ratio, static_cast<S>(1.0 - cfg.clip_eps), static_cast<S>(1.0 + cfg.clip_eps)),
                                    adv_t);
            tensor<S> objective = mean_all(minimum(surr, clipped));

            tensor<S> vpred = reshape(policy.critic_value(x), {mb});
            tensor<S> vdiff = sub(vpred, ret_t);
            tensor<S> vloss = mean_all(mul(vdiff, vdiff));

            // mean over rows of -sum_k p*logp == -2 * mean over all entries
            tensor<S> ent = scale(mean_all(mul(exp_op(logp_all), logp_all)), S(-2));

            tensor<S> loss = sub(add(scale(objective, S(-1)), scale(vloss, static_cast<S>(cfg.value_coef))),
                                 scale(ent, static_cast<S>(cfg.entropy_coef)));

            policy.params.zero_grads();
            backward(loss);
            adam_step(policy.params, opt, static_cast<S>(lr));

            double clip_frac = 0.0, kl = 0.0;
            for (int t = 0; t < mb; ++t) {
                const double rt = static_cast<double>(ratio.at(t));
                if (std::abs(rt - 1.0) > cfg.clip_eps) clip_frac += 1.0;
                kl += static_cast<double>(old_lp_t.at(t)) - static_cast<double>(new_lp.at(t));
            }
            sum_pl += -objective.item();
            sum_vl += vloss.item();
            sum_ent += ent.item();
            sum_clip += clip_frac / mb;
            sum_kl += kl / mb;
            counted += 1;
            stats.minibatches += 1;
        }
    }
    if (counted > 0) {
        stats.policy_loss = sum_pl / static_cast<double>(counted);
        stats.value_loss = sum_vl / static_cast<double>(counted);
        stats.entropy = sum_ent / static_cast<double>(counted);
        stats.clip_fraction = sum_clip / static_cast<double>(counted);
        stats.approx_kl = sum_kl / static_cast<double>(counted);
    }
    return stats;
}

}  // namespace cas
