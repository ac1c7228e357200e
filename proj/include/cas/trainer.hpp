#pragma once

// Alternating optimization: per batch, phase A rolls out sampled selections
// and PPO-updates the selector against attention-shaped rewards with the
// transformer frozen; phase B re-selects greedily and Adam-updates the
// transformer on the LM loss with the selector frozen.

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "cas/config.hpp"
#include "cas/data.hpp"
#include "cas/metrics.hpp"
#include "cas/model.hpp"
#include "cas/rl.hpp"

namespace cas {

struct train_config {
    std::string task = "copy";
    std::string data_path;
    int steps = 200;
    int batch_size = 4;
    double lr_base = 5e-3;
    long warmup = 2500;
    double selector_lr = 1e-4;
    uint64_t seed = 0;
    std::string selector_mode = "learned";  // learned | random | all
    std::string alternation = "both";       // both | odd_even
    int checkpoint_every = 0;
    int log_every = 1;
    int n_train = 200;
    int n_eval = 200;
    int seq_len = 2048;
    int copy_target_len = 16;
    int needle_count = 4;
    int needle_payload = 4;
    int eval_max_len = 32;
    int chunk_size = 126;
    int max_input_len = 4096;
    double enc_dropout = 0.1;
    double dec_dropout = 0.1;
    std::string out_dir;

    void validate() const {
        if (steps < 1 || batch_size < 1) throw arg_error("train_config: steps and batch_size must be >= 1");
        if (selector_mode != "learned" && selector_mode != "random" && selector_mode != "all")
            throw arg_error("train_config: selector_mode must be learned, random or all");
        if (alternation != "both" && alternation != "odd_even")
            throw arg_error("train_config: alternation must be both or odd_even");
    }
};

inline train_config train_config_from(const config& c) {
    train_config t;
    t.task = c.get_text("train.task");
    t.data_path = c.get_text("train.data_path");
    t.steps = static_cast<int>(c.get_int("train.steps"));
    t.batch_size = static_cast<int>(c.get_int("train.batch_size"));
    t.lr_base = c.get_real("train.lr_base");
    t.warmup = c.get_int("train.warmup");
    t.selector_lr = c.get_real("train.selector_lr");
    t.seed = static_cast<uint64_t>(c.get_int("train.seed"));
    t.selector_mode = c.get_text("train.selector_mode");
    t.alternation = c.get_text("train.alternation");
    t.checkpoint_every = static_cast<int>(c.get_int("train.checkpoint_every"));
    t.log_every = static_cast<int>(c.get_int("train.log_every"));
    t.n_train = static_cast<int>(c.get_int("train.n_train"));
    t.n_eval = static_cast<int>(c.get_int("train.n_eval"));
    t.seq_len = static_cast<int>(c.get_int("train.seq_len"));
    t.copy_target_len = static_cast<int>(c.get_int("train.copy_target_len"));
    t.needle_count = static_cast<int>(c.get_int("train.needle_count"));
    t.needle_payload = static_cast<int>(c.get_int("train.needle_payload"));
    t.eval_max_len = static_cast<int>(c.get_int("train.eval_max_len"));
    t.chunk_size = static_cast<int>(c.get_int("chunking.chunk_size"));
    t.max_input_len = static_cast<int>(c.get_int("model.max_input_len"));
    t.enc_dropout = c.get_real("encoder.dropout");
    t.dec_dropout = c.get_real("decoder.dropout");
    t.validate();
    return t;
}

// Budget-matched random selection; the all-skip fallback still applies.
template <class S>
selection_result<S> run_random_selection(const hidden_batch<S>& hb, double p_select, rng& r) {
    const int b = hb.b_chunks();
    const int w = hb.width();
    selection_result<S> out;
    out.feat_dim = 0;
    out.trace.b_chunks = b;
    out.selected.grid_rows.push_back(0);
    out.selected.positions.push_back(0);
    for (int k = 1; k <= b; ++k) {
        std::vector<decision> chunk_steps;
        bool any = false;
        for (int i = 1; i <= hb.body_size; ++i) {
            if (!hb.mask[(static_cast<size_t>(k) - 1) * w + i]) continue;
            decision d;
            d.k = k;
            d.i = i;
            d.j = flat_index(k, i, hb.body_size);
            d.action = r.bernoulli(p_select) ? ACTION_SELECT : ACTION_SKIP;
            d.prob_select = p_select;
            any = any || d.action == ACTION_SELECT;
            chunk_steps.push_back(d);
        }
        if (!chunk_steps.empty() && !any) {
            out.trace.fallback_chunks += 1;
            for (auto& d : chunk_steps) {
                d.action = ACTION_SELECT;
                d.fallback = true;
            }
        }
        for (auto& d : chunk_steps) {
            if (d.action == ACTION_SELECT) {
                out.selected.grid_rows.push_back((k - 1) * w + d.i);
                out.selected.positions.push_back(d.j);
                out.trace.l_select += 1;
            }
            out.trace.steps.push_back(d);
        }
    }
    out.selected.grid_rows.push_back(w - 1);
    out.selected.positions.push_back(0);
    out.trace.n = static_cast<int>(out.trace.steps.size());
    return out;
}

template <class S>
selection_result<S> run_all_selection(const hidden_batch<S>& hb) {
    rng dummy(0);
    return run_random_selection<S>(hb, 1.1, dummy);  // bernoulli always true
}

struct step_stats {
    long step = 0;
    char phase = 'B';
    double lm_loss = 0.0;
    double r_lm_mean = 0.0;
    double l_select_mean = 0.0;
    double clip_fraction = 0.0;
    double entropy = 0.0;
    double lr = 0.0;
};

inline void write_log_entry(std::ostream& os, const step_stats& s) {
    os << "step=" << s.step << " phase=" << s.phase << " lm_loss=" << s.lm_loss << " r_lm=" << s.r_lm_mean
       << " l_select=" << s.l_select_mean << " clip_frac=" << s.clip_fraction << " entropy=" << s.entropy
       << " lr=" << s.lr << "\n";
}

template <class S = double>
class trainer {
public:
    trainer(pipeline_model<S>& model, selector_policy<S>& policy, const reward_config& rcfg, const train_config& tcfg)
        : model_(model), policy_(policy), rcfg_(rcfg), tcfg_(tcfg), rng_(tcfg.seed) {
        rcfg_.validate();
        tcfg_.validate();
        opt_model_.init(model_.params());
        opt_policy_.init(policy_.params);
    }

    std::function<void(const step_stats&)> on_step;
    std::ostream* log_stream = nullptr;

    adam_state<S>& model_opt() { return opt_model_; }
    adam_state<S>& policy_opt() { return opt_policy_; }

    // Targets are capped so the trailing EOS fits under max_target_len.
    std::vector<int> target_with_eos(const example& ex) const {
        std::vector<int> y = ex.target.ids;
        const int cap = model_.config().dec.max_target_len - 1;
        if (static_cast<int>(y.size()) > cap) y.resize(static_cast<size_t>(cap));
        y.push_back(EOS_ID);
        return y;
    }

    selection_result<S> select(const hidden_batch<S>& hb, selection_mode mode) {
        if (tcfg_.selector_mode == "all") return run_all_selection(hb);
        if (tcfg_.selector_mode == "random") {
            const double p = std::min(1.0, static_cast<double>(rcfg_.l_hyper) / std::max(1, hb.n_original));
            return run_random_selection(hb, p, rng_);
        }
        return run_selection(policy_, hb, mode, rng_);
    }

    // Phase A: sampled rollouts, attention-shaped rewards, PPO on the selector.
    step_stats selector_phase(const std::vector<const example*>& batch, long step) {
        transition_buffer<S> buffer;
        double r_lm_sum = 0.0, loss_sum = 0.0;
        long l_select_sum = 0;
        for (const example* ex : batch) {
            no_grad_guard ng;
            chunk_batch cb = chunk(ex->source, tcfg_.chunk_size);
            hidden_batch<S> hb = model_.encode(cb);
            selection_result<S> sel = run_selection(policy_, hb, selection_mode::sample, rng_);
            tensor<S> selected = gather_selected(hb, sel.selected);
            cross_attention_record<S> record;
            const std::vector<int> y = target_with_eos(*ex);
            tensor<S> logits = model_.decode_teacher_forced(selected, y, &record);
            const double ll = static_cast<double>(lm_loss(logits, y).item());
            if (!std::isfinite(ll)) throw numeric_error("selector_phase: non-finite LM loss");
            const double r_lm = lm_reward(ll, rcfg_.xi);
            attention_aggregate agg = aggregate_attention(record);
            assign_rewards(sel.trace, agg, r_lm, rcfg_);
            std::vector<double> rewards, values;
            rewards.reserve(sel.trace.steps.size());
            values.reserve(sel.trace.steps.size());
            for (const auto& d : sel.trace.steps) {
                rewards.push_back(d.reward);
                values.push_back(d.value);
            }
            gae_result gae = compute_gae(rewards, values, rcfg_.gamma, rcfg_.lambda);
            for (size_t t = 0; t < sel.trace.steps.size(); ++t) {
                sel.trace.steps[t].advantage = gae.advantages[t];
                sel.trace.steps[t].ret = gae.returns[t];
            }
            buffer.add_episode(sel, gae);
            r_lm_sum += r_lm;
            loss_sum += ll;
            l_select_sum += sel.trace.l_select;
        }
        if (rcfg_.normalize_advantages) buffer.normalize_advantages();
        ppo_stats ps = ppo_update(policy_, buffer, rcfg_, opt_policy_, tcfg_.selector_lr, rng_);
        step_stats st;
        st.step = step;
        st.phase = 'A';
        st.lm_loss = loss_sum / static_cast<double>(batch.size());
        st.r_lm_mean = r_lm_sum / static_cast<double>(batch.size());
        st.l_select_mean = static_cast<double>(l_select_sum) / static_cast<double>(batch.size());
        st.clip_fraction = ps.clip_fraction;
        st.entropy = ps.entropy;
        st.lr = tcfg_.selector_lr;
        return st;
    }

    // Phase B: greedy selection, LM loss, Adam on the transformer.
    step_stats lm_phase(const std::vector<const example*>& batch, long step) {
        model_.params().zero_grads();
        double loss_sum = 0.0, r_lm_sum = 0.0;
        long l_select_sum = 0;
        const S inv_batch = S(1) / static_cast<S>(batch.size());
        rng* drop = (tcfg_.enc_dropout > 0.0 || tcfg_.dec_dropout > 0.0) ? &rng_ : nullptr;
        for (const example* ex : batch) {
            chunk_batch cb = chunk(ex->source, tcfg_.chunk_size);
            hidden_batch<S> hb = model_.encode(cb, drop);
            selection_result<S> sel = select(hb, selection_mode::greedy);
            tensor<S> selected = gather_selected(hb, sel.selected);
            const std::vector<int> y = target_with_eos(*ex);
            tensor<S> logits = model_.decode_teacher_forced(selected, y, nullptr, nullptr, drop, tcfg_.dec_dropout);
            tensor<S> loss = lm_loss(logits, y);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) throw numeric_error("lm_phase: non-finite LM loss");
            backward(scale(loss, inv_batch));
            loss_sum += lv;
            r_lm_sum += lm_reward(lv, rcfg_.xi);
            l_select_sum += sel.trace.l_select;
        }
        const double lr = lr_schedule(opt_model_.step + 1, tcfg_.lr_base, tcfg_.warmup);
        adam_step(model_.params(), opt_model_, static_cast<S>(lr));
        step_stats st;
        st.step = step;
        st.phase = 'B';
        st.lm_loss = loss_sum / static_cast<double>(batch.size());
        st.r_lm_mean = r_lm_sum / static_cast<double>(batch.size());
        st.l_select_mean = static_cast<double>(l_select_sum) / static_cast<double>(batch.size());
        st.lr = lr;
        return st;
    }

    void run(const std::vector<example>& data) {
        if (data.empty()) throw arg_error("trainer: empty dataset");
        std::vector<size_t> order(data.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        size_t cursor = order.size();  // trigger shuffle on first use
        auto next_batch = [&]() {
            std::vector<const example*> batch;
            for (int i = 0; i < tcfg_.batch_size; ++i) {
                if (cursor >= order.size()) {
                    rng_.shuffle(order);
                    cursor = 0;
                }
                batch.push_back(&data[order[cursor++]]);
            }
            return batch;
        };
        const bool selector_learned = tcfg_.selector_mode == "learned";
        for (long step = 1; step <= tcfg_.steps; ++step) {
            const bool do_a = selector_learned && (tcfg_.alternation == "both" || step % 2 == 1);
            const bool do_b = tcfg_.alternation == "both" || !selector_learned || step % 2 == 0;
            if (do_a) {
                step_stats st = selector_phase(next_batch(), step);
                emit(st);
            }
            if (do_b) {
                step_stats st = lm_phase(next_batch(), step);
                emit(st);
            }
            if (tcfg_.checkpoint_every > 0 && step % tcfg_.checkpoint_every == 0 && !tcfg_.out_dir.empty())
                save_checkpoint(tcfg_.out_dir + "/checkpoint_step" + std::to_string(step) + ".cas", model_, policy_,
                                &opt_model_, &opt_policy_);
        }
        if (!tcfg_.out_dir.empty())
            save_checkpoint(tcfg_.out_dir + "/checkpoint.cas", model_, policy_, &opt_model_, &opt_policy_);
    }

private:
    void emit(const step_stats& st) {
        if (log_stream && st.step % std::max(1, tcfg_.log_every) == 0) write_log_entry(*log_stream, st);
        if (on_step) on_step(st);
    }

    pipeline_model<S>& model_;
    selector_policy<S>& policy_;
    reward_config rcfg_;
    train_config tcfg_;
    rng rng_;
    adam_state<S> opt_model_;
    adam_state<S> opt_policy_;
};

// ---------------------------------------------------------------------------
// Evaluation: greedy (or beam) generation against targets.
// ---------------------------------------------------------------------------
struct eval_result {
    int n = 0;
    double exact_match = 0.0;   // token-id exact match of generated vs target
    double token_f1 = 0.0;
    double mean_l_select = 0.0;
    double needle_fraction = 0.0;         // selected tokens inside needle spans
    double uniform_needle_fraction = 0.0; // random-selector baseline, equal budget
};

template <class S>
eval_result evaluate_model(pipeline_model<S>& model, selector_policy<S>& policy, const std::vector<example>& data,
                           const train_config& tcfg, const reward_config& rcfg, bool beam = false,
                           uint64_t seed = 1234) {
    eval_result res;
    res.n = static_cast<int>(data.size());
    rng r(seed);
    long l_select_sum = 0;
    double needle_sum = 0.0, uniform_sum = 0.0;
    long needle_count = 0;
    for (const auto& ex : data) {
        no_grad_guard ng;
        chunk_batch cb = chunk(ex.source, tcfg.chunk_size);
        hidden_batch<S> hb = model.encode(cb);
        selection_result<S> sel;
        if (tcfg.selector_mode == "all")
            sel = run_all_selection(hb);
        else if (tcfg.selector_mode == "random")
            sel = run_random_selection(hb, std::min(1.0, static_cast<double>(rcfg.l_hyper) / std::max(1, hb.n_original)),
                                       r);
        else
            sel = run_selection(policy, hb, selection_mode::greedy, r);
        tensor<S> selected = gather_selected(hb, sel.selected);
        token_sequence gen = model.generate(selected, beam ? decoder<S>::gen_mode::beam : decoder<S>::gen_mode::greedy,
                                            tcfg.eval_max_len);
        const std::vector<int> want(ex.target.ids.begin(),
                                    ex.target.ids.begin() +
                                        std::min<size_t>(ex.target.ids.size(),
                                                         static_cast<size_t>(model.config().dec.max_target_len - 1)));
        if (gen.ids == want) res.exact_match += 1.0;
        res.token_f1 += token_f1(gen.ids, want);
        l_select_sum += sel.trace.l_select;
        if (!ex.needle_positions.empty()) {
            needle_sum += needle_selected_fraction(sel.trace, ex);
            uniform_sum += uniform_selector_needle_fraction(ex, std::max(1, sel.trace.l_select), seed + needle_count, 50);
            needle_count += 1;
        }
    }
    if (res.n > 0) {
        res.exact_match /= res.n;
        res.token_f1 /= res.n;
        res.mean_l_select = static_cast<double>(l_select_sum) / res.n;
    }
    if (needle_count > 0) {
        res.needle_fraction = needle_sum / static_cast<double>(needle_count);
        res.uniform_needle_fraction = uniform_sum / static_cast<double>(needle_count);
    }
    return res;
}

// Synthetic dataset construction shared by the CLI and the acceptance suite.
inline std::vector<example> build_dataset(const train_config& tcfg, const vocab& v, int n, uint64_t seed) {
    if (tcfg.task == "copy") {
        const int alphabet = v.size() - NUM_RESERVED_IDS;
        return gen_copy_task(n, tcfg.seq_len, alphabet, seed, tcfg.copy_target_len);
    }
    if (tcfg.task == "needle") {
        const int filler = v.size() - synth::FILLER_BASE;
        if (filler < 2) throw arg_error("build_dataset: word vocabulary too small for the needle task");
        return gen_needle_task(n, tcfg.seq_len, tcfg.needle_count, seed, tcfg.needle_payload, filler);
    }
    if (tcfg.task == "jsonl") {
        if (tcfg.data_path.empty()) throw data_error("build_dataset: task=jsonl requires train.data_path");
        return load_jsonl(tcfg.data_path, v, tcfg.max_input_len, 1 << 20);
    }
    throw arg_error("build_dataset: unknown task `" + tcfg.task + "`");
}

}  // namespace cas
