#pragma once

// Transformer decoder over a selected sequence of encoder states: causal
// self-attention, cross-attention (recorded per layer/head for reward
// shaping), teacher-forced likelihood, greedy and beam-search generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cas/chunking.hpp"
#include "cas/nn.hpp"
#include "cas/tensor.hpp"

namespace cas {

struct decoder_config {
    int n_layers = 2;
    int heads = 4;
    int hidden = 64;       // must match encoder
    int vocab = 259;
    int max_target_len = 64;
    int beam_width = 4;
    double length_alpha = 1.0;  // score = sum_logp / len^alpha; 1 = mean log-prob

    void validate() const {
        if (n_layers < 1 || heads < 1 || hidden < 1 || vocab < 1 || max_target_len < 1)
            throw arg_error("decoder_config: all extents must be >= 1");
        if (beam_width < 1) throw arg_error("decoder_config: beam width must be >= 1");
        if (hidden % heads != 0) throw arg_error("decoder_config: hidden not divisible by heads");
    }
};

// Post-softmax cross-attention matrices captured during teacher forcing,
// detached from the graph. mats[l*heads+q] is row-major M x L_sel.
template <class S>
struct cross_attention_record {
    int n_layers = 0;
    int heads = 0;
    int m = 0;
    int l_sel = 0;
    std::vector<std::vector<S>> mats;

    const std::vector<S>& mat(int layer, int head) const {
        return mats[static_cast<size_t>(layer) * heads + head];
    }
};

template <class S>
struct decoder_layer_params {
    norm_params<S> ln1, ln2, ln3;
    attention_params<S> self_attn, cross_attn;
    linear<S> ff1, ff2;
};

template <class S>
class decoder {
public:
    decoder() = default;

    decoder(const decoder_config& cfg, param_store<S>& ps, rng& r) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.hidden;
        std::vector<S> pos(static_cast<size_t>(cfg_.max_target_len) * d);
        for (auto& v : pos) v = static_cast<S>(r.normal(0.0, 0.02));
        pos_emb_ = ps.add("decoder.pos_emb", tensor<S>::from_data({cfg_.max_target_len, d}, std::move(pos)));
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string base = "decoder.layer" + std::to_string(l);
            decoder_layer_params<S> lp;
            lp.ln1 = make_norm(ps, base + ".ln1", d);
            lp.self_attn = make_attention(ps, base + ".self_attn", d, cfg_.heads, r);
            lp.ln2 = make_norm(ps, base + ".ln2", d);
            lp.cross_attn = make_attention(ps, base + ".cross_attn", d, cfg_.heads, r);
            lp.ln3 = make_norm(ps, base + ".ln3", d);
            lp.ff1 = make_linear(ps, base + ".ff1", d, 4 * d, r);
            lp.ff2 = make_linear(ps, base + ".ff2", 4 * d, d, r);
            layers_.push_back(lp);
        }
        final_ln_ = make_norm(ps, "decoder.final_ln", d);
        head_ = make_linear(ps, "decoder.head", d, cfg_.vocab, r);
    }

    const decoder_config& config() const { return cfg_; }

    // Teacher forcing: input is BOS followed by y shifted right; logits are
    // produced for every step of y. cross_key_mask (optional, length L_sel)
    // marks which selected states may be attended.
    tensor<S> decode_teacher_forced(const tensor<S>& selected, const std::vector<int>& y, const tensor<S>& token_emb,
                                    cross_attention_record<S>* record = nullptr,
                                    const std::vector<uint8_t>* cross_key_mask = nullptr,
                                    rng* dropout_rng = nullptr, double dropout_rate = 0.0) const {
        const int m = static_cast<int>(y.size());
        if (m < 1) throw arg_error("decode_teacher_forced: empty target");
        if (m > cfg_.max_target_len)
            throw arg_error("decode_teacher_forced: target length " + std::to_string(m) + " exceeds max " +
                            std::to_string(cfg_.max_target_len));
        std::vector<int> input_ids(static_cast<size_t>(m));
        input_ids[0] = BOS_ID;
        for (int i = 1; i < m; ++i) input_ids[static_cast<size_t>(i)] = y[static_cast<size_t>(i - 1)];
        if (record) {
            record->n_layers = cfg_.n_layers;
            record->heads = cfg_.heads;
            record->m = m;
            record->l_sel = selected.dim(0);
            record->mats.clear();
        }
        tensor<S> x = embed_steps(input_ids, token_emb);
        for (const auto& lp : layers_) {
            tensor<S> self_in = lp.ln1(x);
            tensor<S> self_out = multi_head_attention(self_in, self_in, lp.self_attn, nullptr, /*causal=*/true);
            x = add(x, dropout(self_out, dropout_rate, dropout_rng));
            tensor<S> cross_out = multi_head_attention(lp.ln2(x), selected, lp.cross_attn, cross_key_mask, false,
                                                       record ? &record->mats : nullptr);
            x = add(x, dropout(cross_out, dropout_rate, dropout_rng));
            tensor<S> ff_out = lp.ff2(gelu(lp.ff1(lp.ln3(x))));
            x = add(x, dropout(ff_out, dropout_rate, dropout_rng));
        }
        return head_(final_ln_(x));  // [M, V]
    }

    struct hypothesis {
        std::vector<int> ids;          // generated tokens, EOS not included
        std::vector<double> step_logp; // log-prob of each emitted token (incl. EOS if taken)
        double sum_logp = 0.0;
        bool ended = false;

        double score(double alpha) const {
            const double len = std::max<size_t>(1, step_logp.size());
            return sum_logp / std::pow(len, alpha);
        }
    };

    // Beam search over the selected states; width 1 degenerates to greedy.
    hypothesis beam_search(const tensor<S>& selected, const tensor<S>& token_emb, int width, int max_len) const {
        if (max_len < 1) throw arg_error("beam_search: max_len must be >= 1");
        if (width < 1) throw arg_error("beam_search: width must be >= 1");
        max_len = std::min(max_len, cfg_.max_target_len);
        no_grad_guard ng;
        std::vector<hypothesis> beams{hypothesis{}};
        std::vector<hypothesis> finished;
        for (int step = 0; step < max_len; ++step) {
            std::vector<hypothesis> candidates;
            for (const auto& h : beams) {
                if (h.ended) continue;
                std::vector<double> logp = next_token_logp(selected, token_emb, h.ids);
                // expanding by the top (width+1) tokens is sufficient: at
                // most one of them is EOS
                std::vector<int> order(logp.size());
                for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
                const size_t keep = std::min<size_t>(order.size(), static_cast<size_t>(width) + 1);
                std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                                  [&](int a, int b) { return logp[static_cast<size_t>(a)] > logp[static_cast<size_t>(b)]; });
                for (size_t c = 0; c < keep; ++c) {
                    const int tok = order[c];
                    hypothesis nh = h;
                    nh.step_logp.push_back(logp[static_cast<size_t>(tok)]);
                    nh.sum_logp += logp[static_cast<size_t>(tok)];
                    if (tok == EOS_ID)
                        nh.ended = true;
                    else
                        nh.ids.push_back(tok);
                    candidates.push_back(std::move(nh));
                }
            }
            if (candidates.empty()) break;
            std::stable_sort(candidates.begin(), candidates.end(), [&](const hypothesis& a, const hypothesis& b) {
                return a.score(cfg_.length_alpha) > b.score(cfg_.length_alpha);
            });
            beams.clear();
            for (auto& c : candidates) {
                if (c.ended) {
                    finished.push_back(std::move(c));
                } else if (static_cast<int>(beams.size()) < width) {
                    beams.push_back(std::move(c));
                }
                if (static_cast<int>(beams.size()) == width && static_cast<int>(finished.size()) >= width) break;
            }
            if (beams.empty()) break;
        }
        for (auto& b : beams) finished.push_back(std::move(b));
        auto best = std::max_element(finished.begin(), finished.end(), [&](const hypothesis& a, const hypothesis& b) {
            return a.score(cfg_.length_alpha) < b.score(cfg_.length_alpha);
        });
        return best == finished.end() ? hypothesis{} : *best;
    }

    enum class gen_mode { greedy, beam };

    token_sequence generate(const tensor<S>& selected, const tensor<S>& token_emb, gen_mode mode, int max_len) const {
        if (max_len < 1) throw arg_error("generate: max_len must be >= 1");
        token_sequence out;
        if (mode == gen_mode::beam) {
            out.ids = beam_search(selected, token_emb, cfg_.beam_width, max_len).ids;
            return out;
        }
        no_grad_guard ng;
        max_len = std::min(max_len, cfg_.max_target_len);
        for (int step = 0; step < max_len; ++step) {
            std::vector<double> logp = next_token_logp(selected, token_emb, out.ids);
            int best = 0;
            for (size_t i = 1; i < logp.size(); ++i)
                if (logp[i] > logp[static_cast<size_t>(best)]) best = static_cast<int>(i);
            if (best == EOS_ID) break;
            out.ids.push_back(best);
        }
        return out;
    }

    // Log-probabilities for the next token given a generated prefix.
    std::vector<double> next_token_logp(const tensor<S>& selected, const tensor<S>& token_emb,
                                        const std::vector<int>& prefix) const {
        no_grad_guard ng;
        std::vector<int> y = prefix;
        y.push_back(PAD_ID);  // dummy final target; only the last input row matters
        tensor<S> logits = decode_teacher_forced(selected, y, token_emb);
        const int mrow = logits.dim(0) - 1;
        const int v = logits.dim(1);
        std::vector<double> out(static_cast<size_t>(v));
        double mx = -1e300;
        for (int j = 0; j < v; ++j) {
            out[static_cast<size_t>(j)] = static_cast<double>(logits.at(mrow, j));
            mx = std::max(mx, out[static_cast<size_t>(j)]);
        }
        double denom = 0.0;
        for (double& o : out) denom += std::exp(o - mx);
        const double lse = mx + std::log(denom);
        for (double& o : out) o -= lse;
        return out;
    }

private:
    tensor<S> embed_steps(const std::vector<int>& ids, const tensor<S>& token_emb) const {
        const int d = cfg_.hidden;
        tensor<S> emb = gather_rows(token_emb, ids);
        emb = scale(emb, static_cast<S>(std::sqrt(static_cast<double>(d))));
        std::vector<int> pos_rows(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) pos_rows[i] = static_cast<int>(i);
        return add(emb, gather_rows(pos_emb_, pos_rows));
    }

    decoder_config cfg_;
    tensor<S> pos_emb_;
    std::vector<decoder_layer_params<S>> layers_;
    norm_params<S> final_ln_;
    linear<S> head_;
};

// Mean token negative log-likelihood over the target steps.
template <class S>
tensor<S> lm_loss(const tensor<S>& logits, const std::vector<int>& y) {
    return cross_entropy(logits, y);
}

}  // namespace cas
