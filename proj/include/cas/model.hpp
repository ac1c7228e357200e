#pragma once

// Full pipeline model: shared token embedding, chunked encoder with
// alignment, and the decoder. The selector policy lives in its own store;
// the two are checkpointed together.

#include <string>
#include <vector>

#include "cas/checkpoint.hpp"
#include "cas/chunking.hpp"
#include "cas/decoder.hpp"
#include "cas/encoder.hpp"
#include "cas/rl.hpp"
#include "cas/selector.hpp"

namespace cas {

struct model_config {
    encoder_config enc;
    decoder_config dec;

    void validate() const {
        enc.validate();
        dec.validate();
        if (enc.hidden != dec.hidden) throw arg_error("model_config: encoder/decoder hidden sizes differ");
        if (enc.vocab != dec.vocab) throw arg_error("model_config: encoder/decoder vocab sizes differ");
    }
};

template <class S = double>
class pipeline_model {
public:
    pipeline_model() = default;

    pipeline_model(const model_config& cfg, rng& r) : cfg_(cfg) {
        cfg_.validate();
        std::vector<S> emb(static_cast<size_t>(cfg_.enc.vocab) * cfg_.enc.hidden);
        for (auto& v : emb) v = static_cast<S>(r.normal(0.0, 0.02));
        token_emb_ = params_.add("token_emb", tensor<S>::from_data({cfg_.enc.vocab, cfg_.enc.hidden}, std::move(emb)));
        enc_ = encoder<S>(cfg_.enc, params_, r);
        dec_ = decoder<S>(cfg_.dec, params_, r);
    }

    const model_config& config() const { return cfg_; }
    param_store<S>& params() { return params_; }
    const param_store<S>& params() const { return params_; }
    const tensor<S>& token_emb() const { return token_emb_; }
    const encoder<S>& enc() const { return enc_; }
    const decoder<S>& dec() const { return dec_; }

    hidden_batch<S> encode(const chunk_batch& cb, rng* dropout_rng = nullptr,
                           std::vector<hidden_batch<S>>* layer_trace = nullptr) const {
        return enc_.encode(cb, token_emb_, dropout_rng, layer_trace);
    }

    tensor<S> decode_teacher_forced(const tensor<S>& selected, const std::vector<int>& y,
                                    cross_attention_record<S>* record = nullptr,
                                    const std::vector<uint8_t>* cross_key_mask = nullptr,
                                    rng* dropout_rng = nullptr, double dropout_rate = 0.0) const {
        return dec_.decode_teacher_forced(selected, y, token_emb_, record, cross_key_mask, dropout_rng, dropout_rate);
    }

    token_sequence generate(const tensor<S>& selected, typename decoder<S>::gen_mode mode, int max_len) const {
        return dec_.generate(selected, token_emb_, mode, max_len);
    }

private:
    model_config cfg_;
    param_store<S> params_;
    tensor<S> token_emb_;
    encoder<S> enc_;
    decoder<S> dec_;
};

// Save model + policy (+ optimizer states when given) into one container.
template <class S>
void save_checkpoint(const std::string& path, const pipeline_model<S>& model, const selector_policy<S>& policy,
                     const adam_state<S>* model_opt = nullptr, const adam_state<S>* policy_opt = nullptr) {
    std::vector<ckpt::entry> entries = checkpoint_entries(model.params(), model_opt, "model.");
    auto pe = checkpoint_entries(policy.params, policy_opt, "policy.");
    entries.insert(entries.end(), pe.begin(), pe.end());
    ckpt::save<S>(path, entries);
}

template <class S>
void load_checkpoint(const std::string& path, pipeline_model<S>& model, selector_policy<S>& policy,
                     adam_state<S>* model_opt = nullptr, adam_state<S>* policy_opt = nullptr) {
    auto entries = ckpt::load(path);
    restore_params(model.params(), entries, model_opt, "model.");
    restore_params(policy.params, entries, policy_opt, "policy.");
}

}  // namespace cas
