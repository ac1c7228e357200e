#pragma once

// Sectioned key=value configuration. Every tunable is declared in the schema
// below with a type and default; unknown keys in a file are errors.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cas/common.hpp"
#include "cas/decoder.hpp"
#include "cas/encoder.hpp"
#include "cas/model.hpp"
#include "cas/rl.hpp"

namespace cas {

enum class cfg_type { boolean, integer, real, text };

struct cfg_key {
    const char* name;  // "section.key"
    cfg_type type;
    const char* def;
    const char* help;
};

inline const std::vector<cfg_key>& config_schema() {
    static const std::vector<cfg_key> schema = {
        {"tensor.float32", cfg_type::boolean, "false", "use 32-bit floats (benchmarks only)"},
        {"chunking.chunk_size", cfg_type::integer, "126", "chunk body size S (row width is S+2)"},
        {"model.hidden", cfg_type::integer, "64", "hidden size shared by encoder and decoder"},
        {"model.vocab_mode", cfg_type::text, "byte", "byte | word"},
        {"model.word_vocab", cfg_type::integer, "64", "word-level vocabulary size (word mode)"},
        {"model.max_input_len", cfg_type::integer, "4096", "input truncation cap"},
        {"encoder.layers", cfg_type::integer, "2", "encoder layer count"},
        {"encoder.heads", cfg_type::integer, "4", "encoder attention heads"},
        {"encoder.ffn", cfg_type::integer, "256", "encoder feed-forward width"},
        {"encoder.dropout", cfg_type::real, "0.1", "encoder dropout rate (training only)"},
        {"encoder.use_sba", cfg_type::boolean, "true", "align BOS/EOS states across chunks each layer"},
        {"encoder.sba_skip_pure_pad_chunks", cfg_type::boolean, "false", "exclude all-PAD chunks from the alignment mean"},
        {"decoder.layers", cfg_type::integer, "2", "decoder layer count"},
        {"decoder.heads", cfg_type::integer, "4", "decoder attention heads"},
        {"decoder.max_target_len", cfg_type::integer, "64", "max decoded length"},
        {"decoder.beam_width", cfg_type::integer, "4", "beam width for beam generation"},
        {"decoder.length_alpha", cfg_type::real, "1.0", "length penalty exponent; 1 = mean log-prob"},
        {"decoder.dropout", cfg_type::real, "0.1", "decoder dropout rate (training only)"},
        {"rl.xi", cfg_type::real, "10.0", "reward magnification coefficient"},
        {"rl.l_hyper", cfg_type::integer, "256", "soft budget on selected count"},
        {"rl.gamma", cfg_type::real, "1.0", "discount"},
        {"rl.lambda", cfg_type::real, "0.95", "GAE smoothing"},
        {"rl.clip_eps", cfg_type::real, "0.2", "PPO clip"},
        {"rl.ppo_epochs", cfg_type::integer, "4", "PPO epochs per update"},
        {"rl.minibatch", cfg_type::integer, "256", "PPO minibatch size"},
        {"rl.value_coef", cfg_type::real, "0.5", "value-loss weight"},
        {"rl.entropy_coef", cfg_type::real, "0.01", "entropy bonus weight"},
        {"rl.literal_eq10", cfg_type::boolean, "false", "renormalize select rewards by 1-a0 only"},
        {"rl.normalize_advantages", cfg_type::boolean, "true", "zero-mean unit-variance advantages per batch"},
        {"train.task", cfg_type::text, "copy", "copy | needle | jsonl"},
        {"train.data_path", cfg_type::text, "", "JSONL path for task=jsonl"},
        {"train.steps", cfg_type::integer, "200", "training steps (batches)"},
        {"train.batch_size", cfg_type::integer, "4", "examples per batch"},
        {"train.lr_base", cfg_type::real, "5e-3", "transformer LR scale"},
        {"train.warmup", cfg_type::integer, "2500", "warmup steps of the LR schedule"},
        {"train.selector_lr", cfg_type::real, "1e-4", "fixed selector LR"},
        {"train.seed", cfg_type::integer, "0", "run seed"},
        {"train.selector_mode", cfg_type::text, "learned", "learned | random | all"},
        {"train.alternation", cfg_type::text, "both", "both: A then B each batch; odd_even: switch per batch"},
        {"train.checkpoint_every", cfg_type::integer, "0", "steps between checkpoints; 0 = end only"},
        {"train.log_every", cfg_type::integer, "1", "steps between log records"},
        {"train.n_train", cfg_type::integer, "200", "synthetic train set size"},
        {"train.n_eval", cfg_type::integer, "200", "synthetic eval set size"},
        {"train.seq_len", cfg_type::integer, "2048", "synthetic input length"},
        {"train.copy_target_len", cfg_type::integer, "16", "copy-task target length"},
        {"train.needle_count", cfg_type::integer, "4", "needles per example"},
        {"train.needle_payload", cfg_type::integer, "4", "payload tokens per needle"},
        {"train.eval_max_len", cfg_type::integer, "32", "generation cap during eval"},
        {"bench.lengths", cfg_type::text, "1008,2016,4032,8064", "comma-separated input lengths"},
        {"bench.trials", cfg_type::integer, "5", "timing trials per length (median)"},
        {"bench.target_len", cfg_type::integer, "16", "fixed decode target length"},
    };
    return schema;
}

class config {
public:
    static config defaults() {
        config c;
        for (const auto& k : config_schema()) c.values_[k.name] = k.def;
        return c;
    }

    static config from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw data_error("config: cannot open " + path);
        config c = defaults();
        std::string line, section;
        long line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            const auto where = path + ":" + std::to_string(line_no);
            std::string s = strip(line);
            if (s.empty() || s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[') {
                if (s.back() != ']') throw data_error("config: " + where + ": unterminated section header");
                section = strip(s.substr(1, s.size() - 2));
                continue;
            }
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw data_error("config: " + where + ": expected key = value");
            const std::string key = section.empty() ? strip(s.substr(0, eq)) : section + "." + strip(s.substr(0, eq));
            const std::string value = strip(s.substr(eq + 1));
            c.set(key, value, where);
        }
        return c;
    }

    void set(const std::string& key, const std::string& value, const std::string& where = "") {
        const cfg_key* spec = find_key(key);
        if (!spec)
            throw data_error("config: " + (where.empty() ? key : where) + ": unknown key `" + key + "`");
        // validate parse eagerly so errors carry the location
        switch (spec->type) {
            case cfg_type::boolean: parse_bool(value, key); break;
            case cfg_type::integer: parse_int(value, key); break;
            case cfg_type::real: parse_real(value, key); break;
            case cfg_type::text: break;
        }
        values_[key] = value;
    }

    bool get_bool(const std::string& key) const { return parse_bool(raw(key), key); }
    long get_int(const std::string& key) const { return parse_int(raw(key), key); }
    double get_real(const std::string& key) const { return parse_real(raw(key), key); }
    std::string get_text(const std::string& key) const { return raw(key); }

    const std::map<std::string, std::string>& all() const { return values_; }

private:
    static const cfg_key* find_key(const std::string& key) {
        for (const auto& k : config_schema())
            if (key == k.name) return &k;
        return nullptr;
    }

    static std::string strip(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    static bool parse_bool(const std::string& v, const std::string& key) {
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw data_error("config: key `" + key + "`: cannot parse boolean from `" + v + "`");
    }

    static long parse_int(const std::string& v, const std::string& key) {
        try {
            size_t pos = 0;
            long r = std::stol(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return r;
        } catch (const std::exception&) {
            throw data_error("config: key `" + key + "`: cannot parse integer from `" + v + "`");
        }
    }

    static double parse_real(const std::string& v, const std::string& key) {
        try {
            size_t pos = 0;
            double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("trailing");
            return r;
        } catch (const std::exception&) {
            throw data_error("config: key `" + key + "`: cannot parse number from `" + v + "`");
        }
    }

    std::string raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw data_error("config: unknown key `" + key + "`");
        return it->second;
    }

    std::map<std::string, std::string> values_;
};

inline model_config model_config_from(const config& c) {
    model_config m;
    m.enc.n_layers = static_cast<int>(c.get_int("encoder.layers"));
    m.enc.hidden = static_cast<int>(c.get_int("model.hidden"));
    m.enc.heads = static_cast<int>(c.get_int("encoder.heads"));
    m.enc.ffn = static_cast<int>(c.get_int("encoder.ffn"));
    m.enc.max_body = static_cast<int>(c.get_int("chunking.chunk_size"));
    m.enc.dropout = c.get_real("encoder.dropout");
    m.enc.use_sba = c.get_bool("encoder.use_sba");
    m.enc.sba_skip_pure_pad_chunks = c.get_bool("encoder.sba_skip_pure_pad_chunks");
    const std::string vm = c.get_text("model.vocab_mode");
    if (vm == "byte")
        m.enc.vocab = NUM_RESERVED_IDS + 256;
    else if (vm == "word")
        m.enc.vocab = NUM_RESERVED_IDS + static_cast<int>(c.get_int("model.word_vocab"));
    else
        throw data_error("config: model.vocab_mode must be byte or word, got `" + vm + "`");
    m.dec.n_layers = static_cast<int>(c.get_int("decoder.layers"));
    m.dec.heads = static_cast<int>(c.get_int("decoder.heads"));
    m.dec.hidden = m.enc.hidden;
    m.dec.vocab = m.enc.vocab;
    m.dec.max_target_len = static_cast<int>(c.get_int("decoder.max_target_len"));
    m.dec.beam_width = static_cast<int>(c.get_int("decoder.beam_width"));
    m.dec.length_alpha = c.get_real("decoder.length_alpha");
    m.validate();
    return m;
}

inline reward_config reward_config_from(const config& c) {
    reward_config r;
    r.xi = c.get_real("rl.xi");
    r.l_hyper = static_cast<int>(c.get_int("rl.l_hyper"));
    r.gamma = c.get_real("rl.gamma");
    r.lambda = c.get_real("rl.lambda");
    r.clip_eps = c.get_real("rl.clip_eps");
    r.ppo_epochs = static_cast<int>(c.get_int("rl.ppo_epochs"));
    r.minibatch = static_cast<int>(c.get_int("rl.minibatch"));
    r.value_coef = c.get_real("rl.value_coef");
    r.entropy_coef = c.get_real("rl.entropy_coef");
    r.literal_eq10 = c.get_bool("rl.literal_eq10");
    r.normalize_advantages = c.get_bool("rl.normalize_advantages");
    r.validate();
    return r;
}

}  // namespace cas
