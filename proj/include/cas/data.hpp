#pragma once

// Synthetic task generators and JSONL ingestion.

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cas/chunking.hpp"
#include "cas/common.hpp"
#include "cas/selector.hpp"
#include "cas/vocab.hpp"

namespace cas {

struct example {
    token_sequence source;
    token_sequence target;
    std::string task;
    std::vector<int> needle_positions;  // 1-based source positions inside needle spans

    void validate() const {
        if (source.ids.empty() || target.ids.empty()) throw arg_error("example: empty source or target");
    }
};

// Word-level id layout shared by the synthetic generators.
namespace synth {
constexpr int MARKER_ID = NUM_RESERVED_IDS;            // 3: needle marker
constexpr int PAYLOAD_BASE = NUM_RESERVED_IDS + 1;     // 4..19: needle payload alphabet
constexpr int PAYLOAD_ALPHABET = 16;
constexpr int FILLER_BASE = PAYLOAD_BASE + PAYLOAD_ALPHABET;  // 20+: filler alphabet
}  // namespace synth

// source = random tokens, target = its first target_len tokens.
inline std::vector<example> gen_copy_task(int n_examples, int seq_len, int vocab_size, uint64_t seed,
                                          int target_len = 16) {
    if (seq_len < target_len) throw arg_error("gen_copy_task: seq_len must be >= target_len");
    if (vocab_size < 1) throw arg_error("gen_copy_task: vocab_size must be >= 1");
    rng r(seed);
    std::vector<example> out;
    out.reserve(static_cast<size_t>(n_examples));
    for (int e = 0; e < n_examples; ++e) {
        example ex;
        ex.task = "copy";
        ex.source.ids.resize(static_cast<size_t>(seq_len));
        for (auto& id : ex.source.ids)
            id = NUM_RESERVED_IDS + static_cast<int>(r.uniform_int(0, vocab_size - 1));
        ex.target.ids.assign(ex.source.ids.begin(), ex.source.ids.begin() + target_len);
        out.push_back(std::move(ex));
    }
    return out;
}

// source = filler with marker-prefixed payload spans at random non-overlapping
// positions; target = payloads concatenated in position order.
inline std::vector<example> gen_needle_task(int n_examples, int seq_len, int n_needles, uint64_t seed,
                                            int payload_len = 4, int filler_alphabet = 44) {
    const int span = payload_len + 1;
    if (n_needles < 1 || payload_len < 1) throw arg_error("gen_needle_task: needle count and payload must be >= 1");
    if (n_needles * span * 4 > seq_len)
        throw arg_error("gen_needle_task: needles must occupy well under the sequence length");
    rng r(seed);
    std::vector<example> out;
    out.reserve(static_cast<size_t>(n_examples));
    for (int e = 0; e < n_examples; ++e) {
        example ex;
        ex.task = "needle";
        ex.source.ids.resize(static_cast<size_t>(seq_len));
        for (auto& id : ex.source.ids)
            id = synth::FILLER_BASE + static_cast<int>(r.uniform_int(0, filler_alphabet - 1));
        // draw non-overlapping span starts (0-based)
        std::vector<int> starts;
        while (static_cast<int>(starts.size()) < n_needles) {
            const int cand = static_cast<int>(r.uniform_int(0, seq_len - span));
            bool ok = true;
            for (int s : starts)
                if (std::abs(s - cand) < span) ok = false;
            if (ok) starts.push_back(cand);
        }
        std::sort(starts.begin(), starts.end());
        for (int s : starts) {
            ex.source.ids[static_cast<size_t>(s)] = synth::MARKER_ID;
            for (int p = 0; p < payload_len; ++p) {
                const int tok = synth::PAYLOAD_BASE + static_cast<int>(r.uniform_int(0, synth::PAYLOAD_ALPHABET - 1));
                ex.source.ids[static_cast<size_t>(s + 1 + p)] = tok;
                ex.target.ids.push_back(tok);
            }
            for (int p = 0; p < span; ++p) ex.needle_positions.push_back(s + p + 1);  // 1-based
        }
        out.push_back(std::move(ex));
    }
    return out;
}

// Fraction of selected interior tokens that fall inside needle spans.
inline double needle_selected_fraction(const selection_trace& trace, const example& ex) {
    std::vector<uint8_t> is_needle(static_cast<size_t>(trace.n) + 1, 0);
    for (int p : ex.needle_positions)
        if (p >= 1 && p <= trace.n) is_needle[static_cast<size_t>(p)] = 1;
    long selected = 0, hits = 0;
    for (const auto& s : trace.steps) {
        if (s.action != ACTION_SELECT) continue;
        selected += 1;
        if (is_needle[static_cast<size_t>(s.j)]) hits += 1;
    }
    return selected == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(selected);
}

// Monte-Carlo oracle: expected needle fraction of a uniform-random selector
// drawing the same number of positions.
inline double uniform_selector_needle_fraction(const example& ex, int l_select, uint64_t seed, int draws = 200) {
    const int n = ex.source.length();
    if (l_select < 1 || l_select > n) throw arg_error("uniform_selector_needle_fraction: bad l_select");
    std::vector<uint8_t> is_needle(static_cast<size_t>(n) + 1, 0);
    for (int p : ex.needle_positions)
        if (p >= 1 && p <= n) is_needle[static_cast<size_t>(p)] = 1;
    rng r(seed);
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i + 1;
    double acc = 0.0;
    for (int t = 0; t < draws; ++t) {
        // partial Fisher-Yates: first l_select entries form the draw
        for (int i = 0; i < l_select; ++i) {
            const int j = static_cast<int>(r.uniform_int(i, n - 1));
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        }
        long hits = 0;
        for (int i = 0; i < l_select; ++i)
            if (is_needle[static_cast<size_t>(pool[static_cast<size_t>(i)])]) hits += 1;
        acc += static_cast<double>(hits) / static_cast<double>(l_select);
    }
    return acc / draws;
}

// JSONL records with `source` and `target` text fields, byte-tokenized and
// truncated to the given caps.
inline std::vector<example> load_jsonl(const std::string& path, const vocab& v, int max_input_len,
                                       int max_target_len) {
    std::ifstream is(path);
    if (!is) throw data_error("load_jsonl: cannot open " + path);
    std::vector<example> out;
    std::string line;
    long line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error("load_jsonl: " + path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        for (const char* field : {"source", "target"}) {
            if (!j.contains(field) || !j[field].is_string())
                throw data_error("load_jsonl: " + path + ":" + std::to_string(line_no) + ": missing string field `" +
                                 field + "`");
        }
        example ex;
        ex.task = "jsonl";
        ex.source = v.encode(j["source"].get<std::string>());
        ex.target = v.encode(j["target"].get<std::string>());
        if (static_cast<int>(ex.source.ids.size()) > max_input_len) ex.source.ids.resize(static_cast<size_t>(max_input_len));
        if (static_cast<int>(ex.target.ids.size()) > max_target_len) ex.target.ids.resize(static_cast<size_t>(max_target_len));
        if (ex.source.ids.empty() || ex.target.ids.empty())
            throw data_error("load_jsonl: " + path + ":" + std::to_string(line_no) + ": empty source or target");
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace cas
