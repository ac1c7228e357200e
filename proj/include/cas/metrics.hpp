#pragma once

// Text metrics: F1-based ROUGE-1/2/L and the normalized exact-match / token
// F1 pair (lowercasing, punctuation and stopword removal, whitespace
// normalization). The stopword list ships as fixtures/stopwords_en.txt; the
// same list is compiled in as the default.

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cas/common.hpp"

namespace cas {

struct rouge_result {
    double rouge1_f1 = 0.0;
    double rouge2_f1 = 0.0;
    double rougeL_f1 = 0.0;
};

struct em_f1_result {
    double em = 0.0;
    double f1 = 0.0;
};

namespace metrics_detail {

inline std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

// lowercase; non-alphanumeric bytes become spaces
inline std::vector<std::string> rouge_tokens(const std::string& text) {
    std::string norm;
    norm.reserve(text.size());
    for (unsigned char c : text) {
        if (std::isalnum(c))
            norm.push_back(static_cast<char>(std::tolower(c)));
        else
            norm.push_back(' ');
    }
    return split_ws(norm);
}

inline double f1_from(double overlap, double cand_total, double ref_total) {
    if (overlap <= 0.0 || cand_total <= 0.0 || ref_total <= 0.0) return 0.0;
    const double p = overlap / cand_total;
    const double r = overlap / ref_total;
    return 2.0 * p * r / (p + r);
}

inline double ngram_overlap_f1(const std::vector<std::string>& cand, const std::vector<std::string>& ref, int n) {
    if (static_cast<int>(cand.size()) < n || static_cast<int>(ref.size()) < n) return 0.0;
    auto count = [n](const std::vector<std::string>& toks) {
        std::map<std::string, int> m;
        for (size_t i = 0; i + n <= toks.size(); ++i) {
            std::string key;
            for (int j = 0; j < n; ++j) {
                if (j) key.push_back('\x1f');
                key += toks[i + static_cast<size_t>(j)];
            }
            m[key] += 1;
        }
        return m;
    };
    const auto cm = count(cand);
    const auto rm = count(ref);
    double overlap = 0.0;
    for (const auto& [key, rc] : rm) {
        auto it = cm.find(key);
        if (it != cm.end()) overlap += std::min(rc, it->second);
    }
    return f1_from(overlap, static_cast<double>(cand.size() - n + 1), static_cast<double>(ref.size() - n + 1));
}

inline int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

}  // namespace metrics_detail

inline rouge_result rouge_scores(const std::string& candidate, const std::string& reference) {
    using namespace metrics_detail;
    const auto ref = rouge_tokens(reference);
    if (ref.empty()) {
        warn("rouge_scores: empty reference after normalization; scores are 0");
        return {};
    }
    const auto cand = rouge_tokens(candidate);
    rouge_result res;
    res.rouge1_f1 = ngram_overlap_f1(cand, ref, 1);
    res.rouge2_f1 = ngram_overlap_f1(cand, ref, 2);
    const int lcs = cand.empty() ? 0 : lcs_length(ref, cand);
    res.rougeL_f1 = f1_from(static_cast<double>(lcs), static_cast<double>(cand.size()), static_cast<double>(ref.size()));
    return res;
}

// Default stopword list; fixtures/stopwords_en.txt carries the same words.
inline const std::vector<std::string>& default_stopwords() {
    static const std::vector<std::string> words = {
        "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "aren", "as",
        "at", "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "cannot",
        "could", "couldn", "did", "didn", "do", "does", "doesn", "doing", "don", "down", "during", "each", "few",
        "for", "from", "further", "had", "hadn", "has", "hasn", "have", "haven", "having", "he", "her", "here",
        "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "isn", "it", "its",
        "itself", "just", "me", "more", "most", "mustn", "my", "myself", "no", "nor", "not", "now", "of", "off",
        "on", "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "shan",
        "she", "should", "shouldn", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
        "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too", "under", "until",
        "up", "very", "was", "wasn", "we", "were", "weren", "what", "when", "where", "which", "while", "who",
        "whom", "why", "will", "with", "won", "would", "wouldn", "you", "your", "yours", "yourself", "yourselves",
    };
    return words;
}

inline std::set<std::string> load_stopwords(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data_error("load_stopwords: cannot open " + path);
    std::set<std::string> out;
    std::string w;
    while (is >> w) out.insert(w);
    return out;
}

// lowercase, strip punctuation characters, drop stopwords, single-space join
inline std::string normalize_answer(const std::string& text, const std::set<std::string>* stopwords = nullptr) {
    std::string lowered;
    lowered.reserve(text.size());
    for (unsigned char c : text) {
        if (std::ispunct(c)) continue;
        lowered.push_back(static_cast<char>(std::tolower(c)));
    }
    static const std::set<std::string> default_set(default_stopwords().begin(), default_stopwords().end());
    const std::set<std::string>& stops = stopwords ? *stopwords : default_set;
    std::string out;
    for (const auto& tok : metrics_detail::split_ws(lowered)) {
        if (stops.count(tok)) continue;
        if (!out.empty()) out.push_back(' ');
        out += tok;
    }
    return out;
}

inline em_f1_result em_f1(const std::string& candidate, const std::string& reference,
                          const std::set<std::string>* stopwords = nullptr) {
    using namespace metrics_detail;
    const std::string nc = normalize_answer(candidate, stopwords);
    const std::string nr = normalize_answer(reference, stopwords);
    em_f1_result res;
    res.em = nc == nr ? 1.0 : 0.0;
    const auto ct = split_ws(nc);
    const auto rt = split_ws(nr);
    if (ct.empty() && rt.empty()) {
        res.f1 = 1.0;
        return res;
    }
    std::map<std::string, int> cm;
    for (const auto& t : ct) cm[t] += 1;
    double overlap = 0.0;
    std::map<std::string, int> rm;
    for (const auto& t : rt) rm[t] += 1;
    for (const auto& [tok, rc] : rm) {
        auto it = cm.find(tok);
        if (it != cm.end()) overlap += std::min(rc, it->second);
    }
    res.f1 = f1_from(overlap, static_cast<double>(ct.size()), static_cast<double>(rt.size()));
    return res;
}

// Token-id multiset F1, for word-level synthetic tasks.
inline double token_f1(const std::vector<int>& candidate, const std::vector<int>& reference) {
    if (candidate.empty() && reference.empty()) return 1.0;
    std::map<int, int> cm, rm;
    for (int t : candidate) cm[t] += 1;
    for (int t : reference) rm[t] += 1;
    double overlap = 0.0;
    for (const auto& [tok, rc] : rm) {
        auto it = cm.find(tok);
        if (it != cm.end()) overlap += std::min(rc, it->second);
    }
    return metrics_detail::f1_from(overlap, static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
}

}  // namespace cas
