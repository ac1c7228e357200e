#pragma once

// Splits a long token sequence into a rectangular batch of BOS/body/EOS
// chunks with suffix padding, and keeps the (k,i) <-> j index map between
// chunk coordinates and original positions. Indices k, i, j are 1-based to
// match the index algebra j = (k-1)*S + i; column 0 of each chunk row is BOS
// and column S+1 is EOS.

#include <cstdint>
#include <string>
#include <vector>

#include "cas/common.hpp"

namespace cas {

struct token_sequence {
    std::vector<int> ids;

    int length() const { return static_cast<int>(ids.size()); }

    void validate() const {
        if (ids.empty()) throw arg_error("token_sequence: empty sequence");
        for (int id : ids)
            if (id == PAD_ID || id == BOS_ID || id == EOS_ID)
                throw arg_error("token_sequence: reserved id " + std::to_string(id) + " in body");
    }
};

struct chunk_batch {
    std::vector<int> tokens;     // b_chunks x (body_size + 2), row-major
    std::vector<uint8_t> mask;   // true = real token (BOS/EOS count as real)
    int body_size = 0;           // S
    int b_chunks = 0;            // B
    int n_original = 0;          // N

    int width() const { return body_size + 2; }

    int tok(int k, int col) const { return tokens[static_cast<size_t>(k) * width() + col]; }
    bool real(int k, int col) const { return mask[static_cast<size_t>(k) * width() + col] != 0; }
};

// j = (k-1)*S + i for 1-based chunk id k and 1-based within-chunk id i.
inline int flat_index(int k, int i, int s) {
    if (s < 1) throw arg_error("flat_index: chunk body size must be >= 1");
    if (i < 1 || i > s)
        throw arg_error("flat_index: within-chunk id " + std::to_string(i) + " outside [1," + std::to_string(s) + "]");
    if (k < 1) throw arg_error("flat_index: chunk id must be >= 1");
    return (k - 1) * s + i;
}

inline std::pair<int, int> chunk_index(int j, int s) {
    if (s < 1) throw arg_error("chunk_index: chunk body size must be >= 1");
    if (j < 1) throw arg_error("chunk_index: position must be >= 1");
    const int k = (j - 1) / s + 1;
    const int i = (j - 1) % s + 1;
    return {k, i};
}

inline chunk_batch chunk(const token_sequence& x, int s) {
    if (s < 1) throw arg_error("chunk: chunk body size must be >= 1");
    x.validate();
    const int n = x.length();
    chunk_batch cb;
    cb.body_size = s;
    cb.n_original = n;
    cb.b_chunks = (n + s - 1) / s;
    const int w = cb.width();
    cb.tokens.assign(static_cast<size_t>(cb.b_chunks) * w, PAD_ID);
    cb.mask.assign(static_cast<size_t>(cb.b_chunks) * w, 0);
    for (int k = 1; k <= cb.b_chunks; ++k) {
        const size_t row = static_cast<size_t>(k - 1) * w;
        cb.tokens[row + 0] = BOS_ID;
        cb.mask[row + 0] = 1;
        cb.tokens[row + w - 1] = EOS_ID;
        cb.mask[row + w - 1] = 1;
        for (int i = 1; i <= s; ++i) {
            const int j = flat_index(k, i, s);
            if (j <= n) {
                cb.tokens[row + i] = x.ids[static_cast<size_t>(j - 1)];
                cb.mask[row + i] = 1;
            }
        }
    }
    return cb;
}

inline token_sequence dechunk(const chunk_batch& cb) {
    token_sequence x;
    x.ids.reserve(static_cast<size_t>(cb.n_original));
    const int w = cb.width();
    for (int k = 1; k <= cb.b_chunks; ++k) {
        const size_t row = static_cast<size_t>(k - 1) * w;
        bool saw_pad = false;
        for (int i = 1; i <= cb.body_size; ++i) {
            if (cb.mask[row + i]) {
                if (saw_pad)
                    throw contract_error("dechunk: real token after padding in chunk " + std::to_string(k));
                x.ids.push_back(cb.tokens[row + i]);
            } else {
                if (cb.tokens[row + i] != PAD_ID)
                    throw contract_error("dechunk: masked-off position holds a non-pad token");
                saw_pad = true;
            }
        }
    }
    if (static_cast<int>(x.ids.size()) != cb.n_original)
        throw contract_error("dechunk: recovered " + std::to_string(x.ids.size()) + " tokens, expected " +
                             std::to_string(cb.n_original));
    return x;
}

}  // namespace cas
