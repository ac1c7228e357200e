#pragma once

// Transformer encoder over a chunk batch. Self-attention is intra-chunk
// (chunks are the batch axis), PAD keys are masked out, and after every
// layer the BOS/EOS hidden states are aligned to their cross-chunk means.

#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cas/chunking.hpp"
#include "cas/nn.hpp"
#include "cas/tensor.hpp"

namespace cas {

struct encoder_config {
    int n_layers = 2;
    int hidden = 64;
    int heads = 4;
    int ffn = 256;
    int vocab = 259;
    int max_body = 126;  // S; row width is S+2
    double dropout = 0.1;
    bool use_sba = true;
    bool sba_skip_pure_pad_chunks = false;

    void validate() const {
        if (n_layers < 1 || hidden < 1 || heads < 1 || ffn < 1 || vocab < 1 || max_body < 1)
            throw arg_error("encoder_config: all extents must be >= 1");
        if (hidden % heads != 0) throw arg_error("encoder_config: hidden not divisible by heads");
    }
};

template <class S>
struct hidden_batch {
    tensor<S> states;            // [B, S+2, d]
    int layer = 0;               // 0 = embeddings
    int body_size = 0;           // S
    int n_original = 0;
    std::vector<uint8_t> mask;   // B x (S+2), true = real position

    int b_chunks() const { return states.dim(0); }
    int width() const { return states.dim(1); }
    int hidden() const { return states.dim(2); }
};

namespace detail {
// Chunks whose interior is entirely PAD (only reachable when a caller builds
// a batch by hand; ceil-division chunking never produces one).
inline std::vector<uint8_t> pure_pad_chunks(const std::vector<uint8_t>& mask, int b, int w) {
    std::vector<uint8_t> pure(static_cast<size_t>(b), 1);
    for (int k = 0; k < b; ++k)
        for (int i = 1; i < w - 1; ++i)
            if (mask[static_cast<size_t>(k) * w + i]) {
                pure[static_cast<size_t>(k)] = 0;
                break;
            }
    return pure;
}
}  // namespace detail

// Replace every chunk's BOS and EOS hidden state with the cross-chunk mean
// of that slot. Participates in the graph: each chunk's pre-align slot
// receives 1/B of the summed downstream slot gradient.
template <class S>
hidden_batch<S> sba_align(const hidden_batch<S>& hb, bool skip_pure_pad_chunks = false) {
    const int b = hb.b_chunks();
    const int w = hb.width();
    const int d = hb.hidden();
    std::vector<uint8_t> included(static_cast<size_t>(b), 1);
    if (skip_pure_pad_chunks) {
        auto pure = detail::pure_pad_chunks(hb.mask, b, w);
        for (int k = 0; k < b; ++k) included[static_cast<size_t>(k)] = pure[static_cast<size_t>(k)] ? 0 : 1;
    }
    int b_inc = 0;
    for (uint8_t f : included) b_inc += f;
    if (b_inc == 0) throw contract_error("sba_align: no chunks included in the alignment mean");

    std::vector<S> out(hb.states.value());
    const size_t row_stride = static_cast<size_t>(w) * d;
    const size_t eos_off = static_cast<size_t>(w - 1) * d;
    // Shifted mean v0 + sum(vk - v0)/B: already-aligned slots reproduce
    // bitwise, which makes alignment exactly idempotent.
    int first = 0;
    while (!included[static_cast<size_t>(first)]) ++first;
    const S* ref = hb.states.value().data() + first * row_stride;
    std::vector<S> mean_bos(static_cast<size_t>(d), S(0)), mean_eos(static_cast<size_t>(d), S(0));
    for (int k = 0; k < b; ++k) {
        if (!included[static_cast<size_t>(k)]) continue;
        const S* base = hb.states.value().data() + k * row_stride;
        for (int j = 0; j < d; ++j) {
            mean_bos[static_cast<size_t>(j)] += base[j] - ref[j];
            mean_eos[static_cast<size_t>(j)] += base[eos_off + j] - ref[eos_off + j];
        }
    }
    const S inv = S(1) / S(b_inc);
    for (int j = 0; j < d; ++j) {
        mean_bos[static_cast<size_t>(j)] = ref[j] + mean_bos[static_cast<size_t>(j)] * inv;
        mean_eos[static_cast<size_t>(j)] = ref[eos_off + j] + mean_eos[static_cast<size_t>(j)] * inv;
    }
    for (int k = 0; k < b; ++k) {
        S* base = out.data() + k * row_stride;
        for (int j = 0; j < d; ++j) {
            base[j] = mean_bos[static_cast<size_t>(j)];
            base[eos_off + j] = mean_eos[static_cast<size_t>(j)];
        }
    }

    auto parent = hb.states;
    auto backprop = [b, d, row_stride, eos_off, included, inv](tensor_node<S>& self) {
        // Gradient through the slot replacement: sum downstream slot grads
        // over chunks, then hand each included chunk 1/B of that sum.
        // Interior positions pass through untouched.
        auto& pg = *self.parents[0];
        pg.ensure_grad();
        std::vector<S> gsum_bos(static_cast<size_t>(d), S(0)), gsum_eos(static_cast<size_t>(d), S(0));
        for (int k = 0; k < b; ++k) {
            const S* g = self.grad.data() + k * row_stride;
            for (int j = 0; j < d; ++j) {
                gsum_bos[static_cast<size_t>(j)] += g[j];
                gsum_eos[static_cast<size_t>(j)] += g[eos_off + j];
            }
        }
        for (int k = 0; k < b; ++k) {
            const S* g = self.grad.data() + k * row_stride;
            S* pgk = pg.grad.data() + k * row_stride;
            for (size_t off = static_cast<size_t>(d); off < eos_off; ++off) pgk[off] += g[off];
            if (included[static_cast<size_t>(k)]) {
                for (int j = 0; j < d; ++j) {
                    pgk[j] += inv * gsum_bos[static_cast<size_t>(j)];
                    pgk[eos_off + j] += inv * gsum_eos[static_cast<size_t>(j)];
                }
            }
        }
    };

    hidden_batch<S> out_hb = hb;
    out_hb.states = make_op<S>(hb.states.shape(), std::move(out), {parent}, std::move(backprop));
    return out_hb;
}

template <class S>
struct encoder_layer_params {
    norm_params<S> ln1, ln2;
    attention_params<S> attn;
    linear<S> ff1, ff2;
};

template <class S>
class encoder {
public:
    encoder() = default;

    encoder(const encoder_config& cfg, param_store<S>& ps, rng& r) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.hidden;
        const int w = cfg_.max_body + 2;
        std::vector<S> pos(static_cast<size_t>(w) * d);
        for (auto& v : pos) v = static_cast<S>(r.normal(0.0, 0.02));
        pos_emb_ = ps.add("encoder.pos_emb", tensor<S>::from_data({w, d}, std::move(pos)));
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string base = "encoder.layer" + std::to_string(l);
            encoder_layer_params<S> lp;
            lp.ln1 = make_norm(ps, base + ".ln1", d);
            lp.attn = make_attention(ps, base + ".attn", d, cfg_.heads, r);
            lp.ln2 = make_norm(ps, base + ".ln2", d);
            lp.ff1 = make_linear(ps, base + ".ff1", d, cfg_.ffn, r);
            lp.ff2 = make_linear(ps, base + ".ff2", cfg_.ffn, d, r);
            layers_.push_back(lp);
        }
    }

    const encoder_config& config() const { return cfg_; }

    // Token embedding (scaled by sqrt(d)) plus per-chunk positional rows:
    // every chunk restarts at position 0.
    hidden_batch<S> embed(const chunk_batch& cb, const tensor<S>& token_emb) const {
        if (cb.body_size > cfg_.max_body)
            throw arg_error("encoder: chunk body " + std::to_string(cb.body_size) + " exceeds max " +
                            std::to_string(cfg_.max_body));
        for (int id : cb.tokens)
            if (id >= cfg_.vocab) throw index_error("encoder: token id " + std::to_string(id) + " >= vocab size");
        const int w = cb.width();
        const int d = cfg_.hidden;
        tensor<S> emb = gather_rows(token_emb, cb.tokens);                 // [B*w, d]
        emb = scale(emb, static_cast<S>(std::sqrt(static_cast<double>(d))));
        emb = reshape(emb, {cb.b_chunks, w, d});
        tensor<S> pos = pos_emb_;
        if (w < cfg_.max_body + 2) {
            // shorter batches use a prefix of the positional table, with the
            // EOS column pinned to the table's last row
            std::vector<int> rows(static_cast<size_t>(w));
            for (int i = 0; i + 1 < w; ++i) rows[static_cast<size_t>(i)] = i;
            rows[static_cast<size_t>(w - 1)] = cfg_.max_body + 1;
            pos = gather_rows(pos_emb_, rows);
        }
        hidden_batch<S> hb;
        hb.states = add(emb, pos);
        hb.layer = 0;
        hb.body_size = cb.body_size;
        hb.n_original = cb.n_original;
        hb.mask = cb.mask;
        return hb;
    }

    // Pre-norm transformer blocks with intra-chunk self-attention, then SBA
    // after every layer (including the last). layer_trace, when given,
    // receives the post-SBA states of each layer.
    hidden_batch<S> encode(const chunk_batch& cb, const tensor<S>& token_emb, rng* dropout_rng = nullptr,
                           std::vector<hidden_batch<S>>* layer_trace = nullptr) const {
        hidden_batch<S> hb = embed(cb, token_emb);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const auto& lp = layers_[static_cast<size_t>(l)];
            tensor<S> normed = lp.ln1(hb.states);
            tensor<S> attn_out = multi_head_attention(normed, normed, lp.attn, &hb.mask, false);
            hb.states = add(hb.states, dropout(attn_out, cfg_.dropout, dropout_rng));
            tensor<S> ff_out = lp.ff2(gelu(lp.ff1(lp.ln2(hb.states))));
            hb.states = add(hb.states, dropout(ff_out, cfg_.dropout, dropout_rng));
            hb.layer = l + 1;
            if (cfg_.use_sba) hb = sba_align(hb, cfg_.sba_skip_pure_pad_chunks);
            if (layer_trace) layer_trace->push_back(hb);
        }
        return hb;
    }

private:
    encoder_config cfg_;
    tensor<S> pos_emb_;
    std::vector<encoder_layer_params<S>> layers_;
};

// ---------------------------------------------------------------------------
// Chunk-similarity diagnostics: cosine and the distance-scaled similarity
//   sim(v1,v2) = <v1,v2> / (|v1| * |v2| * (1 + |v1 - v2|)).
// Zero-norm vectors make an entry undefined rather than NaN.
// ---------------------------------------------------------------------------
struct similarity_matrix {
    int b = 0;
    std::vector<double> cosine;
    std::vector<double> scaled;
    std::vector<uint8_t> defined;

    double cos(int i, int j) const { return cosine[static_cast<size_t>(i) * b + j]; }
    double sim(int i, int j) const { return scaled[static_cast<size_t>(i) * b + j]; }
    bool is_defined(int i, int j) const { return defined[static_cast<size_t>(i) * b + j] != 0; }
};

template <class S>
similarity_matrix chunk_similarity(const hidden_batch<S>& hb, int slot) {
    const int b = hb.b_chunks();
    const int w = hb.width();
    const int d = hb.hidden();
    if (slot < 0 || slot >= w) throw arg_error("chunk_similarity: slot " + std::to_string(slot) + " out of range");
    similarity_matrix m;
    m.b = b;
    m.cosine.assign(static_cast<size_t>(b) * b, 0.0);
    m.scaled.assign(static_cast<size_t>(b) * b, 0.0);
    m.defined.assign(static_cast<size_t>(b) * b, 0);
    std::vector<double> norms(static_cast<size_t>(b), 0.0);
    const auto& val = hb.states.value();
    auto vec = [&](int k) { return val.data() + (static_cast<size_t>(k) * w + slot) * d; };
    for (int k = 0; k < b; ++k) {
        double s = 0.0;
        const S* v = vec(k);
        for (int j = 0; j < d; ++j) s += static_cast<double>(v[j]) * static_cast<double>(v[j]);
        norms[static_cast<size_t>(k)] = std::sqrt(s);
    }
    for (int a = 0; a < b; ++a) {
        for (int c = 0; c < b; ++c) {
            const size_t idx = static_cast<size_t>(a) * b + c;
            if (norms[static_cast<size_t>(a)] == 0.0 || norms[static_cast<size_t>(c)] == 0.0) continue;
            const S* va = vec(a);
            const S* vc = vec(c);
            double dot = 0.0, dist2 = 0.0;
            for (int j = 0; j < d; ++j) {
                dot += static_cast<double>(va[j]) * static_cast<double>(vc[j]);
                const double diff = static_cast<double>(va[j]) - static_cast<double>(vc[j]);
                dist2 += diff * diff;
            }
            const double nn = norms[static_cast<size_t>(a)] * norms[static_cast<size_t>(c)];
            m.cosine[idx] = dot / nn;
            m.scaled[idx] = dot / (nn * (1.0 + std::sqrt(dist2)));
            m.defined[idx] = 1;
        }
    }
    return m;
}

// Structured-text dump: one block per (layer, slot, metric) with B rows.
inline void write_similarity_block(std::ostream& os, int layer, const std::string& slot_name, const std::string& metric,
                                   const similarity_matrix& m, bool scaled) {
    os << "layer " << layer << " slot " << slot_name << " metric " << metric << " size " << m.b << "\n";
    for (int i = 0; i < m.b; ++i) {
        for (int j = 0; j < m.b; ++j) {
            if (j) os << " ";
            if (m.is_defined(i, j))
                os << (scaled ? m.sim(i, j) : m.cos(i, j));
            else
                os << "undef";
        }
        os << "\n";
    }
}

}  // namespace cas
