#pragma once

// Wall-clock scaling bench: encode / select / decode timed per input length,
// median over trials, with doubling ratios and a log-log slope summary.

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "cas/model.hpp"
#include "cas/trainer.hpp"

namespace cas {

struct bench_row {
    int n_tokens = 0;
    int b_chunks = 0;
    int l_select = 0;
    double encode_ms = 0.0;
    double select_ms = 0.0;
    double decode_ms = 0.0;
    double total_ms = 0.0;
    long peak_rss_bytes = 0;
};

struct bench_report {
    std::vector<bench_row> rows;  // sorted by n_tokens
    int threads = 1;
    int chunk_size = 0;
    int l_hyper = 0;
    int trials = 0;

    // least-squares slope of log(total_ms) vs log(n_tokens)
    double loglog_slope() const {
        if (rows.size() < 2) return 0.0;
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        const double n = static_cast<double>(rows.size());
        for (const auto& r : rows) {
            const double x = std::log(static_cast<double>(r.n_tokens));
            const double y = std::log(std::max(r.total_ms, 1e-9));
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        return (n * sxy - sx * sy) / (n * sxx - sx * sx);
    }

    // time(2N)/time(N) for consecutive rows where n doubles
    std::vector<double> doubling_ratios(double bench_row::*field) const {
        std::vector<double> out;
        for (size_t i = 1; i < rows.size(); ++i)
            if (rows[i].n_tokens == 2 * rows[i - 1].n_tokens)
                out.push_back((rows[i].*field) / std::max(rows[i - 1].*field, 1e-9));
        return out;
    }
};

namespace bench_detail {

inline long peak_rss_bytes() {
    rusage u{};
    getrusage(RUSAGE_SELF, &u);
    return u.ru_maxrss * 1024L;  // ru_maxrss is in KiB on Linux
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace bench_detail

template <class S>
bench_report bench_scaling(pipeline_model<S>& model, selector_policy<S>& policy, const std::vector<int>& lengths,
                           int trials, int chunk_size, int l_hyper, int target_len, uint64_t seed) {
    if (lengths.empty()) throw arg_error("bench_scaling: no lengths given");
    for (size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1]) throw arg_error("bench_scaling: lengths must be strictly increasing");
    if (trials < 1) throw arg_error("bench_scaling: trials must be >= 1");

    bench_report rep;
    rep.chunk_size = chunk_size;
    rep.l_hyper = l_hyper;
    rep.trials = trials;

    const int vmax = model.config().enc.vocab;
    rng data_rng(seed);
    using clock = std::chrono::steady_clock;
    auto ms_since = [](clock::time_point t0) {
        return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    };

    for (size_t li = 0; li < lengths.size(); ++li) {
        const int n = lengths[li];
        token_sequence src;
        src.ids.resize(static_cast<size_t>(n));
        for (auto& id : src.ids) id = NUM_RESERVED_IDS + static_cast<int>(data_rng.uniform_int(0, vmax - NUM_RESERVED_IDS - 1));
        std::vector<int> target(static_cast<size_t>(target_len));
        for (auto& id : target) id = NUM_RESERVED_IDS + static_cast<int>(data_rng.uniform_int(0, vmax - NUM_RESERVED_IDS - 1));
        target.back() = EOS_ID;

        std::vector<double> enc_ms, sel_ms, dec_ms;
        bench_row row;
        row.n_tokens = n;
        // one warmup plus the timed trials
        for (int t = 0; t <= trials; ++t) {
            no_grad_guard ng;
            rng sel_rng(seed + static_cast<uint64_t>(t));
            chunk_batch cb = chunk(src, chunk_size);
            auto t0 = clock::now();
            hidden_batch<S> hb = model.encode(cb);
            const double te = ms_since(t0);
            t0 = clock::now();
            selection_result<S> sel = run_selection(policy, hb, selection_mode::greedy, sel_rng);
            const double ts = ms_since(t0);
            t0 = clock::now();
            tensor<S> selected = gather_selected(hb, sel.selected);
            tensor<S> logits = model.decode_teacher_forced(selected, target);
            (void)logits;
            const double td = ms_since(t0);
            if (t == 0) {
                row.b_chunks = cb.b_chunks;
                row.l_select = sel.trace.l_select;
                continue;
            }
            enc_ms.push_back(te);
            sel_ms.push_back(ts);
            dec_ms.push_back(td);
        }
        row.encode_ms = bench_detail::median(enc_ms);
        row.select_ms = bench_detail::median(sel_ms);
        row.decode_ms = bench_detail::median(dec_ms);
        row.total_ms = row.encode_ms + row.select_ms + row.decode_ms;
        row.peak_rss_bytes = bench_detail::peak_rss_bytes();
        rep.rows.push_back(row);
    }
    return rep;
}

inline void write_bench_csv(std::ostream& os, const bench_report& rep) {
    os << "n_tokens,b_chunks,l_select,encode_ms,select_ms,decode_ms,total_ms\n";
    for (const auto& r : rep.rows)
        os << r.n_tokens << "," << r.b_chunks << "," << r.l_select << "," << r.encode_ms << "," << r.select_ms << ","
           << r.decode_ms << "," << r.total_ms << "\n";
}

inline void write_bench_text(std::ostream& os, const bench_report& rep) {
    os << "# scaling bench: threads=" << rep.threads << " chunk_size=" << rep.chunk_size << " l_hyper=" << rep.l_hyper
       << " trials=" << rep.trials << "\n";
    os << "# n_tokens b_chunks l_select encode_ms select_ms decode_ms total_ms peak_rss_bytes\n";
    for (const auto& r : rep.rows)
        os << r.n_tokens << " " << r.b_chunks << " " << r.l_select << " " << r.encode_ms << " " << r.select_ms << " "
           << r.decode_ms << " " << r.total_ms << " " << r.peak_rss_bytes << "\n";
    const auto enc_sel = rep.doubling_ratios(&bench_row::encode_ms);
    os << "# encode doubling ratios:";
    for (double d : enc_sel) os << " " << d;
    os << "\n# select doubling ratios:";
    for (double d : rep.doubling_ratios(&bench_row::select_ms)) os << " " << d;
    os << "\n# total doubling ratios:";
    for (double d : rep.doubling_ratios(&bench_row::total_ms)) os << " " << d;
    os << "\n# loglog_slope_total=" << rep.loglog_slope() << "\n";
}

}  // namespace cas
