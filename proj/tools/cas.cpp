// cas: chunk-align-select pipeline CLI.
//
// Subcommands: train, eval, generate, bench, diag.
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric divergence.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cas/bench.hpp"
#include "cas/config.hpp"
#include "cas/data.hpp"
#include "cas/metrics.hpp"
#include "cas/model.hpp"
#include "cas/trainer.hpp"

namespace {

struct global_opts {
    std::string config_path;
    std::string out_dir = ".";
    std::optional<long> seed;
    std::optional<int> max_input_len;
    std::optional<int> chunk_size;
    std::optional<int> l_hyper;
    int device_threads = 1;
};

cas::config load_config(const global_opts& g) {
    cas::config c = g.config_path.empty() ? cas::config::defaults() : cas::config::from_file(g.config_path);
    if (g.seed) c.set("train.seed", std::to_string(*g.seed));
    if (g.max_input_len) c.set("model.max_input_len", std::to_string(*g.max_input_len));
    if (g.chunk_size) c.set("chunking.chunk_size", std::to_string(*g.chunk_size));
    if (g.l_hyper) c.set("rl.l_hyper", std::to_string(*g.l_hyper));
    if (g.device_threads < 1) throw cas::arg_error("--device-threads must be >= 1");
    return c;
}

cas::vocab vocab_from(const cas::config& c) {
    if (c.get_text("model.vocab_mode") == "byte") return cas::vocab::bytes();
    return cas::vocab::words(static_cast<int>(c.get_int("model.word_vocab")));
}

std::vector<int> parse_lengths(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

// JSONL with a `source` field; `target` optional (generation input).
std::vector<std::string> load_sources(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw cas::data_error("cannot open " + path);
    std::vector<std::string> out;
    std::string line;
    long line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw cas::data_error(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        if (!j.contains("source") || !j["source"].is_string())
            throw cas::data_error(path + ":" + std::to_string(line_no) + ": missing string field `source`");
        out.push_back(j["source"].get<std::string>());
    }
    return out;
}

struct run_context {
    cas::config cfg;
    cas::model_config mc;
    cas::reward_config rc;
    cas::train_config tc;
    cas::vocab voc;
    cas::pipeline_model<double> model;
    cas::selector_policy<double> policy;

    explicit run_context(const cas::config& c, const std::string& out_dir)
        : cfg(c), mc(cas::model_config_from(c)), rc(cas::reward_config_from(c)), tc(cas::train_config_from(c)),
          voc(vocab_from(c)), model(mc, make_rng(c, 0)), policy(mc.enc.hidden, make_rng(c, 1)) {
        tc.out_dir = out_dir;
    }

    static cas::rng& make_rng(const cas::config& c, uint64_t offset) {
        static cas::rng r(0);
        r.seed(static_cast<uint64_t>(c.get_int("train.seed")) + offset);
        return r;
    }
};

void write_metrics_report(std::ostream& os, const cas::eval_result& res, const std::string& dataset,
                          const std::string& checkpoint_id) {
    auto line = [&](const std::string& name, double value) {
        os << "metric=" << name << " value=" << value << " dataset=" << dataset << " checkpoint=" << checkpoint_id
           << "\n";
    };
    line("exact_match", res.exact_match);
    line("token_f1", res.token_f1);
    line("mean_l_select", res.mean_l_select);
    if (res.uniform_needle_fraction > 0 || res.needle_fraction > 0) {
        line("needle_fraction", res.needle_fraction);
        line("needle_fraction_uniform_baseline", res.uniform_needle_fraction);
    }
}

int cmd_train(const global_opts& g) {
    auto cfg = load_config(g);
    std::filesystem::create_directories(g.out_dir);
    run_context ctx(cfg, g.out_dir);
    auto data = cas::build_dataset(ctx.tc, ctx.voc, ctx.tc.n_train, ctx.tc.seed);
    std::ofstream log(g.out_dir + "/train_log.txt");
    cas::trainer<double> tr(ctx.model, ctx.policy, ctx.rc, ctx.tc);
    tr.log_stream = &log;
    std::cout << "training task=" << ctx.tc.task << " steps=" << ctx.tc.steps << " examples=" << data.size() << "\n";
    tr.run(data);
    auto eval_data = cas::build_dataset(ctx.tc, ctx.voc, ctx.tc.n_eval, ctx.tc.seed + 1);
    auto res = cas::evaluate_model(ctx.model, ctx.policy, eval_data, ctx.tc, ctx.rc);
    write_metrics_report(std::cout, res, ctx.tc.task, g.out_dir + "/checkpoint.cas");
    std::ofstream mf(g.out_dir + "/metrics.txt");
    write_metrics_report(mf, res, ctx.tc.task, g.out_dir + "/checkpoint.cas");
    std::cout << "final loss written to " << g.out_dir << "/train_log.txt\n";
    return 0;
}

int cmd_eval(const global_opts& g, const std::string& checkpoint, const std::string& data_path, bool beam) {
    auto cfg = load_config(g);
    std::filesystem::create_directories(g.out_dir);
    run_context ctx(cfg, g.out_dir);
    cas::load_checkpoint(checkpoint, ctx.model, ctx.policy);
    std::vector<cas::example> data;
    std::string dataset;
    if (!data_path.empty()) {
        data = cas::load_jsonl(data_path, ctx.voc, ctx.tc.max_input_len, ctx.mc.dec.max_target_len - 1);
        dataset = data_path;
    } else {
        data = cas::build_dataset(ctx.tc, ctx.voc, ctx.tc.n_eval, ctx.tc.seed + 1);
        dataset = ctx.tc.task;
    }
    auto res = cas::evaluate_model(ctx.model, ctx.policy, data, ctx.tc, ctx.rc, beam);
    write_metrics_report(std::cout, res, dataset, checkpoint);

    if (ctx.voc.mode() == cas::vocab::kind::byte_level && !data.empty()) {
        // text metrics over generated outputs
        double r1 = 0, r2 = 0, rl = 0, em = 0, f1 = 0;
        cas::rng r(ctx.tc.seed + 2);
        for (const auto& ex : data) {
            cas::no_grad_guard ng;
            auto cb = cas::chunk(ex.source, ctx.tc.chunk_size);
            auto hb = ctx.model.encode(cb);
            auto sel = cas::run_selection(ctx.policy, hb, cas::selection_mode::greedy, r);
            auto selected = cas::gather_selected(hb, sel.selected);
            auto gen = ctx.model.generate(selected,
                                          beam ? cas::decoder<double>::gen_mode::beam
                                               : cas::decoder<double>::gen_mode::greedy,
                                          ctx.tc.eval_max_len);
            const std::string cand = ctx.voc.decode(gen.ids);
            const std::string ref = ctx.voc.decode(ex.target.ids);
            auto rs = cas::rouge_scores(cand, ref);
            auto ef = cas::em_f1(cand, ref);
            r1 += rs.rouge1_f1;
            r2 += rs.rouge2_f1;
            rl += rs.rougeL_f1;
            em += ef.em;
            f1 += ef.f1;
        }
        const double n = static_cast<double>(data.size());
        std::cout << "metric=rouge1_f1 value=" << r1 / n << " dataset=" << dataset << " checkpoint=" << checkpoint << "\n";
        std::cout << "metric=rouge2_f1 value=" << r2 / n << " dataset=" << dataset << " checkpoint=" << checkpoint << "\n";
        std::cout << "metric=rougeL_f1 value=" << rl / n << " dataset=" << dataset << " checkpoint=" << checkpoint << "\n";
        std::cout << "metric=em value=" << em / n << " dataset=" << dataset << " checkpoint=" << checkpoint << "\n";
        std::cout << "metric=f1 value=" << f1 / n << " dataset=" << dataset << " checkpoint=" << checkpoint << "\n";
    }
    return 0;
}

int cmd_generate(const global_opts& g, const std::string& checkpoint, const std::string& input, bool beam) {
    auto cfg = load_config(g);
    std::filesystem::create_directories(g.out_dir);
    run_context ctx(cfg, g.out_dir);
    cas::load_checkpoint(checkpoint, ctx.model, ctx.policy);
    auto sources = load_sources(input);
    std::ofstream out(g.out_dir + "/generations.txt");
    cas::rng r(ctx.tc.seed);
    for (const auto& text : sources) {
        cas::token_sequence src = ctx.voc.encode(text);
        if (src.ids.empty()) throw cas::data_error("empty source after tokenization");
        if (static_cast<int>(src.ids.size()) > ctx.tc.max_input_len) src.ids.resize(static_cast<size_t>(ctx.tc.max_input_len));
        cas::no_grad_guard ng;
        auto cb = cas::chunk(src, ctx.tc.chunk_size);
        auto hb = ctx.model.encode(cb);
        auto sel = cas::run_selection(ctx.policy, hb, cas::selection_mode::greedy, r);
        auto selected = cas::gather_selected(hb, sel.selected);
        auto gen = ctx.model.generate(selected,
                                      beam ? cas::decoder<double>::gen_mode::beam
                                           : cas::decoder<double>::gen_mode::greedy,
                                      ctx.tc.eval_max_len);
        out << ctx.voc.decode(gen.ids) << "\n";
    }
    std::cout << "wrote " << sources.size() << " generations to " << g.out_dir << "/generations.txt\n";
    return 0;
}

template <class S>
int run_bench(const cas::config& cfg, const global_opts& g, const std::string& lengths_csv) {
    cas::model_config mc = cas::model_config_from(cfg);
    cas::train_config tc = cas::train_config_from(cfg);
    const auto lengths = parse_lengths(lengths_csv.empty() ? cfg.get_text("bench.lengths") : lengths_csv);
    cas::rng r(tc.seed);
    cas::pipeline_model<S> model(mc, r);
    cas::selector_policy<S> policy(mc.enc.hidden, r);
    auto rep = cas::bench_scaling(model, policy, lengths, static_cast<int>(cfg.get_int("bench.trials")), tc.chunk_size,
                                  static_cast<int>(cfg.get_int("rl.l_hyper")),
                                  static_cast<int>(cfg.get_int("bench.target_len")), tc.seed);
    rep.threads = g.device_threads;
    std::ofstream csv(g.out_dir + "/bench.csv");
    cas::write_bench_csv(csv, rep);
    std::ofstream txt(g.out_dir + "/bench_report.txt");
    cas::write_bench_text(txt, rep);
    cas::write_bench_text(std::cout, rep);
    std::cout << "wrote " << g.out_dir << "/bench.csv\n";
    return 0;
}

int cmd_bench(const global_opts& g, const std::string& lengths_csv) {
    auto cfg = load_config(g);
    std::filesystem::create_directories(g.out_dir);
    if (cfg.get_bool("tensor.float32")) return run_bench<float>(cfg, g, lengths_csv);
    return run_bench<double>(cfg, g, lengths_csv);
}

int cmd_diag(const global_opts& g, const std::string& checkpoint) {
    auto cfg = load_config(g);
    std::filesystem::create_directories(g.out_dir);
    run_context ctx(cfg, g.out_dir);
    if (!checkpoint.empty()) cas::load_checkpoint(checkpoint, ctx.model, ctx.policy);
    auto data = cas::build_dataset(ctx.tc, ctx.voc, 1, ctx.tc.seed + 1);
    const auto& ex = data.front();
    cas::no_grad_guard ng;
    auto cb = cas::chunk(ex.source, ctx.tc.chunk_size);
    std::vector<cas::hidden_batch<double>> layers;
    auto hb = ctx.model.encode(cb, nullptr, &layers);

    std::ofstream sim(g.out_dir + "/similarity.txt");
    for (const auto& lhb : layers) {
        for (const auto& [slot, name] : {std::pair<int, const char*>{0, "bos"},
                                         {lhb.width() - 1, "eos"},
                                         {1, "first_token"}}) {
            auto m = cas::chunk_similarity(lhb, slot);
            cas::write_similarity_block(sim, lhb.layer, name, "cosine", m, false);
            cas::write_similarity_block(sim, lhb.layer, name, "scaled", m, true);
        }
    }

    cas::rng r(ctx.tc.seed + 3);
    auto sel = cas::run_selection(ctx.policy, hb, cas::selection_mode::sample, r);
    auto selected = cas::gather_selected(hb, sel.selected);
    std::vector<int> y = ex.target.ids;
    if (static_cast<int>(y.size()) > ctx.mc.dec.max_target_len - 1) y.resize(static_cast<size_t>(ctx.mc.dec.max_target_len - 1));
    y.push_back(cas::EOS_ID);
    cas::cross_attention_record<double> rec;
    auto logits = ctx.model.decode_teacher_forced(selected, y, &rec);
    const double ll = cas::lm_loss(logits, y).item();
    const double r_lm = cas::lm_reward(ll, ctx.rc.xi);
    auto agg = cas::aggregate_attention(rec);
    cas::assign_rewards(sel.trace, agg, r_lm, ctx.rc);
    std::vector<double> rewards, values;
    for (const auto& s : sel.trace.steps) {
        rewards.push_back(s.reward);
        values.push_back(s.value);
    }
    auto gae = cas::compute_gae(rewards, values, ctx.rc.gamma, ctx.rc.lambda);
    for (size_t t = 0; t < sel.trace.steps.size(); ++t) {
        sel.trace.steps[t].advantage = gae.advantages[t];
        sel.trace.steps[t].ret = gae.returns[t];
    }
    std::ofstream tracef(g.out_dir + "/trace.txt");
    cas::write_trace(tracef, sel.trace);
    std::cout << "wrote " << g.out_dir << "/similarity.txt and " << g.out_dir << "/trace.txt"
              << " (n=" << sel.trace.n << " l_select=" << sel.trace.l_select << " r_lm=" << r_lm << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chunk-align-select long-sequence pipeline"};
    app.require_subcommand(1);

    global_opts g;
    app.add_option("--config", g.config_path, "configuration file (sectioned key=value)");
    app.add_option("--out-dir", g.out_dir, "output directory");
    long seed_flag = 0;
    int mil = 0, cs = 0, lh = 0;
    auto* seed_opt = app.add_option("--seed", seed_flag, "run seed (overrides config)");
    auto* mil_opt = app.add_option("--max-input-len", mil, "input truncation cap (overrides config)");
    auto* cs_opt = app.add_option("--chunk-size", cs, "chunk body size S (overrides config)");
    auto* lh_opt = app.add_option("--l-hyper", lh, "selected-length soft budget (overrides config)");
    app.add_option("--device-threads", g.device_threads, "worker threads (reference path is single-threaded)");

    auto* train = app.add_subcommand("train", "train model and selector per the config");
    std::string checkpoint, data_path, input_path, lengths_csv;
    bool beam = false;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    eval->add_option("--data", data_path, "JSONL dataset (source/target fields)");
    eval->add_flag("--beam", beam, "use beam search");
    auto* gen = app.add_subcommand("generate", "generate outputs for a JSONL input file");
    gen->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    gen->add_option("--input", input_path, "JSONL input with source field")->required();
    gen->add_flag("--beam", beam, "use beam search");
    auto* bench = app.add_subcommand("bench", "wall-clock scaling bench");
    bench->add_option("--lengths", lengths_csv, "comma-separated input lengths");
    auto* diag = app.add_subcommand("diag", "similarity matrices and a selection trace");
    diag->add_option("--checkpoint", checkpoint, "optional checkpoint path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;  // help exits 0; any parse failure is usage
    }

    try {
        if (seed_opt->count()) g.seed = seed_flag;
        if (mil_opt->count()) g.max_input_len = mil;
        if (cs_opt->count()) g.chunk_size = cs;
        if (lh_opt->count()) g.l_hyper = lh;
        if (train->parsed()) return cmd_train(g);
        if (eval->parsed()) return cmd_eval(g, checkpoint, data_path, beam);
        if (gen->parsed()) return cmd_generate(g, checkpoint, input_path, beam);
        if (bench->parsed()) return cmd_bench(g, lengths_csv);
        if (diag->parsed()) return cmd_diag(g, checkpoint);
    } catch (const cas::numeric_error& e) {
        std::cerr << "numeric divergence: " << e.what() << "\n";
        return 3;
    } catch (const cas::arg_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const cas::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
