// SPDX-License-Identifier: Apache-2.0
#pragma once

// Stage orchestration: ingest -> filter -> compress -> prune -> evaluate.
// Stages exchange data only through files under <output_dir>/<stage>/, each
// with a manifest whose parent is the previous stage's manifest digest.

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "damoc/config.hpp"
#include "damoc/corpus.hpp"
#include "damoc/data_filter.hpp"
#include "damoc/eval_rank.hpp"
#include "damoc/layer_prune.hpp"
#include "damoc/numerics.hpp"
#include "damoc/rewriter.hpp"
#include "damoc/tensor_archive.hpp"
#include "damoc/tiny_transformer.hpp"
#include "damoc/token_compress.hpp"

namespace damoc::pipeline {

using corpus::Manifest;
using corpus::Stage;

/// A stage failed; the message is prefixed with the stage name.
class StageError : public Error {
public:
    StageError(Stage s, const std::string& what)
        : Error("stage " + std::string(corpus::to_string(s)) + ": " + what), stage(s) {}
    Stage stage;
};

/// Exclusive writer lock on an output directory. A lock left by a dead
/// process is taken over.
class OutputLock {
public:
    explicit OutputLock(const fs::path& dir) : path_(dir / ".damoc.lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        for (int attempt = 0; attempt < 2; ++attempt) {
            const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
            if (fd >= 0) {
                const std::string pid = std::to_string(::getpid()) + "\n";
                [[maybe_unused]] auto w = ::write(fd, pid.data(), pid.size());
                ::close(fd);
                return;
            }
            if (errno != EEXIST) throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
            long holder = 0;
            try {
                holder = std::stol(io::read_file(path_));
            } catch (const std::exception&) {
            }
            if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno == EPERM))
                throw IoError("output directory " + dir.string() + " is locked by process " + std::to_string(holder));
            fs::remove(path_, ec);
        }
        throw IoError("cannot acquire lock " + path_.string());
    }
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;
    ~OutputLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

inline fs::path stage_dir(const PipelineConfig& c, Stage s) { return c.output_dir / std::string(corpus::to_string(s)); }

inline Manifest parent_manifest(const PipelineConfig& c, Stage s, Stage parent) {
    const auto p = stage_dir(c, parent) / "manifest.json";
    if (!fs::exists(p))
        throw StageError(s, "missing parent stage output " + p.string() + " (run '" +
                                std::string(corpus::to_string(parent)) + "' first)");
    return corpus::read_manifest(p);
}

inline Manifest new_manifest(const PipelineConfig& c, Stage s, std::uint64_t seed, const std::optional<Manifest>& parent) {
    Manifest m;
    m.stage = s;
    m.config_digest = corpus::config_digest(c.raw);
    m.seed = seed;
    if (parent) m.parent_manifest = parent->digest();
    m.created_at = corpus::now_iso8601();
    return m;
}

inline void require_path(Stage s, const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw StageError(s, what + " not found: " + p.string());
}

// ---- stages ----

inline Manifest run_ingest(const PipelineConfig& c) {
    const Stage S = Stage::ingest;
    require_path(S, c.dataset_path, "dataset_path");
    corpus::Dataset ds = corpus::load_dataset(c.dataset_path);
    for (const auto& [name, path] : c.scores.channels) {
        require_path(S, path, "channel file " + name);
        ds.set_channel(corpus::parse_channel_jsonl(io::read_file(path), name, path.string()));
    }
    for (auto [side, path] : {std::pair{corpus::Side::question, c.scores.question_token_scores},
                              std::pair{corpus::Side::answer, c.scores.answer_token_scores}}) {
        if (!path) continue;
        require_path(S, *path, "token score file");
        std::erase_if(ds.token_scores, [&](const corpus::TokenScoreSeq& t) { return t.side == side; });
        auto seqs = corpus::parse_token_scores_jsonl(io::read_file(*path), side, path->string());
        ds.token_scores.insert(ds.token_scores.end(), seqs.begin(), seqs.end());
    }
    if (!ds.find_channel("length")) ds.set_channel(filter::length_channel(ds));
    if (!ds.find_channel("ifd")) {
        bool all = ds.size() > 0;
        for (const auto& s : ds.samples) {
            const auto* t = ds.find_token_scores(s.id, corpus::Side::answer);
            all = all && t && t->logprob_unconditioned;
        }
        if (all) ds.set_channel(filter::ifd_channel(ds));
    }
    ds.validate();

    numerics::EmbeddingMatrix emb;
    if (c.embeddings_path) {
        require_path(S, *c.embeddings_path, "embeddings_path");
        auto all = numerics::read_embeddings(*c.embeddings_path);
        std::vector<std::string> ids;
        for (const auto& s : ds.samples) ids.push_back(s.id);
        emb = all.select_ids(ids);
    } else {
        emb = numerics::embed_samples(ds, c.filter.embed_dims, c.seed);
    }
    const auto dir = stage_dir(c, S);
    numerics::write_embeddings(emb, dir / "embeddings.dmcemb");
    Manifest m = new_manifest(c, S, c.seed, std::nullopt);
    m.stats = {{"n_samples", double(ds.size())}, {"kept_ratio", 1.0}, {"n_channels", double(ds.channels.size())},
               {"embedding_dims", double(emb.dims())}};
    corpus::save_dataset(ds, dir, m);
    return m;
}

inline Manifest run_filter(const PipelineConfig& c) {
    const Stage S = Stage::filter;
    const Manifest parent = parent_manifest(c, S, Stage::ingest);
    const auto in = stage_dir(c, Stage::ingest);
    const corpus::Dataset ds = corpus::load_dataset(in);
    const auto emb = numerics::read_embeddings(in / "embeddings.dmcemb");
    if (ds.size() == 0) throw StageError(S, "dataset is empty");
    const std::size_t k = filter::budget_for_ratio(c.filter.ratio, ds.size());
    filter::FilterContext ctx(ds, &emb);
    auto sel = filter::run_method(c.filter.method, ctx, k, c.filter.method_params, c.filter_seed());
    sel.params["ratio"] = c.filter.ratio;
    const auto dir = stage_dir(c, S);
    io::write_file(dir / "selection.json", sel.to_json().dump(2) + "\n");
    const auto sub = ds.subset(sel.kept_ids);
    numerics::write_embeddings(emb.select_ids(sel.kept_ids), dir / "embeddings.dmcemb");
    Manifest m = new_manifest(c, S, c.filter_seed(), parent);
    m.stats = {{"n_source", double(ds.size())},
               {"n_kept", double(sel.kept_ids.size())},
               {"kept_ratio", double(sel.kept_ids.size()) / double(ds.size())},
               {"ratio", c.filter.ratio}};
    corpus::save_dataset(sub, dir, m);
    return m;
}

inline compress::CompressOptions compress_options(const CompressConfig& cc) {
    compress::CompressOptions o;
    o.budget = {std::min(cc.question_keep_ratio, cc.answer_keep_ratio), cc.question_keep_ratio, cc.answer_keep_ratio,
                cc.min_tokens_kept};
    o.keep_high_surprisal = cc.keep_high_surprisal;
    o.protect_answer = cc.protect_answer;
    o.rewrite.threshold = cc.bert_threshold;
    o.rewrite.max_rounds = cc.max_rounds;
    o.rewrite.length_tolerance = cc.length_tolerance;
    o.n_exemplars = cc.n_exemplars;
    return o;
}

inline Manifest run_compress(const PipelineConfig& c) {
    const Stage S = Stage::compress;
    const Manifest parent = parent_manifest(c, S, Stage::filter);
    const corpus::Dataset ds = corpus::load_dataset(stage_dir(c, Stage::filter));
    const numerics::HashedTokenEmbedder embedder(c.compress.embedder_dims, c.seed);
    std::unique_ptr<rewrite::Rewriter> rw;
    if (c.compress.rewriter_endpoint) rw = rewrite::make_rewriter(*c.compress.rewriter_endpoint);
    const auto opt = compress_options(c.compress);
    const auto results = compress::compress_dataset(ds, embedder, opt, rw.get(), c.seed);
    const auto out = compress::apply_compression(ds, results, opt.tokenizer);
    const auto dir = stage_dir(c, S);
    io::write_file(dir / "compressed.jsonl", compress::compressed_jsonl(results));
    std::string attempts;
    for (const auto& r : results)
        for (const auto& a : r.attempts) {
            nlohmann::ordered_json j;
            j["id"] = r.id;
            j["round"] = a.round;
            j["bertscore"] = a.bertscore;
            j["accepted"] = a.accepted;
            if (!a.rejection.empty()) j["rejection"] = a.rejection;
            j["response_text"] = a.response_text;
            attempts += j.dump() + "\n";
        }
    io::write_file(dir / "rewrite_attempts.jsonl", attempts);
    Manifest m = new_manifest(c, S, c.seed, parent);
    m.stats = compress::compression_report(ds, out, &results);
    m.stats["token_keep_ratio"] = 1.0 - m.stats.count("token_compression_ratio") * m.stats["token_compression_ratio"];
    m.stats["budget.question_keep_ratio"] = c.compress.question_keep_ratio;
    m.stats["budget.answer_keep_ratio"] = c.compress.answer_keep_ratio;
    m.stats["bert_threshold"] = c.compress.bert_threshold;
    corpus::save_dataset(out, dir, m);
    return m;
}

/// Calibration subset: calib_size samples drawn by a seeded shuffle, kept in
/// dataset order.
inline corpus::Dataset calibration_subset(const corpus::Dataset& ds, std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(mix_seed(seed, 0xca1));
    auto pick = filter::fisher_yates_prefix(idx, std::min(n, ds.size()), rng);
    std::sort(pick.begin(), pick.end());
    std::vector<std::string> ids;
    for (auto i : pick) ids.push_back(ds.samples[i].id);
    return ds.subset(ids);
}

inline Manifest run_prune(const PipelineConfig& c) {
    const Stage S = Stage::prune;
    const Manifest parent = parent_manifest(c, S, Stage::compress);
    const auto dir = stage_dir(c, S);
    Manifest m = new_manifest(c, S, c.seed, parent);
    if (!c.prune) {
        m.stats = {{"skipped", 1.0}, {"layer_keep_ratio", 1.0}};
        corpus::write_manifest(m, dir / "manifest.json");
        return m;
    }
    const PruneConfig& p = *c.prune;
    require_path(S, p.archive, "prune.archive");
    require_path(S, p.pre_archive, "prune.pre_archive");
    const auto arch = tensor::read_archive(p.archive, p.pre_archive);
    tensor::ActivationTrace trace;
    if (p.trace) {
        require_path(S, *p.trace, "prune.trace");
        trace = tensor::read_trace(*p.trace);
    } else {
        const auto ds = corpus::load_dataset(stage_dir(c, Stage::compress));
        const tiny::TinyTransformer model(arch, p.n_heads);
        trace = tiny::capture_activations(model, calibration_subset(ds, p.calib_size, c.seed), p.max_seq);
    }
    if (trace.n_matrices() != arch.layers.size() + 1)
        throw StageError(S, "trace has " + std::to_string(trace.n_matrices()) + " matrices, archive needs " +
                                std::to_string(arch.layers.size() + 1));
    tensor::write_trace(trace, dir / "calib.act");
    const auto is = prune::layer_importance(trace);
    const auto plan = prune::plan_prune(is, p.sim_threshold, p.keep_rate);
    const auto merged = prune::merge_layers(arch, plan, is, {p.scale_target});
    tensor::write_archive(merged, dir / "pruned.safetensors");
    nlohmann::ordered_json pj = plan.to_json();
    pj["importance"] = is.scores;
    pj["scale_target"] = p.scale_target;
    io::write_file(dir / "plan.json", pj.dump(2) + "\n");
    const double L = double(arch.layers.size());
    m.stats = {{"n_layers_before", L},
               {"n_layers_after", double(merged.layers.size())},
               {"n_pruned", double(plan.pruned_indices.size())},
               {"layer_keep_ratio", double(merged.layers.size()) / L},
               {"sim_threshold", p.sim_threshold},
               {"keep_rate", p.keep_rate},
               {"calib_rows", double(trace.rows)}};
    corpus::write_manifest(m, dir / "manifest.json");
    return m;
}

inline double stat_or(const Manifest& m, const std::string& k, double def) {
    auto it = m.stats.find(k);
    return it == m.stats.end() ? def : it->second;
}

inline Manifest run_evaluate(const PipelineConfig& c) {
    const Stage S = Stage::evaluate;
    if (!c.evaluate) throw ConfigError("evaluate: section is required for this stage");
    const Manifest parent = parent_manifest(c, S, Stage::prune);
    const auto filt = parent_manifest(c, S, Stage::filter);
    const auto comp = parent_manifest(c, S, Stage::compress);
    const EvaluateConfig& e = *c.evaluate;
    std::vector<eval::RankTable> tables;
    for (const auto& p : [&] {
             std::vector<fs::path> v{e.baseline_table};
             v.insert(v.end(), e.extra_tables.begin(), e.extra_tables.end());
             return v;
         }()) {
        require_path(S, p, "evaluate table");
        tables.push_back(eval::parse_rank_table_csv(io::read_file(p), p.stem().string()));
    }
    eval::CostModel cm;
    cm.sample_keep_ratio = stat_or(filt, "kept_ratio", 1.0);
    cm.token_keep_ratio = stat_or(comp, "token_keep_ratio", 1.0);
    cm.layer_keep_ratio = stat_or(parent, "layer_keep_ratio", 1.0);
    cm.epochs_ratio = e.epochs_ratio;
    cm.measured_baseline_minutes = e.measured_baseline_minutes;
    cm.measured_pipeline_minutes = e.measured_pipeline_minutes;
    const auto dir = e.output_dir.value_or(stage_dir(c, S));
    Manifest rep = eval::emit_report(tables, cm, dir);
    Manifest m = new_manifest(c, S, c.seed, parent);
    m.stats = rep.stats;
    m.stats["sample_keep_ratio"] = cm.sample_keep_ratio;
    m.stats["token_keep_ratio"] = cm.token_keep_ratio;
    m.stats["layer_keep_ratio"] = cm.layer_keep_ratio;
    corpus::write_manifest(m, stage_dir(c, S) / "manifest.json");
    return m;
}

/// Runs one stage under the output-directory lock. Non-config failures are
/// rethrown as StageError.
inline Manifest run_stage(const PipelineConfig& c, Stage s) {
    OutputLock lock(c.output_dir);
    try {
        switch (s) {
            case Stage::ingest: return run_ingest(c);
            case Stage::filter: return run_filter(c);
            case Stage::compress: return run_compress(c);
            case Stage::prune: return run_prune(c);
            case Stage::evaluate: return run_evaluate(c);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(s, e.what());
    }
    throw StageError(s, "unknown stage");
}

inline constexpr Stage kStageOrder[] = {Stage::ingest, Stage::filter, Stage::compress, Stage::prune, Stage::evaluate};

/// All stages in order; stops at the first failure, leaving earlier
/// manifests in place.
inline Manifest run_all(const PipelineConfig& c) {
    if (!c.evaluate) throw ConfigError("invalid config (1 problem):\n  - evaluate: required for run-all");
    Manifest last;
    for (Stage s : kStageOrder) last = run_stage(c, s);
    return last;
}

/// Stages reachable from the evaluate manifest through parent digests,
/// newest first.
inline std::vector<Stage> ancestry(const fs::path& output_dir) {
    std::map<std::string, Manifest> by_digest;
    for (Stage s : kStageOrder) {
        const auto p = output_dir / std::string(corpus::to_string(s)) / "manifest.json";
        if (fs::exists(p)) {
            auto m = corpus::read_manifest(p);
            by_digest.emplace(m.digest(), m);
        }
    }
    std::vector<Stage> out;
    const auto p = output_dir / "evaluate" / "manifest.json";
    if (!fs::exists(p)) return out;
    std::optional<Manifest> cur = corpus::read_manifest(p);
    while (cur) {
        out.push_back(cur->stage);
        if (!cur->parent_manifest || out.size() > 16) break;
        auto it = by_digest.find(*cur->parent_manifest);
        if (it == by_digest.end()) break;
        cur = it->second;
    }
    return out;
}

// ---- synthetic ranking bench ----

struct LeverSet {
    bool filter = false;
    bool compress = false;
    bool prune = false;
    std::string label() const {
        std::string s;
        for (auto [on, name] : {std::pair{filter, "filter"}, std::pair{compress, "compress"}, std::pair{prune, "prune"}})
            if (on) s += (s.empty() ? "" : "+") + std::string(name);
        return s.empty() ? "none" : s;
    }
};

inline std::vector<LeverSet> all_lever_sets() {
    std::vector<LeverSet> out;
    for (int m = 0; m < 8; ++m) out.push_back({bool(m & 1), bool(m & 2), bool(m & 4)});
    return out;
}

struct SyntheticBench {
    std::size_t n_models = 8;
    std::vector<double> true_quality;
    double noise_sigma = 0;
    /// lever name -> per-model accuracy delta (a single value applies to all).
    std::map<std::string, std::vector<double>> lever_penalties;
    std::uint64_t seed = 0;

    double penalty(const std::string& lever, std::size_t m) const {
        auto it = lever_penalties.find(lever);
        if (it == lever_penalties.end() || it->second.empty()) return 0;
        if (it->second.size() == 1) return it->second[0];
        if (it->second.size() != n_models) throw ValidationError("penalty for lever '" + lever + "' has wrong length");
        return it->second[m];
    }
};

/// Baseline (no levers) and pipeline (given levers) accuracy tables:
/// accuracy = true_quality + enabled penalties + N(0, sigma^2) noise.
inline std::pair<eval::RankTable, eval::RankTable> synth_bench(const SyntheticBench& sb, const LeverSet& levers) {
    if (sb.n_models < 2) throw ValidationError("synth_bench needs at least 2 models");
    if (sb.true_quality.size() != sb.n_models) throw ValidationError("true_quality length must equal n_models");
    Rng rng(mix_seed(sb.seed, 0xbe7c));
    auto make = [&](const std::string& col) {
        eval::RankTable t;
        t.name = col;
        t.col_ids = {col};
        for (std::size_t m = 0; m < sb.n_models; ++m) t.row_ids.push_back("model_" + std::to_string(m));
        return t;
    };
    eval::RankTable base = make("baseline"), pipe = make("pipeline");
    for (std::size_t m = 0; m < sb.n_models; ++m) {
        const double nb = sb.noise_sigma > 0 ? rng.normal() * sb.noise_sigma : 0.0;
        const double np = sb.noise_sigma > 0 ? rng.normal() * sb.noise_sigma : 0.0;
        double acc = sb.true_quality[m];
        if (levers.filter) acc += sb.penalty("filter", m);
        if (levers.compress) acc += sb.penalty("compress", m);
        if (levers.prune) acc += sb.penalty("prune", m);
        base.values.push_back({sb.true_quality[m] + nb});
        pipe.values.push_back({acc + np});
    }
    base.compute_ranks();
    pipe.compute_ranks();
    return {base, pipe};
}

struct BenchOutcome {
    bool top1 = false;
    std::optional<double> tau;
};

inline BenchOutcome compare_bench(const std::pair<eval::RankTable, eval::RankTable>& t) {
    BenchOutcome o;
    o.top1 = eval::top1_agreement(t.first.row_ids, t.first.column(0), t.second.row_ids, t.second.column(0));
    try {
        o.tau = eval::rank_correlation(t.first.rank_column(0), t.second.rank_column(0), eval::Correlation::kendall_tau_b);
    } catch (const eval::UndefinedCorrelation&) {
    }
    return o;
}

struct MonteCarloResult {
    double top1_rate = 0;
    double mean_tau = 0;
    std::size_t runs = 0;
};

/// Repeats synth_bench over seeds base_seed .. base_seed + n_seeds - 1.
inline MonteCarloResult monte_carlo(SyntheticBench sb, const LeverSet& levers, std::size_t n_seeds,
                                    std::uint64_t base_seed = 0) {
    MonteCarloResult r;
    double tau_sum = 0;
    std::size_t tau_n = 0;
    for (std::size_t s = 0; s < n_seeds; ++s) {
        sb.seed = base_seed + s;
        const auto o = compare_bench(synth_bench(sb, levers));
        r.top1_rate += o.top1 ? 1 : 0;
        if (o.tau) {
            tau_sum += *o.tau;
            ++tau_n;
        }
    }
    r.runs = n_seeds;
    r.top1_rate /= double(n_seeds);
    r.mean_tau = tau_n ? tau_sum / double(tau_n) : 0.0;
    return r;
}

/// Reference column used as latent model quality when none is configured
/// (8 models, top-2 gap 0.0039).
inline std::vector<double> default_true_quality() {
    return {0.7017, 0.7060, 0.7016, 0.7021, 0.6979, 0.6881, 0.6957, 0.6936};
}

/// Runs the bench for every lever combination and writes bench/bench.json.
inline nlohmann::ordered_json run_bench(const PipelineConfig& c) {
    BenchConfig bc = c.bench.value_or(BenchConfig{});
    SyntheticBench sb;
    sb.true_quality = bc.true_quality.empty() ? default_true_quality() : bc.true_quality;
    sb.n_models = sb.true_quality.size();
    sb.noise_sigma = bc.noise_sigma;
    sb.lever_penalties = bc.penalties.empty()
                             ? std::map<std::string, std::vector<double>>{{"filter", {-0.005}}, {"compress", {-0.003}}, {"prune", {-0.002}}}
                             : bc.penalties;
    nlohmann::ordered_json out;
    out["n_models"] = sb.n_models;
    out["noise_sigma"] = sb.noise_sigma;
    out["seeds"] = bc.seeds;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& lv : all_lever_sets()) {
        const auto r = monte_carlo(sb, lv, bc.seeds, c.seed);
        nlohmann::ordered_json j;
        j["levers"] = lv.label();
        j["top1_agreement_rate"] = r.top1_rate;
        j["mean_kendall_tau_b"] = r.mean_tau;
        rows.push_back(j);
    }
    out["results"] = rows;
    OutputLock lock(c.output_dir);
    io::write_file(c.output_dir / "bench" / "bench.json", out.dump(2) + "\n");
    return out;
}

// ---- toy fixtures ----

/// Writes a small self-contained project: dataset with channels and token
/// scores, a tiny model and its base archive, a baseline accuracy table and
/// config.json pointing at all of them (relative paths, output in out/).
inline fs::path write_toy_fixtures(const fs::path& dir, std::uint64_t seed = 7, std::size_t n_samples = 60) {
    static const char* kWords[] = {"cell",   "protein", "study",  "patients", "dose",    "effect", "risk",
                                   "trial",  "gene",    "blood",  "level",    "group",   "rate",   "signal",
                                   "tissue", "result",  "therapy", "model",   "sample",  "data",   "response",
                                   "change", "factor",  "cancer", "method",   "control", "value",  "increase"};
    Rng rng(mix_seed(seed, 0xf1));
    auto sentence = [&](std::size_t n) {
        std::string s;
        for (std::size_t i = 0; i < n; ++i) {
            if (i) s += ' ';
            s += kWords[rng.uniform_index(std::size(kWords))];
        }
        return s;
    };
    corpus::Dataset ds;
    for (std::size_t i = 0; i < n_samples; ++i) {
        corpus::Sample s;
        char id[32];
        std::snprintf(id, sizeof id, "s%03zu", i);
        s.id = id;
        s.question = "what " + sentence(6 + rng.uniform_index(6)) + " ?";
        s.answer = (rng.bernoulli(0.5) ? "yes , " : "no , ") + sentence(10 + rng.uniform_index(10)) + " " +
                   std::to_string(1 + rng.uniform_index(90)) + " .";
        ds.samples.push_back(std::move(s));
    }
    corpus::ScoreChannel q{"quality_llm", {}}, cx{"complexity", {}}, iqs{"iqs", {}}, gfs{"grad_feature_sim", {}};
    for (const auto& s : ds.samples) {
        q.values[s.id] = std::round(rng.uniform01() * 50) / 10.0;
        cx.values[s.id] = 1 + std::round(rng.uniform01() * 40) / 10.0;
        iqs.values[s.id] = std::round(rng.uniform01() * 1000) / 1000.0;
        gfs.values[s.id] = std::round((rng.uniform01() * 2 - 1) * 1000) / 1000.0;
        for (auto side : {corpus::Side::question, corpus::Side::answer}) {
            corpus::TokenScoreSeq t;
            t.sample_id = s.id;
            t.side = side;
            const auto n = corpus::token_count(s, side);
            std::vector<double> unc;
            for (std::size_t k = 0; k < n; ++k) {
                const double lp = -std::round((0.05 + rng.uniform01() * 6) * 1000) / 1000.0;
                t.logprob_conditioned.push_back(lp);
                unc.push_back(std::min(0.0, lp - std::round(rng.uniform01() * 1500) / 1000.0 + 0.5));
            }
            if (side == corpus::Side::answer) t.logprob_unconditioned = unc;
            ds.token_scores.push_back(std::move(t));
        }
    }
    ds.channels = {q, cx, iqs, gfs};
    ds.validate();
    corpus::save_dataset(ds, dir / "data");

    tiny::TinyTransformerSpec spec;
    spec.seed = seed;
    auto base = tiny::init_archive(spec, "tiny-base");
    // Damp the residual branches of two layers so they score as near-identity.
    for (std::size_t layer : {3u, 6u})
        for (const char* name : {"wo", "w_down"})
            for (auto& v : base.layers[layer].tensors.at(name).data) v *= 0.02f;
    auto model = tiny::perturbed(base, 0.002, seed + 1);
    model.meta.model_name = "tiny-chat";
    tensor::write_archive(base, dir / "base.safetensors");
    tensor::write_archive(model, dir / "model.safetensors");

    io::write_file(dir / "baseline_table.csv",
                   "model,GS,DaMoC-GraphCut\n"
                   "Llama3.1,0.5978,0.5918\n"
                   "Qwen2.5,0.5973,0.5894\n"
                   "Gemma2,0.5898,0.5798\n"
                   "GLM4,0.5914,0.5842\n"
                   "Yi1.5,0.5911,0.5811\n"
                   "Internlm2.5,0.5914,0.5838\n");

    nlohmann::ordered_json cfg;
    cfg["seed"] = seed;
    cfg["dataset_path"] = "data";
    cfg["output_dir"] = "out";
    cfg["filter"] = {{"method", "graphcut"}, {"ratio", 0.5}, {"method_params", {{"lambda", 1.0}}}};
    cfg["compress"] = {{"budget", {{"question_keep_ratio", 0.9}, {"answer_keep_ratio", 0.9}, {"min_tokens_kept", 1}}},
                       {"bert_threshold", 0.9},
                       {"max_rounds", 3}};
    cfg["prune"] = {{"archive", "model.safetensors"}, {"pre_archive", "base.safetensors"}, {"sim_threshold", 0.85},
                    {"keep_rate", 0.2}, {"calib_size", 16}};
    cfg["evaluate"] = {{"baseline_table", "baseline_table.csv"}, {"epochs_ratio", 1.0}};
    cfg["bench"] = {{"noise_sigma", 0.0039}, {"seeds", 200}};
    io::write_file(dir / "config.json", cfg.dump(2) + "\n");
    return dir / "config.json";
}

}  // namespace damoc::pipeline
