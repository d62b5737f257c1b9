// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pipeline configuration: one JSON document, unknown keys rejected, every
// violation reported at once. Relative paths resolve against the config
// file's directory.

#include <algorithm>
#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "damoc/data_filter.hpp"
#include "damoc/error.hpp"
#include "damoc/io.hpp"

namespace damoc::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

struct ScoresPaths {
    std::map<std::string, fs::path> channels;
    std::optional<fs::path> question_token_scores;
    std::optional<fs::path> answer_token_scores;
};

struct FilterConfig {
    filter::Method method = filter::Method::graphcut;
    double ratio = 0.10;
    std::optional<std::uint64_t> seed;
    filter::MethodParams method_params;
    std::size_t embed_dims = 256;
};

struct CompressConfig {
    double question_keep_ratio = 0.5;
    double answer_keep_ratio = 0.5;
    std::size_t min_tokens_kept = 1;
    double bert_threshold = 0.9;
    int max_rounds = 3;
    std::optional<std::string> rewriter_endpoint;
    std::optional<double> length_tolerance = 0.10;
    bool protect_answer = true;
    bool keep_high_surprisal = true;
    std::size_t embedder_dims = 256;
    std::size_t n_exemplars = 2;
};

struct PruneConfig {
    fs::path archive;
    fs::path pre_archive;
    std::optional<fs::path> trace;
    double sim_threshold = 0.85;
    double keep_rate = 0.20;
    std::size_t calib_size = 16;
    std::size_t n_heads = 4;
    std::size_t max_seq = 32;
    bool scale_target = true;
};

struct EvaluateConfig {
    fs::path baseline_table;
    std::vector<fs::path> extra_tables;
    std::optional<fs::path> output_dir;
    double epochs_ratio = 1.0;
    std::optional<double> measured_baseline_minutes;
    std::optional<double> measured_pipeline_minutes;
};

struct BenchConfig {
    std::vector<double> true_quality;
    double noise_sigma = 0.0039;
    std::size_t seeds = 200;
    std::map<std::string, std::vector<double>> penalties;  // lever -> per-model delta
};

struct PipelineConfig {
    json raw;
    fs::path base_dir;
    std::uint64_t seed = 0;
    fs::path dataset_path;
    std::optional<fs::path> embeddings_path;
    ScoresPaths scores;
    fs::path output_dir;
    FilterConfig filter;
    CompressConfig compress;
    std::optional<PruneConfig> prune;
    std::optional<EvaluateConfig> evaluate;
    std::optional<BenchConfig> bench;

    std::uint64_t filter_seed() const { return filter.seed.value_or(seed); }
};

namespace detail {

/// Reads fields from one JSON object, collecting violations instead of
/// throwing, and flags keys that were never read.
class Section {
public:
    Section(const json& j, std::string path, std::vector<std::string>& errs) : j_(j), path_(std::move(path)), errs_(errs) {
        if (!j_.is_object()) {
            errs_.push_back(path_ + ": expected an object");
            ok_ = false;
        }
    }

    ~Section() {
        if (!ok_) return;
        for (const auto& [k, _] : j_.items())
            if (!seen_.count(k)) errs_.push_back(name(k) + ": unknown key");
    }

    bool has(const std::string& k) {
        seen_.insert(k);
        return ok_ && j_.contains(k) && !j_[k].is_null();
    }

    const json& raw(const std::string& k) {
        seen_.insert(k);
        return j_.at(k);
    }

    std::string name(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

    template <class T>
    std::optional<T> get(const std::string& k) {
        if (!has(k)) return std::nullopt;
        try {
            return j_[k].get<T>();
        } catch (const json::exception&) {
            errs_.push_back(name(k) + ": wrong type (" + std::string(j_[k].type_name()) + ")");
            return std::nullopt;
        }
    }

    std::optional<double> number(const std::string& k) {
        if (!has(k)) return std::nullopt;
        if (!j_[k].is_number()) {
            errs_.push_back(name(k) + ": expected a number");
            return std::nullopt;
        }
        return j_[k].get<double>();
    }

    std::optional<std::uint64_t> count(const std::string& k) {
        if (!has(k)) return std::nullopt;
        if (!j_[k].is_number_unsigned() && !(j_[k].is_number_integer() && j_[k].get<std::int64_t>() >= 0)) {
            errs_.push_back(name(k) + ": expected a non-negative integer");
            return std::nullopt;
        }
        return j_[k].get<std::uint64_t>();
    }

    void require(const std::string& k) {
        if (!has(k)) errs_.push_back(name(k) + ": required");
    }

    void check(bool cond, const std::string& k, const std::string& what) {
        if (!cond) errs_.push_back(name(k) + ": " + what);
    }

    std::vector<std::string>& errors() { return errs_; }

private:
    const json& j_;
    std::string path_;
    std::vector<std::string>& errs_;
    std::set<std::string> seen_;
    bool ok_ = true;
};

inline fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path fp(p);
    return fp.is_absolute() ? fp : (base / fp).lexically_normal();
}

}  // namespace detail

/// Validates and parses a config document. Throws ConfigError listing every
/// violation.
inline PipelineConfig parse_config(const json& j, const fs::path& base_dir) {
    std::vector<std::string> errs;
    PipelineConfig c;
    c.raw = j;
    c.base_dir = base_dir;
    {
        detail::Section top(j, "", errs);
        if (auto v = top.count("seed")) c.seed = *v;
        top.require("dataset_path");
        if (auto v = top.get<std::string>("dataset_path")) c.dataset_path = detail::resolve(base_dir, *v);
        if (auto v = top.get<std::string>("embeddings_path")) c.embeddings_path = detail::resolve(base_dir, *v);
        top.require("output_dir");
        if (auto v = top.get<std::string>("output_dir")) c.output_dir = detail::resolve(base_dir, *v);

        if (top.has("scores_paths")) {
            detail::Section s(top.raw("scores_paths"), "scores_paths", errs);
            if (s.has("channels")) {
                detail::Section ch(s.raw("channels"), "scores_paths.channels", errs);
                for (const auto& [name, _] : s.raw("channels").items()) {
                    if (!corpus::is_known_channel_name(name)) ch.check(false, name, "unknown channel name");
                    if (auto v = ch.get<std::string>(name)) c.scores.channels[name] = detail::resolve(base_dir, *v);
                }
            }
            if (s.has("token_scores")) {
                detail::Section ts(s.raw("token_scores"), "scores_paths.token_scores", errs);
                if (auto v = ts.get<std::string>("question")) c.scores.question_token_scores = detail::resolve(base_dir, *v);
                if (auto v = ts.get<std::string>("answer")) c.scores.answer_token_scores = detail::resolve(base_dir, *v);
            }
        }

        if (top.has("filter")) {
            detail::Section f(top.raw("filter"), "filter", errs);
            if (auto v = f.get<std::string>("method")) {
                try {
                    c.filter.method = filter::method_from_string(*v);
                } catch (const ValidationError&) {
                    f.check(false, "method", "unknown method '" + *v + "'");
                }
            }
            if (auto v = f.number("ratio")) {
                c.filter.ratio = *v;
                f.check(*v > 0 && *v <= 1, "ratio", "must be in (0, 1]");
            }
            if (auto v = f.count("seed")) c.filter.seed = *v;
            if (auto v = f.count("embed_dims")) {
                c.filter.embed_dims = *v;
                f.check(*v >= 8, "embed_dims", "must be >= 8");
            }
            if (f.has("method_params")) {
                detail::Section mp(f.raw("method_params"), "filter.method_params", errs);
                const auto allowed = filter::accepted_params(c.filter.method);
                for (const auto& [k, _] : f.raw("method_params").items()) {
                    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
                        mp.check(false, k, "not a parameter of method '" + std::string(filter::to_string(c.filter.method)) + "'");
                        mp.has(k);
                        continue;
                    }
                    if (auto v = mp.number(k)) c.filter.method_params[k] = *v;
                }
            }
        }

        if (top.has("compress")) {
            detail::Section s(top.raw("compress"), "compress", errs);
            if (s.has("budget")) {
                const json& b = s.raw("budget");
                if (b.is_number()) {
                    c.compress.question_keep_ratio = c.compress.answer_keep_ratio = b.get<double>();
                } else {
                    detail::Section bs(b, "compress.budget", errs);
                    if (auto v = bs.number("question_keep_ratio")) c.compress.question_keep_ratio = *v;
                    if (auto v = bs.number("answer_keep_ratio")) c.compress.answer_keep_ratio = *v;
                    if (auto v = bs.count("min_tokens_kept")) c.compress.min_tokens_kept = *v;
                }
                s.check(c.compress.question_keep_ratio > 0 && c.compress.question_keep_ratio <= 1, "budget",
                        "question keep ratio must be in (0, 1]");
                s.check(c.compress.answer_keep_ratio > 0 && c.compress.answer_keep_ratio <= 1, "budget",
                        "answer keep ratio must be in (0, 1]");
                s.check(c.compress.min_tokens_kept >= 1, "budget", "min_tokens_kept must be >= 1");
            }
            if (auto v = s.number("bert_threshold")) {
                c.compress.bert_threshold = *v;
                s.check(*v > 0 && *v <= 1, "bert_threshold", "must be in (0, 1]");
            }
            if (auto v = s.count("max_rounds")) {
                c.compress.max_rounds = static_cast<int>(*v);
                s.check(*v >= 1 && *v <= 100, "max_rounds", "must be in [1, 100]");
            }
            if (auto v = s.get<std::string>("rewriter_endpoint")) c.compress.rewriter_endpoint = *v;
            if (s.has("length_tolerance")) {
                const json& lt = s.raw("length_tolerance");
                if (lt.is_boolean() && !lt.get<bool>()) {
                    c.compress.length_tolerance.reset();
                } else if (auto v = s.number("length_tolerance")) {
                    c.compress.length_tolerance = *v;
                    s.check(*v >= 0 && *v < 1, "length_tolerance", "must be in [0, 1) or false");
                }
            }
            if (auto v = s.get<bool>("protect_answer")) c.compress.protect_answer = *v;
            if (auto v = s.get<bool>("keep_high_surprisal")) c.compress.keep_high_surprisal = *v;
            if (auto v = s.count("embedder_dims")) {
                c.compress.embedder_dims = *v;
                s.check(*v >= 8, "embedder_dims", "must be >= 8");
            }
            if (auto v = s.count("n_exemplars")) c.compress.n_exemplars = *v;
        }

        if (top.has("prune")) {
            detail::Section s(top.raw("prune"), "prune", errs);
            PruneConfig p;
            s.require("archive");
            if (auto v = s.get<std::string>("archive")) p.archive = detail::resolve(base_dir, *v);
            if (!s.has("pre_archive"))
                errs.push_back("prune.pre_archive: required; merging pruned layers needs the pretrained (base) weights");
            if (auto v = s.get<std::string>("pre_archive")) p.pre_archive = detail::resolve(base_dir, *v);
            if (auto v = s.get<std::string>("trace")) p.trace = detail::resolve(base_dir, *v);
            if (auto v = s.number("sim_threshold")) {
                p.sim_threshold = *v;
                s.check(*v > 0 && *v < 1, "sim_threshold", "must be in (0, 1)");
            }
            if (auto v = s.number("keep_rate")) {
                p.keep_rate = *v;
                s.check(*v > 0 && *v <= 1, "keep_rate", "must be in (0, 1]");
            }
            if (auto v = s.count("calib_size")) {
                p.calib_size = *v;
                s.check(*v >= 1, "calib_size", "must be >= 1");
            }
            if (auto v = s.count("n_heads")) {
                p.n_heads = *v;
                s.check(*v >= 1, "n_heads", "must be >= 1");
            }
            if (auto v = s.count("max_seq")) {
                p.max_seq = *v;
                s.check(*v >= 1, "max_seq", "must be >= 1");
            }
            if (auto v = s.get<bool>("scale_target")) p.scale_target = *v;
            c.prune = p;
        }

        if (top.has("evaluate")) {
            detail::Section s(top.raw("evaluate"), "evaluate", errs);
            EvaluateConfig e;
            s.require("baseline_table");
            if (auto v = s.get<std::string>("baseline_table")) e.baseline_table = detail::resolve(base_dir, *v);
            if (auto v = s.get<std::vector<std::string>>("extra_tables"))
                for (const auto& p : *v) e.extra_tables.push_back(detail::resolve(base_dir, p));
            if (auto v = s.get<std::string>("output_dir")) e.output_dir = detail::resolve(base_dir, *v);
            if (auto v = s.number("epochs_ratio")) {
                e.epochs_ratio = *v;
                s.check(*v > 0 && *v <= 1, "epochs_ratio", "must be in (0, 1]");
            }
            if (auto v = s.number("measured_baseline_minutes")) {
                e.measured_baseline_minutes = *v;
                s.check(*v > 0, "measured_baseline_minutes", "must be positive");
            }
            if (auto v = s.number("measured_pipeline_minutes")) {
                e.measured_pipeline_minutes = *v;
                s.check(*v > 0, "measured_pipeline_minutes", "must be positive");
            }
            c.evaluate = e;
        }

        if (top.has("bench")) {
            detail::Section s(top.raw("bench"), "bench", errs);
            BenchConfig b;
            if (auto v = s.get<std::vector<double>>("true_quality")) b.true_quality = *v;
            if (auto v = s.number("noise_sigma")) {
                b.noise_sigma = *v;
                s.check(*v >= 0, "noise_sigma", "must be >= 0");
            }
            if (auto v = s.count("seeds")) {
                b.seeds = *v;
                s.check(*v >= 1, "seeds", "must be >= 1");
            }
            if (s.has("penalties")) {
                detail::Section ps(s.raw("penalties"), "bench.penalties", errs);
                for (const char* lever : {"filter", "compress", "prune"}) {
                    if (!ps.has(lever)) continue;
                    const json& pv = ps.raw(lever);
                    if (pv.is_number())
                        b.penalties[lever] = {pv.get<double>()};
                    else if (auto v = ps.get<std::vector<double>>(lever))
                        b.penalties[lever] = *v;
                }
            }
            c.bench = b;
        }
    }
    if (!errs.empty()) {
        std::string msg = "invalid config (" + std::to_string(errs.size()) + " problem" + (errs.size() == 1 ? "" : "s") + "):";
        for (const auto& e : errs) msg += "\n  - " + e;
        throw ConfigError(msg);
    }
    return c;
}

/// Applies "a.b.c=value" overrides; values parse as JSON when possible and
/// as strings otherwise.
inline void apply_override(json& cfg, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not of the form key=value");
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    json v;
    try {
        v = json::parse(val);
    } catch (const json::exception&) {
        v = val;
    }
    json* node = &cfg;
    std::size_t start = 0;
    for (;;) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[part] = v;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

/// Reads a config file, applies overrides and the DAMOC_SEED variable.
inline PipelineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": not valid JSON: " + e.what());
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    for (const auto& o : overrides) apply_override(j, o);
    if (const char* env = std::getenv("DAMOC_SEED"); env && *env) {
        char* end = nullptr;
        errno = 0;
        const unsigned long long s = std::strtoull(env, &end, 10);
        if (*end != '\0' || errno != 0 || env[0] == '-') throw ConfigError("DAMOC_SEED='" + std::string(env) + "' is not an unsigned integer");
        j["seed"] = s;
        if (j.contains("filter") && j["filter"].is_object() && j["filter"].contains("seed")) j["filter"]["seed"] = s;
    }
    return parse_config(j, fs::absolute(path).parent_path());
}

}  // namespace damoc::pipeline
