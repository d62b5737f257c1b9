// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "damoc/digest.hpp"
#include "damoc/error.hpp"
#include "damoc/io.hpp"
#include "damoc/text.hpp"

namespace damoc::corpus {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class Side { question, answer };

inline std::string_view to_string(Side s) { return s == Side::question ? "question" : "answer"; }

inline Side side_from_string(std::string_view s) {
    if (s == "question") return Side::question;
    if (s == "answer") return Side::answer;
    throw ValidationError("unknown side '" + std::string(s) + "'");
}

struct Sample {
    std::string id;
    std::string question;
    std::string answer;
    std::optional<std::vector<std::string>> question_tokens;
    std::optional<std::vector<std::string>> answer_tokens;
    std::map<std::string, std::string> meta;

    const std::string& text(Side s) const { return s == Side::question ? question : answer; }
    const std::optional<std::vector<std::string>>& materialized(Side s) const {
        return s == Side::question ? question_tokens : answer_tokens;
    }
    bool operator==(const Sample&) const = default;
};

enum class TokenizerSpec {
    /// Always run the reference tokenizer over the text.
    reference,
    /// Use materialized token lists when present, else the reference tokenizer.
    prefer_materialized,
};

inline std::vector<std::string> tokens(const Sample& s, Side side,
                                       TokenizerSpec spec = TokenizerSpec::prefer_materialized) {
    if (spec == TokenizerSpec::prefer_materialized && s.materialized(side)) return *s.materialized(side);
    return text::tokenize(s.text(side));
}

inline std::size_t token_count(const Sample& s, Side side,
                               TokenizerSpec spec = TokenizerSpec::prefer_materialized) {
    if (spec == TokenizerSpec::prefer_materialized && s.materialized(side)) return s.materialized(side)->size();
    return text::tokenize(s.text(side)).size();
}

inline bool is_known_channel_name(std::string_view name) {
    static constexpr std::string_view kNames[] = {"quality_llm", "ifd", "length", "grad_feature_sim",
                                                   "complexity", "iqs"};
    for (auto n : kNames)
        if (name == n) return true;
    return name.starts_with("custom:") && name.size() > 7;
}

struct ScoreChannel {
    std::string name;
    std::map<std::string, double> values;

    double at(const std::string& id) const {
        auto it = values.find(id);
        if (it == values.end())
            throw ValidationError("channel '" + name + "' has no score for sample '" + id + "'");
        return it->second;
    }
    bool operator==(const ScoreChannel&) const = default;
};

struct TokenScoreSeq {
    std::string sample_id;
    Side side = Side::answer;
    std::vector<double> logprob_conditioned;
    std::optional<std::vector<double>> logprob_unconditioned;
    bool operator==(const TokenScoreSeq&) const = default;
};

enum class Stage { ingest, filter, compress, prune, evaluate };

inline std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::ingest: return "ingest";
        case Stage::filter: return "filter";
        case Stage::compress: return "compress";
        case Stage::prune: return "prune";
        case Stage::evaluate: return "evaluate";
    }
    return "?";
}

inline Stage stage_from_string(std::string_view s) {
    for (Stage st : {Stage::ingest, Stage::filter, Stage::compress, Stage::prune, Stage::evaluate})
        if (to_string(st) == s) return st;
    throw ValidationError("unknown stage '" + std::string(s) + "'");
}

/// UTC timestamp; honors SOURCE_DATE_EPOCH for reproducible runs.
inline std::string now_iso8601() {
    std::time_t t = 0;
    if (const char* env = std::getenv("SOURCE_DATE_EPOCH"); env && *env) {
        t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
    } else {
        t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    }
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Digest of a configuration document; nlohmann::json keeps keys sorted,
/// so dump() is the canonical byte form.
inline std::string config_digest(const json& cfg) { return sha256_hex(cfg.dump()); }

struct Manifest {
    Stage stage = Stage::ingest;
    std::string config_digest;
    std::uint64_t seed = 0;
    std::optional<std::string> parent_manifest;
    std::string created_at;
    std::map<std::string, double> stats;

    /// Content digest; created_at is excluded so identical runs chain identically.
    std::string digest() const {
        json j;
        j["stage"] = to_string(stage);
        j["config_digest"] = config_digest;
        j["seed"] = seed;
        j["parent_manifest"] = parent_manifest ? json(*parent_manifest) : json(nullptr);
        j["stats"] = stats;
        return sha256_hex(j.dump());
    }

    ordered_json to_json() const {
        ordered_json j;
        j["stage"] = to_string(stage);
        j["config_digest"] = config_digest;
        j["seed"] = seed;
        j["parent_manifest"] = parent_manifest ? ordered_json(*parent_manifest) : ordered_json(nullptr);
        j["created_at"] = created_at;
        ordered_json st = ordered_json::object();
        for (const auto& [k, v] : stats) st[k] = v;
        j["stats"] = st;
        j["digest"] = digest();
        return j;
    }

    static Manifest from_json(const json& j) {
        Manifest m;
        try {
            m.stage = stage_from_string(j.at("stage").get<std::string>());
            m.config_digest = j.at("config_digest").get<std::string>();
            m.seed = j.at("seed").get<std::uint64_t>();
            if (j.contains("parent_manifest") && !j["parent_manifest"].is_null())
                m.parent_manifest = j["parent_manifest"].get<std::string>();
            m.created_at = j.value("created_at", "");
            if (j.contains("stats")) m.stats = j["stats"].get<std::map<std::string, double>>();
        } catch (const json::exception& e) {
            throw ParseError(std::string("manifest: ") + e.what());
        }
        if (j.contains("digest") && j["digest"].get<std::string>() != m.digest())
            throw ValidationError("manifest digest does not match its content");
        return m;
    }

    bool operator==(const Manifest&) const = default;
};

inline Manifest read_manifest(const fs::path& path) {
    try {
        return Manifest::from_json(json::parse(io::read_file(path)));
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

inline void write_manifest(const Manifest& m, const fs::path& path) {
    io::write_file(path, m.to_json().dump(2) + "\n");
}

class Dataset {
public:
    std::vector<Sample> samples;
    std::vector<ScoreChannel> channels;
    std::vector<TokenScoreSeq> token_scores;
    Manifest source_manifest;

    std::size_t size() const { return samples.size(); }

    /// Position of a sample id; throws when absent.
    std::size_t index_of(const std::string& id) const {
        build_index();
        auto it = index_.find(id);
        if (it == index_.end()) throw ValidationError("unknown sample id '" + id + "'");
        return it->second;
    }
    bool contains(const std::string& id) const {
        build_index();
        return index_.count(id) != 0;
    }

    const ScoreChannel* find_channel(std::string_view name) const {
        for (const auto& c : channels)
            if (c.name == name) return &c;
        return nullptr;
    }
    const ScoreChannel& channel(std::string_view name) const {
        if (auto* c = find_channel(name)) return *c;
        throw ValidationError("missing score channel '" + std::string(name) + "'");
    }

    const TokenScoreSeq* find_token_scores(const std::string& id, Side side) const {
        for (const auto& t : token_scores)
            if (t.sample_id == id && t.side == side) return &t;
        return nullptr;
    }

    /// Adds or replaces a channel.
    void set_channel(ScoreChannel c) {
        for (auto& existing : channels)
            if (existing.name == c.name) {
                existing = std::move(c);
                return;
            }
        channels.push_back(std::move(c));
    }

    /// Checks every documented invariant; throws ValidationError naming the
    /// first offending id.
    void validate() const {
        std::set<std::string> seen;
        for (const auto& s : samples) {
            if (s.id.empty()) throw ValidationError("sample with empty id");
            if (!seen.insert(s.id).second) throw ValidationError("duplicate sample id '" + s.id + "'");
            for (Side side : {Side::question, Side::answer}) {
                const auto& toks = s.materialized(side);
                if (toks && !text::equal_ignoring_space(text::detokenize(*toks), s.text(side)))
                    throw ValidationError("sample '" + s.id + "': " + std::string(to_string(side)) +
                                          "_tokens do not reproduce the " + std::string(to_string(side)));
            }
        }
        for (const auto& c : channels) {
            if (!is_known_channel_name(c.name)) throw ValidationError("unknown channel name '" + c.name + "'");
            for (const auto& [id, v] : c.values) {
                if (!seen.count(id))
                    throw ValidationError("channel '" + c.name + "' scores unknown sample '" + id + "'");
                if (!std::isfinite(v))
                    throw ValidationError("channel '" + c.name + "' has non-finite value for '" + id + "'");
            }
        }
        for (const auto& t : token_scores) {
            if (!seen.count(t.sample_id))
                throw ValidationError("token scores for unknown sample '" + t.sample_id + "'");
            const auto& s = samples[index_of(t.sample_id)];
            const std::size_t n = token_count(s, t.side);
            auto check = [&](const std::vector<double>& v, std::string_view what) {
                if (v.size() != n)
                    throw ValidationError("sample '" + t.sample_id + "' " + std::string(to_string(t.side)) + " " +
                                          std::string(what) + " has " + std::to_string(v.size()) +
                                          " entries for " + std::to_string(n) + " tokens");
                for (double x : v)
                    if (!std::isfinite(x) || x > 0.0)
                        throw ValidationError("sample '" + t.sample_id + "' " + std::string(what) +
                                              " entries must be finite and <= 0");
            };
            check(t.logprob_conditioned, "logprob_conditioned");
            if (t.logprob_unconditioned) check(*t.logprob_unconditioned, "logprob_unconditioned");
        }
    }

    /// Subset in the given id order; channels and token scores follow.
    Dataset subset(const std::vector<std::string>& ids) const {
        Dataset out;
        std::set<std::string> keep(ids.begin(), ids.end());
        for (const auto& id : ids) out.samples.push_back(samples[index_of(id)]);
        for (const auto& c : channels) {
            ScoreChannel sc{c.name, {}};
            for (const auto& [id, v] : c.values)
                if (keep.count(id)) sc.values.emplace(id, v);
            out.channels.push_back(std::move(sc));
        }
        for (const auto& id : ids)
            for (Side side : {Side::question, Side::answer})
                if (auto* t = find_token_scores(id, side)) out.token_scores.push_back(*t);
        out.source_manifest = source_manifest;
        return out;
    }

private:
    void build_index() const {
        if (index_built_for_ == samples.size()) return;
        index_.clear();
        for (std::size_t i = 0; i < samples.size(); ++i) index_.emplace(samples[i].id, i);
        index_built_for_ = samples.size();
    }
    mutable std::unordered_map<std::string, std::size_t> index_;
    mutable std::size_t index_built_for_ = static_cast<std::size_t>(-1);
};

namespace detail {

inline std::optional<std::vector<std::string>> opt_tokens(const json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<std::vector<std::string>>();
}

inline json parse_line(std::string_view line, std::size_t line_no, const std::string& where) {
    try {
        json j = json::parse(line);
        if (!j.is_object()) throw ParseError(where + ":" + std::to_string(line_no) + ": expected a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        throw ParseError(where + ":" + std::to_string(line_no) + ": " + e.what());
    }
}

template <class T>
T required(const json& j, const char* key, std::size_t line_no, const std::string& where) {
    if (!j.contains(key))
        throw ParseError(where + ":" + std::to_string(line_no) + ": missing field '" + key + "'");
    try {
        return j[key].get<T>();
    } catch (const json::exception& e) {
        throw ParseError(where + ":" + std::to_string(line_no) + ": field '" + key + "': " + e.what());
    }
}

}  // namespace detail

inline std::vector<Sample> parse_samples_jsonl(std::string_view bytes, const std::string& where) {
    std::vector<Sample> out;
    std::set<std::string> seen;
    io::for_each_line(bytes, [&](std::string_view line, std::size_t no) {
        json j = detail::parse_line(line, no, where);
        Sample s;
        s.id = detail::required<std::string>(j, "id", no, where);
        s.question = detail::required<std::string>(j, "question", no, where);
        s.answer = detail::required<std::string>(j, "answer", no, where);
        try {
            s.question_tokens = detail::opt_tokens(j, "question_tokens");
            s.answer_tokens = detail::opt_tokens(j, "answer_tokens");
            if (j.contains("meta")) s.meta = j["meta"].get<std::map<std::string, std::string>>();
        } catch (const json::exception& e) {
            throw ParseError(where + ":" + std::to_string(no) + ": " + e.what());
        }
        if (s.id.empty()) throw ValidationError(where + ":" + std::to_string(no) + ": empty id");
        if (!seen.insert(s.id).second)
            throw ValidationError(where + ":" + std::to_string(no) + ": duplicate id '" + s.id + "'");
        out.push_back(std::move(s));
    });
    return out;
}

inline ScoreChannel parse_channel_jsonl(std::string_view bytes, std::string name, const std::string& where) {
    ScoreChannel c{std::move(name), {}};
    io::for_each_line(bytes, [&](std::string_view line, std::size_t no) {
        json j = detail::parse_line(line, no, where);
        auto id = detail::required<std::string>(j, "id", no, where);
        auto v = detail::required<double>(j, "value", no, where);
        if (!c.values.emplace(id, v).second)
            throw ValidationError(where + ":" + std::to_string(no) + ": duplicate id '" + id + "'");
    });
    return c;
}

inline std::vector<TokenScoreSeq> parse_token_scores_jsonl(std::string_view bytes, Side side,
                                                           const std::string& where) {
    std::vector<TokenScoreSeq> out;
    io::for_each_line(bytes, [&](std::string_view line, std::size_t no) {
        json j = detail::parse_line(line, no, where);
        TokenScoreSeq t;
        t.side = side;
        t.sample_id = detail::required<std::string>(j, "id", no, where);
        t.logprob_conditioned = detail::required<std::vector<double>>(j, "logprob_conditioned", no, where);
        if (j.contains("logprob_unconditioned") && !j["logprob_unconditioned"].is_null())
            t.logprob_unconditioned = detail::required<std::vector<double>>(j, "logprob_unconditioned", no, where);
        out.push_back(std::move(t));
    });
    return out;
}

/// Loads a samples JSONL file, or a dataset directory holding samples.jsonl
/// plus optional channels/, token_scores/ and manifest.json.
inline Dataset load_dataset(const fs::path& path) {
    Dataset ds;
    if (fs::is_directory(path)) {
        const auto samples = path / "samples.jsonl";
        ds.samples = parse_samples_jsonl(io::read_file(samples), samples.string());
        if (fs::is_directory(path / "channels")) {
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(path / "channels"))
                if (e.path().extension() == ".jsonl") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files)
                ds.channels.push_back(parse_channel_jsonl(io::read_file(f), f.stem().string(), f.string()));
        }
        for (Side side : {Side::question, Side::answer}) {
            const auto f = path / "token_scores" / (std::string(to_string(side)) + ".jsonl");
            if (fs::exists(f)) {
                auto seqs = parse_token_scores_jsonl(io::read_file(f), side, f.string());
                ds.token_scores.insert(ds.token_scores.end(), seqs.begin(), seqs.end());
            }
        }
        if (fs::exists(path / "manifest.json")) ds.source_manifest = read_manifest(path / "manifest.json");
    } else {
        if (!fs::exists(path)) throw IoError("no such file: " + path.string());
        ds.samples = parse_samples_jsonl(io::read_file(path), path.string());
    }
    ds.validate();
    return ds;
}

inline std::string samples_jsonl(const std::vector<Sample>& samples) {
    std::string out;
    for (const auto& s : samples) {
        ordered_json j;
        j["id"] = s.id;
        j["question"] = s.question;
        j["answer"] = s.answer;
        if (s.question_tokens) j["question_tokens"] = *s.question_tokens;
        if (s.answer_tokens) j["answer_tokens"] = *s.answer_tokens;
        if (!s.meta.empty()) j["meta"] = s.meta;
        out += j.dump();
        out += '\n';
    }
    return out;
}

/// Writes a dataset directory. The manifest written is `manifest` when
/// given, otherwise the dataset's own with stats.kept_ratio = 1.
inline Manifest save_dataset(const Dataset& ds, const fs::path& dir, std::optional<Manifest> manifest = {}) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create dataset directory " + dir.string());
    io::write_file(dir / "samples.jsonl", samples_jsonl(ds.samples));
    for (const auto& c : ds.channels) {
        std::string out;
        for (const auto& s : ds.samples) {
            auto it = c.values.find(s.id);
            if (it == c.values.end()) continue;
            ordered_json j;
            j["id"] = s.id;
            j["value"] = it->second;
            out += j.dump();
            out += '\n';
        }
        io::write_file(dir / "channels" / (c.name + ".jsonl"), out);
    }
    for (Side side : {Side::question, Side::answer}) {
        std::string out;
        bool any = false;
        for (const auto& s : ds.samples) {
            auto* t = ds.find_token_scores(s.id, side);
            if (!t) continue;
            any = true;
            ordered_json j;
            j["id"] = t->sample_id;
            j["logprob_conditioned"] = t->logprob_conditioned;
            if (t->logprob_unconditioned) j["logprob_unconditioned"] = *t->logprob_unconditioned;
            out += j.dump();
            out += '\n';
        }
        if (any) io::write_file(dir / "token_scores" / (std::string(to_string(side)) + ".jsonl"), out);
    }
    Manifest m = manifest.value_or(ds.source_manifest);
    if (!manifest) {
        m.stats["kept_ratio"] = 1.0;
        m.stats["n_samples"] = static_cast<double>(ds.size());
    }
    if (m.created_at.empty()) m.created_at = now_iso8601();
    write_manifest(m, dir / "manifest.json");
    return m;
}

}  // namespace damoc::corpus
