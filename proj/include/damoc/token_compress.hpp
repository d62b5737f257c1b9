// SPDX-License-Identifier: Apache-2.0
#pragma once

// Perplexity-driven token compression with a BERTScore fidelity gate and an
// LLM rewrite loop for samples that fail the gate.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "damoc/corpus.hpp"
#include "damoc/error.hpp"
#include "damoc/io.hpp"
#include "damoc/numerics.hpp"
#include "damoc/rewriter.hpp"
#include "damoc/rng.hpp"
#include "damoc/text.hpp"

namespace damoc::compress {

using corpus::Dataset;
using corpus::Sample;
using corpus::Side;
using corpus::TokenScoreSeq;

struct CompressionBudget {
    double target_keep_ratio = 0.5;
    double question_keep_ratio = 0.5;
    double answer_keep_ratio = 0.5;
    std::size_t min_tokens_kept = 1;

    /// Same ratio on both sides.
    static CompressionBudget uniform(double r, std::size_t min_kept = 1) { return {r, r, r, min_kept}; }

    void validate() const {
        auto in01 = [](double r) { return r > 0 && r <= 1; };
        if (!in01(target_keep_ratio) || !in01(question_keep_ratio) || !in01(answer_keep_ratio))
            throw ValidationError("compression keep ratios must lie in (0, 1]");
        if (min_tokens_kept < 1) throw ValidationError("min_tokens_kept must be >= 1");
    }
};

enum class Status { passed_direct, passed_after_rewrite, failed };

inline std::string_view to_string(Status s) {
    switch (s) {
        case Status::passed_direct: return "passed_direct";
        case Status::passed_after_rewrite: return "passed_after_rewrite";
        case Status::failed: return "failed";
    }
    return "?";
}

inline Status status_from_string(std::string_view s) {
    if (s == "passed_direct") return Status::passed_direct;
    if (s == "passed_after_rewrite") return Status::passed_after_rewrite;
    if (s == "failed") return Status::failed;
    throw ParseError("unknown compression status '" + std::string(s) + "'");
}

struct RewriteAttempt {
    int round = 0;
    std::string prompt_text;
    std::string response_text;
    double bertscore = 0;
    bool accepted = false;
    /// Set when the response was rejected before gating (e.g. length guard).
    std::string rejection;
};

using Mask = std::vector<std::uint8_t>;

struct CompressedSample {
    std::string id;
    Mask question_kept_mask;
    Mask answer_kept_mask;
    std::string compressed_question;
    std::string compressed_answer;
    double bertscore = 0;
    int rewrite_rounds = 0;
    Status status = Status::failed;
    std::vector<RewriteAttempt> attempts;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["id"] = id;
        j["compressed_question"] = compressed_question;
        j["compressed_answer"] = compressed_answer;
        j["bertscore"] = bertscore;
        j["rewrite_rounds"] = rewrite_rounds;
        j["status"] = to_string(status);
        j["question_kept_mask"] = std::vector<int>(question_kept_mask.begin(), question_kept_mask.end());
        j["answer_kept_mask"] = std::vector<int>(answer_kept_mask.begin(), answer_kept_mask.end());
        return j;
    }

    static CompressedSample from_json(const nlohmann::json& j) {
        CompressedSample c;
        try {
            c.id = j.at("id").get<std::string>();
            c.compressed_question = j.at("compressed_question").get<std::string>();
            c.compressed_answer = j.at("compressed_answer").get<std::string>();
            c.bertscore = j.at("bertscore").get<double>();
            c.rewrite_rounds = j.at("rewrite_rounds").get<int>();
            c.status = status_from_string(j.at("status").get<std::string>());
            for (int b : j.at("question_kept_mask").get<std::vector<int>>())
                c.question_kept_mask.push_back(static_cast<std::uint8_t>(b != 0));
            for (int b : j.at("answer_kept_mask").get<std::vector<int>>())
                c.answer_kept_mask.push_back(static_cast<std::uint8_t>(b != 0));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("compressed sample: ") + e.what());
        }
        return c;
    }
};

// ---- scoring and selection ----

inline void check_scores(const TokenScoreSeq& ts, Side side, std::optional<std::size_t> expected_len) {
    if (ts.side != side)
        throw ValidationError("token scores for '" + ts.sample_id + "' are " + std::string(corpus::to_string(ts.side)) +
                              "-side, expected " + std::string(corpus::to_string(side)));
    if (expected_len && ts.logprob_conditioned.size() != *expected_len)
        throw ValidationError("token scores for '" + ts.sample_id + "' have " +
                              std::to_string(ts.logprob_conditioned.size()) + " entries but the " +
                              std::string(corpus::to_string(side)) + " has " + std::to_string(*expected_len) +
                              " tokens");
}

/// Surprisal: -logprob per question token.
inline std::vector<double> question_token_scores(const TokenScoreSeq& ts,
                                                 std::optional<std::size_t> expected_len = std::nullopt) {
    check_scores(ts, Side::question, expected_len);
    std::vector<double> out;
    out.reserve(ts.logprob_conditioned.size());
    for (double lp : ts.logprob_conditioned) out.push_back(-lp);
    return out;
}

/// Per-token conditional perplexity exp(-logprob), conditioned on the question.
inline std::vector<double> answer_token_scores(const TokenScoreSeq& ts,
                                               std::optional<std::size_t> expected_len = std::nullopt) {
    check_scores(ts, Side::answer, expected_len);
    std::vector<double> out;
    out.reserve(ts.logprob_conditioned.size());
    for (double lp : ts.logprob_conditioned) out.push_back(std::exp(-lp));
    return out;
}

struct KeepCounts {
    std::size_t question = 0;
    std::size_t answer = 0;
    bool operator==(const KeepCounts&) const = default;
};

inline std::size_t keep_for(double ratio, std::size_t len, std::size_t min_kept) {
    if (len == 0) return 0;
    const auto k = static_cast<std::size_t>(std::ceil(ratio * double(len) - 1e-9));
    return std::min(len, std::max(min_kept, k));
}

inline KeepCounts budget_allocate(const CompressionBudget& b, std::size_t q_len, std::size_t a_len) {
    b.validate();
    return {keep_for(b.question_keep_ratio, q_len, b.min_tokens_kept),
            keep_for(b.answer_keep_ratio, a_len, b.min_tokens_kept)};
}

/// Tokens never dropped from answers: interrogatives, negations and numerals.
inline bool is_protected_token(std::string_view tok) {
    static const std::set<std::string, std::less<>> kWords = {
        "what", "who",  "whom",  "whose", "which",   "when",   "where",   "why",     "how",
        "no",   "not",  "never", "none",  "nor",     "neither", "nobody", "nothing", "nowhere",
        "cannot", "without", "n't"};
    if (tok.empty()) return false;
    if (std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; })) return true;
    std::string t = text::to_lower_ascii(tok);
    for (std::string_view marker : {"\xE2\x96\x81", "\xC4\xA0"})
        if (t.rfind(marker, 0) == 0) t.erase(0, marker.size());
    if (!t.empty() && std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; })) return true;
    return kWords.count(t) > 0;
}

inline std::set<std::size_t> protected_indices(std::span<const std::string> tokens) {
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (is_protected_token(tokens[i])) out.insert(i);
    return out;
}

/// Keeps the `keep` highest scores (ties to the lower index) plus protected
/// indices; the mask is aligned to the input order.
inline Mask compress_side(std::span<const std::string> tokens, std::span<const double> scores, std::size_t keep,
                          const std::set<std::size_t>& protect = {}) {
    if (scores.size() != tokens.size())
        throw ValidationError("compress_side: " + std::to_string(scores.size()) + " scores for " +
                              std::to_string(tokens.size()) + " tokens");
    if (keep > tokens.size())
        throw ValidationError("compress_side: keep=" + std::to_string(keep) + " exceeds " +
                              std::to_string(tokens.size()) + " tokens");
    for (std::size_t p : protect)
        if (p >= tokens.size()) throw ValidationError("compress_side: protected index out of range");
    std::vector<std::size_t> idx(tokens.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    Mask mask(tokens.size(), 0);
    for (std::size_t t = 0; t < keep; ++t) mask[idx[t]] = 1;
    for (std::size_t p : protect) mask[p] = 1;
    return mask;
}

inline std::vector<std::string> apply_mask(std::span<const std::string> tokens, const Mask& mask) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (mask[i]) out.push_back(tokens[i]);
    return out;
}

inline std::size_t mask_count(const Mask& m) { return static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)); }

// ---- fidelity gate ----

struct GateResult {
    double score = 0;
    bool pass = false;
};

inline std::vector<std::string> qa_tokens(std::string_view question, std::string_view answer) {
    auto t = text::tokenize(question);
    auto a = text::tokenize(answer);
    t.insert(t.end(), a.begin(), a.end());
    return t;
}

/// BERTScore F1 of the compressed question+answer against the original,
/// both run through the reference tokenizer.
inline GateResult fidelity_gate(const Sample& original, std::string_view compressed_question,
                                std::string_view compressed_answer, const numerics::TokenEmbedder& embedder,
                                double threshold = 0.9) {
    const auto cand = qa_tokens(compressed_question, compressed_answer);
    if (cand.empty()) throw ValidationError("fidelity_gate: compressed text for '" + original.id + "' is empty");
    const auto ref = qa_tokens(original.question, original.answer);
    if (ref.empty()) throw ValidationError("fidelity_gate: original text for '" + original.id + "' is empty");
    const double s = numerics::bertscore_f1(embedder.embed(cand), embedder.embed(ref));
    return {s, s >= threshold};
}

inline GateResult fidelity_gate(const Sample& original, const CompressedSample& c,
                                const numerics::TokenEmbedder& embedder, double threshold = 0.9) {
    return fidelity_gate(original, c.compressed_question, c.compressed_answer, embedder, threshold);
}

// ---- rewrite loop ----

inline constexpr std::string_view kRewritePromptVersion = "rewrite_prompt_v1";

// Kept byte-identical to assets/rewrite_prompt_v1.txt.
inline constexpr std::string_view kRewritePromptV1 =
R"DMC(You are an intelligent text optimization assistant. I have a piece of [Text] composed of questions and answers and a corresponding [Compressed Text]. The [compressed text] is obtained by removing certain content from the [text]. Your task is to appropriately optimize the [compressed text] based on the provided example and the requirements outlined below to meet the specified needs.

[Text]

{TEXT}

[Compressed Text]

{COMPRESSED_TEXT}

[Examples]

{EXAMPLES}
{NEGATIVE_EXAMPLES}
[Requirements]:

The objective is to enhance the compressed text's expressiveness while ensuring logical coherence and improved comprehensibility, without expanding its content. The revised text must maintain semantic consistency with the [Text]. The length of the modified text is controlled to remain within ±10% of the original compressed text length.

Follow these procedures:

1) Thoroughly analyze the provided Text and Examples.

2) Strictly adhere to the specified requirements.

3) Reference the given examples during revision.

4) Execute textual modification and verify compliance with all criteria.

The template for your response is as follows:

Revised Compressed Text: {Only the revised text can be provided here.}

Reason: {Only the reason for the revision can be provided here.}

Please think step by step.
)DMC";

inline std::string render_qa(std::string_view q, std::string_view a) {
    return "Question: " + std::string(q) + "\nAnswer: " + std::string(a);
}

struct Exemplar {
    std::string text;
    std::string compressed_text;
};

inline std::string render_examples(const std::vector<Exemplar>& ex) {
    if (ex.empty()) return "(none)\n";
    std::string out;
    for (std::size_t i = 0; i < ex.size(); ++i) {
        out += "Example " + std::to_string(i + 1) + ":\n[Text]\n" + ex[i].text + "\n[Compressed Text]\n" +
               ex[i].compressed_text + "\n";
        if (i + 1 < ex.size()) out += "\n";
    }
    return out;
}

inline std::string format_score(double s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", s);
    return buf;
}

/// Earlier failed responses, shown to the rewriter as negative examples.
inline std::string render_negatives(const std::vector<RewriteAttempt>& prior) {
    if (prior.empty()) return "";
    std::string out = "\n[Negative Examples]\n\n";
    for (const auto& a : prior) {
        out += "Rejected revision (round " + std::to_string(a.round) + "):\n" + a.response_text + "\n";
        out += a.rejection.empty() ? "Similarity score: " + format_score(a.bertscore) + "\n\n"
                                   : "Rejected: " + a.rejection + "\n\n";
    }
    return out;
}

inline std::string fill_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
    std::string out;
    std::size_t i = 0;
    while (i < tmpl.size()) {
        bool replaced = false;
        if (tmpl[i] == '{') {
            for (const auto& [key, val] : values) {
                const std::string ph = "{" + key + "}";
                if (tmpl.compare(i, ph.size(), ph) == 0) {
                    out += val;
                    i += ph.size();
                    replaced = true;
                    break;
                }
            }
        }
        if (!replaced) out += tmpl[i++];
    }
    return out;
}

inline std::string build_prompt(const std::string& text, const std::string& compressed_text,
                                const std::vector<Exemplar>& exemplars, const std::vector<RewriteAttempt>& prior,
                                std::string_view tmpl = kRewritePromptV1) {
    return fill_template(tmpl, {{"TEXT", text},
                                {"COMPRESSED_TEXT", compressed_text},
                                {"EXAMPLES", render_examples(exemplars)},
                                {"NEGATIVE_EXAMPLES", render_negatives(prior)}});
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

struct ParsedRewrite {
    std::string question;
    std::string answer;
};

/// Extracts the revised text from a response (the "Revised Compressed Text:"
/// field when present, else the whole response) and splits it on the
/// "Question:"/"Answer:" markers. Without markers the text replaces the
/// answer and the current compressed question is kept.
inline ParsedRewrite parse_rewrite_response(std::string_view response, std::string_view current_question) {
    std::string body(response);
    const std::string field = "Revised Compressed Text:";
    if (auto p = body.find(field); p != std::string::npos) {
        body = body.substr(p + field.size());
        if (auto r = body.find("Reason:"); r != std::string::npos) body = body.substr(0, r);
    }
    body = trim(body);
    if (body.size() >= 2 && body.front() == '{' && body.back() == '}') body = trim(body.substr(1, body.size() - 2));
    const auto qpos = body.find("Question:");
    const auto apos = body.find("Answer:", qpos == std::string::npos ? 0 : qpos);
    if (apos != std::string::npos) {
        const std::string q =
            qpos == std::string::npos || qpos > apos ? std::string(current_question)
                                                     : trim(std::string_view(body).substr(qpos + 9, apos - qpos - 9));
        return {q, trim(std::string_view(body).substr(apos + 7))};
    }
    return {std::string(current_question), body};
}

struct RewriteOptions {
    double threshold = 0.9;
    int max_rounds = 3;
    /// Responses whose token count is outside (1 +/- tol) x the compressed
    /// token count are rejected before gating. nullopt disables the guard.
    std::optional<double> length_tolerance = 0.10;
};

inline bool within_length(std::size_t response_len, std::size_t compressed_len, double tol) {
    const double c = double(compressed_len);
    const double r = double(response_len);
    return r >= c * (1 - tol) - 1e-9 && r <= c * (1 + tol) + 1e-9;
}

/// Rewrites a gate-failing compression until it passes or max_rounds is
/// reached. Transport errors are rethrown with the round number.
inline CompressedSample rewrite_loop(const Sample& sample, CompressedSample compressed, rewrite::Rewriter& rewriter,
                                     const numerics::TokenEmbedder& embedder, const RewriteOptions& opt,
                                     const std::vector<Exemplar>& exemplars = {}) {
    if (opt.max_rounds < 1) throw ValidationError("max_rounds must be >= 1");
    const std::string original_text = render_qa(sample.question, sample.answer);
    const std::string compressed_text = render_qa(compressed.compressed_question, compressed.compressed_answer);
    const std::size_t compressed_len = qa_tokens(compressed.compressed_question, compressed.compressed_answer).size();
    compressed.attempts.clear();
    for (int round = 1; round <= opt.max_rounds; ++round) {
        RewriteAttempt at;
        at.round = round;
        at.prompt_text = build_prompt(original_text, compressed_text, exemplars, compressed.attempts);
        try {
            at.response_text = rewriter.rewrite(at.prompt_text);
        } catch (const std::exception& e) {
            throw TransportError("rewrite of '" + sample.id + "' round " + std::to_string(round) + ": " + e.what());
        }
        const auto parsed = parse_rewrite_response(at.response_text, compressed.compressed_question);
        const auto toks = qa_tokens(parsed.question, parsed.answer);
        if (toks.empty()) {
            at.rejection = "empty response";
        } else if (opt.length_tolerance && !within_length(toks.size(), compressed_len, *opt.length_tolerance)) {
            at.rejection = "length " + std::to_string(toks.size()) + " outside tolerance of " +
                           std::to_string(compressed_len);
        } else {
            const auto g = fidelity_gate(sample, parsed.question, parsed.answer, embedder, opt.threshold);
            at.bertscore = g.score;
            at.accepted = g.pass;
        }
        compressed.attempts.push_back(at);
        compressed.rewrite_rounds = round;
        if (at.accepted) {
            compressed.compressed_question = parsed.question;
            compressed.compressed_answer = parsed.answer;
            compressed.bertscore = at.bertscore;
            compressed.status = Status::passed_after_rewrite;
            return compressed;
        }
    }
    compressed.status = Status::failed;
    return compressed;
}

// ---- per-sample and dataset drivers ----

struct CompressOptions {
    CompressionBudget budget;
    /// Keep high-surprisal tokens; false keeps the most predictable ones.
    bool keep_high_surprisal = true;
    bool protect_answer = true;
    bool protect_question = false;
    corpus::TokenizerSpec tokenizer = corpus::TokenizerSpec::prefer_materialized;
    RewriteOptions rewrite;
    std::size_t n_exemplars = 2;
};

/// Direct compression of one sample, gated but not rewritten.
inline CompressedSample compress_sample(const Sample& s, const TokenScoreSeq& q_scores, const TokenScoreSeq& a_scores,
                                        const numerics::TokenEmbedder& embedder, const CompressOptions& opt) {
    const auto qt = corpus::tokens(s, Side::question, opt.tokenizer);
    const auto at = corpus::tokens(s, Side::answer, opt.tokenizer);
    auto qs = question_token_scores(q_scores, qt.size());
    auto as = answer_token_scores(a_scores, at.size());
    if (!opt.keep_high_surprisal) {
        for (auto& v : qs) v = -v;
        for (auto& v : as) v = -v;
    }
    const auto keep = budget_allocate(opt.budget, qt.size(), at.size());
    CompressedSample c;
    c.id = s.id;
    c.question_kept_mask =
        compress_side(qt, qs, keep.question, opt.protect_question ? protected_indices(qt) : std::set<std::size_t>{});
    c.answer_kept_mask =
        compress_side(at, as, keep.answer, opt.protect_answer ? protected_indices(at) : std::set<std::size_t>{});
    c.compressed_question = text::detokenize(apply_mask(qt, c.question_kept_mask));
    c.compressed_answer = text::detokenize(apply_mask(at, c.answer_kept_mask));
    const auto g = fidelity_gate(s, c, embedder, opt.rewrite.threshold);
    c.bertscore = g.score;
    c.status = g.pass ? Status::passed_direct : Status::failed;
    return c;
}

/// Compresses every sample; gate failures go through the rewrite loop when
/// a rewriter is given. Exemplars are drawn per sample, seeded by index,
/// from the directly passing samples.
inline std::vector<CompressedSample> compress_dataset(const Dataset& ds, const numerics::TokenEmbedder& embedder,
                                                      const CompressOptions& opt, rewrite::Rewriter* rewriter,
                                                      std::uint64_t seed) {
    opt.budget.validate();
    std::vector<CompressedSample> out;
    out.reserve(ds.size());
    for (const auto& s : ds.samples) {
        const auto* q = ds.find_token_scores(s.id, Side::question);
        const auto* a = ds.find_token_scores(s.id, Side::answer);
        if (!q || !a) throw ValidationError("sample '" + s.id + "' lacks question or answer token scores");
        out.push_back(compress_sample(s, *q, *a, embedder, opt));
    }
    if (!rewriter) return out;
    std::vector<std::size_t> passed;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i].status == Status::passed_direct) passed.push_back(i);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i].status == Status::passed_direct) continue;
        Rng rng(mix_seed(seed, i));
        std::vector<Exemplar> ex;
        std::vector<std::size_t> pool = passed;
        for (std::size_t t = 0; t < opt.n_exemplars && t < pool.size(); ++t) {
            const std::size_t j = t + static_cast<std::size_t>(rng.uniform_index(pool.size() - t));
            std::swap(pool[t], pool[j]);
            const auto& src = ds.samples[pool[t]];
            ex.push_back({render_qa(src.question, src.answer),
                          render_qa(out[pool[t]].compressed_question, out[pool[t]].compressed_answer)});
        }
        out[i] = rewrite_loop(ds.samples[i], out[i], *rewriter, embedder, opt.rewrite, ex);
    }
    return out;
}

/// The training dataset after compression. Failed samples keep their
/// original text. Token scores no longer align and are dropped.
inline Dataset apply_compression(const Dataset& ds, const std::vector<CompressedSample>& cs,
                                 corpus::TokenizerSpec tokenizer = corpus::TokenizerSpec::prefer_materialized) {
    if (cs.size() != ds.size()) throw ValidationError("compression results do not match dataset size");
    Dataset out;
    out.channels = ds.channels;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Sample& s = ds.samples[i];
        if (cs[i].id != s.id) throw ValidationError("compression result id '" + cs[i].id + "' does not match '" + s.id + "'");
        Sample t = s;
        if (cs[i].status != Status::failed) {
            t.question = cs[i].compressed_question;
            t.answer = cs[i].compressed_answer;
            if (cs[i].rewrite_rounds == 0) {
                if (s.question_tokens)
                    t.question_tokens = apply_mask(corpus::tokens(s, Side::question, tokenizer), cs[i].question_kept_mask);
                if (s.answer_tokens)
                    t.answer_tokens = apply_mask(corpus::tokens(s, Side::answer, tokenizer), cs[i].answer_kept_mask);
            } else {
                t.question_tokens.reset();
                t.answer_tokens.reset();
            }
        }
        t.meta["compression_status"] = std::string(to_string(cs[i].status));
        out.samples.push_back(std::move(t));
    }
    return out;
}

inline std::string compressed_jsonl(const std::vector<CompressedSample>& cs) {
    std::string out;
    for (const auto& c : cs) out += c.to_json().dump() + "\n";
    return out;
}

inline std::vector<CompressedSample> parse_compressed_jsonl(std::string_view bytes, const std::string& where) {
    std::vector<CompressedSample> out;
    io::for_each_line(bytes, [&](std::string_view line, std::size_t no) {
        try {
            out.push_back(CompressedSample::from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw ParseError(where + ":" + std::to_string(no) + ": " + e.what());
        }
    });
    return out;
}

/// Reference token compression ratios for GraphCut-filtered data.
inline const std::map<std::string, double>& reference_graphcut_ratios() {
    static const std::map<std::string, double> r = {
        {"pubmedqa", 0.4066}, {"billsum", 0.6231}, {"alpaca", 0.4832}, {"squad", 0.2537}};
    return r;
}

/// Token compression ratio (1 - kept/original) overall and per side, plus
/// the gate status histogram when results are given.
inline std::map<std::string, double> compression_report(const Dataset& before, const Dataset& after,
                                                        const std::vector<CompressedSample>* results = nullptr) {
    if (before.size() != after.size()) throw ValidationError("compression_report: dataset sizes differ");
    std::map<std::string, double> r;
    for (const auto& [k, v] : reference_graphcut_ratios()) r["reference.graphcut." + k] = v;
    r["n_samples"] = double(before.size());
    double q0 = 0, a0 = 0, q1 = 0, a1 = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
        if (before.samples[i].id != after.samples[i].id)
            throw ValidationError("compression_report: id mismatch at " + std::to_string(i));
        q0 += double(corpus::token_count(before.samples[i], Side::question));
        a0 += double(corpus::token_count(before.samples[i], Side::answer));
        q1 += double(corpus::token_count(after.samples[i], Side::question));
        a1 += double(corpus::token_count(after.samples[i], Side::answer));
    }
    if (q0 + a0 > 0) r["token_compression_ratio"] = 1 - (q1 + a1) / (q0 + a0);
    if (q0 > 0) r["question_compression_ratio"] = 1 - q1 / q0;
    if (a0 > 0) r["answer_compression_ratio"] = 1 - a1 / a0;
    if (results && !results->empty()) {
        std::map<std::string, double> counts = {{"passed_direct", 0}, {"passed_after_rewrite", 0}, {"failed", 0}};
        double rewritten = 0, two_plus = 0;
        for (const auto& c : *results) {
            counts[std::string(to_string(c.status))] += 1;
            if (c.rewrite_rounds >= 1) rewritten += 1;
            if (c.rewrite_rounds >= 2) two_plus += 1;
        }
        const double n = double(results->size());
        for (const auto& [k, v] : counts) r["status." + k] = v / n;
        r["rewrite.at_least_1_round"] = rewritten / n;
        r["rewrite.at_least_2_rounds"] = two_plus / n;
    }
    return r;
}

}  // namespace damoc::compress
