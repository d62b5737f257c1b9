// SPDX-License-Identifier: Apache-2.0
#pragma once

// Simulated rewrite workload. Each sample has 20 answer tokens; compression
// keeps 14. "Easy" samples have their 6 lowest-scored tokens duplicated
// among the kept ones, so direct compression passes the gate; the rest lose
// 6 unique words and fail. The simulated rewriter answers round r with the
// original text (which passes) with probability p[r-1], else echoes the
// compressed text back.

#include <string>
#include <vector>

#include "damoc/corpus.hpp"
#include "damoc/digest.hpp"
#include "damoc/rewriter.hpp"
#include "damoc/rng.hpp"
#include "damoc/token_compress.hpp"

namespace damoc::test_support {

inline std::string random_word(Rng& rng) {
    std::string w(8, 'a');
    for (auto& c : w) c = static_cast<char>('a' + rng.uniform_index(26));
    return w;
}

struct SimWorkload {
    corpus::Dataset ds;
    compress::CompressOptions options;
};

inline SimWorkload sim_workload(std::size_t n, double p_direct, std::uint64_t seed) {
    SimWorkload w;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        corpus::Sample s;
        s.id = "sim" + std::to_string(i);
        s.question = "what";
        const bool easy = rng.bernoulli(p_direct);
        std::vector<std::string> words;
        for (int t = 0; t < 14; ++t) words.push_back(random_word(rng));
        for (int t = 0; t < 6; ++t) words.push_back(easy ? words[static_cast<std::size_t>(t)] : random_word(rng));
        std::vector<double> lp;
        for (int t = 0; t < 20; ++t) lp.push_back(t < 14 ? -3.0 - rng.uniform01() : -0.5 * rng.uniform01());
        // Shuffle positions so kept and dropped tokens interleave.
        std::vector<std::size_t> perm(20);
        for (std::size_t t = 0; t < 20; ++t) perm[t] = t;
        for (std::size_t t = 19; t > 0; --t) std::swap(perm[t], perm[rng.uniform_index(t + 1)]);
        std::vector<std::string> toks(20);
        std::vector<double> scores(20);
        for (std::size_t t = 0; t < 20; ++t) {
            toks[perm[t]] = words[t];
            scores[perm[t]] = lp[t];
        }
        for (std::size_t t = 0; t < 20; ++t) s.answer += (t ? " " : "") + toks[t];
        w.ds.token_scores.push_back({s.id, corpus::Side::question, {-1.0}, std::nullopt});
        w.ds.token_scores.push_back({s.id, corpus::Side::answer, scores, std::nullopt});
        w.ds.samples.push_back(std::move(s));
    }
    w.options.budget = {0.7, 1.0, 0.7, 1};
    w.options.protect_answer = false;
    w.options.rewrite.threshold = 0.9;
    w.options.rewrite.max_rounds = 3;
    w.options.rewrite.length_tolerance = 0.5;
    w.options.tokenizer = corpus::TokenizerSpec::reference;
    return w;
}

inline std::string block_after(const std::string& prompt, const std::string& header) {
    auto p = prompt.find("\n" + header + "\n\n");
    if (p == std::string::npos) return {};
    p += header.size() + 3;
    const auto e = prompt.find("\n\n", p);
    return prompt.substr(p, e == std::string::npos ? std::string::npos : e - p);
}

class SimRewriter final : public rewrite::Rewriter {
public:
    SimRewriter(std::vector<double> p_success, std::uint64_t seed) : p_(std::move(p_success)), seed_(seed) {}

    std::string rewrite(const std::string& prompt) override {
        ++calls_;
        const std::string original = block_after(prompt, "[Text]");
        const std::string compressed = block_after(prompt, "[Compressed Text]");
        std::size_t round = 1;
        for (std::size_t p = prompt.find("Rejected revision"); p != std::string::npos;
             p = prompt.find("Rejected revision", p + 1))
            ++round;
        const double p_ok = round <= p_.size() ? p_[round - 1] : 0.0;
        Rng rng(mix_seed(seed_, fnv1a64(original) ^ round));
        const std::string body = rng.bernoulli(p_ok) ? original : compressed;
        return "Revised Compressed Text: {" + body + "}\n\nReason: {simulated}";
    }
    std::size_t calls() const { return calls_; }

private:
    std::vector<double> p_;
    std::uint64_t seed_;
    std::size_t calls_ = 0;
};

}  // namespace damoc::test_support
