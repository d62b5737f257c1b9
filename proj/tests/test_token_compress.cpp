// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <httplib.h>

#include <cmath>
#include <thread>

#include "damoc/io.hpp"
#include "damoc/token_compress.hpp"
#include "support/oracles.hpp"
#include "support/sim_rewriter.hpp"

using namespace damoc;
namespace fs = std::filesystem;
using namespace damoc::compress;
using corpus::Sample;
using corpus::Side;
using test_support::oracles::topk_oracle;

namespace {

const numerics::HashedTokenEmbedder kEmbedder(512, 3);

Sample sample(std::string q, std::string a) { return {"s", std::move(q), std::move(a), std::nullopt, std::nullopt, {}}; }

std::string respond(const std::string& q, const std::string& a) {
    return "Revised Compressed Text: {Question: " + q + "\nAnswer: " + a + "}\nReason: {because}";
}

}  // namespace

TEST(TokenScores, SurprisalAndConditionalPerplexity) {
    corpus::TokenScoreSeq q{"a", Side::question, {-0.5, -2.0}, std::nullopt};
    corpus::TokenScoreSeq a{"a", Side::answer, {-1.0, 0.0}, std::nullopt};
    EXPECT_EQ(question_token_scores(q), (std::vector<double>{0.5, 2.0}));
    const auto as = answer_token_scores(a);
    EXPECT_NEAR(as[0], std::exp(1.0), 1e-12);
    EXPECT_NEAR(as[1], 1.0, 1e-12);
    EXPECT_THROW(question_token_scores(a), ValidationError);
    EXPECT_THROW(answer_token_scores(a, 3), ValidationError);
}

TEST(Budget, KeepCounts) {
    EXPECT_EQ(keep_for(0.5, 9, 1), 5u);
    EXPECT_EQ(keep_for(0.1, 3, 1), 1u);
    EXPECT_EQ(keep_for(0.5, 0, 1), 0u);
    EXPECT_EQ(keep_for(0.5, 4, 3), 3u);
    EXPECT_EQ(budget_allocate(CompressionBudget::uniform(0.5), 10, 7), (KeepCounts{5, 4}));
    EXPECT_THROW(budget_allocate(CompressionBudget::uniform(0.0), 1, 1), ValidationError);
    EXPECT_THROW(budget_allocate(CompressionBudget::uniform(1.2), 1, 1), ValidationError);
}

TEST(CompressSide, MatchesBruteForceTopK) {
    Rng rng(31);
    for (int inst = 0; inst < 2000; ++inst) {
        const std::size_t n = rng.uniform_index(65);
        std::vector<std::string> toks(n);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) {
            toks[i] = "t" + std::to_string(i);
            s[i] = double(rng.uniform_index(8));  // many ties
        }
        const std::size_t k = n ? rng.uniform_index(n + 1) : 0;
        std::set<std::size_t> prot;
        if (n && inst % 2) {
            for (int r = 0; r < 3; ++r) prot.insert(rng.uniform_index(n));
        }
        const auto mask = compress_side(toks, s, k, prot);
        ASSERT_EQ(mask, topk_oracle(s, k, prot)) << "instance " << inst;
        EXPECT_GE(mask_count(mask), k);
        EXPECT_LE(mask_count(mask), k + prot.size());
    }
}

TEST(CompressSide, RejectsBadInput) {
    const std::vector<std::string> t = {"a", "b"};
    const std::vector<double> s1 = {1.0};
    const std::vector<double> s2 = {1.0, 2.0};
    EXPECT_THROW(compress_side(t, s1, 1), ValidationError);
    EXPECT_THROW(compress_side(t, s2, 3), ValidationError);
    EXPECT_THROW(compress_side(t, s2, 1, {5}), ValidationError);
}

TEST(Protection, InterrogativesNegationsNumerals) {
    for (const char* t : {"What", "not", "never", "n't", "42", "\xE2\x96\x81No", "\xC4\xA0" "2024", "How"})
        EXPECT_TRUE(is_protected_token(t)) << t;
    for (const char* t : {"blood", "", "4a", "note", "nowhere-ish"}) EXPECT_FALSE(is_protected_token(t)) << t;
    const std::vector<std::string> toks = {"it", "is", "not", "5", "mg"};
    EXPECT_EQ(protected_indices(toks), (std::set<std::size_t>{2, 3}));
}

TEST(CompressSample, KeepsHighSurprisalAndProtectedTokens) {
    Sample s = sample("how much is needed", "it is not above 5 mg daily");
    const corpus::TokenScoreSeq q{"s", Side::question, {-0.1, -3, -0.2, -2}, std::nullopt};
    const corpus::TokenScoreSeq a{"s", Side::answer, {-0.1, -0.1, -0.1, -2, -0.1, -3, -0.1}, std::nullopt};
    CompressOptions opt;
    opt.budget = CompressionBudget::uniform(0.5);
    const auto c = compress_sample(s, q, a, kEmbedder, opt);
    EXPECT_EQ(c.question_kept_mask, (Mask{0, 1, 0, 1}));
    // Top 4 by score are {5, 3, 0, 1} (ties to the lower index); "not" and "5" are protected.
    EXPECT_EQ(c.answer_kept_mask, (Mask{1, 1, 1, 1, 1, 1, 0}));
    EXPECT_EQ(c.compressed_question, "much needed");
    EXPECT_EQ(c.compressed_answer, "it is not above 5 mg");
    EXPECT_EQ(c.status, c.bertscore >= 0.9 ? Status::passed_direct : Status::failed);
}

TEST(Gate, IdentityScoresOneAndEmptyIsError) {
    const Sample s = sample("What is the dose?", "Two tablets daily.");
    const auto g = fidelity_gate(s, s.question, s.answer, kEmbedder);
    EXPECT_NEAR(g.score, 1.0, 1e-6);
    EXPECT_TRUE(g.pass);
    EXPECT_THROW(fidelity_gate(s, "", "", kEmbedder), ValidationError);
    const auto low = fidelity_gate(s, "zebra", "quantum", kEmbedder);
    EXPECT_FALSE(low.pass);
}

TEST(Prompt, EmbeddedTemplateMatchesAsset) {
    EXPECT_EQ(io::read_file(fs::path(DAMOC_ASSET_DIR) / "rewrite_prompt_v1.txt"), std::string(kRewritePromptV1));
}

TEST(Prompt, PlaceholdersFilledAndNegativesAppear) {
    const std::vector<Exemplar> ex = {{"Question: a b\nAnswer: c d", "Question: a\nAnswer: c"}};
    const auto p1 = build_prompt("Question: q1\nAnswer: a1", "Question: q\nAnswer: a", ex, {});
    EXPECT_NE(p1.find("[Text]\n\nQuestion: q1\nAnswer: a1\n\n[Compressed Text]"), std::string::npos);
    EXPECT_NE(p1.find("Example 1:"), std::string::npos);
    EXPECT_EQ(p1.find("{TEXT}"), std::string::npos);
    EXPECT_EQ(p1.find("{EXAMPLES}"), std::string::npos);
    EXPECT_EQ(p1.find("{NEGATIVE_EXAMPLES}"), std::string::npos);
    EXPECT_EQ(p1.find("[Negative Examples]"), std::string::npos);
    EXPECT_NE(p1.find("Revised Compressed Text: {Only the revised text can be provided here.}"), std::string::npos);

    RewriteAttempt a;
    a.round = 1;
    a.response_text = "bad revision";
    a.bertscore = 0.81234;
    const auto p2 = build_prompt("T", "C", {}, {a});
    EXPECT_NE(p2.find("[Negative Examples]"), std::string::npos);
    EXPECT_NE(p2.find("bad revision"), std::string::npos);
    EXPECT_NE(p2.find("Similarity score: 0.8123"), std::string::npos);
    EXPECT_NE(p2.find("(none)"), std::string::npos);
}

TEST(ParseResponse, TemplateFieldAndFallbacks) {
    auto r = parse_rewrite_response(respond("why?", "because x."), "q0");
    EXPECT_EQ(r.question, "why?");
    EXPECT_EQ(r.answer, "because x.");
    r = parse_rewrite_response("Revised Compressed Text: {only an answer}\nReason: {r}", "q0");
    EXPECT_EQ(r.question, "q0");
    EXPECT_EQ(r.answer, "only an answer");
    r = parse_rewrite_response("Answer: plain", "q0");
    EXPECT_EQ(r.question, "q0");
    EXPECT_EQ(r.answer, "plain");
}

TEST(RewriteLoop, IdentityStubPassesWhenGuardDisabled) {
    const Sample s = sample("what dose is safe for adults", "two tablets twice daily with food");
    CompressedSample c;
    c.id = "s";
    c.compressed_question = "dose safe";
    c.compressed_answer = "tablets";
    rewrite::FunctionRewriter identity([&](const std::string&) { return respond(s.question, s.answer); });
    RewriteOptions opt;
    opt.length_tolerance = std::nullopt;
    const auto out = rewrite_loop(s, c, identity, kEmbedder, opt);
    EXPECT_EQ(out.status, Status::passed_after_rewrite);
    EXPECT_EQ(out.rewrite_rounds, 1);
    EXPECT_NEAR(out.bertscore, 1.0, 1e-6);
    EXPECT_EQ(out.compressed_answer, s.answer);
}

TEST(RewriteLoop, LengthGuardRejectsWithoutGating) {
    const Sample s = sample("what dose is safe for adults", "two tablets twice daily with food");
    CompressedSample c;
    c.id = "s";
    c.compressed_question = "dose safe";
    c.compressed_answer = "tablets";
    int calls = 0;
    rewrite::FunctionRewriter identity([&](const std::string& prompt) {
        ++calls;
        if (calls > 1) {
            EXPECT_NE(prompt.find("Rejected: length"), std::string::npos);
        }
        return respond(s.question, s.answer);
    });
    const auto out = rewrite_loop(s, c, identity, kEmbedder, RewriteOptions{});
    EXPECT_EQ(out.status, Status::failed);
    EXPECT_EQ(out.rewrite_rounds, 3);
    EXPECT_EQ(calls, 3);
    for (const auto& a : out.attempts) {
        EXPECT_FALSE(a.accepted);
        EXPECT_EQ(a.rejection.rfind("length", 0), 0u);
    }
    EXPECT_EQ(out.compressed_answer, "tablets");
}

TEST(RewriteLoop, SecondRoundSeesNegativeExampleWithScore) {
    const Sample s = sample("what is it", "alpha beta gamma delta");
    CompressedSample c;
    c.id = "s";
    c.compressed_question = "what";
    c.compressed_answer = "alpha beta";
    std::vector<std::string> prompts;
    rewrite::FunctionRewriter rw([&](const std::string& p) {
        prompts.push_back(p);
        return prompts.size() == 1 ? respond("what", "zeta eta") : respond("what is it", "alpha beta gamma delta");
    });
    RewriteOptions opt;
    opt.length_tolerance = std::nullopt;
    const auto out = rewrite_loop(s, c, rw, kEmbedder, opt);
    ASSERT_EQ(prompts.size(), 2u);
    EXPECT_EQ(out.status, Status::passed_after_rewrite);
    EXPECT_EQ(out.rewrite_rounds, 2);
    EXPECT_NE(prompts[1].find("zeta eta"), std::string::npos);
    EXPECT_NE(prompts[1].find("Similarity score: " + format_score(out.attempts[0].bertscore)), std::string::npos);
}

TEST(RewriteLoop, TransportErrorNamesRound) {
    const Sample s = sample("q", "a b");
    CompressedSample c;
    c.id = "s";
    c.compressed_question = "q";
    c.compressed_answer = "a";
    rewrite::FunctionRewriter bad([](const std::string&) -> std::string { throw TransportError("down"); });
    try {
        rewrite_loop(s, c, bad, kEmbedder, RewriteOptions{});
        FAIL();
    } catch (const TransportError& e) {
        EXPECT_NE(std::string(e.what()).find("round 1"), std::string::npos);
    }
}

TEST(Transport, ProcessStubIdentityAndGarbage) {
    auto rw = rewrite::make_rewriter(std::string("exec:") + DAMOC_STUB_REWRITER + " identity");
    const auto prompt = build_prompt(render_qa("q1", "a1 a2"), render_qa("q1", "a1"), {}, {});
    const auto r = parse_rewrite_response(rw->rewrite(prompt), "q1");
    EXPECT_EQ(r.question, "q1");
    EXPECT_EQ(r.answer, "a1 a2");
    const auto r2 = parse_rewrite_response(rw->rewrite(prompt), "q1");
    EXPECT_EQ(r2.answer, "a1 a2");
    auto echo = rewrite::make_rewriter(std::string("exec:") + DAMOC_STUB_REWRITER + " echo");
    EXPECT_EQ(parse_rewrite_response(echo->rewrite(prompt), "q1").answer, "a1");
    auto garbage = rewrite::make_rewriter(std::string("exec:") + DAMOC_STUB_REWRITER + " garbage");
    EXPECT_THROW(garbage->rewrite(prompt), TransportError);
}

TEST(Transport, ProcessThatExitsIsTransportError) {
    auto rw = rewrite::make_rewriter("exec:/bin/true");
    EXPECT_THROW(rw->rewrite("x"), TransportError);
}

TEST(Transport, HttpRoundTripMatchesInProcess) {
    httplib::Server svr;
    svr.Post("/rewrite", [](const httplib::Request& req, httplib::Response& res) {
        const auto j = nlohmann::json::parse(req.body);
        const std::string p = j.at("prompt");
        res.set_content(nlohmann::json{{"text", "Revised Compressed Text: {" +
                                                    test_support::block_after(p, "[Text]") + "}\nReason: {ok}"}}
                            .dump(),
                        "application/json");
    });
    svr.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
    const int port = svr.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread th([&] { svr.listen_after_bind(); });
    svr.wait_until_ready();

    const Sample s = sample("what dose is safe", "two tablets daily");
    CompressedSample c;
    c.id = "s";
    c.compressed_question = "dose";
    c.compressed_answer = "tablets";
    RewriteOptions opt;
    opt.length_tolerance = std::nullopt;
    auto http = rewrite::make_rewriter("http://127.0.0.1:" + std::to_string(port) + "/rewrite");
    const auto via_http = rewrite_loop(s, c, *http, kEmbedder, opt);
    rewrite::FunctionRewriter local([](const std::string& p) {
        return "Revised Compressed Text: {" + test_support::block_after(p, "[Text]") + "}\nReason: {ok}";
    });
    const auto via_fn = rewrite_loop(s, c, local, kEmbedder, opt);
    EXPECT_EQ(via_http.status, via_fn.status);
    EXPECT_EQ(via_http.bertscore, via_fn.bertscore);
    EXPECT_EQ(via_http.compressed_answer, via_fn.compressed_answer);

    auto broken = rewrite::make_rewriter("http://127.0.0.1:" + std::to_string(port) + "/broken");
    EXPECT_THROW(broken->rewrite("x"), TransportError);
    svr.stop();
    th.join();
    EXPECT_THROW(rewrite::make_rewriter("https://example.org"), ConfigError);
    EXPECT_THROW(rewrite::make_rewriter("ftp://x"), ConfigError);
}

TEST(Dataset, SimulatedRatesAndGateSoundness) {
    auto w = test_support::sim_workload(2000, 0.92, 5);
    test_support::SimRewriter rw({0.9625, 1.0}, 6);
    const auto res = compress_dataset(w.ds, kEmbedder, w.options, &rw, 1);
    const auto out = apply_compression(w.ds, res, w.options.tokenizer);
    const auto rep = compression_report(w.ds, out, &res);
    EXPECT_NEAR(rep.at("status.passed_direct"), 0.92, 0.03);
    EXPECT_NEAR(rep.at("rewrite.at_least_1_round"), 0.08, 0.03);
    EXPECT_NEAR(rep.at("rewrite.at_least_2_rounds"), 0.003, 0.01);
    EXPECT_EQ(rep.at("status.failed"), 0.0);
    for (std::size_t i = 0; i < res.size(); ++i) {
        if (res[i].status == Status::failed) continue;
        EXPECT_GE(res[i].bertscore, 0.9);
        EXPECT_GE(fidelity_gate(w.ds.samples[i], res[i], kEmbedder).score, 0.9);
    }
}

TEST(Dataset, WithoutRewriterFailuresKeepOriginalText) {
    auto w = test_support::sim_workload(50, 0.5, 8);
    const auto res = compress_dataset(w.ds, kEmbedder, w.options, nullptr, 1);
    const auto out = apply_compression(w.ds, res, w.options.tokenizer);
    std::size_t failed = 0;
    for (std::size_t i = 0; i < res.size(); ++i) {
        EXPECT_EQ(res[i].rewrite_rounds, 0);
        if (res[i].status == Status::failed) {
            ++failed;
            EXPECT_EQ(out.samples[i].answer, w.ds.samples[i].answer);
        } else {
            EXPECT_EQ(out.samples[i].answer, res[i].compressed_answer);
        }
        EXPECT_EQ(out.samples[i].meta.at("compression_status"), to_string(res[i].status));
    }
    EXPECT_GT(failed, 0u);
    EXPECT_TRUE(out.token_scores.empty());
}

TEST(Dataset, ExemplarsComeFromPassingSamples) {
    auto w = test_support::sim_workload(30, 0.5, 9);
    std::vector<std::string> prompts;
    rewrite::FunctionRewriter rw([&](const std::string& p) {
        prompts.push_back(p);
        return "Revised Compressed Text: {" + test_support::block_after(p, "[Text]") + "}\nReason: {x}";
    });
    const auto res = compress_dataset(w.ds, kEmbedder, w.options, &rw, 1);
    ASSERT_FALSE(prompts.empty());
    for (const auto& p : prompts) {
        EXPECT_NE(p.find("Example 1:"), std::string::npos);
        EXPECT_NE(p.find("Example 2:"), std::string::npos);
    }
    const auto again = compress_dataset(w.ds, kEmbedder, w.options, &rw, 1);
    for (std::size_t i = 0; i < res.size(); ++i) EXPECT_EQ(res[i].to_json(), again[i].to_json());
}

TEST(Serialization, CompressedJsonlRoundTrip) {
    auto w = test_support::sim_workload(10, 0.5, 10);
    const auto res = compress_dataset(w.ds, kEmbedder, w.options, nullptr, 1);
    const auto text = compressed_jsonl(res);
    const auto back = parse_compressed_jsonl(text, "c.jsonl");
    ASSERT_EQ(back.size(), res.size());
    for (std::size_t i = 0; i < res.size(); ++i) {
        EXPECT_EQ(back[i].answer_kept_mask, res[i].answer_kept_mask);
        EXPECT_EQ(back[i].status, res[i].status);
        EXPECT_EQ(back[i].bertscore, res[i].bertscore);
    }
    EXPECT_THROW(parse_compressed_jsonl("{\"id\":1}\n", "c.jsonl"), ParseError);
}

TEST(Report, RatiosAndReferenceFields) {
    corpus::Dataset before, after;
    before.samples.push_back(sample("a b c d", "e f g h i j"));
    after.samples.push_back(sample("a b", "e f g"));
    const auto r = compression_report(before, after);
    EXPECT_NEAR(r.at("token_compression_ratio"), 0.5, 1e-12);
    EXPECT_NEAR(r.at("question_compression_ratio"), 0.5, 1e-12);
    EXPECT_NEAR(r.at("answer_compression_ratio"), 0.5, 1e-12);
    EXPECT_EQ(r.at("reference.graphcut.pubmedqa"), 0.4066);
    EXPECT_EQ(r.at("reference.graphcut.billsum"), 0.6231);
    EXPECT_EQ(r.at("reference.graphcut.alpaca"), 0.4832);
    EXPECT_EQ(r.at("reference.graphcut.squad"), 0.2537);
}
