// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "damoc/corpus.hpp"
#include "damoc/digest.hpp"
#include "damoc/rng.hpp"
#include "damoc/text.hpp"
#include "support/tmpdir.hpp"

using namespace damoc;
namespace fs = std::filesystem;
using corpus::Dataset;
using corpus::Sample;
using corpus::Side;

namespace {

Dataset two_samples() {
    Dataset ds;
    ds.samples.push_back({"a", "What is BP?", "Blood pressure, mostly.", std::nullopt, std::nullopt, {}});
    ds.samples.push_back({"b", "Is it safe?", "No, it isn't.", std::nullopt, std::nullopt, {{"src", "x"}}});
    ds.channels.push_back({"quality_llm", {{"a", 4.5}, {"b", 2.0}}});
    ds.token_scores.push_back({"a", Side::question, {-0.1, -2.0, -0.5, -0.3}, std::nullopt});
    ds.token_scores.push_back({"a", Side::answer, {-1, -1, -1, -1, -1}, std::vector<double>{-2, -2, -2, -2, -2}});
    return ds;
}

}  // namespace

TEST(Text, TokenizeSplitsPunctuationPerCodePoint) {
    EXPECT_EQ(text::tokenize("Hello, world!"), (std::vector<std::string>{"Hello", ",", "world", "!"}));
    EXPECT_EQ(text::tokenize("  a\t\n b  "), (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(text::tokenize("x...y"), (std::vector<std::string>{"x", ".", ".", ".", "y"}));
    EXPECT_TRUE(text::tokenize("").empty());
}

TEST(Text, DetokenizeReproducesSpacing) {
    for (const char* s : {"What is BP?", "No, it isn't.", "Rate (per day) is 5%."}) {
        const auto t = text::tokenize(s);
        EXPECT_TRUE(text::equal_ignoring_space(text::detokenize(t), s)) << s;
    }
}

TEST(Text, SubwordMarkersRoundTrip) {
    const std::vector<std::string> sp = {"\xE2\x96\x81Hel", "lo", "\xE2\x96\x81world"};
    EXPECT_EQ(text::detokenize(sp), "Hello world");
    const std::vector<std::string> bpe = {"Hel", "lo", "\xC4\xA0there"};
    EXPECT_EQ(text::detokenize(bpe), "Hello there");
}

TEST(Digest, Sha256KnownVector) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Rng, DeterministicAndInRange) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
    Rng r(1);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_LT(r.uniform_index(7), 7u);
        const double u = r.uniform01();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
    EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}

TEST(Rng, NormalMoments) {
    Rng r(9);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.03);
    EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Dataset, ValidateAcceptsWellFormed) { EXPECT_NO_THROW(two_samples().validate()); }

TEST(Dataset, ValidateRejectsDuplicateIds) {
    auto ds = two_samples();
    ds.samples[1].id = "a";
    EXPECT_THROW(ds.validate(), ValidationError);
}

TEST(Dataset, ValidateRejectsMisalignedTokenScores) {
    auto ds = two_samples();
    ds.token_scores[0].logprob_conditioned.pop_back();
    try {
        ds.validate();
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
    }
}

TEST(Dataset, ValidateRejectsPositiveLogprob) {
    auto ds = two_samples();
    ds.token_scores[0].logprob_conditioned[0] = 0.5;
    EXPECT_THROW(ds.validate(), ValidationError);
}

TEST(Dataset, ValidateRejectsUnknownChannel) {
    auto ds = two_samples();
    ds.channels.push_back({"vibes", {{"a", 1}}});
    EXPECT_THROW(ds.validate(), ValidationError);
    ds.channels.back() = {"ifd", {{"zzz", 1}}};
    EXPECT_THROW(ds.validate(), ValidationError);
}

TEST(Dataset, MaterializedTokensMustReproduceText) {
    auto ds = two_samples();
    ds.samples[0].question_tokens = std::vector<std::string>{"What", "is", "BP", "?"};
    EXPECT_NO_THROW(ds.validate());
    ds.samples[0].question_tokens = std::vector<std::string>{"What", "was", "BP", "?"};
    EXPECT_THROW(ds.validate(), ValidationError);
}

TEST(Dataset, SubsetKeepsGivenOrderAndFollowsChannels) {
    const auto ds = two_samples();
    const auto sub = ds.subset({"b", "a"});
    ASSERT_EQ(sub.size(), 2u);
    EXPECT_EQ(sub.samples[0].id, "b");
    EXPECT_EQ(sub.channel("quality_llm").at("b"), 2.0);
    const auto only_b = ds.subset({"b"});
    EXPECT_EQ(only_b.channel("quality_llm").values.size(), 1u);
    EXPECT_TRUE(only_b.token_scores.empty());
}

TEST(Dataset, SaveLoadRoundTrip) {
    test_support::TempDir tmp;
    const auto ds = two_samples();
    corpus::save_dataset(ds, tmp / "d");
    const auto back = corpus::load_dataset(tmp / "d");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back.samples[1].meta.at("src"), "x");
    EXPECT_EQ(back.channel("quality_llm").values, ds.channel("quality_llm").values);
    ASSERT_NE(back.find_token_scores("a", Side::answer), nullptr);
    EXPECT_EQ(*back.find_token_scores("a", Side::answer)->logprob_unconditioned,
              *ds.find_token_scores("a", Side::answer)->logprob_unconditioned);
    ASSERT_TRUE(fs::exists(tmp / "d" / "manifest.json"));
    EXPECT_EQ(back.source_manifest.stats.at("n_samples"), 2.0);
}

TEST(Parse, ErrorsNameFileAndLine) {
    try {
        corpus::parse_samples_jsonl("{\"id\":\"a\",\"question\":\"q\",\"answer\":\"x\"}\n{\"id\":\"b\"}\n", "s.jsonl");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("s.jsonl:2"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("question"), std::string::npos);
    }
    EXPECT_THROW(corpus::parse_samples_jsonl("not json\n", "x"), ParseError);
    EXPECT_THROW(corpus::parse_channel_jsonl("{\"id\":\"a\",\"value\":1}\n{\"id\":\"a\",\"value\":2}\n", "ifd", "c"),
                 ValidationError);
}

TEST(Parse, BlankLinesIgnored) {
    const auto v = corpus::parse_samples_jsonl("\n{\"id\":\"a\",\"question\":\"q\",\"answer\":\"x\"}\n\n", "s");
    EXPECT_EQ(v.size(), 1u);
}

TEST(Manifest, DigestIgnoresTimestampAndDetectsTampering) {
    corpus::Manifest m;
    m.stage = corpus::Stage::filter;
    m.config_digest = "abc";
    m.seed = 3;
    m.parent_manifest = "p";
    m.stats = {{"kept_ratio", 0.1}};
    m.created_at = "2024-01-01T00:00:00Z";
    auto m2 = m;
    m2.created_at = "2030-01-01T00:00:00Z";
    EXPECT_EQ(m.digest(), m2.digest());
    const auto back = corpus::Manifest::from_json(corpus::json::parse(m.to_json().dump()));
    EXPECT_EQ(back.digest(), m.digest());
    auto j = corpus::json::parse(m.to_json().dump());
    j["stats"]["kept_ratio"] = 0.2;
    EXPECT_THROW(corpus::Manifest::from_json(j), Error);
}

TEST(Tokens, PreferMaterialized) {
    Sample s{"a", "a b", "c", std::vector<std::string>{"\xE2\x96\x81" "a", "\xE2\x96\x81" "b"}, std::nullopt, {}};
    EXPECT_EQ(corpus::token_count(s, Side::question), 2u);
    EXPECT_EQ(corpus::tokens(s, Side::question)[0], "\xE2\x96\x81" "a");
    EXPECT_EQ(corpus::tokens(s, Side::question, corpus::TokenizerSpec::reference)[0], "a");
}
