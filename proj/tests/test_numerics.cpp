// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "damoc/numerics.hpp"
#include "damoc/rng.hpp"
#include "support/oracles.hpp"
#include "support/tmpdir.hpp"

using namespace damoc;
namespace fs = std::filesystem;
using numerics::EmbeddingMatrix;
using test_support::oracles::bertscore_oracle;

namespace {

EmbeddingMatrix random_matrix(std::size_t n, std::size_t d, std::uint64_t seed, bool normalize = true) {
    Rng rng(seed);
    std::vector<std::vector<float>> rows(n, std::vector<float>(d));
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& v : rows[i]) v = float(rng.normal());
        ids.push_back("r" + std::to_string(i));
    }
    return EmbeddingMatrix::from_rows(rows, ids, normalize);
}

}  // namespace

TEST(Embedding, NormalizedRowsHaveUnitNorm) {
    const auto m = random_matrix(5, 7, 1);
    EXPECT_TRUE(m.normalized());
    for (std::size_t i = 0; i < m.rows(); ++i) EXPECT_NEAR(numerics::dot(m.row(i), m.row(i)), 1.0, 1e-5);
}

TEST(Embedding, ConstructorRejectsBadShapes) {
    EXPECT_THROW(EmbeddingMatrix(2, 2, {1, 2, 3}, {"a", "b"}, false), ValidationError);
    EXPECT_THROW(EmbeddingMatrix(2, 1, {1, 2}, {"a"}, false), ValidationError);
    EXPECT_THROW(EmbeddingMatrix(1, 2, {3, 4}, {"a"}, true), ValidationError);
}

TEST(Embedding, SelectIdsFollowsOrder) {
    const auto m = random_matrix(4, 3, 2);
    const auto s = m.select_ids({"r2", "r0"});
    ASSERT_EQ(s.rows(), 2u);
    EXPECT_EQ(s.row_ids()[0], "r2");
    EXPECT_EQ(s.row(0)[1], m.row(2)[1]);
    EXPECT_THROW(m.select_ids({"nope"}), Error);
}

TEST(Embedding, BinaryRoundTrip) {
    test_support::TempDir tmp;
    const auto m = random_matrix(6, 5, 3);
    numerics::write_embeddings(m, tmp / "e.dmcemb");
    const auto back = numerics::read_embeddings(tmp / "e.dmcemb");
    EXPECT_EQ(back.rows(), 6u);
    EXPECT_EQ(back.dims(), 5u);
    EXPECT_EQ(back.data(), m.data());
    EXPECT_EQ(back.row_ids(), m.row_ids());
    EXPECT_TRUE(back.normalized());
}

TEST(Embedding, DecodeRejectsTruncation) {
    const auto bytes = numerics::encode_embeddings(random_matrix(3, 4, 4));
    EXPECT_THROW(numerics::decode_embeddings(std::string_view(bytes).substr(0, bytes.size() - 3)), Error);
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(numerics::decode_embeddings(bad), Error);
}

TEST(Similarity, CosineAndDistance) {
    const std::vector<float> a = {1, 0}, b = {0, 2}, c = {2, 0};
    EXPECT_NEAR(numerics::cosine_sim(a, b), 0.0, 1e-12);
    EXPECT_NEAR(numerics::cosine_sim(a, c), 1.0, 1e-12);
    EXPECT_NEAR(numerics::squared_distance(std::span<const float>(a), std::span<const float>(b)), 5.0, 1e-12);
}

TEST(HashedEmbed, DeterministicAndNormalized) {
    const auto a = numerics::hashed_embed("hello world", 64, 1);
    const auto b = numerics::hashed_embed("hello world", 64, 1);
    const auto c = numerics::hashed_embed("hello world", 64, 2);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    double n = 0;
    for (float v : a) n += double(v) * v;
    EXPECT_NEAR(n, 1.0, 1e-5);
    EXPECT_GT(numerics::cosine_sim(numerics::hashed_embed("blood pressure", 256, 0),
                                   numerics::hashed_embed("blood pressures", 256, 0)),
              numerics::cosine_sim(numerics::hashed_embed("blood pressure", 256, 0),
                                   numerics::hashed_embed("quantum gravity", 256, 0)));
}

TEST(BertScore, MatchesExhaustiveOracle) {
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto c = random_matrix(1 + s % 5, 8, 100 + s);
        const auto r = random_matrix(1 + (s * 7) % 6, 8, 200 + s);
        EXPECT_NEAR(numerics::bertscore_f1(c, r), bertscore_oracle(c, r), 1e-9);
    }
}

TEST(BertScore, IdentityIsOneAndSymmetric) {
    const auto m = random_matrix(5, 16, 8);
    EXPECT_NEAR(numerics::bertscore_f1(m, m), 1.0, 1e-6);
    const auto o = random_matrix(3, 16, 9);
    EXPECT_NEAR(numerics::bertscore_f1(m, o), numerics::bertscore_f1(o, m), 1e-12);
    EXPECT_THROW(numerics::bertscore_f1(random_matrix(2, 4, 1, false), o), ValidationError);
}

TEST(TokenEmbedder, TableFallsBackToHashing) {
    const auto table =
        EmbeddingMatrix::from_rows({{1, 0, 0, 0, 0, 0, 0, 0}, {0, 1, 0, 0, 0, 0, 0, 0}}, {"cat", "dog"});
    numerics::TableTokenEmbedder e(table, 5);
    const std::vector<std::string> toks = {"dog", "zebra"};
    const auto m = e.embed(toks);
    EXPECT_NEAR(m.row(0)[1], 1.0f, 1e-6);
    const auto h = numerics::hashed_embed("zebra", 8, 5);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_FLOAT_EQ(m.row(1)[k], h[k]);
}

TEST(KMeans, SeparatesObviousClusters) {
    std::vector<std::vector<float>> rows;
    std::vector<std::string> ids;
    Rng rng(3);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 10; ++i) {
            rows.push_back({float(c * 10 + rng.normal() * 0.1), float(-c * 10 + rng.normal() * 0.1)});
            ids.push_back(std::to_string(c * 10 + i));
        }
    const auto emb = EmbeddingMatrix::from_rows(rows, ids);
    const auto a = numerics::kmeans(emb, 3, 1);
    ASSERT_EQ(a.labels.size(), 30u);
    for (int c = 0; c < 3; ++c)
        for (int i = 1; i < 10; ++i) EXPECT_EQ(a.labels[c * 10 + i], a.labels[c * 10]);
    EXPECT_NE(a.labels[0], a.labels[10]);
    EXPECT_NE(a.labels[10], a.labels[20]);
    const auto b = numerics::kmeans(emb, 3, 1);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_THROW(numerics::kmeans(emb, 31, 1), ValidationError);
}
