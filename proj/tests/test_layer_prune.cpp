// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "damoc/layer_prune.hpp"
#include "damoc/tiny_transformer.hpp"
#include "support/prune_oracle.hpp"
#include "support/tmpdir.hpp"

using namespace damoc;
using namespace damoc::prune;
using tensor::ActivationTrace;
using tensor::Tensor;
using tensor::TensorArchive;

namespace {

ActivationTrace trace_from(std::vector<std::vector<std::vector<float>>> mats) {
    ActivationTrace t;
    t.rows = mats[0].size();
    t.dims = mats[0][0].size();
    for (const auto& m : mats) {
        std::vector<float> flat;
        for (const auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
        t.layers.push_back(flat);
    }
    return t;
}

corpus::Dataset calib_set(std::size_t n) {
    corpus::Dataset ds;
    for (std::size_t i = 0; i < n; ++i)
        ds.samples.push_back({"c" + std::to_string(i), "what is item " + std::to_string(i),
                              "it is number " + std::to_string(i * 7) + " of the list", std::nullopt, std::nullopt, {}});
    return ds;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
    return m;
}

}  // namespace

TEST(Importance, CosineMeanOverRows) {
    const auto t = trace_from({{{1, 0}, {0, 1}}, {{1, 0}, {1, 0}}, {{-1, 0}, {1, 0}}});
    const auto is = layer_importance(t);
    ASSERT_EQ(is.scores.size(), 2u);
    EXPECT_NEAR(is.scores[0], 0.5, 1e-12);
    EXPECT_NEAR(is.scores[1], 0.0, 1e-12);
    const auto raw = layer_importance(t, false);
    EXPECT_NEAR(raw.scores[0], 1.0, 1e-12);
    EXPECT_FALSE(raw.normalized);
    EXPECT_THROW(plan_prune(raw), ValidationError);
}

TEST(Importance, IdentityLayerIsExactlyOne) {
    Rng rng(1);
    for (int inst = 0; inst < 100; ++inst) {
        std::vector<std::vector<float>> x(5, std::vector<float>(7));
        for (auto& r : x)
            for (auto& v : r) v = float(rng.normal() * std::pow(10.0, double(rng.uniform_index(6)) - 3));
        EXPECT_EQ(layer_importance(trace_from({x, x})).scores[0], 1.0);
    }
}

TEST(Importance, ZeroRowNamesRowAndMatrix) {
    const auto t = trace_from({{{1, 0}, {1, 1}}, {{1, 0}, {0, 0}}});
    try {
        layer_importance(t);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("matrix 1"), std::string::npos);
    }
}

TEST(Plan, ChainsToNearestUnprunedPredecessor) {
    const auto p = plan_prune({{0.5, 0.9, 0.95, 0.3, 0.86, 0.1}, true}, 0.85);
    EXPECT_EQ(p.pruned_indices, (std::vector<std::size_t>{1, 2, 4}));
    EXPECT_EQ(p.merge_edges, (std::vector<MergeEdge>{{0, 1}, {0, 2}, {3, 4}}));
    EXPECT_TRUE(plan_prune({{0.99, 0.2}, true}).pruned_indices.empty());
    EXPECT_THROW(plan_prune({{0.9, 0.95}, true}), ValidationError);
    EXPECT_THROW(plan_prune({{0.1}, true}, 0.85, 0.0), ValidationError);
}

TEST(Plan, PrunedCountMonotoneInThreshold) {
    Rng rng(2);
    for (int inst = 0; inst < 500; ++inst) {
        LayerImportance is;
        is.scores.push_back(0.5);
        for (int i = 0; i < 31; ++i) is.scores.push_back(0.75 + rng.uniform01() * 0.2);
        std::size_t prev = SIZE_MAX;
        for (double tau : {0.80, 0.85, 0.90}) {
            const auto n = plan_prune(is, tau).pruned_indices.size();
            EXPECT_LE(n, prev);
            prev = n;
        }
    }
}

TEST(Sparsify, KeepsExactCountAndIdentityAtOne) {
    Rng rng(3);
    for (int inst = 0; inst < 1000; ++inst) {
        std::vector<std::size_t> shape = {1 + rng.uniform_index(9), 1 + rng.uniform_index(9)};
        auto t = Tensor::zeros(shape);
        for (auto& v : t.data) v = float(std::round(rng.normal() * 4) / 4) + (rng.bernoulli(0.5) ? 1e-3f : 0.0f);
        for (auto& v : t.data)
            if (v == 0.0f) v = 0.5f;
        const auto s = sparsify(t, 0.2);
        std::size_t nz = 0;
        for (float v : s.data) nz += v != 0.0f;
        EXPECT_EQ(nz, static_cast<std::size_t>(std::ceil(0.2 * double(t.numel()) - 1e-9)));
        const auto oracle = test_support::sparse_oracle(std::vector<double>(t.data.begin(), t.data.end()), 0.2);
        for (std::size_t k = 0; k < s.data.size(); ++k) ASSERT_EQ(double(s.data[k]), oracle[k]);
        const auto id = sparsify(t, 1.0);
        ASSERT_EQ(std::memcmp(id.data.data(), t.data.data(), t.data.size() * sizeof(float)), 0);
        EXPECT_EQ(id.shape, t.shape);
    }
    EXPECT_THROW(sparsify(Tensor::zeros({2}), 0.0), ValidationError);
    EXPECT_THROW(sparsify(Tensor{}, 0.5), ValidationError);
}

TEST(Merge, MatchesBruteForceEvaluation) {
    Rng rng(4);
    for (int inst = 0; inst < 300; ++inst) {
        const auto a = test_support::fuzz_archive(rng);
        LayerImportance is;
        for (std::size_t i = 0; i < a.layers.size(); ++i) is.scores.push_back(rng.uniform01());
        const double tau = 0.2 + rng.uniform01() * 0.6;
        is.scores[0] = std::min(is.scores[0], tau);
        const double keep = rng.bernoulli(0.5) ? 0.2 : 0.05 + rng.uniform01() * 0.95;
        const bool scale = rng.bernoulli(0.7);
        const auto plan = plan_prune(is, tau, keep);
        const auto merged = merge_layers(a, plan, is, {scale});
        const auto want = test_support::merge_oracle(a, is.scores, tau, keep, scale);
        ASSERT_EQ(merged.layers.size(), want.size());
        for (std::size_t l = 0; l < want.size(); ++l)
            for (const auto& [name, w] : want[l]) {
                const auto& got = merged.layers[l].tensors.at(name).data;
                for (std::size_t k = 0; k < w.size(); ++k) ASSERT_NEAR(got[k], w[k], 1e-6) << inst;
            }
        EXPECT_EQ(merged.meta.n_layers, want.size());
    }
}

TEST(Merge, RequiresPretrainedWeights) {
    Rng rng(5);
    auto a = test_support::fuzz_archive(rng);
    a.pre_layers.reset();
    EXPECT_THROW(merge_layers(a, PrunePlan{}, {std::vector<double>(a.layers.size(), 0.1), true}), ValidationError);
}

TEST(Merge, RejectsInconsistentPlans) {
    Rng rng(6);
    TensorArchive a;
    do a = test_support::fuzz_archive(rng);
    while (a.layers.size() < 3);
    const LayerImportance is{{0.1, 0.9, 0.2}, true};
    PrunePlan p;
    p.pruned_indices = {1};
    EXPECT_THROW(merge_layers(a, p, is), ValidationError);
    p.merge_edges = {{2, 1}};
    EXPECT_THROW(merge_layers(a, p, is), ValidationError);
    p.merge_edges = {{0, 1}};
    EXPECT_NO_THROW(merge_layers(a, p, is));
    p.pruned_indices = {0};
    EXPECT_THROW(merge_layers(a, p, is), ValidationError);
}

TEST(TinyModel, PruningIdentityLayersLeavesLogitsUnchanged) {
    tiny::TinyTransformerSpec spec;
    spec.n_layers = 6;
    spec.seed = 3;
    auto base = tiny::init_archive(spec);
    auto model = tiny::perturbed(base, 0.01, 4);
    tiny::make_identity_layer(model, 0);
    tiny::make_identity_layer(model, 1);
    model.pre_layers = base.layers;
    const tiny::TinyTransformer before(model);
    const auto trace = tiny::capture_activations(before, calib_set(8));
    const auto is = layer_importance(trace);
    EXPECT_EQ(is.scores[0], 1.0);
    EXPECT_EQ(is.scores[1], 1.0);
    const auto plan = plan_prune(is, 0.9999, 1.0);
    const auto merged = merge_layers(model, plan, is);
    const tiny::TinyTransformer after(merged);
    const auto ids = tiny::encode_text("what is the dose of aspirin", spec.vocab, spec.max_seq);
    ASSERT_EQ(plan.pruned_indices, std::vector<std::size_t>{1});
    EXPECT_LT(max_abs_diff(before.forward(ids), after.forward(ids)), 1e-4);
    EXPECT_EQ(merged.layers.size(), model.layers.size() - plan.pruned_indices.size());
}

TEST(TinyModel, UnscaledMergeOfIdentityLayerIsExact) {
    tiny::TinyTransformerSpec spec;
    spec.n_layers = 5;
    spec.seed = 8;
    auto base = tiny::init_archive(spec);
    auto model = tiny::perturbed(base, 0.01, 9);
    tiny::make_identity_layer(model, 2);
    model.pre_layers = base.layers;
    const tiny::TinyTransformer before(model);
    const auto is = layer_importance(tiny::capture_activations(before, calib_set(6)));
    ASSERT_EQ(is.scores[2], 1.0);
    PrunePlan plan;
    plan.pruned_indices = {2};
    plan.merge_edges = {{1, 2}};
    plan.sparsity_keep_rate = 1.0;
    const auto merged = merge_layers(model, plan, is, {false});
    const tiny::TinyTransformer after(merged);
    for (const char* text : {"a b c", "what is the dose", "no"}) {
        const auto ids = tiny::encode_text(text, spec.vocab, spec.max_seq);
        EXPECT_LT(max_abs_diff(before.forward(ids), after.forward(ids)), 1e-4) << text;
    }
}

TEST(TinyModel, TapsAreLayerInputsPlusOutput) {
    tiny::TinyTransformerSpec spec;
    spec.n_layers = 3;
    const tiny::TinyTransformer m(tiny::init_archive(spec));
    tiny::Taps taps;
    const auto logits = m.forward(tiny::encode_text("hello there", spec.vocab, spec.max_seq), &taps);
    EXPECT_EQ(taps.size(), 4u);
    EXPECT_EQ(logits.size(), 3 * spec.vocab);
    EXPECT_THROW(m.forward({}), ValidationError);
}

TEST(Archive, SafetensorsRoundTrip) {
    test_support::TempDir tmp;
    tiny::TinyTransformerSpec spec;
    spec.n_layers = 2;
    auto a = tiny::init_archive(spec, "rt");
    const auto m = tensor::write_archive(a, tmp / "m.safetensors");
    EXPECT_EQ(m.stats.at("n_layers"), 2.0);
    const auto bytes = io::read_file(tmp / "m.safetensors");
    EXPECT_EQ(m.config_digest, sha256_hex(bytes));
    std::uint64_t hlen;
    std::memcpy(&hlen, bytes.data(), 8);
    EXPECT_EQ(hlen % 8, 0u);
    const auto back = tensor::read_archive(tmp / "m.safetensors", tmp / "m.safetensors");
    EXPECT_EQ(back.layers, a.layers);
    EXPECT_EQ(back.extra, a.extra);
    EXPECT_EQ(back.meta.model_name, "rt");
    ASSERT_TRUE(back.pre_layers);
    EXPECT_EQ(*back.pre_layers, a.layers);
}

TEST(Archive, HalfPrecisionDecode) {
    std::string h = R"({"model.layers.0.a":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]},)"
                    R"("model.layers.0.b":{"dtype":"F16","shape":[3],"data_offsets":[4,10]}})";
    while (h.size() % 8) h += ' ';
    std::string bytes(8, '\0');
    const std::uint64_t n = h.size();
    std::memcpy(bytes.data(), &n, 8);
    bytes += h;
    for (std::uint16_t v : {0x3F80, 0xC040, 0x3C00, 0xC000, 0x0001}) bytes.append(reinterpret_cast<const char*>(&v), 2);
    const auto nt = tensor::decode_safetensors(bytes);
    EXPECT_EQ(nt.tensors.at("model.layers.0.a").data, (std::vector<float>{1.0f, -3.0f}));
    const auto& b = nt.tensors.at("model.layers.0.b").data;
    EXPECT_EQ(b[0], 1.0f);
    EXPECT_EQ(b[1], -2.0f);
    EXPECT_EQ(b[2], std::ldexp(1.0f, -24));
    const auto a = tensor::archive_from_named(nt);
    EXPECT_EQ(a.layer_prefix, "model.layers.");
    EXPECT_EQ(a.layers.size(), 1u);
    EXPECT_THROW(tensor::decode_safetensors(std::string_view(bytes).substr(0, bytes.size() - 2)), ParseError);
}

TEST(Archive, ByteLengthMismatchAndGapsAreErrors) {
    std::string h = R"({"layers.0.a":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}})";
    std::string bytes(8, '\0');
    const std::uint64_t n = h.size();
    std::memcpy(bytes.data(), &n, 8);
    bytes += h + std::string(8, '\0');
    EXPECT_THROW(tensor::decode_safetensors(bytes), ParseError);
    EXPECT_THROW(tensor::decode_safetensors("abc"), ParseError);

    tensor::NamedTensors nt;
    nt.tensors["layers.0.w"] = Tensor::zeros({2});
    nt.tensors["layers.2.w"] = Tensor::zeros({2});
    try {
        tensor::archive_from_named(nt);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 1 is missing"), std::string::npos);
    }
}

TEST(Trace, BinaryRoundTripAndValidation) {
    test_support::TempDir tmp;
    const auto t = trace_from({{{1, 2, 3}, {4, 5, 6}}, {{7, 8, 9}, {1, 1, 1}}});
    tensor::write_trace(t, tmp / "t.act");
    EXPECT_EQ(tensor::read_trace(tmp / "t.act"), t);
    auto bad = t;
    bad.layers[1].pop_back();
    EXPECT_THROW(bad.validate(), ValidationError);
    const auto enc = tensor::encode_trace(t);
    EXPECT_THROW(tensor::decode_trace(std::string_view(enc).substr(0, enc.size() - 1)), Error);
}

TEST(Reference, PrunedLayerCounts) {
    const auto& r = reference_pruned_layers();
    ASSERT_EQ(r.size(), 6u);
    EXPECT_EQ(r[0].second, std::make_pair(8, 32));
    EXPECT_EQ(r[4].second, std::make_pair(11, 48));
}
