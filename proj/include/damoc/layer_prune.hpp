// SPDX-License-Identifier: Apache-2.0
#pragma once

// Activation-similarity layer pruning: score each layer by the cosine of its
// input and output activations, drop layers above a similarity threshold and
// fold their sparsified task vectors into the nearest surviving predecessor.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "damoc/error.hpp"
#include "damoc/numerics.hpp"
#include "damoc/tensor_archive.hpp"

namespace damoc::prune {

using tensor::ActivationTrace;
using tensor::LayerWeights;
using tensor::Tensor;
using tensor::TensorArchive;

struct LayerImportance {
    std::vector<double> scores;
    bool normalized = true;
};

/// IS_i = (1/M) sum_j cos(X_i[j], X_{i+1}[j]); the raw sum when normalize
/// is false.
inline LayerImportance layer_importance(const ActivationTrace& trace, bool normalize = true) {
    trace.validate();
    if (trace.n_matrices() < 2) throw ValidationError("layer_importance: trace needs at least 2 matrices");
    if (trace.rows == 0) throw ValidationError("layer_importance: trace has no rows");
    LayerImportance out;
    out.normalized = normalize;
    for (std::size_t i = 0; i + 1 < trace.n_matrices(); ++i) {
        double sum = 0;
        for (std::size_t j = 0; j < trace.rows; ++j) {
            const auto a = trace.row(i, j);
            const auto b = trace.row(i + 1, j);
            const bool za = numerics::dot(a, a) <= numerics::kZeroNorm;
            if (za || numerics::dot(b, b) <= numerics::kZeroNorm)
                throw ValidationError("layer_importance: zero-norm row " + std::to_string(j) + " in activation matrix " +
                                      std::to_string(za ? i : i + 1));
            sum += numerics::cosine_sim(a, b);
        }
        out.scores.push_back(normalize ? sum / double(trace.rows) : sum);
    }
    return out;
}

struct MergeEdge {
    std::size_t target = 0;
    std::size_t source = 0;
    bool operator==(const MergeEdge&) const = default;
};

struct PrunePlan {
    std::vector<std::size_t> pruned_indices;
    double sim_threshold = 0.85;
    std::vector<MergeEdge> merge_edges;
    double sparsity_keep_rate = 0.20;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["pruned_indices"] = pruned_indices;
        j["sim_threshold"] = sim_threshold;
        auto edges = nlohmann::ordered_json::array();
        for (const auto& e : merge_edges) edges.push_back({e.target, e.source});
        j["merge_edges"] = edges;
        j["sparsity_keep_rate"] = sparsity_keep_rate;
        return j;
    }
};

/// Prunes every layer i >= 1 with IS_i above the threshold; each merges into
/// its nearest unpruned predecessor.
inline PrunePlan plan_prune(const LayerImportance& is, double sim_threshold = 0.85, double keep_rate = 0.20) {
    if (!is.normalized) throw ValidationError("plan_prune needs normalized importance scores");
    if (is.scores.empty()) throw ValidationError("plan_prune: no layers");
    if (!(keep_rate > 0 && keep_rate <= 1)) throw ValidationError("keep_rate must be in (0, 1]");
    PrunePlan p;
    p.sim_threshold = sim_threshold;
    p.sparsity_keep_rate = keep_rate;
    if (is.scores.size() > 1 &&
        std::all_of(is.scores.begin(), is.scores.end(), [&](double s) { return s > sim_threshold; }))
        throw ValidationError("plan_prune: every layer scores above " + std::to_string(sim_threshold) +
                              "; refusing to empty the model");
    std::size_t target = 0;
    for (std::size_t i = 1; i < is.scores.size(); ++i) {
        if (is.scores[i] > sim_threshold) {
            p.pruned_indices.push_back(i);
            p.merge_edges.push_back({target, i});
        } else {
            target = i;
        }
    }
    return p;
}

/// Keeps the ceil(keep_rate * numel) largest magnitudes (ties to the lower
/// flat index) and zeroes the rest.
inline Tensor sparsify(const Tensor& t, double keep_rate = 0.20) {
    if (t.data.empty()) throw ValidationError("sparsify: empty tensor");
    if (!(keep_rate > 0 && keep_rate <= 1)) throw ValidationError("sparsify: keep_rate must be in (0, 1]");
    const std::size_t n = t.data.size();
    const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(keep_rate * double(n) - 1e-9)));
    if (keep == n) return t;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(t.data[a]) > std::abs(t.data[b]); });
    Tensor out = Tensor::zeros(t.shape);
    for (std::size_t r = 0; r < keep; ++r) out.data[idx[r]] = t.data[idx[r]];
    return out;
}

struct MergeOptions {
    /// Scale each merge target by (1 - IS_t) before adding sources, as the
    /// merge formula is written. False leaves targets unscaled.
    bool scale_target = true;
};

/// Applies the plan: W_t <- (1 - IS_t) W_t + sum_p (1 - IS_p) Sparse(W_p - Wpre_p)
/// for each target t and its sources p, then drops the pruned layers.
/// Non-layer tensors are copied unchanged.
inline TensorArchive merge_layers(const TensorArchive& arch, const PrunePlan& plan, const LayerImportance& is,
                                  const MergeOptions& opt = {}) {
    arch.validate();
    if (!arch.pre_layers) throw ValidationError("merge_layers: pre-trained layers are required for merging");
    const std::size_t L = arch.layers.size();
    if (is.scores.size() != L)
        throw ValidationError("merge_layers: " + std::to_string(is.scores.size()) + " importance scores for " +
                              std::to_string(L) + " layers");
    std::vector<bool> pruned(L, false);
    for (std::size_t p : plan.pruned_indices) {
        if (p == 0 || p >= L) throw ValidationError("merge_layers: invalid pruned index " + std::to_string(p));
        pruned[p] = true;
    }
    std::vector<std::vector<std::size_t>> sources(L);
    for (const auto& e : plan.merge_edges) {
        if (e.target >= L || e.source >= L || pruned[e.target] || !pruned[e.source] || e.target >= e.source)
            throw ValidationError("merge_layers: invalid merge edge (" + std::to_string(e.target) + " <- " +
                                  std::to_string(e.source) + ")");
        sources[e.target].push_back(e.source);
    }
    std::size_t covered = 0;
    for (const auto& s : sources) covered += s.size();
    if (covered != plan.pruned_indices.size())
        throw ValidationError("merge_layers: every pruned layer needs exactly one merge edge");

    TensorArchive out;
    out.meta = arch.meta;
    out.extra = arch.extra;
    out.layer_prefix = arch.layer_prefix;
    std::vector<LayerWeights> kept_pre;
    for (std::size_t t = 0; t < L; ++t) {
        if (pruned[t]) continue;
        LayerWeights lw = arch.layers[t];
        if (!sources[t].empty()) {
            for (auto& [name, w] : lw.tensors) {
                std::vector<double> acc(w.data.size());
                const double ct = opt.scale_target ? 1.0 - is.scores[t] : 1.0;
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] = ct * w.data[k];
                for (std::size_t p : sources[t]) {
                    const Tensor& wp = arch.layers[p].tensors.at(name);
                    const Tensor& wpre = (*arch.pre_layers)[p].tensors.at(name);
                    Tensor delta = wp;
                    for (std::size_t k = 0; k < delta.data.size(); ++k) delta.data[k] = wp.data[k] - wpre.data[k];
                    const Tensor sp = sparsify(delta, plan.sparsity_keep_rate);
                    const double cp = 1.0 - is.scores[p];
                    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += cp * sp.data[k];
                }
                for (std::size_t k = 0; k < acc.size(); ++k) w.data[k] = static_cast<float>(acc[k]);
            }
        }
        lw.index = out.layers.size();
        out.layers.push_back(std::move(lw));
        LayerWeights pre = (*arch.pre_layers)[t];
        pre.index = kept_pre.size();
        kept_pre.push_back(std::move(pre));
    }
    out.pre_layers = std::move(kept_pre);
    out.meta.n_layers = out.layers.size();
    out.validate();
    return out;
}

/// Reference pruned-layer counts at threshold 0.85 on full-size models.
inline const std::vector<std::pair<std::string, std::pair<int, int>>>& reference_pruned_layers() {
    static const std::vector<std::pair<std::string, std::pair<int, int>>> r = {
        {"Llama3.1", {8, 32}}, {"Qwen2.5", {7, 28}},  {"Gemma2", {10, 42}},
        {"GLM4", {10, 40}},    {"Yi1.5", {11, 48}},   {"Internlm2.5", {7, 28}}};
    return r;
}

}  // namespace damoc::prune
