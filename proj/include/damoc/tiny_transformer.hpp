// SPDX-License-Identifier: Apache-2.0
#pragma once

// A small decoder-only transformer (pre-norm residual blocks, causal
// multi-head attention, SwiGLU feed-forward, RMSNorm) that runs directly on
// a TensorArchive. Used to produce real activation traces and to check that
// pruning an identity layer leaves the logits unchanged.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "damoc/corpus.hpp"
#include "damoc/digest.hpp"
#include "damoc/error.hpp"
#include "damoc/rng.hpp"
#include "damoc/tensor_archive.hpp"
#include "damoc/text.hpp"

namespace damoc::tiny {

using tensor::LayerWeights;
using tensor::Tensor;
using tensor::TensorArchive;

struct TinyTransformerSpec {
    std::size_t n_layers = 8;
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t vocab = 256;
    std::size_t max_seq = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab < 2 || max_seq == 0)
            throw ValidationError("tiny transformer dimensions must be positive (vocab >= 2)");
        if (d_model % n_heads) throw ValidationError("d_model must be divisible by n_heads");
    }
};

inline constexpr const char* kLayerTensorNames[] = {"attention_norm", "wq", "wk", "wv", "wo",
                                                  "ffn_norm", "w_gate", "w_up", "w_down"};

namespace detail {

inline Tensor gaussian(std::vector<std::size_t> shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.normal() * stddev);
    return t;
}

inline Tensor ones(std::size_t n) { return Tensor({n}, std::vector<float>(n, 1.0f)); }

}  // namespace detail

/// Seeded random initialization in archive form.
inline TensorArchive init_archive(const TinyTransformerSpec& spec, const std::string& name = "tiny-transformer") {
    spec.validate();
    Rng rng(mix_seed(spec.seed, 0x7141));
    const std::size_t d = spec.d_model, f = spec.d_ff;
    TensorArchive a;
    a.meta = {name, spec.n_layers, d};
    a.extra["tok_embeddings.weight"] = detail::gaussian({spec.vocab, d}, 1.0, rng);
    for (std::size_t i = 0; i < spec.n_layers; ++i) {
        LayerWeights lw;
        lw.index = i;
        const double sd = 1.0 / std::sqrt(double(d));
        lw.tensors["attention_norm"] = detail::ones(d);
        lw.tensors["wq"] = detail::gaussian({d, d}, sd, rng);
        lw.tensors["wk"] = detail::gaussian({d, d}, sd, rng);
        lw.tensors["wv"] = detail::gaussian({d, d}, sd, rng);
        lw.tensors["wo"] = detail::gaussian({d, d}, sd, rng);
        lw.tensors["ffn_norm"] = detail::ones(d);
        lw.tensors["w_gate"] = detail::gaussian({f, d}, sd, rng);
        lw.tensors["w_up"] = detail::gaussian({f, d}, sd, rng);
        lw.tensors["w_down"] = detail::gaussian({d, f}, 1.0 / std::sqrt(double(f)), rng);
        a.layers.push_back(std::move(lw));
    }
    a.extra["norm.weight"] = detail::ones(d);
    a.extra["output.weight"] = detail::gaussian({spec.vocab, d}, 1.0 / std::sqrt(double(d)), rng);
    return a;
}

/// A "fine-tuned" copy: every layer tensor plus seeded Gaussian noise.
inline TensorArchive perturbed(const TensorArchive& base, double stddev, std::uint64_t seed) {
    TensorArchive a = base;
    Rng rng(mix_seed(seed, 0x9e7));
    for (auto& lw : a.layers)
        for (auto& [_, t] : lw.tensors)
            for (auto& v : t.data) v += static_cast<float>(rng.normal() * stddev);
    a.pre_layers.reset();
    return a;
}

/// Zeroes a layer's residual-branch outputs so the block is an exact identity.
inline void make_identity_layer(TensorArchive& a, std::size_t layer) {
    for (const char* name : {"wo", "w_down"})
        for (auto& v : a.layers.at(layer).tensors.at(name).data) v = 0.0f;
}

/// Token ids for a text: BOS (0) then hashed reference tokens in [1, vocab).
inline std::vector<std::uint32_t> encode_text(std::string_view s, std::size_t vocab, std::size_t max_seq) {
    std::vector<std::uint32_t> ids = {0};
    for (const auto& t : text::tokenize(s)) {
        if (ids.size() >= max_seq) break;
        ids.push_back(static_cast<std::uint32_t>(1 + fnv1a64(text::to_lower_ascii(t)) % (vocab - 1)));
    }
    return ids;
}

/// Mean-pooled layer inputs for one sequence: n_layers + 1 vectors of width d.
using Taps = std::vector<std::vector<float>>;

class TinyTransformer {
public:
    explicit TinyTransformer(const TensorArchive& a, std::size_t n_heads = 4) : a_(a), n_heads_(n_heads) {
        a_.validate();
        const auto& emb = tensor_at(a_.extra, "tok_embeddings.weight");
        if (emb.shape.size() != 2) throw ValidationError("tok_embeddings.weight must be 2-D");
        vocab_ = emb.shape[0];
        d_ = emb.shape[1];
        if (n_heads_ == 0 || d_ % n_heads_) throw ValidationError("d_model not divisible by n_heads");
        const auto& out = tensor_at(a_.extra, "output.weight");
        if (out.shape != std::vector<std::size_t>{vocab_, d_}) throw ValidationError("output.weight shape mismatch");
        if (tensor_at(a_.extra, "norm.weight").shape != std::vector<std::size_t>{d_})
            throw ValidationError("norm.weight shape mismatch");
        const auto& l0 = a_.layers[0].tensors;
        for (const char* name : kLayerTensorNames)
            if (!l0.count(name)) throw ValidationError(std::string("layer tensor '") + name + "' missing");
        ff_ = l0.at("w_up").shape.at(0);
    }

    std::size_t vocab() const { return vocab_; }
    std::size_t d_model() const { return d_; }
    std::size_t n_layers() const { return a_.layers.size(); }

    /// Logits [seq x vocab], row-major. When `taps` is given it receives the
    /// mean-pooled hidden state entering each layer plus the final output.
    std::vector<float> forward(const std::vector<std::uint32_t>& ids, Taps* taps = nullptr) const {
        const std::size_t n = ids.size();
        if (n == 0) throw ValidationError("empty token sequence");
        const auto& emb = a_.extra.at("tok_embeddings.weight");
        std::vector<float> h(n * d_);
        for (std::size_t p = 0; p < n; ++p) {
            if (ids[p] >= vocab_) throw ValidationError("token id out of vocabulary");
            std::copy_n(emb.data.begin() + std::ptrdiff_t(ids[p] * d_), d_, h.begin() + std::ptrdiff_t(p * d_));
        }
        if (taps) taps->clear();
        for (const auto& lw : a_.layers) {
            if (taps) taps->push_back(pool(h, n));
            block(lw, h, n);
        }
        if (taps) taps->push_back(pool(h, n));
        std::vector<float> x(n * d_);
        rmsnorm(h, a_.extra.at("norm.weight"), x, n);
        std::vector<float> logits(n * vocab_);
        linear(a_.extra.at("output.weight"), x, logits, n);
        return logits;
    }

private:
    static const Tensor& tensor_at(const std::map<std::string, Tensor>& m, const std::string& k) {
        auto it = m.find(k);
        if (it == m.end()) throw ValidationError("archive lacks tensor '" + k + "'");
        return it->second;
    }

    std::vector<float> pool(const std::vector<float>& h, std::size_t n) const {
        std::vector<float> out(d_);
        for (std::size_t j = 0; j < d_; ++j) {
            double s = 0;
            for (std::size_t p = 0; p < n; ++p) s += h[p * d_ + j];
            out[j] = static_cast<float>(s / double(n));
        }
        return out;
    }

    void rmsnorm(const std::vector<float>& x, const Tensor& g, std::vector<float>& out, std::size_t n) const {
        for (std::size_t p = 0; p < n; ++p) {
            double ss = 0;
            for (std::size_t j = 0; j < d_; ++j) ss += double(x[p * d_ + j]) * x[p * d_ + j];
            const double inv = 1.0 / std::sqrt(ss / double(d_) + 1e-6);
            for (std::size_t j = 0; j < d_; ++j) out[p * d_ + j] = static_cast<float>(x[p * d_ + j] * inv * g.data[j]);
        }
    }

    // out[p] = W x[p] for W of shape [rows x cols].
    static void linear(const Tensor& w, const std::vector<float>& x, std::vector<float>& out, std::size_t n) {
        const std::size_t r = w.shape[0], c = w.shape[1];
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t i = 0; i < r; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < c; ++j) s += double(w.data[i * c + j]) * x[p * c + j];
                out[p * r + i] = static_cast<float>(s);
            }
    }

    void block(const LayerWeights& lw, std::vector<float>& h, std::size_t n) const {
        const auto& t = lw.tensors;
        std::vector<float> x(n * d_), q(n * d_), k(n * d_), v(n * d_), att(n * d_), o(n * d_);
        rmsnorm(h, t.at("attention_norm"), x, n);
        linear(t.at("wq"), x, q, n);
        linear(t.at("wk"), x, k, n);
        linear(t.at("wv"), x, v, n);
        const std::size_t hd = d_ / n_heads_;
        const double scale = 1.0 / std::sqrt(double(hd));
        std::vector<double> w(n);
        for (std::size_t head = 0; head < n_heads_; ++head) {
            const std::size_t off = head * hd;
            for (std::size_t p = 0; p < n; ++p) {
                double mx = -INFINITY;
                for (std::size_t s = 0; s <= p; ++s) {
                    double dot = 0;
                    for (std::size_t j = 0; j < hd; ++j) dot += double(q[p * d_ + off + j]) * k[s * d_ + off + j];
                    w[s] = dot * scale;
                    mx = std::max(mx, w[s]);
                }
                double z = 0;
                for (std::size_t s = 0; s <= p; ++s) z += (w[s] = std::exp(w[s] - mx));
                for (std::size_t j = 0; j < hd; ++j) {
                    double acc = 0;
                    for (std::size_t s = 0; s <= p; ++s) acc += w[s] * v[s * d_ + off + j];
                    att[p * d_ + off + j] = static_cast<float>(acc / z);
                }
            }
        }
        linear(t.at("wo"), att, o, n);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += o[i];

        std::vector<float> g(n * ff_), u(n * ff_), dn(n * d_);
        rmsnorm(h, t.at("ffn_norm"), x, n);
        linear(t.at("w_gate"), x, g, n);
        linear(t.at("w_up"), x, u, n);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double a = g[i];
            g[i] = static_cast<float>(a / (1.0 + std::exp(-a)) * u[i]);
        }
        linear(t.at("w_down"), g, dn, n);
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += dn[i];
    }

    TensorArchive a_;
    std::size_t n_heads_;
    std::size_t vocab_ = 0, d_ = 0, ff_ = 0;
};

/// One pooled row per calibration sample for every layer input and the
/// final output.
inline tensor::ActivationTrace capture_activations(const TinyTransformer& model, const corpus::Dataset& calib,
                                                   std::size_t max_seq = 32) {
    if (calib.size() == 0) throw ValidationError("calibration set is empty");
    tensor::ActivationTrace tr;
    tr.rows = calib.size();
    tr.dims = model.d_model();
    tr.layers.assign(model.n_layers() + 1, std::vector<float>(tr.rows * tr.dims));
    Taps taps;
    for (std::size_t r = 0; r < calib.size(); ++r) {
        const auto& s = calib.samples[r];
        model.forward(encode_text(s.question + " " + s.answer, model.vocab(), max_seq), &taps);
        for (std::size_t l = 0; l < taps.size(); ++l)
            std::copy(taps[l].begin(), taps[l].end(), tr.layers[l].begin() + std::ptrdiff_t(r * tr.dims));
    }
    return tr;
}

}  // namespace damoc::tiny
