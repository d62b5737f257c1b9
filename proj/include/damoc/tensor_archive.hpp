// SPDX-License-Identifier: Apache-2.0
#pragma once

// Layered tensor archives in the safetensors format, and DMCACT1
// activation traces.
//
// safetensors: u64 little-endian header length N, N bytes of JSON header
// {name: {dtype, shape, data_offsets: [begin, end]}, "__metadata__": {...}},
// then the payload. Offsets are relative to the payload start.

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "damoc/corpus.hpp"
#include "damoc/digest.hpp"
#include "damoc/error.hpp"
#include "damoc/io.hpp"

namespace damoc::tensor {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel() != data.size()) throw ValidationError("tensor data does not match its shape");
    }
    static Tensor zeros(std::vector<std::size_t> s) {
        std::size_t n = 1;
        for (auto v : s) n *= v;
        return Tensor(std::move(s), std::vector<float>(n, 0.0f));
    }

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto v : shape) n *= v;
        return n;
    }
    /// Row-major element (r, c) of a 2-D tensor.
    float at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }
    bool operator==(const Tensor&) const = default;
};

struct LayerWeights {
    std::size_t index = 0;
    std::map<std::string, Tensor> tensors;
    bool operator==(const LayerWeights&) const = default;
};

struct ArchiveMeta {
    std::string model_name;
    std::size_t n_layers = 0;
    std::size_t hidden_dim = 0;
    bool operator==(const ArchiveMeta&) const = default;
};

struct TensorArchive {
    ArchiveMeta meta;
    std::vector<LayerWeights> layers;
    std::optional<std::vector<LayerWeights>> pre_layers;
    /// Tensors outside the layer stack (embeddings, final norm, head).
    std::map<std::string, Tensor> extra;
    /// Name prefix before the layer index, e.g. "layers." or "model.layers.".
    std::string layer_prefix = "layers.";

    /// Checks the stack is homogeneous, finite and consistent with pre_layers.
    void validate() const {
        if (layers.empty()) throw ValidationError("archive has no layers");
        if (meta.n_layers != layers.size())
            throw ValidationError("meta.n_layers=" + std::to_string(meta.n_layers) + " but archive has " +
                                  std::to_string(layers.size()) + " layers");
        auto check_stack = [&](const std::vector<LayerWeights>& stack, const char* what) {
            for (std::size_t i = 0; i < stack.size(); ++i) {
                if (stack[i].index != i) throw ValidationError(std::string(what) + " layer " + std::to_string(i) + " has index " + std::to_string(stack[i].index));
                if (stack[i].tensors.size() != layers[0].tensors.size())
                    throw ValidationError(std::string(what) + " layer " + std::to_string(i) + " tensor set differs from layer 0");
                for (const auto& [name, t] : layers[0].tensors) {
                    auto it = stack[i].tensors.find(name);
                    if (it == stack[i].tensors.end())
                        throw ValidationError(std::string(what) + " layer " + std::to_string(i) + " lacks tensor '" + name + "'");
                    if (it->second.shape != t.shape)
                        throw ValidationError(std::string(what) + " layer " + std::to_string(i) + " tensor '" + name + "' shape differs from layer 0");
                    for (float v : it->second.data)
                        if (!std::isfinite(v))
                            throw ValidationError(std::string(what) + " layer " + std::to_string(i) + " tensor '" + name + "' is not finite");
                }
            }
        };
        check_stack(layers, "model");
        if (pre_layers) {
            if (pre_layers->size() != layers.size())
                throw ValidationError("pre archive has " + std::to_string(pre_layers->size()) + " layers, model has " +
                                      std::to_string(layers.size()));
            check_stack(*pre_layers, "pre");
        }
    }
};

// ---- dtype conversion ----

inline float bf16_to_f32(std::uint16_t h) { return std::bit_cast<float>(std::uint32_t(h) << 16); }

inline float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = std::uint32_t(h & 0x8000) << 16;
    std::uint32_t exp = (h >> 10) & 0x1f;
    std::uint32_t mant = h & 0x3ff;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            exp = 127 - 15 + 1;
            while (!(mant & 0x400)) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ff;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

// ---- safetensors ----

struct NamedTensors {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

inline std::string encode_safetensors(const NamedTensors& nt) {
    nlohmann::json header = nlohmann::json::object();
    std::size_t off = 0;
    for (const auto& [name, t] : nt.tensors) {
        if (name == "__metadata__") throw ValidationError("tensor name __metadata__ is reserved");
        const std::size_t bytes = t.data.size() * sizeof(float);
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {off, off + bytes}}};
        off += bytes;
    }
    if (!nt.metadata.empty()) header["__metadata__"] = nt.metadata;
    std::string h = header.dump();
    while (h.size() % 8) h.push_back(' ');
    std::string out;
    const std::uint64_t n = h.size();
    out.append(reinterpret_cast<const char*>(&n), 8);
    out += h;
    for (const auto& [name, t] : nt.tensors)
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    return out;
}

inline NamedTensors decode_safetensors(std::string_view in, const std::string& what = "archive") {
    if (in.size() < 8) throw ParseError(what + ": file too short for a safetensors header");
    std::uint64_t n;
    std::memcpy(&n, in.data(), 8);
    if (n > in.size() - 8) throw ParseError(what + ": header length " + std::to_string(n) + " exceeds file size");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(in.substr(8, n));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(what + ": malformed header: " + e.what());
    }
    if (!header.is_object()) throw ParseError(what + ": header is not an object");
    const std::string_view payload = in.substr(8 + n);
    NamedTensors nt;
    for (const auto& [name, spec] : header.items()) {
        if (name == "__metadata__") {
            for (const auto& [k, v] : spec.items())
                nt.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
            continue;
        }
        std::string dtype;
        std::vector<std::size_t> shape;
        std::vector<std::size_t> offs;
        try {
            dtype = spec.at("dtype").get<std::string>();
            shape = spec.at("shape").get<std::vector<std::size_t>>();
            offs = spec.at("data_offsets").get<std::vector<std::size_t>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(what + ": tensor '" + name + "': " + e.what());
        }
        if (offs.size() != 2 || offs[1] < offs[0]) throw ParseError(what + ": tensor '" + name + "' has bad data_offsets");
        std::size_t numel = 1;
        for (auto s : shape) numel *= s;
        const std::size_t width = dtype == "F32" ? 4 : (dtype == "F16" || dtype == "BF16") ? 2 : 0;
        if (width == 0) throw ParseError(what + ": tensor '" + name + "' has unsupported dtype " + dtype);
        if (offs[1] - offs[0] != numel * width)
            throw ParseError(what + ": tensor '" + name + "' byte length " + std::to_string(offs[1] - offs[0]) +
                             " does not match shape (" + std::to_string(numel * width) + " bytes expected)");
        if (offs[1] > payload.size())
            throw ParseError(what + ": tensor '" + name + "' byte range ends at " + std::to_string(offs[1]) +
                             " but payload has " + std::to_string(payload.size()) + " bytes (truncated)");
        std::vector<float> data(numel);
        const char* src = payload.data() + offs[0];
        if (width == 4) {
            std::memcpy(data.data(), src, numel * 4);
        } else {
            for (std::size_t i = 0; i < numel; ++i) {
                std::uint16_t h;
                std::memcpy(&h, src + 2 * i, 2);
                data[i] = dtype == "BF16" ? bf16_to_f32(h) : f16_to_f32(h);
            }
        }
        nt.tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
    return nt;
}

/// Splits "<prefix>layers.<i>.<rest>" into (prefix + "layers.", i, rest).
inline bool split_layer_name(const std::string& name, std::string& prefix, std::size_t& index, std::string& rest) {
    std::size_t pos = 0;
    while ((pos = name.find("layers.", pos)) != std::string::npos) {
        if (pos == 0 || name[pos - 1] == '.') {
            std::size_t p = pos + 7;
            std::size_t e = p;
            while (e < name.size() && std::isdigit(static_cast<unsigned char>(name[e]))) ++e;
            if (e > p && e < name.size() && name[e] == '.' && e + 1 < name.size()) {
                prefix = name.substr(0, pos + 7);
                index = std::stoul(name.substr(p, e - p));
                rest = name.substr(e + 1);
                return true;
            }
        }
        pos += 7;
    }
    return false;
}

/// Groups named tensors into a layer stack; other tensors go to `extra`.
inline TensorArchive archive_from_named(const NamedTensors& nt, const std::string& what = "archive") {
    TensorArchive a;
    std::map<std::size_t, LayerWeights> by_index;
    std::optional<std::string> prefix;
    for (const auto& [name, t] : nt.tensors) {
        std::string pre, rest;
        std::size_t idx = 0;
        if (split_layer_name(name, pre, idx, rest)) {
            if (prefix && *prefix != pre)
                throw ValidationError(what + ": mixed layer prefixes '" + *prefix + "' and '" + pre + "'");
            prefix = pre;
            by_index[idx].index = idx;
            by_index[idx].tensors.emplace(rest, t);
        } else {
            a.extra.emplace(name, t);
        }
    }
    if (prefix) a.layer_prefix = *prefix;
    std::size_t expect = 0;
    for (auto& [idx, lw] : by_index) {
        if (idx != expect)
            throw ValidationError(what + ": layer indices are not contiguous: layer " + std::to_string(expect) +
                                  " is missing (next present is " + std::to_string(idx) + ")");
        a.layers.push_back(std::move(lw));
        ++expect;
    }
    auto md = [&](const char* k) -> std::optional<std::string> {
        auto it = nt.metadata.find(k);
        return it == nt.metadata.end() ? std::nullopt : std::optional(it->second);
    };
    a.meta.model_name = md("model_name").value_or("");
    a.meta.n_layers = a.layers.size();
    if (auto nl = md("n_layers"); nl && std::stoul(*nl) != a.layers.size())
        throw ValidationError(what + ": metadata n_layers=" + *nl + " but " + std::to_string(a.layers.size()) +
                              " layers are present");
    if (auto hd = md("hidden_dim")) a.meta.hidden_dim = std::stoul(*hd);
    return a;
}

inline NamedTensors named_from_archive(const TensorArchive& a) {
    NamedTensors nt;
    for (const auto& lw : a.layers)
        for (const auto& [rest, t] : lw.tensors) nt.tensors.emplace(a.layer_prefix + std::to_string(lw.index) + "." + rest, t);
    for (const auto& [name, t] : a.extra) nt.tensors.emplace(name, t);
    nt.metadata = {{"model_name", a.meta.model_name},
                   {"n_layers", std::to_string(a.meta.n_layers)},
                   {"hidden_dim", std::to_string(a.meta.hidden_dim)}};
    return nt;
}

/// Reads a model archive, optionally with its pretrained counterpart.
inline TensorArchive read_archive(const fs::path& path, const std::optional<fs::path>& pre_path = std::nullopt) {
    auto a = archive_from_named(decode_safetensors(io::read_file(path), path.string()), path.string());
    if (pre_path) {
        auto pre = archive_from_named(decode_safetensors(io::read_file(*pre_path), pre_path->string()), pre_path->string());
        a.pre_layers = std::move(pre.layers);
    }
    a.validate();
    return a;
}

/// Writes the model layers and extra tensors (pre_layers are not written).
inline corpus::Manifest write_archive(const TensorArchive& a, const fs::path& path) {
    a.validate();
    const std::string bytes = encode_safetensors(named_from_archive(a));
    io::write_file(path, bytes);
    corpus::Manifest m;
    m.stage = corpus::Stage::prune;
    m.config_digest = sha256_hex(bytes);
    m.created_at = corpus::now_iso8601();
    std::size_t params = 0;
    for (const auto& lw : a.layers)
        for (const auto& [_, t] : lw.tensors) params += t.numel();
    for (const auto& [_, t] : a.extra) params += t.numel();
    m.stats = {{"n_layers", double(a.layers.size())}, {"n_params", double(params)}, {"bytes", double(bytes.size())}};
    return m;
}

// ---- activation traces ----

/// X_0..X_L, each M x d row-major; X_i is the input of layer i and X_L the
/// final output.
struct ActivationTrace {
    std::size_t rows = 0;  // M
    std::size_t dims = 0;  // d
    std::vector<std::vector<float>> layers;

    std::size_t n_matrices() const { return layers.size(); }
    std::span<const float> row(std::size_t layer, std::size_t j) const { return {layers[layer].data() + j * dims, dims}; }

    void validate() const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].size() != rows * dims)
                throw ValidationError("trace matrix " + std::to_string(i) + " is not " + std::to_string(rows) + "x" +
                                      std::to_string(dims));
            for (float v : layers[i])
                if (!std::isfinite(v)) throw ValidationError("trace matrix " + std::to_string(i) + " is not finite");
        }
    }
    bool operator==(const ActivationTrace&) const = default;
};

inline constexpr char kTraceMagic[8] = {'D', 'M', 'C', 'A', 'C', 'T', '1', '\0'};

inline std::string encode_trace(const ActivationTrace& t) {
    t.validate();
    std::string out(kTraceMagic, 8);
    auto put = [&](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
    put(static_cast<std::uint32_t>(t.layers.size()));
    put(static_cast<std::uint32_t>(t.rows));
    put(static_cast<std::uint32_t>(t.dims));
    for (const auto& m : t.layers) out.append(reinterpret_cast<const char*>(m.data()), m.size() * sizeof(float));
    return out;
}

inline ActivationTrace decode_trace(std::string_view in, const std::string& what = "trace") {
    if (in.size() < 20 || std::memcmp(in.data(), kTraceMagic, 8) != 0) throw ParseError(what + ": bad magic");
    std::uint32_t hdr[3];
    std::memcpy(hdr, in.data() + 8, 12);
    ActivationTrace t;
    t.rows = hdr[1];
    t.dims = hdr[2];
    const std::size_t per = t.rows * t.dims;
    const std::size_t expect = 20 + std::size_t(hdr[0]) * per * sizeof(float);
    if (in.size() != expect)
        throw ParseError(what + ": payload is " + std::to_string(in.size()) + " bytes, header implies " +
                         std::to_string(expect));
    for (std::uint32_t i = 0; i < hdr[0]; ++i) {
        std::vector<float> m(per);
        std::memcpy(m.data(), in.data() + 20 + i * per * sizeof(float), per * sizeof(float));
        t.layers.push_back(std::move(m));
    }
    t.validate();
    return t;
}

inline void write_trace(const ActivationTrace& t, const fs::path& p) { io::write_file(p, encode_trace(t)); }
inline ActivationTrace read_trace(const fs::path& p) { return decode_trace(io::read_file(p), p.string()); }

}  // namespace damoc::tensor
