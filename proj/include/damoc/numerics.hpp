// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "damoc/corpus.hpp"
#include "damoc/digest.hpp"
#include "damoc/error.hpp"
#include "damoc/io.hpp"
#include "damoc/rng.hpp"
#include "damoc/text.hpp"

namespace damoc::numerics {

namespace fs = std::filesystem;

inline constexpr double kZeroNorm = 1e-12;
inline constexpr double kNormTolerance = 1e-5;

/// Dense row-major n x d float32 matrix with one identity string per row.
class EmbeddingMatrix {
public:
    EmbeddingMatrix() = default;

    EmbeddingMatrix(std::size_t rows, std::size_t dims, std::vector<float> data, std::vector<std::string> row_ids,
                    bool normalized)
        : rows_(rows), dims_(dims), data_(std::move(data)), row_ids_(std::move(row_ids)), normalized_(normalized) {
        validate();
    }

    static EmbeddingMatrix from_rows(const std::vector<std::vector<float>>& rows, std::vector<std::string> ids,
                                     bool normalize = false) {
        const std::size_t d = rows.empty() ? 0 : rows.front().size();
        std::vector<float> data;
        data.reserve(rows.size() * d);
        for (const auto& r : rows) {
            if (r.size() != d) throw ValidationError("embedding rows have unequal dims");
            data.insert(data.end(), r.begin(), r.end());
        }
        EmbeddingMatrix m(rows.size(), d, std::move(data), std::move(ids), false);
        return normalize ? m.normalized_copy() : m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t dims() const { return dims_; }
    bool normalized() const { return normalized_; }
    const std::vector<std::string>& row_ids() const { return row_ids_; }
    const std::vector<float>& data() const { return data_; }

    std::span<const float> row(std::size_t i) const { return {data_.data() + i * dims_, dims_}; }

    void validate() const {
        if (row_ids_.size() != rows_)
            throw ValidationError("embedding matrix has " + std::to_string(rows_) + " rows but " +
                                  std::to_string(row_ids_.size()) + " row ids");
        if (data_.size() != rows_ * dims_) throw ValidationError("embedding data size does not match rows*dims");
        for (float v : data_)
            if (!std::isfinite(v)) throw ValidationError("embedding matrix contains non-finite values");
        if (normalized_) {
            for (std::size_t i = 0; i < rows_; ++i) {
                double s = 0;
                for (float v : row(i)) s += double(v) * v;
                if (std::abs(std::sqrt(s) - 1.0) > kNormTolerance)
                    throw ValidationError("row " + std::to_string(i) + " ('" + row_ids_[i] +
                                          "') is flagged normalized but has norm " + std::to_string(std::sqrt(s)));
            }
        }
    }

    EmbeddingMatrix normalized_copy() const {
        std::vector<float> out(data_);
        for (std::size_t i = 0; i < rows_; ++i) {
            double s = 0;
            for (float v : row(i)) s += double(v) * v;
            const double n = std::sqrt(s);
            if (n < kZeroNorm)
                throw ValidationError("cannot normalize zero row " + std::to_string(i) + " ('" + row_ids_[i] + "')");
            for (std::size_t j = 0; j < dims_; ++j) out[i * dims_ + j] = static_cast<float>(data_[i * dims_ + j] / n);
        }
        return EmbeddingMatrix(rows_, dims_, std::move(out), row_ids_, true);
    }

    EmbeddingMatrix select_rows(std::span<const std::size_t> idx) const {
        std::vector<float> out;
        std::vector<std::string> ids;
        out.reserve(idx.size() * dims_);
        for (std::size_t i : idx) {
            if (i >= rows_) throw ValidationError("row index out of range");
            auto r = row(i);
            out.insert(out.end(), r.begin(), r.end());
            ids.push_back(row_ids_[i]);
        }
        return EmbeddingMatrix(idx.size(), dims_, std::move(out), std::move(ids), normalized_);
    }

    /// Rows reordered/filtered to match `ids`; throws on unknown ids.
    EmbeddingMatrix select_ids(const std::vector<std::string>& ids) const {
        std::unordered_map<std::string, std::size_t> pos;
        for (std::size_t i = 0; i < rows_; ++i) pos.emplace(row_ids_[i], i);
        std::vector<std::size_t> idx;
        idx.reserve(ids.size());
        for (const auto& id : ids) {
            auto it = pos.find(id);
            if (it == pos.end()) throw ValidationError("no embedding row for id '" + id + "'");
            idx.push_back(it->second);
        }
        return select_rows(idx);
    }

    bool operator==(const EmbeddingMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t dims_ = 0;
    std::vector<float> data_;
    std::vector<std::string> row_ids_;
    bool normalized_ = false;
};

template <class T>
double dot(std::span<const T> a, std::span<const T> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
    return s;
}

template <class T>
double squared_distance(std::span<const T> a, std::span<const T> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        s += d * d;
    }
    return s;
}

/// dot(a,b)/(|a||b|) clamped to [-1,1]. The denominator is sqrt(|a|^2 |b|^2),
/// which makes cosine(x, x) exactly 1 and the result exactly symmetric.
template <class T>
double cosine_sim(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size())
        throw ValidationError("cosine_sim: dims differ (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    const double na = dot(a, a);
    const double nb = dot(b, b);
    if (std::sqrt(na) < kZeroNorm || std::sqrt(nb) < kZeroNorm) throw ValidationError("cosine_sim: zero vector");
    const double c = dot(a, b) / std::sqrt(na * nb);
    return std::clamp(c, -1.0, 1.0);
}

inline double cosine_sim(const std::vector<float>& a, const std::vector<float>& b) {
    return cosine_sim(std::span<const float>(a), std::span<const float>(b));
}
inline double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
    return cosine_sim(std::span<const double>(a), std::span<const double>(b));
}

/// Signed feature hashing of character trigrams (code points, with
/// boundary markers), L2-normalized. Texts with no trigram or whose
/// features cancel map to e_0.
inline std::vector<float> hashed_embed(std::string_view text_in, std::size_t dims, std::uint64_t seed) {
    if (dims < 8) throw ValidationError("hashed_embed: dims must be >= 8");
    std::vector<std::string> cps;
    cps.emplace_back("\x02");
    std::size_t i = 0;
    while (i < text_in.size()) {
        const std::size_t start = i;
        text::next_code_point(text_in, i);
        cps.emplace_back(text_in.substr(start, i - start));
    }
    cps.emplace_back("\x03");
    std::vector<double> acc(dims, 0.0);
    const std::uint64_t basis = 0xcbf29ce484222325ULL ^ mix_seed(seed, 0x7e3);
    for (std::size_t k = 0; k + 3 <= cps.size(); ++k) {
        const std::string gram = cps[k] + cps[k + 1] + cps[k + 2];
        const std::uint64_t h = fnv1a64(gram, basis);
        const std::size_t bucket = static_cast<std::size_t>(h % dims);
        acc[bucket] += (h >> 63) ? -1.0 : 1.0;
    }
    double s = 0;
    for (double v : acc) s += v * v;
    std::vector<float> out(dims, 0.0f);
    if (s == 0.0) {
        out[0] = 1.0f;
        return out;
    }
    const double n = std::sqrt(s);
    for (std::size_t j = 0; j < dims; ++j) out[j] = static_cast<float>(acc[j] / n);
    return out;
}

/// One normalized row per sample, embedding question and answer together.
inline EmbeddingMatrix embed_samples(const corpus::Dataset& ds, std::size_t dims, std::uint64_t seed) {
    std::vector<float> data;
    std::vector<std::string> ids;
    data.reserve(ds.size() * dims);
    for (const auto& s : ds.samples) {
        auto v = hashed_embed(s.question + "\n" + s.answer, dims, seed);
        data.insert(data.end(), v.begin(), v.end());
        ids.push_back(s.id);
    }
    return EmbeddingMatrix(ds.size(), dims, std::move(data), std::move(ids), true);
}

/// Produces one normalized embedding row per token.
class TokenEmbedder {
public:
    virtual ~TokenEmbedder() = default;
    virtual EmbeddingMatrix embed(std::span<const std::string> tokens) const = 0;
};

class HashedTokenEmbedder final : public TokenEmbedder {
public:
    explicit HashedTokenEmbedder(std::size_t dims = 256, std::uint64_t seed = 0) : dims_(dims), seed_(seed) {}

    EmbeddingMatrix embed(std::span<const std::string> tokens) const override {
        std::vector<float> data;
        data.reserve(tokens.size() * dims_);
        std::vector<std::string> ids(tokens.begin(), tokens.end());
        for (const auto& t : tokens) {
            auto v = hashed_embed(t, dims_, seed_);
            data.insert(data.end(), v.begin(), v.end());
        }
        return EmbeddingMatrix(tokens.size(), dims_, std::move(data), std::move(ids), true);
    }

    std::size_t dims() const { return dims_; }

private:
    std::size_t dims_;
    std::uint64_t seed_;
};

/// Looks tokens up in a token-mode embedding table (row ids are token
/// strings); unknown tokens fall back to hashing at the table's width.
class TableTokenEmbedder final : public TokenEmbedder {
public:
    explicit TableTokenEmbedder(EmbeddingMatrix table, std::uint64_t seed = 0)
        : table_(table.normalized() ? std::move(table) : table.normalized_copy()), seed_(seed) {
        for (std::size_t i = 0; i < table_.rows(); ++i) index_.emplace(table_.row_ids()[i], i);
    }

    EmbeddingMatrix embed(std::span<const std::string> tokens) const override {
        std::vector<float> data;
        data.reserve(tokens.size() * table_.dims());
        for (const auto& t : tokens) {
            if (auto it = index_.find(t); it != index_.end()) {
                auto r = table_.row(it->second);
                data.insert(data.end(), r.begin(), r.end());
            } else {
                auto v = hashed_embed(t, table_.dims(), seed_);
                data.insert(data.end(), v.begin(), v.end());
            }
        }
        return EmbeddingMatrix(tokens.size(), table_.dims(), std::move(data),
                               std::vector<std::string>(tokens.begin(), tokens.end()), true);
    }

private:
    EmbeddingMatrix table_;
    std::uint64_t seed_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct ClusterAssignment {
    std::size_t k = 0;
    std::vector<std::size_t> labels;
    std::vector<float> centroids;  // k x d row-major
    std::size_t dims = 0;
    double inertia = 0;
    int iterations = 0;

    std::span<const float> centroid(std::size_t c) const { return {centroids.data() + c * dims, dims}; }
};

namespace detail {

inline std::size_t nearest(std::span<const float> x, const std::vector<double>& cents, std::size_t k,
                           std::size_t d, double& best_dist) {
    std::size_t best = 0;
    best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = double(x[j]) - cents[c * d + j];
            s += diff * diff;
        }
        if (s < best_dist) {
            best_dist = s;
            best = c;
        }
    }
    return best;
}

}  // namespace detail

/// k-means++ seeding followed by Lloyd iterations. Deterministic for fixed
/// inputs; emptied clusters are re-seeded at the point farthest from its
/// centroid (lowest index on ties).
inline ClusterAssignment kmeans(const EmbeddingMatrix& emb, std::size_t k, std::uint64_t seed, int max_iter = 100,
                                double tol = 1e-6) {
    const std::size_t n = emb.rows();
    const std::size_t d = emb.dims();
    if (k == 0) throw ValidationError("kmeans: k must be positive");
    if (k > n)
        throw ValidationError("kmeans: k (" + std::to_string(k) + ") exceeds number of points (" + std::to_string(n) +
                              ")");
    Rng rng(seed);
    std::vector<double> cents(k * d);
    std::vector<bool> chosen(n, false);
    auto set_centroid = [&](std::size_t c, std::size_t p) {
        auto r = emb.row(p);
        for (std::size_t j = 0; j < d; ++j) cents[c * d + j] = r[j];
        chosen[p] = true;
    };
    set_centroid(0, static_cast<std::size_t>(rng.uniform_index(n)));
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0;
        for (std::size_t p = 0; p < n; ++p) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = double(emb.row(p)[j]) - cents[(c - 1) * d + j];
                s += diff * diff;
            }
            d2[p] = std::min(d2[p], s);
            total += d2[p];
        }
        std::size_t pick = n;
        if (total > 0) {
            const double r = rng.uniform01() * total;
            double cum = 0;
            for (std::size_t p = 0; p < n; ++p) {
                if (d2[p] <= 0) continue;
                cum += d2[p];
                if (cum > r) {
                    pick = p;
                    break;
                }
            }
            if (pick == n)
                for (std::size_t p = n; p-- > 0;)
                    if (d2[p] > 0) {
                        pick = p;
                        break;
                    }
        }
        if (pick == n)
            for (std::size_t p = 0; p < n; ++p)
                if (!chosen[p]) {
                    pick = p;
                    break;
                }
        set_centroid(c, pick);
    }

    std::vector<std::size_t> labels(n, 0);
    std::vector<double> dist(n, 0);
    [[maybe_unused]] double prev_inertia = std::numeric_limits<double>::infinity();
    int it = 0;
    for (; it < max_iter; ++it) {
        double inertia = 0;
        for (std::size_t p = 0; p < n; ++p) {
            labels[p] = detail::nearest(emb.row(p), cents, k, d, dist[p]);
            inertia += dist[p];
        }
        assert(inertia <= prev_inertia * (1 + 1e-12) + 1e-12 && "kmeans inertia increased");
        prev_inertia = inertia;

        std::vector<double> next(k * d, 0.0);
        std::vector<std::size_t> count(k, 0);
        for (std::size_t p = 0; p < n; ++p) {
            ++count[labels[p]];
            auto r = emb.row(p);
            for (std::size_t j = 0; j < d; ++j) next[labels[p] * d + j] += r[j];
        }
        std::vector<bool> taken(n, false);
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] > 0) {
                for (std::size_t j = 0; j < d; ++j) next[c * d + j] /= double(count[c]);
                continue;
            }
            std::size_t far = n;
            double far_d = -1;
            for (std::size_t p = 0; p < n; ++p) {
                if (taken[p] || count[labels[p]] <= 1) continue;
                if (dist[p] > far_d) {
                    far_d = dist[p];
                    far = p;
                }
            }
            if (far == n) continue;
            taken[far] = true;
            --count[labels[far]];
            auto r = emb.row(far);
            for (std::size_t j = 0; j < d; ++j) next[c * d + j] = r[j];
        }
        double shift = 0;
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = next[c * d + j] - cents[c * d + j];
                s += diff * diff;
            }
            shift = std::max(shift, std::sqrt(s));
        }
        cents = std::move(next);
        if (shift < tol) {
            ++it;
            break;
        }
    }

    ClusterAssignment out;
    out.k = k;
    out.dims = d;
    out.iterations = it;
    out.centroids.resize(k * d);
    std::vector<double> fcents(k * d);
    for (std::size_t i = 0; i < k * d; ++i) {
        out.centroids[i] = static_cast<float>(cents[i]);
        fcents[i] = out.centroids[i];
    }
    out.labels.resize(n);
    for (std::size_t p = 0; p < n; ++p) {
        double dd;
        out.labels[p] = detail::nearest(emb.row(p), fcents, k, d, dd);
        out.inertia += dd;
    }
    return out;
}

/// Greedy-matching BERTScore F1 over token embeddings: precision is the mean
/// over candidate rows of the best cosine to any reference row, recall the
/// mirror; negative cosines count as 0. No idf weighting or rescaling.
inline double bertscore_f1(const EmbeddingMatrix& cand, const EmbeddingMatrix& ref) {
    if (cand.rows() == 0 || ref.rows() == 0) throw ValidationError("bertscore_f1: empty token matrix");
    if (!cand.normalized() || !ref.normalized()) throw ValidationError("bertscore_f1: matrices must be normalized");
    if (cand.dims() != ref.dims()) throw ValidationError("bertscore_f1: dims differ");
    std::vector<double> cn(cand.rows()), rn(ref.rows());
    for (std::size_t i = 0; i < cand.rows(); ++i) cn[i] = dot(cand.row(i), cand.row(i));
    for (std::size_t j = 0; j < ref.rows(); ++j) rn[j] = dot(ref.row(j), ref.row(j));
    std::vector<double> best_c(cand.rows(), 0.0), best_r(ref.rows(), 0.0);
    for (std::size_t i = 0; i < cand.rows(); ++i) {
        for (std::size_t j = 0; j < ref.rows(); ++j) {
            const double c = std::clamp(dot(cand.row(i), ref.row(j)) / std::sqrt(cn[i] * rn[j]), 0.0, 1.0);
            best_c[i] = std::max(best_c[i], c);
            best_r[j] = std::max(best_r[j], c);
        }
    }
    double p = 0, r = 0;
    for (double v : best_c) p += v;
    for (double v : best_r) r += v;
    p /= double(cand.rows());
    r /= double(ref.rows());
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

// Binary embedding file: "DMCEMB1\0", u32 n, u32 d, u8 normalized, n*d f32,
// u32 byte length, row ids joined by '\n'. All little-endian.

inline constexpr char kEmbeddingMagic[8] = {'D', 'M', 'C', 'E', 'M', 'B', '1', '\0'};

namespace detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t get_u32(std::string_view in, std::size_t& pos, const std::string& what) {
    if (pos + 4 > in.size()) throw ParseError(what + ": truncated");
    std::uint32_t v;
    std::memcpy(&v, in.data() + pos, 4);
    pos += 4;
    return v;
}

}  // namespace detail

inline std::string encode_embeddings(const EmbeddingMatrix& m) {
    std::string out(kEmbeddingMagic, 8);
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.dims()));
    out.push_back(m.normalized() ? '\1' : '\0');
    out.append(reinterpret_cast<const char*>(m.data().data()), m.data().size() * sizeof(float));
    std::string ids;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        if (m.row_ids()[i].find('\n') != std::string::npos) throw ValidationError("row id contains a newline");
        if (i) ids.push_back('\n');
        ids += m.row_ids()[i];
    }
    detail::put_u32(out, static_cast<std::uint32_t>(ids.size()));
    out += ids;
    return out;
}

inline EmbeddingMatrix decode_embeddings(std::string_view in, const std::string& what = "embeddings") {
    if (in.size() < 8 || std::memcmp(in.data(), kEmbeddingMagic, 8) != 0) throw ParseError(what + ": bad magic");
    std::size_t pos = 8;
    const std::uint32_t n = detail::get_u32(in, pos, what);
    const std::uint32_t d = detail::get_u32(in, pos, what);
    if (pos + 1 > in.size()) throw ParseError(what + ": truncated");
    const bool normalized = in[pos++] != 0;
    const std::size_t payload = std::size_t(n) * d * sizeof(float);
    if (pos + payload > in.size()) throw ParseError(what + ": truncated float payload");
    std::vector<float> data(std::size_t(n) * d);
    std::memcpy(data.data(), in.data() + pos, payload);
    pos += payload;
    const std::uint32_t len = detail::get_u32(in, pos, what);
    if (pos + len != in.size()) throw ParseError(what + ": row id block length mismatch");
    std::string_view block = in.substr(pos, len);
    std::vector<std::string> ids;
    if (n > 0) {
        std::size_t start = 0;
        while (true) {
            auto end = block.find('\n', start);
            ids.emplace_back(block.substr(start, end == std::string_view::npos ? block.npos : end - start));
            if (end == std::string_view::npos) break;
            start = end + 1;
        }
    }
    if (ids.size() != n) throw ParseError(what + ": expected " + std::to_string(n) + " row ids");
    return EmbeddingMatrix(n, d, std::move(data), std::move(ids), normalized);
}

inline void write_embeddings(const EmbeddingMatrix& m, const fs::path& path) {
    io::write_file(path, encode_embeddings(m));
}

inline EmbeddingMatrix read_embeddings(const fs::path& path) {
    return decode_embeddings(io::read_file(path), path.string());
}

}  // namespace damoc::numerics
