// SPDX-License-Identifier: Apache-2.0
#pragma once

// Twelve subset-selection methods in three families:
//   distribution-aware  dq, graphcut, kcenter, random   (embeddings only)
//   quality-aware       alphagasus, lma, superfiltering, less (score channels only)
//   hybrid              mods, cherry, deita, car        (both)
// Every method returns exactly k unique ids; all ties go to the lowest
// sample index.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "damoc/corpus.hpp"
#include "damoc/error.hpp"
#include "damoc/numerics.hpp"
#include "damoc/rng.hpp"

namespace damoc::filter {

using corpus::Dataset;
using corpus::ScoreChannel;
using numerics::EmbeddingMatrix;

enum class Method { dq, graphcut, kcenter, random, alphagasus, lma, superfiltering, less, mods, cherry, deita, car };
enum class Family { distribution, quality, hybrid };

inline constexpr Method kAllMethods[] = {Method::dq,         Method::graphcut, Method::kcenter,        Method::random,
                                         Method::alphagasus, Method::lma,      Method::superfiltering, Method::less,
                                         Method::mods,       Method::cherry,   Method::deita,          Method::car};

inline std::string_view to_string(Method m) {
    switch (m) {
        case Method::dq: return "dq";
        case Method::graphcut: return "graphcut";
        case Method::kcenter: return "kcenter";
        case Method::random: return "random";
        case Method::alphagasus: return "alphagasus";
        case Method::lma: return "lma";
        case Method::superfiltering: return "superfiltering";
        case Method::less: return "less";
        case Method::mods: return "mods";
        case Method::cherry: return "cherry";
        case Method::deita: return "deita";
        case Method::car: return "car";
    }
    return "?";
}

inline Method method_from_string(std::string_view s) {
    for (Method m : kAllMethods)
        if (to_string(m) == s) return m;
    throw ValidationError("unknown filter method '" + std::string(s) + "'");
}

inline Family family_of(Method m) {
    switch (m) {
        case Method::dq:
        case Method::graphcut:
        case Method::kcenter:
        case Method::random: return Family::distribution;
        case Method::alphagasus:
        case Method::lma:
        case Method::superfiltering:
        case Method::less: return Family::quality;
        default: return Family::hybrid;
    }
}

struct TraceStep {
    std::size_t step = 0;
    std::string chosen_id;
    double gain_or_score = 0;
    std::string note;
    bool operator==(const TraceStep&) const = default;
};

struct Selection {
    Method method = Method::random;
    std::vector<std::string> kept_ids;
    std::size_t budget_k = 0;
    std::vector<TraceStep> trace;
    std::map<std::string, double> params;
    /// Named id groups recorded for audit (e.g. cherry's per-cluster seeds).
    std::map<std::string, std::vector<std::string>> annotations;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["method"] = to_string(method);
        nlohmann::ordered_json p = nlohmann::ordered_json::object();
        for (const auto& [k, v] : params) p[k] = v;
        j["params"] = p;
        j["budget_k"] = budget_k;
        j["kept_ids"] = kept_ids;
        auto tr = nlohmann::ordered_json::array();
        for (const auto& t : trace) {
            nlohmann::ordered_json e;
            e["step"] = t.step;
            e["chosen_id"] = t.chosen_id;
            e["gain_or_score"] = t.gain_or_score;
            if (!t.note.empty()) e["note"] = t.note;
            tr.push_back(e);
        }
        j["trace"] = tr;
        if (!annotations.empty()) {
            nlohmann::ordered_json a = nlohmann::ordered_json::object();
            for (const auto& [k, v] : annotations) a[k] = v;
            j["annotations"] = a;
        }
        return j;
    }

    static Selection from_json(const nlohmann::json& j) {
        Selection s;
        try {
            s.method = method_from_string(j.at("method").get<std::string>());
            s.params = j.value("params", std::map<std::string, double>{});
            s.budget_k = j.at("budget_k").get<std::size_t>();
            s.kept_ids = j.at("kept_ids").get<std::vector<std::string>>();
            for (const auto& e : j.at("trace"))
                s.trace.push_back({e.at("step").get<std::size_t>(), e.at("chosen_id").get<std::string>(),
                                   e.at("gain_or_score").get<double>(), e.value("note", "")});
            if (j.contains("annotations"))
                s.annotations = j["annotations"].get<std::map<std::string, std::vector<std::string>>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("selection.json: ") + e.what());
        }
        return s;
    }
};

/// Symmetric n x n cosine kernel over normalized sample embeddings.
class SimilarityKernel {
public:
    SimilarityKernel() = default;

    SimilarityKernel(std::size_t n, std::vector<float> values, std::vector<std::string> ids)
        : n_(n), s_(std::move(values)), ids_(std::move(ids)) {
        if (s_.size() != n_ * n_ || ids_.size() != n_) throw ValidationError("kernel shape mismatch");
        for (std::size_t i = 0; i < n_; ++i) {
            if (std::abs(s_[i * n_ + i] - 1.0f) > 1e-6f)
                throw ValidationError("kernel diagonal entry " + std::to_string(i) + " is not 1");
            for (std::size_t j = 0; j < i; ++j)
                if (std::abs(s_[i * n_ + j] - s_[j * n_ + i]) > 1e-6f)
                    throw ValidationError("kernel is not symmetric at (" + std::to_string(i) + "," +
                                          std::to_string(j) + ")");
        }
    }

    static SimilarityKernel from_embeddings(const EmbeddingMatrix& emb_in) {
        const EmbeddingMatrix emb = emb_in.normalized() ? emb_in : emb_in.normalized_copy();
        const std::size_t n = emb.rows();
        std::vector<float> s(n * n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i * n + i] = 1.0f;
            for (std::size_t j = 0; j < i; ++j) {
                const auto c = static_cast<float>(numerics::cosine_sim(emb.row(i), emb.row(j)));
                s[i * n + j] = c;
                s[j * n + i] = c;
            }
        }
        return SimilarityKernel(n, std::move(s), emb.row_ids());
    }

    std::size_t size() const { return n_; }
    float operator()(std::size_t i, std::size_t j) const { return s_[i * n_ + j]; }
    const std::vector<std::string>& ids() const { return ids_; }

private:
    std::size_t n_ = 0;
    std::vector<float> s_;
    std::vector<std::string> ids_;
};

namespace detail {

inline void check_k(std::size_t k, std::size_t n, std::string_view what) {
    if (k == 0 || k > n)
        throw ValidationError(std::string(what) + ": budget k=" + std::to_string(k) + " out of range [1, " +
                              std::to_string(n) + "]");
}

struct Pick {
    std::size_t index;
    double value;
};

/// Graph-cut greedy over `pool` (indices into the kernel). Gains use only
/// pool members: g(v|S) = sum_{u in pool\S\{v}} s(v,u) - lambda sum_{u in S} s(v,u).
inline std::vector<Pick> greedy_graphcut(const SimilarityKernel& K, std::span<const std::size_t> pool, std::size_t k,
                                         double lambda) {
    const std::size_t m = pool.size();
    std::vector<double> total(m, 0.0), sel(m, 0.0);
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b)
            if (a != b) total[a] += K(pool[a], pool[b]);
    std::vector<bool> in(m, false);
    std::vector<Pick> out;
    out.reserve(k);
    for (std::size_t step = 0; step < k; ++step) {
        std::size_t best = m;
        double best_gain = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < m; ++a) {
            if (in[a]) continue;
            const double g = (total[a] - sel[a]) - lambda * sel[a];
            if (g > best_gain || (g == best_gain && pool[a] < pool[best])) {
                best_gain = g;
                best = a;
            }
        }
        in[best] = true;
        out.push_back({pool[best], best_gain});
        for (std::size_t a = 0; a < m; ++a)
            if (!in[a]) sel[a] += K(pool[a], pool[best]);
    }
    return out;
}

/// Farthest-point greedy over `pool` rows of emb. The first pick is a seeded
/// uniform draw; value is the chosen point's distance to prior centers.
inline std::vector<Pick> greedy_kcenter(const EmbeddingMatrix& emb, std::span<const std::size_t> pool, std::size_t k,
                                        std::uint64_t seed) {
    const std::size_t m = pool.size();
    Rng rng(seed);
    std::vector<double> mind(m, std::numeric_limits<double>::infinity());
    std::vector<bool> in(m, false);
    std::vector<Pick> out;
    out.reserve(k);
    std::size_t cur = static_cast<std::size_t>(rng.uniform_index(m));
    out.push_back({pool[cur], 0.0});
    in[cur] = true;
    while (out.size() < k) {
        for (std::size_t a = 0; a < m; ++a)
            if (!in[a])
                mind[a] = std::min(mind[a], std::sqrt(numerics::squared_distance(emb.row(pool[a]), emb.row(pool[cur]))));
        std::size_t best = m;
        for (std::size_t a = 0; a < m; ++a) {
            if (in[a]) continue;
            if (best == m || mind[a] > mind[best]) best = a;
        }
        in[best] = true;
        out.push_back({pool[best], mind[best]});
        cur = best;
    }
    return out;
}

/// Indices sorted by score (descending for max), ties by lower index.
inline std::vector<std::size_t> rank_by_score(const std::vector<double>& scores, bool maximize) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return maximize ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    return idx;
}

inline std::vector<double> channel_values(const Dataset& ds, const ScoreChannel& ch) {
    std::vector<double> v;
    v.reserve(ds.size());
    for (const auto& s : ds.samples) v.push_back(ch.at(s.id));
    return v;
}

inline void require_aligned(const Dataset& ds, const EmbeddingMatrix& emb) {
    if (emb.rows() != ds.size()) throw ValidationError("embedding rows do not match dataset size");
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (emb.row_ids()[i] != ds.samples[i].id)
            throw ValidationError("embedding row " + std::to_string(i) + " is '" + emb.row_ids()[i] +
                                  "' but sample is '" + ds.samples[i].id + "'");
}

inline Selection make_selection(Method m, std::size_t k, const std::vector<std::string>& ids,
                                const std::vector<Pick>& picks, std::string note = {}) {
    Selection s;
    s.method = m;
    s.budget_k = k;
    for (std::size_t t = 0; t < picks.size(); ++t) {
        s.kept_ids.push_back(ids[picks[t].index]);
        s.trace.push_back({t, ids[picks[t].index], picks[t].value, note});
    }
    return s;
}

}  // namespace detail

inline Selection graphcut_select(const SimilarityKernel& kernel, std::size_t k, double lambda = 1.0,
                                 std::uint64_t seed = 0) {
    (void)seed;  // greedy is deterministic; kept for a uniform signature
    detail::check_k(k, kernel.size(), "graphcut");
    if (!(lambda >= 0)) throw ValidationError("graphcut: lambda must be >= 0");
    std::vector<std::size_t> pool(kernel.size());
    std::iota(pool.begin(), pool.end(), 0);
    auto s = detail::make_selection(Method::graphcut, k, kernel.ids(), detail::greedy_graphcut(kernel, pool, k, lambda));
    s.params["lambda"] = lambda;
    return s;
}

inline Selection kcenter_select(const EmbeddingMatrix& emb, std::size_t k, std::uint64_t seed) {
    detail::check_k(k, emb.rows(), "kcenter");
    std::vector<std::size_t> pool(emb.rows());
    std::iota(pool.begin(), pool.end(), 0);
    auto s = detail::make_selection(Method::kcenter, k, emb.row_ids(), detail::greedy_kcenter(emb, pool, k, seed));
    s.trace.front().note = "seed";
    return s;
}

/// Seeded Fisher-Yates prefix: the first k of a partial shuffle of `items`.
inline std::vector<std::size_t> fisher_yates_prefix(std::vector<std::size_t> items, std::size_t k, Rng& rng) {
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(items.size() - i));
        std::swap(items[i], items[j]);
    }
    items.resize(k);
    return items;
}

inline Selection random_select(const Dataset& ds, std::size_t k, std::uint64_t seed) {
    detail::check_k(k, ds.size(), "random");
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), 0);
    Rng rng(seed);
    Selection s;
    s.method = Method::random;
    s.budget_k = k;
    const auto picks = fisher_yates_prefix(std::move(all), k, rng);
    for (std::size_t t = 0; t < picks.size(); ++t) {
        s.kept_ids.push_back(ds.samples[picks[t]].id);
        s.trace.push_back({t, ds.samples[picks[t]].id, 0.0, {}});
    }
    return s;
}

/// Recursively peels `bins` bins of n/bins samples off the pool with graph-cut
/// greedy (the last bin takes the remainder) and samples uniformly from each.
inline Selection dq_select(const SimilarityKernel& kernel, std::size_t k, std::size_t bins = 10, std::uint64_t seed = 0,
                           double lambda = 1.0) {
    const std::size_t n = kernel.size();
    detail::check_k(k, n, "dq");
    if (bins == 0 || bins > n)
        throw ValidationError("dq: bins=" + std::to_string(bins) + " out of range [1, " + std::to_string(n) + "]");
    std::vector<std::vector<std::size_t>> bin_members(bins);
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    const std::size_t per_bin = n / bins;
    for (std::size_t b = 0; b + 1 < bins; ++b) {
        auto picks = detail::greedy_graphcut(kernel, pool, per_bin, lambda);
        std::set<std::size_t> taken;
        for (const auto& p : picks) {
            bin_members[b].push_back(p.index);
            taken.insert(p.index);
        }
        std::vector<std::size_t> rest;
        for (std::size_t i : pool)
            if (!taken.count(i)) rest.push_back(i);
        pool = std::move(rest);
    }
    bin_members[bins - 1] = pool;
    for (auto& m : bin_members) std::sort(m.begin(), m.end());

    // Quotas: ceil(k/bins) per bin in order, capped by bin size; any shortfall
    // is carried to later bins with spare members.
    const std::size_t quota = (k + bins - 1) / bins;
    std::vector<std::size_t> take(bins, 0);
    std::size_t left = k;
    for (std::size_t b = 0; b < bins && left > 0; ++b) {
        take[b] = std::min({quota, left, bin_members[b].size()});
        left -= take[b];
    }
    for (std::size_t b = 0; b < bins && left > 0; ++b) {
        const std::size_t extra = std::min(left, bin_members[b].size() - take[b]);
        take[b] += extra;
        left -= extra;
    }

    Rng rng(seed);
    Selection s;
    s.method = Method::dq;
    s.budget_k = k;
    s.params = {{"bins", double(bins)}, {"lambda", lambda}};
    for (std::size_t b = 0; b < bins; ++b) {
        if (take[b] == 0) continue;
        for (std::size_t i : fisher_yates_prefix(bin_members[b], take[b], rng)) {
            s.trace.push_back({s.kept_ids.size(), kernel.ids()[i], double(b), "bin=" + std::to_string(b)});
            s.kept_ids.push_back(kernel.ids()[i]);
        }
    }
    return s;
}

enum class Direction { max, min };

inline Selection score_topk_select(const Dataset& ds, const ScoreChannel& channel, std::size_t k,
                                   Direction direction = Direction::max, Method tag = Method::alphagasus) {
    detail::check_k(k, ds.size(), "score_topk");
    const auto scores = detail::channel_values(ds, channel);
    const auto order = detail::rank_by_score(scores, direction == Direction::max);
    Selection s;
    s.method = tag;
    s.budget_k = k;
    for (std::size_t t = 0; t < k; ++t) {
        s.kept_ids.push_back(ds.samples[order[t]].id);
        s.trace.push_back({t, ds.samples[order[t]].id, scores[order[t]], {}});
    }
    return s;
}

/// PPL(answer | question) / PPL(answer), PPL = exp(-mean logprob). An empty
/// answer has no perplexity; it scores a neutral 1.
inline double ifd_score(const corpus::TokenScoreSeq& ts) {
    if (!ts.logprob_unconditioned)
        throw ValidationError("ifd_score: sample '" + ts.sample_id + "' has no unconditioned logprobs");
    const auto& c = ts.logprob_conditioned;
    const auto& u = *ts.logprob_unconditioned;
    if (c.size() != u.size()) throw ValidationError("ifd_score: conditioned/unconditioned length mismatch");
    if (c.empty()) return 1.0;
    const double mc = std::accumulate(c.begin(), c.end(), 0.0) / double(c.size());
    const double mu = std::accumulate(u.begin(), u.end(), 0.0) / double(u.size());
    return std::exp(-mc) / std::exp(-mu);
}

inline double less_feature_score(std::span<const float> features, std::span<const float> target_centroid) {
    return numerics::cosine_sim(features, target_centroid);
}

/// Mean of all rows; the LESS target centroid of ingested target features.
inline std::vector<float> centroid(const EmbeddingMatrix& m) {
    if (m.rows() == 0) throw ValidationError("centroid of empty matrix");
    std::vector<double> acc(m.dims(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.dims(); ++j) acc[j] += m.row(i)[j];
    std::vector<float> out(m.dims());
    for (std::size_t j = 0; j < m.dims(); ++j) out[j] = static_cast<float>(acc[j] / double(m.rows()));
    return out;
}

/// grad_feature_sim channel: cosine of each sample's feature row to the target centroid.
inline ScoreChannel less_channel(const EmbeddingMatrix& sample_features, const EmbeddingMatrix& target_features) {
    const auto c = centroid(target_features);
    ScoreChannel ch{"grad_feature_sim", {}};
    for (std::size_t i = 0; i < sample_features.rows(); ++i)
        ch.values[sample_features.row_ids()[i]] = less_feature_score(sample_features.row(i), c);
    return ch;
}

/// ifd channel from answer-side token scores.
inline ScoreChannel ifd_channel(const Dataset& ds) {
    ScoreChannel ch{"ifd", {}};
    for (const auto& s : ds.samples) {
        const auto* ts = ds.find_token_scores(s.id, corpus::Side::answer);
        if (!ts) throw ValidationError("ifd: sample '" + s.id + "' has no answer token scores");
        ch.values[s.id] = ifd_score(*ts);
    }
    return ch;
}

/// length channel: answer token count.
inline ScoreChannel length_channel(const Dataset& ds) {
    ScoreChannel ch{"length", {}};
    for (const auto& s : ds.samples)
        ch.values[s.id] = static_cast<double>(corpus::token_count(s, corpus::Side::answer));
    return ch;
}

inline Selection mods_select(const Dataset& ds, const EmbeddingMatrix& emb, const ScoreChannel& quality, std::size_t k,
                             double quality_threshold, std::uint64_t seed) {
    detail::require_aligned(ds, emb);
    detail::check_k(k, ds.size(), "mods");
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (quality.at(ds.samples[i].id) >= quality_threshold) pool.push_back(i);
    if (pool.size() < k)
        throw ValidationError("mods: quality threshold leaves " + std::to_string(pool.size()) + " samples, fewer than k=" +
                              std::to_string(k) + " (achievable max " + std::to_string(pool.size()) + ")");
    auto s = detail::make_selection(Method::mods, k, emb.row_ids(), detail::greedy_kcenter(emb, pool, k, seed));
    s.trace.front().note = "seed";
    if (std::isfinite(quality_threshold)) s.params["quality_threshold"] = quality_threshold;
    s.params["pool_size"] = double(pool.size());
    return s;
}

inline Selection cherry_select(const Dataset& ds, const EmbeddingMatrix& emb, const ScoreChannel& ifd, std::size_t k,
                               std::size_t clusters, std::size_t per_cluster_seed_n, std::uint64_t seed) {
    detail::require_aligned(ds, emb);
    detail::check_k(k, ds.size(), "cherry");
    if (clusters == 0 || clusters > ds.size()) throw ValidationError("cherry: clusters out of range");
    const auto ca = numerics::kmeans(emb, clusters, seed);
    auto s = score_topk_select(ds, ifd, k, Direction::max, Method::cherry);
    for (std::size_t c = 0; c < clusters; ++c) {
        std::vector<std::string> seeds;
        for (std::size_t i = 0; i < ds.size() && seeds.size() < per_cluster_seed_n; ++i)
            if (ca.labels[i] == c) seeds.push_back(ds.samples[i].id);
        s.annotations["cluster." + std::to_string(c) + ".seed"] = std::move(seeds);
    }
    s.params = {{"clusters", double(clusters)}, {"per_cluster_seed_n", double(per_cluster_seed_n)}};
    return s;
}

inline Selection deita_select(const Dataset& ds, const EmbeddingMatrix& emb_in, const ScoreChannel& quality,
                              const ScoreChannel& complexity, std::size_t k, double sim_threshold = 0.9) {
    detail::require_aligned(ds, emb_in);
    detail::check_k(k, ds.size(), "deita");
    const EmbeddingMatrix emb = emb_in.normalized() ? emb_in : emb_in.normalized_copy();
    std::vector<double> composite(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        composite[i] = quality.at(ds.samples[i].id) * complexity.at(ds.samples[i].id);
    const auto order = detail::rank_by_score(composite, true);
    Selection s;
    s.method = Method::deita;
    s.budget_k = k;
    s.params["sim_threshold"] = sim_threshold;
    std::vector<std::size_t> admitted, rejected;
    for (std::size_t i : order) {
        if (admitted.size() == k) break;
        double max_sim = -1;
        for (std::size_t a : admitted) max_sim = std::max(max_sim, numerics::cosine_sim(emb.row(i), emb.row(a)));
        if (admitted.empty() || max_sim < sim_threshold) {
            s.trace.push_back({admitted.size(), ds.samples[i].id, composite[i], {}});
            admitted.push_back(i);
        } else {
            rejected.push_back(i);
        }
    }
    for (std::size_t i : rejected) {
        if (admitted.size() == k) break;
        s.trace.push_back({admitted.size(), ds.samples[i].id, composite[i], "backfill"});
        admitted.push_back(i);
    }
    for (std::size_t i : admitted) s.kept_ids.push_back(ds.samples[i].id);
    return s;
}

inline Selection car_select(const Dataset& ds, const EmbeddingMatrix& emb, const ScoreChannel& iqs, std::size_t k,
                            std::size_t clusters, double top_global_frac = 0.5, std::uint64_t seed = 0) {
    detail::require_aligned(ds, emb);
    detail::check_k(k, ds.size(), "car");
    if (clusters == 0 || clusters > ds.size()) throw ValidationError("car: clusters out of range");
    if (!(top_global_frac >= 0 && top_global_frac <= 1)) throw ValidationError("car: top_global_frac must be in [0,1]");
    const auto scores = detail::channel_values(ds, iqs);
    const auto order = detail::rank_by_score(scores, true);
    const auto ca = numerics::kmeans(emb, clusters, seed);

    Selection s;
    s.method = Method::car;
    s.budget_k = k;
    s.params = {{"clusters", double(clusters)}, {"top_global_frac", top_global_frac}};
    std::vector<bool> chosen(ds.size(), false);
    auto take = [&](std::size_t i, std::string note) {
        chosen[i] = true;
        s.trace.push_back({s.kept_ids.size(), ds.samples[i].id, scores[i], std::move(note)});
        s.kept_ids.push_back(ds.samples[i].id);
    };
    const auto n_global =
        std::min(k, static_cast<std::size_t>(std::ceil(top_global_frac * double(k) - 1e-9)));
    for (std::size_t t = 0; t < n_global; ++t) take(order[t], "global");

    // Per-cluster queues in score order; round-robin until the budget is met.
    std::vector<std::vector<std::size_t>> queues(clusters);
    for (std::size_t i : order)
        if (!chosen[i]) queues[ca.labels[i]].push_back(i);
    std::vector<std::size_t> head(clusters, 0);
    while (s.kept_ids.size() < k) {
        bool progressed = false;
        for (std::size_t c = 0; c < clusters && s.kept_ids.size() < k; ++c) {
            if (head[c] >= queues[c].size()) continue;
            take(queues[c][head[c]++], "cluster=" + std::to_string(c));
            progressed = true;
        }
        if (!progressed) break;
    }
    return s;
}

/// Budget for a sampling ratio: ceil(ratio * n), guarded against round-off.
inline std::size_t budget_for_ratio(double ratio, std::size_t n) {
    if (!(ratio > 0 && ratio <= 1)) throw ValidationError("ratio must be in (0, 1]");
    const auto k = static_cast<std::size_t>(std::ceil(ratio * double(n) - 1e-9));
    return std::max<std::size_t>(std::min(k, n), n > 0 ? 1 : 0);
}

/// Mediates access to embeddings and score channels and records which
/// were touched, so family separation is observable.
class FilterContext {
public:
    FilterContext(const Dataset& ds, const EmbeddingMatrix* emb) : ds_(ds), emb_(emb) {}

    const Dataset& dataset() const { return ds_; }

    const EmbeddingMatrix& embeddings() const {
        embeddings_read_ = true;
        if (!emb_) throw ValidationError("this method needs sample embeddings");
        return *emb_;
    }

    const SimilarityKernel& kernel() const {
        if (!kernel_) kernel_ = SimilarityKernel::from_embeddings(embeddings());
        embeddings_read_ = true;
        return *kernel_;
    }

    /// Channel by name; `length` and `ifd` are derived from the dataset when absent.
    const ScoreChannel& channel(const std::string& name) const {
        channels_read_ = true;
        if (auto* c = ds_.find_channel(name)) return *c;
        auto it = derived_.find(name);
        if (it != derived_.end()) return it->second;
        if (name == "length") return derived_.emplace(name, length_channel(ds_)).first->second;
        if (name == "ifd") return derived_.emplace(name, ifd_channel(ds_)).first->second;
        throw ValidationError("missing score channel '" + name + "'");
    }

    bool embeddings_read() const { return embeddings_read_; }
    bool channels_read() const { return channels_read_; }

private:
    const Dataset& ds_;
    const EmbeddingMatrix* emb_;
    mutable std::optional<SimilarityKernel> kernel_;
    mutable std::map<std::string, ScoreChannel> derived_;
    mutable bool embeddings_read_ = false;
    mutable bool channels_read_ = false;
};

using MethodParams = std::map<std::string, double>;

/// Parameter names each method accepts.
inline std::vector<std::string> accepted_params(Method m) {
    switch (m) {
        case Method::graphcut: return {"lambda"};
        case Method::dq: return {"bins", "lambda"};
        case Method::mods: return {"quality_threshold"};
        case Method::cherry: return {"clusters", "per_cluster_seed_n"};
        case Method::deita: return {"sim_threshold"};
        case Method::car: return {"clusters", "top_global_frac"};
        default: return {};
    }
}

/// Runs any of the twelve methods through the context.
inline Selection run_method(Method m, const FilterContext& ctx, std::size_t k, const MethodParams& params,
                            std::uint64_t seed) {
    const auto allowed = accepted_params(m);
    for (const auto& [name, _] : params)
        if (std::find(allowed.begin(), allowed.end(), name) == allowed.end())
            throw ValidationError("method '" + std::string(to_string(m)) + "' does not accept parameter '" + name + "'");
    auto get = [&](const char* name, double def) {
        auto it = params.find(name);
        return it == params.end() ? def : it->second;
    };
    auto as_count = [&](const char* name, double def) {
        const double v = get(name, def);
        if (!(v >= 1) || v != std::floor(v))
            throw ValidationError(std::string(name) + " must be a positive integer");
        return static_cast<std::size_t>(v);
    };
    const Dataset& ds = ctx.dataset();
    const auto default_clusters = static_cast<double>(std::min<std::size_t>(10, std::max<std::size_t>(ds.size(), 1)));
    switch (m) {
        case Method::graphcut: return graphcut_select(ctx.kernel(), k, get("lambda", 1.0), seed);
        case Method::dq:
            return dq_select(ctx.kernel(), k, as_count("bins", double(std::min<std::size_t>(10, ds.size()))), seed,
                             get("lambda", 1.0));
        case Method::kcenter: return kcenter_select(ctx.embeddings(), k, seed);
        case Method::random: return random_select(ds, k, seed);
        case Method::alphagasus: return score_topk_select(ds, ctx.channel("quality_llm"), k, Direction::max, m);
        case Method::lma: return score_topk_select(ds, ctx.channel("length"), k, Direction::max, m);
        case Method::superfiltering: return score_topk_select(ds, ctx.channel("ifd"), k, Direction::max, m);
        case Method::less: return score_topk_select(ds, ctx.channel("grad_feature_sim"), k, Direction::max, m);
        case Method::mods:
            return mods_select(ds, ctx.embeddings(), ctx.channel("quality_llm"), k,
                               get("quality_threshold", -std::numeric_limits<double>::infinity()), seed);
        case Method::cherry:
            return cherry_select(ds, ctx.embeddings(), ctx.channel("ifd"), k, as_count("clusters", default_clusters),
                                 as_count("per_cluster_seed_n", 10), seed);
        case Method::deita:
            return deita_select(ds, ctx.embeddings(), ctx.channel("quality_llm"), ctx.channel("complexity"), k,
                                get("sim_threshold", 0.9));
        case Method::car:
            return car_select(ds, ctx.embeddings(), ctx.channel("iqs"), k, as_count("clusters", default_clusters),
                              get("top_global_frac", 0.5), seed);
    }
    throw ValidationError("unreachable");
}

}  // namespace damoc::filter
