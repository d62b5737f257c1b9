// SPDX-License-Identifier: Apache-2.0
#pragma once

// Ranking arithmetic for comparing candidate models across pipeline
// configurations: competition ranks, top-1 agreement, rank correlations,
// the training-cost model and the rank report.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "damoc/corpus.hpp"
#include "damoc/error.hpp"
#include "damoc/io.hpp"

namespace damoc::eval {

namespace fs = std::filesystem;

/// rank(v) = 1 + number of values strictly greater than v ("1224" ranking).
/// NaN marks a missing value: it gets rank 0 and does not count against others.
inline std::vector<int> competition_rank(const std::vector<double>& values) {
    std::vector<int> r(values.size(), 0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (std::isnan(values[i])) continue;
        int better = 0;
        for (double v : values)
            if (!std::isnan(v) && v > values[i]) ++better;
        r[i] = 1 + better;
    }
    return r;
}

struct RankTable {
    std::string name;
    std::vector<std::string> row_ids;
    std::vector<std::string> col_ids;
    std::vector<std::vector<double>> values;  // rows x cols
    std::vector<std::vector<int>> ranks;      // filled by compute_ranks()

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out;
        for (const auto& r : values) out.push_back(r.at(c));
        return out;
    }
    std::vector<int> rank_column(std::size_t c) const {
        std::vector<int> out;
        for (const auto& r : ranks) out.push_back(r.at(c));
        return out;
    }
    std::size_t col_index(const std::string& id) const {
        for (std::size_t c = 0; c < col_ids.size(); ++c)
            if (col_ids[c] == id) return c;
        throw ValidationError("table '" + name + "' has no column '" + id + "'");
    }

    void validate() const {
        if (row_ids.empty() || col_ids.empty()) throw ValidationError("rank table '" + name + "' is empty");
        if (values.size() != row_ids.size()) throw ValidationError("rank table '" + name + "' row count mismatch");
        for (const auto& r : values)
            if (r.size() != col_ids.size()) throw ValidationError("rank table '" + name + "' column count mismatch");
        for (const auto& r : values)
            for (double v : r)
                if (std::isinf(v)) throw ValidationError("rank table '" + name + "' has an infinite value");
    }

    void compute_ranks() {
        validate();
        ranks.assign(row_ids.size(), std::vector<int>(col_ids.size(), 0));
        for (std::size_t c = 0; c < col_ids.size(); ++c) {
            const auto r = competition_rank(column(c));
            for (std::size_t i = 0; i < r.size(); ++i) ranks[i][c] = r[i];
        }
    }
};

/// Rows holding the column maximum.
inline std::set<std::size_t> top1_rows(const std::vector<double>& col) {
    std::set<std::size_t> out;
    const auto r = competition_rank(col);
    for (std::size_t i = 0; i < r.size(); ++i)
        if (r[i] == 1) out.insert(i);
    return out;
}

/// True iff both columns have the same set of best rows.
inline bool top1_agreement(const std::vector<std::string>& rows_a, const std::vector<double>& a,
                           const std::vector<std::string>& rows_b, const std::vector<double>& b) {
    if (rows_a != rows_b || a.size() != b.size() || a.size() != rows_a.size())
        throw ValidationError("top1_agreement: row ids differ");
    return top1_rows(a) == top1_rows(b);
}

inline bool top1_agreement(const RankTable& t, std::size_t baseline_col, std::size_t candidate_col) {
    return top1_agreement(t.row_ids, t.column(baseline_col), t.row_ids, t.column(candidate_col));
}

class UndefinedCorrelation : public ValidationError {
public:
    using ValidationError::ValidationError;
};

enum class Correlation { kendall_tau_b, spearman_rho };

namespace detail {

inline std::uint64_t tied_pairs(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        while (j < v.size() && v[j] == v[i]) ++j;
        const std::uint64_t t = j - i;
        s += t * (t - 1) / 2;
        i = j;
    }
    return s;
}

inline std::uint64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = (lo + hi) / 2;
    std::uint64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            swaps += mid - i;
            buf[k++] = v[j++];
        } else {
            buf[k++] = v[i++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + std::ptrdiff_t(lo), buf.begin() + std::ptrdiff_t(hi), v.begin() + std::ptrdiff_t(lo));
    return swaps;
}

/// Average (fractional) ranks, 1-based.
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
        const double avg = (double(i + 1) + double(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) r[idx[k]] = avg;
        i = j;
    }
    return r;
}

}  // namespace detail

/// Kendall tau-b in O(n log n) (Knight's algorithm).
inline double kendall_tau_b(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    if (n != b.size() || n < 2) throw ValidationError("kendall_tau_b: need two equal-length lists of length >= 2");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
        return a[x] < a[y] || (a[x] == a[y] && b[x] < b[y]);
    });
    const std::uint64_t n0 = std::uint64_t(n) * (n - 1) / 2;
    std::vector<double> sa(n), sb(n);
    for (std::size_t i = 0; i < n; ++i) {
        sa[i] = a[idx[i]];
        sb[i] = b[idx[i]];
    }
    const std::uint64_t n1 = detail::tied_pairs(sa);
    std::uint64_t n3 = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && sa[j] == sa[i] && sb[j] == sb[i]) ++j;
        const std::uint64_t t = j - i;
        n3 += t * (t - 1) / 2;
        i = j;
    }
    std::vector<double> buf(n);
    const std::uint64_t swaps = detail::merge_count(sb, buf, 0, n);
    const std::uint64_t n2 = detail::tied_pairs(sb);
    if (n0 == n1 || n0 == n2) throw UndefinedCorrelation("kendall_tau_b: undefined for a constant ranking");
    const double num = double(n0) - double(n1) - double(n2) + double(n3) - 2.0 * double(swaps);
    return std::clamp(num / std::sqrt(double(n0 - n1) * double(n0 - n2)), -1.0, 1.0);
}

/// Spearman rho: Pearson correlation of fractional ranks.
inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    if (n != b.size() || n < 2) throw ValidationError("spearman_rho: need two equal-length lists of length >= 2");
    const auto ra = detail::fractional_ranks(a);
    const auto rb = detail::fractional_ranks(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= double(n);
    mb /= double(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0 || sbb == 0) throw UndefinedCorrelation("spearman_rho: undefined for a constant ranking");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double rank_correlation(const std::vector<int>& a, const std::vector<int>& b, Correlation kind) {
    const std::vector<double> da(a.begin(), a.end()), db(b.begin(), b.end());
    return kind == Correlation::kendall_tau_b ? kendall_tau_b(da, db) : spearman_rho(da, db);
}

struct CostModel {
    double sample_keep_ratio = 1;
    double token_keep_ratio = 1;
    double layer_keep_ratio = 1;
    double epochs_ratio = 1;
    std::optional<double> measured_baseline_minutes;
    std::optional<double> measured_pipeline_minutes;
};

struct SpeedupEstimate {
    double modeled = 1;
    std::optional<double> measured;
};

inline SpeedupEstimate estimate_speedup(const CostModel& cm) {
    for (double r : {cm.sample_keep_ratio, cm.token_keep_ratio, cm.layer_keep_ratio, cm.epochs_ratio})
        if (!(r > 0 && r <= 1)) throw ValidationError("cost model ratios must be in (0, 1], got " + std::to_string(r));
    SpeedupEstimate s;
    s.modeled = 1.0 / (cm.sample_keep_ratio * cm.token_keep_ratio * cm.layer_keep_ratio * cm.epochs_ratio);
    if (cm.measured_baseline_minutes || cm.measured_pipeline_minutes) {
        if (!cm.measured_baseline_minutes || !cm.measured_pipeline_minutes)
            throw ValidationError("measured speedup needs both baseline and pipeline minutes");
        if (!(*cm.measured_pipeline_minutes > 0) || !(*cm.measured_baseline_minutes > 0))
            throw ValidationError("measured minutes must be positive");
        s.measured = *cm.measured_baseline_minutes / *cm.measured_pipeline_minutes;
    }
    return s;
}

// ---- report ----

/// "0.5978(2)"; missing values print as "-".
inline std::string format_cell(double value, int rank) {
    if (std::isnan(value)) return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f(%d)", value, rank);
    return buf;
}

inline std::string format_number(double v, const char* fmt = "%.4f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string rank_table_csv(const RankTable& t) {
    std::string out = "model";
    for (const auto& c : t.col_ids) out += "," + csv_escape(c);
    out += "\n";
    for (std::size_t r = 0; r < t.row_ids.size(); ++r) {
        out += csv_escape(t.row_ids[r]);
        for (std::size_t c = 0; c < t.col_ids.size(); ++c) out += "," + format_cell(t.values[r][c], t.ranks[r][c]);
        out += "\n";
    }
    return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

}  // namespace detail

/// Parses a table whose first column is the model name; cells are numbers,
/// optionally followed by "(rank)", or "-" / empty for missing.
inline RankTable parse_rank_table_csv(std::string_view bytes, const std::string& name = "") {
    RankTable t;
    t.name = name;
    bool header = true;
    io::for_each_line(bytes, [&](std::string_view line, std::size_t no) {
        auto cells = detail::split_csv_line(line);
        if (header) {
            if (cells.size() < 2) throw ParseError(name + ":" + std::to_string(no) + ": header needs at least 2 columns");
            t.col_ids.assign(cells.begin() + 1, cells.end());
            header = false;
            return;
        }
        if (cells.size() != t.col_ids.size() + 1)
            throw ParseError(name + ":" + std::to_string(no) + ": expected " + std::to_string(t.col_ids.size() + 1) +
                             " cells, got " + std::to_string(cells.size()));
        t.row_ids.push_back(cells[0]);
        std::vector<double> row;
        for (std::size_t c = 1; c < cells.size(); ++c) {
            std::string s = cells[c];
            if (auto p = s.find('('); p != std::string::npos) s = s.substr(0, p);
            while (!s.empty() && s.back() == ' ') s.pop_back();
            while (!s.empty() && s.front() == ' ') s.erase(0, 1);
            if (s.empty() || s == "-") {
                row.push_back(std::numeric_limits<double>::quiet_NaN());
                continue;
            }
            try {
                std::size_t used = 0;
                row.push_back(std::stod(s, &used));
                if (used != s.size()) throw std::invalid_argument(s);
            } catch (const std::exception&) {
                throw ParseError(name + ":" + std::to_string(no) + ": cell '" + cells[c] + "' is not a number");
            }
        }
        t.values.push_back(std::move(row));
    });
    if (header) throw ParseError(name + ": empty table");
    t.compute_ranks();
    return t;
}

/// Agreement of each non-baseline column with the baseline (column 0).
struct ColumnAgreement {
    std::string column;
    bool top1 = false;
    std::optional<double> kendall_tau_b;
    std::optional<double> spearman_rho;
};

inline std::vector<ColumnAgreement> column_agreement(const RankTable& t, std::size_t baseline = 0) {
    std::vector<ColumnAgreement> out;
    for (std::size_t c = 0; c < t.col_ids.size(); ++c) {
        if (c == baseline) continue;
        ColumnAgreement a;
        a.column = t.col_ids[c];
        // Rows missing in either column are left out of the comparison.
        std::vector<std::string> rows;
        std::vector<double> bv, cv;
        for (std::size_t r = 0; r < t.row_ids.size(); ++r) {
            if (std::isnan(t.values[r][baseline]) || std::isnan(t.values[r][c])) continue;
            rows.push_back(t.row_ids[r]);
            bv.push_back(t.values[r][baseline]);
            cv.push_back(t.values[r][c]);
        }
        if (!rows.empty()) a.top1 = top1_agreement(rows, bv, rows, cv);
        const auto br = competition_rank(bv), cr = competition_rank(cv);
        try {
            a.kendall_tau_b = rank_correlation(br, cr, Correlation::kendall_tau_b);
            a.spearman_rho = rank_correlation(br, cr, Correlation::spearman_rho);
        } catch (const ValidationError&) {
        }
        out.push_back(a);
    }
    return out;
}

inline std::string report_markdown(const std::vector<RankTable>& tables, const CostModel& cm) {
    std::string md = "# Model ranking report\n";
    for (const auto& t : tables) {
        md += "\n## " + (t.name.empty() ? std::string("Table") : t.name) + "\n\n| Model |";
        for (const auto& c : t.col_ids) md += " " + c + " |";
        md += "\n|---|";
        for (std::size_t c = 0; c < t.col_ids.size(); ++c) md += "---|";
        md += "\n";
        for (std::size_t r = 0; r < t.row_ids.size(); ++r) {
            md += "| " + t.row_ids[r] + " |";
            for (std::size_t c = 0; c < t.col_ids.size(); ++c) {
                const auto cell = format_cell(t.values[r][c], t.ranks[r][c]);
                md += t.ranks[r][c] == 1 ? " **" + cell + "** |" : " " + cell + " |";
            }
            md += "\n";
        }
        md += "\nBold cells are each column's top-1 model.\n";
        const auto agree = column_agreement(t);
        if (!agree.empty()) {
            md += "\n| Against " + t.col_ids[0] + " | top-1 agrees | Kendall tau-b | Spearman rho |\n|---|---|---|---|\n";
            for (const auto& a : agree)
                md += "| " + a.column + " | " + (a.top1 ? "yes" : "no") + " | " +
                      (a.kendall_tau_b ? format_number(*a.kendall_tau_b) : "undefined") + " | " +
                      (a.spearman_rho ? format_number(*a.spearman_rho) : "undefined") + " |\n";
        }
    }
    const auto sp = estimate_speedup(cm);
    md += "\n## Training cost\n\n| Lever | Keep ratio |\n|---|---|\n";
    md += "| samples | " + format_number(cm.sample_keep_ratio) + " |\n";
    md += "| tokens | " + format_number(cm.token_keep_ratio) + " |\n";
    md += "| layers | " + format_number(cm.layer_keep_ratio) + " |\n";
    md += "| epochs | " + format_number(cm.epochs_ratio) + " |\n";
    md += "\nModeled speedup: " + format_number(sp.modeled, "%.2f") + "x\n";
    if (sp.measured)
        md += "Measured speedup: " + format_number(*sp.measured, "%.2f") + "x (" +
              format_number(*cm.measured_baseline_minutes, "%.2f") + " min vs " +
              format_number(*cm.measured_pipeline_minutes, "%.2f") + " min)\n";
    return md;
}

inline std::string table_file_name(const RankTable& t, std::size_t n_tables) {
    if (n_tables == 1) return "rank_table.csv";
    std::string s;
    for (char c : t.name) s += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    return "rank_table_" + (s.empty() ? std::string("table") : s) + ".csv";
}

/// Writes rank_table.csv (one per table, suffixed by name, when there are
/// several) and report.md into `dir`.
inline corpus::Manifest emit_report(std::vector<RankTable> tables, const CostModel& cm, const fs::path& dir) {
    if (tables.empty()) throw ValidationError("emit_report: no tables");
    corpus::Manifest m;
    m.stage = corpus::Stage::evaluate;
    std::set<std::string> names;
    for (auto& t : tables) {
        if (t.ranks.size() != t.values.size()) t.compute_ranks();
        const auto file = table_file_name(t, tables.size());
        if (!names.insert(file).second) throw ValidationError("emit_report: duplicate table name '" + t.name + "'");
        io::write_file(dir / file, rank_table_csv(t));
        const std::string prefix = tables.size() == 1 ? "" : t.name + ".";
        for (const auto& a : column_agreement(t)) {
            m.stats[prefix + a.column + ".top1_agreement"] = a.top1 ? 1.0 : 0.0;
            if (a.kendall_tau_b) m.stats[prefix + a.column + ".kendall_tau_b"] = *a.kendall_tau_b;
            if (a.spearman_rho) m.stats[prefix + a.column + ".spearman_rho"] = *a.spearman_rho;
        }
    }
    const std::string md = report_markdown(tables, cm);
    io::write_file(dir / "report.md", md);
    const auto sp = estimate_speedup(cm);
    m.stats["modeled_speedup"] = sp.modeled;
    if (sp.measured) m.stats["measured_speedup"] = *sp.measured;
    m.config_digest = sha256_hex(md);
    m.created_at = corpus::now_iso8601();
    return m;
}

}  // namespace damoc::eval
