#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "cmreid/data/embedding_dump.hpp"
#include "cmreid/error.hpp"
#include "cmreid/text_io.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

using Embeddings = std::vector<std::vector<double>>;

enum class ProtocolTag { all_search, indoor_search, thermal_to_rgb, rgb_to_thermal };

inline const char* to_string(ProtocolTag t) {
    switch (t) {
        case ProtocolTag::all_search: return "all-search";
        case ProtocolTag::indoor_search: return "indoor-search";
        case ProtocolTag::thermal_to_rgb: return "thermal-to-rgb";
        case ProtocolTag::rgb_to_thermal: return "rgb-to-thermal";
    }
    return "?";
}

inline ProtocolTag parse_protocol(std::string_view s) {
    for (ProtocolTag t : {ProtocolTag::all_search, ProtocolTag::indoor_search, ProtocolTag::thermal_to_rgb,
                          ProtocolTag::rgb_to_thermal}) {
        if (s == to_string(t)) return t;
    }
    throw ParameterError("unknown protocol '" + std::string(s) +
                         "' (expected all-search, indoor-search, thermal-to-rgb or rgb-to-thermal)");
}

/// Query modality of a protocol; the gallery is the other one. The two
/// search modes follow the infrared-query convention. Indoor search has the
/// same structure here since camera identities are not modelled.
inline Modality query_modality(ProtocolTag t) {
    return t == ProtocolTag::rgb_to_thermal ? Modality::visible : Modality::infrared;
}

struct RetrievalInstance {
    Embeddings query;
    std::vector<int> query_labels;
    Embeddings gallery;
    std::vector<int> gallery_labels;
    ProtocolTag tag = ProtocolTag::all_search;

    std::size_t dim() const { return gallery.empty() ? 0 : gallery.front().size(); }

    void validate() const {
        if (gallery.empty()) throw ParameterError("retrieval gallery is empty");
        if (query.empty()) throw ParameterError("retrieval query set is empty");
        if (query.size() != query_labels.size() || gallery.size() != gallery_labels.size()) {
            throw DimensionError("embedding and label counts differ");
        }
        const std::size_t d = dim();
        for (const auto& v : query) {
            if (v.size() != d) throw DimensionError("query and gallery embedding dimensions differ");
        }
        for (const auto& v : gallery) {
            if (v.size() != d) throw DimensionError("gallery embeddings have inconsistent dimensions");
        }
    }
};

inline RetrievalInstance retrieval_from_dump(const EmbeddingDump& dump, ProtocolTag tag) {
    const Modality qm = query_modality(tag);
    auto q = dump.select(qm);
    auto g = dump.select(other(qm));
    RetrievalInstance r{std::move(q.vectors), std::move(q.labels), std::move(g.vectors), std::move(g.labels), tag};
    r.validate();
    return r;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("distance between vectors of different length");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// Gallery indices by ascending Euclidean distance, ties by ascending index.
inline std::vector<std::size_t> rank_gallery(std::span<const double> query, const Embeddings& gallery) {
    if (gallery.empty()) throw ParameterError("rank_gallery: empty gallery");
    std::vector<double> dist(gallery.size());
    for (std::size_t j = 0; j < gallery.size(); ++j) dist[j] = squared_distance(query, gallery[j]);
    std::vector<std::size_t> order(gallery.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    return order;
}

inline std::vector<std::vector<std::size_t>> rank_all(const Embeddings& query, const Embeddings& gallery) {
    std::vector<std::vector<std::size_t>> out;
    out.reserve(query.size());
    for (const auto& q : query) out.push_back(rank_gallery(q, gallery));
    return out;
}

namespace detail {

inline void check_rankings(std::span<const std::vector<std::size_t>> rankings, std::span<const int> query_labels,
                           std::span<const int> gallery_labels) {
    if (rankings.size() != query_labels.size()) throw DimensionError("one ranking per query required");
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        if (rankings[q].size() != gallery_labels.size()) {
            throw DimensionError("ranking " + std::to_string(q) + " does not cover the gallery");
        }
        if (std::find(gallery_labels.begin(), gallery_labels.end(), query_labels[q]) == gallery_labels.end()) {
            throw ProtocolError("query " + std::to_string(q) + " identity " + std::to_string(query_labels[q]) +
                                " is absent from the gallery");
        }
    }
}

}  // namespace detail

/// curve[k-1] = fraction of queries whose first correct match is at rank <= k.
inline std::vector<double> cmc(std::span<const std::vector<std::size_t>> rankings, std::span<const int> query_labels,
                               std::span<const int> gallery_labels) {
    detail::check_rankings(rankings, query_labels, gallery_labels);
    std::vector<double> curve(gallery_labels.size(), 0.0);
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        std::size_t first = 0;
        while (gallery_labels[rankings[q][first]] != query_labels[q]) ++first;
        for (std::size_t k = first; k < curve.size(); ++k) curve[k] += 1.0;
    }
    for (double& v : curve) v /= static_cast<double>(rankings.size());
    return curve;
}

/// Mean over relevant positions of precision at that position.
inline double average_precision(std::span<const std::size_t> ranking, int label, std::span<const int> gallery_labels) {
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t r = 0; r < ranking.size(); ++r) {
        if (gallery_labels[ranking[r]] != label) continue;
        ++hits;
        sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    if (hits == 0) throw ProtocolError("identity " + std::to_string(label) + " is absent from the gallery");
    return sum / static_cast<double>(hits);
}

inline double mean_ap(std::span<const std::vector<std::size_t>> rankings, std::span<const int> query_labels,
                      std::span<const int> gallery_labels) {
    detail::check_rankings(rankings, query_labels, gallery_labels);
    double sum = 0.0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        sum += average_precision(rankings[q], query_labels[q], gallery_labels);
    }
    return sum / static_cast<double>(rankings.size());
}

/// CMC at rank k (1-indexed); ranks past the gallery size saturate at 1.
inline double cmc_at(std::span<const double> curve, std::size_t k) {
    if (k == 0) throw ParameterError("CMC rank is 1-indexed");
    return k >= curve.size() ? curve.back() : curve[k - 1];
}

inline constexpr std::array<std::size_t, 3> kReportRanks{1, 10, 20};

struct ProtocolConfig {
    std::size_t trials = 10;
    /// Gallery samples drawn per identity each trial; 0 keeps the whole pool.
    std::size_t draw_per_identity = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (trials < 1) throw ParameterError("trials must be >= 1");
    }
};

struct TrialResult {
    std::array<double, 3> cmc{};  // at kReportRanks
    double map = 0.0;
    std::size_t gallery_size = 0;
};

struct EvalReport {
    ProtocolTag tag = ProtocolTag::all_search;
    ProtocolConfig protocol;
    std::size_t queries = 0;
    std::size_t pool_size = 0;
    std::vector<TrialResult> trials;
    std::vector<double> curve;  // mean CMC over trials, length = smallest trial gallery
    TrialResult mean;
    TrialResult stddev;  // population standard deviation over trials
};

namespace detail {

inline void aggregate(EvalReport& report) {
    const double n = static_cast<double>(report.trials.size());
    auto column = [&](auto get) {
        double m = 0.0;
        for (const TrialResult& t : report.trials) m += get(t);
        m /= n;
        double v = 0.0;
        for (const TrialResult& t : report.trials) v += (get(t) - m) * (get(t) - m);
        return std::pair{m, std::sqrt(v / n)};
    };
    for (std::size_t i = 0; i < kReportRanks.size(); ++i) {
        std::tie(report.mean.cmc[i], report.stddev.cmc[i]) = column([i](const TrialResult& t) { return t.cmc[i]; });
    }
    std::tie(report.mean.map, report.stddev.map) = column([](const TrialResult& t) { return t.map; });
    report.mean.gallery_size = report.trials.front().gallery_size;
}

}  // namespace detail

/// Repeated random-gallery evaluation: each trial draws `draw_per_identity`
/// gallery samples per identity from the pool (without replacement) and
/// scores every query against that gallery.
inline EvalReport evaluate_protocol(const RetrievalInstance& inst, const ProtocolConfig& cfg) {
    inst.validate();
    cfg.validate();
    std::map<int, std::vector<std::size_t>> pool;
    for (std::size_t j = 0; j < inst.gallery.size(); ++j) pool[inst.gallery_labels[j]].push_back(j);
    if (cfg.draw_per_identity > 0) {
        for (const auto& [id, members] : pool) {
            if (members.size() < cfg.draw_per_identity) {
                throw ProtocolError("gallery draw of " + std::to_string(cfg.draw_per_identity) +
                                    " per identity exceeds the " + std::to_string(members.size()) +
                                    " pool samples of identity " + std::to_string(id));
            }
        }
    }

    EvalReport report;
    report.tag = inst.tag;
    report.protocol = cfg;
    report.queries = inst.query.size();
    report.pool_size = inst.gallery.size();
    std::mt19937_64 rng(cfg.seed);
    for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
        std::vector<std::size_t> chosen;
        for (const auto& [id, members] : pool) {
            if (cfg.draw_per_identity == 0) {
                chosen.insert(chosen.end(), members.begin(), members.end());
                continue;
            }
            std::vector<std::size_t> pick(members);
            // Partial Fisher-Yates: the first draw_per_identity slots are the sample.
            for (std::size_t i = 0; i < cfg.draw_per_identity; ++i) {
                std::uniform_int_distribution<std::size_t> u(i, pick.size() - 1);
                std::swap(pick[i], pick[u(rng)]);
            }
            chosen.insert(chosen.end(), pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(cfg.draw_per_identity));
        }
        std::sort(chosen.begin(), chosen.end());
        Embeddings gallery;
        std::vector<int> labels;
        for (std::size_t j : chosen) {
            gallery.push_back(inst.gallery[j]);
            labels.push_back(inst.gallery_labels[j]);
        }
        const auto rankings = rank_all(inst.query, gallery);
        const std::vector<double> curve = cmc(rankings, inst.query_labels, labels);
        TrialResult t;
        for (std::size_t i = 0; i < kReportRanks.size(); ++i) t.cmc[i] = cmc_at(curve, kReportRanks[i]);
        t.map = mean_ap(rankings, inst.query_labels, labels);
        t.gallery_size = gallery.size();
        report.trials.push_back(t);
        if (report.curve.empty() || curve.size() < report.curve.size()) report.curve.resize(curve.size(), 0.0);
        for (std::size_t k = 0; k < report.curve.size(); ++k) report.curve[k] += curve[k];
    }
    for (double& v : report.curve) v /= static_cast<double>(cfg.trials);
    detail::aggregate(report);
    return report;
}

/// Key/value block followed by a per-trial table.
inline void write_report(std::ostream& out, const EvalReport& r, std::span<const std::string> comments = {}) {
    using text::format_double;
    for (const std::string& c : comments) out << "# " << c << '\n';
    out << "protocol=" << to_string(r.tag) << '\n'
        << "trials=" << r.trials.size() << '\n'
        << "draw_per_identity=" << r.protocol.draw_per_identity << '\n'
        << "seed=" << r.protocol.seed << '\n'
        << "queries=" << r.queries << '\n'
        << "gallery_pool=" << r.pool_size << '\n';
    for (std::size_t i = 0; i < kReportRanks.size(); ++i) {
        out << "mean.rank" << kReportRanks[i] << '=' << format_double(r.mean.cmc[i]) << '\n'
            << "std.rank" << kReportRanks[i] << '=' << format_double(r.stddev.cmc[i]) << '\n';
    }
    out << "mean.mAP=" << format_double(r.mean.map) << '\n' << "std.mAP=" << format_double(r.stddev.map) << '\n';
    out << "curve=";
    for (std::size_t k = 0; k < r.curve.size(); ++k) out << (k ? " " : "") << format_double(r.curve[k]);
    out << "\n\ntrial\tgallery\trank1\trank10\trank20\tmAP\n";
    for (std::size_t t = 0; t < r.trials.size(); ++t) {
        const TrialResult& x = r.trials[t];
        out << t << '\t' << x.gallery_size;
        for (double v : x.cmc) out << '\t' << format_double(v);
        out << '\t' << format_double(x.map) << '\n';
    }
    out << "mean\t" << r.mean.gallery_size;
    for (double v : r.mean.cmc) out << '\t' << format_double(v);
    out << '\t' << format_double(r.mean.map) << '\n';
}

inline void write_report(const EvalReport& r, const std::string& path, std::span<const std::string> comments = {}) {
    auto out = text::open_output(path);
    write_report(out, r, comments);
    if (!out) throw Error("failed writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// 2-D projection.

struct SymmetricEigen {
    std::vector<double> values;                 // descending
    std::vector<std::vector<double>> vectors;   // vectors[i] pairs with values[i]
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
inline SymmetricEigen jacobi_eigen(std::vector<double> a, std::size_t n, int max_sweeps = 100) {
    if (a.size() != n * n) throw DimensionError("jacobi_eigen: matrix is not n x n");
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    auto A = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0, total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                total += A(i, j) * A(i, j);
                if (i != j) off += A(i, j) * A(i, j);
            }
        }
        if (off <= 1e-30 * total || off == 0.0) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = A(p, q);
                if (apq == 0.0) continue;
                const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = A(k, p), akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = A(p, k), aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k * n + p], vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return A(x, x) > A(y, y); });
    SymmetricEigen out;
    for (std::size_t i : order) {
        out.values.push_back(A(i, i));
        std::vector<double> col(n);
        for (std::size_t k = 0; k < n; ++k) col[k] = v[k * n + i];
        out.vectors.push_back(std::move(col));
    }
    return out;
}

struct Projection {
    std::vector<std::array<double, 2>> points;
    std::array<std::vector<double>, 2> axes;  // principal directions, first nonzero loading positive
    std::array<double, 2> variance{};         // covariance eigenvalues of the two axes
    bool degenerate = false;                  // input had zero variance
};

/// Centers the rows and projects them onto the top two principal directions
/// of the population covariance.
inline Projection project_2d(const Embeddings& x) {
    if (x.size() < 2) throw ParameterError("project_2d needs at least 2 embeddings");
    const std::size_t d = x.front().size();
    if (d < 2) throw ParameterError("project_2d needs dimension >= 2");
    for (const auto& row : x) {
        if (row.size() != d) throw DimensionError("project_2d: inconsistent embedding dimensions");
    }
    const double n = static_cast<double>(x.size());
    std::vector<double> mean(d, 0.0);
    for (const auto& row : x) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
    }
    for (double& m : mean) m /= n;
    Embeddings centered(x);
    for (auto& row : centered) {
        for (std::size_t j = 0; j < d; ++j) row[j] -= mean[j];
    }
    std::vector<double> cov(d * d, 0.0);
    for (const auto& row : centered) {
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = i; j < d; ++j) cov[i * d + j] += row[i] * row[j];
        }
    }
    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i; j < d; ++j) cov[j * d + i] = cov[i * d + j] /= n;
        trace += cov[i * d + i];
    }

    Projection out;
    out.points.assign(x.size(), {0.0, 0.0});
    if (!(trace > 0.0)) {
        out.degenerate = true;
        for (auto& axis : out.axes) axis.assign(d, 0.0);
        return out;
    }
    SymmetricEigen eig = jacobi_eigen(std::move(cov), d);
    for (std::size_t a = 0; a < 2; ++a) {
        std::vector<double>& axis = eig.vectors[a];
        // Loadings below this are treated as zero when fixing the sign.
        const double tiny = 1e-12;
        const auto lead = std::find_if(axis.begin(), axis.end(), [&](double v) { return std::abs(v) > tiny; });
        if (lead != axis.end() && *lead < 0) {
            for (double& v : axis) v = -v;
        }
        out.axes[a] = axis;
        out.variance[a] = std::max(0.0, eig.values[a]);
        for (std::size_t i = 0; i < centered.size(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += centered[i][j] * axis[j];
            out.points[i][a] = s;
        }
    }
    return out;
}

/// Tab-separated rows: id, identity, modality, x, y.
inline void write_projection_tsv(std::ostream& out, const Projection& p, std::span<const DumpRow> rows,
                                 std::span<const std::string> comments = {}) {
    if (rows.size() != p.points.size()) throw DimensionError("projection and row counts differ");
    for (const std::string& c : comments) out << "# " << c << '\n';
    if (p.degenerate) out << "# degenerate: zero-variance input, all points at the origin\n";
    out << "id\tidentity\tmodality\tx\ty\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out << rows[i].id << '\t' << rows[i].identity << '\t' << to_string(rows[i].modality) << '\t'
            << text::format_double(p.points[i][0]) << '\t' << text::format_double(p.points[i][1]) << '\n';
    }
}

/// Minimal scatter plot: colour by identity, circles for visible and squares
/// for infrared.
inline void write_projection_svg(std::ostream& out, const Projection& p, std::span<const DumpRow> rows) {
    if (rows.size() != p.points.size()) throw DimensionError("projection and row counts differ");
    constexpr double size = 480.0, pad = 20.0;
    double lo[2] = {0, 0}, hi[2] = {0, 0};
    for (std::size_t a = 0; a < 2; ++a) {
        lo[a] = hi[a] = p.points.front()[a];
        for (const auto& pt : p.points) lo[a] = std::min(lo[a], pt[a]), hi[a] = std::max(hi[a], pt[a]);
        if (hi[a] - lo[a] < 1e-12) lo[a] -= 1.0, hi[a] += 1.0;
    }
    auto px = [&](double v, std::size_t a) {
        const double u = (v - lo[a]) / (hi[a] - lo[a]);
        return a == 0 ? pad + u * (size - 2 * pad) : size - pad - u * (size - 2 * pad);
    };
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int hue = static_cast<int>((static_cast<unsigned>(rows[i].identity) * 137u) % 360u);
        const double x = px(p.points[i][0], 0), y = px(p.points[i][1], 1);
        if (rows[i].modality == Modality::visible) {
            out << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"4\"";
        } else {
            out << "<rect x=\"" << x - 4 << "\" y=\"" << y - 4 << "\" width=\"8\" height=\"8\"";
        }
        out << " fill=\"hsl(" << hue << ",70%,50%)\"><title>" << rows[i].id << "</title></"
            << (rows[i].modality == Modality::visible ? "circle" : "rect") << ">\n";
    }
    out << "</svg>\n";
}

}  // namespace cmreid
