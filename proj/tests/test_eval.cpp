#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <random>
#include <sstream>

#include "cmreid/eval.hpp"
#include "oracles.hpp"

namespace cmreid {
namespace {

std::vector<std::size_t> v(std::initializer_list<std::size_t> x) { return x; }

TEST(RankGallery, OneDimensionalExample) {
    const Embeddings g{{0.0}, {3.0}, {1.0}};
    EXPECT_EQ(rank_gallery(std::vector<double>{0.0}, g), v({0, 2, 1}));
}

TEST(RankGallery, SelfRanksFirstAndTiesByIndex) {
    const Embeddings g{{1, 1}, {5, 5}, {-1, -1}, {2, 3}};
    EXPECT_EQ(rank_gallery(g[3], g).front(), 3u);
    // (1,1) and (-1,-1) are equidistant from the origin.
    EXPECT_EQ(rank_gallery(std::vector<double>{0, 0}, g), v({0, 2, 3, 1}));
}

TEST(RankGallery, EmptyGalleryAndDimensionMismatch) {
    EXPECT_THROW(rank_gallery(std::vector<double>{0.0}, {}), ParameterError);
    EXPECT_THROW(rank_gallery(std::vector<double>{0.0}, {{1.0, 2.0}}), DimensionError);
}

TEST(RankGallery, TranslationInvariant) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0, 1);
    for (int t = 0; t < 50; ++t) {
        Embeddings g(20, std::vector<double>(5));
        std::vector<double> q(5), shift(5);
        for (auto& row : g)
            for (double& x : row) x = n(rng);
        for (double& x : q) x = n(rng);
        for (double& x : shift) x = 0.25 * std::round(4 * n(rng));
        Embeddings g2 = g;
        std::vector<double> q2 = q;
        for (auto& row : g2)
            for (std::size_t k = 0; k < 5; ++k) row[k] += shift[k];
        for (std::size_t k = 0; k < 5; ++k) q2[k] += shift[k];
        EXPECT_EQ(rank_gallery(q, g), rank_gallery(q2, g2));
    }
}

TEST(Cmc, ExampleCurves) {
    const std::vector<int> gl{1, 2, 3};
    const std::vector<std::vector<std::size_t>> perfect{{0, 1, 2}, {1, 0, 2}};
    EXPECT_EQ(cmc(perfect, std::vector<int>{1, 2}, gl)[0], 1.0);
    // First matches at ranks 1 and 3.
    const std::vector<std::vector<std::size_t>> r{{0, 1, 2}, {0, 2, 1}};
    EXPECT_EQ(cmc(r, std::vector<int>{1, 2}, gl), (std::vector<double>{0.5, 0.5, 1.0}));
}

TEST(Cmc, MissingIdentityIsProtocolError) {
    const std::vector<std::vector<std::size_t>> r{{0, 1}};
    EXPECT_THROW(cmc(r, std::vector<int>{9}, std::vector<int>{1, 2}), ProtocolError);
    EXPECT_THROW(mean_ap(r, std::vector<int>{9}, std::vector<int>{1, 2}), ProtocolError);
}

TEST(MeanAp, ExampleValues) {
    const std::vector<std::size_t> ranking{0, 1, 2, 3, 4};
    EXPECT_EQ(average_precision(ranking, 7, std::vector<int>{7, 0, 0, 0, 0}), 1.0);
    EXPECT_EQ(average_precision(ranking, 7, std::vector<int>{0, 7, 0, 0, 0}), 0.5);
    EXPECT_NEAR(average_precision(ranking, 7, std::vector<int>{7, 0, 7, 0, 0}), 0.83333333333333333, 1e-15);
}

using oracle::random_instance;
using oracle::RandomInstance;

TEST(Metrics, AgreeWithBruteForce) {
    std::mt19937_64 rng(2024);
    for (int t = 0; t < 200; ++t) {
        const RandomInstance r = random_instance(rng);
        const auto rankings = rank_all(r.q, r.g);
        const auto curve = cmc(rankings, r.ql, r.gl);
        const auto oracle = oracle::brute_force_metrics(r.q, r.ql, r.g, r.gl);
        ASSERT_EQ(curve.size(), oracle.cmc.size());
        for (std::size_t k = 0; k < curve.size(); ++k) EXPECT_NEAR(curve[k], oracle.cmc[k], 1e-12);
        EXPECT_NEAR(mean_ap(rankings, r.ql, r.gl), oracle.map, 1e-12);
        EXPECT_TRUE(std::is_sorted(curve.begin(), curve.end()));
        EXPECT_EQ(curve.back(), 1.0);
    }
}

TEST(Metrics, MapInvariantUnderQueryPermutation) {
    std::mt19937_64 rng(8);
    for (int t = 0; t < 30; ++t) {
        RandomInstance r = random_instance(rng);
        const double base = mean_ap(rank_all(r.q, r.g), r.ql, r.gl);
        std::vector<std::size_t> perm(r.q.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        Embeddings q2;
        std::vector<int> l2;
        for (std::size_t i : perm) q2.push_back(r.q[i]), l2.push_back(r.ql[i]);
        EXPECT_NEAR(mean_ap(rank_all(q2, r.g), l2, r.gl), base, 1e-12);
    }
}

RetrievalInstance clustered(std::size_t ids, std::size_t per_id, double spread, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0, 1);
    RetrievalInstance inst;
    for (std::size_t k = 0; k < ids; ++k) {
        std::vector<double> center(4);
        for (double& c : center) c = 100.0 * static_cast<double>(k) + n(rng);
        for (std::size_t j = 0; j < per_id; ++j) {
            for (Embeddings* side : {&inst.query, &inst.gallery}) {
                std::vector<double> row(center);
                for (double& x : row) x += spread * n(rng);
                side->push_back(row);
            }
            inst.query_labels.push_back(static_cast<int>(k));
            inst.gallery_labels.push_back(static_cast<int>(k));
        }
    }
    return inst;
}

TEST(Protocol, SingleTrialWholePoolMatchesDirectMetrics) {
    const RetrievalInstance inst = clustered(6, 3, 80.0, 1);
    ProtocolConfig cfg;
    cfg.trials = 1;
    cfg.draw_per_identity = 0;
    const EvalReport r = evaluate_protocol(inst, cfg);
    const auto rankings = rank_all(inst.query, inst.gallery);
    const auto curve = cmc(rankings, inst.query_labels, inst.gallery_labels);
    EXPECT_EQ(r.trials.size(), 1u);
    EXPECT_EQ(r.curve, curve);
    EXPECT_EQ(r.mean.cmc[0], curve[0]);
    EXPECT_EQ(r.mean.map, mean_ap(rankings, inst.query_labels, inst.gallery_labels));
    EXPECT_EQ(r.trials[0].gallery_size, inst.gallery.size());
}

TEST(Protocol, TenTrialsAreReproducibleAndAggregated) {
    const RetrievalInstance inst = clustered(8, 4, 60.0, 2);
    ProtocolConfig cfg;
    cfg.seed = 3;
    const EvalReport a = evaluate_protocol(inst, cfg), b = evaluate_protocol(inst, cfg);
    ASSERT_EQ(a.trials.size(), 10u);
    double sum = 0.0;
    for (std::size_t t = 0; t < 10; ++t) {
        EXPECT_EQ(a.trials[t].map, b.trials[t].map);
        EXPECT_EQ(a.trials[t].gallery_size, 8u);
        sum += a.trials[t].map;
    }
    EXPECT_NEAR(a.mean.map, sum / 10, 1e-15);
    std::ostringstream sa, sb;
    write_report(sa, a);
    write_report(sb, b);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_NE(sa.str().find("\nmean\t"), std::string::npos);
}

TEST(Protocol, SeparatedClustersArePerfect) {
    const EvalReport r = evaluate_protocol(clustered(10, 3, 0.5, 5), ProtocolConfig{});
    for (const TrialResult& t : r.trials) {
        EXPECT_EQ(t.cmc[0], 1.0);
        EXPECT_EQ(t.map, 1.0);
    }
}

TEST(Protocol, OversizedDrawIsProtocolError) {
    ProtocolConfig cfg;
    cfg.draw_per_identity = 4;
    EXPECT_THROW(evaluate_protocol(clustered(3, 3, 1.0, 1), cfg), ProtocolError);
    cfg.draw_per_identity = 1;
    cfg.trials = 0;
    EXPECT_THROW(evaluate_protocol(clustered(3, 3, 1.0, 1), cfg), ParameterError);
}

TEST(Protocol, RanksPastGallerySaturate) {
    const std::vector<double> curve{0.25, 0.5, 1.0};
    EXPECT_EQ(cmc_at(curve, 1), 0.25);
    EXPECT_EQ(cmc_at(curve, 20), 1.0);
}

TEST(Project2d, CenteredPlanarDataKeepsVariance) {
    const Embeddings x{{1, 2}, {-1, -2}, {2, -1}, {-2, 1}};
    const Projection p = project_2d(x);
    double in = 0.0, out = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        in += x[i][0] * x[i][0] + x[i][1] * x[i][1];
        out += p.points[i][0] * p.points[i][0] + p.points[i][1] * p.points[i][1];
        // Pairwise distances survive a rotation or reflection.
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double dx = squared_distance(x[i], x[j]);
            const double dp = squared_distance(std::vector<double>{p.points[i][0], p.points[i][1]},
                                               std::vector<double>{p.points[j][0], p.points[j][1]});
            EXPECT_NEAR(dx, dp, 1e-10);
        }
    }
    EXPECT_NEAR(in, out, 1e-10);
}

TEST(Project2d, AntipodalPointsLandOnAxisOne) {
    const Projection p = project_2d({{3, 4, 0}, {-3, -4, 0}});
    EXPECT_NEAR(p.points[0][0], -p.points[1][0], 1e-12);
    EXPECT_NEAR(std::abs(p.points[0][0]), 5.0, 1e-12);
    EXPECT_NEAR(p.points[0][1], 0.0, 1e-12);
    EXPECT_GT(p.axes[0][0], 0.0);  // sign convention
}

TEST(Project2d, MatchesEigenOracleOnRandomCloud) {
    std::mt19937_64 rng(64);
    std::normal_distribution<double> n(0, 1);
    const std::size_t d = 64, m = 200;
    Embeddings x(m, std::vector<double>(d));
    for (auto& row : x)
        for (std::size_t j = 0; j < d; ++j) row[j] = n(rng) * (1.0 + 0.1 * static_cast<double>(j));
    const Projection p = project_2d(x);

    Eigen::MatrixXd X(m, d);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) X(i, j) = x[i][j];
    const Eigen::MatrixXd C = X.rowwise() - X.colwise().mean();
    const Eigen::MatrixXd cov = (C.transpose() * C) / static_cast<double>(m);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    const double top2 = solver.eigenvalues()(d - 1) + solver.eigenvalues()(d - 2);

    double projected = 0.0;
    for (const auto& pt : p.points) projected += pt[0] * pt[0] + pt[1] * pt[1];
    EXPECT_NEAR(projected / static_cast<double>(m), top2, 1e-8);
    EXPECT_NEAR(p.variance[0], solver.eigenvalues()(d - 1), 1e-8);
    EXPECT_NEAR(std::abs(p.axes[0][0]), std::abs(solver.eigenvectors()(0, d - 1)), 1e-6);
}

TEST(Project2d, ZeroVarianceIsFlagged) {
    const Projection p = project_2d({{1, 1}, {1, 1}, {1, 1}});
    EXPECT_TRUE(p.degenerate);
    for (const auto& pt : p.points) EXPECT_EQ(pt, (std::array<double, 2>{0.0, 0.0}));
    EXPECT_THROW(project_2d({{1, 1}}), ParameterError);
    EXPECT_THROW(project_2d({{1}, {2}}), ParameterError);
}

TEST(Project2d, ExportsTsvAndSvg) {
    const Embeddings x{{0, 1}, {1, 0}, {2, 2}};
    std::vector<DumpRow> rows{{"a", 0, Modality::visible, x[0]}, {"b", 0, Modality::infrared, x[1]},
                              {"c", 1, Modality::visible, x[2]}};
    const Projection p = project_2d(x);
    std::ostringstream tsv, svg;
    write_projection_tsv(tsv, p, rows);
    write_projection_svg(svg, p, rows);
    const std::string table = tsv.str();
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
    EXPECT_NE(svg.str().find("<svg"), std::string::npos);
}

}  // namespace
}  // namespace cmreid
