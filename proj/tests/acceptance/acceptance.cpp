// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--workdir DIR] [--only N ...] [--known-failure N ...]
//
// Exit status is 0 when every selected criterion passes. A criterion listed
// with --known-failure still prints its FAIL line but does not change the
// exit status; see README for the one that is listed in the test registry.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "cmreid/cli.hpp"
#include "cmreid/cmreid.hpp"

namespace fs = std::filesystem;
using namespace cmreid;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int precision = 4) {
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

std::string sci(double v) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(2) << v;
    return s.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient suite.

Outcome gradient_suite() {
    const auto start = Clock::now();
    double worst = 0.0;
    std::string worst_name;
    std::vector<std::string> failed;
    for (const std::string& name : grad_suite_names()) {
        const GradSuiteResult r = run_grad_suite(name);
        if (r.max_relative_error >= worst) {
            worst = r.max_relative_error;
            worst_name = name + "/" + r.worst_param;
        }
        if (!r.pass || r.configs != 50) failed.push_back(name);
    }
    const double secs = seconds_since(start);
    std::string detail = std::to_string(grad_suite_names().size()) + " suites x 50 configs, max rel err " + sci(worst) +
                         " (" + worst_name + ") <= 1e-4, " + fmt(secs, 3) + " s < 60 s";
    for (const std::string& f : failed) detail += "; failed " + f;
    return {failed.empty() && secs < 60.0, detail};
}

// ---------------------------------------------------------------------------
// 2. Retrieval metrics against brute-force enumeration.

Outcome oracle_equivalence() {
    const auto start = Clock::now();
    std::mt19937_64 rng(20240601);
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
        const auto r = oracle::random_instance(rng);
        const auto rankings = rank_all(r.q, r.g);
        const auto curve = cmc(rankings, r.ql, r.gl);
        const auto o = oracle::brute_force_metrics(r.q, r.ql, r.g, r.gl);
        if (curve.size() != o.cmc.size()) return {false, "instance " + std::to_string(t) + ": curve length differs"};
        for (std::size_t k = 0; k < curve.size(); ++k) worst = std::max(worst, std::abs(curve[k] - o.cmc[k]));
        worst = std::max(worst, std::abs(mean_ap(rankings, r.ql, r.gl) - o.map));
    }
    const double secs = seconds_since(start);
    return {worst <= 1e-12 && secs < 10.0,
            "200 instances, max |diff| " + sci(worst) + " <= 1e-12, " + fmt(secs, 3) + " s < 10 s"};
}

// ---------------------------------------------------------------------------
// 3. Closed-form loss values.

Tensor row(std::initializer_list<double> v) { return Tensor(Shape{1, v.size()}, std::vector<double>(v)); }

Tensor one_hot(std::size_t d, std::size_t k) {
    Tensor t(Shape{1, d}, 0.0);
    t[k] = 1.0;
    return t;
}

TupleEmbeddings slots(ad::Tape& tape, const std::array<Tensor, 6>& s) {
    TupleEmbeddings b;
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t m = 0; m < 2; ++m) b.slots[r][m] = tape.constant(s[r * 2 + m]);
    }
    return b;
}

Outcome closed_forms() {
    constexpr double e = std::numbers::e;
    const double r = std::sqrt(0.5);
    const Tensor x = Tensor::vector({1, 0}), y = Tensor::vector({0, 1});
    struct Case {
        const char* name;
        double got;
        double want;
    };
    std::vector<Case> cases;
    auto cmkd = [](Tensor a, Tensor b, Tensor c, Tensor d) {
        return cmkd_loss(std::vector<CmkdTuple>{{std::move(a), std::move(b), std::move(c), std::move(d)}});
    };
    cases.push_back({"cmkd identical", cmkd(x, x, x, x), 0.0});
    cases.push_back({"cmkd cross-swapped", cmkd(x, y, y, x), 4.0});
    cases.push_back({"cos triplet a=p", cos_margin_triplet(x, x, y, 0.3), 0.0});
    cases.push_back({"cos triplet a=n", cos_margin_triplet(x, y, x, 0.3), 1.3});
    cases.push_back({"cos triplet diagonal", cos_margin_triplet(x, Tensor::vector({r, r}), Tensor::vector({r, -r}), 0.3), 0.3});
    cases.push_back({"at a=p", at_triplet(x, x, y), 0.0});
    cases.push_back({"at a=n", at_triplet(x, y, x), 2.0});
    cases.push_back({"at diagonal", at_triplet(x, Tensor::vector({r, r}), Tensor::vector({-1, 0})), 0.292893218813452476});
    {
        std::array<Tensor, 6> orth;
        for (std::size_t k = 0; k < 6; ++k) orth[k] = one_hot(6, k);
        ad::Tape tape;
        const auto b = slots(tape, orth);
        cases.push_back({"eat_rgb all-orthogonal", eat_directional(b, Modality::visible).item(), 5.43656365691809047});
        cases.push_back({"eat_ir all-orthogonal", eat_directional(b, Modality::infrared).item(), 5.43656365691809047});
        LossConfig off;
        off.compactness = false;
        cases.push_back({"eat all-orthogonal, no compactness", eat_loss(b, off).item(), 10.8731273138361809});
    }
    {
        const Tensor u = one_hot(4, 0), v = one_hot(4, 1);
        ad::Tape tape;
        const auto b = slots(tape, {u, v, v, u, one_hot(4, 2), one_hot(4, 3)});
        cases.push_back({"eat best case", eat_directional(b, Modality::visible).item(), 2.0});
    }
    {
        const Tensor u = one_hot(3, 0);
        ad::Tape tape;
        const auto b = slots(tape, {u, u, one_hot(3, 1), one_hot(3, 2), u, u});
        cases.push_back({"eat worst case", eat_directional(b, Modality::visible).item(), 14.7781121978613005});
    }
    auto comp = [](const Tensor& a, const Tensor& b) {
        ad::Tape tape;
        return compactness(tape.constant(a), tape.constant(b)).item();
    };
    cases.push_back({"compactness [1,1]", comp(row({1, 1}), row({1, 1})), 4.0 * e});
    cases.push_back({"compactness [1,-1]", comp(row({1, -1}), row({1, -1})), 4.0});
    cases.push_back({"compactness [-1,-1]", comp(row({-1, -1}), row({-1, -1})), 4.0 * e});
    cases.push_back({"id uniform K=4", id_loss(Tensor::vector({0, 0, 0, 0}), 1, 0.0), std::log(4.0)});
    cases.push_back({"id smoothed K=2", id_loss(Tensor::vector({0, 0}), 0, 0.1), std::log(2.0)});
    cases.push_back({"id confident", id_loss(Tensor::vector({1000, 0, 0}), 0, 0.0), 0.0});

    double worst = 0.0;
    std::string worst_name;
    for (const Case& c : cases) {
        const double d = std::abs(c.got - c.want);
        if (d >= worst) {
            worst = d;
            worst_name = c.name;
        }
    }
    // Bounds over seeded random triplets.
    std::mt19937_64 rng(77);
    std::normal_distribution<double> n(0, 1);
    std::size_t violations = 0;
    for (int t = 0; t < 1000; ++t) {
        std::array<Tensor, 6> s;
        for (Tensor& v : s) {
            v = Tensor(Shape{1, 5}, 0.0);
            for (double& z : v.values()) z = n(rng);
        }
        const double at = at_triplet(s[0].reshaped({5}), s[3].reshaped({5}), s[5].reshaped({5}));
        violations += at < 0.0 || at > 2.0;
        ad::Tape tape;
        const auto terms = eat_directional_terms(slots(tape, s), Modality::visible);
        for (const ad::Var& v : {terms.cross, terms.same}) {
            const double ex = std::exp(v.value()[0]);
            violations += ex < 1.0 || ex > e * e * (1 + 1e-15);
        }
    }
    return {worst <= 1e-9 && violations == 0,
            std::to_string(cases.size()) + " closed forms, max |diff| " + sci(worst) + " (" + worst_name +
                ") <= 1e-9; AT in [0,2] and exp summands in [1,e^2] on 1000 random triplets, " +
                std::to_string(violations) + " violations"};
}

// ---------------------------------------------------------------------------
// 4. GeM pooling.

Outcome gem_properties() {
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> u(0.0, 3.0), pd(1.0, 8.0);
    double mean_err = 0.0;
    std::size_t monotone_violations = 0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t c = 1 + t % 4, h = 1 + t % 3, w = 2;
        FeatureMap x(c, h, w);
        for (double& v : x.tensor().values()) v = u(rng);
        const Tensor avg = gem_pool(x, 1.0);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double m = 0.0;
            for (std::size_t i = 0; i < h * w; ++i) m += x.tensor()[ch * h * w + i];
            mean_err = std::max(mean_err, std::abs(avg[ch] - m / static_cast<double>(h * w)));
        }
        double p1 = pd(rng), p2 = pd(rng);
        if (p1 > p2) std::swap(p1, p2);
        const Tensor lo = gem_pool(x, p1), hi = gem_pool(x, p2);
        for (std::size_t ch = 0; ch < c; ++ch) monotone_violations += hi[ch] < lo[ch] - 1e-12;
    }
    // Learnable exponent: gradient of a pooling-sensitive objective.
    double min_grad = INFINITY;
    for (int t = 0; t < 20; ++t) {
        Tensor in(Shape{2, 4, 3}, 0.0);
        for (double& v : in.values()) v = u(rng);
        ad::Tape tape;
        const ad::Var p = tape.variable(Tensor::scalar(3.0));
        tape.backward(ad::sum(ad::gem_pool(tape.constant(in), p)));
        min_grad = std::min(min_grad, std::abs(tape.gradient(p)[0]));
    }
    return {mean_err <= 1e-12 && monotone_violations == 0 && min_grad > 0.0,
            "p=1 vs mean max |diff| " + sci(mean_err) + " <= 1e-12; monotone on 100 inputs (" +
                std::to_string(monotone_violations) + " violations); min |dL/dp| " + sci(min_grad) + " > 0"};
}

// ---------------------------------------------------------------------------
// 5. Non-local residual identity.

Outcome non_local_identity() {
    std::mt19937_64 rng(505);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::size_t mismatches = 0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t c = 1 + t % 8, h = 1 + t % 3, w = 1 + t % 2, a = std::max<std::size_t>(1, c / 2);
        auto fill = [&](Shape s) {
            Tensor m(std::move(s), 0.0);
            for (double& v : m.values()) v = u(rng);
            return m;
        };
        const NonLocalWeights<Tensor> wts{fill({c, a}), fill({c, a}), fill({c, a}), Tensor(Shape{a, c}, 0.0)};
        const FeatureMap x(fill({c, h, w}));
        mismatches += !(non_local(x, wts).tensor() == x.tensor());
    }
    return {mismatches == 0, "W_z = 0 on 100 random maps, " + std::to_string(mismatches) + " not bit-identical"};
}

// ---------------------------------------------------------------------------
// 6. Toy separation experiment.

struct ToyVariant {
    const char* name;
    bool non_local;
    double weight_cmkd;
    RankingLoss ranking;
};

struct ToyScore {
    double rank1 = 0.0;
    double map = 0.0;
};

// 32 identities, 4 samples per identity and modality, (8, 2, 2) maps, noise
// 0.2, offset scale 1. Training: D = 32, N = 8, 2000 steps, lr 1e-2 with 100
// warm-up steps and x0.1 decays at 1000 and 1500. Evaluation embeds an
// independent noise draw and runs 10 thermal-to-rgb trials.
ToyScore toy_run(const ToyVariant& v, std::uint64_t seed) {
    SynthConfig sc;
    sc.identities = 32;
    sc.samples_per_modality = 4;
    sc.shape = {8, 2, 2};
    sc.noise = 0.2;
    sc.modality_offset = 1.0;
    sc.seed = 100 + seed;
    const Dataset train_set = synth_generate(sc);
    sc.draw = 1;
    const Dataset eval_set = synth_generate(sc);

    EncoderConfig ec;
    ec.input_shape = sc.shape;
    ec.embedding_dim = 32;
    ec.non_local = v.non_local;
    ec.seed = seed;
    TrainConfig tc;
    tc.batch_size = 8;
    tc.steps = 2000;
    tc.learning_rate = 1e-2;
    tc.warmup_steps = 100;
    tc.decay_steps = {1000, 1500};
    tc.seed = seed;
    tc.loss.weight_cmkd = v.weight_cmkd;
    tc.loss.ranking = v.ranking;

    const TrainResult r = train(train_set, ec, tc);
    const auto inst = retrieval_from_dump(embed_dataset(eval_set, r.checkpoint.make_encoder()), ProtocolTag::thermal_to_rgb);
    ProtocolConfig pc;
    pc.trials = 10;
    pc.seed = seed;
    const EvalReport rep = evaluate_protocol(inst, pc);
    return {rep.mean.cmc[0], rep.mean.map};
}

Outcome toy_experiment() {
    const auto start = Clock::now();
    const std::vector<ToyVariant> variants{
        {"full", true, 1.0, RankingLoss::enumerate_angular},
        {"eat-only", false, 0.0, RankingLoss::enumerate_angular},
        {"baseline", false, 0.0, RankingLoss::euclidean_triplet},
    };
    constexpr int kSeeds = 5;
    std::vector<ToyScore> mean(variants.size());
    std::vector<std::vector<double>> maps(variants.size());
    for (std::size_t i = 0; i < variants.size(); ++i) {
        for (int s = 0; s < kSeeds; ++s) {
            const ToyScore t = toy_run(variants[i], static_cast<std::uint64_t>(s));
            mean[i].rank1 += t.rank1 / kSeeds;
            mean[i].map += t.map / kSeeds;
            maps[i].push_back(t.map);
        }
    }
    const double secs = seconds_since(start);
    const double full = mean[0].map, eat = mean[1].map, base = mean[2].map;
    const bool a = mean[0].rank1 >= 0.95;
    const bool ordered = full >= eat && eat >= base;
    const bool fallback = eat < base && full > base;
    std::ostringstream d;
    d << "(a) full rank-1 " << fmt(mean[0].rank1) << (a ? " >= " : " < ") << "0.95; (b) mean mAP over " << kSeeds
      << " seeds full " << fmt(full) << ", eat-only " << fmt(eat) << ", baseline " << fmt(base);
    if (ordered) {
        d << " (ordered)";
    } else if (fallback) {
        d << " (eat-only below baseline by " << fmt(base - eat) << "; full > baseline)";
    } else {
        d << " (order not met: full-eat " << fmt(full - eat) << ", eat-baseline " << fmt(eat - base)
          << ", full-baseline " << fmt(full - base) << ")";
    }
    d << "; " << fmt(secs, 3) << " s < 300 s";
    return {a && (ordered || fallback) && secs < 300.0, d.str()};
}

// ---------------------------------------------------------------------------
// 7 and 8. Command-level determinism and protocol structure.

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int cli(std::vector<std::string> args, std::string* err = nullptr) {
    args.insert(args.begin(), "cmreid");
    std::vector<const char*> argv;
    for (const std::string& a : args) argv.push_back(a.c_str());
    std::ostringstream out, e;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, e);
    if (err) *err = e.str();
    return code;
}

Outcome determinism(const fs::path& work) {
    std::string err;
    for (const char* run : {"run_a", "run_b"}) {
        if (cli({"train", "--synth", "--identities", "8", "--steps", "200", "--seed", "7", "--out", (work / run).string()},
                &err) != 0) {
            return {false, std::string("train failed: ") + err};
        }
    }
    const std::string ha = slurp(work / "run_a" / "history.tsv"), hb = slurp(work / "run_b" / "history.tsv");
    const std::string ck = (work / "run_a" / "checkpoint.txt").string();
    for (const char* rep : {"report_a.txt", "report_b.txt"}) {
        if (cli({"eval", "--checkpoint", ck, "--synth", "--identities", "8", "--seed", "7", "--trials", "10",
                 "--eval.seed=3", "--out", (work / rep).string()},
                &err) != 0) {
            return {false, std::string("eval failed: ") + err};
        }
    }
    const std::string ra = slurp(work / "report_a.txt"), rb = slurp(work / "report_b.txt");
    const bool same_history = !ha.empty() && ha == hb;
    const bool same_report = !ra.empty() && ra == rb;
    return {same_history && same_report, std::string("train history files ") +
                                             (same_history ? "identical" : "differ") + " (" +
                                             std::to_string(ha.size()) + " bytes); eval --trials 10 reports " +
                                             (same_report ? "identical" : "differ")};
}

Outcome protocol_structure(const fs::path& work) {
    const std::string report = slurp(work / "report_a.txt");
    if (report.empty()) return {false, "no report from the determinism run"};
    std::istringstream in(report);
    std::string line;
    bool in_table = false;
    std::vector<std::vector<double>> rows;
    std::vector<double> mean_row;
    while (std::getline(in, line)) {
        if (line.rfind("trial\t", 0) == 0) {
            in_table = true;
            continue;
        }
        if (!in_table || line.empty()) continue;
        std::istringstream ls(line);
        std::string first;
        std::getline(ls, first, '\t');
        std::vector<double> cells;
        for (std::string c; std::getline(ls, c, '\t');) cells.push_back(std::stod(c));
        (first == "mean" ? mean_row : rows.emplace_back()) = cells;
    }
    double worst = 0.0;
    if (mean_row.size() == 5) {
        for (std::size_t k = 1; k < 5; ++k) {
            double s = 0.0;
            for (const auto& r : rows) s += r.at(k);
            worst = std::max(worst, std::abs(s / static_cast<double>(rows.size()) - mean_row[k]));
        }
    }
    const bool ok = rows.size() == 10 && mean_row.size() == 5 && worst <= 1e-12 &&
                    report.find("\ntrials=10\n") != std::string::npos;
    return {ok, std::to_string(rows.size()) + " per-trial rows and " + (mean_row.empty() ? "no" : "a") +
                    " mean row; mean vs per-trial average max |diff| " + sci(worst)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string workdir = (fs::temp_directory_path() / "cmreid_acceptance").string();
    std::vector<int> only, known;
    app.add_option("--workdir", workdir, "scratch directory for command-level runs");
    app.add_option("--only", only, "run only these criteria");
    app.add_option("--known-failure", known, "criteria whose failure does not change the exit status");
    CLI11_PARSE(app, argc, argv);

    const fs::path work(workdir);
    fs::remove_all(work);
    fs::create_directories(work);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient suite", gradient_suite},
        {"retrieval oracle equivalence", oracle_equivalence},
        {"closed-form loss values", closed_forms},
        {"GeM properties", gem_properties},
        {"non-local residual identity", non_local_identity},
        {"toy separation experiment", toy_experiment},
        {"determinism", [&] { return determinism(work); }},
        {"protocol structure", [&] { return protocol_structure(work); }},
    };
    const std::set<int> selected(only.begin(), only.end()), expected(known.begin(), known.end());
    int status = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!selected.empty() && !selected.count(id)) continue;
        // Criterion 8 reads the report written by 7.
        if (id == 8 && !selected.empty() && !selected.count(7)) determinism(work);
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail;
        if (!o.pass && expected.count(id)) std::cout << " (known failure)";
        std::cout << std::endl;
        if (!o.pass && !expected.count(id)) status = 1;
    }
    return status;
}
