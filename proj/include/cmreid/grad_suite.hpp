#pragma once

// Seeded finite-difference checks of every loss and network block. Each suite
// draws a random configuration per seed, cycling the embedding dimension
// through {2, 8, 64}.

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmreid/autodiff.hpp"
#include "cmreid/encoder.hpp"
#include "cmreid/error.hpp"
#include "cmreid/grad_check.hpp"
#include "cmreid/losses.hpp"

namespace cmreid {

struct GradSuiteOptions {
    std::size_t configs = 50;
    double step = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    /// Adds this to the first analytic gradient element of every check, to
    /// confirm that the suite can fail.
    double inject_bug = 0.0;
};

struct GradSuiteResult {
    std::string name;
    std::size_t configs = 0;
    double max_relative_error = 0.0;
    std::size_t worst_config = 0;
    std::string worst_param;  // parameter holding the largest error
    bool pass = false;
    double seconds = 0.0;
};

namespace detail {

inline constexpr std::size_t kSuiteDims[] = {2, 8, 64};

struct SuiteDraw {
    std::mt19937_64 rng;
    std::size_t dim;
    std::size_t tuples;

    Tensor uniform(Shape s, double lo, double hi) {
        std::uniform_real_distribution<double> u(lo, hi);
        std::vector<double> v(shape_size(s));
        for (double& x : v) x = u(rng);
        return Tensor(std::move(s), std::move(v));
    }
    Tensor rows(double scale = 1.0) { return uniform({tuples, dim}, -scale, scale); }

    /// Rows of magnitude [1.5e-3, 3e-3], one random sign per row. At unit
    /// scale the compactness term is a step function of each element's sign
    /// relative to the row mean (transition width ~1e-12 / |mean|) and flat
    /// elsewhere; near the origin, with the mean bounded away from zero, the
    /// norm guard gives it a slope central differences resolve.
    Tensor small_rows(std::size_t count) {
        Tensor t = uniform({count, dim}, 1.5e-3, 3e-3);
        for (std::size_t r = 0; r < count; ++r) {
            if (rng() & 1) {
                for (std::size_t j = 0; j < dim; ++j) t[r * dim + j] = -t[r * dim + j];
            }
        }
        return t;
    }

    /// Width for block suites, cycling {2, 4, 8}.
    std::size_t block_width() const { return dim == 2 ? 2 : dim == 8 ? 4 : 8; }
};

inline SuiteDraw suite_draw(std::uint64_t seed, std::size_t config) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(config), 0x67u};
    SuiteDraw d{std::mt19937_64(seq), kSuiteDims[config % 3], 0};
    d.tuples = 1 + std::uniform_int_distribution<std::size_t>(0, 3)(d.rng);
    return d;
}

inline TupleEmbeddings tuple_slots(std::span<const ad::Var> v) {
    TupleEmbeddings e;
    std::size_t k = 0;
    for (Role r : {Role::anchor, Role::positive, Role::negative}) {
        for (Modality m : kModalities) e.at(r, m) = v[k++];
    }
    return e;
}

struct SuiteCase {
    TapeObjective objective;
    std::vector<Tensor> params;
    std::vector<std::string> names;
};

inline const std::vector<std::string> kSlotNames{"anchor.visible",   "anchor.infrared",  "positive.visible",
                                                 "positive.infrared", "negative.visible", "negative.infrared"};

using SuiteBuilder = std::function<SuiteCase(SuiteDraw&)>;

inline std::vector<Tensor> six_slots(SuiteDraw& d) {
    std::vector<Tensor> out;
    for (int i = 0; i < 6; ++i) out.push_back(d.rows());
    return out;
}

inline EncoderConfig small_encoder(SuiteDraw& d, bool non_local) {
    EncoderConfig cfg;
    cfg.input_shape = {3, 2, 2};
    cfg.private_widths = {4};
    cfg.shared_widths = {6};
    cfg.embedding_dim = d.block_width();
    cfg.non_local = non_local;
    cfg.tied_private_init = false;
    // p >= 2 keeps the clamp before GeM continuously differentiable.
    cfg.gem_p = std::uniform_real_distribution<double>(2.0, 4.0)(d.rng);
    cfg.seed = d.rng();
    return cfg;
}

inline const std::vector<std::pair<std::string, SuiteBuilder>>& suite_table() {
    static const std::vector<std::pair<std::string, SuiteBuilder>> table = {
        {"cmkd",
         [](SuiteDraw& d) {
             return SuiteCase{[](ad::Tape&, std::span<const ad::Var> v) { return cmkd_loss(v[0], v[1], v[2], v[3]); },
                              {d.rows(), d.rows(), d.rows(), d.rows()},
                              {"rgb_anchor", "ir_positive", "ir_anchor", "rgb_positive"}};
         }},
        {"cos_triplet",
         [](SuiteDraw& d) {
             return SuiteCase{
                 [](ad::Tape&, std::span<const ad::Var> v) { return cos_margin_triplet(v[0], v[1], v[2], 0.3); },
                 {d.rows(), d.rows(), d.rows()},
                 {"anchor", "positive", "negative"}};
         }},
        {"at_triplet",
         [](SuiteDraw& d) {
             return SuiteCase{[](ad::Tape&, std::span<const ad::Var> v) { return at_triplet(v[0], v[1], v[2]); },
                              {d.rows(), d.rows(), d.rows()},
                              {"anchor", "positive", "negative"}};
         }},
        {"eat_rgb",
         [](SuiteDraw& d) {
             return SuiteCase{[](ad::Tape&, std::span<const ad::Var> v) {
                                  return eat_directional(tuple_slots(v), Modality::visible);
                              },
                              six_slots(d), kSlotNames};
         }},
        {"eat_ir",
         [](SuiteDraw& d) {
             return SuiteCase{[](ad::Tape&, std::span<const ad::Var> v) {
                                  return eat_directional(tuple_slots(v), Modality::infrared);
                              },
                              six_slots(d), kSlotNames};
         }},
        {"compactness",
         [](SuiteDraw& d) {
             const bool negated = d.rng() & 1;
             return SuiteCase{[negated](ad::Tape&, std::span<const ad::Var> v) { return compactness(v[0], v[1], negated); },
                              {d.small_rows(1), d.small_rows(1)},
                              {"rgb_anchor", "ir_anchor"}};
         }},
        {"eat",
         [](SuiteDraw& d) {
             // The compactness summand is checked by its own suite: at unit
             // scale its slope (~1e-12) is below the difference noise, and in
             // the small regime the angular kinks of the other summands sit
             // within one step.
             LossConfig cfg;
             cfg.compactness = false;
             return SuiteCase{[cfg](ad::Tape&, std::span<const ad::Var> v) { return eat_loss(tuple_slots(v), cfg); },
                              six_slots(d), kSlotNames};
         }},
        {"euclidean_triplet",
         [](SuiteDraw& d) {
             return SuiteCase{
                 [](ad::Tape&, std::span<const ad::Var> v) { return euclidean_triplet(tuple_slots(v), 0.3); },
                 six_slots(d), kSlotNames};
         }},
        {"id",
         [](SuiteDraw& d) {
             const std::size_t classes = 2 + d.rng() % 6;
             std::vector<std::size_t> labels;
             for (std::size_t i = 0; i < 2 * d.tuples; ++i) labels.push_back(d.rng() % classes);
             return SuiteCase{[labels](ad::Tape&, std::span<const ad::Var> v) { return id_loss(v[0], labels, 0.1); },
                              {d.uniform({2 * d.tuples, classes}, -3, 3)},
                              {"logits"}};
         }},
        {"total",
         [](SuiteDraw& d) {
             const std::size_t classes = 2 + d.rng() % 4;
             const std::size_t priv = 1 + d.rng() % 5;
             std::vector<std::size_t> labels;
             for (std::size_t i = 0; i < 2 * d.tuples; ++i) labels.push_back(d.rng() % classes);
             LossConfig cfg;
             cfg.compactness = false;  // see the eat suite
             std::vector<Tensor> params = six_slots(d);
             for (int i = 0; i < 4; ++i) params.push_back(d.uniform({d.tuples, priv}, 0.0, 1.0));
             std::vector<std::string> names = kSlotNames;
             for (const char* n : {"private.rgb_anchor", "private.rgb_positive", "private.ir_anchor", "private.ir_positive",
                                   "logits"}) {
                 names.push_back(n);
             }
             params.push_back(d.uniform({2 * d.tuples, classes}, -2, 2));
             return SuiteCase{[cfg, labels](ad::Tape&, std::span<const ad::Var> v) {
                                  const PrivateFeatures pf{v[6], v[7], v[8], v[9]};
                                  return total_loss(tuple_slots(v), pf, v[10], labels, cfg).objective;
                              },
                              params, names};
         }},
        {"gem",
         [](SuiteDraw& d) {
             const std::size_t positions = 1 + d.rng() % 6;
             return SuiteCase{[](ad::Tape&, std::span<const ad::Var> v) { return ad::sum(ad::gem_pool(v[0], v[1])); },
                              {d.uniform({d.tuples, positions, d.dim}, 0.1, 2.0),
                               Tensor::scalar(std::uniform_real_distribution<double>(1.0, 4.0)(d.rng))},
                              {"input", "p"}};
         }},
        {"non_local",
         [](SuiteDraw& d) {
             const std::size_t c = d.block_width(), a = std::max<std::size_t>(1, c / 2), positions = 1 + d.rng() % 4;
             const double s = 1.0 / std::sqrt(static_cast<double>(c));
             const Tensor weights = d.uniform({d.tuples, positions, c}, -1, 1);
             return SuiteCase{[weights](ad::Tape& t, std::span<const ad::Var> v) {
                                  const NonLocalWeights<ad::Var> w{v[1], v[2], v[3], v[4]};
                                  return ad::sum(ad::mul(non_local_block(v[0], w), t.constant(weights)));
                              },
                              {d.uniform({d.tuples, positions, c}, -1, 1), d.uniform({c, a}, -s, s),
                               d.uniform({c, a}, -s, s), d.uniform({c, a}, -s, s), d.uniform({a, c}, -s, s)},
                              {"input", "query", "key", "value", "out"}};
         }},
        {"encoder",
         [](SuiteDraw& d) {
             const EncoderConfig cfg = small_encoder(d, d.rng() & 1);
             const TwoStreamEncoder enc(cfg);
             std::vector<Tensor> params;
             std::vector<std::string> names;
             // Wider than the init range so attention is far from uniform.
             visit_params(enc.weights(), [&](const std::string& name, const Tensor& t) {
                 params.push_back(name.find("gem_p") != std::string::npos ? t : d.uniform(t.shape(), -1, 1));
                 names.push_back(name);
             });
             std::vector<FeatureMap> samples;
             for (std::size_t i = 0; i < d.tuples; ++i) samples.emplace_back(d.uniform(cfg.input_shape, -1, 1));
             const Modality m = d.rng() & 1 ? Modality::infrared : Modality::visible;
             const EncoderWeights<Tensor> layout = enc.weights();
             return SuiteCase{[cfg, samples, m, layout](ad::Tape& t, std::span<const ad::Var> v) {
                                  std::size_t k = 0;
                                  const auto w = map_params<ad::Var>(layout, [&](const Tensor&) { return v[k++]; });
                                  const EncodeOutput out = encode_batch(t, w, cfg, samples, m);
                                  return ad::add(ad::sum(out.embedding), ad::sum(out.private_pooled));
                              },
                              params, names};
         }},
    };
    return table;
}

}  // namespace detail

inline std::vector<std::string> grad_suite_names() {
    std::vector<std::string> out;
    for (const auto& [name, builder] : detail::suite_table()) out.push_back(name);
    return out;
}

inline GradSuiteResult run_grad_suite(const std::string& name, const GradSuiteOptions& opt = {}) {
    const auto& table = detail::suite_table();
    const auto it = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.first == name; });
    if (it == table.end()) throw ParameterError("unknown gradient suite '" + name + "'");
    GradSuiteResult result;
    result.name = name;
    result.configs = opt.configs;
    const auto start = std::chrono::steady_clock::now();
    GradCheckOptions gc;
    gc.step = opt.step;
    gc.tolerance = opt.tolerance;
    if (opt.inject_bug != 0.0) {
        gc.perturb_analytic = [bug = opt.inject_bug](std::vector<Tensor>& g) { g.front()[0] += bug; };
    }
    for (std::size_t c = 0; c < opt.configs; ++c) {
        detail::SuiteDraw draw = detail::suite_draw(opt.seed, c);
        const detail::SuiteCase sc = it->second(draw);
        gc.names = sc.names;
        const GradReport report = grad_check(sc.objective, sc.params, gc);
        if (c == 0 || report.max_relative_error > result.max_relative_error) {
            result.max_relative_error = report.max_relative_error;
            result.worst_config = c;
            const auto worst = std::max_element(report.params.begin(), report.params.end(), [](const auto& a, const auto& b) {
                return a.max_relative_error < b.max_relative_error;
            });
            result.worst_param = worst == report.params.end() ? std::string() : worst->name;
        }
    }
    result.pass = result.max_relative_error <= opt.tolerance;
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace cmreid
