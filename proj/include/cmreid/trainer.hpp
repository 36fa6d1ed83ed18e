#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmreid/autodiff.hpp"
#include "cmreid/data/augment.hpp"
#include "cmreid/data/dataset.hpp"
#include "cmreid/embed.hpp"
#include "cmreid/encoder.hpp"
#include "cmreid/error.hpp"
#include "cmreid/eval.hpp"
#include "cmreid/losses.hpp"
#include "cmreid/sampler.hpp"
#include "cmreid/text_io.hpp"

namespace cmreid {

struct TrainConfig {
    std::size_t batch_size = 8;
    std::size_t steps = 30000;
    double learning_rate = 3e-4;
    double decay_factor = 0.1;
    std::vector<std::size_t> decay_steps{10000, 20000};
    std::size_t warmup_steps = 1000;
    double erase_probability = 0.5;
    /// Global gradient-norm clip; 0 disables clipping.
    double clip_norm = 0.0;
    /// Evaluate on the held-out set every this many steps; 0 disables.
    std::size_t snapshot_every = 0;
    std::uint64_t seed = 0;
    LossConfig loss;

    void validate() const {
        if (batch_size == 0) throw ParameterError("batch_size must be > 0");
        if (steps == 0) throw ParameterError("steps must be > 0");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ParameterError("learning_rate must be > 0");
        if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ParameterError("decay_factor must lie in (0, 1]");
        if (!std::is_sorted(decay_steps.begin(), decay_steps.end()) ||
            std::adjacent_find(decay_steps.begin(), decay_steps.end()) != decay_steps.end()) {
            throw ParameterError("decay_steps must be strictly ascending");
        }
        if (!(erase_probability >= 0.0 && erase_probability <= 1.0)) {
            throw ParameterError("erase_probability must lie in [0, 1]");
        }
        if (!(clip_norm >= 0.0)) throw ParameterError("clip_norm must be >= 0");
        loss.validate();
    }
};

/// Linear warm-up from base/10 to base, then base times decay_factor for every
/// decay step already reached.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
    double lr = cfg.learning_rate;
    if (step < cfg.warmup_steps) {
        lr *= 0.1 + 0.9 * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    for (std::size_t d : cfg.decay_steps) {
        if (step >= d) lr *= cfg.decay_factor;
    }
    return lr;
}

struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

/// Bias-corrected Adam. `names` (optional) label parameters in errors.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state, double lr,
                      std::span<const std::string> names = {}) {
    if (params.size() != grads.size()) throw DimensionError("adam_step: one gradient per parameter required");
    auto label = [&](std::size_t i) { return i < names.size() ? names[i] : "#" + std::to_string(i); };
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->shape(), 0.0);
            state.v.emplace_back(p->shape(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state has a different layout");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape() != params[i]->shape() || state.m[i].shape() != params[i]->shape()) {
            throw DimensionError("adam_step: shape mismatch for parameter " + label(i));
        }
        if (!grads[i].all_finite()) throw TrainingError("non-finite gradient for parameter " + label(i));
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i]->data();
        double* m = state.m[i].data();
        double* v = state.v[i].data();
        const double* g = grads[i].data();
        for (std::size_t j = 0; j < grads[i].size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon);
        }
    }
}

struct HistoryRow {
    std::size_t step = 0;
    double lr = 0.0;
    std::array<double, LossBreakdown::kColumns.size()> losses{};
    double seconds = 0.0;  // wall-clock since training start
};

struct Snapshot {
    std::size_t step = 0;
    double rank1 = 0.0;
    double map = 0.0;
};

struct TrainHistory {
    std::vector<HistoryRow> rows;
    std::vector<Snapshot> snapshots;

    double column(std::size_t row, const std::string& name) const {
        for (std::size_t c = 0; c < LossBreakdown::kColumns.size(); ++c) {
            if (name == LossBreakdown::kColumns[c]) return rows.at(row).losses[c];
        }
        throw ParameterError("unknown history column '" + name + "'");
    }
};

/// Tab-separated step, lr and every loss column. Wall-clock is left out so
/// the file is reproducible bit for bit.
inline void write_history(std::ostream& out, const TrainHistory& h, std::span<const std::string> comments = {}) {
    for (const std::string& c : comments) out << "# " << c << '\n';
    out << "step\tlr";
    for (const char* c : LossBreakdown::kColumns) out << '\t' << c;
    out << '\n';
    for (const HistoryRow& r : h.rows) {
        out << r.step << '\t' << text::format_double(r.lr);
        for (double v : r.losses) out << '\t' << text::format_double(v);
        out << '\n';
    }
}

inline void write_snapshots(std::ostream& out, const TrainHistory& h) {
    out << "step\trank1\tmAP\n";
    for (const Snapshot& s : h.snapshots) {
        out << s.step << '\t' << text::format_double(s.rank1) << '\t' << text::format_double(s.map) << '\n';
    }
}

struct Checkpoint {
    EncoderConfig encoder;
    EncoderWeights<Tensor> weights;
    Dense<Tensor> head;                // identity classifier, (D, K)
    std::vector<int> class_identities;  // identity label of each classifier row
    std::size_t step = 0;

    TwoStreamEncoder make_encoder() const { return TwoStreamEncoder(encoder, weights); }
};

struct TrainResult {
    Checkpoint checkpoint;
    TrainHistory history;
};

namespace detail {

inline std::vector<FeatureMap> gather_maps(const Dataset& data, std::span<const std::size_t> idx) {
    std::vector<FeatureMap> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(data.samples[i]);
    return out;
}

inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
    return std::mt19937_64(seq);
}

}  // namespace detail

/// Rank-1 and mAP of infrared queries against the whole visible pool.
inline Snapshot snapshot_metrics(const Dataset& eval_set, const TwoStreamEncoder& enc, std::size_t step) {
    const RetrievalInstance inst = retrieval_from_dump(embed_dataset(eval_set, enc), ProtocolTag::thermal_to_rgb);
    const auto rankings = rank_all(inst.query, inst.gallery);
    const auto curve = cmc(rankings, inst.query_labels, inst.gallery_labels);
    return Snapshot{step, curve.front(), mean_ap(rankings, inst.query_labels, inst.gallery_labels)};
}

/// Optional per-step observer; receives the row just appended.
using StepObserver = std::function<void(const HistoryRow&)>;

/// Runs sample -> random erasing -> encode -> total loss -> backward -> Adam
/// for cfg.steps steps. The GeM exponent is projected back to >= 1 after
/// every update.
inline TrainResult train(const Dataset& data, const EncoderConfig& encoder_cfg, const TrainConfig& cfg,
                         const Dataset* eval_set = nullptr, const StepObserver& observer = {}) {
    cfg.validate();
    encoder_cfg.validate();
    data.validate();
    if (data.sample_shape() != encoder_cfg.input_shape) {
        throw DatasetError("dataset sample shape " + shape_string(data.sample_shape()) +
                           " does not match encoder input " + shape_string(encoder_cfg.input_shape));
    }
    TupleSampler sampler(data, cfg.seed);
    const IdentityIndex& index = sampler.index();
    const std::size_t classes = index.identity_count();
    const std::size_t n = cfg.batch_size;
    const std::vector<double> fill = data.channel_means();
    EraseConfig erase;
    erase.probability = cfg.erase_probability;
    std::mt19937_64 erase_rng = detail::derived_rng(cfg.seed, 1);
    std::mt19937_64 head_rng = detail::derived_rng(cfg.seed, 2);

    TrainResult result;
    Checkpoint& ck = result.checkpoint;
    ck.encoder = encoder_cfg;
    ck.weights = TwoStreamEncoder(encoder_cfg).weights();
    ck.head = detail::init_dense(encoder_cfg.embedding_dim, classes, head_rng);
    ck.class_identities = index.identities();

    std::vector<Tensor*> params;
    std::vector<std::string> names;
    visit_params(ck.weights, [&](const std::string& name, Tensor& t) {
        params.push_back(&t);
        names.push_back(name);
    });
    params.push_back(&ck.head.weight);
    names.emplace_back("head.weight");
    params.push_back(&ck.head.bias);
    names.emplace_back("head.bias");

    OptimizerState opt;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const TupleBatch batch = sampler.next(n);
        LossBreakdown loss;
        std::vector<Tensor> grads;
        try {
            ad::Tape tape;
            const auto w = map_params<ad::Var>(ck.weights, [&tape](const Tensor& t) { return tape.variable(t); });
            const ad::Var head_w = tape.variable(ck.head.weight);
            const ad::Var head_b = tape.variable(ck.head.bias);

            TupleEmbeddings emb;
            PrivateFeatures priv;
            for (Modality m : kModalities) {
                std::vector<std::size_t> idx;
                for (Role r : {Role::anchor, Role::positive, Role::negative}) {
                    const auto slot = batch.slot(r, m);
                    idx.insert(idx.end(), slot.begin(), slot.end());
                }
                std::vector<FeatureMap> maps = detail::gather_maps(data, idx);
                for (FeatureMap& x : maps) x = random_erase(x, erase, fill, erase_rng).map;
                const EncodeOutput out = encode_batch(tape, w, encoder_cfg, maps, m);
                for (Role r : {Role::anchor, Role::positive, Role::negative}) {
                    const std::size_t begin = static_cast<std::size_t>(r) * n;
                    emb.at(r, m) = ad::slice_rows(out.embedding, begin, begin + n);
                }
                const ad::Var pa = ad::slice_rows(out.private_pooled, 0, n);
                const ad::Var pp = ad::slice_rows(out.private_pooled, n, 2 * n);
                (m == Modality::visible ? priv.rgb_anchor : priv.ir_anchor) = pa;
                (m == Modality::visible ? priv.rgb_positive : priv.ir_positive) = pp;
            }
            const ad::Var anchors =
                ad::concat_rows({emb.at(Role::anchor, Modality::visible), emb.at(Role::anchor, Modality::infrared)});
            const ad::Var logits = ad::add_bias(ad::matmul(anchors, head_w), head_b);
            std::vector<std::size_t> labels;
            for (Modality m : kModalities) {
                for (std::size_t i : batch.slot(Role::anchor, m)) labels.push_back(index.class_of(data.records[i].identity));
            }
            loss = total_loss(emb, priv, logits, labels, cfg.loss);
            if (!std::isfinite(loss.total)) throw NumericError("non-finite objective");
            tape.backward(loss.objective);

            visit_params(w, [&](const std::string&, const ad::Var& v) { grads.push_back(tape.gradient(v)); });
            grads.push_back(tape.gradient(head_w));
            grads.push_back(tape.gradient(head_b));
        } catch (const NumericError& e) {
            throw TrainingError("step " + std::to_string(step) + ": " + e.what());
        }

        if (cfg.clip_norm > 0.0) {
            double sq = 0.0;
            for (const Tensor& g : grads) {
                for (double v : g.values()) sq += v * v;
            }
            const double norm = std::sqrt(sq);
            if (norm > cfg.clip_norm) {
                for (Tensor& g : grads) {
                    for (double& v : g.values()) v *= cfg.clip_norm / norm;
                }
            }
        }
        const double lr = lr_schedule(step, cfg);
        try {
            adam_step(params, grads, opt, lr, names);
        } catch (const TrainingError& e) {
            throw TrainingError("step " + std::to_string(step) + ": " + e.what());
        }
        for (Tensor* p : {&ck.weights.gem_p, &ck.weights.private_gem_p}) (*p)[0] = std::max((*p)[0], 1.0);

        HistoryRow row;
        row.step = step;
        row.lr = lr;
        row.losses = loss.values();
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.history.rows.push_back(row);
        if (observer) observer(row);
        if (eval_set && cfg.snapshot_every > 0 && ((step + 1) % cfg.snapshot_every == 0 || step + 1 == cfg.steps)) {
            result.history.snapshots.push_back(snapshot_metrics(*eval_set, ck.make_encoder(), step + 1));
        }
    }
    ck.step = cfg.steps;
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoint text format:
//
//   # comment lines
//   cmreid-checkpoint 1
//   <key> <values...>            encoder config, step, classes
//   param <name> <rank> <dims...> <values...>

inline void save_checkpoint(std::ostream& out, const Checkpoint& ck, std::span<const std::string> comments = {}) {
    using text::format_double;
    for (const std::string& c : comments) out << "# " << c << '\n';
    const EncoderConfig& e = ck.encoder;
    auto list = [&out](const char* key, const auto& values) {
        out << key;
        for (auto v : values) out << ' ' << v;
        out << '\n';
    };
    out << "cmreid-checkpoint 1\n";
    list("input_shape", e.input_shape);
    list("private_widths", e.private_widths);
    list("shared_widths", e.shared_widths);
    out << "embedding_dim " << e.embedding_dim << '\n'
        << "gem_p_init " << format_double(e.gem_p) << '\n'
        << "non_local " << (e.non_local ? 1 : 0) << '\n'
        << "tied_private_init " << (e.tied_private_init ? 1 : 0) << '\n'
        << "seed " << e.seed << '\n'
        << "step " << ck.step << '\n';
    list("class_identities", ck.class_identities);
    auto param = [&out](const std::string& name, const Tensor& t) {
        out << "param " << name << ' ' << t.rank();
        for (std::size_t d : t.shape()) out << ' ' << d;
        for (double v : t.values()) out << ' ' << format_double(v);
        out << '\n';
    };
    visit_params(ck.weights, param);
    param("head.weight", ck.head.weight);
    param("head.bias", ck.head.bias);
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path, std::span<const std::string> comments = {}) {
    auto out = text::open_output(path);
    save_checkpoint(out, ck, comments);
    if (!out) throw Error("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(std::istream& in, const std::string& source) {
    Checkpoint ck;
    std::map<std::string, Tensor> params;
    bool have_magic = false;
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& what) { return ParseError(source, lineno, what); };
    auto sizes = [&](std::span<const std::string_view> f) {
        std::vector<std::size_t> out;
        for (std::string_view s : f) {
            const auto v = text::parse_int<std::size_t>(s);
            if (!v) throw fail("bad integer '" + std::string(s) + "'");
            out.push_back(*v);
        }
        return out;
    };
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view body = text::trim(line);
        if (body.empty() || body.front() == '#') continue;
        const auto f = text::split_fields(body);
        const std::string_view key = f[0];
        const auto rest = std::span<const std::string_view>(f).subspan(1);
        if (!have_magic) {
            if (key != "cmreid-checkpoint" || rest.size() != 1 || rest[0] != "1") throw fail("not a checkpoint file");
            have_magic = true;
        } else if (key == "input_shape") {
            ck.encoder.input_shape = sizes(rest);
        } else if (key == "private_widths") {
            ck.encoder.private_widths = sizes(rest);
        } else if (key == "shared_widths") {
            ck.encoder.shared_widths = sizes(rest);
        } else if (key == "embedding_dim" || key == "non_local" || key == "tied_private_init" || key == "seed" || key == "step") {
            if (rest.size() != 1) throw fail(std::string(key) + " takes one value");
            const auto v = text::parse_int<std::uint64_t>(rest[0]);
            if (!v) throw fail("bad integer for " + std::string(key));
            if (key == "embedding_dim") ck.encoder.embedding_dim = *v;
            if (key == "non_local") ck.encoder.non_local = *v != 0;
            if (key == "tied_private_init") ck.encoder.tied_private_init = *v != 0;
            if (key == "seed") ck.encoder.seed = *v;
            if (key == "step") ck.step = *v;
        } else if (key == "gem_p_init") {
            const auto v = rest.size() == 1 ? text::parse_double(rest[0]) : std::nullopt;
            if (!v) throw fail("bad gem_p_init");
            ck.encoder.gem_p = *v;
        } else if (key == "class_identities") {
            for (std::string_view s : rest) {
                const auto v = text::parse_int<int>(s);
                if (!v) throw fail("bad identity label");
                ck.class_identities.push_back(*v);
            }
        } else if (key == "param") {
            if (rest.size() < 2) throw fail("truncated param line");
            const auto rank = text::parse_int<std::size_t>(rest[1]);
            if (!rank || rest.size() < 2 + *rank) throw fail("bad param rank");
            const Shape shape = sizes(rest.subspan(2, *rank));
            const auto raw = rest.subspan(2 + *rank);
            if (raw.size() != shape_size(shape)) throw fail("param " + std::string(rest[0]) + " has the wrong value count");
            std::vector<double> values;
            for (std::string_view s : raw) {
                const auto v = text::parse_double(s);
                if (!v) throw fail("bad value in param " + std::string(rest[0]));
                values.push_back(*v);
            }
            params.insert_or_assign(std::string(rest[0]), Tensor(shape, std::move(values)));
        } else {
            throw fail("unknown key '" + std::string(key) + "'");
        }
    }
    if (!have_magic) throw ParseError(source, lineno, "empty checkpoint");
    ck.encoder.validate();
    ck.weights = TwoStreamEncoder(ck.encoder).weights();
    auto take = [&](const std::string& name, Tensor& dst) {
        const auto it = params.find(name);
        if (it == params.end()) throw ParseError(source, lineno, "checkpoint lacks parameter '" + name + "'");
        if (it->second.shape() != dst.shape() && name.rfind("head.", 0) != 0) {
            throw ParseError(source, lineno, "parameter '" + name + "' has shape " + shape_string(it->second.shape()) +
                                                 ", expected " + shape_string(dst.shape()));
        }
        dst = it->second;
    };
    visit_params(ck.weights, take);
    take("head.weight", ck.head.weight);
    take("head.bias", ck.head.bias);
    if (ck.head.weight.rank() != 2 || ck.head.weight.dim(0) != ck.encoder.embedding_dim ||
        ck.head.weight.dim(1) != ck.class_identities.size() || ck.head.bias.shape() != Shape{ck.class_identities.size()}) {
        throw ParseError(source, lineno, "classifier head does not match the class list");
    }
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    auto in = text::open_input(path);
    return load_checkpoint(in, path);
}

}  // namespace cmreid
