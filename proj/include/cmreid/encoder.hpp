#pragma once

// Two-stream embedding network at desk scale.
//
// Each modality has its own private stages; their outputs feed a stack of
// stages shared by both modalities, an optional embedded-Gaussian non-local
// block, GeM pooling and a final linear projection. A stage is a per-position
// affine map over channels followed by tanh, i.e. a 1x1 convolution.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmreid/autodiff.hpp"
#include "cmreid/error.hpp"
#include "cmreid/tensor.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

struct EncoderConfig {
    Shape input_shape{8, 2, 2};
    std::vector<std::size_t> private_widths{16, 16};
    std::vector<std::size_t> shared_widths{32, 32};
    std::size_t embedding_dim = 32;
    double gem_p = 3.0;
    bool non_local = true;
    /// Start the infrared private stages as a copy of the visible ones (two
    /// copies of one backbone); otherwise both are drawn independently.
    bool tied_private_init = true;
    std::uint64_t seed = 0;

    std::size_t input_channels() const { return input_shape.at(0); }
    std::size_t positions() const { return input_shape.at(1) * input_shape.at(2); }
    std::size_t private_channels() const { return private_widths.empty() ? input_channels() : private_widths.back(); }
    std::size_t shared_channels() const { return shared_widths.empty() ? private_channels() : shared_widths.back(); }
    /// Width of the query/key/value projections inside the non-local block.
    std::size_t attention_channels() const { return std::max<std::size_t>(1, shared_channels() / 2); }

    void validate() const {
        if (input_shape.size() != 3) throw ParameterError("encoder input shape must be (C, H, W)");
        for (std::size_t d : input_shape) {
            if (d == 0) throw ParameterError("encoder input dimensions must be positive");
        }
        for (std::size_t w : private_widths) {
            if (w == 0) throw ParameterError("encoder private stage widths must be positive");
        }
        for (std::size_t w : shared_widths) {
            if (w == 0) throw ParameterError("encoder shared stage widths must be positive");
        }
        if (embedding_dim == 0) throw ParameterError("encoder embedding dimension must be positive");
        if (!(gem_p >= 1.0)) throw ParameterError("encoder GeM exponent must be >= 1");
    }
};

/// Affine map, weight laid out (in, out).
template <class T>
struct Dense {
    T weight;
    T bias;
};

template <class T>
struct NonLocalWeights {
    T query;  // (C, C')
    T key;    // (C, C')
    T value;  // (C, C')
    T out;    // (C', C), W_z
};

template <class T>
struct EncoderWeights {
    std::vector<Dense<T>> visible;
    std::vector<Dense<T>> infrared;
    std::vector<Dense<T>> shared;
    bool has_non_local = false;
    NonLocalWeights<T> non_local;
    T gem_p;          // final pooling exponent
    T private_gem_p;  // exponent of the pooling that feeds the distillation loss
    Dense<T> projection;

    const std::vector<Dense<T>>& stream(Modality m) const { return m == Modality::visible ? visible : infrared; }
};

/// Calls f(name, param) for every parameter in a fixed order.
template <class W, class F>
void visit_params(W& w, F&& f) {
    auto stages = [&f](auto& list, const std::string& prefix) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            f(prefix + "." + std::to_string(i) + ".weight", list[i].weight);
            f(prefix + "." + std::to_string(i) + ".bias", list[i].bias);
        }
    };
    stages(w.visible, "visible");
    stages(w.infrared, "infrared");
    stages(w.shared, "shared");
    if (w.has_non_local) {
        f(std::string("non_local.query"), w.non_local.query);
        f(std::string("non_local.key"), w.non_local.key);
        f(std::string("non_local.value"), w.non_local.value);
        f(std::string("non_local.out"), w.non_local.out);
    }
    f(std::string("gem_p"), w.gem_p);
    f(std::string("private_gem_p"), w.private_gem_p);
    f(std::string("projection.weight"), w.projection.weight);
    f(std::string("projection.bias"), w.projection.bias);
}

/// Builds a parallel weight set by mapping every parameter through f.
template <class U, class T, class F>
EncoderWeights<U> map_params(const EncoderWeights<T>& w, F&& f) {
    auto stages = [&f](const std::vector<Dense<T>>& list) {
        std::vector<Dense<U>> out;
        out.reserve(list.size());
        for (const auto& d : list) out.push_back(Dense<U>{f(d.weight), f(d.bias)});
        return out;
    };
    EncoderWeights<U> out;
    out.visible = stages(w.visible);
    out.infrared = stages(w.infrared);
    out.shared = stages(w.shared);
    out.has_non_local = w.has_non_local;
    if (w.has_non_local) {
        out.non_local = NonLocalWeights<U>{f(w.non_local.query), f(w.non_local.key), f(w.non_local.value),
                                           f(w.non_local.out)};
    }
    out.gem_p = f(w.gem_p);
    out.private_gem_p = f(w.private_gem_p);
    out.projection = Dense<U>{f(w.projection.weight), f(w.projection.bias)};
    return out;
}

namespace detail {

inline Dense<Tensor> init_dense(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (double& v : w) v = dist(rng);
    for (double& v : b) v = dist(rng);
    return Dense<Tensor>{Tensor(Shape{in, out}, std::move(w)), Tensor(Shape{out}, std::move(b))};
}

inline Tensor init_matrix(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(in * out);
    for (double& v : w) v = dist(rng);
    return Tensor(Shape{in, out}, std::move(w));
}

}  // namespace detail

/// Seeded uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] initialization.
inline Dense<Tensor> make_dense(std::size_t in, std::size_t out, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return detail::init_dense(in, out, rng);
}

class TwoStreamEncoder {
public:
    explicit TwoStreamEncoder(EncoderConfig config) : config_(std::move(config)) {
        config_.validate();
        std::mt19937_64 rng(config_.seed);
        auto build = [&rng](std::size_t in, const std::vector<std::size_t>& widths) {
            std::vector<Dense<Tensor>> stages;
            for (std::size_t w : widths) {
                stages.push_back(detail::init_dense(in, w, rng));
                in = w;
            }
            return stages;
        };
        weights_.visible = build(config_.input_channels(), config_.private_widths);
        weights_.infrared = config_.tied_private_init ? weights_.visible
                                                      : build(config_.input_channels(), config_.private_widths);
        weights_.shared = build(config_.private_channels(), config_.shared_widths);
        weights_.has_non_local = config_.non_local;
        if (config_.non_local) {
            const std::size_t c = config_.shared_channels();
            const std::size_t a = config_.attention_channels();
            weights_.non_local.query = detail::init_matrix(c, a, rng);
            weights_.non_local.key = detail::init_matrix(c, a, rng);
            weights_.non_local.value = detail::init_matrix(c, a, rng);
            weights_.non_local.out = detail::init_matrix(a, c, rng);
        }
        weights_.gem_p = Tensor::scalar(config_.gem_p);
        weights_.private_gem_p = Tensor::scalar(config_.gem_p);
        weights_.projection = detail::init_dense(config_.shared_channels(), config_.embedding_dim, rng);
    }

    TwoStreamEncoder(EncoderConfig config, EncoderWeights<Tensor> weights)
        : config_(std::move(config)), weights_(std::move(weights)) {
        config_.validate();
        check_layout();
    }

    const EncoderConfig& config() const noexcept { return config_; }
    const EncoderWeights<Tensor>& weights() const noexcept { return weights_; }
    EncoderWeights<Tensor>& weights() noexcept { return weights_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit_params(weights_, [&n](const std::string&, const Tensor& t) { n += t.size(); });
        return n;
    }

    /// Registers every parameter as a tracked leaf on `tape`.
    EncoderWeights<ad::Var> bind(ad::Tape& tape) const {
        return map_params<ad::Var>(weights_, [&tape](const Tensor& t) { return tape.variable(t); });
    }

    /// Registers every parameter as an untracked constant on `tape`.
    EncoderWeights<ad::Var> bind_frozen(ad::Tape& tape) const {
        return map_params<ad::Var>(weights_, [&tape](const Tensor& t) { return tape.constant(t); });
    }

private:
    void check_layout() const {
        const TwoStreamEncoder reference(config_);
        std::vector<Shape> expected, actual;
        visit_params(reference.weights_, [&](const std::string&, const Tensor& t) { expected.push_back(t.shape()); });
        visit_params(weights_, [&](const std::string&, const Tensor& t) { actual.push_back(t.shape()); });
        if (expected != actual) throw DimensionError("encoder weights do not match the configured architecture");
    }

    EncoderConfig config_;
    EncoderWeights<Tensor> weights_;
};

// ---------------------------------------------------------------------------
// Differentiable blocks.

inline ad::Var dense_tanh(ad::Var x, const Dense<ad::Var>& layer) {
    return ad::tanh(ad::add_bias(ad::matmul(x, layer.weight), layer.bias));
}

/// z_i = W_z * attend(x)_i + x_i over (B, P, C) maps. Attention weights are an
/// embedded-Gaussian softmax of query.key over all positions of one sample.
inline ad::Var non_local_block(ad::Var x, const NonLocalWeights<ad::Var>& w) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw DimensionError("non_local: expected (batch, positions, channels), got " + shape_string(s));
    const std::size_t batch = s[0], positions = s[1], channels = s[2];
    if (w.query.shape().size() != 2 || w.query.shape()[0] != channels || w.out.shape() != Shape{w.query.shape()[1], channels}) {
        throw DimensionError("non_local: parameters do not match input channels " + std::to_string(channels));
    }
    const std::size_t inner = w.query.shape()[1];
    const ad::Var flat = ad::reshape(x, {batch * positions, channels});
    const ad::Var q = ad::reshape(ad::matmul(flat, w.query), {batch, positions, inner});
    const ad::Var k = ad::reshape(ad::matmul(flat, w.key), {batch, positions, inner});
    const ad::Var v = ad::reshape(ad::matmul(flat, w.value), {batch, positions, inner});
    const ad::Var attention = ad::softmax_last(ad::matmul(q, ad::transpose(k)));
    const ad::Var attended = ad::reshape(ad::matmul(attention, v), {batch * positions, inner});
    const ad::Var projected = ad::reshape(ad::matmul(attended, w.out), {batch, positions, channels});
    return ad::add(projected, x);
}

/// Flattens feature maps into a (B*P, C) position-major matrix.
inline Tensor position_major(std::span<const FeatureMap> samples) {
    if (samples.empty()) throw DimensionError("no samples to encode");
    const Shape& shape = samples.front().shape();
    const std::size_t c = shape[0], p = shape[1] * shape[2];
    std::vector<double> out(samples.size() * p * c);
    for (std::size_t b = 0; b < samples.size(); ++b) {
        if (samples[b].shape() != shape) {
            throw DimensionError("sample shape " + shape_string(samples[b].shape()) + " differs from " +
                                 shape_string(shape));
        }
        const Tensor& t = samples[b].tensor();
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t i = 0; i < p; ++i) out[(b * p + i) * c + ch] = t[ch * p + i];
        }
    }
    return Tensor(Shape{samples.size() * p, c}, std::move(out));
}

struct EncodeOutput {
    ad::Var embedding;       // (B, D)
    ad::Var private_pooled;  // (B, C_private), GeM-pooled modality-specific features
};

/// Runs a batch of same-modality samples through the modality's private
/// stages, the shared stages, the non-local block (when present), GeM pooling
/// and the projection.
inline EncodeOutput encode_batch(ad::Tape& tape, const EncoderWeights<ad::Var>& w, const EncoderConfig& cfg,
                                 std::span<const FeatureMap> samples, Modality modality) {
    if (modality != Modality::visible && modality != Modality::infrared) {
        throw ParameterError("unknown modality tag");
    }
    if (!samples.empty() && samples.front().shape() != cfg.input_shape) {
        throw DimensionError("sample shape " + shape_string(samples.front().shape()) + " does not match encoder input " +
                             shape_string(cfg.input_shape));
    }
    const std::size_t batch = samples.size();
    const std::size_t positions = cfg.positions();
    ad::Var h = tape.constant(position_major(samples));
    for (const Dense<ad::Var>& stage : w.stream(modality)) h = dense_tanh(h, stage);
    const ad::Var private_pooled =
        ad::gem_pool(ad::reshape(ad::clamp_nonneg(h), {batch, positions, cfg.private_channels()}), w.private_gem_p);
    for (const Dense<ad::Var>& stage : w.shared) h = dense_tanh(h, stage);
    h = ad::reshape(h, {batch, positions, cfg.shared_channels()});
    if (w.has_non_local) h = non_local_block(h, w.non_local);
    const ad::Var pooled = ad::gem_pool(ad::clamp_nonneg(h), w.gem_p);
    const ad::Var embedding = ad::add_bias(ad::matmul(pooled, w.projection.weight), w.projection.bias);
    return EncodeOutput{embedding, private_pooled};
}

// ---------------------------------------------------------------------------
// Value-level entry points.

/// Per-channel (mean of x^p)^(1/p) of a nonnegative feature map.
inline Tensor gem_pool(const FeatureMap& x, double p) {
    ad::Tape tape;
    const Shape& s = x.shape();
    const ad::Var input = tape.constant(position_major(std::span<const FeatureMap>(&x, 1)).reshaped({1, s[1] * s[2], s[0]}));
    return ad::gem_pool(input, tape.constant(Tensor::scalar(p))).value().reshaped({s[0]});
}

/// Applies the non-local block to a single (C, H, W) map.
inline FeatureMap non_local(const FeatureMap& x, const NonLocalWeights<Tensor>& params) {
    ad::Tape tape;
    const Shape& s = x.shape();
    const std::size_t c = s[0], p = s[1] * s[2];
    const ad::Var input = tape.constant(position_major(std::span<const FeatureMap>(&x, 1)).reshaped({1, p, c}));
    const NonLocalWeights<ad::Var> w{tape.constant(params.query), tape.constant(params.key),
                                     tape.constant(params.value), tape.constant(params.out)};
    const Tensor& z = non_local_block(input, w).value();
    FeatureMap out(c, s[1], s[2]);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < p; ++i) out.tensor()[ch * p + i] = z[i * c + ch];
    }
    return out;
}

inline Tensor encode(const FeatureMap& sample, Modality modality, const TwoStreamEncoder& enc) {
    ad::Tape tape;
    const auto w = enc.bind_frozen(tape);
    const auto out = encode_batch(tape, w, enc.config(), std::span<const FeatureMap>(&sample, 1), modality);
    return out.embedding.value().reshaped({enc.config().embedding_dim});
}

/// Embeds many samples of one modality; row b of the result is sample b.
inline Tensor encode_all(std::span<const FeatureMap> samples, Modality modality, const TwoStreamEncoder& enc) {
    ad::Tape tape;
    const auto w = enc.bind_frozen(tape);
    return encode_batch(tape, w, enc.config(), samples, modality).embedding.value();
}

}  // namespace cmreid
