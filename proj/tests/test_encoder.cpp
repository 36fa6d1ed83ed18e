#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "cmreid/encoder.hpp"
#include "cmreid/grad_suite.hpp"
#include "test_support.hpp"

namespace cmreid {
namespace {

using testing::random_tensor;

FeatureMap random_map(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    return FeatureMap(random_tensor(std::move(shape), rng, lo, hi));
}

FeatureMap one_channel(std::vector<double> values) {
    const std::size_t n = values.size();
    return FeatureMap(Tensor(Shape{1, 1, n}, std::move(values)));
}

TEST(Gem, AverageLimit) {
    EXPECT_NEAR(gem_pool(one_channel({1.0, 2.0}), 1.0)[0], 1.5, 1e-12);
}

TEST(Gem, CubicClosedForm) {
    // (4.5)^(1/3)
    EXPECT_NEAR(gem_pool(one_channel({1.0, 2.0}), 3.0)[0], 1.6509636244473133419, 1e-12);
}

TEST(Gem, ConstantInputIsFixedPoint) {
    for (double c : {0.0, 0.25, 1.0, 7.5}) {
        for (double p : {1.0, 2.5, 3.0, 10.0}) {
            const FeatureMap x(3, 2, 2, c);
            const Tensor out = gem_pool(x, p);
            for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_NEAR(out[ch], c, 1e-12) << "c=" << c << " p=" << p;
        }
    }
}

TEST(Gem, UnitExponentIsChannelMean) {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const FeatureMap x = random_map({4, 3, 2}, rng, 0.0, 5.0);
        const Tensor out = gem_pool(x, 1.0);
        for (std::size_t ch = 0; ch < 4; ++ch) {
            double mean = 0.0;
            for (std::size_t i = 0; i < 6; ++i) mean += x.tensor()[ch * 6 + i];
            EXPECT_NEAR(out[ch], mean / 6.0, 1e-12);
        }
    }
}

TEST(Gem, MonotoneInExponent) {
    std::mt19937_64 rng(32);
    std::uniform_real_distribution<double> pdist(1.0, 8.0);
    for (int trial = 0; trial < 100; ++trial) {
        const FeatureMap x = random_map({3, 2, 3}, rng, 0.0, 4.0);
        double p1 = pdist(rng), p2 = pdist(rng);
        if (p1 > p2) std::swap(p1, p2);
        const Tensor lo = gem_pool(x, p1), hi = gem_pool(x, p2);
        for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_GE(hi[ch], lo[ch] - 1e-12);
    }
}

TEST(Gem, ExponentReceivesGradient) {
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        ad::Tape tape;
        const ad::Var x = tape.constant(random_tensor({2, 4, 3}, rng, 0.0, 2.0));
        const ad::Var p = tape.variable(Tensor::scalar(3.0));
        tape.backward(ad::sum(ad::gem_pool(x, p)));
        EXPECT_NE(tape.gradient(p)[0], 0.0);
    }
}

TEST(Gem, RejectsBadExponentAndNegativeInput) {
    EXPECT_THROW(gem_pool(one_channel({1.0, 2.0}), 0.5), ParameterError);
    EXPECT_THROW(gem_pool(one_channel({1.0, -2.0}), 2.0), DomainError);
}

NonLocalWeights<Tensor> random_block(std::size_t c, std::mt19937_64& rng) {
    const std::size_t a = std::max<std::size_t>(1, c / 2);
    return {random_tensor({c, a}, rng), random_tensor({c, a}, rng), random_tensor({c, a}, rng),
            random_tensor({a, c}, rng)};
}

TEST(NonLocal, ZeroOutputProjectionIsExactIdentity) {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        auto w = random_block(4, rng);
        w.out = Tensor(w.out.shape(), 0.0);
        const FeatureMap x = random_map({4, 2, 2}, rng, -3.0, 3.0);
        const FeatureMap z = non_local(x, w);
        EXPECT_EQ(z.tensor(), x.tensor());
    }
}

TEST(NonLocal, PreservesShape) {
    std::mt19937_64 rng(42);
    const FeatureMap z = non_local(random_map({4, 2, 2}, rng), random_block(4, rng));
    EXPECT_EQ(z.shape(), (Shape{4, 2, 2}));
}

TEST(NonLocal, SinglePositionClosedForm) {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 6, a = 3;
        const auto w = random_block(c, rng);
        const FeatureMap x = random_map({c, 1, 1}, rng);
        std::vector<double> v(a, 0.0);
        for (std::size_t j = 0; j < a; ++j) {
            for (std::size_t i = 0; i < c; ++i) v[j] += x.tensor()[i] * w.value[i * a + j];
        }
        const FeatureMap z = non_local(x, w);
        for (std::size_t k = 0; k < c; ++k) {
            double expected = x.tensor()[k];
            for (std::size_t j = 0; j < a; ++j) expected += v[j] * w.out[j * c + k];
            EXPECT_NEAR(z.tensor()[k], expected, 1e-12);
        }
    }
}

TEST(NonLocal, ChannelMismatchIsDimensionError) {
    std::mt19937_64 rng(44);
    EXPECT_THROW(non_local(random_map({4, 2, 2}, rng), random_block(6, rng)), DimensionError);
}

EncoderConfig small_config(bool tied) {
    EncoderConfig cfg;
    cfg.input_shape = {5, 2, 3};
    cfg.private_widths = {6, 6};
    cfg.shared_widths = {8, 8};
    cfg.embedding_dim = 7;
    cfg.tied_private_init = tied;
    cfg.seed = 9;
    return cfg;
}

TEST(Encoder, RepeatedCallsAgree) {
    const TwoStreamEncoder enc(small_config(false));
    std::mt19937_64 rng(51);
    const FeatureMap x = random_map({5, 2, 3}, rng);
    const Tensor a = encode(x, Modality::visible, enc);
    const Tensor b = encode(x, Modality::visible, enc);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.shape(), (Shape{7}));
}

TEST(Encoder, IndependentStreamsDiffer) {
    const TwoStreamEncoder enc(small_config(false));
    std::mt19937_64 rng(52);
    const FeatureMap x = random_map({5, 2, 3}, rng);
    const Tensor v = encode(x, Modality::visible, enc);
    const Tensor r = encode(x, Modality::infrared, enc);
    double diff = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) diff = std::max(diff, std::abs(v[i] - r[i]));
    EXPECT_GT(diff, 1e-6);
}

TEST(Encoder, TiedInitStartsWithEqualStreams) {
    const TwoStreamEncoder enc(small_config(true));
    std::mt19937_64 rng(53);
    const FeatureMap x = random_map({5, 2, 3}, rng);
    EXPECT_EQ(encode(x, Modality::visible, enc), encode(x, Modality::infrared, enc));
    // Storage is still separate: moving one stream leaves the other alone.
    TwoStreamEncoder moved = enc;
    moved.weights().infrared.front().bias[0] += 0.5;
    EXPECT_NE(encode(x, Modality::visible, moved), encode(x, Modality::infrared, moved));
    EXPECT_EQ(encode(x, Modality::visible, moved), encode(x, Modality::visible, enc));
}

TEST(Encoder, SeedControlsInitialization) {
    EncoderConfig a = small_config(false), b = small_config(false);
    b.seed = 10;
    std::mt19937_64 rng(54);
    const FeatureMap x = random_map({5, 2, 3}, rng);
    EXPECT_EQ(encode(x, Modality::visible, TwoStreamEncoder(a)), encode(x, Modality::visible, TwoStreamEncoder(a)));
    EXPECT_NE(encode(x, Modality::visible, TwoStreamEncoder(a)), encode(x, Modality::visible, TwoStreamEncoder(b)));
}

TEST(Encoder, BatchPermutationPermutesOutputs) {
    const TwoStreamEncoder enc(small_config(false));
    std::mt19937_64 rng(55);
    std::vector<FeatureMap> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(random_map({5, 2, 3}, rng));
    std::vector<std::size_t> perm(batch.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<FeatureMap> shuffled;
    for (std::size_t i : perm) shuffled.push_back(batch[i]);

    for (Modality m : kModalities) {
        const Tensor out = encode_all(batch, m, enc);
        const Tensor out_perm = encode_all(shuffled, m, enc);
        const std::size_t d = enc.config().embedding_dim;
        for (std::size_t r = 0; r < perm.size(); ++r) {
            for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(out_perm[r * d + k], out[perm[r] * d + k], 1e-12);
        }
        // A batch of one agrees with the batched row.
        const Tensor single = encode(batch[2], m, enc);
        for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(single[k], out[2 * d + k], 1e-12);
    }
}

TEST(Encoder, WithoutNonLocalHasNoBlockParameters) {
    EncoderConfig cfg = small_config(false);
    cfg.non_local = false;
    const TwoStreamEncoder enc(cfg);
    bool found = false;
    visit_params(enc.weights(), [&](const std::string& name, const Tensor&) {
        found = found || name.rfind("non_local", 0) == 0;
    });
    EXPECT_FALSE(found);
    EXPECT_LT(enc.parameter_count(), TwoStreamEncoder(small_config(false)).parameter_count());
}

TEST(Encoder, RejectsWrongInputShape) {
    const TwoStreamEncoder enc(small_config(false));
    EXPECT_THROW(encode(FeatureMap(4, 2, 3), Modality::visible, enc), DimensionError);
}

TEST(Encoder, InvalidConfigIsParameterError) {
    EncoderConfig cfg = small_config(false);
    cfg.gem_p = 0.5;
    EXPECT_THROW(TwoStreamEncoder{cfg}, ParameterError);
    cfg = small_config(false);
    cfg.embedding_dim = 0;
    EXPECT_THROW(TwoStreamEncoder{cfg}, ParameterError);
}

TEST(Encoder, MismatchedWeightsAreRejected) {
    const TwoStreamEncoder enc(small_config(false));
    EncoderWeights<Tensor> w = enc.weights();
    w.projection.bias = Tensor(Shape{3});
    EXPECT_THROW(TwoStreamEncoder(enc.config(), w), DimensionError);
}

TEST(EncoderGradients, GemSuitePasses) {
    const auto r = run_grad_suite("gem");
    EXPECT_TRUE(r.pass) << r.max_relative_error << " at config " << r.worst_config;
}

TEST(EncoderGradients, NonLocalSuitePasses) {
    const auto r = run_grad_suite("non_local");
    EXPECT_TRUE(r.pass) << r.max_relative_error << " at config " << r.worst_config;
}

TEST(EncoderGradients, FullEncoderSuitePasses) {
    const auto r = run_grad_suite("encoder");
    EXPECT_TRUE(r.pass) << r.max_relative_error << " at config " << r.worst_config;
}

}  // namespace
}  // namespace cmreid
