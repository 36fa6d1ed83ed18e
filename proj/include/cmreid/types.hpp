#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cmreid/error.hpp"
#include "cmreid/tensor.hpp"

namespace cmreid {

enum class Modality { visible, infrared };

inline constexpr std::array<Modality, 2> kModalities{Modality::visible, Modality::infrared};

inline std::size_t index_of(Modality m) { return m == Modality::visible ? 0 : 1; }

inline Modality other(Modality m) { return m == Modality::visible ? Modality::infrared : Modality::visible; }

inline const char* to_string(Modality m) { return m == Modality::visible ? "visible" : "infrared"; }

/// Accepts visible|rgb|v and infrared|ir|thermal|t.
inline Modality parse_modality(std::string_view token) {
    if (token == "visible" || token == "rgb" || token == "v") return Modality::visible;
    if (token == "infrared" || token == "ir" || token == "thermal" || token == "t") return Modality::infrared;
    throw ParameterError("unknown modality token '" + std::string(token) + "'");
}

struct SampleRecord {
    std::string id;
    int identity = 0;
    Modality modality = Modality::visible;
    std::string locator;

    friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

/// Rank-3 (channels, height, width) activation map.
class FeatureMap {
public:
    FeatureMap() : tensor_(Shape{1, 1, 1}) {}

    explicit FeatureMap(Tensor t) : tensor_(std::move(t)) {
        if (tensor_.rank() != 3) throw DimensionError("feature map must be rank 3, got " + shape_string(tensor_.shape()));
    }

    FeatureMap(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0) : tensor_(Shape{c, h, w}, fill) {}

    std::size_t channels() const { return tensor_.dim(0); }
    std::size_t height() const { return tensor_.dim(1); }
    std::size_t width() const { return tensor_.dim(2); }
    std::size_t positions() const { return height() * width(); }

    double at(std::size_t c, std::size_t y, std::size_t x) const { return tensor_[(c * height() + y) * width() + x]; }
    double& at(std::size_t c, std::size_t y, std::size_t x) { return tensor_[(c * height() + y) * width() + x]; }

    const Tensor& tensor() const noexcept { return tensor_; }
    Tensor& tensor() noexcept { return tensor_; }
    const Shape& shape() const noexcept { return tensor_.shape(); }

    friend bool operator==(const FeatureMap& a, const FeatureMap& b) { return a.tensor_ == b.tensor_; }

private:
    Tensor tensor_;
};

}  // namespace cmreid
