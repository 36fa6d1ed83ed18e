#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <span>

#include "cmreid/error.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

struct EraseConfig {
    double probability = 0.5;
    double area_min = 0.02;
    double area_max = 0.4;
    double aspect_min = 0.3;
    double aspect_max = 3.3;
    int max_attempts = 100;

    void validate() const {
        if (!(probability >= 0.0 && probability <= 1.0)) throw ParameterError("erase probability must lie in [0, 1]");
        if (!(area_min > 0.0 && area_min <= area_max && area_max <= 1.0)) {
            throw ParameterError("erase area range must satisfy 0 < min <= max <= 1");
        }
        if (!(aspect_min > 0.0 && aspect_min <= aspect_max)) throw ParameterError("erase aspect range is invalid");
    }
};

struct ErasedRegion {
    std::size_t top = 0;
    std::size_t left = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    bool contains(std::size_t y, std::size_t x) const {
        return y >= top && y < top + height && x >= left && x < left + width;
    }
};

struct EraseResult {
    FeatureMap map;
    std::optional<ErasedRegion> region;
};

/// With the configured probability, overwrites one random rectangle (area
/// fraction and aspect ratio drawn uniformly from their ranges) in every
/// channel with that channel's fill value. If no rectangle fits within
/// `max_attempts` draws the map is returned unchanged.
inline EraseResult random_erase(const FeatureMap& x, const EraseConfig& cfg, std::span<const double> fill,
                                std::mt19937_64& rng) {
    cfg.validate();
    if (fill.size() != x.channels()) throw DimensionError("random_erase: one fill value per channel required");
    EraseResult out{x, std::nullopt};
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (!(unit(rng) < cfg.probability)) return out;

    const std::size_t h = x.height(), w = x.width();
    const double area = static_cast<double>(h * w);
    std::uniform_real_distribution<double> area_frac(cfg.area_min, cfg.area_max);
    std::uniform_real_distribution<double> aspect(cfg.aspect_min, cfg.aspect_max);
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        const double target = area_frac(rng) * area;
        const double ratio = aspect(rng);
        const auto eh = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
        const auto ew = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
        if (eh < 1 || ew < 1 || eh > h || ew > w) continue;
        std::uniform_int_distribution<std::size_t> top(0, h - eh), left(0, w - ew);
        ErasedRegion r{top(rng), left(rng), eh, ew};
        for (std::size_t c = 0; c < x.channels(); ++c) {
            for (std::size_t yy = r.top; yy < r.top + r.height; ++yy) {
                for (std::size_t xx = r.left; xx < r.left + r.width; ++xx) out.map.at(c, yy, xx) = fill[c];
            }
        }
        out.region = r;
        return out;
    }
    return out;
}

}  // namespace cmreid
