#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cmreid/data/dataset.hpp"
#include "cmreid/error.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

/// Clustered two-modality dataset: identity k has a latent centre c_k; visible
/// samples are c_k + noise and infrared samples are c_k + offset + noise, where
/// the offset is one vector shared by every identity.
struct SynthConfig {
    std::size_t identities = 8;
    std::size_t samples_per_modality = 4;
    Shape shape{8, 2, 2};
    double center_scale = 1.0;
    double noise = 0.1;            // per-element standard deviation
    double modality_offset = 0.5;  // per-element standard deviation of the offset vector
    std::uint64_t seed = 0;
    /// Selects an independent noise draw around the same centres and offset,
    /// e.g. a held-out split.
    std::uint64_t draw = 0;

    void validate() const {
        if (identities < 2) throw ParameterError("synthetic dataset needs at least 2 identities");
        if (samples_per_modality < 1) throw ParameterError("synthetic dataset needs >= 1 sample per modality");
        if (shape.size() != 3 || shape_size(shape) == 0 || shape[0] == 0 || shape[1] == 0 || shape[2] == 0) {
            throw ParameterError("synthetic feature-map shape must be (C, H, W) with positive dims");
        }
        if (!(center_scale >= 0.0)) throw ParameterError("centre scale must be >= 0");
        if (!(noise >= 0.0)) throw ParameterError("noise sigma must be >= 0");
        if (!(modality_offset >= 0.0)) throw ParameterError("modality offset scale must be >= 0");
    }
};

struct SynthDataset {
    Dataset data;
    std::vector<std::vector<double>> centers;  // latent centre per identity
    std::vector<double> offset;                // infrared offset
};

inline SynthDataset synth_generate_with_latents(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t dim = shape_size(cfg.shape);
    std::mt19937_64 latent_rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    SynthDataset out;
    out.offset.resize(dim);
    for (double& v : out.offset) v = cfg.modality_offset * normal(latent_rng);
    out.centers.assign(cfg.identities, std::vector<double>(dim));
    for (auto& c : out.centers) {
        for (double& v : c) v = cfg.center_scale * normal(latent_rng);
    }

    std::seed_seq noise_seed{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                             static_cast<std::uint32_t>(cfg.draw), static_cast<std::uint32_t>(cfg.draw >> 32), 0x5eedu};
    std::mt19937_64 noise_rng(noise_seed);
    out.data.name = "synthetic";
    for (std::size_t k = 0; k < cfg.identities; ++k) {
        for (Modality m : kModalities) {
            for (std::size_t j = 0; j < cfg.samples_per_modality; ++j) {
                std::vector<double> v(dim);
                for (std::size_t i = 0; i < dim; ++i) {
                    const double shift = m == Modality::infrared ? out.offset[i] : 0.0;
                    v[i] = out.centers[k][i] + shift + cfg.noise * normal(noise_rng);
                }
                SampleRecord r;
                r.id = "id" + std::to_string(k) + (m == Modality::visible ? "_v" : "_t") + std::to_string(j);
                if (cfg.draw != 0) r.id += "_d" + std::to_string(cfg.draw);
                r.identity = static_cast<int>(k);
                r.modality = m;
                r.locator = "synthetic";
                out.data.records.push_back(std::move(r));
                out.data.samples.emplace_back(Tensor(cfg.shape, std::move(v)));
            }
        }
    }
    return out;
}

inline Dataset synth_generate(const SynthConfig& cfg) { return synth_generate_with_latents(cfg).data; }

}  // namespace cmreid
