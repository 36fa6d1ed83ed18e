#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cmreid/data/dataset.hpp"
#include "cmreid/error.hpp"
#include "cmreid/losses.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

/// Six dataset indices: anchor, positive and negative in both modalities.
struct Tuple {
    std::array<std::array<std::size_t, 2>, 3> index{};

    std::size_t at(Role r, Modality m) const { return index[static_cast<std::size_t>(r)][index_of(m)]; }
    std::size_t& at(Role r, Modality m) { return index[static_cast<std::size_t>(r)][index_of(m)]; }

    friend bool operator==(const Tuple&, const Tuple&) = default;
};

struct TupleBatch {
    std::vector<Tuple> tuples;
    std::uint64_t seed = 0;   // seed of the sampler that drew the batch
    std::uint64_t draw = 0;   // batch ordinal within that sampler's stream

    std::size_t size() const noexcept { return tuples.size(); }
    std::size_t record_count() const noexcept { return tuples.size() * 6; }

    /// Dataset indices of one role/modality slot, in tuple order.
    std::vector<std::size_t> slot(Role r, Modality m) const {
        std::vector<std::size_t> out;
        out.reserve(tuples.size());
        for (const Tuple& t : tuples) out.push_back(t.at(r, m));
        return out;
    }

    friend bool operator==(const TupleBatch&, const TupleBatch&) = default;
};

/// Checks the structural invariants of a batch against its dataset.
inline void validate_batch(const TupleBatch& batch, const Dataset& data) {
    for (std::size_t i = 0; i < batch.tuples.size(); ++i) {
        const Tuple& t = batch.tuples[i];
        for (Role r : {Role::anchor, Role::positive, Role::negative}) {
            for (Modality m : kModalities) {
                const std::size_t idx = t.at(r, m);
                if (idx >= data.size()) throw BatchStructureError("tuple " + std::to_string(i) + " indexes past dataset");
                if (data.records[idx].modality != m) {
                    throw BatchStructureError("tuple " + std::to_string(i) + " has a slot with the wrong modality");
                }
            }
        }
        const int id = data.records[t.at(Role::anchor, Modality::visible)].identity;
        const auto identity = [&](Role r, Modality m) { return data.records[t.at(r, m)].identity; };
        if (identity(Role::anchor, Modality::infrared) != id || identity(Role::positive, Modality::visible) != id ||
            identity(Role::positive, Modality::infrared) != id) {
            throw BatchStructureError("tuple " + std::to_string(i) + ": anchor and positive identities differ");
        }
        if (identity(Role::negative, Modality::visible) == id || identity(Role::negative, Modality::infrared) == id) {
            throw BatchStructureError("tuple " + std::to_string(i) + ": negative shares the anchor identity");
        }
    }
}

/// Draws tuple batches with replacement. Each step picks an anchor identity
/// uniformly, one visible and one infrared image of it as the anchor pair,
/// a positive per modality from the same identity (avoiding the anchor image
/// when the identity has another one), and a negative identity uniformly
/// among the rest with one image per modality.
class TupleSampler {
public:
    TupleSampler(const Dataset& data, std::uint64_t seed) : index_(data), rng_(seed), seed_(seed) {
        if (index_.identity_count() < 2) {
            throw DatasetError("sampling needs at least 2 identities, dataset has " +
                               std::to_string(index_.identity_count()));
        }
        for (std::size_t k = 0; k < index_.identity_count(); ++k) {
            for (Modality m : kModalities) {
                if (index_.members(k, m).empty()) {
                    throw DatasetError("identity " + std::to_string(index_.identity(k)) + " has no " + to_string(m) +
                                       " sample");
                }
            }
        }
    }

    const IdentityIndex& index() const noexcept { return index_; }

    TupleBatch next(std::size_t n) {
        if (n == 0) throw ParameterError("batch size N must be positive");
        TupleBatch batch;
        batch.seed = seed_;
        batch.draw = draws_++;
        batch.tuples.reserve(n);
        const std::size_t k = index_.identity_count();
        for (std::size_t i = 0; i < n; ++i) {
            Tuple t;
            const std::size_t cls = uniform(k);
            // Shifting past the anchor class keeps the negative uniform over the rest.
            std::size_t neg = uniform(k - 1);
            if (neg >= cls) ++neg;
            for (Modality m : kModalities) {
                const auto& own = index_.members(cls, m);
                const std::size_t a = uniform(own.size());
                std::size_t p = a;
                if (own.size() > 1) {
                    p = uniform(own.size() - 1);
                    if (p >= a) ++p;
                }
                t.at(Role::anchor, m) = own[a];
                t.at(Role::positive, m) = own[p];
                const auto& other_id = index_.members(neg, m);
                t.at(Role::negative, m) = other_id[uniform(other_id.size())];
            }
            batch.tuples.push_back(t);
        }
        return batch;
    }

private:
    std::size_t uniform(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

    IdentityIndex index_;
    std::mt19937_64 rng_;
    std::uint64_t seed_;
    std::uint64_t draws_ = 0;
};

/// First batch of a fresh sampler seeded with `seed`.
inline TupleBatch sample_batch(const Dataset& data, std::size_t n, std::uint64_t seed) {
    return TupleSampler(data, seed).next(n);
}

/// Steps in one pass: ceil(dataset size / (6 N)).
inline std::size_t steps_per_epoch(std::size_t dataset_size, std::size_t n) {
    if (n == 0) throw ParameterError("batch size N must be positive");
    return (dataset_size + 6 * n - 1) / (6 * n);
}

}  // namespace cmreid
