#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "cmreid/error.hpp"
#include "cmreid/tensor.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

/// Sample records with their materialized feature maps (parallel arrays).
struct Dataset {
    std::string name;
    std::vector<SampleRecord> records;
    std::vector<FeatureMap> samples;

    std::size_t size() const noexcept { return records.size(); }

    const Shape& sample_shape() const {
        if (samples.empty()) throw DatasetError("dataset '" + name + "' has no samples");
        return samples.front().shape();
    }

    /// Per-channel mean over every sample and position.
    std::vector<double> channel_means() const {
        const Shape& s = sample_shape();
        std::vector<double> mean(s[0], 0.0);
        const std::size_t positions = s[1] * s[2];
        for (const FeatureMap& m : samples) {
            for (std::size_t c = 0; c < s[0]; ++c) {
                for (std::size_t i = 0; i < positions; ++i) mean[c] += m.tensor()[c * positions + i];
            }
        }
        for (double& v : mean) v /= static_cast<double>(samples.size() * positions);
        return mean;
    }

    /// Subset of the records of one modality, in dataset order.
    std::vector<std::size_t> indices_of(Modality m) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (records[i].modality == m) out.push_back(i);
        }
        return out;
    }

    void validate() const {
        if (records.size() != samples.size()) throw DatasetError("dataset records and samples differ in count");
        if (records.empty()) throw DatasetError("dataset '" + name + "' is empty");
        const Shape& s = sample_shape();
        for (const FeatureMap& m : samples) {
            if (m.shape() != s) throw DatasetError("dataset samples have inconsistent shapes");
        }
    }
};

/// Record indices grouped by identity and modality. Identities are kept in
/// ascending order; their position in that order is the class index.
class IdentityIndex {
public:
    explicit IdentityIndex(const Dataset& data) {
        std::map<int, std::array<std::vector<std::size_t>, 2>> groups;
        for (std::size_t i = 0; i < data.records.size(); ++i) {
            groups[data.records[i].identity][index_of(data.records[i].modality)].push_back(i);
        }
        for (auto& [id, lists] : groups) {
            identities_.push_back(id);
            members_.push_back(std::move(lists));
        }
    }

    std::size_t identity_count() const noexcept { return identities_.size(); }
    const std::vector<int>& identities() const noexcept { return identities_; }
    int identity(std::size_t cls) const { return identities_.at(cls); }

    std::size_t class_of(int identity) const {
        const auto it = std::lower_bound(identities_.begin(), identities_.end(), identity);
        if (it == identities_.end() || *it != identity) throw DatasetError("unknown identity " + std::to_string(identity));
        return static_cast<std::size_t>(it - identities_.begin());
    }

    const std::vector<std::size_t>& members(std::size_t cls, Modality m) const { return members_.at(cls)[index_of(m)]; }

private:
    std::vector<int> identities_;
    std::vector<std::array<std::vector<std::size_t>, 2>> members_;
};

}  // namespace cmreid
