#pragma once

#include <span>
#include <vector>

#include "cmreid/data/dataset.hpp"
#include "cmreid/data/embedding_dump.hpp"
#include "cmreid/encoder.hpp"

namespace cmreid {

/// Embeds every sample with the stream of its own modality, keeping dataset
/// order.
inline EmbeddingDump embed_dataset(const Dataset& data, const TwoStreamEncoder& enc) {
    data.validate();
    EmbeddingDump dump;
    dump.dim = enc.config().embedding_dim;
    dump.rows.resize(data.size());
    for (Modality m : kModalities) {
        const std::vector<std::size_t> idx = data.indices_of(m);
        if (idx.empty()) continue;
        std::vector<FeatureMap> maps;
        maps.reserve(idx.size());
        for (std::size_t i : idx) maps.push_back(data.samples[i]);
        const Tensor e = encode_all(maps, m, enc);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const SampleRecord& rec = data.records[idx[r]];
            const auto row = e.values().subspan(r * dump.dim, dump.dim);
            dump.rows[idx[r]] = DumpRow{rec.id, rec.identity, rec.modality, std::vector<double>(row.begin(), row.end())};
        }
    }
    return dump;
}

}  // namespace cmreid
