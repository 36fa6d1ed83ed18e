#pragma once

// Manifest text format, one record per line:
//
//   # name: <dataset name>        (optional directive)
//   # shape: <C> <H> <W>          (optional directive, needed to load payloads)
//   <id> <identity> <modality> [<locator>]
//
// Fields are separated by spaces or tabs; other '#' lines are comments.
// Modality tokens: visible|rgb|v and infrared|ir|thermal|t. A locator names
// a payload file in embedding-dump format, relative to the manifest, whose
// row with the same id holds the flattened (C, H, W) feature map.

#include <array>
#include <cstddef>
#include <filesystem>
#include <istream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cmreid/data/dataset.hpp"
#include "cmreid/data/embedding_dump.hpp"
#include "cmreid/error.hpp"
#include "cmreid/text_io.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

struct Manifest {
    std::string name;
    Shape shape;  // empty when the manifest does not declare one
    std::vector<SampleRecord> records;
    std::vector<std::size_t> lines;  // source line of each record

    /// (visible, infrared) record counts per identity.
    std::map<int, std::array<std::size_t, 2>> modality_counts() const {
        std::map<int, std::array<std::size_t, 2>> out;
        for (const SampleRecord& r : records) ++out[r.identity][index_of(r.modality)];
        return out;
    }
};

inline Manifest parse_manifest(std::istream& in, const std::string& source) {
    Manifest m;
    std::set<std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view body = text::trim(line);
        if (body.empty()) continue;
        if (body.front() == '#') {
            const std::string_view directive = text::trim(body.substr(1));
            if (directive.rfind("name:", 0) == 0) {
                m.name = std::string(text::trim(directive.substr(5)));
            } else if (directive.rfind("shape:", 0) == 0) {
                m.shape.clear();
                for (std::string_view f : text::split_fields(directive.substr(6))) {
                    const auto d = text::parse_int<std::size_t>(f);
                    if (!d || *d == 0) throw ParseError(source, lineno, "malformed shape directive");
                    m.shape.push_back(*d);
                }
                if (m.shape.size() != 3) throw ParseError(source, lineno, "shape directive needs C H W");
            }
            continue;
        }
        const auto fields = text::split_fields(body);
        if (fields.size() < 3) {
            static constexpr std::array<const char*, 3> kNames{"id", "identity", "modality"};
            throw ParseError(source, lineno, std::string("missing field '") + kNames[fields.size()] + "'");
        }
        if (fields.size() > 4) throw ParseError(source, lineno, "too many fields");
        SampleRecord r;
        r.id = std::string(fields[0]);
        const auto identity = text::parse_int<int>(fields[1]);
        if (!identity) throw ParseError(source, lineno, "identity '" + std::string(fields[1]) + "' is not an integer");
        r.identity = *identity;
        try {
            r.modality = parse_modality(fields[2]);
        } catch (const ParameterError& e) {
            throw ParseError(source, lineno, e.what());
        }
        if (fields.size() == 4) r.locator = std::string(fields[3]);
        if (!seen.insert(r.id).second) throw ParseError(source, lineno, "duplicate sample id '" + r.id + "'");
        m.records.push_back(std::move(r));
        m.lines.push_back(lineno);
    }
    if (m.records.empty()) throw DatasetError("manifest '" + source + "' has no records");
    if (m.name.empty()) m.name = std::filesystem::path(source).stem().string();
    return m;
}

inline Manifest load_manifest(const std::string& path) {
    auto in = text::open_input(path);
    return parse_manifest(in, path);
}

inline void write_manifest(const Manifest& m, const std::string& path, std::span<const std::string> comments = {}) {
    auto out = text::open_output(path);
    for (const std::string& c : comments) out << "# " << c << '\n';
    out << "# name: " << m.name << '\n';
    if (m.shape.size() == 3) out << "# shape: " << m.shape[0] << ' ' << m.shape[1] << ' ' << m.shape[2] << '\n';
    for (const SampleRecord& r : m.records) {
        out << r.id << '\t' << r.identity << '\t' << to_string(r.modality);
        if (!r.locator.empty()) out << '\t' << r.locator;
        out << '\n';
    }
    if (!out) throw Error("failed writing '" + path + "'");
}

/// Loads a manifest and materializes every record's feature map from its
/// payload file.
inline Dataset load_dataset(const std::string& manifest_path) {
    const Manifest m = load_manifest(manifest_path);
    if (m.shape.size() != 3) throw DatasetError("manifest '" + manifest_path + "' lacks a '# shape: C H W' directive");
    const std::size_t dim = shape_size(m.shape);
    const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
    std::map<std::string, std::unordered_map<std::string, std::vector<double>>> payloads;

    Dataset data;
    data.name = m.name;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const SampleRecord& r = m.records[i];
        if (r.locator.empty()) {
            throw ParseError(manifest_path, m.lines[i], "record '" + r.id + "' has no payload locator");
        }
        auto it = payloads.find(r.locator);
        if (it == payloads.end()) {
            const EmbeddingDump dump = read_embeddings((base / r.locator).string());
            if (dump.dim != dim) {
                throw DatasetError("payload '" + r.locator + "' has dimension " + std::to_string(dump.dim) +
                                   ", manifest shape needs " + std::to_string(dim));
            }
            std::unordered_map<std::string, std::vector<double>> rows;
            for (const DumpRow& row : dump.rows) rows.emplace(row.id, row.values);
            it = payloads.emplace(r.locator, std::move(rows)).first;
        }
        const auto row = it->second.find(r.id);
        if (row == it->second.end()) {
            throw ParseError(manifest_path, m.lines[i], "payload '" + r.locator + "' has no row for '" + r.id + "'");
        }
        data.records.push_back(r);
        data.samples.emplace_back(Tensor(m.shape, row->second));
    }
    data.validate();
    return data;
}

/// Writes a dataset as a manifest plus a single payload file next to it.
inline void save_dataset(const Dataset& data, const std::string& manifest_path, std::span<const std::string> comments = {}) {
    data.validate();
    const std::filesystem::path mpath(manifest_path);
    const std::string payload_name = mpath.stem().string() + ".payload.txt";
    Manifest m;
    m.name = data.name;
    m.shape = data.sample_shape();
    EmbeddingDump dump;
    dump.dim = shape_size(m.shape);
    for (std::size_t i = 0; i < data.size(); ++i) {
        SampleRecord r = data.records[i];
        r.locator = payload_name;
        m.records.push_back(r);
        const auto v = data.samples[i].tensor().values();
        dump.rows.push_back(DumpRow{r.id, r.identity, r.modality, std::vector<double>(v.begin(), v.end())});
    }
    write_manifest(m, manifest_path, comments);
    write_embeddings(dump, (mpath.parent_path() / payload_name).string(), comments);
}

}  // namespace cmreid
