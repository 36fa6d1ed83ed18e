#pragma once

// Embedding dump text format:
//
//   # optional comment lines (provenance)
//   D=<dim> N=<count>
//   <id> <identity> <modality> v1 ... vD      (N rows)
//
// Values are written in shortest round-trip form, so read(write(d)) == d.

#include <cstddef>
#include <istream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cmreid/error.hpp"
#include "cmreid/text_io.hpp"
#include "cmreid/types.hpp"

namespace cmreid {

struct DumpRow {
    std::string id;
    int identity = 0;
    Modality modality = Modality::visible;
    std::vector<double> values;

    friend bool operator==(const DumpRow&, const DumpRow&) = default;
};

struct EmbeddingDump {
    std::size_t dim = 0;
    std::vector<DumpRow> rows;

    friend bool operator==(const EmbeddingDump&, const EmbeddingDump&) = default;

    void validate() const {
        if (dim == 0) throw ParameterError("embedding dump dimension must be positive");
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].values.size() != dim) {
                throw DimensionError("embedding dump row " + std::to_string(i) + " has " +
                                     std::to_string(rows[i].values.size()) + " values, expected " + std::to_string(dim));
            }
        }
    }

    /// Rows of one modality as an (n, D) matrix plus their labels and ids.
    struct Split {
        std::vector<std::vector<double>> vectors;
        std::vector<int> labels;
        std::vector<std::string> ids;
    };

    Split select(Modality m) const {
        Split out;
        for (const DumpRow& r : rows) {
            if (r.modality != m) continue;
            out.vectors.push_back(r.values);
            out.labels.push_back(r.identity);
            out.ids.push_back(r.id);
        }
        return out;
    }
};

inline void write_embeddings(std::ostream& out, const EmbeddingDump& dump, std::span<const std::string> comments = {}) {
    dump.validate();
    for (const std::string& c : comments) out << "# " << c << '\n';
    out << "D=" << dump.dim << " N=" << dump.rows.size() << '\n';
    for (const DumpRow& r : dump.rows) {
        out << r.id << ' ' << r.identity << ' ' << to_string(r.modality);
        for (double v : r.values) out << ' ' << text::format_double(v);
        out << '\n';
    }
}

inline void write_embeddings(const EmbeddingDump& dump, const std::string& path,
                             std::span<const std::string> comments = {}) {
    auto out = text::open_output(path);
    write_embeddings(out, dump, comments);
    if (!out) throw Error("failed writing '" + path + "'");
}

inline EmbeddingDump parse_embeddings(std::istream& in, const std::string& source) {
    EmbeddingDump dump;
    std::size_t expected = 0;
    bool have_header = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view body = text::trim(line);
        if (body.empty() || body.front() == '#') continue;
        const auto fields = text::split_fields(body);
        if (!have_header) {
            if (fields.size() != 2 || fields[0].substr(0, 2) != "D=" || fields[1].substr(0, 2) != "N=") {
                throw ParseError(source, lineno, "expected header 'D=<dim> N=<count>'");
            }
            const auto d = text::parse_int<std::size_t>(fields[0].substr(2));
            const auto n = text::parse_int<std::size_t>(fields[1].substr(2));
            if (!d || !n || *d == 0) throw ParseError(source, lineno, "malformed dump header");
            dump.dim = *d;
            expected = *n;
            have_header = true;
            continue;
        }
        const std::size_t row = dump.rows.size();
        if (fields.size() != 3 + dump.dim) {
            throw ParseError(source, lineno,
                             "row " + std::to_string(row) + " has " +
                                 std::to_string(fields.size() < 3 ? 0 : fields.size() - 3) + " values, expected " +
                                 std::to_string(dump.dim));
        }
        DumpRow r;
        r.id = std::string(fields[0]);
        const auto identity = text::parse_int<int>(fields[1]);
        if (!identity) throw ParseError(source, lineno, "row " + std::to_string(row) + ": bad identity");
        r.identity = *identity;
        try {
            r.modality = parse_modality(fields[2]);
        } catch (const ParameterError& e) {
            throw ParseError(source, lineno, "row " + std::to_string(row) + ": " + e.what());
        }
        r.values.reserve(dump.dim);
        for (std::size_t j = 0; j < dump.dim; ++j) {
            const auto v = text::parse_double(fields[3 + j]);
            if (!v) throw ParseError(source, lineno, "row " + std::to_string(row) + ": bad value '" + std::string(fields[3 + j]) + "'");
            r.values.push_back(*v);
        }
        dump.rows.push_back(std::move(r));
    }
    if (!have_header) throw ParseError(source, lineno, "missing dump header");
    if (dump.rows.size() != expected) {
        throw ParseError(source, lineno,
                         "header declares " + std::to_string(expected) + " rows but file has " +
                             std::to_string(dump.rows.size()));
    }
    return dump;
}

inline EmbeddingDump read_embeddings(const std::string& path) {
    auto in = text::open_input(path);
    return parse_embeddings(in, path);
}

}  // namespace cmreid
