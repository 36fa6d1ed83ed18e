#pragma once

// Run configuration: a flat map of "section.key" fields read from an INI-style
// file and overridden by --section.key=value arguments.
//
//   # comment
//   [train]
//   steps = 2000
//   learning_rate = 1e-2
//
// Typed getters record the value they resolve, defaults included, so the
// effective configuration can be echoed after the run is set up.

#include <cctype>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmreid/error.hpp"
#include "cmreid/tensor.hpp"
#include "cmreid/text_io.hpp"

namespace cmreid {

class RunConfig {
public:
    void set(const std::string& key, std::string value) {
        check_key(key);
        values_[key] = std::move(value);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        used_.insert(key);
        return values_.try_emplace(key, fallback).first->second;
    }

    double get_double(const std::string& key, double fallback) {
        const std::string raw = get_string(key, text::format_double(fallback));
        const auto v = text::parse_double(raw);
        if (!v) throw UsageError(key + ": expected a finite number, got '" + raw + "'");
        return *v;
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) {
        const std::string raw = get_string(key, std::to_string(fallback));
        const auto v = text::parse_int<std::uint64_t>(raw);
        if (!v) throw UsageError(key + ": expected a non-negative integer, got '" + raw + "'");
        return *v;
    }

    std::size_t get_size(const std::string& key, std::size_t fallback) {
        return static_cast<std::size_t>(get_u64(key, fallback));
    }

    bool get_bool(const std::string& key, bool fallback) {
        const std::string raw = get_string(key, fallback ? "true" : "false");
        if (raw == "true" || raw == "1" || raw == "yes" || raw == "on") return true;
        if (raw == "false" || raw == "0" || raw == "no" || raw == "off") return false;
        throw UsageError(key + ": expected true or false, got '" + raw + "'");
    }

    /// Comma- or space-separated list of non-negative integers; may be empty.
    std::vector<std::size_t> get_sizes(const std::string& key, const std::vector<std::size_t>& fallback) {
        std::string joined;
        for (std::size_t i = 0; i < fallback.size(); ++i) joined += (i ? "," : "") + std::to_string(fallback[i]);
        std::string raw = get_string(key, joined);
        for (char& c : raw) {
            if (c == ',') c = ' ';
        }
        std::vector<std::size_t> out;
        for (std::string_view f : text::split_fields(raw)) {
            const auto v = text::parse_int<std::size_t>(f);
            if (!v) throw UsageError(key + ": expected a list of non-negative integers, got '" + values_[key] + "'");
            out.push_back(*v);
        }
        return out;
    }

    /// Fields that were set but never read by the command.
    std::vector<std::string> unused() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_) {
            if (!used_.count(k)) out.push_back(k);
        }
        return out;
    }

    void reject_unused() const {
        const auto extra = unused();
        if (!extra.empty()) throw UsageError("unknown config field '" + extra.front() + "'");
    }

    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    /// "key=value" lines in key order, skipping `exclude`.
    std::vector<std::string> lines(const std::set<std::string>& exclude = {}) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_) {
            if (!exclude.count(k)) out.push_back(k + "=" + v);
        }
        return out;
    }

    static void check_key(std::string_view key) {
        const auto dot = key.find('.');
        if (dot == std::string_view::npos || dot == 0 || dot + 1 == key.size() ||
            key.find('.', dot + 1) != std::string_view::npos) {
            throw UsageError("config field '" + std::string(key) + "' must have the form section.key");
        }
        for (char c : key) {
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) {
                throw UsageError("config field '" + std::string(key) + "' contains invalid characters");
            }
        }
    }

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

inline void parse_config(std::istream& in, const std::string& source, RunConfig& cfg) {
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view body = text::trim(line);
        if (body.empty() || body.front() == '#' || body.front() == ';') continue;
        if (body.front() == '[') {
            if (body.back() != ']' || body.size() < 3) throw ParseError(source, lineno, "malformed section header");
            section = std::string(text::trim(body.substr(1, body.size() - 2)));
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string_view::npos) throw ParseError(source, lineno, "expected key = value");
        const std::string key(text::trim(body.substr(0, eq)));
        const std::string value(text::trim(body.substr(eq + 1)));
        if (key.empty()) throw ParseError(source, lineno, "missing key");
        const std::string full = key.find('.') == std::string::npos && !section.empty() ? section + "." + key : key;
        try {
            cfg.set(full, value);
        } catch (const UsageError& e) {
            throw ParseError(source, lineno, e.what());
        }
    }
}

inline void load_config(const std::string& path, RunConfig& cfg) {
    auto in = text::open_input(path);
    parse_config(in, path, cfg);
}

/// Applies "--section.key=value" (leading dashes optional).
inline void apply_override(RunConfig& cfg, std::string_view arg) {
    while (!arg.empty() && arg.front() == '-') arg.remove_prefix(1);
    const auto eq = arg.find('=');
    if (eq == std::string_view::npos) {
        throw UsageError("override '" + std::string(arg) + "' must have the form --section.key=value");
    }
    cfg.set(std::string(arg.substr(0, eq)), std::string(arg.substr(eq + 1)));
}

/// INI text grouped by section.
inline void write_config(std::ostream& out, const RunConfig& cfg, std::span<const std::string> comments = {}) {
    for (const std::string& c : comments) out << "# " << c << '\n';
    std::string section;
    for (const auto& [k, v] : cfg.values()) {
        const auto dot = k.find('.');
        const std::string s = k.substr(0, dot);
        if (s != section) {
            out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
            section = s;
        }
        out << k.substr(dot + 1) << " = " << v << '\n';
    }
}

}  // namespace cmreid
