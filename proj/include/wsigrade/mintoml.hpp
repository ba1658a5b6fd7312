#pragma once

#include <map>
#include <string>
#include <variant>
#include <vector>

#include "wsigrade/common.hpp"

namespace wsigrade::mintoml {

// Minimal TOML subset: one level of [section] headers, scalar values
// (strings, booleans, integers, floats) and flat arrays. Enough for config
// files; not a general TOML implementation.

using Value = std::variant<bool, int64_t, double, std::string, std::vector<double>,
                           std::vector<std::string>>;

class Doc {
public:
    void set(const std::string& section, const std::string& key, Value value);
    bool has(const std::string& section, const std::string& key) const;

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    int64_t get_int(const std::string& section, const std::string& key, int64_t fallback) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const;
    std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                    const std::vector<double>& fallback) const;

    std::string dump() const;
    static Doc parse(const std::string& text);
    static Doc parse_file(const std::string& path);
    void write_file(const std::string& path) const;

    // "section.key=value" override, parsed with the same scalar rules
    void apply_override(const std::string& assignment);

private:
    const Value* find(const std::string& section, const std::string& key) const;

    // insertion-ordered sections and keys
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, Value>>>> sections_;
};

}  // namespace wsigrade::mintoml
