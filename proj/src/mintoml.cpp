#include "wsigrade/mintoml.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace wsigrade::mintoml {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

// strips an unquoted trailing comment
std::string strip_comment(const std::string& line) {
    bool in_string = false;
    for (size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_string = !in_string;
        if (line[i] == '#' && !in_string) return line.substr(0, i);
    }
    return line;
}

Value parse_scalar(const std::string& raw) {
    const std::string text = trim(raw);
    if (text.empty()) throw ParamError("toml: empty value");
    if (text.front() == '"') {
        if (text.size() < 2 || text.back() != '"') throw ParamError("toml: unterminated string");
        return text.substr(1, text.size() - 2);
    }
    if (text == "true") return true;
    if (text == "false") return false;
    const bool is_float = text.find_first_of(".eE") != std::string::npos;
    try {
        size_t used = 0;
        if (is_float) {
            const double v = std::stod(text, &used);
            if (used != text.size()) throw ParamError("toml: bad float: " + text);
            return v;
        }
        const int64_t v = std::stoll(text, &used);
        if (used != text.size()) throw ParamError("toml: bad integer: " + text);
        return v;
    } catch (const std::exception&) {
        throw ParamError("toml: cannot parse value: " + text);
    }
}

Value parse_value(const std::string& raw) {
    const std::string text = trim(raw);
    if (!text.empty() && text.front() == '[') {
        if (text.back() != ']') throw ParamError("toml: unterminated array");
        std::vector<double> numbers;
        std::vector<std::string> strings;
        bool any_string = false;
        std::string inner = text.substr(1, text.size() - 2);
        std::stringstream ss(inner);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item.empty()) continue;
            Value v = parse_scalar(item);
            if (std::holds_alternative<std::string>(v)) {
                any_string = true;
                strings.push_back(std::get<std::string>(v));
            } else if (std::holds_alternative<int64_t>(v)) {
                numbers.push_back(static_cast<double>(std::get<int64_t>(v)));
            } else if (std::holds_alternative<double>(v)) {
                numbers.push_back(std::get<double>(v));
            } else {
                throw ParamError("toml: unsupported array element");
            }
        }
        if (any_string) {
            if (!numbers.empty()) throw ParamError("toml: mixed array types");
            return strings;
        }
        return numbers;
    }
    return parse_scalar(text);
}

std::string format_value(const Value& value) {
    std::ostringstream out;
    if (std::holds_alternative<bool>(value)) {
        out << (std::get<bool>(value) ? "true" : "false");
    } else if (std::holds_alternative<int64_t>(value)) {
        out << std::get<int64_t>(value);
    } else if (std::holds_alternative<double>(value)) {
        std::ostringstream num;
        num.precision(17);
        num << std::get<double>(value);
        std::string text = num.str();
        if (text.find_first_of(".eE") == std::string::npos) text += ".0";
        out << text;
    } else if (std::holds_alternative<std::string>(value)) {
        out << '"' << std::get<std::string>(value) << '"';
    } else if (std::holds_alternative<std::vector<double>>(value)) {
        out << '[';
        const auto& v = std::get<std::vector<double>>(value);
        for (size_t i = 0; i < v.size(); ++i) {
            if (i) out << ", ";
            std::ostringstream num;
            num.precision(17);
            num << v[i];
            out << num.str();
        }
        out << ']';
    } else {
        out << '[';
        const auto& v = std::get<std::vector<std::string>>(value);
        for (size_t i = 0; i < v.size(); ++i) {
            if (i) out << ", ";
            out << '"' << v[i] << '"';
        }
        out << ']';
    }
    return out.str();
}

}  // namespace

void Doc::set(const std::string& section, const std::string& key, Value value) {
    for (auto& [name, entries] : sections_) {
        if (name != section) continue;
        for (auto& [k, v] : entries)
            if (k == key) {
                v = std::move(value);
                return;
            }
        entries.emplace_back(key, std::move(value));
        return;
    }
    sections_.push_back({section, {{key, std::move(value)}}});
}

const Value* Doc::find(const std::string& section, const std::string& key) const {
    for (const auto& [name, entries] : sections_) {
        if (name != section) continue;
        for (const auto& [k, v] : entries)
            if (k == key) return &v;
    }
    return nullptr;
}

bool Doc::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

bool Doc::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const Value* v = find(section, key);
    if (!v) return fallback;
    if (!std::holds_alternative<bool>(*v))
        throw ParamError("config: " + section + "." + key + " must be a boolean");
    return std::get<bool>(*v);
}

int64_t Doc::get_int(const std::string& section, const std::string& key, int64_t fallback) const {
    const Value* v = find(section, key);
    if (!v) return fallback;
    if (std::holds_alternative<int64_t>(*v)) return std::get<int64_t>(*v);
    throw ParamError("config: " + section + "." + key + " must be an integer");
}

double Doc::get_double(const std::string& section, const std::string& key, double fallback) const {
    const Value* v = find(section, key);
    if (!v) return fallback;
    if (std::holds_alternative<double>(*v)) return std::get<double>(*v);
    if (std::holds_alternative<int64_t>(*v)) return static_cast<double>(std::get<int64_t>(*v));
    throw ParamError("config: " + section + "." + key + " must be a number");
}

std::string Doc::get_string(const std::string& section, const std::string& key,
                            const std::string& fallback) const {
    const Value* v = find(section, key);
    if (!v) return fallback;
    if (!std::holds_alternative<std::string>(*v))
        throw ParamError("config: " + section + "." + key + " must be a string");
    return std::get<std::string>(*v);
}

std::vector<double> Doc::get_doubles(const std::string& section, const std::string& key,
                                     const std::vector<double>& fallback) const {
    const Value* v = find(section, key);
    if (!v) return fallback;
    if (!std::holds_alternative<std::vector<double>>(*v))
        throw ParamError("config: " + section + "." + key + " must be a numeric array");
    return std::get<std::vector<double>>(*v);
}

std::string Doc::dump() const {
    std::ostringstream out;
    bool first = true;
    for (const auto& [name, entries] : sections_) {
        if (!first) out << "\n";
        first = false;
        out << '[' << name << "]\n";
        for (const auto& [key, value] : entries) out << key << " = " << format_value(value) << "\n";
    }
    return out.str();
}

Doc Doc::parse(const std::string& text) {
    Doc doc;
    std::stringstream ss(text);
    std::string line;
    std::string section;
    size_t line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ParamError("toml line " + std::to_string(line_no) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ParamError("toml line " + std::to_string(line_no) + ": empty section name");
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ParamError("toml line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw ParamError("toml line " + std::to_string(line_no) + ": empty key");
        doc.set(section, key, parse_value(line.substr(eq + 1)));
    }
    return doc;
}

Doc Doc::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config: " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
}

void Doc::write_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config: " + path);
    out << dump();
}

void Doc::apply_override(const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ParamError("override must look like section.key=value: " + assignment);
    const std::string path = trim(assignment.substr(0, eq));
    const size_t dot = path.find('.');
    if (dot == std::string::npos)
        throw ParamError("override key must be section.key: " + assignment);
    set(path.substr(0, dot), path.substr(dot + 1), parse_value(assignment.substr(eq + 1)));
}

}  // namespace wsigrade::mintoml
