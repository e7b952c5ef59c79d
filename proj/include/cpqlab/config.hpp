#pragma once

// Flat `key = value` configuration. Lines starting with '#' are comments.

#include <charconv>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cpqlab/errors.hpp"

namespace cpqlab {

class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(std::istream& in) {
        KeyValueConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw DomainError("config line " + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw DomainError("config line " + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static KeyValueConfig parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DomainError("cannot open config file " + path);
        return parse(in);
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set(const std::string& key, double value) { values_[key] = format_double(value); }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_double(key, it->second);
    }

    long get_int(const std::string& key, long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        long v = 0;
        const auto& s = it->second;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size()) {
            // accept integral values written in float notation, e.g. 2e5
            const double d = parse_double(key, s);
            if (d != static_cast<double>(static_cast<long>(d)))
                throw DomainError("config key '" + key + "': expected an integer, got '" + s + "'");
            return static_cast<long>(d);
        }
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw DomainError("config key '" + key + "': expected true/false, got '" + it->second + "'");
    }

    std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<double> out;
        std::stringstream ss(it->second);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(parse_double(key, item));
        }
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    /// Serialized in key order, so equal configs give equal text.
    std::string to_string() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    static std::string format_double(double v) {
        char buf[64];
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, ptr);
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static double parse_double(const std::string& key, const std::string& s) {
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size()) {
            if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
            throw DomainError("config key '" + key + "': expected a number, got '" + s + "'");
        }
        return v;
    }

    std::map<std::string, std::string> values_;
};

}  // namespace cpqlab
