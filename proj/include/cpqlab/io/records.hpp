#pragma once

// Line-delimited JSON records. Record 0 is a header object, the last record
// carries an FNV-1a 64 checksum of every preceding line (newline included).
// Doubles are written shortest-round-trip, so values reload bit-exactly.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "cpqlab/errors.hpp"
#include "cpqlab/numerics/mlp.hpp"

namespace cpqlab::io {

using json = nlohmann::json;

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h = kFnvOffset) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// JSON has no infinities; non-finite doubles travel as strings.
inline json encode_double(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

inline double decode_double(const json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    throw std::runtime_error("expected a number");
}

class RecordWriter {
public:
    explicit RecordWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
        if (!out_) throw Error("cannot open " + path + " for writing");
    }

    void write(const json& record) {
        const std::string line = record.dump() + "\n";
        hash_ = fnv1a(line, hash_);
        out_ << line;
        ++count_;
    }

    /// Appends the checksum record and flushes.
    void finish() {
        out_ << json{{"type", "checksum"}, {"fnv1a64", hex64(hash_)}}.dump() << "\n";
        out_.flush();
        if (!out_) throw Error("write failed for " + path_);
    }

    std::size_t count() const { return count_; }

private:
    std::ofstream out_;
    std::string path_;
    std::uint64_t hash_ = kFnvOffset;
    std::size_t count_ = 0;
};

/// Reads every record, verifies the trailing checksum. Errors name the record
/// index (0-based line number).
inline std::vector<json> read_records(const std::string& path, const std::string& expect_kind,
                                      int expect_version) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(0, "cannot open " + path);
    std::vector<json> records;
    std::string line;
    std::uint64_t hash = kFnvOffset;
    bool have_checksum = false;
    std::size_t index = 0;
    while (std::getline(in, line)) {
        if (have_checksum) throw LoadError(index, "data after checksum record");
        if (in.eof()) throw LoadError(index, "truncated record (no line terminator)");
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw LoadError(index, std::string("malformed record: ") + e.what());
        }
        if (!j.is_object() || !j.contains("type")) throw LoadError(index, "record has no type");
        if (j["type"] == "checksum") {
            if (j.value("fnv1a64", std::string()) != hex64(hash))
                throw LoadError(index, "checksum mismatch");
            have_checksum = true;
        } else {
            hash = fnv1a(line + "\n", hash);
            records.push_back(std::move(j));
        }
        ++index;
    }
    if (records.empty()) throw LoadError(0, "empty file");
    const json& head = records.front();
    if (head.value("type", std::string()) != expect_kind)
        throw LoadError(0, "expected a '" + expect_kind + "' header");
    if (head.value("version", -1) != expect_version)
        throw LoadError(0, "unsupported format version " + head.value("version", json()).dump());
    if (!have_checksum) throw LoadError(index, "missing checksum record (file truncated)");
    return records;
}

// ---- network parameters ---------------------------------------------------------

inline json tensor_to_json(const numerics::Tensor& t) {
    json data = json::array();
    for (double v : t.data) data.push_back(encode_double(v));
    return {{"shape", t.shape}, {"data", std::move(data)}};
}

inline numerics::Tensor tensor_from_json(const json& j) {
    std::vector<double> data;
    for (const auto& v : j.at("data")) data.push_back(decode_double(v));
    return numerics::Tensor(j.at("shape").get<std::vector<std::size_t>>(), std::move(data));
}

inline json mlp_to_json(const numerics::MlpParams& p) {
    json layers = json::array();
    for (const auto& l : p.layers)
        layers.push_back({{"weight", tensor_to_json(l.weight)}, {"bias", tensor_to_json(l.bias)}});
    return {{"output", p.output == numerics::OutputTransform::tanh_squash ? "tanh" : "identity"},
            {"layers", std::move(layers)}};
}

inline numerics::MlpParams mlp_from_json(const json& j) {
    numerics::MlpParams p;
    p.output = j.at("output") == "tanh" ? numerics::OutputTransform::tanh_squash
                                        : numerics::OutputTransform::identity;
    for (const auto& l : j.at("layers"))
        p.layers.push_back({tensor_from_json(l.at("weight")), tensor_from_json(l.at("bias"))});
    return p;
}

/// Load-time wrapper: any parse/shape failure inside `fn` becomes a LoadError for `index`.
template <class F>
auto at_record(std::size_t index, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const LoadError&) {
        throw;
    } catch (const std::exception& e) {
        throw LoadError(index, e.what());
    }
}

}  // namespace cpqlab::io
