#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mqvtg/tensor.hpp"

namespace mqvtg {

// Shortest round-trip decimal form (std::to_chars), so CSV and log output is
// byte-stable across runs and locale-independent.
inline std::string format_double(double v) {
    std::array<char, 32> buf;
    auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    if (ec != std::errc()) throw std::runtime_error("format_double: conversion failed");
    return std::string(buf.data(), p);
}

// MQFT container: magic "MQFT", u32 version, u32 rows, u32 cols, then the
// row-major payload. Version 1 stores 32-bit little-endian floats and is the
// interchange format for clip/patch/text features. Version 2 stores 64-bit
// doubles and exists only so checkpoints can round-trip the full training
// precision; feature files always use version 1.
// Patch features append one u32 trailer with the per-clip patch count P.

namespace detail {

static_assert(sizeof(float) == 4 && sizeof(double) == 8, "unexpected float widths");

// The format is little-endian on disk; this code assumes a little-endian
// host (true for every target this builds on).
inline void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t take_u32(std::istream& is, const std::string& what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw std::runtime_error("truncated MQFT file: missing " + what);
    return v;
}

}  // namespace detail

inline void write_features(std::ostream& os, const Tensor& m, std::uint32_t version = 1) {
    if (!m.all_finite()) throw std::invalid_argument("write_features: non-finite matrix");
    if (version != 1 && version != 2)
        throw std::invalid_argument("write_features: unsupported version " + std::to_string(version));
    os.write("MQFT", 4);
    detail::put_u32(os, version);
    detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
    if (m.numel() > 0 && version == 1) {
        std::vector<float> buf(m.numel());
        for (std::size_t i = 0; i < m.numel(); ++i) buf[i] = static_cast<float>(m[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * 4));
    } else if (m.numel() > 0) {
        os.write(reinterpret_cast<const char*>(m.data().data()),
                 static_cast<std::streamsize>(m.numel() * 8));
    }
    if (!os) throw std::runtime_error("write_features: stream write failed");
}

inline void write_features(const std::string& path, const Tensor& m, std::uint32_t version = 1) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_features: cannot open " + path);
    write_features(f, m, version);
}

inline Tensor read_features(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MQFT", 4) != 0)
        throw std::runtime_error("not an MQFT file");
    const std::uint32_t version = detail::take_u32(is, "version");
    if (version != 1 && version != 2)
        throw std::runtime_error("unsupported MQFT version " + std::to_string(version));
    const std::uint32_t rows = detail::take_u32(is, "rows");
    const std::uint32_t cols = detail::take_u32(is, "cols");
    Tensor m(rows, cols);
    if (m.numel() > 0 && version == 1) {
        std::vector<float> buf(m.numel());
        if (!is.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(buf.size() * 4)))
            throw std::runtime_error("truncated MQFT payload: expected " +
                                     std::to_string(rows) + "x" + std::to_string(cols));
        for (std::size_t i = 0; i < m.numel(); ++i) m[i] = buf[i];
    } else if (m.numel() > 0) {
        if (!is.read(reinterpret_cast<char*>(m.data().data()),
                     static_cast<std::streamsize>(m.numel() * 8)))
            throw std::runtime_error("truncated MQFT payload: expected " +
                                     std::to_string(rows) + "x" + std::to_string(cols));
    }
    return m;
}

inline Tensor read_features(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_features: cannot open " + path);
    return read_features(f);
}

// Patch variant: flattened (T*P)xd matrix plus a u32 trailer carrying P.
inline void write_patch_features(const std::string& path, const Tensor& m, std::uint32_t patches) {
    if (patches == 0 || m.rows() % patches != 0)
        throw std::invalid_argument("write_patch_features: patch count " +
                                    std::to_string(patches) + " does not divide rows");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_patch_features: cannot open " + path);
    write_features(f, m, 1);
    detail::put_u32(f, patches);
    if (!f) throw std::runtime_error("write_patch_features: stream write failed");
}

inline std::pair<Tensor, std::uint32_t> read_patch_features(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_patch_features: cannot open " + path);
    Tensor m = read_features(f);
    const std::uint32_t patches = detail::take_u32(f, "patch trailer");
    if (patches == 0 || m.rows() % patches != 0)
        throw std::runtime_error("read_patch_features: invalid patch trailer " +
                                 std::to_string(patches));
    return {m, patches};
}

// ---------------------------------------------------------------------------
// Annotations (JSON Lines, QVHighlights-shaped)
// ---------------------------------------------------------------------------

struct Annotation {
    std::int64_t qid = 0;
    std::string vid;
    std::string query;  // optional, may stay empty
    double duration = 0.0;
    std::vector<std::pair<double, double>> relevant_windows;
    std::vector<double> saliency;  // one score per clip

    bool operator==(const Annotation&) const = default;
};

// Parses a JSONL annotation file. Structurally malformed lines are hard
// errors carrying the line number; records that parse but violate the window
// invariants are skipped and described in `rejected` for the caller to log.
inline std::vector<Annotation> load_annotations(std::istream& is,
                                                std::vector<std::string>* rejected = nullptr) {
    std::vector<Annotation> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error("annotation line " + std::to_string(lineno) +
                                     ": malformed JSON: " + e.what());
        }
        Annotation a;
        try {
            a.qid = j.at("qid").get<std::int64_t>();
            a.vid = j.at("vid").get<std::string>();
            a.duration = j.at("duration").get<double>();
            for (const auto& w : j.at("relevant_windows")) {
                if (!w.is_array() || w.size() != 2)
                    throw std::runtime_error("window is not a [start,end] pair");
                a.relevant_windows.emplace_back(w[0].get<double>(), w[1].get<double>());
            }
            if (j.contains("saliency")) a.saliency = j["saliency"].get<std::vector<double>>();
            if (j.contains("query")) a.query = j["query"].get<std::string>();
        } catch (const std::exception& e) {
            throw std::runtime_error("annotation line " + std::to_string(lineno) + ": " + e.what());
        }
        // Invariant screening: reject the record, keep going.
        std::string bad;
        if (a.duration <= 0.0) bad = "duration must be positive";
        for (const auto& [s, e] : a.relevant_windows) {
            if (s >= e) { bad = "start >= end"; break; }
            if (s < 0.0 || e > a.duration) { bad = "window outside duration"; break; }
        }
        if (!bad.empty()) {
            if (rejected)
                rejected->push_back("line " + std::to_string(lineno) + " (qid " +
                                    std::to_string(a.qid) + "): " + bad);
            continue;
        }
        out.push_back(std::move(a));
    }
    return out;
}

inline std::vector<Annotation> load_annotations(const std::string& path,
                                                std::vector<std::string>* rejected = nullptr) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_annotations: cannot open " + path);
    return load_annotations(f, rejected);
}

inline void save_annotations(std::ostream& os, const std::vector<Annotation>& anns) {
    for (const auto& a : anns) {
        nlohmann::json j;
        j["qid"] = a.qid;
        j["vid"] = a.vid;
        j["duration"] = a.duration;
        auto windows = nlohmann::json::array();
        for (const auto& [s, e] : a.relevant_windows) windows.push_back({s, e});
        j["relevant_windows"] = std::move(windows);
        j["saliency"] = a.saliency;
        if (!a.query.empty()) j["query"] = a.query;
        os << j.dump() << '\n';
    }
    if (!os) throw std::runtime_error("save_annotations: stream write failed");
}

inline void save_annotations(const std::string& path, const std::vector<Annotation>& anns) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_annotations: cannot open " + path);
    save_annotations(f, anns);
}

}  // namespace mqvtg
