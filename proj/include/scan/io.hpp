#pragma once

// File plumbing shared by checkpoints, logit caches and reports: atomic
// writes, the binary container (magic line + JSON header + little-endian
// blobs), PGM images, and a content hash.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "scan/errors.hpp"

namespace scan {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Keeps freed tape buffers in the heap instead of returning them to the OS.
/// Every forward pass allocates the same sizes again, and fresh mappings would
/// page-fault on first touch.
inline void configure_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
}

/// Writes `bytes` to `<path>.tmp` and renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path.string() + "'");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Shortest decimal text that parses back to the same double.
inline std::string shortest(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

// ---------------------------------------------------------------------------
// Container:
//   <magic>\n
//   <header byte length>\n
//   <JSON header>\n
//   <binary payload>

struct Container {
    nlohmann::json header;
    std::string payload;
};

inline std::string encode_container(const std::string& magic, const nlohmann::json& header, std::string_view payload) {
    const std::string h = header.dump(1);
    std::string out = magic + "\n" + std::to_string(h.size()) + "\n" + h + "\n";
    out.append(payload);
    return out;
}

inline Container decode_container(const std::string& bytes, const std::string& magic, const std::string& what) {
    const std::size_t l1 = bytes.find('\n');
    if (l1 == std::string::npos || bytes.compare(0, l1, magic) != 0) {
        throw ParseError(what + ": missing '" + magic + "' magic line");
    }
    const std::size_t l2 = bytes.find('\n', l1 + 1);
    if (l2 == std::string::npos) throw ParseError(what + ": truncated header length line");
    std::size_t header_len = 0;
    try {
        header_len = std::stoull(bytes.substr(l1 + 1, l2 - l1 - 1));
    } catch (const std::exception&) {
        throw ParseError(what + ": bad header length line");
    }
    const std::size_t body = l2 + 1;
    if (bytes.size() < body + header_len + 1) {
        throw ParseError(what + ": truncated header (expected " + std::to_string(header_len) + " bytes, found " +
                         std::to_string(bytes.size() - body) + ")");
    }
    Container c;
    try {
        c.header = nlohmann::json::parse(bytes.substr(body, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(what + ": malformed header: " + e.what());
    }
    c.payload = bytes.substr(body + header_len + 1);
    return c;
}

template <class V>
void append_raw(std::string& out, std::span<const V> values) {
    const auto* p = reinterpret_cast<const char*>(values.data());
    out.append(p, values.size_bytes());
}

/// Copies `count` values of type V starting at byte `offset` of `payload`.
template <class V>
std::vector<V> read_raw(const std::string& payload, std::size_t offset, std::size_t count, const std::string& what) {
    const std::size_t bytes = count * sizeof(V);
    if (offset + bytes > payload.size()) {
        throw ParseError(what + ": payload truncated (need " + std::to_string(offset + bytes) + " bytes, have " +
                         std::to_string(payload.size()) + ")");
    }
    std::vector<V> out(count);
    std::memcpy(out.data(), payload.data() + offset, bytes);
    return out;
}

// ---------------------------------------------------------------------------
// Images

/// Binary (P5) graymap, 8-bit.
inline std::string encode_pgm(std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels) {
    if (pixels.size() != width * height) throw ContractError("encode_pgm: pixel count does not match size");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    return out;
}

/// Min-max scaling to 0..255. A constant map becomes all zeros.
inline std::vector<std::uint8_t> to_gray8(std::span<const double> values) {
    std::vector<std::uint8_t> out(values.size(), 0);
    if (values.empty()) return out;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = static_cast<std::uint8_t>(std::lround((values[i] - *lo) / range * 255.0));
    }
    return out;
}

struct GrayImage {
    std::size_t width = 0, height = 0;
    std::vector<double> values;  // scaled to [0,1] by the file's maxval
};

/// Reads a binary (P5) or ASCII (P2) graymap with maxval <= 255.
inline GrayImage decode_pgm(const std::string& bytes, const std::string& what = "pgm") {
    std::istringstream in(bytes);
    auto token = [&]() {
        std::string t;
        while (in >> std::ws && in.peek() == '#') std::getline(in, t);
        if (!(in >> t)) throw ParseError(what + ": truncated graymap header");
        return t;
    };
    const std::string magic = token();
    if (magic != "P5" && magic != "P2") throw ParseError(what + ": not a graymap (magic '" + magic + "')");
    GrayImage img;
    std::size_t maxval = 0;
    try {
        img.width = std::stoul(token());
        img.height = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw ParseError(what + ": malformed graymap header");
    }
    if (maxval == 0 || maxval > 255) throw ParseError(what + ": unsupported maxval " + std::to_string(maxval));
    const std::size_t n = img.width * img.height;
    img.values.resize(n);
    if (magic == "P5") {
        in.get();  // single whitespace before the raster
        std::string raster(n, '\0');
        in.read(raster.data(), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw ParseError(what + ": raster truncated: expected " + std::to_string(n) + " bytes, found " +
                             std::to_string(in.gcount()));
        }
        for (std::size_t i = 0; i < n; ++i) {
            img.values[i] = static_cast<double>(static_cast<unsigned char>(raster[i])) / static_cast<double>(maxval);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) img.values[i] = std::stod(token()) / static_cast<double>(maxval);
    }
    return img;
}

}  // namespace scan
