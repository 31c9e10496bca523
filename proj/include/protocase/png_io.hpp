#pragma once

// Minimal PNG reader/writer for 8-bit grayscale images, deflate via zlib.
// The writer emits filter-0 scanlines; the reader accepts any of the five
// baseline filters but only bit depth 8, color type 0, non-interlaced.

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "protocase/common.hpp"

namespace protocase::png {

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                         const std::vector<std::uint8_t>& payload) {
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc = static_cast<std::uint32_t>(
        ::crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
    put_u32(out, crc);
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_gray8(int h, int w, const std::vector<std::uint8_t>& pixels) {
    if (h <= 0 || w <= 0 || pixels.size() != static_cast<std::size_t>(h) * w)
        throw DataError("png encode: pixel buffer does not match dimensions");

    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (w + 1));
    for (int y = 0; y < h; ++y) {
        raw[static_cast<std::size_t>(y) * (w + 1)] = 0;  // filter: None
        std::memcpy(raw.data() + static_cast<std::size_t>(y) * (w + 1) + 1,
                    pixels.data() + static_cast<std::size_t>(y) * w, static_cast<std::size_t>(w));
    }
    uLongf comp_len = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (::compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw DataError("png encode: deflate failed");
    comp.resize(comp_len);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    detail::put_u32(ihdr, static_cast<std::uint32_t>(w));
    detail::put_u32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // color type: grayscale
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // not interlaced
    detail::append_chunk(out, "IHDR", ihdr);
    detail::append_chunk(out, "IDAT", comp);
    detail::append_chunk(out, "IEND", {});
    return out;
}

struct Gray8 {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> pixels;
};

inline Gray8 decode_gray8(const std::vector<std::uint8_t>& bytes, const std::string& origin = "") {
    const std::string where = origin.empty() ? "png" : "png '" + origin + "'";
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw DataError(where + ": not a PNG file");

    int w = 0, h = 0;
    bool saw_ihdr = false;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 12 <= bytes.size()) {
        const std::uint32_t len = detail::get_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw DataError(where + ": truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* payload = bytes.data() + pos + 8;
        const auto expect = static_cast<std::uint32_t>(
            ::crc32(0L, bytes.data() + pos + 4, static_cast<uInt>(4 + len)));
        if (expect != detail::get_u32(bytes.data() + pos + 8 + len))
            throw DataError(where + ": chunk CRC mismatch");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw DataError(where + ": bad IHDR");
            w = static_cast<int>(detail::get_u32(payload));
            h = static_cast<int>(detail::get_u32(payload + 4));
            if (payload[8] != 8 || payload[9] != 0)
                throw DataError(where + ": only 8-bit grayscale supported");
            if (payload[12] != 0) throw DataError(where + ": interlaced PNG not supported");
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || w <= 0 || h <= 0) throw DataError(where + ": missing IHDR");

    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (w + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw DataError(where + ": inflate failed");

    Gray8 img;
    img.h = h;
    img.w = w;
    img.pixels.assign(static_cast<std::size_t>(h) * w, 0);
    std::vector<std::uint8_t> prev(static_cast<std::size_t>(w), 0);
    for (int y = 0; y < h; ++y) {
        const std::uint8_t* line = raw.data() + static_cast<std::size_t>(y) * (w + 1);
        const std::uint8_t filter = line[0];
        std::uint8_t* cur = img.pixels.data() + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) {
            const int rawv = line[1 + x];
            const int a = x > 0 ? cur[x - 1] : 0;
            const int b = prev[x];
            const int c = x > 0 ? prev[x - 1] : 0;
            int v = 0;
            switch (filter) {
                case 0: v = rawv; break;
                case 1: v = rawv + a; break;
                case 2: v = rawv + b; break;
                case 3: v = rawv + (a + b) / 2; break;
                case 4: v = rawv + detail::paeth(a, b, c); break;
                default: throw DataError(where + ": unknown scanline filter");
            }
            cur[x] = static_cast<std::uint8_t>(v & 0xff);
        }
        std::memcpy(prev.data(), cur, static_cast<std::size_t>(w));
    }
    return img;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed: " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing file: " + path);
    f.seekg(0, std::ios::end);
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw DataError("read failed: " + path);
    return bytes;
}

inline std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
    return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace protocase::png
