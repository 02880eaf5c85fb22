#include "bilayer/png_io.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace bilayer {

namespace {

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

std::uint32_t get_be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& data) {
    put_be32(out, std::uint32_t(data.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc = crc32(0, out.data() + crc_start, uInt(out.size() - crc_start));
    put_be32(out, std::uint32_t(crc));
}

std::vector<std::uint8_t> encode_png(const std::uint8_t* px, int h, int w, int channels) {
    if (h <= 0 || w <= 0) throw DimensionError("encode_png: empty image");
    // filter byte 0 (None) per scanline
    std::vector<std::uint8_t> raw;
    raw.reserve(std::size_t(h) * (std::size_t(w) * channels + 1));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), px + std::size_t(y) * w * channels,
                   px + std::size_t(y + 1) * w * channels);
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw IoError("png encode: zlib compression failed");
    compressed.resize(bound);

    std::vector<std::uint8_t> out;
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    out.insert(out.end(), sig, sig + 8);
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, std::uint32_t(w));
    put_be32(ihdr, std::uint32_t(h));
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);              // gray / truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);                                  // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", {});
    return out;
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

std::vector<std::uint8_t> encode_png_rgb(const ImageU8& img) {
    return encode_png(img.px.data(), img.h, img.w, 3);
}

std::vector<std::uint8_t> encode_png_gray(const std::vector<std::uint8_t>& px, int h, int w) {
    if (px.size() != std::size_t(h) * w) throw DimensionError("encode_png_gray: size mismatch");
    return encode_png(px.data(), h, w, 1);
}

void write_png_rgb(const std::string& path, const ImageU8& img) {
    write_file_atomic(path, encode_png_rgb(img));
}

void write_png_gray(const std::string& path, const std::vector<std::uint8_t>& px, int h, int w) {
    write_file_atomic(path, encode_png_gray(px, h, w));
}

void write_png_mask(const std::string& path, const BinaryMask& m) {
    std::vector<std::uint8_t> px(m.px.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.px[i] ? 255 : 0;
    write_png_gray(path, px, m.h, m.w);
}

DecodedPng decode_png(const std::vector<std::uint8_t>& bytes) {
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw IoError("png decode: bad signature");
    DecodedPng img;
    int bit_depth = 0, color_type = -1;
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = get_be32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("png decode: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* data = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.w = int(get_be32(data));
            img.h = int(get_be32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw IoError("png decode: interlaced images unsupported");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (bit_depth != 8 || (color_type != 0 && color_type != 2))
        throw IoError("png decode: only 8-bit gray/rgb supported");
    img.channels = color_type == 0 ? 1 : 3;
    const std::size_t stride = std::size_t(img.w) * img.channels;
    std::vector<std::uint8_t> raw(std::size_t(img.h) * (stride + 1));
    uLongf raw_len = uLongf(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw IoError("png decode: zlib inflate failed");
    img.px.resize(std::size_t(img.h) * stride);
    const int bpp = img.channels;
    for (int y = 0; y < img.h; ++y) {
        const std::uint8_t filter = raw[std::size_t(y) * (stride + 1)];
        const std::uint8_t* src = raw.data() + std::size_t(y) * (stride + 1) + 1;
        std::uint8_t* dst = img.px.data() + std::size_t(y) * stride;
        const std::uint8_t* up = y > 0 ? img.px.data() + std::size_t(y - 1) * stride : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int left = i >= std::size_t(bpp) ? dst[i - bpp] : 0;
            const int above = up ? up[i] : 0;
            const int ul = (up && i >= std::size_t(bpp)) ? up[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += above; break;
                case 3: v += (left + above) / 2; break;
                case 4: v += paeth(left, above, ul); break;
                default: throw IoError("png decode: unknown filter");
            }
            dst[i] = std::uint8_t(v & 0xff);
        }
    }
    return img;
}

DecodedPng read_png(const std::string& path) {
    const std::string bytes = read_file(path);
    return decode_png(std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

ImageU8 read_png_rgb(const std::string& path) {
    DecodedPng d = read_png(path);
    ImageU8 img(d.h, d.w);
    if (d.channels == 3) {
        img.px = std::move(d.px);
    } else {
        for (std::size_t i = 0; i < d.px.size(); ++i)
            img.px[3 * i] = img.px[3 * i + 1] = img.px[3 * i + 2] = d.px[i];
    }
    return img;
}

BinaryMask read_png_mask(const std::string& path) {
    DecodedPng d = read_png(path);
    BinaryMask m(d.h, d.w);
    const int step = d.channels;
    for (std::size_t i = 0; i < m.px.size(); ++i) m.px[i] = d.px[i * step] ? 1 : 0;
    return m;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        os.write(bytes.data(), std::streamsize(bytes.size()));
        if (!os) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("rename failed: " + target.string() + ": " + ec.message());
}

void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::string out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return out;
}

}  // namespace bilayer
