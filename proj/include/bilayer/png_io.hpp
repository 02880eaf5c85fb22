#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bilayer/grid.hpp"

namespace bilayer {

// Minimal PNG codec (8-bit gray / 8-bit RGB, non-interlaced) on top of zlib.
// Encoding is deterministic: fixed filter (none) and compression level.

std::vector<std::uint8_t> encode_png_rgb(const ImageU8& img);
std::vector<std::uint8_t> encode_png_gray(const std::vector<std::uint8_t>& px, int h, int w);

void write_png_rgb(const std::string& path, const ImageU8& img);
void write_png_gray(const std::string& path, const std::vector<std::uint8_t>& px, int h, int w);
/// Mask written as 0/255 gray.
void write_png_mask(const std::string& path, const BinaryMask& m);

struct DecodedPng {
    int h = 0, w = 0, channels = 0;    // 1 (gray) or 3 (rgb)
    std::vector<std::uint8_t> px;      // interleaved
};

DecodedPng decode_png(const std::vector<std::uint8_t>& bytes);
DecodedPng read_png(const std::string& path);
ImageU8 read_png_rgb(const std::string& path);
BinaryMask read_png_mask(const std::string& path);  // nonzero -> 1

// Atomic whole-file helpers (temp file + rename).
void write_file_atomic(const std::string& path, const std::string& bytes);
void write_file_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::string read_file(const std::string& path);

}  // namespace bilayer
