#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "bilayer/errors.hpp"

namespace bilayer {

/// Binary mask on a row-major pixel grid.
struct BinaryMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> px;  // 0 or 1

    BinaryMask() = default;
    BinaryMask(int h_, int w_) : h(h_), w(w_), px(std::size_t(h_) * w_, 0) {}

    std::uint8_t at(int y, int x) const { return px[std::size_t(y) * w + x]; }
    std::uint8_t& at(int y, int x) { return px[std::size_t(y) * w + x]; }
    bool empty_mask() const;
    std::size_t area() const;
    bool operator==(const BinaryMask& o) const = default;
};

/// Interleaved 8-bit RGB image.
struct ImageU8 {
    int h = 0, w = 0;
    std::vector<std::uint8_t> px;  // h*w*3

    ImageU8() = default;
    ImageU8(int h_, int w_) : h(h_), w(w_), px(std::size_t(h_) * w_ * 3, 0) {}

    std::uint8_t* at(int y, int x) { return px.data() + (std::size_t(y) * w + x) * 3; }
    const std::uint8_t* at(int y, int x) const { return px.data() + (std::size_t(y) * w + x) * 3; }
    bool operator==(const ImageU8& o) const = default;
};

/// Axis-aligned box, pixel units, (x,y) top-left corner.
struct Box {
    double x = 0, y = 0, w = 0, h = 0;
    double area() const { return w > 0 && h > 0 ? w * h : 0.0; }
    bool operator==(const Box& o) const = default;
};

// Mask set algebra.
BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_diff(const BinaryMask& a, const BinaryMask& b);  // a AND NOT b
std::size_t mask_intersection_area(const BinaryMask& a, const BinaryMask& b);

// 3x3 cross-structuring-element morphology; pixels outside the grid count as 0.
BinaryMask erode_cross(const BinaryMask& m);
BinaryMask dilate_cross(const BinaryMask& m);

/// Thin boundary band of a mask: dilate(mask AND NOT erode(mask)) with the
/// 3x3 cross, roughly two pixels wide. Empty masks stay empty.
BinaryMask boundary_gt(const BinaryMask& m);

/// Tight bounding box of the set pixels; zero box for an empty mask.
Box tight_box(const BinaryMask& m);

/// Crop to an integer sub-window, clamped to the grid.
BinaryMask crop_mask(const BinaryMask& m, int x0, int y0, int out_w, int out_h);

/// Area-coverage downscale/upscale to (out_h,out_w); a target cell becomes 1
/// when covered area fraction >= 0.5.
BinaryMask resize_mask_area(const BinaryMask& m, int out_h, int out_w);

/// Multi-channel double-precision grid used for roi cropping and probability
/// maps. Values row-major per channel plane.
struct FloatGrid {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    FloatGrid() = default;
    FloatGrid(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(std::size_t(c_) * h_ * w_, 0.0) {}
    double at(int ch, int y, int x) const { return v[(std::size_t(ch) * h + y) * w + x]; }
    double& at(int ch, int y, int x) { return v[(std::size_t(ch) * h + y) * w + x]; }
};

FloatGrid image_to_grid(const ImageU8& img);  // [0,1] scaled RGB planes

/// Bilinear sample with clamped borders.
double bilinear_sample(const FloatGrid& g, int ch, double y, double x);

/// Bilinear crop-and-resize of `box` to out x out pixels per channel.
/// Throws DomainError for empty boxes.
FloatGrid roi_crop(const FloatGrid& g, const Box& box, int out_h, int out_w);

/// Bilinear resize of a single-channel grid (for pasting probability maps).
FloatGrid resize_bilinear(const FloatGrid& g, int out_h, int out_w);

double mask_iou(const BinaryMask& a, const BinaryMask& b);

}  // namespace bilayer
