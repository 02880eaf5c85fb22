#include "bilayer/grid.hpp"

#include <algorithm>
#include <cmath>

namespace bilayer {

bool BinaryMask::empty_mask() const {
    for (std::uint8_t p : px)
        if (p) return false;
    return true;
}

std::size_t BinaryMask::area() const {
    std::size_t n = 0;
    for (std::uint8_t p : px) n += p;
    return n;
}

namespace {

void check_same_grid(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.h != b.h || a.w != b.w)
        throw DimensionError(std::string(op) + ": masks are " + std::to_string(a.h) + "x" +
                             std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                             std::to_string(b.w));
}

}  // namespace

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
    check_same_grid(a, b, "mask_and");
    BinaryMask out(a.h, a.w);
    for (std::size_t i = 0; i < a.px.size(); ++i) out.px[i] = a.px[i] & b.px[i];
    return out;
}

BinaryMask mask_or(const BinaryMask& a, const BinaryMask& b) {
    check_same_grid(a, b, "mask_or");
    BinaryMask out(a.h, a.w);
    for (std::size_t i = 0; i < a.px.size(); ++i) out.px[i] = a.px[i] | b.px[i];
    return out;
}

BinaryMask mask_diff(const BinaryMask& a, const BinaryMask& b) {
    check_same_grid(a, b, "mask_diff");
    BinaryMask out(a.h, a.w);
    for (std::size_t i = 0; i < a.px.size(); ++i) out.px[i] = a.px[i] & std::uint8_t(1 - b.px[i]);
    return out;
}

std::size_t mask_intersection_area(const BinaryMask& a, const BinaryMask& b) {
    check_same_grid(a, b, "mask_intersection_area");
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.px.size(); ++i) n += a.px[i] & b.px[i];
    return n;
}

BinaryMask erode_cross(const BinaryMask& m) {
    BinaryMask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            bool keep = m.at(y, x) && (y > 0 && m.at(y - 1, x)) && (y + 1 < m.h && m.at(y + 1, x)) &&
                        (x > 0 && m.at(y, x - 1)) && (x + 1 < m.w && m.at(y, x + 1));
            out.at(y, x) = keep ? 1 : 0;
        }
    return out;
}

BinaryMask dilate_cross(const BinaryMask& m) {
    BinaryMask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            bool hit = m.at(y, x) || (y > 0 && m.at(y - 1, x)) || (y + 1 < m.h && m.at(y + 1, x)) ||
                       (x > 0 && m.at(y, x - 1)) || (x + 1 < m.w && m.at(y, x + 1));
            out.at(y, x) = hit ? 1 : 0;
        }
    return out;
}

BinaryMask boundary_gt(const BinaryMask& m) {
    return dilate_cross(mask_diff(m, erode_cross(m)));
}

Box tight_box(const BinaryMask& m) {
    int x0 = m.w, y0 = m.h, x1 = -1, y1 = -1;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) return Box{};
    return Box{double(x0), double(y0), double(x1 - x0 + 1), double(y1 - y0 + 1)};
}

BinaryMask crop_mask(const BinaryMask& m, int x0, int y0, int out_w, int out_h) {
    BinaryMask out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const int sy = y0 + y;
        if (sy < 0 || sy >= m.h) continue;
        for (int x = 0; x < out_w; ++x) {
            const int sx = x0 + x;
            if (sx < 0 || sx >= m.w) continue;
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

BinaryMask resize_mask_area(const BinaryMask& m, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0) throw DimensionError("resize_mask_area: empty target");
    BinaryMask out(out_h, out_w);
    const double sy = double(m.h) / out_h;
    const double sx = double(m.w) / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
        const double y0 = oy * sy, y1 = (oy + 1) * sy;
        for (int ox = 0; ox < out_w; ++ox) {
            const double x0 = ox * sx, x1 = (ox + 1) * sx;
            double covered = 0;
            for (int y = int(std::floor(y0)); y < int(std::ceil(y1)); ++y) {
                if (y < 0 || y >= m.h) continue;
                const double fy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
                for (int x = int(std::floor(x0)); x < int(std::ceil(x1)); ++x) {
                    if (x < 0 || x >= m.w) continue;
                    if (!m.at(y, x)) continue;
                    const double fx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
                    covered += fy * fx;
                }
            }
            out.at(oy, ox) = covered >= 0.5 * sy * sx ? 1 : 0;
        }
    }
    return out;
}

FloatGrid image_to_grid(const ImageU8& img) {
    FloatGrid g(3, img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const std::uint8_t* p = img.at(y, x);
            for (int c = 0; c < 3; ++c) g.at(c, y, x) = p[c] / 255.0;
        }
    return g;
}

double bilinear_sample(const FloatGrid& g, int ch, double y, double x) {
    y = std::clamp(y, 0.0, double(g.h - 1));
    x = std::clamp(x, 0.0, double(g.w - 1));
    const int y0 = int(std::floor(y)), x0 = int(std::floor(x));
    const int y1 = std::min(y0 + 1, g.h - 1), x1 = std::min(x0 + 1, g.w - 1);
    const double fy = y - y0, fx = x - x0;
    return (1 - fy) * ((1 - fx) * g.at(ch, y0, x0) + fx * g.at(ch, y0, x1)) +
           fy * ((1 - fx) * g.at(ch, y1, x0) + fx * g.at(ch, y1, x1));
}

FloatGrid roi_crop(const FloatGrid& g, const Box& box, int out_h, int out_w) {
    if (box.w <= 0 || box.h <= 0) throw DomainError("roi_crop: empty box");
    FloatGrid out(g.c, out_h, out_w);
    for (int ch = 0; ch < g.c; ++ch)
        for (int oy = 0; oy < out_h; ++oy) {
            const double sy = box.y + (oy + 0.5) * box.h / out_h - 0.5;
            for (int ox = 0; ox < out_w; ++ox) {
                const double sx = box.x + (ox + 0.5) * box.w / out_w - 0.5;
                out.at(ch, oy, ox) = bilinear_sample(g, ch, sy, sx);
            }
        }
    return out;
}

FloatGrid resize_bilinear(const FloatGrid& g, int out_h, int out_w) {
    return roi_crop(g, Box{0, 0, double(g.w), double(g.h)}, out_h, out_w);
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    check_same_grid(a, b, "mask_iou");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        inter += a.px[i] & b.px[i];
        uni += a.px[i] | b.px[i];
    }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

}  // namespace bilayer
