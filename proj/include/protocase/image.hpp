#pragma once

// Plain (non-differentiable) grayscale image utilities used by the dataset
// generator, augmentation, and explanation rendering.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace protocase {

struct Image {
    int h = 0;
    int w = 0;
    std::vector<double> pix;  // row-major, [0,1] for images, {0,1} for masks

    Image() = default;
    Image(int h_, int w_, double fill = 0.0) : h(h_), w(w_), pix(static_cast<std::size_t>(h_) * w_, fill) {}

    double& at(int y, int x) { return pix[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return pix[static_cast<std::size_t>(y) * w + x]; }
    std::size_t size() const { return pix.size(); }

    bool operator==(const Image& o) const { return h == o.h && w == o.w && pix == o.pix; }
};

// Bilinear read with constant fill outside the bounds.
inline double sample_bilinear(const Image& im, double y, double x, double fill) {
    if (y <= -1.0 || x <= -1.0 || y >= im.h || x >= im.w) return fill;
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    auto read = [&](int yy, int xx) {
        if (yy < 0 || xx < 0 || yy >= im.h || xx >= im.w) return fill;
        return im.at(yy, xx);
    };
    return (1.0 - fy) * ((1.0 - fx) * read(y0, x0) + fx * read(y0, x0 + 1)) +
           fy * ((1.0 - fx) * read(y0 + 1, x0) + fx * read(y0 + 1, x0 + 1));
}

inline Image flip_horizontal(const Image& im) {
    Image out(im.h, im.w);
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) out.at(y, x) = im.at(y, im.w - 1 - x);
    return out;
}

inline Image flip_vertical(const Image& im) {
    Image out(im.h, im.w);
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) out.at(y, x) = im.at(im.h - 1 - y, x);
    return out;
}

// Rotation about the image center, bilinear resampling, constant fill.
inline Image rotate(const Image& im, double degrees, double fill) {
    if (degrees == 0.0) return im;
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double cy = (im.h - 1) / 2.0, cx = (im.w - 1) / 2.0;
    Image out(im.h, im.w);
    for (int y = 0; y < im.h; ++y) {
        for (int x = 0; x < im.w; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double sy = cy + c * dy - s * dx;
            const double sx = cx + s * dy + c * dx;
            out.at(y, x) = sample_bilinear(im, sy, sx, fill);
        }
    }
    return out;
}

// Bilinear resize with corner-aligned sampling (matches the differentiable
// upsampler's convention).
inline Image resize_bilinear(const Image& im, int out_h, int out_w) {
    if (out_h == im.h && out_w == im.w) return im;
    Image out(out_h, out_w);
    const double sy = out_h > 1 ? static_cast<double>(im.h - 1) / (out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(im.w - 1) / (out_w - 1) : 0.0;
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
            out.at(y, x) = sample_bilinear(im, y * sy, x * sx, 0.0);
    return out;
}

inline Image crop(const Image& im, int y0, int x0, int ch, int cw) {
    if (y0 < 0 || x0 < 0 || y0 + ch > im.h || x0 + cw > im.w)
        throw std::invalid_argument("crop window outside image");
    Image out(ch, cw);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) out.at(y, x) = im.at(y0 + y, x0 + x);
    return out;
}

inline Image threshold_binary(const Image& im, double thr) {
    Image out(im.h, im.w);
    for (std::size_t i = 0; i < im.size(); ++i) out.pix[i] = im.pix[i] >= thr ? 1.0 : 0.0;
    return out;
}

inline Image box_blur(const Image& im, int radius) {
    if (radius <= 0) return im;
    Image tmp(im.h, im.w), out(im.h, im.w);
    const int n = 2 * radius + 1;
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) {
            double s = 0.0;
            for (int d = -radius; d <= radius; ++d)
                s += im.at(y, std::clamp(x + d, 0, im.w - 1));
            tmp.at(y, x) = s / n;
        }
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) {
            double s = 0.0;
            for (int d = -radius; d <= radius; ++d)
                s += tmp.at(std::clamp(y + d, 0, im.h - 1), x);
            out.at(y, x) = s / n;
        }
    return out;
}

// Binary morphology on {0,1} images, square structuring element.
inline Image dilate(const Image& mask, int radius) {
    if (radius <= 0) return mask;
    Image out(mask.h, mask.w, 0.0);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            bool hit = false;
            for (int dy = -radius; dy <= radius && !hit; ++dy)
                for (int dx = -radius; dx <= radius && !hit; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && xx >= 0 && yy < mask.h && xx < mask.w && mask.at(yy, xx) > 0.5)
                        hit = true;
                }
            out.at(y, x) = hit ? 1.0 : 0.0;
        }
    return out;
}

inline Image erode(const Image& mask, int radius) {
    if (radius <= 0) return mask;
    Image out(mask.h, mask.w, 0.0);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            bool all = true;
            for (int dy = -radius; dy <= radius && all; ++dy)
                for (int dx = -radius; dx <= radius && all; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || xx < 0 || yy >= mask.h || xx >= mask.w || mask.at(yy, xx) < 0.5)
                        all = false;
                }
            out.at(y, x) = all ? 1.0 : 0.0;
        }
    return out;
}

// Central-difference gradient magnitude.
inline Image gradient_magnitude(const Image& im) {
    Image out(im.h, im.w, 0.0);
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) {
            const double gy = (im.at(std::min(y + 1, im.h - 1), x) - im.at(std::max(y - 1, 0), x)) / 2.0;
            const double gx = (im.at(y, std::min(x + 1, im.w - 1)) - im.at(y, std::max(x - 1, 0))) / 2.0;
            out.at(y, x) = std::sqrt(gy * gy + gx * gx);
        }
    return out;
}

inline void quantize_to_8bit(Image& im) {
    for (auto& v : im.pix) {
        const double clamped = std::clamp(v, 0.0, 1.0);
        v = std::round(clamped * 255.0) / 255.0;
    }
}

inline std::vector<std::uint8_t> to_bytes(const Image& im) {
    std::vector<std::uint8_t> out(im.size());
    for (std::size_t i = 0; i < im.size(); ++i) {
        const double v = std::clamp(im.pix[i], 0.0, 1.0);
        out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

inline Image from_bytes(int h, int w, const std::vector<std::uint8_t>& bytes) {
    Image im(h, w);
    for (std::size_t i = 0; i < im.size(); ++i) im.pix[i] = bytes[i] / 255.0;
    return im;
}

}  // namespace protocase
