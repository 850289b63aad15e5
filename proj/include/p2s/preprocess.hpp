#pragma once

// Raster containers and the image preprocessing chain:
// crop to the region of interest, resize + grayscale, histogram
// equalization, and the float encoding fed to the network.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace p2s {

template <typename P>
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<P> pixels;  // row-major

    Raster() = default;
    Raster(std::size_t w, std::size_t h, P fill = P{}) : width(w), height(h), pixels(w * h, fill) {}

    P& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    const P& at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
    std::size_t size() const { return pixels.size(); }
    bool same_dims(const auto& other) const { return width == other.width && height == other.height; }
    bool operator==(const Raster&) const = default;
};

using Gray8 = Raster<std::uint8_t>;
using GrayF = Raster<float>;

/// Interleaved 8-bit image with 1, 2, 3 or 4 channels (gray, gray+alpha, RGB, RGBA).
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> data;
};

/// Rec. 601 luminance; alpha is ignored.
inline Gray8 to_gray(const Image8& img) {
    if (img.width == 0 || img.height == 0) throw std::invalid_argument("to_gray: zero-sized image");
    Gray8 out(img.width, img.height);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint8_t* p = img.data.data() + i * img.channels;
        if (img.channels <= 2) {
            out.pixels[i] = p[0];
        } else {
            double y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(y), 0L, 255L));
        }
    }
    return out;
}

/// 255 wherever any channel (alpha included) is non-zero; for doodles.
inline Gray8 nonzero_mask(const Image8& img) {
    Gray8 out(img.width, img.height);
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t c = 0; c < img.channels; ++c)
            if (img.data[i * img.channels + c]) out.pixels[i] = 255;
    return out;
}

struct Box {
    std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;  // inclusive
    std::size_t rows() const { return row1 - row0 + 1; }
    std::size_t cols() const { return col1 - col0 + 1; }
    bool operator==(const Box&) const = default;
};

/// Tight bounding box of the non-zero pixels; throws on an empty mask.
inline Box mask_bbox(const Gray8& mask) {
    Box b{mask.height, mask.width, 0, 0};
    bool any = false;
    for (std::size_t y = 0; y < mask.height; ++y)
        for (std::size_t x = 0; x < mask.width; ++x)
            if (mask.at(x, y)) {
                any = true;
                b.row0 = std::min(b.row0, y);
                b.row1 = std::max(b.row1, y);
                b.col0 = std::min(b.col0, x);
                b.col1 = std::max(b.col1, x);
            }
    if (!any) throw std::invalid_argument("crop_to_mask: mask has no non-zero pixel");
    return b;
}

namespace detail {
// Grows [lo, hi] to `len` pixels inside [0, limit), centred where possible.
inline void grow_interval(std::size_t& lo, std::size_t& hi, std::size_t len, std::size_t limit) {
    len = std::min(len, limit);
    const std::size_t cur = hi - lo + 1;
    if (cur >= len) return;
    const std::size_t extra = len - cur;
    long a = static_cast<long>(lo) - static_cast<long>(extra / 2);
    long b = static_cast<long>(hi) + static_cast<long>(extra - extra / 2);
    if (a < 0) {
        b -= a;
        a = 0;
    }
    if (b > static_cast<long>(limit) - 1) {
        a -= b - (static_cast<long>(limit) - 1);
        b = static_cast<long>(limit) - 1;
    }
    lo = static_cast<std::size_t>(std::max(a, 0L));
    hi = static_cast<std::size_t>(b);
}
}  // namespace detail

/// Crop window for a mask: the bounding box padded on every side, clamped
/// to the image, then widened along its shorter side towards a square.
/// Returns the full image when the raw bounding box already covers at least
/// skip_fraction of the image.
inline Box crop_box(const Gray8& mask, std::size_t padding = 100, double skip_fraction = 0.5) {
    Box b = mask_bbox(mask);
    const double area = static_cast<double>(b.rows()) * static_cast<double>(b.cols());
    if (area >= skip_fraction * static_cast<double>(mask.width * mask.height))
        return {0, 0, mask.height - 1, mask.width - 1};
    b.row0 = b.row0 > padding ? b.row0 - padding : 0;
    b.col0 = b.col0 > padding ? b.col0 - padding : 0;
    b.row1 = std::min(mask.height - 1, b.row1 + padding);
    b.col1 = std::min(mask.width - 1, b.col1 + padding);
    const std::size_t side = std::max(b.rows(), b.cols());
    detail::grow_interval(b.row0, b.row1, side, mask.height);
    detail::grow_interval(b.col0, b.col1, side, mask.width);
    return b;
}

template <typename P>
Raster<P> crop(const Raster<P>& r, const Box& b) {
    Raster<P> out(b.cols(), b.rows());
    for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x) out.at(x, y) = r.at(b.col0 + x, b.row0 + y);
    return out;
}

struct Triple {
    Gray8 image, doodle, mask;
};

/// Crops image, doodle and mask jointly to the mask's region of interest.
inline Triple crop_to_mask(const Triple& in, std::size_t padding = 100, double skip_fraction = 0.5) {
    if (!in.image.same_dims(in.mask) || !in.doodle.same_dims(in.mask))
        throw std::invalid_argument("crop_to_mask: image, doodle and mask dimensions differ");
    Box b = crop_box(in.mask, padding, skip_fraction);
    if (b.row0 == 0 && b.col0 == 0 && b.rows() == in.mask.height && b.cols() == in.mask.width) return in;
    return {crop(in.image, b), crop(in.doodle, b), crop(in.mask, b)};
}

enum class Interp { bilinear, nearest };

/// Resizes to w x h. Pixel centres are aligned (half-pixel convention), so
/// an equal-size resize is the identity. 8-bit outputs are rounded.
template <typename P>
Raster<P> resize_to(const Raster<P>& src, std::size_t w, std::size_t h, Interp interp) {
    if (src.width == 0 || src.height == 0 || w == 0 || h == 0) throw std::invalid_argument("resize: zero dimension");
    if (src.width == w && src.height == h) return src;
    Raster<P> out(w, h);
    const double sx = static_cast<double>(src.width) / static_cast<double>(w);
    const double sy = static_cast<double>(src.height) / static_cast<double>(h);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (interp == Interp::nearest) {
                auto nx = std::min(src.width - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * sx));
                auto ny = std::min(src.height - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * sy));
                out.at(x, y) = src.at(nx, ny);
                continue;
            }
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
            const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
            const std::size_t x1 = std::min(x0 + 1, src.width - 1), y1 = std::min(y0 + 1, src.height - 1);
            const double ax = fx - static_cast<double>(x0), ay = fy - static_cast<double>(y0);
            const double top = (1 - ax) * src.at(x0, y0) + ax * src.at(x1, y0);
            const double bot = (1 - ax) * src.at(x0, y1) + ax * src.at(x1, y1);
            const double v = (1 - ay) * top + ay * bot;
            if constexpr (std::is_integral_v<P>)
                out.at(x, y) = static_cast<P>(std::clamp(std::lround(v), 0L, 255L));
            else
                out.at(x, y) = static_cast<P>(v);
        }
    return out;
}

inline Gray8 resize(const Gray8& src, std::size_t side, Interp interp) { return resize_to(src, side, side, interp); }

inline Gray8 resize_and_gray(const Image8& img, std::size_t side, Interp interp) {
    return resize(to_gray(img), side, interp);
}

/// Global histogram equalization over 256 bins:
/// out = round(255 * (cdf(v) - cdf_min) / (N - cdf_min)).
/// Single-intensity images are returned unchanged.
inline Gray8 equalize_histogram(const Gray8& img) {
    std::array<std::size_t, 256> hist{};
    for (auto v : img.pixels) ++hist[v];
    std::array<std::size_t, 256> cdf{};
    std::size_t run = 0, cdf_min = 0;
    for (std::size_t v = 0; v < 256; ++v) {
        run += hist[v];
        cdf[v] = run;
        if (cdf_min == 0 && run > 0) cdf_min = run;
    }
    const std::size_t n = img.size();
    if (n == cdf_min) return img;
    std::array<std::uint8_t, 256> lut{};
    for (std::size_t v = 0; v < 256; ++v) {
        if (cdf[v] < cdf_min) continue;
        double r = 255.0 * static_cast<double>(cdf[v] - cdf_min) / static_cast<double>(n - cdf_min);
        lut[v] = static_cast<std::uint8_t>(std::lround(r));
    }
    Gray8 out = img;
    for (auto& v : out.pixels) v = lut[v];
    return out;
}

/// Value written into every non-zero doodle pixel for a class.
inline float doodle_class_value(int class_id, int num_classes) {
    if (num_classes <= 0 || class_id < 0 || class_id >= num_classes)
        throw std::out_of_range("class id " + std::to_string(class_id) + " outside [0, " +
                                std::to_string(num_classes) + ")");
    return static_cast<float>(class_id + 1) / static_cast<float>(num_classes);
}

struct EncodedSample {
    GrayF image, doodle, mask;
};

/// image/255, doodle non-zero -> (class_id+1)/num_classes, mask -> {0,1}.
inline EncodedSample encode_and_normalize(const Gray8& image, const Gray8& doodle, const Gray8* mask, int class_id,
                                          int num_classes) {
    const float code = doodle_class_value(class_id, num_classes);
    EncodedSample out;
    out.image = GrayF(image.width, image.height);
    for (std::size_t i = 0; i < image.size(); ++i) out.image.pixels[i] = static_cast<float>(image.pixels[i]) / 255.0f;
    out.doodle = GrayF(doodle.width, doodle.height);
    for (std::size_t i = 0; i < doodle.size(); ++i) out.doodle.pixels[i] = doodle.pixels[i] ? code : 0.0f;
    if (mask) {
        out.mask = GrayF(mask->width, mask->height);
        for (std::size_t i = 0; i < mask->size(); ++i) out.mask.pixels[i] = mask->pixels[i] ? 1.0f : 0.0f;
    }
    return out;
}

/// Training-time chain: joint crop, resize (bilinear image, nearest labels),
/// equalization, masks reduced to {0,1}.
inline Triple preprocess_triple(const Triple& raw, std::size_t side, std::size_t padding = 100,
                                double skip_fraction = 0.5) {
    Triple t = crop_to_mask(raw, padding, skip_fraction);
    Triple out{equalize_histogram(resize(t.image, side, Interp::bilinear)), resize(t.doodle, side, Interp::nearest),
               resize(t.mask, side, Interp::nearest)};
    for (auto& v : out.mask.pixels) v = v ? 1 : 0;
    return out;
}

/// Inference-time chain: no crop (there is no mask), same resize and equalization.
inline std::pair<Gray8, Gray8> preprocess_inputs(const Gray8& image, const Gray8& doodle, std::size_t side) {
    if (!image.same_dims(doodle)) throw std::invalid_argument("image and doodle dimensions differ");
    return {equalize_histogram(resize(image, side, Interp::bilinear)), resize(doodle, side, Interp::nearest)};
}

}  // namespace p2s
