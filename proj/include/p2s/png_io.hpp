#pragma once

// PNG encode/decode through libpng's simplified API.

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "p2s/preprocess.hpp"

namespace p2s {

class PngError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace detail {
struct PngImage {
    png_image img{};
    PngImage() {
        img.version = PNG_IMAGE_VERSION;
    }
    ~PngImage() { png_image_free(&img); }
    PngImage(const PngImage&) = delete;
    PngImage& operator=(const PngImage&) = delete;
};
}  // namespace detail

/// Decodes a PNG keeping its colour layout (gray, gray+alpha, RGB or RGBA),
/// 8 bits per sample. Images above max_pixels are refused before allocation.
inline Image8 decode_png(const std::vector<std::uint8_t>& bytes, std::size_t max_pixels = std::size_t{1} << 28) {
    detail::PngImage p;
    if (!png_image_begin_read_from_memory(&p.img, bytes.data(), bytes.size()))
        throw PngError(std::string("png decode: ") + p.img.message);
    if (static_cast<std::size_t>(p.img.width) * p.img.height > max_pixels)
        throw PngError("png decode: image of " + std::to_string(p.img.width) + "x" + std::to_string(p.img.height) +
                       " pixels exceeds the size limit");
    const bool color = p.img.format & PNG_FORMAT_FLAG_COLOR;
    const bool alpha = p.img.format & PNG_FORMAT_FLAG_ALPHA;
    p.img.format = color ? (alpha ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB) : (alpha ? PNG_FORMAT_GA : PNG_FORMAT_GRAY);
    Image8 out;
    out.width = p.img.width;
    out.height = p.img.height;
    out.channels = PNG_IMAGE_SAMPLE_CHANNELS(p.img.format);
    out.data.resize(PNG_IMAGE_SIZE(p.img));
    if (!png_image_finish_read(&p.img, nullptr, out.data.data(), 0, nullptr))
        throw PngError(std::string("png decode: ") + p.img.message);
    return out;
}

inline Gray8 decode_png_gray(const std::vector<std::uint8_t>& bytes) { return to_gray(decode_png(bytes)); }

inline std::vector<std::uint8_t> encode_png(const Gray8& r) {
    detail::PngImage p;
    p.img.width = static_cast<png_uint_32>(r.width);
    p.img.height = static_cast<png_uint_32>(r.height);
    p.img.format = PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(p.img, size, 0, r.pixels.data(), 0, nullptr))
        throw PngError(std::string("png encode: ") + p.img.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&p.img, out.data(), &size, 0, r.pixels.data(), 0, nullptr))
        throw PngError(std::string("png encode: ") + p.img.message);
    out.resize(size);
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Gray8 read_png_gray(const std::filesystem::path& path) { return decode_png_gray(read_file(path)); }
inline void write_png(const std::filesystem::path& path, const Gray8& r) { write_file(path, encode_png(r)); }

}  // namespace p2s
