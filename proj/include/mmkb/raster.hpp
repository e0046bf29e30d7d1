#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmkb {

/// 8-bit raster, interleaved channels, row-major. channels is 1 (gray) or 3 (RGB).
struct RasterImage {
    static constexpr int max_val = 255;

    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    RasterImage() = default;
    RasterImage(int width, int height, int channels, std::uint8_t fill = 0);

    std::uint8_t& at(int x, int y, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int x, int y, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    /// Throws DataError when the buffer or dimensions are inconsistent.
    void validate() const;

    friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

std::vector<std::uint8_t> encode_png(const RasterImage& image);
RasterImage decode_png(std::span<const std::uint8_t> bytes);

/// Binary PGM (P5) / PPM (P6) with maxval 255.
RasterImage decode_pnm(std::span<const std::uint8_t> bytes);

/// Resolves an image reference. Accepted forms:
///   "data:image/png;base64,<payload>" or "base64:<payload>"  inline PNG
///   anything else                                            a path (.png, .pgm, .ppm);
///                                                            relative paths resolve against base_dir
/// Throws DataError when the image cannot be read or decoded.
RasterImage load_image(std::string_view ref, const std::filesystem::path& base_dir = {});

/// Inline reference form accepted by load_image.
std::string inline_image_ref(const RasterImage& image);

} // namespace mmkb
