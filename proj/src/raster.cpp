#include "mmkb/raster.hpp"

#include <png.h>

#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mmkb/codec.hpp"
#include "mmkb/error.hpp"

namespace mmkb {

RasterImage::RasterImage(int w, int h, int c, std::uint8_t fill)
    : width(w), height(h), channels(c),
      pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(c), fill) {
    validate();
}

void RasterImage::validate() const {
    if (width < 1 || height < 1) throw DataError("raster dimensions must be >= 1");
    if (channels != 1 && channels != 3) throw DataError("raster must have 1 or 3 channels");
    if (pixels.size() != static_cast<std::size_t>(width) * height * channels)
        throw DataError("raster buffer length does not match width*height*channels");
}

namespace {

struct PngReadCursor {
    std::span<const std::uint8_t> bytes;
    std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep out, png_size_t length) {
    auto* cursor = static_cast<PngReadCursor*>(png_get_io_ptr(png));
    if (cursor->offset + length > cursor->bytes.size()) png_error(png, "truncated PNG stream");
    std::memcpy(out, cursor->bytes.data() + cursor->offset, length);
    cursor->offset += length;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

void png_error_throw(png_structp, png_const_charp msg) { throw DataError(std::string("PNG: ") + msg); }

void png_warning_ignore(png_structp, png_const_charp) {}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

std::vector<std::uint8_t> encode_png(const RasterImage& image) {
    image.validate();
    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    try {
        png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
        png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                     image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        const std::size_t stride = static_cast<std::size_t>(image.width) * image.channels;
        for (int y = 0; y < image.height; ++y) {
            png_write_row(png, const_cast<png_bytep>(image.pixels.data() + y * stride));
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

RasterImage decode_png(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw DataError("not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
    if (!png) throw std::runtime_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    PngReadCursor cursor{bytes, 0};
    RasterImage image;
    try {
        png_set_read_fn(png, &cursor, png_read_from_span);
        png_read_info(png, info);
        png_set_strip_16(png);
        png_set_strip_alpha(png);
        png_set_packing(png);
        const auto color = png_get_color_type(png, info);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
        png_read_update_info(png, info);
        const int channels = png_get_channels(png, info);
        image.width = static_cast<int>(png_get_image_width(png, info));
        image.height = static_cast<int>(png_get_image_height(png, info));
        image.channels = channels;
        image.pixels.resize(static_cast<std::size_t>(image.width) * image.height * channels);
        const std::size_t stride = static_cast<std::size_t>(image.width) * channels;
        for (int y = 0; y < image.height; ++y) png_read_row(png, image.pixels.data() + y * stride, nullptr);
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    image.validate();
    return image;
}

RasterImage decode_pnm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto next_token = [&]() {
        std::string token;
        while (pos < bytes.size()) {
            const char c = static_cast<char>(bytes[pos]);
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                if (!token.empty()) break;
                ++pos;
            } else {
                token.push_back(c);
                ++pos;
            }
        }
        return token;
    };
    const std::string magic = next_token();
    if (magic != "P5" && magic != "P6") throw DataError("unsupported PNM magic '" + magic + "'");
    RasterImage image;
    try {
        image.width = std::stoi(next_token());
        image.height = std::stoi(next_token());
        if (std::stoi(next_token()) != 255) throw DataError("PNM maxval must be 255");
    } catch (const std::logic_error&) {
        throw DataError("malformed PNM header");
    }
    ++pos; // single whitespace after maxval
    image.channels = magic == "P6" ? 3 : 1;
    const std::size_t n = static_cast<std::size_t>(image.width) * image.height * image.channels;
    if (pos + n > bytes.size()) throw DataError("truncated PNM payload");
    image.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                        bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    image.validate();
    return image;
}

RasterImage load_image(std::string_view ref, const std::filesystem::path& base_dir) {
    constexpr std::string_view data_prefix = "data:image/png;base64,";
    constexpr std::string_view short_prefix = "base64:";
    if (ref.starts_with(data_prefix)) return decode_png(base64_decode(ref.substr(data_prefix.size())));
    if (ref.starts_with(short_prefix)) return decode_png(base64_decode(ref.substr(short_prefix.size())));

    std::filesystem::path path{std::string(ref)};
    if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
    const auto bytes = read_file(path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) return decode_pnm(bytes);
    return decode_png(bytes);
}

std::string inline_image_ref(const RasterImage& image) {
    return "data:image/png;base64," + base64_encode(encode_png(image));
}

} // namespace mmkb
