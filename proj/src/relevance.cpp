#include "mmkb/relevance.hpp"

namespace mmkb {

WeightedImage blend(const RasterImage& image, const WeightMap& map, double gain, std::string concept_surface) {
    image.validate();
    if (map.width() != image.width || map.height() != image.height)
        throw ShapeMismatch("weight map " + std::to_string(map.width()) + "x" + std::to_string(map.height()) +
                            " does not match image " + std::to_string(image.width) + "x" +
                            std::to_string(image.height));
    if (!(gain >= 0.0) || !std::isfinite(gain)) throw DataError("blend gain must be finite and >= 0");

    WeightedImage out{image, image, map, std::move(concept_surface), gain};
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const long boost = std::lround(gain * static_cast<double>(map(x, y)) * RasterImage::max_val);
            for (int c = 0; c < image.channels; ++c) {
                const long v = static_cast<long>(image.at(x, y, c)) + boost;
                out.blended.at(x, y, c) = static_cast<std::uint8_t>(std::clamp<long>(v, 0, RasterImage::max_val));
            }
        }
    }
    return out;
}

} // namespace mmkb
