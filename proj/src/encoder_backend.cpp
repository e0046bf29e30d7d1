#include "mmkb/encoder_backend.hpp"

namespace mmkb {

void BackendDescriptor::validate() const {
    if (layers < 1 || heads < 1 || tokens < 2) throw ShapeViolation("descriptor '" + name + "' needs L>=1, H>=1, T>=2");
    if (grid_rows < 1 || grid_cols < 1 || grid_rows * grid_cols != tokens - 1)
        throw ShapeViolation("descriptor '" + name + "' patch grid does not cover T-1 tokens");
    if (max_in_flight < 0) throw ShapeViolation("descriptor '" + name + "' has negative max_in_flight");
}

ReducedAttention<double> GroundingResult::reduce() const {
    if (const auto* r = std::get_if<ReducedAttention<double>>(&attention)) return *r;
    return reduce_heads(std::get<AttentionStack<double>>(attention));
}

std::string grounding_prompt(std::string_view concept_surface) {
    return "an image of " + std::string(concept_surface) + ".";
}

GroundingResult checked_ground(EncoderBackend& backend, const RasterImage& image, const std::string& prompt) {
    if (prompt.empty()) throw DataError("grounding prompt must be non-empty");
    const auto& desc = backend.descriptor();
    GroundingResult result = backend.ground(image, prompt);
    if (!std::isfinite(result.score)) throw ShapeViolation(desc.name + ": non-finite score");
    try {
        if (const auto* stack = std::get_if<AttentionStack<double>>(&result.attention)) {
            if (stack->layers != desc.layers || stack->heads != desc.heads || stack->tokens != desc.tokens)
                throw ShapeViolation(desc.name + ": attention stack shape contradicts descriptor");
            stack->validate();
        } else {
            const auto& reduced = std::get<ReducedAttention<double>>(result.attention);
            if (reduced.layers != desc.layers || reduced.tokens != desc.tokens)
                throw ShapeViolation(desc.name + ": reduced attention shape contradicts descriptor");
            reduced.validate();
        }
    } catch (const DataError& e) {
        throw ShapeViolation(desc.name + ": " + e.what());
    }
    return result;
}

double score_pair(EncoderBackend& backend, const RasterImage& image, const std::string& text) {
    if (text.empty()) throw DataError("score_pair text must be non-empty");
    return backend.score(image, text);
}

double score_pair(EncoderBackend& backend, const WeightedImage& image, const std::string& text) {
    return score_pair(backend, image.blended, text);
}

} // namespace mmkb
