#pragma once

#include <string>
#include <string_view>
#include <variant>

#include <Eigen/Dense>

#include "mmkb/raster.hpp"
#include "mmkb/relevance.hpp"

namespace mmkb {

struct BackendDescriptor {
    std::string name;
    int layers = 0;
    int heads = 0;
    int tokens = 0;
    int grid_rows = 0;
    int grid_cols = 0;
    bool returns_reduced = false;
    int max_in_flight = 0; // 0 = no limit

    /// Throws ShapeViolation unless grid_rows * grid_cols == tokens - 1 and all sizes are positive.
    void validate() const;
};

struct GroundingResult {
    double score = 0.0;
    std::variant<AttentionStack<double>, ReducedAttention<double>> attention;

    bool reduced() const { return std::holds_alternative<ReducedAttention<double>>(attention); }
    /// Head-reduced attention, computing the reduction if the backend sent full stacks.
    ReducedAttention<double> reduce() const;
};

/// Dual-encoder grounding contract. Implementations that are not safe for
/// concurrent calls must set descriptor().max_in_flight = 1.
class EncoderBackend {
public:
    virtual ~EncoderBackend() = default;

    virtual const BackendDescriptor& descriptor() const = 0;
    /// Matching score of (image, prompt) plus attention and score gradients.
    virtual GroundingResult ground(const RasterImage& image, const std::string& prompt) = 0;
    /// Similarity of (image, text); higher is a better match.
    virtual double score(const RasterImage& image, const std::string& text) = 0;
    /// Unit-norm image embedding.
    virtual Eigen::VectorXd embed(const RasterImage& image) = 0;
};

/// "an image of {concept}."
std::string grounding_prompt(std::string_view concept_surface);

/// ground() followed by validation of the returned tensors against the descriptor
/// and the attention-stack invariants. Violations raise ShapeViolation.
GroundingResult checked_ground(EncoderBackend& backend, const RasterImage& image, const std::string& prompt);

double score_pair(EncoderBackend& backend, const RasterImage& image, const std::string& text);
/// Weighted images are scored on their blended pixels.
double score_pair(EncoderBackend& backend, const WeightedImage& image, const std::string& text);

} // namespace mmkb
