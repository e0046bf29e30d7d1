#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mmkb/encoder_backend.hpp"

namespace mmkb {

struct ToyEncoderConfig {
    std::uint64_t seed = 0;
    int grid_rows = 2;
    int grid_cols = 2;
    int layers = 2;
    int heads = 2;
    int model_dim = 8;
    int key_dim = 4;
    int embed_dim = 8;
    bool reduce_before_return = false;
};

/// Small fixed-seed attention encoder for desk-scale runs.
///
/// The image is mean-pooled into grid_rows x grid_cols patches; each patch's
/// mean RGB is projected into model_dim and offset by a positional vector, and a
/// class token is prepended. `layers` residual self-attention layers with
/// `heads` heads follow:
///
///     X_{l+1} = X_l + (1/H) sum_h softmax(X_l Wq_h^T (X_l Wk_h^T)^T / sqrt(dk)) X_l Wv_h^T
///
/// The image embedding is Wp x_cls and the text embedding a hashed bag of
/// words; the score is their cosine. Attention gradients are exact (reverse mode).
/// All methods are const-pure and safe to call concurrently.
class ToyEncoder : public EncoderBackend {
public:
    explicit ToyEncoder(ToyEncoderConfig config = {});

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    GroundingResult ground(const RasterImage& image, const std::string& prompt) override;
    double score(const RasterImage& image, const std::string& text) override;
    Eigen::VectorXd embed(const RasterImage& image) override;

    const ToyEncoderConfig& config() const { return config_; }

    /// Input token matrix X_0 (T x model_dim).
    Eigen::MatrixXd input_tokens(const RasterImage& image) const;
    /// Unit-norm hashed bag-of-words embedding.
    Eigen::VectorXd text_embedding(std::string_view text) const;

    /// Score with the attention of (layer, head) replaced by `attention`; all other
    /// attention maps are recomputed from the forward pass. Finite-difference hook.
    double score_with_attention(const RasterImage& image, std::string_view prompt, int layer, int head,
                                const Eigen::MatrixXd& attention) const;

private:
    struct Forward;
    Forward forward(const Eigen::MatrixXd& x0, int override_layer = -1, int override_head = -1,
                    const Eigen::MatrixXd* override_attention = nullptr) const;
    std::size_t idx(int l, int h) const { return static_cast<std::size_t>(l) * config_.heads + h; }

    ToyEncoderConfig config_;
    BackendDescriptor descriptor_;
    Eigen::MatrixXd input_proj_;   // model_dim x 3
    Eigen::MatrixXd positions_;    // T x model_dim
    std::vector<Eigen::MatrixXd> wq_, wk_, wv_;
    Eigen::MatrixXd output_proj_;  // embed_dim x model_dim
};

} // namespace mmkb
