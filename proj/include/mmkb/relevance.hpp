#pragma once

// Concept-activated relevance numerics: gradient-weighted head reduction,
// relevance propagation across layers, patch-grid extraction, bilinear
// upsampling, min-max normalisation and additive pixel blending.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmkb/error.hpp"
#include "mmkb/raster.hpp"

namespace mmkb {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Per-layer, per-head attention and the gradient of a matching score with
/// respect to it. Token 0 is the class token; tokens 1..T-1 are patches.
template <typename Scalar>
struct AttentionStack {
    int layers = 0;
    int heads = 0;
    int tokens = 0;
    std::vector<MatrixX<Scalar>> attn; // [layer * heads + head], T x T
    std::vector<MatrixX<Scalar>> grad;

    AttentionStack() = default;
    AttentionStack(int L, int H, int T)
        : layers(L), heads(H), tokens(T),
          attn(static_cast<std::size_t>(L) * H, MatrixX<Scalar>::Zero(T, T)),
          grad(static_cast<std::size_t>(L) * H, MatrixX<Scalar>::Zero(T, T)) {}

    MatrixX<Scalar>& attention(int l, int h) { return attn[static_cast<std::size_t>(l) * heads + h]; }
    const MatrixX<Scalar>& attention(int l, int h) const { return attn[static_cast<std::size_t>(l) * heads + h]; }
    MatrixX<Scalar>& gradient(int l, int h) { return grad[static_cast<std::size_t>(l) * heads + h]; }
    const MatrixX<Scalar>& gradient(int l, int h) const { return grad[static_cast<std::size_t>(l) * heads + h]; }

    /// Shape checks only; throws ShapeMismatch.
    void check_shapes() const {
        if (layers < 1 || heads < 1 || tokens < 2) throw ShapeMismatch("attention stack needs L>=1, H>=1, T>=2");
        const auto n = static_cast<std::size_t>(layers) * heads;
        if (attn.size() != n || grad.size() != n) throw ShapeMismatch("attention/gradient layer-head count mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            if (attn[i].rows() != tokens || attn[i].cols() != tokens || grad[i].rows() != tokens ||
                grad[i].cols() != tokens)
                throw ShapeMismatch("attention/gradient matrix is not T x T");
        }
    }

    /// Full invariant check: shapes, finiteness, non-negative softmax rows summing to 1.
    void validate(double row_tolerance = 1e-5) const {
        check_shapes();
        for (std::size_t i = 0; i < attn.size(); ++i) {
            if (!attn[i].allFinite() || !grad[i].allFinite()) throw DataError("attention stack has non-finite entries");
            if ((attn[i].array() < Scalar(0)).any()) throw DataError("attention has negative entries");
            const auto sums = attn[i].rowwise().sum();
            for (int r = 0; r < tokens; ++r) {
                if (std::abs(static_cast<double>(sums(r)) - 1.0) > row_tolerance)
                    throw DataError("attention row does not sum to 1");
            }
        }
    }
};

/// Head-averaged, clamped, gradient-weighted attention: one T x T matrix per layer.
template <typename Scalar>
struct ReducedAttention {
    int layers = 0;
    int tokens = 0;
    std::vector<MatrixX<Scalar>> abar;

    ReducedAttention() = default;
    ReducedAttention(int L, int T) : layers(L), tokens(T), abar(static_cast<std::size_t>(L), MatrixX<Scalar>::Zero(T, T)) {}

    void validate() const {
        if (layers < 1 || tokens < 2 || abar.size() != static_cast<std::size_t>(layers))
            throw ShapeMismatch("reduced attention needs L>=1 layers of T x T, T>=2");
        for (const auto& a : abar) {
            if (a.rows() != tokens || a.cols() != tokens) throw ShapeMismatch("reduced attention matrix is not T x T");
            if (!a.allFinite()) throw DataError("reduced attention has non-finite entries");
            if ((a.array() < Scalar(0)).any()) throw DataError("reduced attention has negative entries");
        }
    }
};

/// abar[l] = mean_h max(grad[l][h] ⊙ attn[l][h], 0).
template <typename Scalar>
ReducedAttention<Scalar> reduce_heads(const AttentionStack<Scalar>& stack) {
    stack.check_shapes();
    ReducedAttention<Scalar> out(stack.layers, stack.tokens);
    for (int l = 0; l < stack.layers; ++l) {
        auto& acc = out.abar[static_cast<std::size_t>(l)];
        for (int h = 0; h < stack.heads; ++h) {
            acc.array() += (stack.gradient(l, h).array() * stack.attention(l, h).array()).max(Scalar(0));
        }
        acc /= static_cast<Scalar>(stack.heads);
    }
    return out;
}

enum class PropagationMode {
    Hadamard, // R^l = R^{l-1} + abar_l ⊙ R^{l-1}
    MatMul,   // R^l = R^{l-1} + abar_l · R^{l-1}
};

inline const char* to_string(PropagationMode mode) { return mode == PropagationMode::Hadamard ? "hadamard" : "matmul"; }

inline PropagationMode parse_propagation_mode(const std::string& s) {
    if (s == "hadamard") return PropagationMode::Hadamard;
    if (s == "matmul") return PropagationMode::MatMul;
    throw DataError("unknown propagation mode '" + s + "' (expected hadamard or matmul)");
}

/// R^0 .. R^L, starting from the identity.
template <typename Scalar>
std::vector<MatrixX<Scalar>> propagate_trace(const ReducedAttention<Scalar>& reduced, PropagationMode mode) {
    reduced.validate();
    std::vector<MatrixX<Scalar>> trace;
    trace.reserve(reduced.abar.size() + 1);
    trace.push_back(MatrixX<Scalar>::Identity(reduced.tokens, reduced.tokens));
    for (const auto& a : reduced.abar) {
        const auto& prev = trace.back();
        MatrixX<Scalar> next = mode == PropagationMode::Hadamard
                                   ? MatrixX<Scalar>(prev + a.cwiseProduct(prev))
                                   : MatrixX<Scalar>(prev + a * prev);
        trace.push_back(std::move(next));
    }
    return trace;
}

template <typename Scalar>
MatrixX<Scalar> propagate(const ReducedAttention<Scalar>& reduced, PropagationMode mode) {
    return std::move(propagate_trace(reduced, mode).back());
}

/// Class-token row of R over the patch columns, reshaped row-major to rows x cols.
template <typename Derived>
MatrixX<typename Derived::Scalar> extract_patch_relevance(const Eigen::MatrixBase<Derived>& relevance, int rows,
                                                          int cols) {
    using Scalar = typename Derived::Scalar;
    if (relevance.rows() != relevance.cols()) throw ShapeMismatch("relevance matrix must be square");
    if (rows < 1 || cols < 1 || static_cast<Eigen::Index>(rows) * cols != relevance.rows() - 1)
        throw ShapeMismatch("patch grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " does not cover T-1 = " + std::to_string(relevance.rows() - 1) + " patches");
    MatrixX<Scalar> grid(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) grid(r, c) = relevance(0, 1 + r * cols + c);
    return grid;
}

/// Corner-aligned bilinear upsampling to height x width: grid corners land
/// exactly on output corners.
template <typename Derived>
MatrixX<typename Derived::Scalar> upsample_bilinear(const Eigen::MatrixBase<Derived>& grid, int width, int height) {
    using Scalar = typename Derived::Scalar;
    const auto m = grid.rows();
    const auto n = grid.cols();
    if (m == 0 || n == 0) throw DegenerateGrid("patch grid has zero rows or columns");
    if (width < n || height < m)
        throw ShapeMismatch("upsample target " + std::to_string(width) + "x" + std::to_string(height) +
                            " is smaller than the grid");
    // Source coordinate of output index i along an axis of `out` samples over `in` grid points.
    const auto source = [](Eigen::Index i, Eigen::Index out, Eigen::Index in, Eigen::Index& i0, Scalar& frac) {
        if (in == 1 || out == 1) {
            i0 = 0;
            frac = Scalar(0);
            return;
        }
        const Scalar s = static_cast<Scalar>(i) * static_cast<Scalar>(in - 1) / static_cast<Scalar>(out - 1);
        i0 = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(s)), in - 2);
        frac = s - static_cast<Scalar>(i0);
    };
    MatrixX<Scalar> out(height, width);
    for (Eigen::Index y = 0; y < height; ++y) {
        Eigen::Index r0 = 0;
        Scalar fy{};
        source(y, height, m, r0, fy);
        const Eigen::Index r1 = m == 1 ? 0 : r0 + 1;
        for (Eigen::Index x = 0; x < width; ++x) {
            Eigen::Index c0 = 0;
            Scalar fx{};
            source(x, width, n, c0, fx);
            const Eigen::Index c1 = n == 1 ? 0 : c0 + 1;
            const Scalar top = grid(r0, c0) * (Scalar(1) - fx) + grid(r0, c1) * fx;
            const Scalar bottom = grid(r1, c0) * (Scalar(1) - fx) + grid(r1, c1) * fx;
            Scalar v = top * (Scalar(1) - fy) + bottom * fy;
            // keep the result inside the convex hull despite rounding
            v = std::clamp(v, std::min({grid(r0, c0), grid(r0, c1), grid(r1, c0), grid(r1, c1)}),
                           std::max({grid(r0, c0), grid(r0, c1), grid(r1, c0), grid(r1, c1)}));
            out(y, x) = v;
        }
    }
    return out;
}

/// Pixel weights in [0, 1], stored as float32 (the on-disk precision).
struct WeightMap {
    using Storage = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Storage w; // height x width

    WeightMap() = default;
    explicit WeightMap(Storage values) : w(std::move(values)) {}
    WeightMap(int width, int height) : w(Storage::Zero(height, width)) {}

    int width() const { return static_cast<int>(w.cols()); }
    int height() const { return static_cast<int>(w.rows()); }
    float operator()(int x, int y) const { return w(y, x); }

    bool operator==(const WeightMap& o) const {
        return w.rows() == o.w.rows() && w.cols() == o.w.cols() &&
               std::equal(w.data(), w.data() + w.size(), o.w.data(),
                          [](float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); });
    }
};

/// Min-max normalisation to [0, 1]; a constant map normalises to all zeros.
template <typename Derived>
WeightMap normalize(const Eigen::MatrixBase<Derived>& raw) {
    if (!raw.allFinite()) throw DataError("cannot normalise a map with non-finite values");
    WeightMap out(static_cast<int>(raw.cols()), static_cast<int>(raw.rows()));
    if (raw.size() == 0) return out;
    const double lo = static_cast<double>(raw.minCoeff());
    const double hi = static_cast<double>(raw.maxCoeff());
    if (!(hi > lo)) return out;
    const double span = hi - lo;
    for (Eigen::Index y = 0; y < raw.rows(); ++y)
        for (Eigen::Index x = 0; x < raw.cols(); ++x)
            out.w(y, x) = static_cast<float>(std::clamp((static_cast<double>(raw(y, x)) - lo) / span, 0.0, 1.0));
    return out;
}

/// î_c: the source image with weight-proportional intensity added.
struct WeightedImage {
    RasterImage original;
    RasterImage blended;
    WeightMap map;
    std::string source_concept;
    double gain = 0.5;
};

/// out = clamp(pixel + round(gain * w * max_val), 0, max_val), broadcast over channels.
WeightedImage blend(const RasterImage& image, const WeightMap& map, double gain = 0.5, std::string concept_surface = {});

} // namespace mmkb
