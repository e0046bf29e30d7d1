#include "mmkb/toy_encoder.hpp"

#include <cmath>
#include <random>

#include "mmkb/codec.hpp"

namespace mmkb {

namespace {

// Portable uniform draw in [-1, 1): the standard distributions are implementation-defined.
double uniform_pm1(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

Eigen::MatrixXd random_matrix(std::mt19937_64& gen, int rows, int cols) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = uniform_pm1(gen) * scale;
    return m;
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& s) {
    Eigen::MatrixXd a(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const double mx = s.row(r).maxCoeff();
        a.row(r) = (s.row(r).array() - mx).exp();
        a.row(r) /= a.row(r).sum();
    }
    return a;
}

std::vector<std::string> bag_of_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char32_t cp : utf8_decode(text)) {
        const bool ascii_alnum = (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
        if (ascii_alnum) {
            current += static_cast<char>(cp >= 'A' && cp <= 'Z' ? cp - 'A' + 'a' : cp);
            continue;
        }
        if (!current.empty()) words.push_back(std::move(current));
        current.clear();
        if (cp >= 0x80) words.push_back(utf8_encode(cp)); // each non-ASCII scalar is a word
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

} // namespace

struct ToyEncoder::Forward {
    std::vector<Eigen::MatrixXd> inputs; // X_l for l = 0..L-1
    std::vector<Eigen::MatrixXd> q, k, v, a;
    Eigen::MatrixXd output;              // X_L
};

ToyEncoder::ToyEncoder(ToyEncoderConfig config) : config_(config) {
    descriptor_.name = "toy";
    descriptor_.layers = config_.layers;
    descriptor_.heads = config_.heads;
    descriptor_.grid_rows = config_.grid_rows;
    descriptor_.grid_cols = config_.grid_cols;
    descriptor_.tokens = config_.grid_rows * config_.grid_cols + 1;
    descriptor_.returns_reduced = config_.reduce_before_return;
    descriptor_.validate();
    if (config_.model_dim < 1 || config_.key_dim < 1 || config_.embed_dim < 1)
        throw DataError("toy encoder dimensions must be positive");

    std::mt19937_64 gen(config_.seed ^ 0x9e3779b97f4a7c15ULL);
    const int d = config_.model_dim;
    input_proj_ = random_matrix(gen, d, 3) * 3.0;
    positions_ = random_matrix(gen, descriptor_.tokens, d);
    for (int i = 0; i < config_.layers * config_.heads; ++i) {
        wq_.push_back(random_matrix(gen, config_.key_dim, d) * 2.0);
        wk_.push_back(random_matrix(gen, config_.key_dim, d) * 2.0);
        wv_.push_back(random_matrix(gen, d, d));
    }
    output_proj_ = random_matrix(gen, config_.embed_dim, d);
}

Eigen::MatrixXd ToyEncoder::input_tokens(const RasterImage& image) const {
    image.validate();
    const int rows = config_.grid_rows;
    const int cols = config_.grid_cols;
    Eigen::MatrixXd x(descriptor_.tokens, config_.model_dim);
    x.row(0) = positions_.row(0);
    for (int r = 0; r < rows; ++r) {
        const int y0 = r * image.height / rows;
        const int y1 = std::max(y0 + 1, (r + 1) * image.height / rows);
        for (int c = 0; c < cols; ++c) {
            const int x0 = c * image.width / cols;
            const int x1 = std::max(x0 + 1, (c + 1) * image.width / cols);
            Eigen::Vector3d mean = Eigen::Vector3d::Zero();
            for (int y = y0; y < std::min(y1, image.height); ++y) {
                for (int xx = x0; xx < std::min(x1, image.width); ++xx) {
                    for (int ch = 0; ch < 3; ++ch) mean(ch) += image.at(xx, y, image.channels == 3 ? ch : 0);
                }
            }
            const double count = static_cast<double>((std::min(y1, image.height) - y0) * (std::min(x1, image.width) - x0));
            mean /= count * RasterImage::max_val;
            const int token = 1 + r * cols + c;
            x.row(token) = (input_proj_ * (mean.array() - 0.5).matrix()).transpose() + positions_.row(token);
        }
    }
    return x;
}

Eigen::VectorXd ToyEncoder::text_embedding(std::string_view text) const {
    Eigen::VectorXd t = Eigen::VectorXd::Zero(config_.embed_dim);
    auto add_word = [&](std::string_view word) {
        std::mt19937_64 gen(fnv1a64(word) ^ config_.seed);
        for (int i = 0; i < config_.embed_dim; ++i) t(i) += uniform_pm1(gen);
    };
    add_word("<bos>");
    for (const auto& w : bag_of_words(text)) add_word(w);
    return t.normalized();
}

ToyEncoder::Forward ToyEncoder::forward(const Eigen::MatrixXd& x0, int override_layer, int override_head,
                                        const Eigen::MatrixXd* override_attention) const {
    const int L = config_.layers;
    const int H = config_.heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(config_.key_dim));
    Forward f;
    f.q.resize(static_cast<std::size_t>(L) * H);
    f.k.resize(f.q.size());
    f.v.resize(f.q.size());
    f.a.resize(f.q.size());
    Eigen::MatrixXd x = x0;
    for (int l = 0; l < L; ++l) {
        f.inputs.push_back(x);
        Eigen::MatrixXd next = x;
        for (int h = 0; h < H; ++h) {
            const auto i = idx(l, h);
            f.q[i] = x * wq_[i].transpose();
            f.k[i] = x * wk_[i].transpose();
            f.v[i] = x * wv_[i].transpose();
            if (l == override_layer && h == override_head && override_attention != nullptr) {
                f.a[i] = *override_attention;
            } else {
                f.a[i] = softmax_rows(f.q[i] * f.k[i].transpose() * inv_sqrt_dk);
            }
            next += f.a[i] * f.v[i] / static_cast<double>(H);
        }
        x = std::move(next);
    }
    f.output = std::move(x);
    return f;
}

GroundingResult ToyEncoder::ground(const RasterImage& image, const std::string& prompt) {
    const int L = config_.layers;
    const int H = config_.heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(config_.key_dim));
    const Forward f = forward(input_tokens(image));
    const Eigen::VectorXd t = text_embedding(prompt);
    const Eigen::VectorXd u = output_proj_ * f.output.row(0).transpose();
    const double norm = u.norm();
    if (!(norm > 0.0)) throw DataError("toy encoder produced a zero image embedding");
    const double y = u.dot(t) / norm;

    // dy/du for y = <u, t> / |u| with |t| = 1
    const Eigen::VectorXd dy_du = t / norm - y * u / (norm * norm);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(f.output.rows(), f.output.cols());
    g.row(0) = (output_proj_.transpose() * dy_du).transpose();

    AttentionStack<double> stack(L, H, descriptor_.tokens);
    for (int l = L - 1; l >= 0; --l) {
        Eigen::MatrixXd dx = g; // residual path
        for (int h = 0; h < H; ++h) {
            const auto i = idx(l, h);
            const Eigen::MatrixXd d_attn = g * f.v[i].transpose() / static_cast<double>(H);
            stack.attention(l, h) = f.a[i];
            stack.gradient(l, h) = d_attn;

            const Eigen::MatrixXd d_v = f.a[i].transpose() * g / static_cast<double>(H);
            dx += d_v * wv_[i];
            // softmax backward, row-wise
            const Eigen::VectorXd inner = (d_attn.array() * f.a[i].array()).rowwise().sum();
            Eigen::MatrixXd d_s = f.a[i].array() * (d_attn.colwise() - inner).array();
            d_s *= inv_sqrt_dk;
            dx += (d_s * f.k[i]) * wq_[i] + (d_s.transpose() * f.q[i]) * wk_[i];
        }
        g = std::move(dx);
    }

    GroundingResult result;
    result.score = y;
    if (config_.reduce_before_return) {
        result.attention = reduce_heads(stack);
    } else {
        result.attention = std::move(stack);
    }
    return result;
}

double ToyEncoder::score(const RasterImage& image, const std::string& text) {
    const Eigen::VectorXd u = embed(image);
    return u.dot(text_embedding(text));
}

Eigen::VectorXd ToyEncoder::embed(const RasterImage& image) {
    const Forward f = forward(input_tokens(image));
    const Eigen::VectorXd u = output_proj_ * f.output.row(0).transpose();
    const double norm = u.norm();
    if (!(norm > 0.0)) throw DataError("toy encoder produced a zero image embedding");
    return u / norm;
}

double ToyEncoder::score_with_attention(const RasterImage& image, std::string_view prompt, int layer, int head,
                                        const Eigen::MatrixXd& attention) const {
    const Forward f = forward(input_tokens(image), layer, head, &attention);
    const Eigen::VectorXd u = output_proj_ * f.output.row(0).transpose();
    return u.dot(text_embedding(prompt)) / u.norm();
}

} // namespace mmkb
