#pragma once

// Synthetic fixtures shared by the unit tests, the acceptance suite and the CLI tests.

#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "mmkb/description_completion.hpp"
#include "mmkb/encoder_backend.hpp"
#include "mmkb/relevance.hpp"
#include "mmkb/raster.hpp"

namespace mmkb::testing {

/// Uniform RGB noise; only raw generator output is used so images are stable across standard libraries.
RasterImage random_image(std::mt19937_64& gen, int width, int height);

/// Four flat quadrants.
RasterImage quadrant_image(std::uint64_t seed, int size = 32);

/// Writes the 12-pair mini corpus and everything needed to run every stage on it:
///   corpus.jsonl, images/p01.png .. p12.png, fine.tsv, compound.tsv,
///   encyclopedia.jsonl, llm.jsonl, config.json
void write_mini_corpus(const std::filesystem::path& dir);

/// Concepts the mini corpus is built around.
std::vector<std::string> mini_concepts();

struct CompletionFixture {
    std::vector<CompletionInput> inputs;
    ReplayLlm llm;
};

/// 30 concepts with weighted images and a replay LLM covering the usual paths:
/// accepted, rejected, malformed judge replies, empty and missing generations.
CompletionFixture completion_fixture(std::uint64_t seed);

/// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& tag);

/// Backend whose scores come from a lookup on the text; ground() returns a
/// uniform-attention stack with the given shape. Unknown texts score 0.
class ScriptedBackend : public EncoderBackend {
public:
    explicit ScriptedBackend(std::map<std::string, double> scores, int layers = 1, int heads = 1, int grid = 2);

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    GroundingResult ground(const RasterImage& image, const std::string& prompt) override;
    double score(const RasterImage& image, const std::string& text) override;
    Eigen::VectorXd embed(const RasterImage& image) override;

    std::map<std::string, double> scores;
    /// Texts whose calls throw BackendUnavailable.
    std::set<std::string> failing;

private:
    BackendDescriptor descriptor_;
};

} // namespace mmkb::testing
