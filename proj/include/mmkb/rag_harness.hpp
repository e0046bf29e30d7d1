#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mmkb/description_completion.hpp"
#include "mmkb/encoder_backend.hpp"
#include "mmkb/kb_store.hpp"

namespace mmkb {

struct IndexEntry {
    Eigen::VectorXd embedding; // unit norm
    std::string label;
    std::string image_ref;

    friend bool operator==(const IndexEntry& a, const IndexEntry& b) {
        return a.label == b.label && a.image_ref == b.image_ref && a.embedding.size() == b.embedding.size() &&
               a.embedding == b.embedding;
    }
};

class VectorIndex {
public:
    VectorIndex() = default;
    explicit VectorIndex(std::vector<IndexEntry> entries);

    /// Throws DataError on a dimension mismatch or a non-unit embedding.
    void add(IndexEntry entry);

    const std::vector<IndexEntry>& entries() const { return entries_; }
    bool empty() const { return entries_.empty(); }
    Eigen::Index dim() const { return entries_.empty() ? 0 : entries_.front().embedding.size(); }

    /// Position of the max-cosine entry; ties go to the smallest label, then the earliest entry.
    std::size_t nearest(const Eigen::Ref<const Eigen::VectorXd>& query) const;

    friend bool operator==(const VectorIndex&, const VectorIndex&) = default;

private:
    std::vector<IndexEntry> entries_;
};

void write_index(const VectorIndex& index, const std::filesystem::path& path);
VectorIndex read_index(const std::filesystem::path& path);

/// Up to `max_images_per_concept` images per concept by descending match score (pair_id breaks ties).
/// Images that fail to load or embed are skipped and reported through `warnings`.
VectorIndex build_index(const std::map<std::string, ConceptNode>& kb, EncoderBackend& backend,
                        const std::filesystem::path& image_base = {}, std::size_t max_images_per_concept = 10,
                        std::vector<std::string>* warnings = nullptr);

/// Throws EmptyIndex.
std::string retrieve_concept(const VectorIndex& index, const RasterImage& query, EncoderBackend& backend);

using ConceptDescriptions = std::vector<std::pair<std::string, std::string>>;

std::string build_vcr_prompt(std::string_view concept_surface);
std::string build_vckdg_prompt(std::string_view concept_surface, std::string_view description);
/// `tag_concept_descs` adds an image-tag line; omitted unless set.
std::string build_okvqa_prompt(std::string_view question, std::string_view original_answer,
                               const ConceptDescriptions& answer_concept_descs,
                               const ConceptDescriptions& question_concept_descs,
                               const std::optional<ConceptDescriptions>& tag_concept_descs = std::nullopt);

/// Longest-match scan of `text` against KB surfaces (ASCII case-insensitive, latin matches
/// on word boundaries). Returns each concept once with its first sense, in order of appearance.
ConceptDescriptions lookup_concepts(std::string_view text, const std::map<std::string, ConceptNode>& kb);

struct EvalResult {
    std::string metric;
    double value = 0.0; // percent, 1 decimal
    std::size_t n = 0;

    friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

nlohmann::json to_json(const EvalResult& r);
EvalResult eval_result_from_json(const nlohmann::json& j);

std::string normalize_answer(std::string_view s);

/// Throws LengthMismatch, or EmptyInput when there is nothing to score.
EvalResult exact_match_accuracy(std::span<const std::string> preds, std::span<const std::string> golds);

/// min(#matching annotations / 3, 1).
double soft_accuracy(std::string_view answer, std::span<const std::string> gold_annotations);

enum class Judgment { Win, Lose, Tie };

Judgment parse_judgment_label(std::string_view s);

struct WinRate {
    double win = 0.0;
    double lose = 0.0;
    double tie = 0.0;

    friend bool operator==(const WinRate&, const WinRate&) = default;
};

/// Throws EmptyInput.
WinRate win_rate(std::span<const Judgment> judgments);

struct VqaSample {
    std::string question;
    std::vector<std::string> gold_annotations; // exactly 10
    std::vector<std::string> image_tags;
    std::string original_answer;
};

nlohmann::json to_json(const VqaSample& s);
VqaSample vqa_sample_from_json(const nlohmann::json& j, std::size_t line_no = 0);
std::vector<VqaSample> read_vqa_samples(const std::filesystem::path& path);

struct VcrSample {
    std::string query_image;
    std::string gold_concept;
};

std::vector<VcrSample> read_vcr_samples(const std::filesystem::path& path);

struct VqaEvalOptions {
    bool include_tag_concepts = false;
};

/// Soft accuracy of the original answers and of the KB-refined answers.
std::vector<EvalResult> evaluate_okvqa(const std::vector<VqaSample>& samples,
                                       const std::map<std::string, ConceptNode>& kb, LlmBackend& llm,
                                       const VqaEvalOptions& opts = {});

/// Retrieval accuracy: the retrieved label is the prediction.
EvalResult evaluate_vcr(const std::vector<VcrSample>& samples, const VectorIndex& index, EncoderBackend& backend,
                        const std::filesystem::path& image_base = {});

} // namespace mmkb
