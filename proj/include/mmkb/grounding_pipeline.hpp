#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmkb/concept_mining.hpp"
#include "mmkb/corpus_io.hpp"
#include "mmkb/encoder_backend.hpp"
#include "mmkb/relevance.hpp"

namespace mmkb {

struct ConceptMentionSet {
    std::string pair_id;
    std::vector<std::string> concepts; // first-occurrence order, no duplicates
};

/// Caption tokens (both tokenizers) intersected with the candidate set.
ConceptMentionSet extract_mentions(const ImageTextPair& pair, const std::set<std::string>& candidates,
                                   const Tokenizer& fine, const Tokenizer& compound);

struct RelevanceConfig {
    PropagationMode mode = PropagationMode::Hadamard;
    double gain = 0.5;
};

/// reduce (if needed) -> propagate -> class-token patch row -> bilinear upsample
/// -> normalise -> blend.
WeightedImage build_weighted_image(const RasterImage& image, const GroundingResult& grounding,
                                   const BackendDescriptor& descriptor, const RelevanceConfig& cfg,
                                   const std::string& concept_surface);

struct VisualGrounding {
    std::string concept_surface;
    std::optional<WeightedImage> weighted; // empty when this concept failed
    double ground_score = 0.0;
    std::string error;
};

/// One entry per mention; a failing concept records its error and does not abort the others.
std::vector<VisualGrounding> visual_ground(const RasterImage& image, const ConceptMentionSet& mentions,
                                           EncoderBackend& backend, const RelevanceConfig& cfg);

struct DoubleCheck {
    bool retained = false;
    double score = 0.0;
    std::vector<double> scores; // parallel to the mention list
};

/// Scores every mention against the weighted image; retained iff `concept_surface`
/// is the strict (unique) argmax. Backend errors propagate to the caller.
DoubleCheck double_check(const WeightedImage& weighted, const std::string& concept_surface,
                         const std::vector<std::string>& mentions, EncoderBackend& backend);

struct SenseGrounding {
    std::string concept_surface;
    std::optional<int> sense_index; // 1-based; nullopt = UNMATCHED
    double score = 0.0;             // best sense score (0 when there were no senses)
    std::vector<double> sense_scores;
    std::string warning;

    bool matched() const { return sense_index.has_value(); }
};

/// Picks the best-scoring sense (ties -> lowest index) if it reaches tau_desc.
/// A null entry or a backend error yields UNMATCHED.
SenseGrounding semantic_ground(const WeightedImage& weighted, const EncyclopediaEntry* entry, EncoderBackend& backend,
                               double tau_desc);

struct SemiGroundedPair {
    std::string concept_surface;
    std::string pair_id;
    std::string image_ref;
    std::string caption;
    WeightedImage weighted;
    double match_score = 0.0;
};

struct GroundingRecord {
    SemiGroundedPair pair;
    SenseGrounding sense;
};

struct ProvenanceEntry {
    std::string pair_id;
    std::string concept_surface;
    std::string stage;
    std::string outcome;
    std::optional<double> score;

    friend bool operator==(const ProvenanceEntry&, const ProvenanceEntry&) = default;
};

nlohmann::json to_json(const ProvenanceEntry& entry);
ProvenanceEntry provenance_from_json(const nlohmann::json& j);

struct GroundingConfig {
    RelevanceConfig relevance;
    double tau_desc = 0.2;
    int jobs = 1;
};

struct GroundingOutput {
    std::vector<GroundingRecord> records;     // sorted by (pair_id, concept)
    std::vector<ProvenanceEntry> provenance;  // corpus order, then concept-level discards
};

/// Full context-aware grounding over a corpus. Deterministic for a fixed backend,
/// inputs and configuration, independent of cfg.jobs.
GroundingOutput run_grounding(const std::vector<ImageTextPair>& corpus, const std::set<std::string>& candidates,
                              const Encyclopedia& encyclopedia, EncoderBackend& backend, const Tokenizer& fine,
                              const Tokenizer& compound, const GroundingConfig& cfg);

} // namespace mmkb
