#pragma once

// On-disk layout of a finalised knowledge base:
//
//   concepts.jsonl          one ConceptNode per line, sorted by surface
//   weights/<pair>__<h>.cwm weight maps; <h> = first 16 hex digits of sha256(concept)
//   images/manifest.jsonl   one line per (concept, image), sorted by concept then pair_id
//
// Weight-map files: "CWM1", u32 width, u32 height (little-endian), then
// width*height float32 values, little-endian, row-major.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmkb/relevance.hpp"

namespace mmkb {

enum class SenseSource { Encyclopedia, Generated };

struct SenseEntry {
    std::string text;
    SenseSource source = SenseSource::Encyclopedia;
    int sense_index = 1;

    friend bool operator==(const SenseEntry&, const SenseEntry&) = default;
};

struct ImageEntry {
    std::string pair_id;
    std::string image_ref;
    std::string weight_map_ref; // relative to the KB directory
    double match_score = 0.0;

    friend bool operator==(const ImageEntry&, const ImageEntry&) = default;
};

struct ConceptNode {
    std::string surface;
    std::vector<SenseEntry> senses; // sorted by sense_index
    std::vector<ImageEntry> images; // sorted by pair_id

    /// Throws DataError for empty nodes, bad sense indices or non-finite scores.
    void validate() const;

    friend bool operator==(const ConceptNode&, const ConceptNode&) = default;
};

nlohmann::json to_json(const ConceptNode& node);
ConceptNode concept_node_from_json(const nlohmann::json& j);

struct SenseFragment {
    std::string concept_surface;
    std::string text;
    SenseSource source = SenseSource::Encyclopedia;
    int sense_index = 1;
};

struct ImageFragment {
    std::string concept_surface;
    std::string pair_id;
    std::string image_ref;
    WeightMap weight_map;
    double match_score = 0.0;
};

using Fragment = std::variant<SenseFragment, ImageFragment>;

inline constexpr int kHistogramMax = 20;

struct KbStats {
    std::uint64_t concept_count = 0;
    std::uint64_t image_count = 0;
    double avg_images_per_concept = 0.0; // half-up, 2 decimals
    std::uint64_t polysemous_count = 0;
    std::map<int, std::uint64_t> histogram; // k in 1..20 -> concepts with exactly k images
    std::uint64_t histogram_overflow = 0;   // concepts with more than 20 images
    std::uint64_t description_count = 0;
    double avg_description_scalars = 0.0;   // Unicode scalar values, half-up, 2 decimals
    double avg_description_words = 0.0;     // whitespace-separated words, half-up, 2 decimals

    friend bool operator==(const KbStats&, const KbStats&) = default;
};

nlohmann::json to_json(const KbStats& stats);

/// Counts -> KbStats. `images_per_concept` and `senses_per_concept` hold one entry per concept.
KbStats make_stats(const std::vector<std::uint64_t>& images_per_concept,
                   const std::vector<std::uint64_t>& senses_per_concept, std::uint64_t description_scalars,
                   std::uint64_t description_words, std::uint64_t description_count);

KbStats stats(const std::map<std::string, ConceptNode>& kb);

class KbBuilder {
public:
    /// Idempotent per (concept, sense_index). Different text for an existing key throws ConflictingSense.
    void upsert(const SenseFragment& fragment);
    /// Idempotent per (concept, pair_id). On a key collision the higher match score wins.
    void upsert(const ImageFragment& fragment);
    void upsert(const Fragment& fragment);

    /// Statistics maintained incrementally during upserts.
    KbStats running_stats() const;

    /// Nodes with weight_map_ref filled in, keyed and ordered by surface.
    std::map<std::string, ConceptNode> nodes() const;

    /// Writes the layout above into `dir`, replacing any previous KB files there.
    void finalize(const std::filesystem::path& dir) const;

private:
    std::map<std::string, std::map<int, SenseEntry>> senses_;
    std::map<std::string, std::map<std::string, ImageFragment>> images_;
    std::uint64_t description_scalars_ = 0;
    std::uint64_t description_words_ = 0;
};

std::string weight_map_filename(const std::string& pair_id, const std::string& concept_surface);

void write_weight_map(const WeightMap& map, const std::filesystem::path& path);
/// Throws BadMagic or TruncatedFile.
WeightMap read_weight_map(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_weight_map(const WeightMap& map);
WeightMap decode_weight_map(const std::vector<std::uint8_t>& bytes);

std::map<std::string, ConceptNode> read_kb(const std::filesystem::path& dir);

std::size_t count_words(std::string_view text);

} // namespace mmkb
