#pragma once

// Stage wiring shared by the CLI and the end-to-end tests.
//
// Grounding directory layout:
//   records.jsonl     one retained (pair, concept) per line, sorted by (pair_id, concept)
//   provenance.jsonl  one ProvenanceEntry per line
//   weights/*.cwm     the weight map of each record
//   meta.json         {"image_base": ..., "gain": ...}

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "mmkb/concept_mining.hpp"
#include "mmkb/corpus_io.hpp"
#include "mmkb/description_completion.hpp"
#include "mmkb/grounding_pipeline.hpp"
#include "mmkb/kb_store.hpp"

namespace mmkb {

/// Throws DataError when two pairs share an id.
void check_unique_ids(const std::vector<ImageTextPair>& corpus);

/// Counts dual-tokenizer output over the corpus in `jobs` shards and filters it.
std::vector<CandidateConcept> mine_candidates(const std::vector<ImageTextPair>& corpus, const Tokenizer& fine,
                                              const Tokenizer& compound, const MiningConfig& cfg, int jobs = 1,
                                              std::vector<std::string>* warnings = nullptr);

std::set<std::string> candidate_set(const std::vector<CandidateConcept>& candidates);

void write_grounding(const GroundingOutput& out, const std::filesystem::path& dir,
                     const std::filesystem::path& image_base);
/// Rebuilds records, weighted images included, from a grounding directory.
GroundingOutput read_grounding(const std::filesystem::path& dir);

/// Concepts with retained images but no matched sense, each with all of its weighted
/// images and the caption of its best-scoring pair as judging context.
std::vector<CompletionInput> completion_inputs(const std::vector<GroundingRecord>& records);

void write_completions(const std::vector<CompletionRecord>& records, const std::filesystem::path& path);
std::vector<CompletionRecord> read_completions(const std::filesystem::path& path);

/// Matched encyclopedia senses, JUDGED_OK descriptions and every retained image.
KbBuilder assemble_kb(const std::vector<GroundingRecord>& records, const Encyclopedia& encyclopedia,
                      const std::vector<CompletionRecord>& completions);

struct PipelineConfig {
    MiningConfig mining;
    GroundingConfig grounding;
    CompletionConfig completion;
};

struct PipelineInputs {
    std::vector<ImageTextPair> corpus;
    const Tokenizer* fine = nullptr;
    const Tokenizer* compound = nullptr;
    Encyclopedia encyclopedia;
};

struct PipelineReport {
    std::vector<CandidateConcept> candidates;
    GroundingOutput grounding;
    CompletionOutput completion;
    KbStats stats;
    std::vector<std::string> warnings;
};

/// mine -> ground -> complete -> build, writing the KB into `kb_dir`.
PipelineReport run_pipeline(const PipelineInputs& inputs, EncoderBackend& backend, LlmBackend& generator,
                            LlmBackend& judge, const PipelineConfig& cfg, const std::filesystem::path& kb_dir);

} // namespace mmkb
