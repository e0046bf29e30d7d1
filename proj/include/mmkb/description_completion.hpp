#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmkb/encoder_backend.hpp"

namespace mmkb {

class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    /// Throws LlmUnavailable when no reply can be produced.
    virtual std::string generate(const std::string& prompt) = 0;
};

/// Replays recorded replies keyed by the SHA-256 of the prompt.
/// Fixture lines: {"prompt_hash": "<hex sha256>", "reply": "..."}.
class ReplayLlm : public LlmBackend {
public:
    ReplayLlm() = default;
    explicit ReplayLlm(std::map<std::string, std::string> replies) : replies_(std::move(replies)) {}
    static ReplayLlm from_file(const std::filesystem::path& path);

    std::string generate(const std::string& prompt) override;
    void record(const std::string& prompt, std::string reply);
    void save(const std::filesystem::path& path) const;

    static std::string prompt_hash(const std::string& prompt);

private:
    std::map<std::string, std::string> replies_;
};

std::string description_prompt(std::string_view concept_surface);
std::string judge_prompt(std::string_view context, std::string_view concept_surface, std::string_view description);

enum class CompletionStatus { Generated, HallucFiltered, JudgedOk, JudgedReject };

const char* to_string(CompletionStatus status);
CompletionStatus parse_completion_status(const std::string& s);

struct CompletionRecord {
    std::string concept_surface;
    std::string text;
    CompletionStatus status = CompletionStatus::Generated;

    /// Forward-only: GENERATED -> HALLUC_FILTERED | JUDGED_OK | JUDGED_REJECT.
    /// Anything else throws std::logic_error.
    void advance(CompletionStatus next);

    friend bool operator==(const CompletionRecord&, const CompletionRecord&) = default;
};

nlohmann::json to_json(const CompletionRecord& record);
CompletionRecord completion_from_json(const nlohmann::json& j);

/// Throws EmptyGeneration on a blank reply; LlmUnavailable propagates.
CompletionRecord generate_description(const std::string& concept_surface, LlmBackend& llm);

/// Keeps the record iff some weighted image scores >= tau_h against its text.
void eliminate_hallucination(CompletionRecord& record, std::span<const WeightedImage> images, EncoderBackend& backend,
                             double tau_h);

/// First '0' or '1' not adjacent to another digit.
std::optional<int> parse_judgment(std::string_view reply);

/// Malformed replies are retried up to `max_retries` times, then rejected.
CompletionStatus judge_consistency(const std::string& context, const std::string& concept_surface,
                                   const std::string& description, LlmBackend& llm, int max_retries = 2);

struct CompletionConfig {
    double tau_h = 0.2;
    int judge_retries = 2;
};

struct CompletionInput {
    std::string concept_surface;
    std::vector<WeightedImage> images;
    std::string context; // caption of the concept's highest double-check pair
};

struct CompletionOutput {
    std::vector<CompletionRecord> records;  // input order
    std::vector<std::string> retry_queue;   // concepts whose LLM call was unavailable
    std::vector<std::string> warnings;
};

CompletionOutput run_completion(const std::vector<CompletionInput>& inputs, LlmBackend& generator, LlmBackend& judge,
                                EncoderBackend& backend, const CompletionConfig& cfg);

} // namespace mmkb
