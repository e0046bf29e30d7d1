#include "mmkb/description_completion.hpp"

#include <fstream>
#include <stdexcept>

#include "mmkb/codec.hpp"
#include "mmkb/error.hpp"

namespace mmkb {

using nlohmann::json;

ReplayLlm ReplayLlm::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open LLM fixture " + path.string());
    ReplayLlm llm;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("prompt_hash") || !j.contains("reply") ||
            !j["prompt_hash"].is_string() || !j["reply"].is_string())
            throw MalformedRecord(line_no, "LLM fixture line must be {prompt_hash, reply}");
        llm.replies_.emplace(j["prompt_hash"].get<std::string>(), j["reply"].get<std::string>());
    }
    return llm;
}

std::string ReplayLlm::prompt_hash(const std::string& prompt) { return sha256_hex(prompt); }

std::string ReplayLlm::generate(const std::string& prompt) {
    const auto it = replies_.find(prompt_hash(prompt));
    if (it == replies_.end()) throw LlmUnavailable("no recorded reply for prompt " + prompt_hash(prompt));
    return it->second;
}

void ReplayLlm::record(const std::string& prompt, std::string reply) { replies_[prompt_hash(prompt)] = std::move(reply); }

void ReplayLlm::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& [hash, reply] : replies_) out << json{{"prompt_hash", hash}, {"reply", reply}}.dump() << '\n';
}

std::string description_prompt(std::string_view concept_surface) {
    return "Please generate a basic concept description for concept " + std::string(concept_surface) +
           ", scientifically and rigorously explain the basic meaning of this concept.";
}

std::string judge_prompt(std::string_view context, std::string_view concept_surface, std::string_view description) {
    return "Context: " + std::string(context) + "; Concept: " + std::string(concept_surface) +
           "; Concept description: " + std::string(description) +
           "; Your task is to determine whether the meaning of a concept in the Context conflicts with its "
           "description. If there is a conflict, output 0. If there is no conflict, output 1.";
}

const char* to_string(CompletionStatus status) {
    switch (status) {
    case CompletionStatus::Generated: return "GENERATED";
    case CompletionStatus::HallucFiltered: return "HALLUC_FILTERED";
    case CompletionStatus::JudgedOk: return "JUDGED_OK";
    case CompletionStatus::JudgedReject: return "JUDGED_REJECT";
    }
    return "?";
}

CompletionStatus parse_completion_status(const std::string& s) {
    if (s == "GENERATED") return CompletionStatus::Generated;
    if (s == "HALLUC_FILTERED") return CompletionStatus::HallucFiltered;
    if (s == "JUDGED_OK") return CompletionStatus::JudgedOk;
    if (s == "JUDGED_REJECT") return CompletionStatus::JudgedReject;
    throw DataError("unknown completion status '" + s + "'");
}

void CompletionRecord::advance(CompletionStatus next) {
    if (status != CompletionStatus::Generated || next == CompletionStatus::Generated)
        throw std::logic_error(std::string("illegal completion transition ") + to_string(status) + " -> " +
                               to_string(next));
    status = next;
}

json to_json(const CompletionRecord& r) {
    return json{{"concept", r.concept_surface}, {"text", r.text}, {"status", to_string(r.status)}};
}

CompletionRecord completion_from_json(const json& j) {
    return CompletionRecord{j.at("concept").get<std::string>(), j.at("text").get<std::string>(),
                            parse_completion_status(j.at("status").get<std::string>())};
}

CompletionRecord generate_description(const std::string& concept_surface, LlmBackend& llm) {
    std::string reply = llm.generate(description_prompt(concept_surface));
    if (trim(reply).empty()) throw EmptyGeneration("empty description generated for '" + concept_surface + "'");
    return CompletionRecord{concept_surface, std::move(reply), CompletionStatus::Generated};
}

void eliminate_hallucination(CompletionRecord& record, std::span<const WeightedImage> images, EncoderBackend& backend,
                             double tau_h) {
    if (record.status != CompletionStatus::Generated)
        throw std::logic_error("hallucination filtering needs a GENERATED record");
    for (const auto& img : images) {
        if (score_pair(backend, img, record.text) >= tau_h) return;
    }
    record.advance(CompletionStatus::HallucFiltered);
}

std::optional<int> parse_judgment(std::string_view reply) {
    const auto is_digit = [](char c) { return c >= '0' && c <= '9'; };
    for (std::size_t i = 0; i < reply.size(); ++i) {
        const char c = reply[i];
        if (c != '0' && c != '1') continue;
        const bool left_ok = i == 0 || !is_digit(reply[i - 1]);
        const bool right_ok = i + 1 == reply.size() || !is_digit(reply[i + 1]);
        if (left_ok && right_ok) return c - '0';
    }
    return std::nullopt;
}

CompletionStatus judge_consistency(const std::string& context, const std::string& concept_surface,
                                   const std::string& description, LlmBackend& llm, int max_retries) {
    const std::string prompt = judge_prompt(context, concept_surface, description);
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        if (const auto verdict = parse_judgment(llm.generate(prompt)))
            return *verdict == 1 ? CompletionStatus::JudgedOk : CompletionStatus::JudgedReject;
    }
    return CompletionStatus::JudgedReject;
}

CompletionOutput run_completion(const std::vector<CompletionInput>& inputs, LlmBackend& generator, LlmBackend& judge,
                                EncoderBackend& backend, const CompletionConfig& cfg) {
    CompletionOutput out;
    for (const auto& in : inputs) {
        CompletionRecord record;
        try {
            record = generate_description(in.concept_surface, generator);
        } catch (const LlmUnavailable& e) {
            out.retry_queue.push_back(in.concept_surface);
            out.warnings.push_back(e.what());
            continue;
        } catch (const EmptyGeneration& e) {
            out.warnings.push_back(e.what());
            continue;
        }
        try {
            eliminate_hallucination(record, in.images, backend, cfg.tau_h);
        } catch (const BackendError& e) {
            out.warnings.push_back(std::string("hallucination check failed for '") + in.concept_surface +
                                   "': " + e.what());
            record.advance(CompletionStatus::HallucFiltered);
        }
        if (record.status == CompletionStatus::Generated) {
            try {
                record.advance(judge_consistency(in.context, in.concept_surface, record.text, judge, cfg.judge_retries));
            } catch (const LlmUnavailable& e) {
                out.retry_queue.push_back(in.concept_surface);
                out.warnings.push_back(e.what());
                continue;
            }
        }
        out.records.push_back(std::move(record));
    }
    return out;
}

} // namespace mmkb
