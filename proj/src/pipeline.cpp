#include "mmkb/pipeline.hpp"

#include <fstream>
#include <map>
#include <thread>

#include "mmkb/codec.hpp"
#include "mmkb/error.hpp"

namespace mmkb {

using nlohmann::json;

void check_unique_ids(const std::vector<ImageTextPair>& corpus) {
    std::set<std::string> seen;
    for (const auto& p : corpus) {
        if (!seen.insert(p.id).second) throw DataError("duplicate pair id '" + p.id + "'");
    }
}

std::vector<CandidateConcept> mine_candidates(const std::vector<ImageTextPair>& corpus, const Tokenizer& fine,
                                              const Tokenizer& compound, const MiningConfig& cfg, int jobs,
                                              std::vector<std::string>* warnings) {
    cfg.validate();
    const auto shards = static_cast<std::size_t>(std::max(1, jobs));
    std::vector<FrequencyTable> tables(shards);
    std::vector<std::vector<std::string>> shard_warnings(shards);
    const auto work = [&](std::size_t s) {
        for (std::size_t i = s; i < corpus.size(); i += shards) {
            auto dual = tokenize_dual(corpus[i].text, fine, compound);
            tables[s].merge(accumulate(dual.tokens));
            for (auto& w : dual.warnings) shard_warnings[s].push_back(corpus[i].id + ": " + w);
        }
    };
    if (shards == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t s = 0; s < shards; ++s) pool.emplace_back(work, s);
    }
    FrequencyTable total;
    for (std::size_t s = 0; s < shards; ++s) {
        total.merge(tables[s]);
        if (warnings) warnings->insert(warnings->end(), shard_warnings[s].begin(), shard_warnings[s].end());
    }
    return filter_candidates(total, cfg);
}

std::set<std::string> candidate_set(const std::vector<CandidateConcept>& candidates) {
    std::set<std::string> out;
    for (const auto& c : candidates) out.insert(c.surface);
    return out;
}

namespace {

void write_lines(const std::filesystem::path& path, const std::vector<json>& lines) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& j : lines) out << j.dump() << '\n';
}

std::vector<json> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<json> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw MalformedRecord(line_no, "invalid JSON in " + path.string());
        out.push_back(std::move(j));
    }
    return out;
}

} // namespace

void write_grounding(const GroundingOutput& out, const std::filesystem::path& dir,
                     const std::filesystem::path& image_base) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    fs::remove_all(dir / "weights");
    fs::create_directories(dir / "weights");
    double gain = 0.5;
    std::vector<json> records;
    for (const auto& r : out.records) {
        const auto ref = "weights/" + weight_map_filename(r.pair.pair_id, r.pair.concept_surface);
        write_weight_map(r.pair.weighted.map, dir / ref);
        gain = r.pair.weighted.gain;
        records.push_back({{"pair_id", r.pair.pair_id},
                           {"concept", r.pair.concept_surface},
                           {"image_ref", r.pair.image_ref},
                           {"caption", r.pair.caption},
                           {"match_score", r.pair.match_score},
                           {"weight_map_ref", ref},
                           {"sense_index", r.sense.sense_index ? json(*r.sense.sense_index) : json(nullptr)},
                           {"sense_score", r.sense.score},
                           {"sense_scores", r.sense.sense_scores},
                           {"sense_warning", r.sense.warning}});
    }
    write_lines(dir / "records.jsonl", records);
    std::vector<json> prov;
    for (const auto& p : out.provenance) prov.push_back(to_json(p));
    write_lines(dir / "provenance.jsonl", prov);
    std::ofstream meta(dir / "meta.json", std::ios::binary | std::ios::trunc);
    meta << json{{"image_base", image_base.string()}, {"gain", gain}}.dump() << '\n';
}

GroundingOutput read_grounding(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw DataError("no meta.json under " + dir.string());
    const json meta = json::parse(meta_in, nullptr, false);
    if (meta.is_discarded()) throw DataError("invalid meta.json under " + dir.string());
    GroundingOutput out;
    try {
        const std::filesystem::path image_base = meta.at("image_base").get<std::string>();
        const double gain = meta.at("gain").get<double>();
        for (const auto& j : read_lines(dir / "records.jsonl")) {
            GroundingRecord r;
            r.pair.pair_id = j.at("pair_id").get<std::string>();
            r.pair.concept_surface = j.at("concept").get<std::string>();
            r.pair.image_ref = j.at("image_ref").get<std::string>();
            r.pair.caption = j.at("caption").get<std::string>();
            r.pair.match_score = j.at("match_score").get<double>();
            const auto image = load_image(r.pair.image_ref, image_base);
            const auto map = read_weight_map(dir / j.at("weight_map_ref").get<std::string>());
            r.pair.weighted = blend(image, map, gain, r.pair.concept_surface);
            r.sense.concept_surface = r.pair.concept_surface;
            if (!j.at("sense_index").is_null()) r.sense.sense_index = j.at("sense_index").get<int>();
            r.sense.score = j.at("sense_score").get<double>();
            r.sense.sense_scores = j.at("sense_scores").get<std::vector<double>>();
            r.sense.warning = j.at("sense_warning").get<std::string>();
            out.records.push_back(std::move(r));
        }
        for (const auto& j : read_lines(dir / "provenance.jsonl")) out.provenance.push_back(provenance_from_json(j));
    } catch (const json::exception& e) {
        throw DataError("malformed grounding directory: " + std::string(e.what()));
    }
    return out;
}

std::vector<CompletionInput> completion_inputs(const std::vector<GroundingRecord>& records) {
    std::map<std::string, std::vector<const GroundingRecord*>> by_concept;
    std::set<std::string> grounded;
    for (const auto& r : records) {
        by_concept[r.pair.concept_surface].push_back(&r);
        if (r.sense.matched()) grounded.insert(r.pair.concept_surface);
    }
    std::vector<CompletionInput> out;
    for (const auto& [c, recs] : by_concept) {
        if (grounded.contains(c)) continue;
        CompletionInput in;
        in.concept_surface = c;
        const GroundingRecord* best = recs.front();
        for (const auto* r : recs) {
            in.images.push_back(r->pair.weighted);
            if (r->pair.match_score > best->pair.match_score) best = r;
        }
        in.context = best->pair.caption;
        out.push_back(std::move(in));
    }
    return out;
}

void write_completions(const std::vector<CompletionRecord>& records, const std::filesystem::path& path) {
    std::vector<json> lines;
    for (const auto& r : records) lines.push_back(to_json(r));
    write_lines(path, lines);
}

std::vector<CompletionRecord> read_completions(const std::filesystem::path& path) {
    std::vector<CompletionRecord> out;
    try {
        for (const auto& j : read_lines(path)) out.push_back(completion_from_json(j));
    } catch (const json::exception& e) {
        throw DataError("malformed completions file: " + std::string(e.what()));
    }
    return out;
}

KbBuilder assemble_kb(const std::vector<GroundingRecord>& records, const Encyclopedia& encyclopedia,
                      const std::vector<CompletionRecord>& completions) {
    KbBuilder kb;
    for (const auto& r : records) {
        kb.upsert(ImageFragment{r.pair.concept_surface, r.pair.pair_id, r.pair.image_ref, r.pair.weighted.map,
                                r.pair.match_score});
        if (!r.sense.matched()) continue;
        const auto* entry = encyclopedia.find(r.pair.concept_surface);
        if (entry == nullptr) continue;
        const int k = *r.sense.sense_index;
        kb.upsert(SenseFragment{r.pair.concept_surface, entry->senses.at(static_cast<std::size_t>(k - 1)),
                                SenseSource::Encyclopedia, k});
    }
    for (const auto& c : completions) {
        if (c.status == CompletionStatus::JudgedOk)
            kb.upsert(SenseFragment{c.concept_surface, c.text, SenseSource::Generated, 1});
    }
    return kb;
}

PipelineReport run_pipeline(const PipelineInputs& inputs, EncoderBackend& backend, LlmBackend& generator,
                            LlmBackend& judge, const PipelineConfig& cfg, const std::filesystem::path& kb_dir) {
    if (inputs.fine == nullptr || inputs.compound == nullptr) throw DataError("pipeline needs both tokenizers");
    check_unique_ids(inputs.corpus);
    PipelineReport report;
    report.warnings = inputs.encyclopedia.warnings;
    report.candidates = mine_candidates(inputs.corpus, *inputs.fine, *inputs.compound, cfg.mining,
                                        cfg.grounding.jobs, &report.warnings);
    report.grounding = run_grounding(inputs.corpus, candidate_set(report.candidates), inputs.encyclopedia, backend,
                                     *inputs.fine, *inputs.compound, cfg.grounding);
    report.completion =
        run_completion(completion_inputs(report.grounding.records), generator, judge, backend, cfg.completion);
    report.warnings.insert(report.warnings.end(), report.completion.warnings.begin(),
                           report.completion.warnings.end());
    const auto kb = assemble_kb(report.grounding.records, inputs.encyclopedia, report.completion.records);
    kb.finalize(kb_dir);
    report.stats = kb.running_stats();
    return report;
}

} // namespace mmkb
