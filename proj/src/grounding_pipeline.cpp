#include "mmkb/grounding_pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <map>
#include <semaphore>
#include <thread>

namespace mmkb {

using nlohmann::json;

ConceptMentionSet extract_mentions(const ImageTextPair& pair, const std::set<std::string>& candidates,
                                   const Tokenizer& fine, const Tokenizer& compound) {
    ConceptMentionSet out{pair.id, {}};
    std::set<std::string> seen;
    for (const auto& token : tokenize_dual(pair.text, fine, compound).tokens) {
        if (candidates.contains(token.surface) && seen.insert(token.surface).second)
            out.concepts.push_back(token.surface);
    }
    return out;
}

WeightedImage build_weighted_image(const RasterImage& image, const GroundingResult& grounding,
                                   const BackendDescriptor& descriptor, const RelevanceConfig& cfg,
                                   const std::string& concept_surface) {
    const auto relevance = propagate(grounding.reduce(), cfg.mode);
    const auto grid = extract_patch_relevance(relevance, descriptor.grid_rows, descriptor.grid_cols);
    const auto raw = upsample_bilinear(grid, image.width, image.height);
    return blend(image, normalize(raw), cfg.gain, concept_surface);
}

std::vector<VisualGrounding> visual_ground(const RasterImage& image, const ConceptMentionSet& mentions,
                                           EncoderBackend& backend, const RelevanceConfig& cfg) {
    std::vector<VisualGrounding> out;
    for (const auto& c : mentions.concepts) {
        VisualGrounding vg;
        vg.concept_surface = c;
        try {
            const auto result = checked_ground(backend, image, grounding_prompt(c));
            vg.ground_score = result.score;
            vg.weighted = build_weighted_image(image, result, backend.descriptor(), cfg, c);
        } catch (const std::exception& e) {
            vg.error = e.what();
        }
        out.push_back(std::move(vg));
    }
    return out;
}

DoubleCheck double_check(const WeightedImage& weighted, const std::string& concept_surface,
                         const std::vector<std::string>& mentions, EncoderBackend& backend) {
    const auto self = std::find(mentions.begin(), mentions.end(), concept_surface);
    if (self == mentions.end()) throw DataError("double_check: '" + concept_surface + "' is not among the mentions");
    DoubleCheck out;
    for (const auto& c : mentions) out.scores.push_back(score_pair(backend, weighted, grounding_prompt(c)));
    const auto me = static_cast<std::size_t>(self - mentions.begin());
    out.score = out.scores[me];
    out.retained = true;
    for (std::size_t i = 0; i < out.scores.size(); ++i) {
        if (i != me && out.scores[i] >= out.score) {
            out.retained = false;
            break;
        }
    }
    return out;
}

SenseGrounding semantic_ground(const WeightedImage& weighted, const EncyclopediaEntry* entry, EncoderBackend& backend,
                               double tau_desc) {
    SenseGrounding out;
    out.concept_surface = weighted.source_concept;
    if (entry == nullptr || entry->senses.empty()) return out;
    out.concept_surface = entry->concept_surface;
    try {
        for (const auto& s : entry->senses) out.sense_scores.push_back(score_pair(backend, weighted, s));
    } catch (const std::exception& e) {
        out.sense_scores.clear();
        out.warning = std::string("sense scoring failed: ") + e.what();
        return out;
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.sense_scores.size(); ++i) {
        if (out.sense_scores[i] > out.sense_scores[best]) best = i;
    }
    out.score = out.sense_scores[best];
    if (out.score >= tau_desc) out.sense_index = static_cast<int>(best) + 1;
    return out;
}

json to_json(const ProvenanceEntry& e) {
    json j{{"pair_id", e.pair_id}, {"concept", e.concept_surface}, {"stage", e.stage}, {"outcome", e.outcome}};
    j["score"] = e.score ? json(*e.score) : json(nullptr);
    return j;
}

ProvenanceEntry provenance_from_json(const json& j) {
    ProvenanceEntry e;
    e.pair_id = j.at("pair_id").get<std::string>();
    e.concept_surface = j.at("concept").get<std::string>();
    e.stage = j.at("stage").get<std::string>();
    e.outcome = j.at("outcome").get<std::string>();
    if (const auto& s = j.at("score"); !s.is_null()) e.score = s.get<double>();
    return e;
}

namespace {

/// Caps concurrent calls into a backend at its declared in-flight limit.
class GatedBackend : public EncoderBackend {
public:
    GatedBackend(EncoderBackend& inner, int limit) : inner_(inner), gate_(limit) {}

    const BackendDescriptor& descriptor() const override { return inner_.descriptor(); }
    GroundingResult ground(const RasterImage& image, const std::string& prompt) override {
        Hold h(gate_);
        return inner_.ground(image, prompt);
    }
    double score(const RasterImage& image, const std::string& text) override {
        Hold h(gate_);
        return inner_.score(image, text);
    }
    Eigen::VectorXd embed(const RasterImage& image) override {
        Hold h(gate_);
        return inner_.embed(image);
    }

private:
    struct Hold {
        explicit Hold(std::counting_semaphore<>& s) : sem(s) { sem.acquire(); }
        ~Hold() { sem.release(); }
        std::counting_semaphore<>& sem;
    };
    EncoderBackend& inner_;
    std::counting_semaphore<> gate_;
};

struct PairOutcome {
    std::vector<GroundingRecord> records;
    std::vector<ProvenanceEntry> provenance;
};

PairOutcome ground_pair(const ImageTextPair& pair, const std::set<std::string>& candidates,
                        const Encyclopedia& encyclopedia, EncoderBackend& backend, const Tokenizer& fine,
                        const Tokenizer& compound, const GroundingConfig& cfg) {
    PairOutcome out;
    auto log = [&](const std::string& concept_surface, const char* stage, std::string outcome,
                   std::optional<double> score = std::nullopt) {
        out.provenance.push_back({pair.id, concept_surface, stage, std::move(outcome), score});
    };

    ConceptMentionSet mentions;
    try {
        mentions = extract_mentions(pair, candidates, fine, compound);
    } catch (const std::exception& e) {
        log("", "mentions", std::string("error: ") + e.what());
        return out;
    }
    if (mentions.concepts.empty()) {
        log("", "mentions", "none");
        return out;
    }

    RasterImage image;
    try {
        image = pair.decode_image();
    } catch (const std::exception& e) {
        log("", "image", std::string("missing: ") + e.what());
        return out;
    }

    for (auto& vg : visual_ground(image, mentions, backend, cfg.relevance)) {
        if (!vg.weighted) {
            log(vg.concept_surface, "visual", "error: " + vg.error);
            continue;
        }
        log(vg.concept_surface, "visual", "ok", vg.ground_score);

        DoubleCheck check;
        try {
            check = double_check(*vg.weighted, vg.concept_surface, mentions.concepts, backend);
        } catch (const std::exception& e) {
            log(vg.concept_surface, "double_check", std::string("unverified: ") + e.what());
            continue;
        }
        log(vg.concept_surface, "double_check", check.retained ? "retained" : "dropped", check.score);
        if (!check.retained) continue;

        GroundingRecord rec;
        rec.sense = semantic_ground(*vg.weighted, encyclopedia.find(vg.concept_surface), backend, cfg.tau_desc);
        rec.sense.concept_surface = vg.concept_surface;
        if (!rec.sense.warning.empty()) log(vg.concept_surface, "sense", "warning: " + rec.sense.warning);
        if (rec.sense.matched()) {
            log(vg.concept_surface, "sense", "matched:" + std::to_string(*rec.sense.sense_index), rec.sense.score);
        } else {
            log(vg.concept_surface, "sense", "unmatched",
                rec.sense.sense_scores.empty() ? std::nullopt : std::optional<double>(rec.sense.score));
        }
        rec.pair = SemiGroundedPair{vg.concept_surface, pair.id, pair.image_ref, pair.text, std::move(*vg.weighted),
                                    check.score};
        out.records.push_back(std::move(rec));
    }
    return out;
}

} // namespace

GroundingOutput run_grounding(const std::vector<ImageTextPair>& corpus, const std::set<std::string>& candidates,
                              const Encyclopedia& encyclopedia, EncoderBackend& backend, const Tokenizer& fine,
                              const Tokenizer& compound, const GroundingConfig& cfg) {
    const int jobs = std::max(1, cfg.jobs);
    const int declared = backend.descriptor().max_in_flight;
    const int limit = declared > 0 ? std::min(declared, jobs) : jobs;
    GatedBackend gated(backend, limit);

    std::vector<PairOutcome> outcomes(corpus.size());
    std::atomic<std::size_t> next{0};
    const auto worker = [&]() {
        for (std::size_t i = next++; i < corpus.size(); i = next++) {
            outcomes[i] = ground_pair(corpus[i], candidates, encyclopedia, gated, fine, compound, cfg);
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    }

    GroundingOutput out;
    for (auto& o : outcomes) {
        std::move(o.records.begin(), o.records.end(), std::back_inserter(out.records));
        std::move(o.provenance.begin(), o.provenance.end(), std::back_inserter(out.provenance));
    }
    std::stable_sort(out.records.begin(), out.records.end(), [](const GroundingRecord& a, const GroundingRecord& b) {
        return std::tie(a.pair.pair_id, a.pair.concept_surface) < std::tie(b.pair.pair_id, b.pair.concept_surface);
    });

    // Encyclopedia senses that no weighted image selected are non-concept descriptions.
    std::map<std::string, std::set<int>> chosen;
    for (const auto& r : out.records) {
        if (r.sense.matched()) chosen[r.pair.concept_surface].insert(*r.sense.sense_index);
    }
    for (const auto& c : candidates) {
        const auto* entry = encyclopedia.find(c);
        if (entry == nullptr) continue;
        for (std::size_t k = 1; k <= entry->senses.size(); ++k) {
            if (!chosen[c].contains(static_cast<int>(k)))
                out.provenance.push_back({"", c, "sense_discard", "discarded:" + std::to_string(k), std::nullopt});
        }
    }
    return out;
}

} // namespace mmkb
