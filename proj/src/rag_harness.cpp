#include "mmkb/rag_harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "mmkb/codec.hpp"
#include "mmkb/concept_mining.hpp"
#include "mmkb/error.hpp"

namespace mmkb {

using nlohmann::json;

namespace {

constexpr double kUnitTolerance = 1e-6;

std::string render_descriptions(const ConceptDescriptions& descs) {
    if (descs.empty()) return "(none)";
    std::string out;
    for (const auto& [c, d] : descs) {
        if (!out.empty()) out += "; ";
        out += c + ": " + d;
    }
    return out;
}

double percent(std::uint64_t count, std::uint64_t n) { return ratio_half_up(100 * count, n, 1); }

template <class F>
void for_each_json_line(const std::filesystem::path& path, F&& f) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw MalformedRecord(line_no, "invalid JSON object");
        try {
            f(j, line_no);
        } catch (const json::exception& e) {
            throw MalformedRecord(line_no, e.what());
        }
    }
}

} // namespace

VectorIndex::VectorIndex(std::vector<IndexEntry> entries) {
    for (auto& e : entries) add(std::move(e));
}

void VectorIndex::add(IndexEntry entry) {
    if (entry.embedding.size() == 0) throw DataError("index entry has an empty embedding");
    if (!entries_.empty() && entry.embedding.size() != dim())
        throw DataError("index entry dimension " + std::to_string(entry.embedding.size()) + " != " +
                        std::to_string(dim()));
    if (!entry.embedding.allFinite() || std::abs(entry.embedding.norm() - 1.0) > kUnitTolerance)
        throw DataError("index entry embedding for '" + entry.label + "' is not unit norm");
    entries_.push_back(std::move(entry));
}

std::size_t VectorIndex::nearest(const Eigen::Ref<const Eigen::VectorXd>& query) const {
    if (entries_.empty()) throw EmptyIndex("retrieval from an empty index");
    if (query.size() != dim()) throw ShapeMismatch("query dimension does not match the index");
    std::size_t best = 0;
    double best_score = entries_[0].embedding.dot(query);
    for (std::size_t i = 1; i < entries_.size(); ++i) {
        const double s = entries_[i].embedding.dot(query);
        if (s > best_score || (s == best_score && entries_[i].label < entries_[best].label)) {
            best = i;
            best_score = s;
        }
    }
    return best;
}

void write_index(const VectorIndex& index, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& e : index.entries()) {
        json emb = json::array();
        for (Eigen::Index i = 0; i < e.embedding.size(); ++i) emb.push_back(e.embedding[i]);
        out << json{{"label", e.label}, {"image_ref", e.image_ref}, {"embedding", std::move(emb)}}.dump() << '\n';
    }
}

VectorIndex read_index(const std::filesystem::path& path) {
    VectorIndex index;
    for_each_json_line(path, [&](const json& j, std::size_t) {
        const auto values = j.at("embedding").get<std::vector<double>>();
        IndexEntry e{Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())),
                     j.at("label").get<std::string>(), j.at("image_ref").get<std::string>()};
        index.add(std::move(e));
    });
    return index;
}

VectorIndex build_index(const std::map<std::string, ConceptNode>& kb, EncoderBackend& backend,
                        const std::filesystem::path& image_base, std::size_t max_images_per_concept,
                        std::vector<std::string>* warnings) {
    VectorIndex index;
    for (const auto& [surface, node] : kb) {
        std::vector<const ImageEntry*> images;
        for (const auto& img : node.images) images.push_back(&img);
        std::sort(images.begin(), images.end(), [](const ImageEntry* a, const ImageEntry* b) {
            if (a->match_score != b->match_score) return a->match_score > b->match_score;
            return a->pair_id < b->pair_id;
        });
        if (images.size() > max_images_per_concept) images.resize(max_images_per_concept);
        for (const auto* img : images) {
            try {
                Eigen::VectorXd v = backend.embed(load_image(img->image_ref, image_base));
                const double norm = v.norm();
                if (!(norm > 0.0) || !std::isfinite(norm)) throw DataError("degenerate embedding");
                index.add({v / norm, surface, img->image_ref});
            } catch (const std::exception& e) {
                if (warnings) warnings->push_back("skipped " + img->pair_id + " for '" + surface + "': " + e.what());
            }
        }
    }
    return index;
}

std::string retrieve_concept(const VectorIndex& index, const RasterImage& query, EncoderBackend& backend) {
    if (index.empty()) throw EmptyIndex("retrieval from an empty index");
    Eigen::VectorXd q = backend.embed(query);
    const double norm = q.norm();
    if (norm > 0.0) q /= norm;
    return index.entries()[index.nearest(q)].label;
}

std::string build_vcr_prompt(std::string_view concept_surface) {
    return "The retrieved result shows a " + std::string(concept_surface) + " in the image. What is it?";
}

std::string build_vckdg_prompt(std::string_view concept_surface, std::string_view description) {
    return "According to the retrieved conceptual knowledge: " + std::string(concept_surface) + ": " +
           std::string(description) +
           ". Please provide a detailed introduction to the background knowledge related to the visual concept.";
}

std::string build_okvqa_prompt(std::string_view question, std::string_view original_answer,
                               const ConceptDescriptions& answer_concept_descs,
                               const ConceptDescriptions& question_concept_descs,
                               const std::optional<ConceptDescriptions>& tag_concept_descs) {
    std::string p = "Your task is to reanswer the following question based on the original answer:\n";
    p += "- Question: " + std::string(question) + "\n";
    p += "- Original Answer: " + std::string(original_answer) + "\n";
    p += "Here is some concept knowledge you can refer to:\n";
    p += "- The answer contains the following concepts: " + render_descriptions(answer_concept_descs) + "\n";
    p += "- The question contains the following concepts: " + render_descriptions(question_concept_descs) + "\n";
    if (tag_concept_descs)
        p += "- The image contains the following concepts: " + render_descriptions(*tag_concept_descs) + "\n";
    p += "Hint: If you think the original answer is incorrect based on the concept knowledge, try to give the correct "
         "answer directly. If it is correct, just repeat the original answer.\n";
    p += "Output Format: A short answer, no explanation, no other output.\n";
    p += "Your Answer:";
    return p;
}

ConceptDescriptions lookup_concepts(std::string_view text, const std::map<std::string, ConceptNode>& kb) {
    std::map<std::string, const ConceptNode*> folded;
    for (const auto& [surface, node] : kb) {
        if (!node.senses.empty()) folded.emplace(ascii_lower(surface), &node);
    }
    std::map<std::string, std::string> lexicon;
    for (const auto& [key, node] : folded) lexicon.emplace(key, "kb");
    const LexiconTokenizer tokenizer(std::move(lexicon));

    ConceptDescriptions out;
    std::set<std::string> seen;
    for (const auto& [surface, pos] : tokenizer.tokenize(ascii_lower(text))) {
        const auto it = folded.find(surface);
        if (it == folded.end() || !seen.insert(surface).second) continue;
        out.emplace_back(it->second->surface, it->second->senses.front().text);
    }
    return out;
}

json to_json(const EvalResult& r) { return json{{"metric", r.metric}, {"value", r.value}, {"n", r.n}}; }

EvalResult eval_result_from_json(const json& j) {
    EvalResult r{j.at("metric").get<std::string>(), j.at("value").get<double>(), j.at("n").get<std::size_t>()};
    if (r.value < 0.0 || r.value > 100.0) throw DataError("eval value out of range");
    return r;
}

std::string normalize_answer(std::string_view s) { return ascii_lower(trim(s)); }

EvalResult exact_match_accuracy(std::span<const std::string> preds, std::span<const std::string> golds) {
    if (preds.size() != golds.size())
        throw LengthMismatch(std::to_string(preds.size()) + " predictions vs " + std::to_string(golds.size()) +
                             " gold labels");
    if (preds.empty()) throw EmptyInput("no predictions to score");
    std::uint64_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (normalize_answer(preds[i]) == normalize_answer(golds[i])) ++correct;
    }
    return EvalResult{"exact_match", percent(correct, preds.size()), preds.size()};
}

namespace {

std::uint64_t agreeing(std::string_view answer, std::span<const std::string> gold) {
    const auto a = normalize_answer(answer);
    const auto k = static_cast<std::uint64_t>(
        std::count_if(gold.begin(), gold.end(), [&](const std::string& g) { return normalize_answer(g) == a; }));
    return std::min<std::uint64_t>(k, 3);
}

} // namespace

double soft_accuracy(std::string_view answer, std::span<const std::string> gold_annotations) {
    return static_cast<double>(agreeing(answer, gold_annotations)) / 3.0;
}

Judgment parse_judgment_label(std::string_view s) {
    const auto t = normalize_answer(s);
    if (t == "win") return Judgment::Win;
    if (t == "lose") return Judgment::Lose;
    if (t == "tie") return Judgment::Tie;
    throw DataError("unknown judgment '" + std::string(s) + "'");
}

WinRate win_rate(std::span<const Judgment> judgments) {
    if (judgments.empty()) throw EmptyInput("no judgments");
    std::uint64_t w = 0, l = 0, t = 0;
    for (const auto j : judgments) {
        if (j == Judgment::Win) ++w;
        else if (j == Judgment::Lose) ++l;
        else ++t;
    }
    const auto n = judgments.size();
    return WinRate{percent(w, n), percent(l, n), percent(t, n)};
}

json to_json(const VqaSample& s) {
    return json{{"question", s.question},
                {"gold_annotations", s.gold_annotations},
                {"image_tags", s.image_tags},
                {"original_answer", s.original_answer}};
}

VqaSample vqa_sample_from_json(const json& j, std::size_t line_no) {
    VqaSample s;
    try {
        s.question = j.at("question").get<std::string>();
        s.gold_annotations = j.at("gold_annotations").get<std::vector<std::string>>();
        if (j.contains("image_tags")) s.image_tags = j.at("image_tags").get<std::vector<std::string>>();
        s.original_answer = j.at("original_answer").get<std::string>();
    } catch (const json::exception& e) {
        throw MalformedRecord(line_no, e.what());
    }
    if (s.gold_annotations.size() != 10) throw MalformedRecord(line_no, "gold_annotations must hold 10 answers");
    return s;
}

std::vector<VqaSample> read_vqa_samples(const std::filesystem::path& path) {
    std::vector<VqaSample> out;
    for_each_json_line(path, [&](const json& j, std::size_t line_no) { out.push_back(vqa_sample_from_json(j, line_no)); });
    return out;
}

std::vector<VcrSample> read_vcr_samples(const std::filesystem::path& path) {
    std::vector<VcrSample> out;
    for_each_json_line(path, [&](const json& j, std::size_t) {
        out.push_back({j.at("query_image").get<std::string>(), j.at("gold_concept").get<std::string>()});
    });
    return out;
}

std::vector<EvalResult> evaluate_okvqa(const std::vector<VqaSample>& samples,
                                       const std::map<std::string, ConceptNode>& kb, LlmBackend& llm,
                                       const VqaEvalOptions& opts) {
    if (samples.empty()) throw EmptyInput("no VQA samples");
    std::uint64_t base = 0;
    std::uint64_t refined = 0;
    for (const auto& s : samples) {
        std::optional<ConceptDescriptions> tags;
        if (opts.include_tag_concepts) {
            std::string joined;
            for (const auto& t : s.image_tags) joined += t + " ";
            tags = lookup_concepts(joined, kb);
        }
        const auto prompt = build_okvqa_prompt(s.question, s.original_answer, lookup_concepts(s.original_answer, kb),
                                               lookup_concepts(s.question, kb), tags);
        base += agreeing(s.original_answer, s.gold_annotations);
        refined += agreeing(llm.generate(prompt), s.gold_annotations);
    }
    const auto n = samples.size();
    return {EvalResult{"soft_accuracy_original", ratio_half_up(100 * base, 3 * n, 1), n},
            EvalResult{"soft_accuracy_refined", ratio_half_up(100 * refined, 3 * n, 1), n}};
}

EvalResult evaluate_vcr(const std::vector<VcrSample>& samples, const VectorIndex& index, EncoderBackend& backend,
                        const std::filesystem::path& image_base) {
    std::vector<std::string> preds;
    std::vector<std::string> golds;
    for (const auto& s : samples) {
        preds.push_back(retrieve_concept(index, load_image(s.query_image, image_base), backend));
        golds.push_back(s.gold_concept);
    }
    auto r = exact_match_accuracy(preds, golds);
    r.metric = "vcr_exact_match";
    return r;
}

} // namespace mmkb
