#include "mmkb/kb_store.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "mmkb/codec.hpp"
#include "mmkb/error.hpp"

namespace mmkb {

using nlohmann::json;

namespace {

const char* to_string(SenseSource s) { return s == SenseSource::Encyclopedia ? "ENCYCLOPEDIA" : "GENERATED"; }

SenseSource parse_source(const std::string& s) {
    if (s == "ENCYCLOPEDIA") return SenseSource::Encyclopedia;
    if (s == "GENERATED") return SenseSource::Generated;
    throw DataError("unknown sense source '" + s + "'");
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
    return v;
}

double avg2(std::uint64_t num, std::uint64_t den) { return den == 0 ? 0.0 : ratio_half_up(num, den, 2); }

} // namespace

void ConceptNode::validate() const {
    if (surface.empty()) throw DataError("concept node has an empty surface");
    if (senses.empty() && images.empty()) throw DataError("concept node '" + surface + "' is empty");
    for (const auto& s : senses) {
        if (s.sense_index < 1 || s.sense_index > 3) throw DataError("sense index out of range for '" + surface + "'");
        if (s.text.empty()) throw DataError("empty sense text for '" + surface + "'");
    }
    for (const auto& i : images) {
        if (!std::isfinite(i.match_score)) throw DataError("non-finite match score for '" + surface + "'");
    }
}

json to_json(const ConceptNode& node) {
    json senses = json::array();
    for (const auto& s : node.senses)
        senses.push_back({{"text", s.text}, {"source", to_string(s.source)}, {"sense_index", s.sense_index}});
    json images = json::array();
    for (const auto& i : node.images)
        images.push_back({{"pair_id", i.pair_id},
                          {"image_ref", i.image_ref},
                          {"weight_map_ref", i.weight_map_ref},
                          {"match_score", i.match_score}});
    return json{{"concept", node.surface}, {"senses", std::move(senses)}, {"images", std::move(images)}};
}

ConceptNode concept_node_from_json(const json& j) {
    ConceptNode node;
    try {
        node.surface = j.at("concept").get<std::string>();
        for (const auto& s : j.at("senses"))
            node.senses.push_back({s.at("text").get<std::string>(), parse_source(s.at("source").get<std::string>()),
                                   s.at("sense_index").get<int>()});
        for (const auto& i : j.at("images"))
            node.images.push_back({i.at("pair_id").get<std::string>(), i.at("image_ref").get<std::string>(),
                                   i.at("weight_map_ref").get<std::string>(), i.at("match_score").get<double>()});
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed concept node: ") + e.what());
    }
    node.validate();
    return node;
}

json to_json(const KbStats& s) {
    json hist = json::object();
    for (const auto& [k, n] : s.histogram) hist[std::to_string(k)] = n;
    hist[">" + std::to_string(kHistogramMax)] = s.histogram_overflow;
    return json{{"concept_count", s.concept_count},
                {"image_count", s.image_count},
                {"avg_images_per_concept", s.avg_images_per_concept},
                {"polysemous_count", s.polysemous_count},
                {"histogram", std::move(hist)},
                {"description_count", s.description_count},
                {"avg_description_scalars", s.avg_description_scalars},
                {"avg_description_words", s.avg_description_words}};
}

std::size_t count_words(std::string_view text) {
    std::size_t words = 0;
    bool in_word = false;
    for (char c : text) {
        const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
        if (!space && !in_word) ++words;
        in_word = !space;
    }
    return words;
}

KbStats make_stats(const std::vector<std::uint64_t>& images_per_concept,
                   const std::vector<std::uint64_t>& senses_per_concept, std::uint64_t description_scalars,
                   std::uint64_t description_words, std::uint64_t description_count) {
    KbStats s;
    s.concept_count = images_per_concept.size();
    for (const auto n : images_per_concept) {
        s.image_count += n;
        if (n == 0) continue;
        if (n > static_cast<std::uint64_t>(kHistogramMax)) {
            ++s.histogram_overflow;
        } else {
            ++s.histogram[static_cast<int>(n)];
        }
    }
    for (const auto n : senses_per_concept) {
        if (n > 1) ++s.polysemous_count;
    }
    s.avg_images_per_concept = avg2(s.image_count, s.concept_count);
    s.description_count = description_count;
    s.avg_description_scalars = avg2(description_scalars, description_count);
    s.avg_description_words = avg2(description_words, description_count);
    return s;
}

KbStats stats(const std::map<std::string, ConceptNode>& kb) {
    std::vector<std::uint64_t> images;
    std::vector<std::uint64_t> senses;
    std::uint64_t scalars = 0;
    std::uint64_t words = 0;
    std::uint64_t descriptions = 0;
    for (const auto& [surface, node] : kb) {
        images.push_back(node.images.size());
        senses.push_back(node.senses.size());
        for (const auto& s : node.senses) {
            scalars += utf8_length(s.text);
            words += count_words(s.text);
            ++descriptions;
        }
    }
    return make_stats(images, senses, scalars, words, descriptions);
}

void KbBuilder::upsert(const SenseFragment& f) {
    if (f.concept_surface.empty() || f.text.empty()) throw DataError("sense fragment needs a concept and text");
    if (f.sense_index < 1 || f.sense_index > 3) throw DataError("sense index must be in 1..3");
    auto& slots = senses_[f.concept_surface];
    const auto it = slots.find(f.sense_index);
    if (it != slots.end()) {
        if (it->second.text != f.text || it->second.source != f.source)
            throw ConflictingSense("conflicting texts for sense " + std::to_string(f.sense_index) + " of '" +
                                   f.concept_surface + "'");
        return;
    }
    slots.emplace(f.sense_index, SenseEntry{f.text, f.source, f.sense_index});
    description_scalars_ += utf8_length(f.text);
    description_words_ += count_words(f.text);
}

void KbBuilder::upsert(const ImageFragment& f) {
    if (f.concept_surface.empty() || f.pair_id.empty()) throw DataError("image fragment needs a concept and pair id");
    if (!std::isfinite(f.match_score)) throw DataError("image fragment score must be finite");
    auto& slots = images_[f.concept_surface];
    const auto it = slots.find(f.pair_id);
    if (it == slots.end()) {
        slots.emplace(f.pair_id, f);
    } else if (f.match_score > it->second.match_score) {
        it->second = f;
    }
}

void KbBuilder::upsert(const Fragment& f) {
    std::visit([this](const auto& frag) { upsert(frag); }, f);
}

KbStats KbBuilder::running_stats() const {
    std::set<std::string> concepts;
    for (const auto& [c, _] : senses_) concepts.insert(c);
    for (const auto& [c, _] : images_) concepts.insert(c);
    std::vector<std::uint64_t> images;
    std::vector<std::uint64_t> senses;
    std::uint64_t descriptions = 0;
    for (const auto& c : concepts) {
        const auto i = images_.find(c);
        const auto s = senses_.find(c);
        images.push_back(i == images_.end() ? 0 : i->second.size());
        senses.push_back(s == senses_.end() ? 0 : s->second.size());
        descriptions += senses.back();
    }
    return make_stats(images, senses, description_scalars_, description_words_, descriptions);
}

std::string weight_map_filename(const std::string& pair_id, const std::string& concept_surface) {
    std::string safe;
    for (char c : pair_id) {
        const bool ok = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '-' ||
                        c == '_' || c == '.';
        safe.push_back(ok ? c : '_');
    }
    return safe + "__" + sha256_hex(concept_surface).substr(0, 16) + ".cwm";
}

std::map<std::string, ConceptNode> KbBuilder::nodes() const {
    std::map<std::string, ConceptNode> out;
    for (const auto& [c, slots] : senses_) {
        auto& node = out[c];
        node.surface = c;
        for (const auto& [idx, s] : slots) node.senses.push_back(s);
    }
    for (const auto& [c, slots] : images_) {
        auto& node = out[c];
        node.surface = c;
        for (const auto& [pair_id, f] : slots)
            node.images.push_back({pair_id, f.image_ref, "weights/" + weight_map_filename(pair_id, c), f.match_score});
    }
    return out;
}

void KbBuilder::finalize(const std::filesystem::path& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    fs::remove_all(dir / "weights");
    fs::remove_all(dir / "images");
    fs::create_directories(dir / "weights");
    fs::create_directories(dir / "images");

    const auto all = nodes();
    std::ofstream concepts(dir / "concepts.jsonl", std::ios::binary | std::ios::trunc);
    std::ofstream manifest(dir / "images" / "manifest.jsonl", std::ios::binary | std::ios::trunc);
    if (!concepts || !manifest) throw DataError("cannot write KB files under " + dir.string());
    for (const auto& [surface, node] : all) {
        node.validate();
        concepts << to_json(node).dump() << '\n';
        for (const auto& img : node.images) {
            manifest << json{{"concept", surface},
                             {"pair_id", img.pair_id},
                             {"image_ref", img.image_ref},
                             {"weight_map_ref", img.weight_map_ref}}
                            .dump()
                     << '\n';
            write_weight_map(images_.at(surface).at(img.pair_id).weight_map, dir / img.weight_map_ref);
        }
    }
}

std::vector<std::uint8_t> encode_weight_map(const WeightMap& map) {
    std::vector<std::uint8_t> out{'C', 'W', 'M', '1'};
    put_u32(out, static_cast<std::uint32_t>(map.width()));
    put_u32(out, static_cast<std::uint32_t>(map.height()));
    out.reserve(out.size() + static_cast<std::size_t>(map.w.size()) * 4);
    for (Eigen::Index i = 0; i < map.w.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(map.w.data()[i]));
    return out;
}

WeightMap decode_weight_map(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 || bytes[0] != 'C' || bytes[1] != 'W' || bytes[2] != 'M' || bytes[3] != '1')
        throw BadMagic("weight map does not start with CWM1");
    if (bytes.size() < 12) throw TruncatedFile("weight map header is truncated");
    const std::uint64_t width = get_u32(bytes, 4);
    const std::uint64_t height = get_u32(bytes, 8);
    const std::uint64_t expected = 12 + width * height * 4;
    if (bytes.size() < expected)
        throw TruncatedFile("weight map promises " + std::to_string(expected) + " bytes, file has " +
                            std::to_string(bytes.size()));
    WeightMap map(static_cast<int>(width), static_cast<int>(height));
    for (std::uint64_t i = 0; i < width * height; ++i)
        map.w.data()[i] = std::bit_cast<float>(get_u32(bytes, 12 + i * 4));
    return map;
}

void write_weight_map(const WeightMap& map, const std::filesystem::path& path) {
    const auto bytes = encode_weight_map(map);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

WeightMap read_weight_map(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode_weight_map(bytes);
}

std::map<std::string, ConceptNode> read_kb(const std::filesystem::path& dir) {
    std::ifstream in(dir / "concepts.jsonl");
    if (!in) throw DataError("no concepts.jsonl under " + dir.string());
    std::map<std::string, ConceptNode> kb;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw MalformedRecord(line_no, "invalid JSON in concepts.jsonl");
        auto node = concept_node_from_json(j);
        auto key = node.surface;
        kb.emplace(std::move(key), std::move(node));
    }
    return kb;
}

} // namespace mmkb
