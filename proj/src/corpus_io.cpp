#include "mmkb/corpus_io.hpp"

#include <regex>
#include <set>

#include "mmkb/error.hpp"

namespace mmkb {

using nlohmann::json;

RasterImage ImageTextPair::decode_image() const {
    try {
        return load_image(image_ref, base_dir);
    } catch (const DataError& e) {
        throw MissingImage(id, e.what());
    }
}

json to_json(const ImageTextPair& pair) {
    return json{{"id", pair.id}, {"image", pair.image_ref}, {"text", pair.text}};
}

namespace {

const std::string& require_string(const json& j, const char* key, std::size_t line_no) {
    const auto it = j.find(key);
    if (it == j.end()) throw MalformedRecord(line_no, std::string("missing key '") + key + "'");
    if (!it->is_string()) throw MalformedRecord(line_no, std::string("key '") + key + "' is not a string");
    return it->get_ref<const std::string&>();
}

json parse_line(const std::string& line, std::size_t line_no) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw MalformedRecord(line_no, "invalid JSON");
    if (!j.is_object()) throw MalformedRecord(line_no, "record is not a JSON object");
    return j;
}

} // namespace

ImageTextPair pair_from_json(const json& j, std::size_t line_no) {
    ImageTextPair pair;
    pair.id = require_string(j, "id", line_no);
    pair.image_ref = require_string(j, "image", line_no);
    pair.text = require_string(j, "text", line_no);
    if (pair.id.empty()) throw MalformedRecord(line_no, "empty id");
    if (pair.text.empty()) throw MalformedRecord(line_no, "empty text");
    return pair;
}

CorpusReader::CorpusReader(const std::filesystem::path& path) : in_(path), base_dir_(path.parent_path()) {
    if (!in_) throw DataError("cannot open corpus " + path.string());
}

std::optional<ImageTextPair> CorpusReader::next() {
    std::string line;
    if (!std::getline(in_, line)) return std::nullopt;
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto pair = pair_from_json(parse_line(line, line_no_), line_no_);
    pair.base_dir = base_dir_;
    return pair;
}

std::vector<ImageTextPair> read_corpus(const std::filesystem::path& path) {
    CorpusReader reader(path);
    std::vector<ImageTextPair> pairs;
    while (auto pair = reader.next()) pairs.push_back(std::move(*pair));
    return pairs;
}

void write_corpus(const std::filesystem::path& path, const std::vector<ImageTextPair>& pairs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& p : pairs) out << to_json(p).dump() << '\n';
}

json to_json(const EncyclopediaEntry& entry) {
    return json{{"concept", entry.concept_surface}, {"senses", entry.senses}};
}

Encyclopedia load_encyclopedia(const std::filesystem::path& path, const EncyclopediaOptions& options) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open encyclopedia " + path.string());
    std::optional<std::regex> drop;
    if (!options.drop_pattern.empty()) drop.emplace(options.drop_pattern, std::regex::ECMAScript);

    Encyclopedia enc;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const json j = parse_line(line, line_no);
        EncyclopediaEntry entry;
        entry.concept_surface = require_string(j, "concept", line_no);
        if (entry.concept_surface.empty()) throw MalformedRecord(line_no, "empty concept");
        const auto senses = j.find("senses");
        if (senses == j.end() || !senses->is_array()) throw MalformedRecord(line_no, "'senses' must be an array");
        if (senses->empty()) throw MalformedRecord(line_no, "'senses' is empty");
        for (const auto& s : *senses) {
            if (!s.is_string() || s.get_ref<const std::string&>().empty())
                throw MalformedRecord(line_no, "senses must be non-empty strings");
            entry.senses.push_back(s.get<std::string>());
        }
        if (!seen.insert(entry.concept_surface).second) {
            enc.warnings.push_back("duplicate concept '" + entry.concept_surface + "' at line " +
                                   std::to_string(line_no) + "; keeping the first occurrence");
            continue;
        }
        if (entry.senses.size() > kMaxSenses) {
            enc.warnings.push_back("SenseOverflow: '" + entry.concept_surface + "' has " +
                                   std::to_string(entry.senses.size()) + " senses at line " +
                                   std::to_string(line_no) + "; keeping the first 3");
            entry.senses.resize(kMaxSenses);
        }
        if (drop) {
            std::erase_if(entry.senses, [&](const std::string& s) { return std::regex_search(s, *drop); });
            if (entry.senses.empty()) {
                enc.warnings.push_back("all senses of '" + entry.concept_surface + "' at line " +
                                       std::to_string(line_no) + " matched the drop pattern");
                continue;
            }
        }
        auto key = entry.concept_surface;
        enc.entries.emplace(std::move(key), std::move(entry));
    }
    return enc;
}

void write_encyclopedia(const std::filesystem::path& path, const std::vector<EncyclopediaEntry>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& e : entries) out << to_json(e).dump() << '\n';
}

} // namespace mmkb
