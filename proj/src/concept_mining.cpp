#include "mmkb/concept_mining.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "mmkb/codec.hpp"
#include "mmkb/error.hpp"

namespace mmkb {

namespace {

bool is_ascii_alnum(char32_t c) {
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}

bool is_skippable(char32_t c) {
    if (c < 0x80) return !is_ascii_alnum(c); // whitespace, ASCII punctuation, control
    return c == 0x3000 || c == 0x3001 || c == 0x3002 || c == 0xFF0C || c == 0xFF01 || c == 0xFF1F ||
           c == 0xFF1A || c == 0xFF1B;
}

} // namespace

LexiconTokenizer::LexiconTokenizer(std::map<std::string, std::string> lexicon) {
    for (auto& [surface, pos] : lexicon) add(surface, pos);
}

void LexiconTokenizer::add(std::string surface, std::string pos) {
    if (surface.empty()) throw DataError("lexicon surface must be non-empty");
    auto decoded = utf8_decode(surface);
    max_len_ = std::max(max_len_, decoded.size());
    entries_[std::move(decoded)] = pos;
    lexicon_[std::move(surface)] = std::move(pos);
}

LexiconTokenizer LexiconTokenizer::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open lexicon " + path.string());
    LexiconTokenizer tok;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 == line.size())
            throw MalformedRecord(line_no, "lexicon line must be surface<TAB>pos");
        tok.add(line.substr(0, tab), line.substr(tab + 1));
    }
    return tok;
}

std::vector<std::pair<std::string, std::string>> LexiconTokenizer::tokenize(std::string_view text) const {
    const std::u32string cps = utf8_decode(text);
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t i = 0;
    while (i < cps.size()) {
        if (is_skippable(cps[i])) {
            ++i;
            continue;
        }
        std::size_t matched = 0;
        const std::string* pos = nullptr;
        const std::size_t limit = std::min(max_len_, cps.size() - i);
        for (std::size_t len = limit; len >= 1; --len) {
            const auto it = entries_.find(cps.substr(i, len));
            if (it == entries_.end()) continue;
            // Latin matches must end on a word boundary.
            if (is_ascii_alnum(cps[i + len - 1]) && i + len < cps.size() && is_ascii_alnum(cps[i + len])) continue;
            matched = len;
            pos = &it->second;
            break;
        }
        if (matched > 0) {
            out.emplace_back(utf8_encode(std::u32string_view(cps).substr(i, matched)), *pos);
            i += matched;
        } else if (is_ascii_alnum(cps[i])) {
            std::size_t j = i;
            while (j < cps.size() && is_ascii_alnum(cps[j])) ++j;
            out.emplace_back(utf8_encode(std::u32string_view(cps).substr(i, j - i)), "eng");
            i = j;
        } else {
            out.emplace_back(utf8_encode(cps[i]), "x");
            ++i;
        }
    }
    return out;
}

DualTokenization tokenize_dual(std::string_view text, const Tokenizer& fine, const Tokenizer& compound) {
    DualTokenization result;
    int failures = 0;
    std::string last_error;
    const auto run = [&](const Tokenizer& t, TokenSource source, const char* name) {
        try {
            for (auto& [surface, pos] : t.tokenize(text)) {
                if (surface.empty()) continue;
                result.tokens.push_back(Token{std::move(surface), std::move(pos), source});
            }
        } catch (const std::exception& e) {
            ++failures;
            last_error = std::string("TokenizerFailure(") + name + "): " + e.what();
            result.warnings.push_back(last_error);
        }
    };
    run(fine, TokenSource::Fine, "FINE");
    run(compound, TokenSource::Compound, "COMPOUND");
    if (failures == 2) throw TokenizerFailure(last_error);
    return result;
}

Script classify_script(std::string_view surface) {
    return std::all_of(surface.begin(), surface.end(), [](char c) { return static_cast<unsigned char>(c) < 0x80; })
               ? Script::Latin
               : Script::Native;
}

void FrequencyTable::add(const Token& token) { add(token.surface, token.pos); }

void FrequencyTable::add(std::string_view surface, std::string_view pos, std::uint64_t times) {
    if (times == 0) return;
    auto [it, inserted] = entries_.try_emplace(std::string(surface));
    if (inserted) it->second.script = classify_script(surface);
    it->second.count += times;
    it->second.pos_tags[std::string(pos)] += times;
    total_ += times;
}

FrequencyTable& FrequencyTable::merge(const FrequencyTable& other) {
    for (const auto& [surface, entry] : other.entries_) {
        auto [it, inserted] = entries_.try_emplace(surface);
        if (inserted) it->second.script = entry.script;
        it->second.count += entry.count;
        for (const auto& [pos, n] : entry.pos_tags) it->second.pos_tags[pos] += n;
    }
    total_ += other.total_;
    return *this;
}

const FrequencyEntry* FrequencyTable::find(const std::string& surface) const {
    const auto it = entries_.find(surface);
    return it == entries_.end() ? nullptr : &it->second;
}

FrequencyTable accumulate(const std::vector<Token>& tokens) {
    FrequencyTable table;
    for (const auto& t : tokens) table.add(t);
    return table;
}

FrequencyTable merge(FrequencyTable a, const FrequencyTable& b) {
    a.merge(b);
    return a;
}

void MiningConfig::validate() const {
    if (noun_tags.empty()) throw DataError("MiningConfig: noun tag set is empty");
}

std::string dominant_pos(const FrequencyEntry& entry) {
    std::string best;
    std::uint64_t best_n = 0;
    for (const auto& [pos, n] : entry.pos_tags) { // map order = lexicographic, so strict > keeps the smallest
        if (n > best_n) {
            best = pos;
            best_n = n;
        }
    }
    return best;
}

std::vector<CandidateConcept> filter_candidates(const FrequencyTable& table, const MiningConfig& cfg) {
    cfg.validate();
    const auto by_freq = [](const CandidateConcept& a, const CandidateConcept& b) {
        return a.freq != b.freq ? a.freq > b.freq : a.surface < b.surface;
    };

    std::vector<CandidateConcept> kept;
    std::vector<CandidateConcept> latin_nz;
    for (const auto& [surface, entry] : table.entries()) {
        const std::string pos = dominant_pos(entry);
        if (!cfg.noun_tags.contains(pos)) continue;
        if (entry.count < cfg.min_freq) continue;
        if (utf8_length(surface) > cfg.max_len) continue;

        CandidateConcept c{surface, entry.count, pos};
        const bool latin = entry.script == Script::Latin;
        if (latin && pos == "nz") {
            latin_nz.push_back(std::move(c));
            continue;
        }
        if (const auto th = cfg.compound_thresholds.find(pos); th != cfg.compound_thresholds.end()) {
            if (entry.count >= th->second) kept.push_back(std::move(c));
            continue;
        }
        kept.push_back(std::move(c));
    }

    std::sort(latin_nz.begin(), latin_nz.end(), by_freq);
    if (latin_nz.size() > cfg.latin_nz_top_k) latin_nz.resize(cfg.latin_nz_top_k);
    kept.insert(kept.end(), latin_nz.begin(), latin_nz.end());
    std::sort(kept.begin(), kept.end(), by_freq);
    return kept;
}

void write_candidates_tsv(std::ostream& out, const std::vector<CandidateConcept>& candidates) {
    for (const auto& c : candidates) out << c.surface << '\t' << c.freq << '\t' << c.dominant_pos << '\n';
}

std::vector<CandidateConcept> read_candidates_tsv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open candidates " + path.string());
    std::vector<CandidateConcept> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream fields(line);
        CandidateConcept c;
        std::string freq;
        if (!std::getline(fields, c.surface, '\t') || !std::getline(fields, freq, '\t') ||
            !std::getline(fields, c.dominant_pos) || c.surface.empty())
            throw MalformedRecord(line_no, "candidate line must be surface<TAB>freq<TAB>pos");
        try {
            c.freq = std::stoull(freq);
        } catch (const std::logic_error&) {
            throw MalformedRecord(line_no, "bad frequency '" + freq + "'");
        }
        out.push_back(std::move(c));
    }
    return out;
}

} // namespace mmkb
