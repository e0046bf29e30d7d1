#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mmkb {

enum class TokenSource { Fine, Compound };

struct Token {
    std::string surface;
    std::string pos;
    TokenSource source = TokenSource::Fine;

    friend bool operator==(const Token&, const Token&) = default;
};

/// Backend contract shared by both tokenizers: text -> [(surface, pos)].
class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual std::vector<std::pair<std::string, std::string>> tokenize(std::string_view text) const = 0;
};

/// Deterministic longest-match tokenizer over a fixed lexicon (surface -> POS).
/// Unmatched ASCII alphanumeric runs become one token tagged "eng"; any other
/// unmatched non-space scalar value becomes a single-character token tagged "x".
/// Whitespace and ASCII punctuation are skipped.
class LexiconTokenizer : public Tokenizer {
public:
    LexiconTokenizer() = default;
    explicit LexiconTokenizer(std::map<std::string, std::string> lexicon);

    /// Reads TSV lines `surface<TAB>pos`.
    static LexiconTokenizer from_file(const std::filesystem::path& path);

    std::vector<std::pair<std::string, std::string>> tokenize(std::string_view text) const override;

    void add(std::string surface, std::string pos);
    const std::map<std::string, std::string>& lexicon() const { return lexicon_; }

private:
    std::map<std::u32string, std::string> entries_;
    std::map<std::string, std::string> lexicon_;
    std::size_t max_len_ = 0;
};

struct DualTokenization {
    std::vector<Token> tokens;
    std::vector<std::string> warnings;
};

/// Multiset union of both tokenizers' outputs, FINE tokens first. If one backend
/// throws, the other's tokens are still returned and a TokenizerFailure warning is
/// recorded; if both throw, TokenizerFailure propagates.
DualTokenization tokenize_dual(std::string_view text, const Tokenizer& fine, const Tokenizer& compound);

enum class Script { Native, Latin };

/// Latin when every scalar value is ASCII, Native otherwise.
Script classify_script(std::string_view surface);

struct FrequencyEntry {
    std::uint64_t count = 0;
    std::map<std::string, std::uint64_t> pos_tags; // multiset of observed tags
    Script script = Script::Native;

    friend bool operator==(const FrequencyEntry&, const FrequencyEntry&) = default;
};

class FrequencyTable {
public:
    void add(const Token& token);
    void add(std::string_view surface, std::string_view pos, std::uint64_t times = 1);

    /// Monoid merge: commutative, associative, empty table is the identity.
    FrequencyTable& merge(const FrequencyTable& other);

    std::uint64_t total() const { return total_; }
    const std::map<std::string, FrequencyEntry>& entries() const { return entries_; }
    const FrequencyEntry* find(const std::string& surface) const;

    friend bool operator==(const FrequencyTable&, const FrequencyTable&) = default;

private:
    std::map<std::string, FrequencyEntry> entries_;
    std::uint64_t total_ = 0;
};

FrequencyTable accumulate(const std::vector<Token>& tokens);
FrequencyTable merge(FrequencyTable a, const FrequencyTable& b);

struct MiningConfig {
    std::uint64_t min_freq = 15;
    std::size_t max_len = 5; // Unicode scalar values
    std::size_t latin_nz_top_k = 50;
    std::map<std::string, std::uint64_t> compound_thresholds{{"ns", 3000}, {"nt", 400}, {"nw", 300}};
    std::set<std::string> noun_tags{"n", "nz", "ns", "nt", "nw", "latin-n"};

    void validate() const;
};

struct CandidateConcept {
    std::string surface;
    std::uint64_t freq = 0;
    std::string dominant_pos;

    friend bool operator==(const CandidateConcept&, const CandidateConcept&) = default;
};

/// Most frequent tag; ties go to the lexicographically smallest.
std::string dominant_pos(const FrequencyEntry& entry);

/// Applies the POS, frequency, length and supplementary compound filters.
/// Output sorted by (-freq, surface).
std::vector<CandidateConcept> filter_candidates(const FrequencyTable& table, const MiningConfig& cfg);

/// TSV `surface<TAB>freq<TAB>dominant_pos`, one per line, in the given order.
void write_candidates_tsv(std::ostream& out, const std::vector<CandidateConcept>& candidates);
std::vector<CandidateConcept> read_candidates_tsv(const std::filesystem::path& path);

} // namespace mmkb
