#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmkb/raster.hpp"

namespace mmkb {

/// One corpus record. The image is decoded lazily from image_ref.
struct ImageTextPair {
    std::string id;
    std::string image_ref;
    std::string text;
    std::filesystem::path base_dir; // resolves relative image paths; not serialized

    /// Throws MissingImage when the reference cannot be decoded.
    RasterImage decode_image() const;

    bool operator==(const ImageTextPair& o) const {
        return id == o.id && image_ref == o.image_ref && text == o.text;
    }
};

nlohmann::json to_json(const ImageTextPair& pair);
/// Throws MalformedRecord(line_no) when keys are missing, mistyped or empty.
ImageTextPair pair_from_json(const nlohmann::json& j, std::size_t line_no);

/// Streams a newline-delimited JSON corpus. Holds one line in memory at a time.
class CorpusReader {
public:
    explicit CorpusReader(const std::filesystem::path& path);

    /// Next record in file order, or nullopt at end of file.
    std::optional<ImageTextPair> next();
    std::size_t line_no() const { return line_no_; }

private:
    std::ifstream in_;
    std::filesystem::path base_dir_;
    std::size_t line_no_ = 0;
};

std::vector<ImageTextPair> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const std::vector<ImageTextPair>& pairs);

inline constexpr std::size_t kMaxSenses = 3;

struct EncyclopediaEntry {
    std::string concept_surface;
    std::vector<std::string> senses; // 1..3, dump order

    friend bool operator==(const EncyclopediaEntry&, const EncyclopediaEntry&) = default;
};

nlohmann::json to_json(const EncyclopediaEntry& entry);

struct EncyclopediaOptions {
    /// Senses matching this ECMAScript regex are dropped at load time. Empty disables.
    /// Default removes entity-style descriptions quoting titles in book title marks.
    std::string drop_pattern = "《.*》";
};

struct Encyclopedia {
    std::map<std::string, EncyclopediaEntry> entries;
    std::vector<std::string> warnings;

    const EncyclopediaEntry* find(const std::string& surface) const {
        const auto it = entries.find(surface);
        return it == entries.end() ? nullptr : &it->second;
    }
};

/// Loads {"concept": str, "senses": [str, ...]} lines. Duplicates keep the first
/// occurrence; more than three senses are truncated. Both cases add a warning.
Encyclopedia load_encyclopedia(const std::filesystem::path& path, const EncyclopediaOptions& options = {});
void write_encyclopedia(const std::filesystem::path& path, const std::vector<EncyclopediaEntry>& entries);

} // namespace mmkb
