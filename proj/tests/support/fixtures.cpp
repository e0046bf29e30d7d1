#include "fixtures.hpp"

#include <atomic>
#include <fstream>
#include <stdexcept>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "mmkb/codec.hpp"
#include "mmkb/error.hpp"
#include "mmkb/corpus_io.hpp"

namespace mmkb::testing {

using nlohmann::json;

namespace {

struct MiniPair {
    const char* id;
    const char* text;
};

constexpr MiniPair kPairs[] = {
    {"p01", "一只小狗在草地上吃苹果"},
    {"p02", "红苹果和香蕉"},
    {"p03", "a pug on the grass"},
    {"p04", "北京故宫的红色屋顶"},
    {"p05", "故宫博物院里的猫"},
    {"p06", "corgi and pug playing frisbee"},
    {"p07", "香蕉和苹果"},
    {"p08", "猫在屋顶上"},
    {"p09", "sheep dog on the grass"},
    {"p10", "一只猫和一只小狗"},
    {"p11", "pug 吃 香蕉"},
    {"p12", "故宫博物院 北京"},
};

constexpr const char* kFine = R"(# fine-grained lexicon
苹果	n
香蕉	n
小狗	n
猫	n
草地	n
屋顶	n
北京	ns
故宫	ns
红色	a
一只	m
吃	v
和	c
在	p
的	uj
里	f
上	f
pug	nz
corgi	nz
grass	n
frisbee	n
sheep	n
dog	n
)";

constexpr const char* kCompound = R"(# compound lexicon
红苹果	n
苹果	n
香蕉	n
小狗	n
猫	n
草地	n
屋顶	n
北京故宫	ns
故宫博物院	nt
北京	ns
pug	nz
corgi	nz
sheep dog	n
grass	n
frisbee	n
)";

struct MiniSense {
    const char* concept_surface;
    std::vector<std::string> senses;
};

const std::vector<MiniSense>& mini_encyclopedia() {
    static const std::vector<MiniSense> senses = {
        {"苹果", {"苹果是蔷薇科苹果属的落叶乔木的果实", "苹果公司, 一家科技企业", "《苹果》, 一部电影"}},
        {"香蕉", {"香蕉是芭蕉科芭蕉属植物的果实"}},
        {"小狗", {"幼年的狗", "《小狗》, 一首歌曲"}},
        {"猫", {"猫是猫科猫属的小型食肉哺乳动物"}},
        {"草地", {"长满草的一片土地"}},
        {"屋顶", {"房屋顶部的外部结构", "屋顶花园的简称"}},
        {"故宫", {"北京故宫, 明清两代的皇家宫殿"}},
        {"pug", {"a small dog breed with a wrinkled face", "《Pug》, a film"}},
        {"grass", {"plants with narrow leaves growing from the base", "slang for marijuana"}},
        {"frisbee", {"a plastic disc thrown between players"}},
        {"sheep dog", {"a dog trained to herd sheep"}},
        {"红苹果", {"《红苹果》"}},
    };
    return senses;
}

std::string describe(const std::string& c) { return c + " is a common object in everyday photographs."; }

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

} // namespace

RasterImage random_image(std::mt19937_64& gen, int width, int height) {
    RasterImage img(width, height, 3);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(gen() >> 56);
    return img;
}

RasterImage quadrant_image(std::uint64_t seed, int size) {
    std::mt19937_64 gen(seed);
    std::uint8_t colors[4][3];
    for (auto& c : colors)
        for (auto& v : c) v = static_cast<std::uint8_t>(gen() >> 56);
    RasterImage img(size, size, 3);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const int q = (y >= size / 2 ? 2 : 0) + (x >= size / 2 ? 1 : 0);
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = colors[q][c];
        }
    }
    return img;
}

std::vector<std::string> mini_concepts() {
    return {"苹果", "香蕉", "小狗", "猫",  "草地",  "屋顶",    "北京", "故宫", "北京故宫",
            "故宫博物院", "红苹果", "pug", "corgi", "grass", "frisbee", "sheep dog", "sheep", "dog"};
}

void write_mini_corpus(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");

    std::vector<ImageTextPair> corpus;
    std::uint64_t seed = 100;
    for (const auto& p : kPairs) {
        const auto rel = std::string("images/") + p.id + ".png";
        const auto png = encode_png(quadrant_image(seed++));
        std::ofstream(dir / rel, std::ios::binary).write(reinterpret_cast<const char*>(png.data()),
                                                         static_cast<std::streamsize>(png.size()));
        corpus.push_back({p.id, rel, p.text, dir});
    }
    write_corpus(dir / "corpus.jsonl", corpus);
    write_text(dir / "fine.tsv", kFine);
    write_text(dir / "compound.tsv", kCompound);

    std::vector<EncyclopediaEntry> entries;
    for (const auto& s : mini_encyclopedia()) entries.push_back({s.concept_surface, s.senses});
    write_encyclopedia(dir / "encyclopedia.jsonl", entries);

    // Replies for every description prompt and every judge prompt the pipeline can issue.
    ReplayLlm llm;
    int k = 0;
    for (const auto& c : mini_concepts()) {
        llm.record(description_prompt(c), describe(c));
        const char* verdict = (k++ % 4 == 3) ? "0" : "1";
        for (const auto& p : kPairs) {
            if (std::string_view(p.text).find(c) != std::string_view::npos)
                llm.record(judge_prompt(p.text, c, describe(c)), verdict);
        }
    }
    llm.save(dir / "llm.jsonl");

    const json config{{"min_freq", 1},
                      {"max_len", 5},
                      {"latin_nz_top_k", 1},
                      {"compound_thresholds", {{"ns", 2}, {"nt", 2}, {"nw", 2}}},
                      {"mode", "matmul"},
                      {"tau_desc", 0.2},
                      {"tau_h", 0.2},
                      {"gain", 0.5}};
    write_text(dir / "config.json", config.dump(2) + "\n");
}

CompletionFixture completion_fixture(std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    CompletionFixture fx;
    for (int i = 0; i < 30; ++i) {
        CompletionInput in;
        in.concept_surface = "item" + std::string(i < 10 ? "0" : "") + std::to_string(i);
        in.context = "a photo showing " + in.concept_surface + " on a table";
        for (int n = 0; n < 2; ++n) {
            const auto img = random_image(gen, 16, 16);
            WeightMap::Storage w(16, 16);
            for (Eigen::Index j = 0; j < w.size(); ++j) w.data()[j] = static_cast<float>((gen() >> 40) & 0xffff) / 65535.0f;
            in.images.push_back(blend(img, WeightMap(w), 0.5, in.concept_surface));
        }
        const auto text = in.concept_surface + " is a tool used in workshops.";
        switch (i % 10) {
        case 0: break; // no recorded reply
        case 1: fx.llm.record(description_prompt(in.concept_surface), "   "); break;
        default: {
            fx.llm.record(description_prompt(in.concept_surface), text);
            static constexpr const char* kVerdicts[] = {"1", "0", "Output: 1", "not sure", "1.", "10"};
            fx.llm.record(judge_prompt(in.context, in.concept_surface, text), kVerdicts[i % 6]);
        }
        }
        fx.inputs.push_back(std::move(in));
    }
    return fx;
}

std::filesystem::path temp_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto dir = std::filesystem::temp_directory_path() /
                     ("mmkb-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

ScriptedBackend::ScriptedBackend(std::map<std::string, double> s, int layers, int heads, int grid)
    : scores(std::move(s)) {
    descriptor_.name = "scripted";
    descriptor_.layers = layers;
    descriptor_.heads = heads;
    descriptor_.grid_rows = grid;
    descriptor_.grid_cols = grid;
    descriptor_.tokens = grid * grid + 1;
}

GroundingResult ScriptedBackend::ground(const RasterImage& image, const std::string& prompt) {
    GroundingResult r;
    r.score = score(image, prompt);
    const int T = descriptor_.tokens;
    AttentionStack<double> stack(descriptor_.layers, descriptor_.heads, T);
    for (auto& a : stack.attn) a.setConstant(1.0 / T);
    for (auto& g : stack.grad) {
        g.setZero();
        for (int j = 1; j < T; ++j) g(0, j) = static_cast<double>(j);
    }
    r.attention = std::move(stack);
    return r;
}

double ScriptedBackend::score(const RasterImage&, const std::string& text) {
    if (failing.contains(text)) throw BackendUnavailable("scripted failure for '" + text + "'");
    const auto it = scores.find(text);
    return it == scores.end() ? 0.0 : it->second;
}

Eigen::VectorXd ScriptedBackend::embed(const RasterImage& image) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(3);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) v[static_cast<Eigen::Index>(i % 3)] += image.pixels[i] + 1.0;
    return v.normalized();
}

} // namespace mmkb::testing
