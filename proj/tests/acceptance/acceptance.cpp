// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "mmkb/codec.hpp"
#include "mmkb/concept_mining.hpp"
#include "mmkb/corpus_io.hpp"
#include "mmkb/description_completion.hpp"
#include "mmkb/grounding_pipeline.hpp"
#include "mmkb/kb_store.hpp"
#include "mmkb/pipeline.hpp"
#include "mmkb/rag_harness.hpp"
#include "mmkb/relevance.hpp"
#include "mmkb/toy_encoder.hpp"

namespace fs = std::filesystem;
using namespace mmkb;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---- P1 / P2: relevance math ------------------------------------------------

AttentionStack<double> random_stack(std::mt19937_64& gen) {
    std::uniform_int_distribution<int> lh(1, 4), t(2, 6);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int L = lh(gen), H = lh(gen), T = t(gen);
    AttentionStack<double> s(L, H, T);
    for (std::size_t k = 0; k < s.attn.size(); ++k) {
        for (int i = 0; i < T; ++i) {
            double sum = 0.0;
            for (int j = 0; j < T; ++j) sum += (s.attn[k](i, j) = std::exp(normal(gen)));
            for (int j = 0; j < T; ++j) s.attn[k](i, j) /= sum;
            for (int j = 0; j < T; ++j) s.grad[k](i, j) = normal(gen);
        }
    }
    return s;
}

using Dense = std::vector<std::vector<double>>;

Dense reference_abar(const AttentionStack<double>& s, int l) {
    const int T = s.tokens;
    Dense a(T, std::vector<double>(T, 0.0));
    for (int i = 0; i < T; ++i) {
        for (int j = 0; j < T; ++j) {
            double acc = 0.0;
            for (int h = 0; h < s.heads; ++h) {
                const double v = s.gradient(l, h)(i, j) * s.attention(l, h)(i, j);
                acc += v > 0.0 ? v : 0.0;
            }
            a[i][j] = acc / s.heads;
        }
    }
    return a;
}

std::vector<Dense> reference_trace(const AttentionStack<double>& s, bool hadamard) {
    const int T = s.tokens;
    Dense r(T, std::vector<double>(T, 0.0));
    for (int i = 0; i < T; ++i) r[i][i] = 1.0;
    std::vector<Dense> trace{r};
    for (int l = 0; l < s.layers; ++l) {
        const Dense a = reference_abar(s, l);
        Dense next = r;
        for (int i = 0; i < T; ++i) {
            for (int j = 0; j < T; ++j) {
                if (hadamard) {
                    next[i][j] += a[i][j] * r[i][j];
                } else {
                    for (int k = 0; k < T; ++k) next[i][j] += a[i][k] * r[k][j];
                }
            }
        }
        r = next;
        trace.push_back(r);
    }
    return trace;
}

double max_abs_diff(const Eigen::MatrixXd& m, const Dense& d) {
    double err = 0.0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) err = std::max(err, std::abs(m(i, j) - d[i][j]));
    return err;
}

std::vector<AttentionStack<double>> stacks_200() {
    std::mt19937_64 gen(2024);
    std::vector<AttentionStack<double>> out;
    for (int i = 0; i < 200; ++i) out.push_back(random_stack(gen));
    return out;
}

Outcome p1() {
    const auto t0 = Clock::now();
    double err = 0.0;
    for (const auto& s : stacks_200()) {
        const auto reduced = reduce_heads(s);
        for (int l = 0; l < s.layers; ++l) err = std::max(err, max_abs_diff(reduced.abar[l], reference_abar(s, l)));
        for (const bool hadamard : {true, false}) {
            const auto trace = propagate_trace(reduced, hadamard ? PropagationMode::Hadamard : PropagationMode::MatMul);
            const auto ref = reference_trace(s, hadamard);
            for (std::size_t l = 0; l < trace.size(); ++l) err = std::max(err, max_abs_diff(trace[l], ref[l]));
        }
    }
    const double t = seconds_since(t0);
    return {err <= 1e-9 && t < 5.0, "max abs err " + fmt("%.3g", err) + ", " + fmt("%.2f s", t)};
}

Outcome p2() {
    bool nonneg = true, monotone = true, diagonal = true;
    for (const auto& s : stacks_200()) {
        const auto reduced = reduce_heads(s);
        for (const auto& a : reduced.abar) nonneg = nonneg && (a.array() >= 0.0).all();
        for (const auto mode : {PropagationMode::Hadamard, PropagationMode::MatMul}) {
            const auto trace = propagate_trace(reduced, mode);
            for (std::size_t l = 1; l < trace.size(); ++l)
                monotone = monotone && (trace[l].array() >= trace[l - 1].array()).all();
            if (mode == PropagationMode::Hadamard) {
                for (const auto& r : trace) {
                    Eigen::MatrixXd off = r;
                    off.diagonal().setZero();
                    diagonal = diagonal && (off.array() == 0.0).all();
                }
            }
        }
    }
    return {nonneg && monotone && diagonal, std::string("abar>=0 ") + (nonneg ? "yes" : "NO") + ", monotone " +
                                                (monotone ? "yes" : "NO") + ", hadamard diagonal " +
                                                (diagonal ? "yes" : "NO")};
}

// ---- P3: gradient fidelity --------------------------------------------------

Outcome p3() {
    const auto t0 = Clock::now();
    constexpr double h = 1e-4;
    constexpr double floor = 1e-6;
    static const char* kWords[] = {"dog", "red", "apple", "grass", "sky", "猫", "故宫", "tree", "car", "water"};
    std::mt19937_64 gen(7);
    double worst = 0.0;
    for (int f = 0; f < 20; ++f) {
        ToyEncoder enc(ToyEncoderConfig{.seed = static_cast<std::uint64_t>(f)});
        const auto image = testing::random_image(gen, 12 + static_cast<int>(gen() % 8), 12 + static_cast<int>(gen() % 8));
        std::string prompt = "an image of";
        for (int w = 0; w < 1 + static_cast<int>(gen() % 3); ++w) prompt += std::string(" ") + kWords[gen() % 10];
        const auto result = enc.ground(image, prompt);
        const auto& stack = std::get<AttentionStack<double>>(result.attention);
        for (int l = 0; l < stack.layers; ++l) {
            for (int hd = 0; hd < stack.heads; ++hd) {
                const auto& A = stack.attention(l, hd);
                for (Eigen::Index i = 0; i < A.rows(); ++i) {
                    for (Eigen::Index j = 0; j < A.cols(); ++j) {
                        Eigen::MatrixXd plus = A, minus = A;
                        plus(i, j) += h;
                        minus(i, j) -= h;
                        const double fd = (enc.score_with_attention(image, prompt, l, hd, plus) -
                                           enc.score_with_attention(image, prompt, l, hd, minus)) /
                                          (2 * h);
                        const double an = stack.gradient(l, hd)(i, j);
                        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor});
                        worst = std::max(worst, rel);
                    }
                }
            }
        }
    }
    const double t = seconds_since(t0);
    return {worst < 1e-3 && t < 30.0, "max rel err " + fmt("%.3g", worst) + ", " + fmt("%.2f s", t)};
}

// ---- P4: bilinear -----------------------------------------------------------

Outcome p4() {
    std::mt19937_64 gen(99);
    std::uniform_int_distribution<int> side(1, 7), extra(0, 40);
    std::uniform_real_distribution<double> coef(-5.0, 5.0);
    double exact_err = 0.0;
    bool bounded = true;
    for (int g = 0; g < 100; ++g) {
        const int m = side(gen), n = side(gen);
        const int W = n + extra(gen), H = m + extra(gen);
        const double a = coef(gen), b = coef(gen), c = coef(gen), d = coef(gen);
        const auto f = [&](double r, double q) { return a + b * r + c * q + d * r * q; };
        Eigen::MatrixXd grid(m, n);
        for (int r = 0; r < m; ++r)
            for (int q = 0; q < n; ++q) grid(r, q) = f(r, q);
        const auto up = upsample_bilinear(grid, W, H);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const double gy = (m == 1 || H == 1) ? 0.0 : static_cast<double>(y) * (m - 1) / (H - 1);
                const double gx = (n == 1 || W == 1) ? 0.0 : static_cast<double>(x) * (n - 1) / (W - 1);
                exact_err = std::max(exact_err, std::abs(up(y, x) - f(gy, gx)));
            }
        }
        Eigen::MatrixXd noise = Eigen::MatrixXd::NullaryExpr(m, n, [&]() { return coef(gen); });
        const auto up2 = upsample_bilinear(noise, W, H);
        bounded = bounded && up2.minCoeff() >= noise.minCoeff() && up2.maxCoeff() <= noise.maxCoeff();
    }
    return {exact_err <= 1e-9 && bounded,
            "max err on bilinear functions " + fmt("%.3g", exact_err) + ", bounded " + (bounded ? "yes" : "NO")};
}

// ---- P5: mining oracle ------------------------------------------------------

std::vector<CandidateConcept> brute_force_filter(const FrequencyTable& table, const MiningConfig& cfg) {
    struct Row {
        std::string surface;
        std::uint64_t freq;
        std::string pos;
        bool latin;
    };
    std::vector<Row> eligible;
    for (const auto& [surface, e] : table.entries()) {
        std::string best;
        std::uint64_t best_n = 0;
        for (const auto& [tag, n] : e.pos_tags) {
            if (n > best_n) { // map order makes the first maximum the smallest tag
                best = tag;
                best_n = n;
            }
        }
        const bool latin = std::all_of(surface.begin(), surface.end(), [](char ch) { return (ch & 0x80) == 0; });
        if (!cfg.noun_tags.contains(best) || e.count < cfg.min_freq || utf8_length(surface) > cfg.max_len) continue;
        eligible.push_back({surface, e.count, best, latin});
    }
    const auto before = [](const Row& x, const Row& y) {
        return x.freq > y.freq || (x.freq == y.freq && x.surface < y.surface);
    };
    std::vector<CandidateConcept> out;
    for (const auto& r : eligible) {
        bool keep = true;
        if (r.latin && r.pos == "nz") {
            std::size_t ahead = 0;
            for (const auto& o : eligible)
                if (o.latin && o.pos == "nz" && before(o, r)) ++ahead;
            keep = ahead < cfg.latin_nz_top_k;
        } else if (const auto t = cfg.compound_thresholds.find(r.pos); t != cfg.compound_thresholds.end()) {
            keep = r.freq >= t->second;
        }
        if (keep) out.push_back({r.surface, r.freq, r.pos});
    }
    std::sort(out.begin(), out.end(), [](const CandidateConcept& x, const CandidateConcept& y) {
        return x.freq > y.freq || (x.freq == y.freq && x.surface < y.surface);
    });
    return out;
}

Outcome p5() {
    std::mt19937_64 gen(5);
    static const char* kTags[] = {"n", "nz", "ns", "nt", "nw", "latin-n", "v", "a", "eng"};
    static const char* kNative[] = {"苹", "果", "香", "蕉", "猫", "狗", "故", "宫"};
    int mismatches = 0;
    bool boundaries_seen[4] = {false, false, false, false};
    for (int t = 0; t < 50; ++t) {
        MiningConfig cfg;
        cfg.latin_nz_top_k = 1 + gen() % 4;
        FrequencyTable table;
        // Boundary rows present in every table.
        table.add("边界甲", "n", 14);
        table.add("边界乙", "n", 15);
        table.add("五个字长度", "n", 20);
        table.add("六个字的长度", "n", 20);
        table.add("机构甲", "nt", 399);
        table.add("机构乙", "nt", 400);
        const int rows = 20 + static_cast<int>(gen() % 40);
        for (int r = 0; r < rows; ++r) {
            std::string surface;
            const bool latin = gen() % 2 == 0;
            const int len = 1 + static_cast<int>(gen() % 7);
            for (int k = 0; k < len; ++k) surface += latin ? std::string(1, static_cast<char>('a' + gen() % 4)) : kNative[gen() % 8];
            const int tags = 1 + static_cast<int>(gen() % 3);
            for (int k = 0; k < tags; ++k) {
                const std::uint64_t n = gen() % 3 == 0 ? 390 + gen() % 20 : gen() % 40;
                table.add(surface, kTags[latin && gen() % 2 ? 1 : gen() % 9], n);
            }
        }
        const auto got = filter_candidates(table, cfg);
        const auto want = brute_force_filter(table, cfg);
        if (got != want) ++mismatches;
        const auto has = [&](const char* s) {
            return std::any_of(got.begin(), got.end(), [&](const CandidateConcept& c) { return c.surface == s; });
        };
        boundaries_seen[0] = boundaries_seen[0] || (!has("边界甲") && has("边界乙"));
        boundaries_seen[1] = boundaries_seen[1] || (has("五个字长度") && !has("六个字的长度"));
        boundaries_seen[2] = boundaries_seen[2] || (!has("机构甲") && has("机构乙"));
        std::size_t latin_nz = 0;
        for (const auto& c : got)
            if (c.dominant_pos == "nz" && classify_script(c.surface) == Script::Latin) ++latin_nz;
        MiningConfig wide = cfg;
        wide.latin_nz_top_k = 1000;
        std::size_t uncut = 0;
        for (const auto& c : filter_candidates(table, wide))
            if (c.dominant_pos == "nz" && classify_script(c.surface) == Script::Latin) ++uncut;
        boundaries_seen[3] = boundaries_seen[3] || (latin_nz == cfg.latin_nz_top_k && uncut > cfg.latin_nz_top_k);
    }
    const bool boundaries = std::all_of(std::begin(boundaries_seen), std::end(boundaries_seen), [](bool b) { return b; });
    return {mismatches == 0 && boundaries,
            std::to_string(mismatches) + " mismatching tables of 50, boundary cases " + (boundaries ? "covered" : "MISSING")};
}

// ---- P6: double-check soundness --------------------------------------------

Outcome p6() {
    std::size_t cases = 0, wrong = 0;
    const RasterImage img(4, 4, 3, 10);
    const auto weighted = blend(img, WeightMap(4, 4));
    for (int n = 1; n <= 4; ++n) {
        std::vector<std::string> mentions;
        for (int i = 0; i < n; ++i) mentions.push_back("c" + std::to_string(i));
        int total = 1;
        for (int i = 0; i < n; ++i) total *= n;
        // Every assignment of ranks 0..n-1 covers all orderings, ties included.
        for (int code = 0; code < total; ++code) {
            std::vector<int> rank(n);
            for (int i = 0, c = code; i < n; ++i, c /= n) rank[i] = c % n;
            std::map<std::string, double> scores;
            for (int i = 0; i < n; ++i) scores[grounding_prompt(mentions[i])] = 0.1 * rank[i];
            testing::ScriptedBackend backend(scores);
            for (int i = 0; i < n; ++i) {
                bool strict_max = true;
                for (int j = 0; j < n; ++j)
                    if (j != i && rank[j] >= rank[i]) strict_max = false;
                const auto got = double_check(weighted, mentions[i], mentions, backend);
                ++cases;
                if (got.retained != strict_max) ++wrong;
            }
        }
    }
    return {wrong == 0, std::to_string(cases) + " (ordering, concept) cases, " + std::to_string(wrong) + " wrong"};
}

// ---- P7: end-to-end determinism --------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        files[fs::relative(e.path(), dir).generic_string()] =
            std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return files;
}

fs::path build_mini_kb(const fs::path& fixture, int jobs, const std::string& tag) {
    const auto fine = LexiconTokenizer::from_file(fixture / "fine.tsv");
    const auto compound = LexiconTokenizer::from_file(fixture / "compound.tsv");
    PipelineInputs in{read_corpus(fixture / "corpus.jsonl"), &fine, &compound,
                      load_encyclopedia(fixture / "encyclopedia.jsonl")};
    PipelineConfig cfg;
    cfg.mining.min_freq = 1;
    cfg.mining.latin_nz_top_k = 1;
    cfg.mining.compound_thresholds = {{"ns", 2}, {"nt", 2}, {"nw", 2}};
    cfg.grounding.relevance.mode = PropagationMode::MatMul;
    cfg.grounding.jobs = jobs;
    auto llm = ReplayLlm::from_file(fixture / "llm.jsonl");
    ToyEncoder backend(ToyEncoderConfig{.seed = 0});
    const auto out = fixture / ("kb-" + tag);
    run_pipeline(in, backend, llm, llm, cfg, out);
    return out;
}

Outcome p7() {
    const auto fixture = testing::temp_dir("p7");
    testing::write_mini_corpus(fixture);
    const auto a = snapshot(build_mini_kb(fixture, 1, "a"));
    const auto b = snapshot(build_mini_kb(fixture, 1, "b"));
    const auto c = snapshot(build_mini_kb(fixture, 4, "c"));
    const auto concepts = a.contains("concepts.jsonl")
                              ? std::count(a.at("concepts.jsonl").begin(), a.at("concepts.jsonl").end(), '\n')
                              : 0;
    fs::remove_all(fixture);
    const bool ok = concepts > 0 && a == b && a == c;
    return {ok, std::to_string(a.size()) + " files, " + std::to_string(concepts) + " concepts; jobs1 rerun " +
                    (a == b ? "identical" : "DIFFERS") + ", jobs4 " + (a == c ? "identical" : "DIFFERS")};
}

// ---- P8: statistics arithmetic ---------------------------------------------

Outcome p8() {
    std::vector<std::uint64_t> images(151776, 6);
    for (std::size_t i = 0; i < 951089 - 6 * 151776; ++i) images[i] = 7;
    const auto s = make_stats(images, std::vector<std::uint64_t>(151776, 1), 0, 0, 0);
    std::vector<std::string> preds(200, "x"), golds(200, "y");
    for (int i = 0; i < 70; ++i) golds[i] = "x";
    const auto em = exact_match_accuracy(preds, golds);
    std::vector<Judgment> js;
    js.insert(js.end(), 164, Judgment::Win);
    js.insert(js.end(), 16, Judgment::Lose);
    js.insert(js.end(), 20, Judgment::Tie);
    const auto wr = win_rate(js);
    const bool ok = s.image_count == 951089 && format_fixed(s.avg_images_per_concept, 2) == "6.27" &&
                    format_fixed(em.value, 1) == "35.0" && format_fixed(wr.win, 1) == "82.0" &&
                    format_fixed(wr.lose, 1) == "8.0" && format_fixed(wr.tie, 1) == "10.0";
    return {ok, "avg " + format_fixed(s.avg_images_per_concept, 2) + ", exact match " + format_fixed(em.value, 1) +
                    ", win/lose/tie " + format_fixed(wr.win, 1) + "/" + format_fixed(wr.lose, 1) + "/" +
                    format_fixed(wr.tie, 1)};
}

// ---- P9: format round-trips -------------------------------------------------

std::string random_text(std::mt19937_64& gen) {
    static const char32_t kPool[] = {U'a', U'Z', U'7', U' ', U'"', U'\\', U'\n', U'\t', U'é', U'猫', U'《', U'》',
                                     U'\u0001', U'\U0001F600', U'宫', U'/'};
    std::u32string s;
    const int n = 1 + static_cast<int>(gen() % 24);
    for (int i = 0; i < n; ++i) s.push_back(kPool[gen() % std::size(kPool)]);
    return utf8_encode(s);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome p9() {
    std::mt19937_64 gen(9);
    const auto dir = testing::temp_dir("p9");
    int failures = 0;
    const auto check = [&](bool ok) { failures += ok ? 0 : 1; };
    for (int t = 0; t < 100; ++t) {
        // weight map: arbitrary bit patterns other than NaN
        const int w = 1 + static_cast<int>(gen() % 9), h = 1 + static_cast<int>(gen() % 9);
        WeightMap map(w, h);
        for (Eigen::Index i = 0; i < map.w.size(); ++i) {
            float f;
            do f = std::bit_cast<float>(static_cast<std::uint32_t>(gen())); while (std::isnan(f));
            map.w.data()[i] = f;
        }
        write_weight_map(map, dir / "m.cwm");
        const auto back = read_weight_map(dir / "m.cwm");
        check(back == map && encode_weight_map(back) == encode_weight_map(map));

        // corpus
        std::vector<ImageTextPair> pairs;
        for (int i = 0; i < 1 + static_cast<int>(gen() % 4); ++i)
            pairs.push_back({"id" + std::to_string(i) + random_text(gen), "img/" + random_text(gen), random_text(gen), {}});
        write_corpus(dir / "c.jsonl", pairs);
        const auto pairs_back = read_corpus(dir / "c.jsonl");
        const auto bytes = slurp(dir / "c.jsonl");
        write_corpus(dir / "c2.jsonl", pairs_back);
        check(pairs_back == pairs && slurp(dir / "c2.jsonl") == bytes);

        // encyclopedia
        std::vector<EncyclopediaEntry> entries;
        for (int i = 0; i < 1 + static_cast<int>(gen() % 4); ++i) {
            EncyclopediaEntry e{"c" + std::to_string(i) + random_text(gen), {}};
            for (int k = 0; k < 1 + static_cast<int>(gen() % 3); ++k) e.senses.push_back("s" + random_text(gen));
            entries.push_back(e);
        }
        write_encyclopedia(dir / "e.jsonl", entries);
        const auto enc = load_encyclopedia(dir / "e.jsonl", EncyclopediaOptions{""});
        bool enc_ok = enc.entries.size() == entries.size();
        for (const auto& e : entries) enc_ok = enc_ok && enc.find(e.concept_surface) && enc.find(e.concept_surface)->senses == e.senses;
        check(enc_ok);

        // concept nodes through a finalised KB
        KbBuilder kb;
        for (int i = 0; i < 1 + static_cast<int>(gen() % 4); ++i) {
            const auto c = "k" + std::to_string(i) + random_text(gen);
            kb.upsert(SenseFragment{c, random_text(gen), gen() % 2 ? SenseSource::Generated : SenseSource::Encyclopedia,
                                    1 + static_cast<int>(gen() % 3)});
            WeightMap wm(3, 2);
            wm.w.setRandom();
            kb.upsert(ImageFragment{c, "p" + random_text(gen), random_text(gen), wm,
                                    static_cast<double>(gen()) / 3.0});
        }
        kb.finalize(dir / "kb");
        const auto nodes = read_kb(dir / "kb");
        const auto kb_bytes = slurp(dir / "kb" / "concepts.jsonl");
        std::ofstream(dir / "kb2.jsonl", std::ios::binary) << [&] {
            std::string s;
            for (const auto& [k, n] : nodes) s += to_json(n).dump() + "\n";
            return s;
        }();
        check(nodes == kb.nodes() && slurp(dir / "kb2.jsonl") == kb_bytes);

        // completions, provenance, eval results, VQA samples, index
        std::vector<CompletionRecord> recs;
        for (int i = 0; i < 3; ++i)
            recs.push_back({random_text(gen), random_text(gen), static_cast<CompletionStatus>(gen() % 4)});
        write_completions(recs, dir / "r.jsonl");
        check(read_completions(dir / "r.jsonl") == recs);

        ProvenanceEntry pe{random_text(gen), random_text(gen), "visual", random_text(gen),
                           gen() % 2 ? std::optional<double>(static_cast<double>(gen()) / 7.0) : std::nullopt};
        check(provenance_from_json(json::parse(to_json(pe).dump())) == pe);

        EvalResult er{random_text(gen), static_cast<double>(gen() % 1001) / 10.0, gen() % 500};
        check(eval_result_from_json(json::parse(to_json(er).dump())) == er);

        VqaSample vs{random_text(gen), {}, {random_text(gen)}, random_text(gen)};
        for (int i = 0; i < 10; ++i) vs.gold_annotations.push_back(random_text(gen));
        const auto vs_back = vqa_sample_from_json(json::parse(to_json(vs).dump()));
        check(to_json(vs_back).dump() == to_json(vs).dump());

        VectorIndex index;
        for (int i = 0; i < 3; ++i) {
            Eigen::VectorXd v = Eigen::VectorXd::NullaryExpr(5, [&]() { return static_cast<double>(gen()) / 1e18 - 9.0; });
            index.add({v.normalized(), random_text(gen), random_text(gen)});
        }
        write_index(index, dir / "i.jsonl");
        check(read_index(dir / "i.jsonl") == index);
    }
    fs::remove_all(dir);
    return {failures == 0, std::to_string(failures) + " round-trip failures over 100 instances x 9 formats"};
}

// ---- P10: prompt goldens ----------------------------------------------------

std::string golden(const char* name) {
    auto s = slurp(fs::path(MMKB_GOLDEN_DIR) / name);
    if (!s.empty() && s.back() == '\n') s.pop_back();
    return s;
}

Outcome p10() {
    const std::pair<std::string, std::string> cases[] = {
        {"vcr.txt", build_vcr_prompt("pug")},
        {"vckdg.txt", build_vckdg_prompt("pug", "a small dog breed with a wrinkled face")},
        {"okvqa.txt", build_okvqa_prompt("What fabric is this made of?", "cotton",
                                         {{"cotton", "a soft white fibre from the cotton plant"}},
                                         {{"fabric", "cloth produced by weaving or knitting fibres"}})},
        {"okvqa_empty.txt", build_okvqa_prompt("What is this?", "a kite", {}, {})},
        {"description.txt", description_prompt("pug")},
        {"judge.txt", judge_prompt("a pug on the grass", "pug", "a small dog breed with a wrinkled face")},
    };
    std::string failed;
    for (const auto& [file, text] : cases)
        if (golden(file.c_str()) != text) failed += " " + file;
    return {failed.empty(), failed.empty() ? "6 goldens match" : "mismatch:" + failed};
}

// ---- P11: completion funnel -------------------------------------------------

Outcome p11() {
    auto fx = testing::completion_fixture(11);
    ToyEncoder backend(ToyEncoderConfig{.seed = 0});
    const auto out = run_completion(fx.inputs, fx.llm, fx.llm, backend, CompletionConfig{});
    const auto generated = out.records.size();
    std::size_t post_halluc = 0, judged_ok = 0;
    for (const auto& r : out.records) {
        if (r.status != CompletionStatus::HallucFiltered) ++post_halluc;
        if (r.status == CompletionStatus::JudgedOk) ++judged_ok;
    }
    // every record left GENERATED exactly once
    bool forward = std::none_of(out.records.begin(), out.records.end(),
                                [](const CompletionRecord& r) { return r.status == CompletionStatus::Generated; });
    for (int from = 0; from < 4; ++from) {
        for (int to = 0; to < 4; ++to) {
            CompletionRecord r{"c", "t", static_cast<CompletionStatus>(from)};
            const bool legal = from == 0 && to != 0;
            bool accepted = true;
            try {
                r.advance(static_cast<CompletionStatus>(to));
            } catch (const std::logic_error&) {
                accepted = false;
            }
            forward = forward && accepted == legal;
        }
    }
    const bool ok = judged_ok <= post_halluc && post_halluc <= generated && forward && generated > 0 &&
                    generated + out.retry_queue.size() <= 30;
    return {ok, "generated " + std::to_string(generated) + ", post-hallucination " + std::to_string(post_halluc) +
                    ", judged ok " + std::to_string(judged_ok) + ", retry queue " +
                    std::to_string(out.retry_queue.size()) + ", transitions " + (forward ? "forward-only" : "ILLEGAL")};
}

} // namespace

int main() {
    const std::pair<const char*, std::function<Outcome()>> criteria[] = {
        {"P1 relevance math oracle", p1},   {"P2 monotonicity and sign", p2}, {"P3 gradient fidelity", p3},
        {"P4 bilinear oracle", p4},         {"P5 mining oracle", p5},         {"P6 double-check soundness", p6},
        {"P7 end-to-end determinism", p7},  {"P8 statistics arithmetic", p8},   {"P9 format round-trips", p9},
        {"P10 prompt goldens", p10},        {"P11 completion funnel", p11},
    };
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        if (!o.pass) ++failed;
        std::printf("%s %-28s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria failed\n", failed, std::size(criteria));
    return failed == 0 ? 0 : 1;
}
