// mmkb: command-line driver for the knowledge-base pipeline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmkb/codec.hpp"
#include "mmkb/concept_mining.hpp"
#include "mmkb/corpus_io.hpp"
#include "mmkb/description_completion.hpp"
#include "mmkb/error.hpp"
#include "mmkb/grounding_pipeline.hpp"
#include "mmkb/kb_store.hpp"
#include "mmkb/pipeline.hpp"
#include "mmkb/rag_harness.hpp"
#include "mmkb/sidecar_client.hpp"
#include "mmkb/toy_encoder.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmkb;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kBackend = 3 };

struct RunConfig {
    std::string config_path;
    std::uint64_t seed = 0;
    int jobs = 1;
    std::string backend = "toy";

    std::string corpus, candidates, encyclopedia, fine_lexicon, compound_lexicon;
    std::string grounding, completions, llm, judge_llm, retry_queue;
    std::string kb, index, image, image_base, samples, judgments, out;

    MiningConfig mining;
    double tau_desc = 0.2;
    double tau_h = 0.2;
    double gain = 0.5;
    std::string mode = "hadamard";
    int judge_retries = 2;
    std::size_t max_images = 10;
    bool include_tags = false;
    std::string drop_pattern = EncyclopediaOptions{}.drop_pattern;
};

void apply_config_file(RunConfig& rc) {
    std::ifstream in(rc.config_path);
    if (!in) throw DataError("cannot open config " + rc.config_path);
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw DataError("config must be a JSON object");
    try {
        const auto take = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        take("seed", rc.seed);
        take("jobs", rc.jobs);
        take("backend", rc.backend);
        take("min_freq", rc.mining.min_freq);
        take("max_len", rc.mining.max_len);
        take("latin_nz_top_k", rc.mining.latin_nz_top_k);
        take("compound_thresholds", rc.mining.compound_thresholds);
        take("noun_tags", rc.mining.noun_tags);
        take("tau_desc", rc.tau_desc);
        take("tau_h", rc.tau_h);
        take("gain", rc.gain);
        take("mode", rc.mode);
        take("judge_retries", rc.judge_retries);
        take("max_images_per_concept", rc.max_images);
        take("include_tag_concepts", rc.include_tags);
        take("drop_pattern", rc.drop_pattern);
    } catch (const json::exception& e) {
        throw DataError(std::string("bad config value: ") + e.what());
    }
}

void require_file(const std::string& path, const char* flag) {
    if (path.empty()) throw CLI::RequiredError(flag);
    if (!fs::exists(path)) throw DataError(std::string(flag) + ": no such file '" + path + "'");
}

std::unique_ptr<EncoderBackend> make_backend(const RunConfig& rc) {
    if (rc.backend == "toy") return std::make_unique<ToyEncoder>(ToyEncoderConfig{.seed = rc.seed});
    return std::make_unique<SidecarBackend>(open_channel(rc.backend), BackendDescriptor{.name = "sidecar"});
}

GroundingConfig grounding_config(const RunConfig& rc) {
    GroundingConfig g;
    g.relevance.mode = parse_propagation_mode(rc.mode);
    g.relevance.gain = rc.gain;
    g.tau_desc = rc.tau_desc;
    g.jobs = rc.jobs;
    return g;
}

Encyclopedia load_encyclopedia_for(const RunConfig& rc) {
    auto e = load_encyclopedia(rc.encyclopedia, EncyclopediaOptions{rc.drop_pattern});
    for (const auto& w : e.warnings) std::cerr << "warning: " << w << '\n';
    return e;
}

void print_json(const json& j, const std::string& out) {
    if (out.empty()) {
        std::cout << j.dump(2) << '\n';
        return;
    }
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + out);
    f << j.dump(2) << '\n';
}

int cmd_mine(const RunConfig& rc) {
    require_file(rc.corpus, "--corpus");
    require_file(rc.fine_lexicon, "--fine-lexicon");
    require_file(rc.compound_lexicon, "--compound-lexicon");
    const auto corpus = read_corpus(rc.corpus);
    check_unique_ids(corpus);
    const auto fine = LexiconTokenizer::from_file(rc.fine_lexicon);
    const auto compound = LexiconTokenizer::from_file(rc.compound_lexicon);
    std::vector<std::string> warnings;
    const auto candidates = mine_candidates(corpus, fine, compound, rc.mining, rc.jobs, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    if (rc.out.empty()) {
        write_candidates_tsv(std::cout, candidates);
    } else {
        std::ofstream f(rc.out, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + rc.out);
        write_candidates_tsv(f, candidates);
    }
    return kOk;
}

int cmd_ground(const RunConfig& rc) {
    require_file(rc.corpus, "--corpus");
    require_file(rc.candidates, "--candidates");
    require_file(rc.encyclopedia, "--encyclopedia");
    require_file(rc.fine_lexicon, "--fine-lexicon");
    require_file(rc.compound_lexicon, "--compound-lexicon");
    if (rc.out.empty()) throw CLI::RequiredError("--out");
    const auto corpus = read_corpus(rc.corpus);
    check_unique_ids(corpus);
    const auto candidates = candidate_set(read_candidates_tsv(rc.candidates));
    const auto encyclopedia = load_encyclopedia_for(rc);
    const auto fine = LexiconTokenizer::from_file(rc.fine_lexicon);
    const auto compound = LexiconTokenizer::from_file(rc.compound_lexicon);
    const auto backend = make_backend(rc);
    const auto out = run_grounding(corpus, candidates, encyclopedia, *backend, fine, compound, grounding_config(rc));
    write_grounding(out, rc.out, fs::absolute(fs::path(rc.corpus)).parent_path());
    std::cerr << out.records.size() << " grounded pairs\n";
    return kOk;
}

int cmd_complete(const RunConfig& rc) {
    require_file(rc.grounding, "--grounding");
    require_file(rc.llm, "--llm");
    if (!rc.judge_llm.empty()) require_file(rc.judge_llm, "--judge-llm");
    if (rc.out.empty()) throw CLI::RequiredError("--out");
    const auto grounding = read_grounding(rc.grounding);
    auto generator = ReplayLlm::from_file(rc.llm);
    auto judge = rc.judge_llm.empty() ? generator : ReplayLlm::from_file(rc.judge_llm);
    const auto backend = make_backend(rc);
    const auto out = run_completion(completion_inputs(grounding.records), generator, judge, *backend,
                                    CompletionConfig{rc.tau_h, rc.judge_retries});
    for (const auto& w : out.warnings) std::cerr << "warning: " << w << '\n';
    write_completions(out.records, rc.out);
    if (!rc.retry_queue.empty()) {
        std::ofstream q(rc.retry_queue, std::ios::binary | std::ios::trunc);
        for (const auto& c : out.retry_queue) q << c << '\n';
    }
    return kOk;
}

int cmd_build(const RunConfig& rc) {
    if (rc.out.empty()) throw CLI::RequiredError("--out");
    require_file(rc.encyclopedia, "--encyclopedia");
    if (!rc.corpus.empty()) {
        require_file(rc.corpus, "--corpus");
        require_file(rc.fine_lexicon, "--fine-lexicon");
        require_file(rc.compound_lexicon, "--compound-lexicon");
        require_file(rc.llm, "--llm");
        if (!rc.judge_llm.empty()) require_file(rc.judge_llm, "--judge-llm");
        const auto fine = LexiconTokenizer::from_file(rc.fine_lexicon);
        const auto compound = LexiconTokenizer::from_file(rc.compound_lexicon);
        PipelineInputs in{read_corpus(rc.corpus), &fine, &compound, load_encyclopedia_for(rc)};
        auto generator = ReplayLlm::from_file(rc.llm);
        auto judge = rc.judge_llm.empty() ? generator : ReplayLlm::from_file(rc.judge_llm);
        const auto backend = make_backend(rc);
        PipelineConfig cfg{rc.mining, grounding_config(rc), CompletionConfig{rc.tau_h, rc.judge_retries}};
        const auto report = run_pipeline(in, *backend, generator, judge, cfg, rc.out);
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
        std::cout << to_json(report.stats).dump(2) << '\n';
        return kOk;
    }
    require_file(rc.grounding, "--grounding");
    if (!rc.completions.empty()) require_file(rc.completions, "--completions");
    const auto grounding = read_grounding(rc.grounding);
    const auto completions = rc.completions.empty() ? std::vector<CompletionRecord>{} : read_completions(rc.completions);
    const auto kb = assemble_kb(grounding.records, load_encyclopedia_for(rc), completions);
    kb.finalize(rc.out);
    std::cout << to_json(kb.running_stats()).dump(2) << '\n';
    return kOk;
}

int cmd_stats(const RunConfig& rc) {
    require_file(rc.kb, "--kb");
    print_json(to_json(stats(read_kb(rc.kb))), rc.out);
    return kOk;
}

int cmd_index(const RunConfig& rc) {
    require_file(rc.kb, "--kb");
    if (rc.out.empty()) throw CLI::RequiredError("--out");
    const auto kb = read_kb(rc.kb);
    const auto backend = make_backend(rc);
    std::vector<std::string> warnings;
    const auto index = build_index(kb, *backend, rc.image_base, rc.max_images, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    write_index(index, rc.out);
    std::cerr << index.entries().size() << " images indexed\n";
    return kOk;
}

int cmd_query(const RunConfig& rc) {
    require_file(rc.index, "--index");
    if (rc.image.empty()) throw CLI::RequiredError("--image");
    const auto index = read_index(rc.index);
    const auto image = load_image(rc.image);
    const auto backend = make_backend(rc);
    const auto label = retrieve_concept(index, image, *backend);
    json j{{"concept", label}, {"vcr_prompt", build_vcr_prompt(label)}};
    if (!rc.kb.empty()) {
        const auto kb = read_kb(rc.kb);
        const auto it = kb.find(label);
        if (it != kb.end() && !it->second.senses.empty())
            j["vckdg_prompt"] = build_vckdg_prompt(label, it->second.senses.front().text);
    }
    print_json(j, rc.out);
    return kOk;
}

int cmd_eval_vqa(const RunConfig& rc) {
    require_file(rc.samples, "--samples");
    require_file(rc.kb, "--kb");
    require_file(rc.llm, "--llm");
    const auto samples = read_vqa_samples(rc.samples);
    const auto kb = read_kb(rc.kb);
    auto llm = ReplayLlm::from_file(rc.llm);
    json results = json::array();
    for (const auto& r : evaluate_okvqa(samples, kb, llm, VqaEvalOptions{rc.include_tags})) results.push_back(to_json(r));
    print_json(results, rc.out);
    return kOk;
}

int cmd_eval_vcr(const RunConfig& rc) {
    json results = json::array();
    if (!rc.samples.empty()) {
        require_file(rc.samples, "--samples");
        require_file(rc.index, "--index");
        const auto samples = read_vcr_samples(rc.samples);
        const auto index = read_index(rc.index);
        const auto backend = make_backend(rc);
        results.push_back(to_json(evaluate_vcr(samples, index, *backend, rc.image_base)));
    }
    if (!rc.judgments.empty()) {
        require_file(rc.judgments, "--judgments");
        std::ifstream in(rc.judgments);
        std::vector<Judgment> js;
        for (std::string line; std::getline(in, line);) {
            if (!trim(line).empty()) js.push_back(parse_judgment_label(line));
        }
        const auto w = win_rate(js);
        const auto n = js.size();
        results.push_back(to_json(EvalResult{"vckdg_win", w.win, n}));
        results.push_back(to_json(EvalResult{"vckdg_lose", w.lose, n}));
        results.push_back(to_json(EvalResult{"vckdg_tie", w.tie, n}));
    }
    if (results.empty()) throw CLI::RequiredError("--samples or --judgments");
    print_json(results, rc.out);
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    RunConfig rc;
    CLI::App app{"Concept-centric multimodal knowledge base toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--config", rc.config_path, "JSON file whose keys override flags")->check(CLI::ExistingFile);
    app.add_option("--seed", rc.seed, "Seed for every random choice")->capture_default_str();
    app.add_option("--jobs", rc.jobs, "Worker threads for mining shards and grounding pairs")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app.add_option("--backend", rc.backend, "'toy', 'host:port' or 'exec:<command>'")->capture_default_str();

    const auto mining_flags = [&](CLI::App* c) {
        c->add_option("--min-freq", rc.mining.min_freq, "Minimum corpus frequency")->capture_default_str();
        c->add_option("--max-len", rc.mining.max_len, "Maximum surface length in characters")->capture_default_str();
        c->add_option("--top-k", rc.mining.latin_nz_top_k, "Latin nz surfaces kept")->capture_default_str();
    };
    const auto grounding_flags = [&](CLI::App* c) {
        c->add_option("--tau-desc", rc.tau_desc, "Sense match threshold")->capture_default_str();
        c->add_option("--gain", rc.gain, "Blend gain")->capture_default_str();
        c->add_option("--mode", rc.mode, "Relevance propagation: hadamard | matmul")->capture_default_str();
        c->add_option("--drop-pattern", rc.drop_pattern, "Regex of encyclopedia senses to drop")->capture_default_str();
    };
    const auto completion_flags = [&](CLI::App* c) {
        c->add_option("--llm", rc.llm, "Replay fixture for description generation");
        c->add_option("--judge-llm", rc.judge_llm, "Replay fixture for the judge (defaults to --llm)");
        c->add_option("--tau-h", rc.tau_h, "Hallucination threshold")->capture_default_str();
        c->add_option("--judge-retries", rc.judge_retries, "Retries on malformed judge replies")->capture_default_str();
    };
    const auto tokenizer_flags = [&](CLI::App* c) {
        c->add_option("--fine-lexicon", rc.fine_lexicon, "Fine tokenizer lexicon (TSV surface, pos)");
        c->add_option("--compound-lexicon", rc.compound_lexicon, "Compound tokenizer lexicon (TSV surface, pos)");
    };

    auto* mine = app.add_subcommand("mine", "Extract candidate concepts from a corpus");
    mine->add_option("--corpus", rc.corpus, "Image-text pairs (JSONL)");
    mine->add_option("--out", rc.out, "Candidate TSV (stdout when omitted)");
    tokenizer_flags(mine);
    mining_flags(mine);

    auto* ground = app.add_subcommand("ground", "Ground candidate concepts in images and senses");
    ground->add_option("--corpus", rc.corpus, "Image-text pairs (JSONL)");
    ground->add_option("--candidates", rc.candidates, "Candidate TSV from `mine`");
    ground->add_option("--encyclopedia", rc.encyclopedia, "Encyclopedia (JSONL)");
    ground->add_option("--out", rc.out, "Grounding directory");
    tokenizer_flags(ground);
    grounding_flags(ground);

    auto* complete = app.add_subcommand("complete", "Generate and vet descriptions for ungrounded concepts");
    complete->add_option("--grounding", rc.grounding, "Grounding directory from `ground`");
    complete->add_option("--out", rc.out, "Completion records (JSONL)");
    complete->add_option("--retry-queue", rc.retry_queue, "Concepts whose LLM call was unavailable");
    completion_flags(complete);

    auto* build = app.add_subcommand("build", "Write the knowledge base directory");
    build->add_option("--grounding", rc.grounding, "Grounding directory from `ground`");
    build->add_option("--completions", rc.completions, "Completion records from `complete`");
    build->add_option("--encyclopedia", rc.encyclopedia, "Encyclopedia (JSONL)");
    build->add_option("--corpus", rc.corpus, "Run every stage from this corpus instead of --grounding");
    build->add_option("--out", rc.out, "KB directory");
    tokenizer_flags(build);
    mining_flags(build);
    grounding_flags(build);
    completion_flags(build);

    auto* stats_cmd = app.add_subcommand("stats", "Print knowledge base statistics");
    stats_cmd->add_option("--kb", rc.kb, "KB directory");
    stats_cmd->add_option("--out", rc.out, "Output file (stdout when omitted)");

    auto* index = app.add_subcommand("index", "Embed KB images into a vector index");
    index->add_option("--kb", rc.kb, "KB directory");
    index->add_option("--image-base", rc.image_base, "Directory that relative image refs resolve against");
    index->add_option("--max-images", rc.max_images, "Images per concept")->capture_default_str();
    index->add_option("--out", rc.out, "Index file (JSONL)");

    auto* query = app.add_subcommand("query", "Retrieve the concept of an image");
    query->add_option("--index", rc.index, "Index file from `index`");
    query->add_option("--image", rc.image, "Query image (path or data URI)");
    query->add_option("--kb", rc.kb, "KB directory, for the description prompt");
    query->add_option("--out", rc.out, "Output file (stdout when omitted)");

    auto* eval_vqa = app.add_subcommand("eval-vqa", "Soft accuracy before and after KB refinement");
    eval_vqa->add_option("--samples", rc.samples, "VQA samples (JSONL)");
    eval_vqa->add_option("--kb", rc.kb, "KB directory");
    eval_vqa->add_option("--llm", rc.llm, "Replay fixture answering the refinement prompts");
    eval_vqa->add_flag("--include-tag-concepts", rc.include_tags, "Add image-tag concepts to the prompt");
    eval_vqa->add_option("--out", rc.out, "Output file (stdout when omitted)");

    auto* eval_vcr = app.add_subcommand("eval-vcr", "Retrieval accuracy and description win rates");
    eval_vcr->add_option("--samples", rc.samples, "Lines of {query_image, gold_concept}");
    eval_vcr->add_option("--index", rc.index, "Index file from `index`");
    eval_vcr->add_option("--image-base", rc.image_base, "Directory that relative query images resolve against");
    eval_vcr->add_option("--judgments", rc.judgments, "One WIN, LOSE or TIE per line");
    eval_vcr->add_option("--out", rc.out, "Output file (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (!rc.config_path.empty()) apply_config_file(rc);
        rc.mining.validate();
        const auto* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        if (name == "mine") return cmd_mine(rc);
        if (name == "ground") return cmd_ground(rc);
        if (name == "complete") return cmd_complete(rc);
        if (name == "build") return cmd_build(rc);
        if (name == "stats") return cmd_stats(rc);
        if (name == "index") return cmd_index(rc);
        if (name == "query") return cmd_query(rc);
        if (name == "eval-vqa") return cmd_eval_vqa(rc);
        if (name == "eval-vcr") return cmd_eval_vcr(rc);
        return kUsage;
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return kUsage;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << '\n';
        return kBackend;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
}
