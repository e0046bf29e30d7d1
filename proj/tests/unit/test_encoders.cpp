#include <doctest.h>

#include <deque>
#include <fstream>
#include <future>
#include <random>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "mmkb/error.hpp"
#include "mmkb/sidecar_client.hpp"
#include "mmkb/toy_encoder.hpp"

using namespace mmkb;
using nlohmann::json;

namespace {

// Answers each batch of requests in reverse order with a canned score per id.
class ReversingChannel : public LineChannel {
public:
    void send_line(const std::string& line) override { sent.push_back(json::parse(line)); }
    std::optional<std::string> receive_line() override {
        if (queue.empty()) {
            if (sent.empty()) return std::nullopt;
            while (!sent.empty()) {
                const auto id = sent.back().at("id").get<std::string>();
                queue.push_back(json{{"id", id}, {"score", static_cast<double>(id.size()) + std::stod(id.substr(1))}}.dump());
                sent.pop_back();
            }
        }
        auto line = queue.front();
        queue.pop_front();
        return line;
    }
    std::vector<json> sent;
    std::deque<std::string> queue;
};

// Claims three layers but returns one.
class LyingBackend : public testing::ScriptedBackend {
public:
    LyingBackend() : testing::ScriptedBackend({}, 1, 1, 2), claimed_(testing::ScriptedBackend::descriptor()) {
        claimed_.layers = 3;
    }
    const BackendDescriptor& descriptor() const override { return claimed_; }

private:
    BackendDescriptor claimed_;
};

std::vector<json> conformance_cases() {
    std::ifstream in(MMKB_CONFORMANCE_FILE);
    REQUIRE(in);
    std::vector<json> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(json::parse(line));
    return out;
}

RasterImage test_image(std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    return testing::random_image(gen, 12, 10);
}

} // namespace

TEST_SUITE("encoders") {

TEST_CASE("toy encoder descriptor and determinism") {
    ToyEncoder enc({.seed = 3});
    const auto& d = enc.descriptor();
    CHECK(d.tokens == 5);
    CHECK_NOTHROW(d.validate());
    const auto img = test_image(1);
    const auto a = enc.ground(img, "an image of pug.");
    const auto b = ToyEncoder({.seed = 3}).ground(img, "an image of pug.");
    CHECK(a.score == b.score);
    const auto& sa = std::get<AttentionStack<double>>(a.attention);
    const auto& sb = std::get<AttentionStack<double>>(b.attention);
    CHECK(sa.attn == sb.attn);
    CHECK(sa.grad == sb.grad);
    CHECK_NOTHROW(sa.validate());
    CHECK(a.score == doctest::Approx(enc.score(img, "an image of pug.")));
}

TEST_CASE("toy encoder reduced output matches host-side reduction") {
    const auto img = test_image(2);
    ToyEncoder full({.seed = 5});
    ToyEncoder reduced({.seed = 5, .reduce_before_return = true});
    const auto r = reduced.ground(img, "grass");
    REQUIRE(r.reduced());
    const auto want = full.ground(img, "grass").reduce();
    const auto got = r.reduce();
    for (int l = 0; l < want.layers; ++l) CHECK(got.abar[l].isApprox(want.abar[l]));
}

TEST_CASE("toy encoder embeddings are unit norm") {
    ToyEncoder enc({.seed = 9, .embed_dim = 16});
    const auto e = enc.embed(test_image(4));
    CHECK(e.size() == 16);
    CHECK(e.norm() == doctest::Approx(1.0));
    CHECK(enc.text_embedding("a b c").norm() == doctest::Approx(1.0));
}

TEST_CASE("toy encoder is safe under concurrent calls") {
    ToyEncoder enc({.seed = 11});
    const auto img = test_image(5);
    const double want = enc.ground(img, "frisbee").score;
    std::vector<std::future<double>> fs;
    for (int i = 0; i < 8; ++i) fs.push_back(std::async(std::launch::async, [&] { return enc.ground(img, "frisbee").score; }));
    for (auto& f : fs) CHECK(f.get() == want);
}

TEST_CASE("checked_ground rejects a backend that lies about its shape") {
    testing::ScriptedBackend b({}, 1, 1, 2);
    CHECK_NOTHROW(checked_ground(b, test_image(1), "x"));
    LyingBackend wrong;
    CHECK_THROWS_AS(checked_ground(wrong, test_image(1), "x"), ShapeViolation);
}

TEST_CASE("grounding prompt template") { CHECK(grounding_prompt("pug") == "an image of pug."); }

TEST_CASE("float32 payload round trip") {
    const std::vector<float> v{0.0f, -1.5f, 3.25f, 1e-8f};
    CHECK(decode_float32_le(encode_float32_le(v)) == v);
    CHECK(encode_float32_le(std::vector<float>{1.0f}) == "AACAPw==");
}

TEST_CASE("conformance fixture verdicts") {
    for (const auto& c : conformance_cases()) {
        CAPTURE(c.at("name").get<std::string>());
        BackendDescriptor expected;
        if (c.contains("descriptor")) expected.layers = c["descriptor"].value("layers", 0);
        const auto& response = c.at("response");
        const auto expect = c.at("expect").get<std::string>();
        const bool embed = c.value("op", "") == "embed";
        if (expect == "ok") {
            if (embed) {
                const auto e = parse_embed_response(response);
                CHECK(e.size() == 2);
                CHECK(e.norm() == doctest::Approx(1.0));
            } else {
                const auto r = parse_ground_response(response, expected);
                const auto red = r.reduce();
                CHECK(red.layers == 2);
                CHECK(red.tokens == 5);
                CHECK_NOTHROW(red.validate());
            }
        } else if (expect == "error") {
            CHECK_THROWS_AS(parse_ground_response(response, expected), BackendError);
        } else {
            CHECK_THROWS_AS(parse_ground_response(response, expected), ShapeViolation);
        }
    }
}

TEST_CASE("full and reduced fixture responses agree after reduction") {
    const auto cases = conformance_cases();
    const auto full = parse_ground_response(cases.at(0).at("response"), {}).reduce();
    const auto reduced = parse_ground_response(cases.at(1).at("response"), {}).reduce();
    for (int l = 0; l < 2; ++l) CHECK(full.abar[l].isApprox(reduced.abar[l], 1e-5));
}

TEST_CASE("ground response serialisation round trips") {
    ToyEncoder enc({.seed = 2});
    const auto r = enc.ground(test_image(3), "dog");
    const auto back = parse_ground_response(make_ground_response("x", r), enc.descriptor());
    CHECK(back.score == doctest::Approx(r.score));
    const auto a = r.reduce(), b = back.reduce();
    for (int l = 0; l < a.layers; ++l) CHECK(a.abar[l].isApprox(b.abar[l], 1e-5));
}

TEST_CASE("exchange matches out-of-order responses by id") {
    auto channel = std::make_unique<ReversingChannel>();
    SidecarBackend backend(std::move(channel), {});
    std::vector<json> requests;
    for (int i = 0; i < 4; ++i) requests.push_back(make_request(backend.next_request_id(), "score", test_image(1), "x"));
    const auto out = backend.exchange(requests);
    REQUIRE(out.size() == 4);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i].at("id") == requests[i].at("id"));
    CHECK(backend.score(test_image(1), "y") == doctest::Approx(2 + 4));
}

TEST_CASE("process channel against the toy sidecar") {
    SidecarBackend backend(open_channel(std::string("exec:") + MMKB_TOY_SIDECAR + " --seed 3"), {});
    ToyEncoder local({.seed = 3});
    const auto img = test_image(8);
    const auto remote = backend.ground(img, "an image of pug.");
    CHECK(backend.descriptor().tokens == 5);
    CHECK(backend.descriptor().grid_rows == 2);
    CHECK(remote.score == doctest::Approx(local.score(img, "an image of pug.")).epsilon(1e-6));
    const auto a = remote.reduce(), b = local.ground(img, "an image of pug.").reduce();
    for (int l = 0; l < a.layers; ++l) CHECK(a.abar[l].isApprox(b.abar[l], 1e-4));
    CHECK(backend.embed(img).isApprox(local.embed(img), 1e-5));
}

TEST_CASE("toy sidecar answers malformed lines with a null id") {
    ProcessChannel ch({MMKB_TOY_SIDECAR});
    ch.send_line("not json");
    const auto line = ch.receive_line();
    REQUIRE(line);
    const auto j = json::parse(*line);
    CHECK(j.at("id").is_null());
    CHECK(j.at("error") == "malformed request");
    SidecarBackend backend(std::make_unique<ProcessChannel>(std::vector<std::string>{MMKB_TOY_SIDECAR}), {});
    CHECK_THROWS_AS(backend.exchange({json{{"id", "z"}, {"op", "paint"}, {"image", inline_image_ref(test_image(1))}}})
                        .front()
                        .at("score"),
                    json::exception);
}

TEST_CASE("unreachable tcp sidecar") {
    CHECK_THROWS_AS(open_channel("127.0.0.1:1"), BackendUnavailable);
}

} // TEST_SUITE
