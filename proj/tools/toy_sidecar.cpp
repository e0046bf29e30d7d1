// toy_sidecar: serves the encoder sidecar protocol over stdin/stdout with the toy encoder.

#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmkb/raster.hpp"
#include "mmkb/sidecar_client.hpp"
#include "mmkb/toy_encoder.hpp"

using nlohmann::json;
using namespace mmkb;

int main(int argc, char** argv) {
    ToyEncoderConfig cfg;
    CLI::App app{"Toy encoder sidecar (newline-delimited JSON on stdio)"};
    app.add_option("--seed", cfg.seed, "Encoder weight seed")->capture_default_str();
    app.add_flag("--reduce", cfg.reduce_before_return, "Return head-reduced attention");
    app.add_option("--grid", cfg.grid_rows, "Patch grid side")->capture_default_str();
    CLI11_PARSE(app, argc, argv);
    cfg.grid_cols = cfg.grid_rows;

    ToyEncoder encoder(cfg);
    std::string line;
    while (std::getline(std::cin, line)) {
        json response;
        const json request = json::parse(line, nullptr, false);
        if (request.is_discarded() || !request.is_object() || !request.contains("id") || !request["id"].is_string()) {
            response = json{{"id", nullptr}, {"error", "malformed request"}};
        } else {
            const auto id = request["id"].get<std::string>();
            try {
                const auto op = request.at("op").get<std::string>();
                const auto image = load_image(request.at("image").get<std::string>());
                if (op == "ground") {
                    response = make_ground_response(id, encoder.ground(image, request.at("prompt").get<std::string>()),
                                                    cfg.heads);
                } else if (op == "score") {
                    response = json{{"id", id}, {"score", encoder.score(image, request.at("prompt").get<std::string>())}};
                } else if (op == "embed") {
                    response = make_embed_response(id, encoder.embed(image));
                } else {
                    response = json{{"id", id}, {"error", "unknown op '" + op + "'"}};
                }
            } catch (const std::exception& e) {
                response = json{{"id", id}, {"error", e.what()}};
            }
        }
        std::cout << response.dump() << '\n' << std::flush;
    }
    return 0;
}
