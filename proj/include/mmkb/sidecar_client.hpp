#pragma once

// Client for the encoder sidecar: newline-delimited JSON over a child
// process's stdio or a TCP socket.
//
//   request   {"id", "op": "ground"|"score"|"embed", "image", "prompt"}
//   response  {"id", "score", "layers", "heads", "tokens", "reduced",
//              "attn": base64 LE float32 row-major [L][H][T][T] (or [L][T][T] when reduced),
//              "grad": same layout, absent when reduced,
//              "embedding": [float, ...] for op=embed}
//   error     {"id", "error"}
//
// Responses may arrive out of order; they are matched by id.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmkb/encoder_backend.hpp"

namespace mmkb {

class LineChannel {
public:
    virtual ~LineChannel() = default;
    virtual void send_line(const std::string& line) = 0;
    /// Next line without its terminator, or nullopt when the peer closed.
    virtual std::optional<std::string> receive_line() = 0;
};

/// Spawns argv[0] with argv and talks to it over its stdin/stdout.
class ProcessChannel : public LineChannel {
public:
    explicit ProcessChannel(const std::vector<std::string>& argv);
    ~ProcessChannel() override;
    ProcessChannel(const ProcessChannel&) = delete;
    ProcessChannel& operator=(const ProcessChannel&) = delete;

    void send_line(const std::string& line) override;
    std::optional<std::string> receive_line() override;

private:
    int to_child_ = -1;
    int from_child_ = -1;
    int pid_ = -1;
    std::string buffer_;
};

/// Connects to host:port. Throws BackendUnavailable when the connection fails.
class TcpChannel : public LineChannel {
public:
    TcpChannel(const std::string& host, std::uint16_t port);
    ~TcpChannel() override;
    TcpChannel(const TcpChannel&) = delete;
    TcpChannel& operator=(const TcpChannel&) = delete;

    void send_line(const std::string& line) override;
    std::optional<std::string> receive_line() override;

private:
    int fd_ = -1;
    std::string buffer_;
};

/// "host:port" -> TcpChannel; anything else is a command line for ProcessChannel
/// (whitespace separated, prefixed with "exec:").
std::unique_ptr<LineChannel> open_channel(const std::string& address);

std::string encode_float32_le(std::span<const float> values);
std::vector<float> decode_float32_le(const std::string& base64);

nlohmann::json make_request(const std::string& id, const std::string& op, const RasterImage& image,
                            const std::string& prompt);

/// Parses a ground/score response. Shapes are checked against `expected`; zero
/// fields in `expected` are taken from the response. Throws BackendError for
/// error objects and ShapeViolation for inconsistent tensors.
GroundingResult parse_ground_response(const nlohmann::json& response, const BackendDescriptor& expected);
Eigen::VectorXd parse_embed_response(const nlohmann::json& response);

/// Serialises a grounding result into the response schema (used by the toy sidecar and tests).
/// `heads` is reported for reduced results, whose tensors no longer carry a head axis.
nlohmann::json make_ground_response(const std::string& id, const GroundingResult& result, int heads = 1);
nlohmann::json make_embed_response(const std::string& id, const Eigen::VectorXd& embedding);

class SidecarBackend : public EncoderBackend {
public:
    /// `descriptor` may leave layers/heads/tokens/grid at 0; they are learned from the
    /// first ground response (the grid is assumed square).
    SidecarBackend(std::unique_ptr<LineChannel> channel, BackendDescriptor descriptor);

    const BackendDescriptor& descriptor() const override { return descriptor_; }
    GroundingResult ground(const RasterImage& image, const std::string& prompt) override;
    double score(const RasterImage& image, const std::string& text) override;
    Eigen::VectorXd embed(const RasterImage& image) override;

    /// Sends every request before reading any response, then returns the
    /// responses in request order regardless of arrival order.
    std::vector<nlohmann::json> exchange(const std::vector<nlohmann::json>& requests);
    std::string next_request_id();

private:
    nlohmann::json round_trip(const std::string& op, const RasterImage& image, const std::string& prompt);
    void learn_shape(const nlohmann::json& response);

    std::unique_ptr<LineChannel> channel_;
    BackendDescriptor descriptor_;
    std::mutex mutex_;
    std::uint64_t next_id_ = 0;
    std::map<std::string, nlohmann::json> early_; // responses that arrived before their request was awaited
};

} // namespace mmkb
