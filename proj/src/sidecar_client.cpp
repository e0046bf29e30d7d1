#include "mmkb/sidecar_client.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <sstream>

#include "mmkb/codec.hpp"

namespace mmkb {

using nlohmann::json;

namespace {

void write_all(int fd, const std::string& data, bool socket) {
    std::size_t off = 0;
    while (off < data.size()) {
        const ssize_t n = socket ? ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL)
                                 : ::write(fd, data.data() + off, data.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw BackendUnavailable(std::string("sidecar write failed: ") + std::strerror(errno));
        }
        off += static_cast<std::size_t>(n);
    }
}

std::optional<std::string> read_line(int fd, std::string& buffer) {
    for (;;) {
        if (const auto nl = buffer.find('\n'); nl != std::string::npos) {
            std::string line = buffer.substr(0, nl);
            buffer.erase(0, nl + 1);
            if (!line.empty() && line.back() == '\r') line.pop_back();
            return line;
        }
        char chunk[65536];
        const ssize_t n = ::read(fd, chunk, sizeof chunk);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw BackendUnavailable(std::string("sidecar read failed: ") + std::strerror(errno));
        }
        if (n == 0) {
            if (buffer.empty()) return std::nullopt;
            std::string line = std::move(buffer);
            buffer.clear();
            return line;
        }
        buffer.append(chunk, static_cast<std::size_t>(n));
    }
}

} // namespace

ProcessChannel::ProcessChannel(const std::vector<std::string>& argv) {
    if (argv.empty()) throw BackendUnavailable("empty sidecar command");
    ::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2];
    int out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) throw BackendUnavailable("pipe() failed");

    std::vector<char*> cargv;
    for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);

    const pid_t pid = ::fork();
    if (pid < 0) throw BackendUnavailable("fork() failed");
    if (pid == 0) {
        ::dup2(in_pipe[0], STDIN_FILENO);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        ::close(out_pipe[0]);
        ::close(out_pipe[1]);
        ::execvp(cargv[0], cargv.data());
        ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    pid_ = pid;
}

ProcessChannel::~ProcessChannel() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    if (pid_ > 0) {
        int status = 0;
        ::waitpid(pid_, &status, 0);
    }
}

void ProcessChannel::send_line(const std::string& line) { write_all(to_child_, line + "\n", false); }

std::optional<std::string> ProcessChannel::receive_line() { return read_line(from_child_, buffer_); }

TcpChannel::TcpChannel(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port);
    if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0)
        throw BackendUnavailable("cannot resolve " + host + ": " + ::gai_strerror(rc));
    for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
        const int fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) {
            fd_ = fd;
            break;
        }
        ::close(fd);
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) throw BackendUnavailable("cannot connect to sidecar at " + host + ":" + service);
}

TcpChannel::~TcpChannel() {
    if (fd_ >= 0) ::close(fd_);
}

void TcpChannel::send_line(const std::string& line) { write_all(fd_, line + "\n", true); }

std::optional<std::string> TcpChannel::receive_line() { return read_line(fd_, buffer_); }

std::unique_ptr<LineChannel> open_channel(const std::string& address) {
    constexpr std::string_view exec_prefix = "exec:";
    if (address.starts_with(exec_prefix)) {
        std::istringstream words(address.substr(exec_prefix.size()));
        std::vector<std::string> argv;
        for (std::string w; words >> w;) argv.push_back(w);
        return std::make_unique<ProcessChannel>(argv);
    }
    const auto colon = address.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == address.size())
        throw BackendUnavailable("sidecar address must be host:port or exec:<command>");
    int port = 0;
    try {
        port = std::stoi(address.substr(colon + 1));
    } catch (const std::logic_error&) {
        throw BackendUnavailable("bad sidecar port in '" + address + "'");
    }
    if (port < 1 || port > 65535) throw BackendUnavailable("bad sidecar port in '" + address + "'");
    return std::make_unique<TcpChannel>(address.substr(0, colon), static_cast<std::uint16_t>(port));
}

std::string encode_float32_le(std::span<const float> values) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(values.size() * 4);
    for (float v : values) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    return base64_encode(bytes);
}

std::vector<float> decode_float32_le(const std::string& base64) {
    const auto bytes = base64_decode(base64);
    if (bytes.size() % 4 != 0) throw ShapeViolation("float32 payload length is not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

json make_request(const std::string& id, const std::string& op, const RasterImage& image, const std::string& prompt) {
    return json{{"id", id}, {"op", op}, {"image", inline_image_ref(image)}, {"prompt", prompt}};
}

namespace {

void throw_if_error(const json& response) {
    if (const auto it = response.find("error"); it != response.end()) {
        throw BackendError("sidecar error: " + (it->is_string() ? it->get<std::string>() : it->dump()));
    }
}

int require_int(const json& j, const char* key) {
    const auto it = j.find(key);
    if (it == j.end() || !it->is_number_integer()) throw ShapeViolation(std::string("response lacks integer '") + key + "'");
    return it->get<int>();
}

void check_field(int& expected, int got, const char* what) {
    if (expected == 0) expected = got;
    if (expected != got)
        throw ShapeViolation(std::string("response ") + what + " = " + std::to_string(got) + ", descriptor says " +
                             std::to_string(expected));
}

std::vector<MatrixX<double>> unpack(const std::vector<float>& flat, std::size_t count, int tokens) {
    const std::size_t tt = static_cast<std::size_t>(tokens) * tokens;
    if (flat.size() != count * tt)
        throw ShapeViolation("tensor payload has " + std::to_string(flat.size()) + " floats, expected " +
                             std::to_string(count * tt));
    std::vector<MatrixX<double>> out;
    out.reserve(count);
    for (std::size_t m = 0; m < count; ++m) {
        MatrixX<double> mat(tokens, tokens);
        for (int r = 0; r < tokens; ++r)
            for (int c = 0; c < tokens; ++c) mat(r, c) = flat[m * tt + static_cast<std::size_t>(r) * tokens + c];
        out.push_back(std::move(mat));
    }
    return out;
}

std::vector<float> pack(const std::vector<MatrixX<double>>& mats) {
    std::vector<float> flat;
    for (const auto& m : mats)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(static_cast<float>(m(r, c)));
    return flat;
}

} // namespace

GroundingResult parse_ground_response(const json& response, const BackendDescriptor& expected) {
    throw_if_error(response);
    const auto score = response.find("score");
    if (score == response.end() || !score->is_number()) throw ShapeViolation("response lacks numeric 'score'");
    GroundingResult result;
    result.score = score->get<double>();
    if (!std::isfinite(result.score)) throw ShapeViolation("response score is not finite");

    BackendDescriptor shape = expected;
    check_field(shape.layers, require_int(response, "layers"), "layers");
    check_field(shape.heads, require_int(response, "heads"), "heads");
    check_field(shape.tokens, require_int(response, "tokens"), "tokens");
    if (shape.layers < 1 || shape.heads < 1 || shape.tokens < 2) throw ShapeViolation("response shape is degenerate");
    const auto reduced = response.find("reduced");
    if (reduced == response.end() || !reduced->is_boolean()) throw ShapeViolation("response lacks boolean 'reduced'");
    const auto attn = response.find("attn");
    if (attn == response.end() || !attn->is_string()) throw ShapeViolation("response lacks base64 'attn'");

    const auto L = static_cast<std::size_t>(shape.layers);
    const auto H = static_cast<std::size_t>(shape.heads);
    try {
        if (reduced->get<bool>()) {
            if (response.contains("grad")) throw ShapeViolation("reduced response must not carry 'grad'");
            ReducedAttention<double> r;
            r.layers = shape.layers;
            r.tokens = shape.tokens;
            r.abar = unpack(decode_float32_le(attn->get<std::string>()), L, shape.tokens);
            result.attention = std::move(r);
        } else {
            const auto grad = response.find("grad");
            if (grad == response.end() || !grad->is_string()) throw ShapeViolation("response lacks base64 'grad'");
            AttentionStack<double> s;
            s.layers = shape.layers;
            s.heads = shape.heads;
            s.tokens = shape.tokens;
            s.attn = unpack(decode_float32_le(attn->get<std::string>()), L * H, shape.tokens);
            s.grad = unpack(decode_float32_le(grad->get<std::string>()), L * H, shape.tokens);
            result.attention = std::move(s);
        }
    } catch (const ShapeViolation&) {
        throw;
    } catch (const DataError& e) {
        throw ShapeViolation(e.what());
    }
    return result;
}

Eigen::VectorXd parse_embed_response(const json& response) {
    throw_if_error(response);
    const auto emb = response.find("embedding");
    if (emb == response.end() || !emb->is_array() || emb->empty()) throw ShapeViolation("response lacks 'embedding'");
    Eigen::VectorXd v(static_cast<Eigen::Index>(emb->size()));
    for (std::size_t i = 0; i < emb->size(); ++i) {
        if (!(*emb)[i].is_number()) throw ShapeViolation("embedding entries must be numbers");
        v(static_cast<Eigen::Index>(i)) = (*emb)[i].get<double>();
    }
    return v;
}

json make_ground_response(const std::string& id, const GroundingResult& result, int heads) {
    json j{{"id", id}, {"score", result.score}};
    if (const auto* r = std::get_if<ReducedAttention<double>>(&result.attention)) {
        j["layers"] = r->layers;
        j["heads"] = heads;
        j["tokens"] = r->tokens;
        j["reduced"] = true;
        j["attn"] = encode_float32_le(pack(r->abar));
    } else {
        const auto& s = std::get<AttentionStack<double>>(result.attention);
        j["layers"] = s.layers;
        j["heads"] = s.heads;
        j["tokens"] = s.tokens;
        j["reduced"] = false;
        j["attn"] = encode_float32_le(pack(s.attn));
        j["grad"] = encode_float32_le(pack(s.grad));
    }
    return j;
}

json make_embed_response(const std::string& id, const Eigen::VectorXd& embedding) {
    return json{{"id", id}, {"embedding", std::vector<double>(embedding.data(), embedding.data() + embedding.size())}};
}

SidecarBackend::SidecarBackend(std::unique_ptr<LineChannel> channel, BackendDescriptor descriptor)
    : channel_(std::move(channel)), descriptor_(std::move(descriptor)) {
    if (descriptor_.name.empty()) descriptor_.name = "sidecar";
    descriptor_.max_in_flight = 1;
}

std::string SidecarBackend::next_request_id() { return "r" + std::to_string(next_id_++); }

std::vector<json> SidecarBackend::exchange(const std::vector<json>& requests) {
    std::vector<std::string> ids;
    for (const auto& r : requests) {
        ids.push_back(r.at("id").get<std::string>());
        channel_->send_line(r.dump());
    }
    std::vector<json> out(requests.size());
    std::size_t pending = requests.size();
    std::vector<bool> done(requests.size(), false);
    const auto settle = [&](const std::string& id, json& response) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!done[i] && ids[i] == id) {
                out[i] = std::move(response);
                done[i] = true;
                --pending;
                return true;
            }
        }
        return false;
    };
    for (auto it = early_.begin(); it != early_.end() && pending > 0;) {
        if (settle(it->first, it->second)) {
            it = early_.erase(it);
        } else {
            ++it;
        }
    }
    while (pending > 0) {
        const auto line = channel_->receive_line();
        if (!line) throw BackendUnavailable("sidecar closed the connection");
        json response = json::parse(*line, nullptr, false);
        if (response.is_discarded() || !response.is_object()) throw BackendError("sidecar sent unparsable line");
        const auto id = response.find("id");
        if (id == response.end() || id->is_null()) {
            throw BackendError("sidecar rejected a request: " + response.value("error", std::string("unknown error")));
        }
        if (!id->is_string()) throw BackendError("sidecar response id is not a string");
        const std::string key = id->get<std::string>();
        if (!settle(key, response)) early_[key] = std::move(response);
    }
    return out;
}

json SidecarBackend::round_trip(const std::string& op, const RasterImage& image, const std::string& prompt) {
    const std::string id = next_request_id();
    return exchange({make_request(id, op, image, prompt)}).front();
}

void SidecarBackend::learn_shape(const json& response) {
    if (descriptor_.layers != 0 && descriptor_.tokens != 0 && descriptor_.grid_rows != 0) return;
    if (response.contains("error")) return;
    if (descriptor_.layers == 0) descriptor_.layers = response.value("layers", 0);
    if (descriptor_.heads == 0) descriptor_.heads = response.value("heads", 0);
    if (descriptor_.tokens == 0) descriptor_.tokens = response.value("tokens", 0);
    if (descriptor_.grid_rows == 0 && descriptor_.tokens > 1) {
        const int side = static_cast<int>(std::lround(std::sqrt(descriptor_.tokens - 1)));
        if (side * side != descriptor_.tokens - 1)
            throw ShapeViolation("cannot infer a square patch grid for T = " + std::to_string(descriptor_.tokens));
        descriptor_.grid_rows = descriptor_.grid_cols = side;
    }
}

GroundingResult SidecarBackend::ground(const RasterImage& image, const std::string& prompt) {
    std::lock_guard lock(mutex_);
    const json response = round_trip("ground", image, prompt);
    learn_shape(response);
    auto result = parse_ground_response(response, descriptor_);
    descriptor_.returns_reduced = result.reduced();
    return result;
}

double SidecarBackend::score(const RasterImage& image, const std::string& text) {
    std::lock_guard lock(mutex_);
    const json response = round_trip("score", image, text);
    throw_if_error(response);
    const auto s = response.find("score");
    if (s == response.end() || !s->is_number()) throw ShapeViolation("score response lacks numeric 'score'");
    return s->get<double>();
}

Eigen::VectorXd SidecarBackend::embed(const RasterImage& image) {
    std::lock_guard lock(mutex_);
    return parse_embed_response(round_trip("embed", image, ""));
}

} // namespace mmkb
