#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedgate/errors.hpp"
#include "fedgate/fed.hpp"
#include "fedgate/protocol.hpp"

namespace fedgate {

inline int64_t default_timeout_secs() {
    if (const char* env = std::getenv("FEDGATE_TIMEOUT_SECS")) {
        char* end = nullptr;
        const long long v = std::strtoll(env, &end, 10);
        if (!end || *end != '\0' || v < 1)
            throw ConfigError(std::string("FEDGATE_TIMEOUT_SECS must be a positive integer, got '") +
                              env + "'");
        return v;
    }
    return 300;
}

// Move-only connection with framed send/receive. Tracks how many bytes have
// arrived so protocol errors report absolute stream offsets.
class Conn {
public:
    Conn() = default;
    explicit Conn(int fd) : fd_(fd) {}
    Conn(Conn&& o) noexcept : fd_(o.fd_), bytes_in_(o.bytes_in_) { o.fd_ = -1; }
    Conn& operator=(Conn&& o) noexcept {
        if (this != &o) {
            close_fd();
            fd_ = o.fd_;
            bytes_in_ = o.bytes_in_;
            o.fd_ = -1;
        }
        return *this;
    }
    Conn(const Conn&) = delete;
    Conn& operator=(const Conn&) = delete;
    ~Conn() { close_fd(); }

    bool valid() const { return fd_ >= 0; }

    void set_timeout(int64_t secs) {
        timeval tv{};
        tv.tv_sec = static_cast<time_t>(secs);
        ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
        ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    }

    void send_msg(const Message& msg) {
        const std::string frame = encode_message(msg);
        size_t sent = 0;
        while (sent < frame.size()) {
            const ssize_t n =
                ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw ProtocolError(std::string("send failed: ") + std::strerror(errno),
                                    bytes_in_);
            }
            sent += static_cast<size_t>(n);
        }
    }

    Message recv_msg() {
        uint8_t header[kFrameHeaderSize];
        recv_exact(header, kFrameHeaderSize);
        const FrameHeader h =
            parse_frame_header(header, kFrameHeaderSize, bytes_in_ - kFrameHeaderSize);
        Message msg;
        msg.kind = h.kind;
        msg.payload.resize(h.payload_len);
        if (h.payload_len > 0)
            recv_exact(reinterpret_cast<uint8_t*>(msg.payload.data()), h.payload_len);
        return msg;
    }

private:
    void close_fd() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

    void recv_exact(uint8_t* out, size_t n) {
        size_t got = 0;
        while (got < n) {
            const ssize_t r = ::recv(fd_, out + got, n - got, 0);
            if (r == 0)
                throw ProtocolError("connection closed mid-frame", bytes_in_ + got);
            if (r < 0) {
                if (errno == EINTR) continue;
                if (errno == EAGAIN || errno == EWOULDBLOCK)
                    throw ProtocolError("receive timed out", bytes_in_ + got);
                throw ProtocolError(std::string("recv failed: ") + std::strerror(errno),
                                    bytes_in_ + got);
            }
            got += static_cast<size_t>(r);
        }
        bytes_in_ += n;
    }

    int fd_ = -1;
    size_t bytes_in_ = 0;
};

class Listener {
public:
    Listener(const std::string& host, uint16_t port) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd_ < 0) throw ProtocolError(std::string("socket: ") + std::strerror(errno), 0);
        const int one = 1;
        ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
            ::close(fd_);
            throw ConfigError("invalid bind address '" + host + "'");
        }
        if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 ||
            ::listen(fd_, 16) < 0) {
            const std::string err = std::strerror(errno);
            ::close(fd_);
            throw ProtocolError("bind/listen on " + host + ":" + std::to_string(port) +
                                    " failed: " + err,
                                0);
        }
        sockaddr_in bound{};
        socklen_t len = sizeof bound;
        ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
        port_ = ntohs(bound.sin_port);
    }
    Listener(const Listener&) = delete;
    Listener& operator=(const Listener&) = delete;
    ~Listener() {
        if (fd_ >= 0) ::close(fd_);
    }

    uint16_t port() const { return port_; }

    void set_accept_timeout(int64_t secs) {
        timeval tv{};
        tv.tv_sec = static_cast<time_t>(secs);
        ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    }

    Conn accept() {
        for (;;) {
            const int fd = ::accept(fd_, nullptr, nullptr);
            if (fd >= 0) return Conn(fd);
            if (errno == EINTR) continue;
            if (errno == EAGAIN || errno == EWOULDBLOCK)
                throw ProtocolError("timed out waiting for client connections", 0);
            throw ProtocolError(std::string("accept failed: ") + std::strerror(errno), 0);
        }
    }

private:
    int fd_ = -1;
    uint16_t port_ = 0;
};

inline Conn connect_with_retry(const std::string& host, uint16_t port, int64_t timeout_secs) {
    using clock = std::chrono::steady_clock;
    const auto deadline = clock::now() + std::chrono::seconds(timeout_secs);
    for (;;) {
        const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw ProtocolError(std::string("socket: ") + std::strerror(errno), 0);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
            ::close(fd);
            throw ConfigError("invalid server address '" + host + "'");
        }
        if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) return Conn(fd);
        ::close(fd);
        if (clock::now() >= deadline)
            throw ProtocolError("could not connect to " + host + ":" + std::to_string(port) +
                                    " within " + std::to_string(timeout_secs) + "s",
                                0);
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
}

// ---------------------------------------------------------------------------
// Server: accepts Hello handshakes until cfg.n_clients distinct, digest-valid
// clients are registered (wrong digests are sent Shutdown and dropped), then
// drives the shared round loop over the sockets. Round reports are broadcast
// as Metrics frames; Shutdown ends every client.
// ---------------------------------------------------------------------------

inline FedRunResult run_fed_server(const ArchConfig& arch, const FedConfig& cfg,
                                   const std::vector<PreparedSample>& val, Listener& listener,
                                   int64_t timeout_secs, bool parallel,
                                   const std::function<void(const RoundReport&)>& on_round = {}) {
    cfg.validate();
    DiffGated ref_model(arch);
    const uint64_t digest = ref_model.digest();

    listener.set_accept_timeout(timeout_secs);
    std::map<std::string, Conn> conns;
    while (static_cast<int64_t>(conns.size()) < cfg.n_clients) {
        Conn conn = listener.accept();
        conn.set_timeout(timeout_secs);
        Message msg = conn.recv_msg();
        if (msg.kind != MsgKind::Hello)
            throw ProtocolError(std::string("expected Hello, got ") + kind_name(msg.kind), 0);
        HelloPayload hello = parse_hello(msg.payload);
        if (hello.layout_digest != digest || conns.count(hello.client_id)) {
            conn.send_msg(make_shutdown()); // reject; keep waiting for others
            continue;
        }
        conns.emplace(hello.client_id, std::move(conn));
    }
    std::vector<std::string> ids;
    for (const auto& [id, conn] : conns) ids.push_back(id);

    auto runner = [&](const std::string& id, const ModelParams& global, int64_t round,
                      const FedConfig& fc) -> ClientUpdate {
        Conn& conn = conns.at(id);
        conn.send_msg(make_global_params(global.layout_digest, global.values));
        TrainOrderPayload order;
        order.round = static_cast<uint32_t>(round);
        order.local_epochs = static_cast<uint32_t>(fc.local_epochs);
        order.batch_size = static_cast<uint32_t>(fc.batch_size);
        order.lr_min = fc.resolved_lr_min();
        order.lr_max = fc.lr_max;
        order.momentum = fc.momentum;
        order.seed = fc.seed;
        conn.send_msg(make_train_order(order));

        Message reply = conn.recv_msg();
        if (reply.kind != MsgKind::ClientUpdate)
            throw ProtocolError(std::string("expected ClientUpdate, got ") +
                                    kind_name(reply.kind),
                                0);
        ClientUpdatePayload u = parse_client_update(reply.payload);
        if (u.layout_digest != global.layout_digest)
            throw IncompatibleModelError("client '" + id + "' returned mismatched layout digest");
        if (static_cast<int64_t>(u.values.size()) != layout_numel(global.layout))
            throw ProtocolError("client '" + id + "' returned " +
                                    std::to_string(u.values.size()) + " values, expected " +
                                    std::to_string(layout_numel(global.layout)),
                                0);
        ClientUpdate result;
        result.params.layout = global.layout;
        result.params.layout_digest = u.layout_digest;
        result.params.values = std::move(u.values);
        result.n_samples = u.n_samples;
        result.local_loss = u.local_loss;
        return result;
    };

    auto broadcast_round = [&](const RoundReport& r) {
        for (auto& [id, conn] : conns) {
            try {
                conn.send_msg(make_metrics(round_log_line(r)));
            } catch (const ProtocolError&) {
                // best effort: a dead spectator must not kill the round
            }
        }
        if (on_round) on_round(r);
    };

    FedRunResult result = fed_train(arch, cfg, ids, runner, val, parallel, broadcast_round);
    for (auto& [id, conn] : conns) {
        try {
            conn.send_msg(make_shutdown());
        } catch (const ProtocolError&) {
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Client: Hello handshake, then obey GlobalParams/TrainOrder/Metrics until
// Shutdown. The training stream is derived from the TrainOrder's seed, round
// and our client id, exactly as the in-process simulator derives it.
// ---------------------------------------------------------------------------

inline void run_fed_client(const ArchConfig& arch, const std::string& client_id,
                           const std::vector<PreparedSample>& samples, const std::string& host,
                           uint16_t port, int64_t timeout_secs,
                           const std::function<void(const std::string&)>& on_metrics = {}) {
    DiffGated model(arch);
    Conn conn = connect_with_retry(host, port, timeout_secs);
    conn.set_timeout(timeout_secs);
    conn.send_msg(make_hello({client_id, model.digest()}));

    ModelParams pending;
    bool have_params = false;
    for (;;) {
        Message msg = conn.recv_msg();
        switch (msg.kind) {
            case MsgKind::GlobalParams: {
                GlobalParamsPayload g = parse_global_params(msg.payload);
                if (g.layout_digest != model.digest())
                    throw IncompatibleModelError(
                        "server sent parameters for a different model layout");
                if (static_cast<int64_t>(g.values.size()) != model.count_params())
                    throw ProtocolError("GlobalParams carries " +
                                            std::to_string(g.values.size()) +
                                            " values, expected " +
                                            std::to_string(model.count_params()),
                                        0);
                pending.layout = model.layout();
                pending.layout_digest = g.layout_digest;
                pending.values = std::move(g.values);
                have_params = true;
                break;
            }
            case MsgKind::TrainOrder: {
                if (!have_params)
                    throw ProtocolError("TrainOrder before any GlobalParams", 0);
                TrainOrderPayload order = parse_train_order(msg.payload);
                model.set_params(pending);
                LocalResult res = train_one_cycle(
                    model, samples, order.local_epochs, order.batch_size, order.lr_min,
                    order.lr_max, order.momentum,
                    client_round_rng(order.seed, order.round, client_id));
                ClientUpdatePayload u;
                u.layout_digest = model.digest();
                u.n_samples = static_cast<uint32_t>(samples.size());
                u.local_loss = res.mean_loss;
                u.values = model.get_params().values;
                conn.send_msg(make_client_update(u));
                break;
            }
            case MsgKind::Metrics:
                if (on_metrics) on_metrics(msg.payload);
                break;
            case MsgKind::Shutdown:
                return;
            default:
                throw ProtocolError(std::string("unexpected message kind ") +
                                        kind_name(msg.kind),
                                    0);
        }
    }
}

} // namespace fedgate
