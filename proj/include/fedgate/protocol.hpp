#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "fedgate/errors.hpp"
#include "fedgate/tensor.hpp"

namespace fedgate {

// ---------------------------------------------------------------------------
// Wire format: frame = magic "FDG1" + u8 kind + u32le payload length +
// payload. All integers little-endian, matching FGT1.
// ---------------------------------------------------------------------------

enum class MsgKind : uint8_t {
    Hello = 1,
    GlobalParams = 2,
    TrainOrder = 3,
    ClientUpdate = 4,
    Metrics = 5,
    Shutdown = 6,
};

inline const char* kind_name(MsgKind k) {
    switch (k) {
        case MsgKind::Hello: return "Hello";
        case MsgKind::GlobalParams: return "GlobalParams";
        case MsgKind::TrainOrder: return "TrainOrder";
        case MsgKind::ClientUpdate: return "ClientUpdate";
        case MsgKind::Metrics: return "Metrics";
        case MsgKind::Shutdown: return "Shutdown";
    }
    return "unknown";
}

struct Message {
    MsgKind kind = MsgKind::Shutdown;
    std::string payload;

    bool operator==(const Message&) const = default;
};

inline constexpr char kFrameMagic[4] = {'F', 'D', 'G', '1'};
inline constexpr size_t kFrameHeaderSize = 9;

namespace detail {

inline void put_u64le(std::string& out, uint64_t v) {
    put_u32le(out, static_cast<uint32_t>(v & 0xffffffffu));
    put_u32le(out, static_cast<uint32_t>(v >> 32));
}

inline uint64_t get_u64le(const uint8_t* p) {
    return static_cast<uint64_t>(get_u32le(p)) |
           (static_cast<uint64_t>(get_u32le(p + 4)) << 32);
}

inline void put_f64le(std::string& out, double v) {
    put_u64le(out, std::bit_cast<uint64_t>(v));
}

inline double get_f64le(const uint8_t* p) { return std::bit_cast<double>(get_u64le(p)); }

// Cursor over a payload with offset-carrying underflow errors.
class PayloadReader {
public:
    PayloadReader(const std::string& payload, const char* what)
        : data_(reinterpret_cast<const uint8_t*>(payload.data())), size_(payload.size()),
          what_(what) {}

    const uint8_t* take(size_t n) {
        if (size_ - pos_ < n)
            throw ProtocolError(std::string(what_) + ": truncated payload", pos_);
        const uint8_t* p = data_ + pos_;
        pos_ += n;
        return p;
    }

    uint16_t u16() {
        const uint8_t* p = take(2);
        return static_cast<uint16_t>(p[0] | (p[1] << 8));
    }
    uint32_t u32() { return get_u32le(take(4)); }
    uint64_t u64() { return get_u64le(take(8)); }
    double f64() { return get_f64le(take(8)); }

    std::string rest() {
        std::string out(reinterpret_cast<const char*>(data_ + pos_), size_ - pos_);
        pos_ = size_;
        return out;
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return size_ - pos_; }

    void expect_end() {
        if (pos_ != size_)
            throw ProtocolError(std::string(what_) + ": trailing bytes in payload", pos_);
    }

private:
    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    const char* what_;
};

} // namespace detail

inline std::string encode_message(const Message& msg) {
    const uint8_t k = static_cast<uint8_t>(msg.kind);
    if (k < 1 || k > 6) throw ProtocolError("encode: invalid message kind", 4);
    if (msg.payload.size() > 0xffffffffull)
        throw ProtocolError("encode: payload exceeds u32 length", 5);
    std::string out(kFrameMagic, 4);
    out.push_back(static_cast<char>(k));
    detail::put_u32le(out, static_cast<uint32_t>(msg.payload.size()));
    out += msg.payload;
    return out;
}

struct FrameHeader {
    MsgKind kind;
    uint32_t payload_len;
};

// Parses the fixed 9-byte header; `stream_offset` is where this frame starts
// in the overall byte stream, so reported offsets point at the bad byte.
inline FrameHeader parse_frame_header(const uint8_t* p, size_t size, size_t stream_offset = 0) {
    if (size < kFrameHeaderSize)
        throw ProtocolError("truncated frame header", stream_offset + size);
    for (size_t i = 0; i < 4; ++i)
        if (p[i] != static_cast<uint8_t>(kFrameMagic[i]))
            throw ProtocolError("bad frame magic", stream_offset + i);
    const uint8_t k = p[4];
    if (k < 1 || k > 6)
        throw ProtocolError("unknown message kind " + std::to_string(k), stream_offset + 4);
    return {static_cast<MsgKind>(k), detail::get_u32le(p + 5)};
}

// Decodes one complete frame occupying the whole buffer.
inline Message decode_message(const std::string& frame, size_t stream_offset = 0) {
    const auto* p = reinterpret_cast<const uint8_t*>(frame.data());
    const FrameHeader h = parse_frame_header(p, frame.size(), stream_offset);
    const size_t total = kFrameHeaderSize + h.payload_len;
    if (frame.size() < total)
        throw ProtocolError("truncated frame: payload declares " +
                                std::to_string(h.payload_len) + " bytes",
                            stream_offset + frame.size());
    if (frame.size() > total)
        throw ProtocolError("trailing bytes after frame", stream_offset + total);
    return {h.kind, frame.substr(kFrameHeaderSize, h.payload_len)};
}

// ---------------------------------------------------------------------------
// Payload schemas.
// ---------------------------------------------------------------------------

struct HelloPayload {
    std::string client_id;
    uint64_t layout_digest = 0;
};

inline Message make_hello(const HelloPayload& h) {
    if (h.client_id.empty() || h.client_id.size() > 0xffff)
        throw ProtocolError("Hello: client id length out of range", 0);
    std::string p;
    p.push_back(static_cast<char>(h.client_id.size() & 0xff));
    p.push_back(static_cast<char>(h.client_id.size() >> 8));
    p += h.client_id;
    detail::put_u64le(p, h.layout_digest);
    return {MsgKind::Hello, std::move(p)};
}

inline HelloPayload parse_hello(const std::string& payload) {
    detail::PayloadReader r(payload, "Hello");
    HelloPayload h;
    const uint16_t len = r.u16();
    const uint8_t* id = r.take(len);
    h.client_id.assign(reinterpret_cast<const char*>(id), len);
    h.layout_digest = r.u64();
    r.expect_end();
    if (h.client_id.empty()) throw ProtocolError("Hello: empty client id", 0);
    return h;
}

struct GlobalParamsPayload {
    uint64_t layout_digest = 0;
    std::vector<float> values;
};

inline Message make_global_params(uint64_t digest, const std::vector<float>& values) {
    std::string p;
    detail::put_u64le(p, digest);
    append_fgt(p, TensorT<float>({static_cast<int64_t>(values.size())}, values));
    return {MsgKind::GlobalParams, std::move(p)};
}

inline GlobalParamsPayload parse_global_params(const std::string& payload) {
    detail::PayloadReader r(payload, "GlobalParams");
    GlobalParamsPayload g;
    g.layout_digest = r.u64();
    const size_t blob_at = r.pos();
    try {
        size_t consumed = 0;
        TensorT<float> t = parse_fgt(reinterpret_cast<const uint8_t*>(payload.data()) + blob_at,
                                     r.remaining(), &consumed);
        if (consumed != r.remaining())
            throw ProtocolError("GlobalParams: trailing bytes after tensor blob",
                                blob_at + consumed);
        g.values = std::move(t.data);
    } catch (const DataError& e) {
        throw ProtocolError(std::string("GlobalParams: ") + e.what(), blob_at);
    }
    return g;
}

struct TrainOrderPayload {
    uint32_t round = 0;
    uint32_t local_epochs = 1;
    uint32_t batch_size = 1;
    double lr_min = 0.0, lr_max = 0.0, momentum = 0.0;
    uint64_t seed = 0;
};

inline Message make_train_order(const TrainOrderPayload& t) {
    std::string p;
    detail::put_u32le(p, t.round);
    detail::put_u32le(p, t.local_epochs);
    detail::put_u32le(p, t.batch_size);
    detail::put_f64le(p, t.lr_min);
    detail::put_f64le(p, t.lr_max);
    detail::put_f64le(p, t.momentum);
    detail::put_u64le(p, t.seed);
    return {MsgKind::TrainOrder, std::move(p)};
}

inline TrainOrderPayload parse_train_order(const std::string& payload) {
    detail::PayloadReader r(payload, "TrainOrder");
    TrainOrderPayload t;
    t.round = r.u32();
    t.local_epochs = r.u32();
    t.batch_size = r.u32();
    t.lr_min = r.f64();
    t.lr_max = r.f64();
    t.momentum = r.f64();
    t.seed = r.u64();
    r.expect_end();
    return t;
}

struct ClientUpdatePayload {
    uint64_t layout_digest = 0;
    uint32_t n_samples = 0;
    double local_loss = 0.0;
    std::vector<float> values;
};

inline Message make_client_update(const ClientUpdatePayload& u) {
    std::string p;
    detail::put_u64le(p, u.layout_digest);
    detail::put_u32le(p, u.n_samples);
    detail::put_f64le(p, u.local_loss);
    append_fgt(p, TensorT<float>({static_cast<int64_t>(u.values.size())}, u.values));
    return {MsgKind::ClientUpdate, std::move(p)};
}

inline ClientUpdatePayload parse_client_update(const std::string& payload) {
    detail::PayloadReader r(payload, "ClientUpdate");
    ClientUpdatePayload u;
    u.layout_digest = r.u64();
    u.n_samples = r.u32();
    u.local_loss = r.f64();
    const size_t blob_at = r.pos();
    try {
        size_t consumed = 0;
        TensorT<float> t = parse_fgt(reinterpret_cast<const uint8_t*>(payload.data()) + blob_at,
                                     r.remaining(), &consumed);
        if (consumed != r.remaining())
            throw ProtocolError("ClientUpdate: trailing bytes after tensor blob",
                                blob_at + consumed);
        u.values = std::move(t.data);
    } catch (const DataError& e) {
        throw ProtocolError(std::string("ClientUpdate: ") + e.what(), blob_at);
    }
    return u;
}

inline Message make_metrics(const std::string& round_log_line) {
    return {MsgKind::Metrics, round_log_line};
}

inline Message make_shutdown() { return {MsgKind::Shutdown, ""}; }

} // namespace fedgate
