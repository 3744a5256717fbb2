#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedgate/errors.hpp"

namespace fedgate {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Dense row-major n-d array. grad stays empty until a backward pass touches
// the tensor; when present it has the same length as data.
template <typename S>
struct TensorT {
    Shape shape;
    std::vector<S> data;
    bool requires_grad = false;
    std::vector<S> grad;

    TensorT() = default;
    explicit TensorT(Shape s) : shape(std::move(s)), data(shape_numel(shape), S(0)) {}
    TensorT(Shape s, std::vector<S> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape[i]; }
    size_t rank() const { return shape.size(); }

    static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
    static TensorT full(Shape s, S v) {
        TensorT t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }

    template <typename S2>
    TensorT<S2> cast() const {
        TensorT<S2> out;
        out.shape = shape;
        out.data.reserve(data.size());
        for (S v : data) out.data.push_back(static_cast<S2>(v));
        return out;
    }
};

using Tensor = TensorT<float>;

// ---------------------------------------------------------------------------
// FGT1 tensor format: magic 'F' 'G' 'T' '1', u8 dtype (1 = f32), u8 rank,
// rank x u32 little-endian dims, then row-major little-endian f32 payload.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32le(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

} // namespace detail

inline void append_fgt(std::string& out, const TensorT<float>& t) {
    out.append("FGT1");
    out.push_back(static_cast<char>(1)); // dtype f32
    out.push_back(static_cast<char>(t.rank()));
    for (int64_t d : t.shape) detail::put_u32le(out, static_cast<uint32_t>(d));
    for (float v : t.data) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_u32le(out, bits);
    }
}

inline std::string to_fgt(const TensorT<float>& t) {
    std::string out;
    out.reserve(6 + 4 * t.rank() + 4 * t.data.size());
    append_fgt(out, t);
    return out;
}

// Parses one FGT1 blob starting at data[0]; sets *consumed to the number of
// bytes eaten so callers can embed blobs inside larger payloads.
inline TensorT<float> parse_fgt(const uint8_t* data, size_t size, size_t* consumed = nullptr) {
    static const char magic[4] = {'F', 'G', 'T', '1'};
    for (size_t i = 0; i < 4; ++i) {
        if (i >= size) throw DataError("truncated FGT1 header");
        if (static_cast<char>(data[i]) != magic[i])
            throw DataError("bad FGT1 magic at byte " + std::to_string(i));
    }
    if (size < 6) throw DataError("truncated FGT1 header");
    uint8_t dtype = data[4];
    if (dtype != 1) throw DataError("unsupported FGT1 dtype " + std::to_string(dtype));
    uint8_t rank = data[5];
    size_t off = 6;
    Shape shape;
    int64_t n = 1;
    for (uint8_t i = 0; i < rank; ++i) {
        if (off + 4 > size) throw DataError("truncated FGT1 dims");
        uint32_t d = detail::get_u32le(data + off);
        off += 4;
        if (d == 0) throw DataError("FGT1 dim " + std::to_string(i) + " is zero");
        shape.push_back(static_cast<int64_t>(d));
        n *= d;
    }
    if (off + 4 * static_cast<size_t>(n) > size) throw DataError("truncated FGT1 payload");
    TensorT<float> t;
    t.shape = std::move(shape);
    t.data.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        uint32_t bits = detail::get_u32le(data + off);
        off += 4;
        std::memcpy(&t.data[static_cast<size_t>(i)], &bits, 4);
    }
    if (consumed) *consumed = off;
    return t;
}

inline TensorT<float> parse_fgt(const std::string& blob) {
    size_t consumed = 0;
    TensorT<float> t =
        parse_fgt(reinterpret_cast<const uint8_t*>(blob.data()), blob.size(), &consumed);
    if (consumed != blob.size())
        throw DataError("trailing bytes after FGT1 payload");
    return t;
}

// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot open " + tmp + " for writing");
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw DataError("write failed on " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("rename " + tmp + " -> " + path + ": " + ec.message());
}

inline std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

inline void save_fgt(const std::string& path, const TensorT<float>& t) {
    write_file_atomic(path, to_fgt(t));
}

inline TensorT<float> load_fgt(const std::string& path) {
    try {
        return parse_fgt(read_file(path));
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

} // namespace fedgate
