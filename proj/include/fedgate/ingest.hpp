#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fedgate/errors.hpp"
#include "fedgate/model.hpp"
#include "fedgate/rng.hpp"
#include "fedgate/tensor.hpp"

namespace fedgate {

// ---------------------------------------------------------------------------
// Binary PPM (P6) frames. Values are bytes over maxval 255, scaled to [0,1].
// ---------------------------------------------------------------------------

struct PpmImage {
    int64_t width = 0, height = 0;
    std::vector<uint8_t> rgb; // 3 bytes per pixel, row-major
};

inline PpmImage parse_ppm(const std::string& bytes, const std::string& origin) {
    size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < bytes.size() &&
               (bytes[pos] == ' ' || bytes[pos] == '\t' || bytes[pos] == '\n' ||
                bytes[pos] == '\r'))
            ++pos;
    };
    auto token = [&]() {
        skip_ws();
        size_t start = pos;
        while (pos < bytes.size() && !(bytes[pos] == ' ' || bytes[pos] == '\t' ||
                                       bytes[pos] == '\n' || bytes[pos] == '\r'))
            ++pos;
        if (start == pos) throw DataError(origin + ": truncated PPM header");
        return bytes.substr(start, pos - start);
    };
    if (token() != "P6") throw DataError(origin + ": not a binary PPM (P6) file");
    PpmImage img;
    try {
        img.width = std::stoll(token());
        img.height = std::stoll(token());
        const long long maxval = std::stoll(token());
        if (maxval != 255) throw DataError(origin + ": PPM maxval must be 255");
    } catch (const std::invalid_argument&) {
        throw DataError(origin + ": malformed PPM header");
    }
    if (img.width < 1 || img.height < 1) throw DataError(origin + ": degenerate PPM dims");
    ++pos; // single whitespace byte after maxval
    const size_t need = static_cast<size_t>(img.width) * static_cast<size_t>(img.height) * 3;
    if (bytes.size() - pos < need) throw DataError(origin + ": truncated PPM pixel data");
    img.rgb.assign(bytes.begin() + static_cast<ptrdiff_t>(pos),
                   bytes.begin() + static_cast<ptrdiff_t>(pos + need));
    return img;
}

inline std::string ppm_bytes(const PpmImage& img) {
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                      "\n255\n";
    out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
    return out;
}

// ---------------------------------------------------------------------------
// Frame sequences: Tensor [F,3,H,W] with F >= 2, values in [0,1].
// ---------------------------------------------------------------------------

struct VideoSample {
    std::string id;
    TensorT<float> frames{Shape{2, 3, 1, 1}}; // [F,3,H,W]
    int label = 0;
    std::string source;
};

inline std::string frame_filename(int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%05d.ppm", static_cast<int>(index));
    return buf;
}

// Reads frame_00000.ppm, frame_00001.ppm, ... with no gaps.
inline TensorT<float> load_frames(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError(dir + ": not a directory");
    int64_t count = 0;
    while (fs::exists(fs::path(dir) / frame_filename(count))) ++count;
    int64_t present = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".ppm") ++present;
    if (present > count)
        throw DataError(dir + ": frame sequence has a gap (missing " + frame_filename(count) +
                        ")");
    if (count < 2)
        throw DataError(dir + ": need at least 2 frames, found " + std::to_string(count));

    TensorT<float> frames;
    for (int64_t f = 0; f < count; ++f) {
        const std::string path = (fs::path(dir) / frame_filename(f)).string();
        PpmImage img = parse_ppm(read_file(path), path);
        if (f == 0) {
            frames = TensorT<float>({count, 3, img.height, img.width});
        } else if (img.height != frames.dim(2) || img.width != frames.dim(3)) {
            throw DataError(path + ": frame size " + std::to_string(img.width) + "x" +
                            std::to_string(img.height) + " differs from first frame");
        }
        const int64_t hw = frames.dim(2) * frames.dim(3);
        float* base = frames.data.data() + f * 3 * hw;
        for (int64_t p = 0; p < hw; ++p)
            for (int64_t c = 0; c < 3; ++c)
                base[c * hw + p] =
                    static_cast<float>(img.rgb[static_cast<size_t>(p * 3 + c)]) / 255.0f;
    }
    return frames;
}

inline void write_frames(const std::string& dir, const TensorT<float>& frames) {
    namespace fs = std::filesystem;
    if (frames.rank() != 4 || frames.dim(1) != 3)
        throw ShapeError("write_frames expects [F,3,H,W], got " + shape_str(frames.shape));
    fs::create_directories(dir);
    const int64_t hw = frames.dim(2) * frames.dim(3);
    for (int64_t f = 0; f < frames.dim(0); ++f) {
        PpmImage img;
        img.height = frames.dim(2);
        img.width = frames.dim(3);
        img.rgb.resize(static_cast<size_t>(hw) * 3);
        const float* base = frames.data.data() + f * 3 * hw;
        for (int64_t p = 0; p < hw; ++p)
            for (int64_t c = 0; c < 3; ++c) {
                const float v = std::clamp(base[c * hw + p], 0.0f, 1.0f);
                img.rgb[static_cast<size_t>(p * 3 + c)] =
                    static_cast<uint8_t>(v * 255.0f + 0.5f);
            }
        write_file_atomic((fs::path(dir) / frame_filename(f)).string(), ppm_bytes(img));
    }
}

// Signed grayscale differences: gray_t = mean over RGB, diff_t = gray_{t+1} -
// gray_t, one step shorter than the input so it aligns with the first F-1
// frames. Output [1,F-1,H,W] in [-1,1].
inline TensorT<float> frame_difference(const TensorT<float>& frames, bool negate = false) {
    if (frames.rank() != 4 || frames.dim(1) != 3)
        throw ShapeError("frame_difference expects [F,3,H,W], got " + shape_str(frames.shape));
    if (frames.dim(0) < 2) throw DataError("frame_difference needs at least 2 frames");
    const int64_t f_in = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
    const int64_t hw = h * w;
    std::vector<float> gray(static_cast<size_t>(f_in * hw));
    for (int64_t f = 0; f < f_in; ++f) {
        const float* base = frames.data.data() + f * 3 * hw;
        for (int64_t p = 0; p < hw; ++p)
            gray[static_cast<size_t>(f * hw + p)] =
                (base[p] + base[hw + p] + base[2 * hw + p]) / 3.0f;
    }
    TensorT<float> out({1, f_in - 1, h, w});
    const float sign = negate ? -1.0f : 1.0f;
    for (int64_t f = 0; f + 1 < f_in; ++f)
        for (int64_t p = 0; p < hw; ++p)
            out.data[static_cast<size_t>(f * hw + p)] =
                sign * (gray[static_cast<size_t>((f + 1) * hw + p)] -
                        gray[static_cast<size_t>(f * hw + p)]);
    return out;
}

// Uniform temporal subsampling: keep+1 indices floor(i*(raw-1)/keep).
inline std::vector<int64_t> subsample_indices(int64_t raw, int64_t keep) {
    if (raw < keep + 1)
        throw DataError("temporal sampling: " + std::to_string(raw) + " raw frames for " +
                        std::to_string(keep + 1) + " requested");
    std::vector<int64_t> idx(static_cast<size_t>(keep + 1));
    for (int64_t i = 0; i <= keep; ++i) idx[static_cast<size_t>(i)] = i * (raw - 1) / keep;
    return idx;
}

// Center-crop to the target aspect ratio, then nearest-neighbor downscale.
// Identity when the input already matches the target size.
inline TensorT<float> resize_frames(const TensorT<float>& frames, int64_t out_h, int64_t out_w) {
    const int64_t f_n = frames.dim(0), in_h = frames.dim(2), in_w = frames.dim(3);
    if (in_h < out_h || in_w < out_w)
        throw DataError("resize: input " + std::to_string(in_w) + "x" + std::to_string(in_h) +
                        " smaller than target " + std::to_string(out_w) + "x" +
                        std::to_string(out_h));
    int64_t crop_h = in_h, crop_w = in_w;
    if (in_w * out_h > in_h * out_w)
        crop_w = std::max<int64_t>(out_w, in_h * out_w / out_h);
    else
        crop_h = std::max<int64_t>(out_h, in_w * out_h / out_w);
    const int64_t y0 = (in_h - crop_h) / 2, x0 = (in_w - crop_w) / 2;

    TensorT<float> out({f_n, 3, out_h, out_w});
    for (int64_t f = 0; f < f_n; ++f)
        for (int64_t c = 0; c < 3; ++c) {
            const float* src = frames.data.data() + (f * 3 + c) * in_h * in_w;
            float* dst = out.data.data() + (f * 3 + c) * out_h * out_w;
            for (int64_t y = 0; y < out_h; ++y) {
                const int64_t sy = y0 + y * crop_h / out_h;
                for (int64_t x = 0; x < out_w; ++x)
                    dst[y * out_w + x] = src[sy * in_w + x0 + x * crop_w / out_w];
            }
        }
    return out;
}

// Model-ready pair: rgb [3,T,H,W] (first T of the T+1 sampled frames) and
// diff [1,T,H,W].
inline std::pair<TensorT<float>, TensorT<float>> make_input(const TensorT<float>& frames,
                                                            const ArchConfig& cfg) {
    if (frames.rank() != 4 || frames.dim(1) != 3)
        throw ShapeError("make_input expects [F,3,H,W], got " + shape_str(frames.shape));
    const auto idx = subsample_indices(frames.dim(0), cfg.frames);
    const int64_t in_h = frames.dim(2), in_w = frames.dim(3);
    TensorT<float> picked({cfg.frames + 1, 3, in_h, in_w});
    const int64_t fsz = 3 * in_h * in_w;
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(frames.data.data() + idx[i] * fsz, fsz,
                    picked.data.data() + static_cast<int64_t>(i) * fsz);
    TensorT<float> proc = resize_frames(picked, cfg.height, cfg.width);

    const int64_t t = cfg.frames, h = cfg.height, w = cfg.width, hw = h * w;
    TensorT<float> rgb({3, t, h, w});
    for (int64_t f = 0; f < t; ++f)
        for (int64_t c = 0; c < 3; ++c)
            std::copy_n(proc.data.data() + (f * 3 + c) * hw, hw,
                        rgb.data.data() + (c * t + f) * hw);
    return {std::move(rgb), frame_difference(proc)};
}

// ---------------------------------------------------------------------------
// Synthetic motion dataset. Class 0: one blob drifting slowly on a straight
// line. Class 1: two fast blobs that re-randomize direction every few frames
// and bounce off the borders, producing large frame differences and overlap
// events. Deterministic for a fixed seed; only +,-,*,/ and sqrt are used so
// the pixel bytes are identical across platforms.
// ---------------------------------------------------------------------------

namespace detail {

struct Blob {
    double x, y, vx, vy, radius;
    float r, g, b;
};

inline void random_direction(Rng& rng, double speed, double& vx, double& vy) {
    for (;;) {
        const double a = rng.uniform(-1.0, 1.0), b = rng.uniform(-1.0, 1.0);
        const double n2 = a * a + b * b;
        if (n2 > 0.01 && n2 <= 1.0) {
            const double inv = speed / std::sqrt(n2);
            vx = a * inv;
            vy = b * inv;
            return;
        }
    }
}

inline void paint_blob(TensorT<float>& frames, int64_t f, const Blob& blob) {
    const int64_t h = frames.dim(2), w = frames.dim(3), hw = h * w;
    float* base = frames.data.data() + f * 3 * hw;
    const double r2 = blob.radius * blob.radius;
    const int64_t y_lo = std::max<int64_t>(0, static_cast<int64_t>(blob.y - blob.radius) - 1);
    const int64_t y_hi = std::min<int64_t>(h - 1, static_cast<int64_t>(blob.y + blob.radius) + 1);
    const int64_t x_lo = std::max<int64_t>(0, static_cast<int64_t>(blob.x - blob.radius) - 1);
    const int64_t x_hi = std::min<int64_t>(w - 1, static_cast<int64_t>(blob.x + blob.radius) + 1);
    for (int64_t y = y_lo; y <= y_hi; ++y)
        for (int64_t x = x_lo; x <= x_hi; ++x) {
            const double dx = static_cast<double>(x) - blob.x;
            const double dy = static_cast<double>(y) - blob.y;
            const double d2 = dx * dx + dy * dy;
            if (d2 >= r2) continue;
            const float a = static_cast<float>(1.0 - d2 / r2); // parabolic falloff
            const int64_t p = y * w + x;
            base[p] = std::min(1.0f, base[p] + a * blob.r);
            base[hw + p] = std::min(1.0f, base[hw + p] + a * blob.g);
            base[2 * hw + p] = std::min(1.0f, base[2 * hw + p] + a * blob.b);
        }
}

inline void bounce(Blob& b, int64_t h, int64_t w) {
    if (b.x < 0.0) { b.x = -b.x; b.vx = -b.vx; }
    if (b.y < 0.0) { b.y = -b.y; b.vy = -b.vy; }
    const double xmax = static_cast<double>(w - 1), ymax = static_cast<double>(h - 1);
    if (b.x > xmax) { b.x = 2.0 * xmax - b.x; b.vx = -b.vx; }
    if (b.y > ymax) { b.y = 2.0 * ymax - b.y; b.vy = -b.vy; }
}

} // namespace detail

inline VideoSample synth_sample(int label, int64_t ordinal, int64_t frames_t, int64_t h,
                                int64_t w, uint64_t seed) {
    if (h < 8 || w < 8)
        throw ConfigError("synthetic frames need H,W >= 8, got " + std::to_string(w) + "x" +
                          std::to_string(h));
    if (frames_t < 1) throw ConfigError("synthetic clips need at least 1 difference step");
    Rng rng = Rng(seed).fork("sample:" + std::to_string(label) + ":" + std::to_string(ordinal));

    const int64_t n_blobs = label == 0 ? 1 : 2;
    const double min_dim = static_cast<double>(std::min(h, w));
    std::vector<detail::Blob> blobs;
    for (int64_t i = 0; i < n_blobs; ++i) {
        detail::Blob b;
        b.radius = rng.uniform(0.12, 0.20) * min_dim;
        b.x = rng.uniform(0.25, 0.75) * static_cast<double>(w - 1);
        b.y = rng.uniform(0.25, 0.75) * static_cast<double>(h - 1);
        const double speed = label == 0 ? rng.uniform(0.15, 0.35)
                                        : rng.uniform(0.08, 0.12) * min_dim;
        detail::random_direction(rng, speed, b.vx, b.vy);
        b.r = rng.uniform(0.5f, 1.0f);
        b.g = rng.uniform(0.5f, 1.0f);
        b.b = rng.uniform(0.5f, 1.0f);
        blobs.push_back(b);
    }

    VideoSample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "synth_%1d_%04d", label,
                  static_cast<int>(ordinal));
    s.id = idbuf;
    s.label = label;
    s.source = "synthetic";
    s.frames = TensorT<float>({frames_t + 1, 3, h, w});
    for (int64_t f = 0; f <= frames_t; ++f) {
        for (auto& b : blobs) detail::paint_blob(s.frames, f, b);
        for (auto& b : blobs) {
            b.x += b.vx;
            b.y += b.vy;
            detail::bounce(b, h, w);
            if (label == 1 && rng.next_below(3) == 0) {
                const double speed = rng.uniform(0.08, 0.12) * min_dim;
                detail::random_direction(rng, speed, b.vx, b.vy);
            }
        }
    }
    return s;
}

// 2*n_per_class samples with labels alternating 0,1,0,1,...
inline std::vector<VideoSample> synth_dataset(int64_t n_per_class, int64_t frames_t, int64_t h,
                                              int64_t w, uint64_t seed) {
    if (n_per_class < 1) throw ConfigError("synth_dataset: n_per_class must be >= 1");
    std::vector<VideoSample> out;
    out.reserve(static_cast<size_t>(2 * n_per_class));
    for (int64_t k = 0; k < n_per_class; ++k)
        for (int label = 0; label <= 1; ++label)
            out.push_back(synth_sample(label, k, frames_t, h, w, seed));
    return out;
}

// ---------------------------------------------------------------------------
// Manifest: UTF-8 lines "<path>\t<label>\t[client_id]".
// ---------------------------------------------------------------------------

struct ManifestRecord {
    std::string path;
    int label = 0;
    std::string client_id; // empty = unassigned
};

inline std::vector<ManifestRecord> parse_manifest(const std::string& text,
                                                  const std::string& origin) {
    std::vector<ManifestRecord> records;
    std::vector<std::string> seen;
    size_t pos = 0;
    int64_t lineno = 0;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno);

        ManifestRecord rec;
        const size_t t1 = line.find('\t');
        if (t1 == std::string::npos) throw DataError(where + ": expected tab-separated fields");
        rec.path = line.substr(0, t1);
        const size_t t2 = line.find('\t', t1 + 1);
        const std::string label_str =
            t2 == std::string::npos ? line.substr(t1 + 1) : line.substr(t1 + 1, t2 - t1 - 1);
        if (t2 != std::string::npos) rec.client_id = line.substr(t2 + 1);
        if (label_str == "0")
            rec.label = 0;
        else if (label_str == "1")
            rec.label = 1;
        else
            throw DataError(where + ": label must be 0 or 1, got '" + label_str + "'");
        if (rec.path.empty()) throw DataError(where + ": empty sample path");
        // Client ids appear in comma/space-delimited logs, so keep them clean.
        for (char c : rec.client_id)
            if (c == ' ' || c == ',' || c == '\t')
                throw DataError(where + ": client id '" + rec.client_id +
                                "' contains whitespace or commas");
        if (std::find(seen.begin(), seen.end(), rec.path) != seen.end())
            throw DataError(where + ": duplicate sample path '" + rec.path + "'");
        seen.push_back(rec.path);
        records.push_back(std::move(rec));
    }
    return records;
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
    return parse_manifest(read_file(path), path);
}

inline std::string manifest_text(const std::vector<ManifestRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.path + "\t" + std::to_string(r.label);
        if (!r.client_id.empty()) out += "\t" + r.client_id;
        out += "\n";
    }
    return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
    write_file_atomic(path, manifest_text(records));
}

// ---------------------------------------------------------------------------
// Prepared samples: "<id>.rgb.fgt" [3,T,H,W] + "<id>.diff.fgt" [1,T,H,W].
// ---------------------------------------------------------------------------

struct PreparedSample {
    std::string id;
    TensorT<float> rgb{Shape{3, 1, 1, 1}};
    TensorT<float> diff{Shape{1, 1, 1, 1}};
    int label = 0;
};

inline std::string rgb_path_for(const std::string& stem) { return stem + ".rgb.fgt"; }
inline std::string diff_path_for(const std::string& stem) { return stem + ".diff.fgt"; }

// Manifest rows name the rgb file; the diff file sits alongside it.
inline PreparedSample load_prepared(const std::string& manifest_dir, const ManifestRecord& rec) {
    namespace fs = std::filesystem;
    fs::path rgb_path(rec.path);
    if (rgb_path.is_relative()) rgb_path = fs::path(manifest_dir) / rgb_path;
    std::string stem = rgb_path.string();
    const std::string suffix = ".rgb.fgt";
    if (stem.size() <= suffix.size() || stem.substr(stem.size() - suffix.size()) != suffix)
        throw DataError(rec.path + ": prepared samples must end in .rgb.fgt");
    stem.resize(stem.size() - suffix.size());

    PreparedSample s;
    s.id = fs::path(stem).filename().string();
    s.label = rec.label;
    s.rgb = load_fgt(rgb_path_for(stem));
    s.diff = load_fgt(diff_path_for(stem));
    if (s.rgb.rank() != 4 || s.rgb.dim(0) != 3)
        throw DataError(rec.path + ": rgb tensor " + shape_str(s.rgb.shape) +
                        " is not [3,T,H,W]");
    if (s.diff.rank() != 4 || s.diff.dim(0) != 1 || s.diff.dim(1) != s.rgb.dim(1) ||
        s.diff.dim(2) != s.rgb.dim(2) || s.diff.dim(3) != s.rgb.dim(3))
        throw DataError(rec.path + ": diff tensor " + shape_str(s.diff.shape) +
                        " does not match rgb " + shape_str(s.rgb.shape));
    return s;
}

// Stacks per-sample tensors into batches: rgb [N,3,T,H,W], diff [N,1,T,H,W].
inline std::pair<TensorT<float>, TensorT<float>> stack_samples(
    const std::vector<PreparedSample>& samples, const std::vector<size_t>& order) {
    if (order.empty()) throw DataError("stack_samples: empty batch");
    const auto& first = samples[order[0]];
    Shape rgb_shape = first.rgb.shape, diff_shape = first.diff.shape;
    rgb_shape.insert(rgb_shape.begin(), static_cast<int64_t>(order.size()));
    diff_shape.insert(diff_shape.begin(), static_cast<int64_t>(order.size()));
    TensorT<float> rgb(rgb_shape), diff(diff_shape);
    const int64_t rgb_sz = first.rgb.numel(), diff_sz = first.diff.numel();
    for (size_t i = 0; i < order.size(); ++i) {
        const auto& s = samples[order[i]];
        if (s.rgb.shape != first.rgb.shape || s.diff.shape != first.diff.shape)
            throw DataError("stack_samples: sample '" + s.id + "' shape " +
                            shape_str(s.rgb.shape) + " differs from '" + first.id + "' " +
                            shape_str(first.rgb.shape));
        std::copy_n(s.rgb.data.data(), rgb_sz,
                    rgb.data.data() + static_cast<int64_t>(i) * rgb_sz);
        std::copy_n(s.diff.data.data(), diff_sz,
                    diff.data.data() + static_cast<int64_t>(i) * diff_sz);
    }
    return {std::move(rgb), std::move(diff)};
}

} // namespace fedgate
