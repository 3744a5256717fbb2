#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedgate/autodiff.hpp"
#include "fedgate/rng.hpp"
#include "fedgate/tensor.hpp"

namespace fedgate {

// Gated two-stream video classifier, scaled by configuration. Both channels
// run the same stack of depthwise-separable conv blocks; the motion channel's
// final output gates the appearance features via a sigmoid multiply, followed
// by temporal pooling, one merging conv block and a fully connected head
// producing a single logit per clip.
struct ArchConfig {
    int64_t frames = 8; // T: input frames per channel; raw clips need T+1
    int64_t height = 24;
    int64_t width = 24;
    int64_t blocks = 2; // conv blocks per channel
    std::vector<int64_t> widths = {8, 16};
    int64_t fc_width = 32;
    double dropout_p = 0.5;
    int64_t temporal_pool = 2; // window of the temporal max-pool at the merge
    int64_t motion_channels = 1;

    void validate() const {
        if (frames < 1 || height < 1 || width < 1)
            throw ConfigError("arch: frames/height/width must be positive");
        if (blocks < 1) throw ConfigError("arch: need at least one conv block");
        if (static_cast<int64_t>(widths.size()) != blocks)
            throw ConfigError("arch: " + std::to_string(widths.size()) + " widths for " +
                              std::to_string(blocks) + " blocks");
        for (int64_t w : widths)
            if (w < 1) throw ConfigError("arch: channel widths must be positive");
        if (fc_width < 1) throw ConfigError("arch: fc_width must be positive");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0))
            throw ConfigError("arch: dropout_p must be in [0,1)");
        if (temporal_pool < 1) throw ConfigError("arch: temporal_pool must be positive");
        if (motion_channels < 1) throw ConfigError("arch: motion_channels must be positive");
    }
};

struct ParamSpec {
    std::string name;
    Shape shape;
};
using Layout = std::vector<ParamSpec>;

inline std::string layout_text(const Layout& layout) {
    std::string out;
    for (const auto& p : layout) {
        out += p.name;
        for (int64_t d : p.shape) out += " " + std::to_string(d);
        out += "\n";
    }
    return out;
}

inline uint64_t layout_digest(const Layout& layout) { return fnv1a64(layout_text(layout)); }

inline int64_t layout_numel(const Layout& layout) {
    int64_t n = 0;
    for (const auto& p : layout) n += shape_numel(p.shape);
    return n;
}

// Flat snapshot of all model parameters. Two ModelParams may be averaged or
// exchanged iff their layout digests are equal.
struct ModelParams {
    Layout layout;
    std::vector<float> values;
    uint64_t layout_digest = 0;
};

template <typename S>
class DiffGatedT {
public:
    using TPtr = TensorPtrT<S>;

    static constexpr int64_t kSpatialKernel = 3;
    static constexpr int64_t kTemporalKernel = 3;
    static constexpr int64_t kRgbChannels = 3;

    explicit DiffGatedT(const ArchConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        validate_extents();
        int64_t c_in = kRgbChannels;
        for (int64_t b = 0; b < cfg_.blocks; ++b) {
            rgb_.push_back(make_block("rgb" + std::to_string(b), c_in, cfg_.widths[b]));
            c_in = cfg_.widths[b];
        }
        c_in = cfg_.motion_channels;
        for (int64_t b = 0; b < cfg_.blocks; ++b) {
            diff_.push_back(make_block("diff" + std::to_string(b), c_in, cfg_.widths[b]));
            c_in = cfg_.widths[b];
        }
        const int64_t cw = cfg_.widths.back();
        merge_ = make_block("merge", cw, cw);
        fc_w_ = add_param("fc.w", {cfg_.fc_width, flat_features()});
        fc_b_ = add_param("fc.b", {cfg_.fc_width});
        head_w_ = add_param("head.w", {1, cfg_.fc_width});
        head_b_ = add_param("head.b", {1});
    }

    const ArchConfig& config() const { return cfg_; }

    // Fan-in-scaled uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)), on all
    // conv/dense weights; biases zero. The gain of 6 (rather than 3) keeps
    // activation variance roughly constant through the relu stack; with the
    // smaller gain each of the ~10 weight layers loses a factor sqrt(2) and
    // the head sees features ~30x too small to train in reasonable time.
    // The head layer stays zero so an untrained model scores every input
    // exactly 0.5, which pins the round-0 evaluation of a fresh federated
    // run at the chance level.
    // Each parameter draws from its own stream forked off rng by name.
    void init(const Rng& rng) {
        for (auto& [name, t] : params_) {
            std::fill(t->data.begin(), t->data.end(), S(0));
            const bool is_weight = name.size() > 2 && name.substr(name.size() - 2) == ".w";
            const bool is_conv_weight =
                !is_weight && (name.ends_with("sw") || name.ends_with("tw") || name.ends_with("pw"));
            if (name.rfind("head.", 0) == 0) continue;
            if (is_weight || is_conv_weight) {
                int64_t fan_in = 1;
                for (size_t i = 1; i < t->shape.size(); ++i) fan_in *= t->shape[i];
                const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
                Rng stream = rng.fork(name);
                for (auto& v : t->data) v = static_cast<S>(stream.uniform(-bound, bound));
            }
        }
    }

    int64_t count_params() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t->numel();
        return n;
    }

    const Layout& layout() const { return layout_; }
    uint64_t digest() const { return digest_; }

    // Live parameter tensors in layout order (shared with the graph), for
    // optimizers and gradient checking.
    const std::vector<std::pair<std::string, TPtr>>& named_params() const { return params_; }

    ModelParams get_params() const {
        ModelParams p;
        p.layout = layout_;
        p.layout_digest = digest_;
        p.values.reserve(static_cast<size_t>(count_params()));
        for (const auto& [name, t] : params_)
            for (S v : t->data) p.values.push_back(static_cast<float>(v));
        return p;
    }

    void set_params(const ModelParams& p) {
        if (p.layout_digest != digest_)
            throw IncompatibleModelError(
                "parameter layout digest mismatch: model " + digest_hex(digest_) + ", params " +
                digest_hex(p.layout_digest));
        if (static_cast<int64_t>(p.values.size()) != count_params())
            throw IncompatibleModelError("parameter vector length " +
                                         std::to_string(p.values.size()) + ", expected " +
                                         std::to_string(count_params()));
        size_t off = 0;
        for (auto& [name, t] : params_)
            for (auto& v : t->data) v = static_cast<S>(p.values[off++]);
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t->zero_grad();
    }

    // Gradients flattened in layout order; zeros where a parameter was never
    // touched by a backward pass.
    std::vector<float> collect_grads() const {
        std::vector<float> g;
        g.reserve(static_cast<size_t>(count_params()));
        for (const auto& [name, t] : params_) {
            if (t->grad.empty()) {
                g.insert(g.end(), static_cast<size_t>(t->numel()), 0.0f);
            } else {
                for (S v : t->grad) g.push_back(static_cast<float>(v));
            }
        }
        return g;
    }

    TPtr forward(TapeT<S>& tape, const TPtr& rgb, const TPtr& diff, bool training,
                 Rng* rng = nullptr) {
        check_input(rgb, kRgbChannels, "rgb");
        check_input(diff, cfg_.motion_channels, "diff");
        if (rgb->dim(0) != diff->dim(0))
            throw ShapeError("channel batch mismatch: rgb " + shape_str(rgb->shape) +
                             " vs diff " + shape_str(diff->shape));
        auto feat = appearance_features(tape, rgb);
        auto gate_pre = gate_preactivation(tape, diff);
        return merge_head(tape, feat, gate_pre, training, rng);
    }

    TPtr appearance_features(TapeT<S>& tape, const TPtr& rgb) {
        auto x = rgb;
        for (auto& blk : rgb_) {
            x = separable(tape, x, blk);
            x = relu(tape, x);
            x = maxpool3d(tape, x, {1, 2, 2}, {1, 2, 2});
        }
        return x;
    }

    // Motion-channel output before its sigmoid. The final block's sigmoid is
    // applied at the merge; max-pool commutes with it, so pooling first gives
    // identical values.
    TPtr gate_preactivation(TapeT<S>& tape, const TPtr& diff) {
        auto x = diff;
        for (int64_t b = 0; b < cfg_.blocks; ++b) {
            x = separable(tape, x, diff_[static_cast<size_t>(b)]);
            if (b + 1 < cfg_.blocks) x = relu(tape, x);
            x = maxpool3d(tape, x, {1, 2, 2}, {1, 2, 2});
        }
        return x;
    }

    // sigmoid(gate) * features, then temporal max-pool.
    TPtr gated_pool(TapeT<S>& tape, const TPtr& features, const TPtr& gate_preact) {
        auto gate = sigmoid(tape, gate_preact);
        auto merged = mul(tape, features, gate);
        return maxpool3d(tape, merged, {cfg_.temporal_pool, 1, 1}, {cfg_.temporal_pool, 1, 1});
    }

    TPtr merge_head(TapeT<S>& tape, const TPtr& features, const TPtr& gate_preact, bool training,
                    Rng* rng = nullptr) {
        auto x = gated_pool(tape, features, gate_preact);
        x = separable(tape, x, merge_);
        x = relu(tape, x);
        x = maxpool3d(tape, x, {1, 2, 2}, {1, 2, 2});
        const int64_t n = x->dim(0);
        x = reshape(tape, x, {n, flat_features()});
        x = dense(tape, x, fc_w_, fc_b_);
        x = relu(tape, x);
        if (training && cfg_.dropout_p > 0.0) {
            if (!rng) throw ConfigError("training-mode forward requires an rng for dropout");
            x = dropout(tape, x, cfg_.dropout_p, *rng, true);
        }
        x = dense(tape, x, head_w_, head_b_);
        return reshape(tape, x, {n});
    }

private:
    struct Block {
        TPtr sw, sb, tw, tb, pw, pb;
    };

    static std::string digest_hex(uint64_t d) {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
        return buf;
    }

    TPtr add_param(const std::string& name, Shape shape) {
        auto t = make_leaf(TensorT<S>(std::move(shape)), true);
        params_.emplace_back(name, t);
        layout_.push_back({name, t->shape});
        digest_ = layout_digest(layout_);
        return t;
    }

    Block make_block(const std::string& prefix, int64_t c_in, int64_t c_out) {
        Block b;
        b.sw = add_param(prefix + ".sw", {c_in, 1, 1, kSpatialKernel, kSpatialKernel});
        b.sb = add_param(prefix + ".sb", {c_in});
        b.tw = add_param(prefix + ".tw", {c_in, 1, kTemporalKernel, 1, 1});
        b.tb = add_param(prefix + ".tb", {c_in});
        b.pw = add_param(prefix + ".pw", {c_out, c_in, 1, 1, 1});
        b.pb = add_param(prefix + ".pb", {c_out});
        return b;
    }

    TPtr separable(TapeT<S>& tape, const TPtr& x, const Block& b) {
        return separable_conv3d(tape, x, b.sw, b.sb, b.tw, b.tb, b.pw, b.pb);
    }

    // Walks every pooling stage at build time so a config that would collapse
    // an extent below 1 fails with the stage named.
    void validate_extents() {
        int64_t t = cfg_.frames, h = cfg_.height, w = cfg_.width;
        auto pool = [](const std::string& stage, int64_t& d, int64_t window) {
            if (window > d)
                throw ConfigError("build: " + stage + ": extent " + std::to_string(d) +
                                  " smaller than pool window " + std::to_string(window));
            d = (d - window) / window + 1;
        };
        for (int64_t b = 0; b < cfg_.blocks; ++b) {
            const std::string stage = "channel block " + std::to_string(b) + " pool";
            pool(stage + " (height)", h, 2);
            pool(stage + " (width)", w, 2);
        }
        pool("merge temporal pool", t, cfg_.temporal_pool);
        pool("merge block pool (height)", h, 2);
        pool("merge block pool (width)", w, 2);
        t_out_ = t;
        h_out_ = h;
        w_out_ = w;
    }

    int64_t flat_features() const { return cfg_.widths.back() * t_out_ * h_out_ * w_out_; }

    void check_input(const TPtr& x, int64_t channels, const char* which) const {
        if (x->rank() != 5 || x->dim(1) != channels || x->dim(2) != cfg_.frames ||
            x->dim(3) != cfg_.height || x->dim(4) != cfg_.width)
            throw ShapeError(std::string(which) + " input " + shape_str(x->shape) +
                             " does not match [N," + std::to_string(channels) + "," +
                             std::to_string(cfg_.frames) + "," + std::to_string(cfg_.height) +
                             "," + std::to_string(cfg_.width) + "]");
    }

    ArchConfig cfg_;
    std::vector<std::pair<std::string, TPtr>> params_;
    Layout layout_;
    uint64_t digest_ = 0;
    std::vector<Block> rgb_, diff_;
    Block merge_;
    TPtr fc_w_, fc_b_, head_w_, head_b_;
    int64_t t_out_ = 0, h_out_ = 0, w_out_ = 0;
};

using DiffGated = DiffGatedT<float>;

// ---------------------------------------------------------------------------
// Checkpoint: text header (digest + one "name dims..." line per parameter),
// a "blob" separator, then the flat value vector as an FGT1 blob.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const ModelParams& p) {
    std::string out = "FGCP1\n";
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(p.layout_digest));
    out += std::string("digest ") + buf + "\n";
    out += "params " + std::to_string(p.layout.size()) + "\n";
    out += layout_text(p.layout);
    out += "blob\n";
    append_fgt(out, TensorT<float>({static_cast<int64_t>(p.values.size())}, p.values));
    write_file_atomic(path, out);
}

inline ModelParams load_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    size_t pos = 0;
    auto next_line = [&]() {
        size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw DataError(path + ": truncated checkpoint header");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (next_line() != "FGCP1") throw DataError(path + ": not a checkpoint file");
    const std::string digest_line = next_line();
    if (digest_line.rfind("digest ", 0) != 0) throw DataError(path + ": missing digest");
    const uint64_t stored = std::stoull(digest_line.substr(7), nullptr, 16);
    const std::string count_line = next_line();
    if (count_line.rfind("params ", 0) != 0) throw DataError(path + ": missing param count");
    const size_t count = std::stoull(count_line.substr(7));

    ModelParams p;
    for (size_t i = 0; i < count; ++i) {
        const std::string line = next_line();
        std::istringstream is(line);
        ParamSpec spec;
        is >> spec.name;
        int64_t d;
        while (is >> d) spec.shape.push_back(d);
        if (spec.name.empty() || spec.shape.empty())
            throw DataError(path + ": bad layout line '" + line + "'");
        p.layout.push_back(std::move(spec));
    }
    if (next_line() != "blob") throw DataError(path + ": missing blob separator");
    TensorT<float> flat = parse_fgt(reinterpret_cast<const uint8_t*>(bytes.data()) + pos,
                                    bytes.size() - pos);
    p.values = std::move(flat.data);
    p.layout_digest = layout_digest(p.layout);
    if (p.layout_digest != stored)
        throw DataError(path + ": layout digest does not match header");
    if (static_cast<int64_t>(p.values.size()) != layout_numel(p.layout))
        throw DataError(path + ": value blob length does not match layout");
    return p;
}

} // namespace fedgate
