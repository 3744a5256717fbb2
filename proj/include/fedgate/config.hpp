#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedgate/errors.hpp"
#include "fedgate/fed.hpp"
#include "fedgate/metrics.hpp"
#include "fedgate/model.hpp"
#include "fedgate/net.hpp"

namespace fedgate {

namespace detail {

inline int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

inline double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config key '" + key + "': expected 0/1/true/false, got '" + v + "'");
}

inline std::vector<int64_t> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int64_t> out;
    size_t pos = 0;
    while (pos <= v.size()) {
        size_t comma = v.find(',', pos);
        if (comma == std::string::npos) comma = v.size();
        out.push_back(parse_i64(key, v.substr(pos, comma - pos)));
        pos = comma + 1;
        if (comma == v.size()) break;
    }
    return out;
}

inline std::string int_list_text(const std::vector<int64_t>& xs) {
    std::string out;
    for (size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
    return out;
}

} // namespace detail

// Flat key=value run configuration. A config file sets any subset of the
// keys; CLI flags re-apply on top and win. Unknown keys are rejected, and
// every run writes its fully resolved copy next to the outputs.
struct RunConfig {
    ArchConfig arch;
    FedConfig fed;
    int64_t sweep_steps = 100;
    double sweep_lr_lo = 1e-15;
    double sweep_lr_hi = 1.0;
    double sweep_beta = 0.98;
    int64_t synth_train_per_class = 20;
    int64_t synth_val_per_class = 10;
    int64_t synth_raw_frames = 0; // 0 = frames+1 (no temporal subsampling)
    bool allow_small = false;     // permit clients to outnumber a class
    std::string checkpoint;
    std::string train_manifest;
    std::string val_manifest;
    std::string out_dir;
    std::string host = "127.0.0.1";
    int64_t port = 7700;
    std::string client_id;
    bool sequential = false;
    int64_t timeout_secs = 0; // 0 = FEDGATE_TIMEOUT_SECS or 300

    int64_t effective_timeout() const {
        return timeout_secs > 0 ? timeout_secs : default_timeout_secs();
    }

    void apply(const std::string& key, const std::string& value) {
        using namespace detail;
        if (key == "frames") arch.frames = parse_i64(key, value);
        else if (key == "height") arch.height = parse_i64(key, value);
        else if (key == "width") arch.width = parse_i64(key, value);
        else if (key == "widths") {
            arch.widths = parse_int_list(key, value);
            arch.blocks = static_cast<int64_t>(arch.widths.size());
        } else if (key == "fc_width") arch.fc_width = parse_i64(key, value);
        else if (key == "dropout") arch.dropout_p = parse_f64(key, value);
        else if (key == "temporal_pool") arch.temporal_pool = parse_i64(key, value);
        else if (key == "motion_channels") arch.motion_channels = parse_i64(key, value);
        else if (key == "clients") fed.n_clients = parse_i64(key, value);
        else if (key == "rounds") fed.rounds = parse_i64(key, value);
        else if (key == "participation") fed.participation = value;
        else if (key == "sample_fraction") fed.sample_fraction = parse_f64(key, value);
        else if (key == "local_epochs") fed.local_epochs = parse_i64(key, value);
        else if (key == "batch_size") fed.batch_size = parse_i64(key, value);
        else if (key == "lr_min") fed.lr_min = parse_f64(key, value);
        else if (key == "lr_max") fed.lr_max = parse_f64(key, value);
        else if (key == "momentum") fed.momentum = parse_f64(key, value);
        else if (key == "seed") fed.seed = parse_u64(key, value);
        else if (key == "sweep_steps") sweep_steps = parse_i64(key, value);
        else if (key == "sweep_lr_lo") sweep_lr_lo = parse_f64(key, value);
        else if (key == "sweep_lr_hi") sweep_lr_hi = parse_f64(key, value);
        else if (key == "sweep_beta") sweep_beta = parse_f64(key, value);
        else if (key == "synth_train_per_class") synth_train_per_class = parse_i64(key, value);
        else if (key == "synth_val_per_class") synth_val_per_class = parse_i64(key, value);
        else if (key == "synth_raw_frames") synth_raw_frames = parse_i64(key, value);
        else if (key == "allow_small") allow_small = parse_bool(key, value);
        else if (key == "checkpoint") checkpoint = value;
        else if (key == "train_manifest") train_manifest = value;
        else if (key == "val_manifest") val_manifest = value;
        else if (key == "out") out_dir = value;
        else if (key == "host") host = value;
        else if (key == "port") port = parse_i64(key, value);
        else if (key == "client_id") client_id = value;
        else if (key == "sequential") sequential = parse_bool(key, value);
        else if (key == "timeout_secs") timeout_secs = parse_i64(key, value);
        else throw ConfigError("unknown config key '" + key + "'");
    }

    void apply_file(const std::string& path) {
        const std::string text = read_file(path);
        size_t pos = 0;
        int64_t lineno = 0;
        while (pos < text.size()) {
            size_t nl = text.find('\n', pos);
            if (nl == std::string::npos) nl = text.size();
            std::string line = text.substr(pos, nl - pos);
            pos = nl + 1;
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
            try {
                apply(line.substr(0, eq), line.substr(eq + 1));
            } catch (const ConfigError& e) {
                throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    // Fully resolved snapshot: derived values (lr_min, timeout) are expanded.
    std::string resolved_text() const {
        using namespace detail;
        std::string out;
        auto kv = [&](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
        kv("frames", std::to_string(arch.frames));
        kv("height", std::to_string(arch.height));
        kv("width", std::to_string(arch.width));
        kv("widths", int_list_text(arch.widths));
        kv("fc_width", std::to_string(arch.fc_width));
        kv("dropout", fmt_g17(arch.dropout_p));
        kv("temporal_pool", std::to_string(arch.temporal_pool));
        kv("motion_channels", std::to_string(arch.motion_channels));
        kv("clients", std::to_string(fed.n_clients));
        kv("rounds", std::to_string(fed.rounds));
        kv("participation", fed.participation);
        kv("sample_fraction", fmt_g17(fed.sample_fraction));
        kv("local_epochs", std::to_string(fed.local_epochs));
        kv("batch_size", std::to_string(fed.batch_size));
        kv("lr_min", fmt_g17(fed.resolved_lr_min()));
        kv("lr_max", fmt_g17(fed.lr_max));
        kv("momentum", fmt_g17(fed.momentum));
        kv("seed", std::to_string(fed.seed));
        kv("sweep_steps", std::to_string(sweep_steps));
        kv("sweep_lr_lo", fmt_g17(sweep_lr_lo));
        kv("sweep_lr_hi", fmt_g17(sweep_lr_hi));
        kv("sweep_beta", fmt_g17(sweep_beta));
        kv("synth_train_per_class", std::to_string(synth_train_per_class));
        kv("synth_val_per_class", std::to_string(synth_val_per_class));
        kv("synth_raw_frames", std::to_string(synth_raw_frames));
        kv("allow_small", allow_small ? "1" : "0");
        kv("checkpoint", checkpoint);
        kv("train_manifest", train_manifest);
        kv("val_manifest", val_manifest);
        kv("out", out_dir);
        kv("host", host);
        kv("port", std::to_string(port));
        kv("client_id", client_id);
        kv("sequential", sequential ? "1" : "0");
        kv("timeout_secs", std::to_string(effective_timeout()));
        return out;
    }
};

} // namespace fedgate
