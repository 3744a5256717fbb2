#include <cstdio>
#include <deque>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedgate/fedgate.hpp"

namespace fs = std::filesystem;
using namespace fedgate;

namespace {

// Flags hold raw strings and are funneled through RunConfig::apply after the
// config file, so flags win and every value goes through one parser.
class FlagBinder {
public:
    explicit FlagBinder(CLI::App* cmd) : cmd_(cmd) {
        config_opt_ = cmd->add_option("--config", config_path_, "key=value config file");
    }

    void bind(const std::string& flag, const std::string& key, const std::string& desc) {
        values_.emplace_back();
        auto* slot = &values_.back();
        options_.push_back({key, slot, cmd_->add_option(flag, *slot, desc)});
    }

    void resolve(RunConfig& cfg) const {
        if (config_opt_->count() > 0) cfg.apply_file(config_path_);
        for (const auto& bound : options_)
            if (bound.option->count() > 0) cfg.apply(bound.key, *bound.value);
    }

private:
    struct Bound {
        std::string key;
        std::string* value;
        CLI::Option* option;
    };
    CLI::App* cmd_;
    std::string config_path_;
    CLI::Option* config_opt_ = nullptr;
    std::deque<std::string> values_;
    std::vector<Bound> options_;
};

void bind_arch(FlagBinder& b) {
    b.bind("--frames", "frames", "input frames per channel (T)");
    b.bind("--height", "height", "input frame height");
    b.bind("--width", "width", "input frame width");
    b.bind("--widths", "widths", "comma-separated conv block channel widths");
    b.bind("--fc-width", "fc_width", "fully connected layer width");
    b.bind("--dropout", "dropout", "dropout probability in the head");
    b.bind("--temporal-pool", "temporal_pool", "temporal max-pool window at the merge");
    b.bind("--motion-channels", "motion_channels", "channels of the motion input");
}

void bind_schedule(FlagBinder& b) {
    b.bind("--local-epochs", "local_epochs", "epochs per training cycle");
    b.bind("--batch-size", "batch_size", "SGD batch size");
    b.bind("--lr-min", "lr_min", "one-cycle minimum lr (default lr_max/25)");
    b.bind("--lr-max", "lr_max", "one-cycle maximum lr");
    b.bind("--momentum", "momentum", "SGD momentum");
    b.bind("--seed", "seed", "master seed");
}

void write_resolved(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("--out directory is required");
    fs::create_directories(cfg.out_dir);
    write_file_atomic((fs::path(cfg.out_dir) / "config.resolved").string(),
                      cfg.resolved_text());
}

std::vector<PreparedSample> load_dataset(const std::string& manifest_path,
                                         const ArchConfig& arch) {
    if (manifest_path.empty()) throw ConfigError("a manifest path is required");
    const auto records = read_manifest(manifest_path);
    if (records.empty()) throw DataError(manifest_path + ": empty manifest");
    const std::string dir = fs::path(manifest_path).parent_path().string();
    std::vector<PreparedSample> out;
    out.reserve(records.size());
    for (const auto& rec : records) out.push_back(load_prepared(dir, rec));
    const auto& first = out.front();
    const Shape want{3, arch.frames, arch.height, arch.width};
    if (first.rgb.shape != want)
        throw DataError(manifest_path + ": samples are " + shape_str(first.rgb.shape) +
                        " but the configured model expects " + shape_str(want));
    return out;
}

int cmd_synth(const RunConfig& cfg) {
    const int64_t raw =
        cfg.synth_raw_frames > 0 ? cfg.synth_raw_frames : cfg.arch.frames + 1;
    if (raw < 2) throw ConfigError("synth: need at least 2 raw frames per clip");
    write_resolved(cfg);
    const struct Split {
        const char* name;
        int64_t per_class;
        int64_t offset;
    } splits[] = {
        {"train", cfg.synth_train_per_class, 0},
        {"val", cfg.synth_val_per_class, cfg.synth_train_per_class},
    };
    for (const auto& split : splits) {
        const fs::path dir = fs::path(cfg.out_dir) / split.name;
        std::vector<ManifestRecord> records;
        for (int64_t k = 0; k < split.per_class; ++k)
            for (int label = 0; label <= 1; ++label) {
                VideoSample s = synth_sample(label, split.offset + k, raw - 1,
                                             cfg.arch.height, cfg.arch.width, cfg.fed.seed);
                write_frames((dir / s.id).string(), s.frames);
                records.push_back({s.id, s.label, ""});
            }
        write_manifest((dir / "manifest.tsv").string(), records);
        std::printf("synth: wrote %zu clips to %s\n", records.size(), dir.c_str());
    }
    return 0;
}

int cmd_preprocess(const RunConfig& cfg) {
    const auto records = read_manifest(cfg.train_manifest);
    if (records.empty()) throw DataError(cfg.train_manifest + ": empty manifest");
    write_resolved(cfg);
    const fs::path in_dir = fs::path(cfg.train_manifest).parent_path();
    std::vector<ManifestRecord> out_records;
    for (const auto& rec : records) {
        fs::path clip(rec.path);
        if (clip.is_relative()) clip = in_dir / clip;
        const TensorT<float> frames = load_frames(clip.string());
        auto [rgb, diff] = make_input(frames, cfg.arch);
        const std::string id = fs::path(rec.path).filename().string();
        const std::string stem = (fs::path(cfg.out_dir) / id).string();
        save_fgt(rgb_path_for(stem), rgb);
        save_fgt(diff_path_for(stem), diff);
        out_records.push_back({id + ".rgb.fgt", rec.label, rec.client_id});
    }
    write_manifest((fs::path(cfg.out_dir) / "manifest.tsv").string(), out_records);
    std::printf("preprocess: wrote %zu samples to %s\n", out_records.size(),
                cfg.out_dir.c_str());
    return 0;
}

int cmd_partition(const RunConfig& cfg) {
    auto records = read_manifest(cfg.train_manifest);
    write_resolved(cfg);
    const auto shards =
        stratified_partition(records, cfg.fed.n_clients, cfg.fed.seed, cfg.allow_small);
    apply_partition(records, shards);
    write_manifest((fs::path(cfg.out_dir) / "manifest.tsv").string(), records);
    for (const auto& s : shards)
        std::printf("%s: %zu samples (%lld pos, %lld neg)\n", s.client_id.c_str(),
                    s.sample_ids.size(), static_cast<long long>(s.n_pos),
                    static_cast<long long>(s.n_neg));
    return 0;
}

int cmd_lr_find(const RunConfig& cfg) {
    const auto data = load_dataset(cfg.train_manifest, cfg.arch);
    write_resolved(cfg);
    DiffGated model(cfg.arch);
    model.init(init_rng(cfg.fed.seed));
    SweepTrainer trainer(model, data, cfg.fed.batch_size, cfg.fed.momentum,
                         Rng(cfg.fed.seed).fork("sweep"));
    const LrSweepResult sweep =
        lr_range_test(trainer, cfg.sweep_steps, cfg.sweep_lr_lo, cfg.sweep_lr_hi,
                      cfg.sweep_beta);
    write_file_atomic((fs::path(cfg.out_dir) / "sweep.csv").string(), sweep_csv(sweep));
    std::printf("suggested_min_lr=%s\n", fmt_g17(sweep.suggested_min_lr).c_str());
    std::printf("suggested_max_lr=%s\n", fmt_g17(sweep.suggested_max_lr).c_str());
    return 0;
}

void write_run_outputs(const RunConfig& cfg, const FedRunResult& result) {
    std::string log;
    for (const auto& r : result.reports) log += round_log_line(r);
    write_file_atomic((fs::path(cfg.out_dir) / "rounds.log").string(), log);
    save_checkpoint((fs::path(cfg.out_dir) / "model.fgcp").string(), result.final_params);
}

int cmd_train(const RunConfig& cfg) {
    const auto train = load_dataset(cfg.train_manifest, cfg.arch);
    const auto val = load_dataset(cfg.val_manifest, cfg.arch);
    write_resolved(cfg);
    const FedRunResult result =
        centralized_train(cfg.arch, cfg.fed, train, val, [](const RoundReport& r) {
            std::fputs(round_log_line(r).c_str(), stdout);
            std::fflush(stdout);
        });
    write_run_outputs(cfg, result);
    return 0;
}

int cmd_fed_train(const RunConfig& cfg) {
    const auto records = read_manifest(cfg.train_manifest);
    const auto all = load_dataset(cfg.train_manifest, cfg.arch);
    const auto val = load_dataset(cfg.val_manifest, cfg.arch);
    write_resolved(cfg);
    std::map<std::string, std::vector<PreparedSample>> by_client;
    for (size_t i = 0; i < records.size(); ++i) {
        if (records[i].client_id.empty())
            throw DataError(cfg.train_manifest + ": sample '" + records[i].path +
                            "' has no client id; run the partition command first");
        by_client[records[i].client_id].push_back(all[i]);
    }
    if (static_cast<int64_t>(by_client.size()) != cfg.fed.n_clients)
        throw ConfigError("manifest holds " + std::to_string(by_client.size()) +
                          " client ids but clients=" + std::to_string(cfg.fed.n_clients));
    std::vector<std::string> ids;
    for (const auto& [id, samples] : by_client) ids.push_back(id);
    InProcessClients runner(cfg.arch, std::move(by_client));
    const FedRunResult result = fed_train(cfg.arch, cfg.fed, ids, runner, val,
                                          !cfg.sequential, [](const RoundReport& r) {
                                              std::fputs(round_log_line(r).c_str(), stdout);
                                              std::fflush(stdout);
                                          });
    write_run_outputs(cfg, result);
    return 0;
}

int cmd_fed_serve(const RunConfig& cfg) {
    const auto val = load_dataset(cfg.val_manifest, cfg.arch);
    write_resolved(cfg);
    if (cfg.port < 0 || cfg.port > 65535) throw ConfigError("port out of range");
    Listener listener(cfg.host, static_cast<uint16_t>(cfg.port));
    std::printf("serving on %s:%u, waiting for %lld clients\n", cfg.host.c_str(),
                listener.port(), static_cast<long long>(cfg.fed.n_clients));
    std::fflush(stdout);
    const FedRunResult result =
        run_fed_server(cfg.arch, cfg.fed, val, listener, cfg.effective_timeout(),
                       !cfg.sequential, [](const RoundReport& r) {
                           std::fputs(round_log_line(r).c_str(), stdout);
                           std::fflush(stdout);
                       });
    write_run_outputs(cfg, result);
    return 0;
}

int cmd_fed_client(const RunConfig& cfg) {
    if (cfg.client_id.empty()) throw ConfigError("--client-id is required");
    const auto records = read_manifest(cfg.train_manifest);
    const auto all = load_dataset(cfg.train_manifest, cfg.arch);
    std::vector<PreparedSample> mine;
    for (size_t i = 0; i < records.size(); ++i)
        if (records[i].client_id == cfg.client_id) mine.push_back(all[i]);
    if (mine.empty())
        throw DataError(cfg.train_manifest + ": no samples for client '" + cfg.client_id +
                        "'");
    if (cfg.port < 1 || cfg.port > 65535) throw ConfigError("port out of range");
    run_fed_client(cfg.arch, cfg.client_id, mine, cfg.host,
                   static_cast<uint16_t>(cfg.port), cfg.effective_timeout(),
                   [](const std::string& line) {
                       std::fputs(line.c_str(), stdout);
                       std::fflush(stdout);
                   });
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    if (cfg.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    const auto data = load_dataset(cfg.val_manifest, cfg.arch);
    write_resolved(cfg);
    DiffGated model(cfg.arch);
    model.set_params(load_checkpoint(cfg.checkpoint));
    const EvalReport report = evaluate_model(model, data, cfg.fed.batch_size);
    write_file_atomic((fs::path(cfg.out_dir) / "eval.txt").string(), eval_report_text(report));
    write_file_atomic((fs::path(cfg.out_dir) / "roc.csv").string(), roc_csv(report.roc_points));
    std::fputs(eval_report_text(report).c_str(), stdout);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated trainer for the gated two-stream video classifier"};
    app.require_subcommand(1);

    struct Entry {
        CLI::App* cmd;
        FlagBinder* binder;
        int (*fn)(const RunConfig&);
    };
    std::vector<Entry> entries;
    std::deque<FlagBinder> binders;

    auto make_cmd = [&](const char* name, const char* desc, int (*fn)(const RunConfig&)) {
        CLI::App* cmd = app.add_subcommand(name, desc);
        binders.emplace_back(cmd);
        FlagBinder* binder = &binders.back();
        entries.push_back({cmd, binder, fn});
        return binder;
    };

    {
        auto* b = make_cmd("synth", "generate a synthetic two-class motion dataset",
                                 cmd_synth);
        bind_arch(*b);
        b->bind("--train-per-class", "synth_train_per_class", "training clips per class");
        b->bind("--val-per-class", "synth_val_per_class", "validation clips per class");
        b->bind("--raw-frames", "synth_raw_frames", "frames per raw clip (0 = frames+1)");
        b->bind("--seed", "seed", "master seed");
        b->bind("--out", "out", "output directory");
    }
    {
        auto* b = make_cmd(
            "preprocess", "frame directories -> model-ready rgb/diff tensors", cmd_preprocess);
        bind_arch(*b);
        b->bind("--manifest", "train_manifest", "manifest of frame directories");
        b->bind("--out", "out", "output directory");
    }
    {
        auto* b = make_cmd("partition", "assign samples to clients (stratified)",
                                 cmd_partition);
        b->bind("--manifest", "train_manifest", "manifest to partition");
        b->bind("--clients", "clients", "number of clients");
        b->bind("--seed", "seed", "master seed");
        b->bind("--allow-small", "allow_small", "allow clients to outnumber a class (0/1)");
        b->bind("--out", "out", "output directory");
    }
    {
        auto* b = make_cmd("lr-find", "learning-rate range test", cmd_lr_find);
        bind_arch(*b);
        bind_schedule(*b);
        b->bind("--manifest", "train_manifest", "prepared training manifest");
        b->bind("--sweep-steps", "sweep_steps", "number of sweep points");
        b->bind("--sweep-lr-lo", "sweep_lr_lo", "sweep start lr");
        b->bind("--sweep-lr-hi", "sweep_lr_hi", "sweep end lr");
        b->bind("--sweep-beta", "sweep_beta", "loss smoothing factor");
        b->bind("--out", "out", "output directory");
    }
    {
        auto* b = make_cmd("train", "centralized one-cycle training", cmd_train);
        bind_arch(*b);
        bind_schedule(*b);
        b->bind("--manifest", "train_manifest", "prepared training manifest");
        b->bind("--val", "val_manifest", "prepared validation manifest");
        b->bind("--rounds", "rounds", "training cycles");
        b->bind("--out", "out", "output directory");
    }
    {
        auto* b = make_cmd("fed-train", "in-process federated training", cmd_fed_train);
        bind_arch(*b);
        bind_schedule(*b);
        b->bind("--manifest", "train_manifest", "partitioned training manifest");
        b->bind("--val", "val_manifest", "prepared validation manifest");
        b->bind("--clients", "clients", "number of clients");
        b->bind("--rounds", "rounds", "federated rounds");
        b->bind("--participation", "participation", "all | sample");
        b->bind("--sample-fraction", "sample_fraction", "fraction for participation=sample");
        b->bind("--sequential", "sequential", "run clients sequentially (0/1)");
        b->bind("--out", "out", "output directory");
    }
    {
        auto* b = make_cmd("fed-serve", "federated server over sockets", cmd_fed_serve);
        bind_arch(*b);
        bind_schedule(*b);
        b->bind("--val", "val_manifest", "prepared validation manifest");
        b->bind("--clients", "clients", "number of clients");
        b->bind("--rounds", "rounds", "federated rounds");
        b->bind("--participation", "participation", "all | sample");
        b->bind("--sample-fraction", "sample_fraction", "fraction for participation=sample");
        b->bind("--sequential", "sequential", "run clients sequentially (0/1)");
        b->bind("--host", "host", "bind address");
        b->bind("--port", "port", "bind port (0 = ephemeral)");
        b->bind("--timeout-secs", "timeout_secs", "socket timeout");
        b->bind("--out", "out", "output directory");
    }
    {
        auto* b = make_cmd("fed-client", "federated client over sockets", cmd_fed_client);
        bind_arch(*b);
        b->bind("--manifest", "train_manifest", "partitioned training manifest");
        b->bind("--client-id", "client_id", "this client's id");
        b->bind("--host", "host", "server address");
        b->bind("--port", "port", "server port");
        b->bind("--timeout-secs", "timeout_secs", "socket timeout");
    }
    {
        auto* b = make_cmd("eval", "evaluate a checkpoint on a manifest", cmd_eval);
        bind_arch(*b);
        b->bind("--checkpoint", "checkpoint", "model checkpoint file");
        b->bind("--manifest", "val_manifest", "prepared evaluation manifest");
        b->bind("--batch-size", "batch_size", "evaluation batch size");
        b->bind("--out", "out", "output directory");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        for (const Entry& e : entries) {
            if (!e.cmd->parsed()) continue;
            RunConfig cfg;
            e.binder->resolve(cfg);
            return e.fn(cfg);
        }
        std::fprintf(stderr, "internal error: no subcommand dispatched\n");
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const IncompatibleModelError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const ProtocolError& e) {
        std::fprintf(stderr, "protocol error: %s\n", e.what());
        return 4;
    } catch (const TrainError& e) {
        std::fprintf(stderr, "training error: %s\n", e.what());
        return 5;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
}
