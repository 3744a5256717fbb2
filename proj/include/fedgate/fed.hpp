#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedgate/autodiff.hpp"
#include "fedgate/errors.hpp"
#include "fedgate/ingest.hpp"
#include "fedgate/metrics.hpp"
#include "fedgate/model.hpp"
#include "fedgate/optim.hpp"
#include "fedgate/rng.hpp"

namespace fedgate {

// ---------------------------------------------------------------------------
// Stratified partition: shuffle each class with its own seeded stream, then
// deal samples round-robin with a single cursor that carries over from the
// positives into the negatives, so total shard sizes also stay within 1.
// ---------------------------------------------------------------------------

struct ClientShard {
    std::string client_id;
    std::vector<std::string> sample_ids;
    int64_t n_pos = 0, n_neg = 0;
};

inline void seeded_shuffle(std::vector<size_t>& idx, Rng& rng) {
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.next_below(i))]);
}

inline std::vector<ClientShard> stratified_partition(const std::vector<ManifestRecord>& records,
                                                     int64_t n_clients, uint64_t seed,
                                                     bool allow_small_classes = false) {
    if (n_clients < 1) throw ConfigError("partition: n_clients must be positive");
    std::vector<size_t> pos, neg;
    for (size_t i = 0; i < records.size(); ++i)
        (records[i].label == 1 ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty())
        throw DataError("partition: need both classes, have " + std::to_string(pos.size()) +
                        " positive / " + std::to_string(neg.size()) + " negative");
    const int64_t smaller = static_cast<int64_t>(std::min(pos.size(), neg.size()));
    if (n_clients > smaller && !allow_small_classes)
        throw ConfigError("partition: " + std::to_string(n_clients) +
                          " clients exceed the smaller class (" + std::to_string(smaller) +
                          " samples); override to allow empty per-class shares");

    Rng root = Rng(seed).fork("partition");
    Rng pos_rng = root.fork("pos"), neg_rng = root.fork("neg");
    seeded_shuffle(pos, pos_rng);
    seeded_shuffle(neg, neg_rng);

    std::vector<ClientShard> shards(static_cast<size_t>(n_clients));
    for (int64_t c = 0; c < n_clients; ++c)
        shards[static_cast<size_t>(c)].client_id = "client_" + std::to_string(c);
    size_t cursor = 0;
    for (size_t i : pos) {
        auto& shard = shards[cursor++ % static_cast<size_t>(n_clients)];
        shard.sample_ids.push_back(records[i].path);
        shard.n_pos++;
    }
    for (size_t i : neg) {
        auto& shard = shards[cursor++ % static_cast<size_t>(n_clients)];
        shard.sample_ids.push_back(records[i].path);
        shard.n_neg++;
    }
    return shards;
}

// Fills the client_id column from a partition.
inline void apply_partition(std::vector<ManifestRecord>& records,
                            const std::vector<ClientShard>& shards) {
    std::map<std::string, std::string> owner;
    for (const auto& s : shards)
        for (const auto& id : s.sample_ids) owner[id] = s.client_id;
    for (auto& r : records) {
        auto it = owner.find(r.path);
        if (it == owner.end())
            throw DataError("partition does not cover sample '" + r.path + "'");
        r.client_id = it->second;
    }
}

// ---------------------------------------------------------------------------
// FederatedAveraging: sample-count-weighted mean, accumulated in double.
// ---------------------------------------------------------------------------

inline ModelParams fedavg_aggregate(const std::vector<std::pair<ModelParams, int64_t>>& updates) {
    if (updates.empty()) throw DataError("aggregate: no client updates");
    const auto& first = updates.front().first;
    int64_t total = 0;
    for (const auto& [params, n] : updates) {
        if (n < 1) throw DataError("aggregate: client update with n_samples < 1");
        if (params.layout_digest != first.layout_digest)
            throw IncompatibleModelError("aggregate: mixed parameter layouts");
        if (params.values.size() != first.values.size())
            throw IncompatibleModelError("aggregate: mixed parameter vector lengths");
        total += n;
    }
    std::vector<double> acc(first.values.size(), 0.0);
    for (const auto& [params, n] : updates) {
        const double w = static_cast<double>(n) / static_cast<double>(total);
        for (size_t i = 0; i < params.values.size(); ++i)
            acc[i] += w * static_cast<double>(params.values[i]);
    }
    ModelParams out;
    out.layout = first.layout;
    out.layout_digest = first.layout_digest;
    out.values.resize(first.values.size());
    for (size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic stream derivation shared by every training path (centralized,
// in-process federated, socket clients): the same (seed, round, client) always
// yields the same stream.
// ---------------------------------------------------------------------------

inline Rng client_round_rng(uint64_t seed, int64_t round, const std::string& client_id) {
    return Rng(seed).fork("round:" + std::to_string(round)).fork("client:" + client_id);
}

inline Rng init_rng(uint64_t seed) { return Rng(seed).fork("init"); }

// ---------------------------------------------------------------------------
// Local training: one SGD step per batch under a fresh one-cycle schedule.
// ---------------------------------------------------------------------------

// One optimizer step on the given batch. Returns the batch loss; if the loss
// is non-finite the parameters are left untouched.
inline double train_step(DiffGated& model, const std::vector<PreparedSample>& data,
                         const std::vector<size_t>& batch, SgdState& sgd, double lr, Rng& rng) {
    auto [rgb_t, diff_t] = stack_samples(data, batch);
    std::vector<float> labels;
    labels.reserve(batch.size());
    for (size_t i : batch) labels.push_back(static_cast<float>(data[i].label));

    Tape tape;
    auto rgb = make_leaf(std::move(rgb_t));
    auto diff = make_leaf(std::move(diff_t));
    auto logits = model.forward(tape, rgb, diff, true, &rng);
    auto loss = bce_with_logits(tape, logits, labels);
    const double loss_value = static_cast<double>(loss->data[0]);
    if (!std::isfinite(loss_value)) return loss_value;

    model.zero_grad();
    tape.backward(loss);
    auto grads = model.collect_grads();
    auto params = model.get_params();
    sgd_step(params.values, grads, sgd, lr, &model.layout());
    model.set_params(params);
    return loss_value;
}

inline std::vector<std::vector<size_t>> batch_plan(const std::vector<size_t>& order,
                                                   int64_t batch_size) {
    std::vector<std::vector<size_t>> batches;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size))
        batches.emplace_back(order.begin() + static_cast<ptrdiff_t>(start),
                             order.begin() +
                                 static_cast<ptrdiff_t>(std::min(
                                     order.size(), start + static_cast<size_t>(batch_size))));
    return batches;
}

struct LocalResult {
    double mean_loss = 0.0; // mean over the final epoch's batches
    int64_t steps = 0;
};

inline LocalResult train_one_cycle(DiffGated& model, const std::vector<PreparedSample>& data,
                                   int64_t epochs, int64_t batch_size, double lr_min,
                                   double lr_max, double momentum, Rng rng) {
    if (data.empty()) throw DataError("train: empty sample set");
    if (epochs < 1) throw ConfigError("train: epochs must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    const int64_t n = static_cast<int64_t>(data.size());
    const int64_t steps_per_epoch = (n + batch_size - 1) / batch_size;
    OneCycleSchedule sched{epochs * steps_per_epoch, lr_min, lr_max};
    sched.validate();
    SgdState sgd;
    sgd.momentum = momentum;

    std::vector<size_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), size_t{0});
    int64_t step = 0;
    double final_epoch_sum = 0.0;
    for (int64_t e = 0; e < epochs; ++e) {
        seeded_shuffle(order, rng);
        for (const auto& batch : batch_plan(order, batch_size)) {
            const double lr = one_cycle_lr(sched, step);
            const double loss = train_step(model, data, batch, sgd, lr, rng);
            if (!std::isfinite(loss))
                throw TrainError("non-finite loss at local step " + std::to_string(step));
            if (e + 1 == epochs) final_epoch_sum += loss;
            ++step;
        }
    }
    return {final_epoch_sum / static_cast<double>(steps_per_epoch), step};
}

// ---------------------------------------------------------------------------
// Evaluation: sigmoid scores + mean BCE in double, no dropout.
// ---------------------------------------------------------------------------

inline EvalReport evaluate_model(DiffGated& model, const std::vector<PreparedSample>& data,
                                 int64_t batch_size) {
    if (data.empty()) throw DataError("evaluate: empty sample set");
    if (batch_size < 1) throw ConfigError("evaluate: batch_size must be positive");
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), size_t{0});

    std::vector<double> scores;
    std::vector<int> labels;
    double loss_sum = 0.0;
    for (const auto& batch : batch_plan(order, batch_size)) {
        auto [rgb_t, diff_t] = stack_samples(data, batch);
        Tape tape;
        auto rgb = make_leaf(std::move(rgb_t));
        auto diff = make_leaf(std::move(diff_t));
        auto logits = model.forward(tape, rgb, diff, false);
        for (size_t i = 0; i < batch.size(); ++i) {
            const double z = static_cast<double>(logits->data[i]);
            const int y = data[batch[i]].label;
            scores.push_back(z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                      : std::exp(z) / (1.0 + std::exp(z)));
            labels.push_back(y);
            loss_sum += std::max(z, 0.0) - z * static_cast<double>(y) +
                        std::log1p(std::exp(-std::abs(z)));
        }
    }
    return evaluate_scores(scores, labels, loss_sum / static_cast<double>(data.size()));
}

// ---------------------------------------------------------------------------
// Learning-rate sweep adapter: draws shuffled batches and takes one step per
// sweep point; snapshot/restore covers parameters, velocity, rng and batch
// position so the sweep leaves no trace.
// ---------------------------------------------------------------------------

class SweepTrainer {
public:
    SweepTrainer(DiffGated& model, const std::vector<PreparedSample>& data, int64_t batch_size,
                 double momentum, Rng rng)
        : model_(model), data_(data), batch_size_(batch_size), rng_(rng) {
        if (data.empty()) throw DataError("lr sweep: empty sample set");
        if (batch_size < 1) throw ConfigError("lr sweep: batch_size must be positive");
        sgd_.momentum = momentum;
        order_.resize(data.size());
        std::iota(order_.begin(), order_.end(), size_t{0});
        cursor_ = order_.size(); // force a shuffle on the first step
    }

    struct State {
        std::vector<float> params;
        std::vector<float> velocity;
        Rng rng{0};
        std::vector<size_t> order;
        size_t cursor = 0;
    };

    State snapshot() const {
        return {model_.get_params().values, sgd_.velocity, rng_, order_, cursor_};
    }

    void restore(const State& s) {
        auto p = model_.get_params();
        p.values = s.params;
        model_.set_params(p);
        sgd_.velocity = s.velocity;
        rng_ = s.rng;
        order_ = s.order;
        cursor_ = s.cursor;
    }

    double step(double lr) {
        if (cursor_ >= order_.size()) {
            seeded_shuffle(order_, rng_);
            cursor_ = 0;
        }
        const size_t end = std::min(order_.size(), cursor_ + static_cast<size_t>(batch_size_));
        std::vector<size_t> batch(order_.begin() + static_cast<ptrdiff_t>(cursor_),
                                  order_.begin() + static_cast<ptrdiff_t>(end));
        cursor_ = end;
        return train_step(model_, data_, batch, sgd_, lr, rng_);
    }

private:
    DiffGated& model_;
    const std::vector<PreparedSample>& data_;
    int64_t batch_size_;
    SgdState sgd_;
    Rng rng_;
    std::vector<size_t> order_;
    size_t cursor_;
};

// ---------------------------------------------------------------------------
// Federated orchestration.
// ---------------------------------------------------------------------------

struct FedConfig {
    int64_t n_clients = 4;
    int64_t rounds = 4;
    std::string participation = "all"; // "all" | "sample"
    double sample_fraction = 0.5;
    int64_t local_epochs = 1;
    int64_t batch_size = 8;
    double lr_min = 0.0; // 0 = derive as lr_max/25
    double lr_max = 0.5;
    double momentum = 0.9;
    uint64_t seed = 0;

    double resolved_lr_min() const { return lr_min > 0.0 ? lr_min : default_lr_min(lr_max); }

    void validate() const {
        if (n_clients < 1) throw ConfigError("fed: n_clients must be positive");
        if (rounds < 1) throw ConfigError("fed: rounds must be positive");
        if (participation != "all" && participation != "sample")
            throw ConfigError("fed: participation must be 'all' or 'sample', got '" +
                              participation + "'");
        if (participation == "sample" &&
            !(sample_fraction > 0.0 && sample_fraction <= 1.0))
            throw ConfigError("fed: sample_fraction must be in (0,1]");
        if (local_epochs < 1) throw ConfigError("fed: local_epochs must be positive");
        if (batch_size < 1) throw ConfigError("fed: batch_size must be positive");
        if (!(lr_max > 0.0)) throw ConfigError("fed: lr_max must be positive");
        if (!(resolved_lr_min() > 0.0 && resolved_lr_min() < lr_max))
            throw ConfigError("fed: need 0 < lr_min < lr_max");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw ConfigError("fed: momentum must be in [0,1)");
    }
};

// Seeded sampling without replacement; the returned ids are sorted so every
// downstream iteration order is independent of the draw order.
inline std::vector<std::string> participants_for_round(const std::vector<std::string>& client_ids,
                                                       const FedConfig& cfg, int64_t round) {
    if (cfg.participation == "all") return client_ids;
    const int64_t n = static_cast<int64_t>(client_ids.size());
    const int64_t m = std::min<int64_t>(
        n, static_cast<int64_t>(std::ceil(cfg.sample_fraction * static_cast<double>(n))));
    Rng rng = Rng(cfg.seed).fork("participation").fork("round:" + std::to_string(round));
    std::vector<std::string> pool = client_ids;
    for (int64_t i = 0; i < m; ++i) {
        const size_t j = static_cast<size_t>(i) +
                         static_cast<size_t>(rng.next_below(static_cast<uint64_t>(n - i)));
        std::swap(pool[static_cast<size_t>(i)], pool[j]);
    }
    pool.resize(static_cast<size_t>(m));
    std::sort(pool.begin(), pool.end());
    return pool;
}

struct RoundReport {
    int64_t round = 0;
    std::vector<std::string> clients;
    double loss = 0.0, accuracy = 0.0, auc = 0.0;
    double wall_time = 0.0; // seconds; excluded from equivalence comparisons
};

inline std::string join_ids(const std::vector<std::string>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + ids[i];
    return out;
}

inline std::string round_log_line(const RoundReport& r) {
    return "round=" + std::to_string(r.round) + " clients=" + join_ids(r.clients) +
           " loss=" + fmt_g17(r.loss) + " acc=" + fmt_g17(r.accuracy) +
           " auc=" + fmt_g17(r.auc) + " wall_time=" + fmt_g17(r.wall_time) + "\n";
}

inline RoundReport parse_round_log_line(const std::string& line) {
    RoundReport r;
    std::istringstream is(line);
    std::string token;
    bool saw_round = false;
    while (is >> token) {
        const size_t eq = token.find('=');
        if (eq == std::string::npos) throw DataError("round log: bad token '" + token + "'");
        const std::string key = token.substr(0, eq), value = token.substr(eq + 1);
        if (key == "round") {
            r.round = std::stoll(value);
            saw_round = true;
        } else if (key == "clients") {
            size_t pos = 0;
            while (!value.empty()) {
                size_t comma = value.find(',', pos);
                if (comma == std::string::npos) {
                    r.clients.push_back(value.substr(pos));
                    break;
                }
                r.clients.push_back(value.substr(pos, comma - pos));
                pos = comma + 1;
            }
        } else if (key == "loss") {
            r.loss = std::strtod(value.c_str(), nullptr);
        } else if (key == "acc") {
            r.accuracy = std::strtod(value.c_str(), nullptr);
        } else if (key == "auc") {
            r.auc = std::strtod(value.c_str(), nullptr);
        } else if (key == "wall_time") {
            r.wall_time = std::strtod(value.c_str(), nullptr);
        } else {
            throw DataError("round log: unknown key '" + key + "'");
        }
    }
    if (!saw_round) throw DataError("round log: line without a round index");
    return r;
}

// Equality of everything reproducible; wall_time is elapsed time and is
// deliberately ignored.
inline bool reports_match(const RoundReport& a, const RoundReport& b) {
    return a.round == b.round && a.clients == b.clients && a.loss == b.loss &&
           a.accuracy == b.accuracy && a.auc == b.auc;
}

inline bool reports_match(const std::vector<RoundReport>& a, const std::vector<RoundReport>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (!reports_match(a[i], b[i])) return false;
    return true;
}

struct ClientUpdate {
    ModelParams params;
    int64_t n_samples = 0;
    double local_loss = 0.0;
};

struct FedRunResult {
    std::vector<RoundReport> reports;
    ModelParams final_params;
};

// Round loop shared by the in-process simulator and the socket server. The
// runner executes one client's local training for one round; participants may
// run on parallel threads (each owns a private model and rng stream, and the
// aggregation order is fixed by client id, so parallel and sequential runs
// produce identical bits). Any client failure aborts the round with no
// partial aggregation.
template <typename Runner>
FedRunResult fed_train(const ArchConfig& arch, const FedConfig& cfg,
                       const std::vector<std::string>& client_ids, Runner&& runner,
                       const std::vector<PreparedSample>& val, bool parallel,
                       const std::function<void(const RoundReport&)>& on_round = {}) {
    cfg.validate();
    if (static_cast<int64_t>(client_ids.size()) != cfg.n_clients)
        throw ConfigError("fed: " + std::to_string(client_ids.size()) + " client ids for " +
                          std::to_string(cfg.n_clients) + " clients");
    std::vector<std::string> ids = client_ids;
    std::sort(ids.begin(), ids.end());
    for (size_t i = 0; i + 1 < ids.size(); ++i)
        if (ids[i] == ids[i + 1]) throw ConfigError("fed: duplicate client id '" + ids[i] + "'");

    using clock = std::chrono::steady_clock;
    DiffGated global_model(arch);
    global_model.init(init_rng(cfg.seed));
    ModelParams global = global_model.get_params();

    FedRunResult result;
    auto evaluate_round = [&](int64_t round, std::vector<std::string> participants,
                              clock::time_point t0) {
        global_model.set_params(global);
        EvalReport ev = evaluate_model(global_model, val, cfg.batch_size);
        RoundReport r;
        r.round = round;
        r.clients = std::move(participants);
        r.loss = ev.loss;
        r.accuracy = ev.accuracy;
        r.auc = ev.auc;
        r.wall_time = std::chrono::duration<double>(clock::now() - t0).count();
        result.reports.push_back(r);
        if (on_round) on_round(r);
    };

    evaluate_round(0, {}, clock::now());
    for (int64_t round = 1; round <= cfg.rounds; ++round) {
        const auto t0 = clock::now();
        const auto participants = participants_for_round(ids, cfg, round);
        std::vector<ClientUpdate> updates(participants.size());
        std::vector<std::exception_ptr> failures(participants.size());
        auto run_one = [&](size_t i) {
            try {
                updates[i] = runner(participants[i], global, round, cfg);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        };
        if (parallel && participants.size() > 1) {
            std::vector<std::thread> threads;
            threads.reserve(participants.size());
            for (size_t i = 0; i < participants.size(); ++i)
                threads.emplace_back(run_one, i);
            for (auto& t : threads) t.join();
        } else {
            for (size_t i = 0; i < participants.size(); ++i) run_one(i);
        }
        for (size_t i = 0; i < participants.size(); ++i) {
            if (!failures[i]) continue;
            try {
                std::rethrow_exception(failures[i]);
            } catch (const std::exception& e) {
                throw TrainError("round " + std::to_string(round) + ": client '" +
                                 participants[i] + "' failed: " + e.what());
            }
        }
        std::vector<std::pair<ModelParams, int64_t>> weighted;
        weighted.reserve(updates.size());
        for (auto& u : updates) weighted.emplace_back(std::move(u.params), u.n_samples);
        global = fedavg_aggregate(weighted);
        evaluate_round(round, participants, t0);
    }
    result.final_params = std::move(global);
    return result;
}

// Executes client rounds in this process from an id -> samples table.
class InProcessClients {
public:
    InProcessClients(const ArchConfig& arch,
                     std::map<std::string, std::vector<PreparedSample>> data)
        : arch_(arch), data_(std::move(data)) {}

    ClientUpdate operator()(const std::string& id, const ModelParams& global, int64_t round,
                            const FedConfig& cfg) const {
        auto it = data_.find(id);
        if (it == data_.end()) throw TrainError("no local data for client '" + id + "'");
        DiffGated model(arch_);
        model.set_params(global);
        LocalResult res =
            train_one_cycle(model, it->second, cfg.local_epochs, cfg.batch_size,
                            cfg.resolved_lr_min(), cfg.lr_max, cfg.momentum,
                            client_round_rng(cfg.seed, round, id));
        return {model.get_params(), static_cast<int64_t>(it->second.size()), res.mean_loss};
    }

private:
    ArchConfig arch_;
    std::map<std::string, std::vector<PreparedSample>> data_;
};

// Centralized baseline: cfg.rounds cycles of cfg.local_epochs epochs, each
// cycle under a fresh one-cycle schedule and the client_0 stream. With one
// client holding all data, fed_train reproduces this bit for bit.
inline FedRunResult centralized_train(const ArchConfig& arch, const FedConfig& cfg,
                                      const std::vector<PreparedSample>& train,
                                      const std::vector<PreparedSample>& val,
                                      const std::function<void(const RoundReport&)>& on_round = {}) {
    cfg.validate();
    using clock = std::chrono::steady_clock;
    DiffGated model(arch);
    model.init(init_rng(cfg.seed));

    FedRunResult result;
    auto evaluate_round = [&](int64_t round, std::vector<std::string> participants,
                              clock::time_point t0) {
        EvalReport ev = evaluate_model(model, val, cfg.batch_size);
        RoundReport r;
        r.round = round;
        r.clients = std::move(participants);
        r.loss = ev.loss;
        r.accuracy = ev.accuracy;
        r.auc = ev.auc;
        r.wall_time = std::chrono::duration<double>(clock::now() - t0).count();
        result.reports.push_back(r);
        if (on_round) on_round(r);
    };

    evaluate_round(0, {}, clock::now());
    for (int64_t round = 1; round <= cfg.rounds; ++round) {
        const auto t0 = clock::now();
        train_one_cycle(model, train, cfg.local_epochs, cfg.batch_size, cfg.resolved_lr_min(),
                        cfg.lr_max, cfg.momentum, client_round_rng(cfg.seed, round, "client_0"));
        evaluate_round(round, {"client_0"}, t0);
    }
    result.final_params = model.get_params();
    return result;
}

} // namespace fedgate
