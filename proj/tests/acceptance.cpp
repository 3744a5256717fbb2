// End-to-end acceptance checks for the federated video-classification
// artifact. Each criterion prints exactly one "criterion NN [PASS|FAIL]"
// line on stdout; diagnostics go to stderr; the exit status is nonzero if
// any criterion fails. argv[1] must name the CLI binary.

#include "fedgate/fedgate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gradcheck.hpp"
#include "subprocess.hpp"
#include "testutil.hpp"

namespace fedgate {
namespace {

std::string g_cli;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool check(bool cond, const std::string& what) {
    if (!cond) std::fprintf(stderr, "    check failed: %s\n", what.c_str());
    return cond;
}

subprocess::Result run_cli(const std::vector<std::string>& args) {
    return subprocess::run(g_cli, args);
}

void must_succeed(const subprocess::Result& r, const std::string& what) {
    if (r.exit_code != 0)
        throw std::runtime_error(what + " failed (exit " + std::to_string(r.exit_code) + "):\n" +
                                 r.output);
}

std::vector<RoundReport> read_rounds_log(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<RoundReport> out;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        out.push_back(parse_round_log_line(text.substr(pos, nl - pos)));
        pos = nl + 1;
    }
    return out;
}

ArchConfig micro_arch() {
    ArchConfig a;
    a.frames = 4;
    a.height = 8;
    a.width = 8;
    a.blocks = 2;
    a.widths = {2, 2};
    a.fc_width = 4;
    a.dropout_p = 0.25;
    a.temporal_pool = 2;
    return a;
}

std::vector<ManifestRecord> make_records(int64_t n_pos, int64_t n_neg) {
    std::vector<ManifestRecord> records;
    for (int64_t i = 0; i < n_pos; ++i) records.push_back({"pos_" + std::to_string(i), 1, ""});
    for (int64_t i = 0; i < n_neg; ++i) records.push_back({"neg_" + std::to_string(i), 0, ""});
    return records;
}

std::vector<PreparedSample> random_dataset(const ArchConfig& a, int64_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<PreparedSample> out;
    for (int64_t i = 0; i < n; ++i) {
        PreparedSample s;
        s.id = "s" + std::to_string(i);
        s.label = static_cast<int>(i % 2);
        s.rgb = Tensor({3, a.frames, a.height, a.width});
        s.diff = Tensor({1, a.frames, a.height, a.width});
        for (auto& v : s.rgb.data) v = rng.uniform(-1.0f, 1.0f);
        for (auto& v : s.diff.data) v = rng.uniform(-1.0f, 1.0f);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<PreparedSample> synth_dataset(const ArchConfig& a, int64_t per_class, uint64_t seed,
                                          int64_t ordinal_base) {
    std::vector<PreparedSample> out;
    for (int label = 0; label <= 1; ++label)
        for (int64_t k = 0; k < per_class; ++k) {
            VideoSample v =
                synth_sample(label, ordinal_base + k, a.frames, a.height, a.width, seed);
            PreparedSample s;
            s.id = v.id;
            s.label = v.label;
            std::tie(s.rgb, s.diff) = make_input(v.frames, a);
            out.push_back(std::move(s));
        }
    return out;
}

ModelParams params_of(std::vector<float> values) {
    ModelParams p;
    p.layout = {{"w", Shape{static_cast<int64_t>(values.size())}}};
    p.layout_digest = 42;
    p.values = std::move(values);
    return p;
}

// ---------------------------------------------------------------------------
// 1. Gradients match central finite differences: >= 20 randomized trials per
//    differentiable op plus the end-to-end micro model, rel err < 1e-4 in
//    double precision, whole criterion under two minutes.
// ---------------------------------------------------------------------------

using gradcheck::DPtr;
using gradcheck::DTape;

// Weighted sum so the upstream gradient varies per element instead of being a
// uniform broadcast of ones.
DPtr scalarize(DTape& tape, const DPtr& x, uint64_t seed) {
    Rng wr(seed);
    auto w = gradcheck::random_leaf(wr, x->shape, -1.0, 1.0, /*requires_grad=*/false);
    return fedgate::sum(tape, fedgate::mul(tape, x, w));
}

// Shuffled lattice with spacing 2e-3 and no value within 5e-4 of zero, so the
// 1e-5 finite-difference probe can never flip a max-pool argmax or cross the
// relu kink.
DPtr separated_leaf(Rng& rng, Shape shape) {
    TensorT<double> t(shape);
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i)
        t.data[static_cast<size_t>(i)] = 0.002 * static_cast<double>(i - n / 2) + 0.0005;
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(i + 1)));
        std::swap(t.data[static_cast<size_t>(i)], t.data[static_cast<size_t>(j)]);
    }
    return make_leaf(std::move(t), true);
}

bool criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    struct OpCheck {
        const char* name;
        std::function<gradcheck::Report(Rng&)> trial;
    };
    const std::vector<OpCheck> ops = {
        {"conv3d",
         [](Rng& rng) {
             auto x = gradcheck::random_leaf(rng, {1, 2, 3, 4, 4});
             auto k = gradcheck::random_leaf(rng, {3, 2, 2, 3, 3});
             auto b = gradcheck::random_leaf(rng, {3});
             return gradcheck::compare_gradients({x, k, b}, [&](DTape& t) {
                 return scalarize(t, conv3d(t, x, k, b, {1, 1, 1}, {1, 1, 1}, 1), 77);
             });
         }},
        {"conv3d grouped+strided",
         [](Rng& rng) {
             auto x = gradcheck::random_leaf(rng, {1, 4, 2, 5, 5});
             auto k = gradcheck::random_leaf(rng, {4, 2, 1, 3, 3});
             auto b = gradcheck::random_leaf(rng, {4});
             return gradcheck::compare_gradients({x, k, b}, [&](DTape& t) {
                 return scalarize(t, conv3d(t, x, k, b, {1, 2, 2}, {0, 1, 1}, 2), 78);
             });
         }},
        {"separable_conv3d",
         [](Rng& rng) {
             auto x = gradcheck::random_leaf(rng, {1, 3, 3, 6, 6});
             auto sw = gradcheck::random_leaf(rng, {3, 1, 1, 3, 3});
             auto sb = gradcheck::random_leaf(rng, {3});
             auto tw = gradcheck::random_leaf(rng, {3, 1, 3, 1, 1});
             auto tb = gradcheck::random_leaf(rng, {3});
             auto pw = gradcheck::random_leaf(rng, {5, 3, 1, 1, 1});
             auto pb = gradcheck::random_leaf(rng, {5});
             return gradcheck::compare_gradients({x, sw, sb, tw, tb, pw, pb}, [&](DTape& t) {
                 return scalarize(t, separable_conv3d(t, x, sw, sb, tw, tb, pw, pb), 79);
             });
         }},
        {"maxpool3d",
         [](Rng& rng) {
             auto x = separated_leaf(rng, {1, 2, 4, 6, 6});
             const bool spatial = rng.next_below(2) == 0;
             const Dim3 w = spatial ? Dim3{1, 2, 2} : Dim3{2, 2, 2};
             return gradcheck::compare_gradients(
                 {x}, [&](DTape& t) { return scalarize(t, maxpool3d(t, x, w, w), 80); });
         }},
        {"dense",
         [](Rng& rng) {
             auto x = gradcheck::random_leaf(rng, {4, 10});
             auto w = gradcheck::random_leaf(rng, {7, 10});
             auto b = gradcheck::random_leaf(rng, {7});
             return gradcheck::compare_gradients(
                 {x, w, b}, [&](DTape& t) { return scalarize(t, dense(t, x, w, b), 81); });
         }},
        {"relu",
         [](Rng& rng) {
             auto x = separated_leaf(rng, {2, 50});
             return gradcheck::compare_gradients(
                 {x}, [&](DTape& t) { return scalarize(t, relu(t, x), 82); });
         }},
        {"sigmoid",
         [](Rng& rng) {
             auto x = gradcheck::random_leaf(rng, {3, 17}, -3.0, 3.0);
             return gradcheck::compare_gradients(
                 {x}, [&](DTape& t) { return scalarize(t, sigmoid(t, x), 83); });
         }},
        {"mul",
         [](Rng& rng) {
             auto a = gradcheck::random_leaf(rng, {2, 3, 4});
             auto b = gradcheck::random_leaf(rng, {2, 3, 4});
             return gradcheck::compare_gradients(
                 {a, b}, [&](DTape& t) { return scalarize(t, mul(t, a, b), 84); });
         }},
        {"dropout",
         [](Rng& rng) {
             auto x = gradcheck::random_leaf(rng, {4, 25});
             const uint64_t mask_seed = rng.next_u64();
             return gradcheck::compare_gradients({x}, [&](DTape& t) {
                 Rng drop(mask_seed); // identical mask on every probe
                 return scalarize(t, dropout(t, x, 0.3, drop, true), 85);
             });
         }},
        {"reshape",
         [](Rng& rng) {
             auto x = gradcheck::random_leaf(rng, {2, 3, 4});
             return gradcheck::compare_gradients(
                 {x}, [&](DTape& t) { return scalarize(t, reshape(t, x, {4, 6}), 86); });
         }},
        {"sum",
         [](Rng& rng) {
             auto x = gradcheck::random_leaf(rng, {3, 7});
             return gradcheck::compare_gradients({x},
                                                 [&](DTape& t) { return fedgate::sum(t, x); });
         }},
        {"bce_with_logits",
         [](Rng& rng) {
             auto z = gradcheck::random_leaf(rng, {6}, -3.0, 3.0);
             std::vector<double> labels(6);
             for (auto& y : labels) y = static_cast<double>(rng.next_below(2));
             return gradcheck::compare_gradients(
                 {z}, [&](DTape& t) { return bce_with_logits(t, z, labels); });
         }},
    };

    bool ok = true;
    int64_t total_checked = 0;
    for (const auto& op : ops) {
        double worst = 0.0;
        for (int i = 0; i < 20 && ok; ++i) {
            Rng rng(fnv1a64(op.name) + static_cast<uint64_t>(i));
            auto rep = op.trial(rng);
            worst = std::max(worst, rep.max_rel_err);
            total_checked += rep.checked;
            ok &= check(rep.max_rel_err < 1e-4,
                        std::string(op.name) + " trial " + std::to_string(i) + ": " + rep.worst);
        }
        std::fprintf(stderr, "    %-24s worst rel err %.3g\n", op.name, worst);
    }

    // End-to-end micro model, inputs and every parameter.
    double e2e_worst = 0.0;
    for (int i = 0; i < 5 && ok; ++i) {
        DiffGatedT<double> model(micro_arch());
        model.init(Rng(3000 + static_cast<uint64_t>(i)));
        Rng head(3100 + static_cast<uint64_t>(i));
        for (const auto& [name, t] : model.named_params())
            if (name.rfind("head.", 0) == 0)
                for (auto& v : t->data) v = head.uniform(-0.5f, 0.5f);
        Rng data(3200 + static_cast<uint64_t>(i));
        auto rgb = gradcheck::random_leaf(data, {1, 3, 4, 8, 8});
        auto diff = gradcheck::random_leaf(data, {1, 1, 4, 8, 8});
        std::vector<DPtr> leaves = {rgb, diff};
        for (const auto& [name, t] : model.named_params()) leaves.push_back(t);
        auto rep = gradcheck::compare_gradients(leaves, [&](DTape& tape) {
            auto logits = model.forward(tape, rgb, diff, false);
            return bce_with_logits(tape, logits, std::vector<double>{double(i % 2)});
        });
        e2e_worst = std::max(e2e_worst, rep.max_rel_err);
        total_checked += rep.checked;
        ok &= check(rep.max_rel_err < 1e-4, "end-to-end trial " + std::to_string(i) + ": " +
                                                rep.worst);
    }
    std::fprintf(stderr, "    %-24s worst rel err %.3g\n", "end-to-end model", e2e_worst);

    const double secs = seconds_since(t0);
    std::fprintf(stderr, "    %lld elements checked in %.1f s\n",
                 static_cast<long long>(total_checked), secs);
    ok &= check(secs < 120.0, "gradient suite must finish under two minutes");
    return ok;
}

// ---------------------------------------------------------------------------
// 2. Federated averaging is the sample-weighted mean: worked examples exact to
//    1e-12, permutation invariance and single-client identity on 100
//    randomized cases.
// ---------------------------------------------------------------------------

bool criterion_fedavg() {
    bool ok = true;

    auto agg1 = fedavg_aggregate({{params_of({0.0f, 2.0f}), 5}, {params_of({2.0f, 4.0f}), 5}});
    ok &= check(std::fabs(agg1.values[0] - 1.0) <= 1e-12 &&
                    std::fabs(agg1.values[1] - 3.0) <= 1e-12,
                "equal-weight mean of [0,2] and [2,4] must be [1,3]");

    auto agg2 = fedavg_aggregate({{params_of({0.0f}), 1}, {params_of({4.0f}), 3}});
    ok &= check(std::fabs(agg2.values[0] - 3.0) <= 1e-12,
                "1 sample at 0 plus 3 samples at 4 must average to 3");

    Rng rng(9001);
    for (int c = 0; c < 100 && ok; ++c) {
        const int64_t k = 1 + static_cast<int64_t>(rng.next_below(6));
        const int64_t m = 1 + static_cast<int64_t>(rng.next_below(32));
        std::vector<std::pair<ModelParams, int64_t>> updates;
        for (int64_t i = 0; i < k; ++i) {
            std::vector<float> v(static_cast<size_t>(m));
            for (auto& x : v) x = rng.uniform(-1.0f, 1.0f);
            updates.emplace_back(params_of(std::move(v)),
                                 1 + static_cast<int64_t>(rng.next_below(9)));
        }
        auto base = fedavg_aggregate(updates);

        auto shuffled = updates;
        for (size_t i = shuffled.size(); i > 1; --i)
            std::swap(shuffled[i - 1], shuffled[rng.next_below(i)]);
        auto perm = fedavg_aggregate(shuffled);
        float max_diff = 0.0f;
        for (size_t i = 0; i < base.values.size(); ++i)
            max_diff = std::max(max_diff, std::fabs(base.values[i] - perm.values[i]));
        ok &= check(max_diff <= 1e-6f, "case " + std::to_string(c) +
                                           ": permutation moved the mean by " +
                                           std::to_string(max_diff));

        auto identity = fedavg_aggregate({updates[0]});
        ok &= check(std::memcmp(identity.values.data(), updates[0].first.values.data(),
                                identity.values.size() * sizeof(float)) == 0,
                    "case " + std::to_string(c) + ": single-client aggregate must be identity");
    }
    return ok;
}

// ---------------------------------------------------------------------------
// 3. One client at full participation reproduces centralized training bitwise.
// ---------------------------------------------------------------------------

bool criterion_degenerate() {
    const ArchConfig arch = micro_arch();
    auto data = random_dataset(arch, 6, 424242);

    FedConfig cfg;
    cfg.n_clients = 1;
    cfg.rounds = 2;
    cfg.local_epochs = 2;
    cfg.batch_size = 3;
    cfg.lr_max = 0.05;
    cfg.seed = 7;

    InProcessClients runner(arch, {{"client_0", data}});
    auto fed = fed_train(arch, cfg, {"client_0"}, runner, data, /*parallel=*/false);
    auto cen = centralized_train(arch, cfg, data, data);

    bool ok = check(reports_match(fed.reports, cen.reports),
                    "federated and centralized round reports must agree");
    ok &= check(fed.final_params.values.size() == cen.final_params.values.size() &&
                    std::memcmp(fed.final_params.values.data(), cen.final_params.values.data(),
                                fed.final_params.values.size() * sizeof(float)) == 0,
                "federated and centralized parameters must agree bitwise");
    return ok;
}

// ---------------------------------------------------------------------------
// 4. Stratified partitioning: exact cover, per-class imbalance at most one,
//    seeded determinism, on 200 randomized manifests.
// ---------------------------------------------------------------------------

bool criterion_partition() {
    bool ok = true;
    Rng rng(4004);
    for (int c = 0; c < 200 && ok; ++c) {
        const int64_t n_pos = 1 + static_cast<int64_t>(rng.next_below(40));
        const int64_t n_neg = 1 + static_cast<int64_t>(rng.next_below(40));
        const int64_t n_clients =
            1 + static_cast<int64_t>(rng.next_below(
                    static_cast<uint64_t>(std::min(n_pos, n_neg))));
        const uint64_t seed = rng.next_u64();
        auto records = make_records(n_pos, n_neg);
        auto shards = stratified_partition(records, n_clients, seed);
        const std::string tag = "case " + std::to_string(c);

        ok &= check(static_cast<int64_t>(shards.size()) == n_clients, tag + ": shard count");

        std::multiset<std::string> covered;
        int64_t min_pos = n_pos, max_pos = 0, min_neg = n_neg, max_neg = 0;
        for (const auto& s : shards) {
            int64_t got_pos = 0, got_neg = 0;
            for (const auto& id : s.sample_ids) {
                covered.insert(id);
                (id.rfind("pos_", 0) == 0 ? got_pos : got_neg)++;
            }
            ok &= check(got_pos == s.n_pos && got_neg == s.n_neg,
                        tag + ": shard counters must match membership");
            min_pos = std::min(min_pos, got_pos);
            max_pos = std::max(max_pos, got_pos);
            min_neg = std::min(min_neg, got_neg);
            max_neg = std::max(max_neg, got_neg);
        }
        std::multiset<std::string> expected;
        for (const auto& r : records) expected.insert(r.path);
        ok &= check(covered == expected, tag + ": every sample assigned exactly once");
        ok &= check(max_pos - min_pos <= 1 && max_neg - min_neg <= 1,
                    tag + ": per-class imbalance exceeds one");

        auto again = stratified_partition(records, n_clients, seed);
        bool same = again.size() == shards.size();
        for (size_t i = 0; same && i < shards.size(); ++i)
            same = again[i].sample_ids == shards[i].sample_ids;
        ok &= check(same, tag + ": same seed must reproduce the same assignment");
    }
    return ok;
}

// ---------------------------------------------------------------------------
// 5. One-cycle schedule: endpoints equal lr_min and the midpoint equals
//    lr_max exactly for the 0.5 and 0.6 configurations, with exact mirror
//    symmetry; the sweep spans 1e-15 to 1 geometrically.
// ---------------------------------------------------------------------------

bool criterion_schedule() {
    bool ok = true;
    for (double lr_max : {0.5, 0.6}) {
        for (int64_t total : {100, 101}) {
            OneCycleSchedule s;
            s.total_steps = total;
            s.lr_min = default_lr_min(lr_max);
            s.lr_max = lr_max;
            const std::string tag =
                "lr_max=" + std::to_string(lr_max) + " total=" + std::to_string(total);
            ok &= check(one_cycle_lr(s, 0) == s.lr_min, tag + ": lr(0) must equal lr_min");
            ok &= check(one_cycle_lr(s, total) == s.lr_min,
                        tag + ": lr(total) must equal lr_min");
            ok &= check(one_cycle_lr(s, total / 2) == s.lr_max,
                        tag + ": lr(total/2) must equal lr_max");
            for (int64_t k = 0; k <= total; ++k)
                ok &= check(one_cycle_lr(s, k) == one_cycle_lr(s, total - k),
                            tag + ": lr(" + std::to_string(k) + ") must mirror");
        }
    }

    const int64_t steps = 100;
    const double lo = 1e-15, hi = 1.0;
    ok &= check(sweep_lr_at(0, steps, lo, hi) == lo, "sweep must start exactly at 1e-15");
    ok &= check(sweep_lr_at(steps - 1, steps, lo, hi) == hi, "sweep must end exactly at 1");
    const double r0 = sweep_lr_at(1, steps, lo, hi) / sweep_lr_at(0, steps, lo, hi);
    for (int64_t i = 1; i + 1 < steps; ++i) {
        const double r = sweep_lr_at(i + 1, steps, lo, hi) / sweep_lr_at(i, steps, lo, hi);
        ok &= check(std::fabs(r - r0) <= 1e-9 * r0,
                    "sweep ratio drifts at step " + std::to_string(i));
    }
    return ok;
}

// ---------------------------------------------------------------------------
// 6. Trapezoidal ROC-AUC equals brute-force pair counting within 1e-12 on 500
//    randomized, tie-rich score sets of up to 200 samples.
// ---------------------------------------------------------------------------

double pair_count_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0, ties = 0.0;
    int64_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                ties += 1.0;
        }
    }
    return (wins + 0.5 * ties) / static_cast<double>(pairs);
}

bool criterion_auc() {
    bool ok = true;
    Rng rng(6006);
    for (int c = 0; c < 500 && ok; ++c) {
        const size_t n = 2 + static_cast<size_t>(rng.next_below(199));
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        for (size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(rng.next_below(17)) / 16.0; // tie-rich grid
            labels[i] = static_cast<int>(rng.next_below(2));
        }
        labels[0] = 0;
        labels[1] = 1;
        const double got = roc_auc(scores, labels);
        const double want = pair_count_auc(scores, labels);
        ok &= check(std::fabs(got - want) <= 1e-12,
                    "case " + std::to_string(c) + ": trapezoid " + std::to_string(got) +
                        " vs pairs " + std::to_string(want));
    }
    return ok;
}

// ---------------------------------------------------------------------------
// 7. Desk-scale federated run through the CLI: 4 clients, full participation,
//    4 rounds of local one-cycle training on synthetic clips. Round-0
//    accuracy is chance, final accuracy >= 0.95, the smoothed accuracy trend
//    never decreases, and the whole pipeline finishes in under ten minutes.
// ---------------------------------------------------------------------------

bool criterion_desk_run() {
    const auto t0 = std::chrono::steady_clock::now();
    testutil::TempDir tmp("accept_desk");
    const std::vector<std::string> arch = {"--frames", "8",    "--height",   "24",
                                           "--width",  "24",   "--widths",   "8,16",
                                           "--fc-width", "32", "--dropout",  "0.2"};
    auto with_arch = [&](std::vector<std::string> args) {
        args.insert(args.end(), arch.begin(), arch.end());
        return args;
    };

    const std::string synth_dir = tmp.str("synth");
    must_succeed(run_cli(with_arch({"synth", "--train-per-class", "20", "--val-per-class", "10",
                                    "--seed", "2026", "--out", synth_dir})),
                 "synth");
    const std::string ptrain = tmp.str("ptrain"), pval = tmp.str("pval");
    must_succeed(run_cli(with_arch({"preprocess", "--manifest", synth_dir + "/train/manifest.tsv",
                                    "--out", ptrain})),
                 "preprocess train");
    must_succeed(run_cli(with_arch({"preprocess", "--manifest", synth_dir + "/val/manifest.tsv",
                                    "--out", pval})),
                 "preprocess val");
    must_succeed(run_cli({"partition", "--manifest", ptrain + "/manifest.tsv", "--clients", "4",
                          "--seed", "2026", "--out", ptrain}),
                 "partition");
    must_succeed(run_cli(with_arch({"fed-train", "--manifest", ptrain + "/manifest.tsv", "--val",
                                    pval + "/manifest.tsv", "--clients", "4", "--rounds", "4",
                                    "--participation", "all", "--local-epochs", "4",
                                    "--batch-size", "4", "--lr-max", "0.05", "--momentum", "0.9",
                                    "--seed", "2026", "--out", tmp.str("run")})),
                 "fed-train");

    auto reports = read_rounds_log(tmp.str("run") + "/rounds.log");
    bool ok = check(reports.size() == 5, "expected 5 round reports");
    if (!ok) return false;
    std::string accs = "accuracy by round:";
    for (const auto& r : reports) accs += " " + std::to_string(r.accuracy);
    std::fprintf(stderr, "    %s\n", accs.c_str());

    ok &= check(std::fabs(reports.front().accuracy - 0.5) <= 0.05,
                "round-0 accuracy must be chance level");
    ok &= check(reports.back().accuracy >= 0.95, "final accuracy must reach 0.95");
    for (size_t i = 0; i + 2 < reports.size(); ++i) {
        const double a = (reports[i].accuracy + reports[i + 1].accuracy) / 2.0;
        const double b = (reports[i + 1].accuracy + reports[i + 2].accuracy) / 2.0;
        ok &= check(b >= a - 1e-9, "smoothed accuracy dips after round " + std::to_string(i));
    }
    const double secs = seconds_since(t0);
    std::fprintf(stderr, "    pipeline took %.1f s\n", secs);
    ok &= check(secs < 600.0, "pipeline must finish in under ten minutes");
    return ok;
}

// ---------------------------------------------------------------------------
// 8. Over five paired seeds, full participation ends with mean accuracy at
//    least that of 50% sampled participation, and both regimes beat their
//    round-0 accuracy.
// ---------------------------------------------------------------------------

bool criterion_participation() {
    ArchConfig arch;
    arch.frames = 6;
    arch.height = 16;
    arch.width = 16;
    arch.blocks = 2;
    arch.widths = {4, 8};
    arch.fc_width = 16;
    arch.dropout_p = 0.1;

    double sum_all = 0.0, sum_sample = 0.0, sum_round0 = 0.0;
    for (uint64_t seed = 201; seed <= 205; ++seed) {
        auto train = synth_dataset(arch, 8, 8000 + seed, 0);
        auto val = synth_dataset(arch, 6, 8100 + seed, 100);
        std::map<std::string, std::vector<PreparedSample>> by_client;
        std::vector<std::string> ids;
        for (int i = 0; i < 4; ++i) ids.push_back("client_" + std::to_string(i));
        for (size_t i = 0; i < train.size(); ++i)
            by_client[ids[i % 4]].push_back(train[i]);

        FedConfig cfg;
        cfg.n_clients = 4;
        cfg.rounds = 4;
        cfg.local_epochs = 6;
        cfg.batch_size = 4;
        cfg.lr_max = 0.05;
        cfg.seed = seed;

        InProcessClients runner(arch, by_client);
        cfg.participation = "all";
        auto full = fed_train(arch, cfg, ids, runner, val, /*parallel=*/true);
        cfg.participation = "sample";
        cfg.sample_fraction = 0.5;
        auto sampled = fed_train(arch, cfg, ids, runner, val, /*parallel=*/true);

        sum_round0 += full.reports.front().accuracy;
        sum_all += full.reports.back().accuracy;
        sum_sample += sampled.reports.back().accuracy;
        std::fprintf(stderr, "    seed %llu: round0 %.3f, all %.3f, sampled %.3f\n",
                     static_cast<unsigned long long>(seed), full.reports.front().accuracy,
                     full.reports.back().accuracy, sampled.reports.back().accuracy);
    }
    const double mean_all = sum_all / 5.0, mean_sample = sum_sample / 5.0,
                 mean_round0 = sum_round0 / 5.0;
    std::fprintf(stderr, "    means: round0 %.3f, all %.3f, sampled %.3f\n", mean_round0,
                 mean_all, mean_sample);
    bool ok = check(mean_all + 1e-12 >= mean_sample,
                    "full participation must not lose to sampled participation");
    ok &= check(mean_all > mean_round0, "full participation must beat round-0 accuracy");
    ok &= check(mean_sample > mean_round0, "sampled participation must beat round-0 accuracy");
    return ok;
}

// ---------------------------------------------------------------------------
// 9. A two-process socket run reproduces the in-process sequential run
//    bitwise, and the frame parsers survive 10000 malformed frames.
// ---------------------------------------------------------------------------

bool criterion_transport() {
    testutil::TempDir tmp("accept_sock");
    const std::vector<std::string> arch = {"--frames", "4",   "--height",   "16", "--width",
                                           "16",       "--widths", "4,8",  "--fc-width",
                                           "8",        "--dropout", "0.1"};
    auto with_arch = [&](std::vector<std::string> args) {
        args.insert(args.end(), arch.begin(), arch.end());
        return args;
    };

    const std::string synth_dir = tmp.str("synth");
    must_succeed(run_cli(with_arch({"synth", "--train-per-class", "4", "--val-per-class", "2",
                                    "--seed", "5", "--out", synth_dir})),
                 "synth");
    const std::string ptrain = tmp.str("ptrain"), pval = tmp.str("pval");
    must_succeed(run_cli(with_arch({"preprocess", "--manifest", synth_dir + "/train/manifest.tsv",
                                    "--out", ptrain})),
                 "preprocess train");
    must_succeed(run_cli(with_arch({"preprocess", "--manifest", synth_dir + "/val/manifest.tsv",
                                    "--out", pval})),
                 "preprocess val");
    must_succeed(run_cli({"partition", "--manifest", ptrain + "/manifest.tsv", "--clients", "2",
                          "--seed", "3", "--out", ptrain}),
                 "partition");

    const std::vector<std::string> train_flags = {"--clients", "2",    "--rounds",      "2",
                                                  "--local-epochs", "1", "--batch-size", "2",
                                                  "--lr-max", "0.05",  "--seed",        "23"};
    auto ref_args = with_arch({"fed-train", "--manifest", ptrain + "/manifest.tsv", "--val",
                               pval + "/manifest.tsv", "--sequential", "1", "--out",
                               tmp.str("ref")});
    ref_args.insert(ref_args.end(), train_flags.begin(), train_flags.end());
    must_succeed(run_cli(ref_args), "fed-train reference");

    auto serve_args = with_arch({"fed-serve", "--val", pval + "/manifest.tsv", "--sequential",
                                 "1", "--port", "0", "--timeout-secs", "120", "--out",
                                 tmp.str("srv")});
    serve_args.insert(serve_args.end(), train_flags.begin(), train_flags.end());
    subprocess::Child server(g_cli, serve_args);
    const std::string banner_prefix = "serving on 127.0.0.1:";
    bool up = server.wait_for_output(
        [&](const std::string& s) { return s.find(banner_prefix) != std::string::npos; }, 60.0);
    if (!check(up, "server never printed its banner: " + server.output())) return false;
    const std::string& banner = server.output();
    const size_t at = banner.find(banner_prefix) + banner_prefix.size();
    const std::string port = banner.substr(at, banner.find_first_not_of("0123456789", at) - at);

    auto client_args = [&](const std::string& id) {
        return with_arch({"fed-client", "--manifest", ptrain + "/manifest.tsv", "--client-id",
                          id, "--host", "127.0.0.1", "--port", port, "--timeout-secs", "120"});
    };
    subprocess::Child c0(g_cli, client_args("client_0"));
    subprocess::Child c1(g_cli, client_args("client_1"));
    auto r0 = c0.wait();
    auto r1 = c1.wait();
    auto rs = server.wait();
    bool ok = check(r0.exit_code == 0, "client_0 exit: " + r0.output);
    ok &= check(r1.exit_code == 0, "client_1 exit: " + r1.output);
    ok &= check(rs.exit_code == 0, "server exit: " + rs.output);
    if (!ok) return false;

    auto want = read_rounds_log(tmp.str("ref") + "/rounds.log");
    auto got = read_rounds_log(tmp.str("srv") + "/rounds.log");
    ok &= check(reports_match(got, want), "socket reports must match the in-process run");
    ok &= check(read_file(tmp.str("srv") + "/model.fgcp") ==
                    read_file(tmp.str("ref") + "/model.fgcp"),
                "socket checkpoint must match the in-process checkpoint bitwise");

    // Malformed-frame fuzz: every outcome must be a clean ProtocolError.
    Rng rng(0xFDAF);
    int64_t decoded = 0, rejected = 0;
    for (int i = 0; i < 10000; ++i) {
        const size_t len = static_cast<size_t>(rng.next_below(64));
        std::string buf(len, '\0');
        for (auto& ch : buf) ch = static_cast<char>(rng.next_below(256));
        if (i % 3 == 0 && buf.size() >= 4) {
            buf[0] = 'F';
            buf[1] = 'D';
            buf[2] = 'G';
            buf[3] = '1';
        }
        if (i % 9 == 0 && buf.size() >= kFrameHeaderSize) {
            buf[4] = static_cast<char>(1 + rng.next_below(6));
            const uint32_t plen = static_cast<uint32_t>(buf.size() - kFrameHeaderSize);
            buf[5] = static_cast<char>(plen & 0xff);
            buf[6] = static_cast<char>((plen >> 8) & 0xff);
            buf[7] = static_cast<char>((plen >> 16) & 0xff);
            buf[8] = static_cast<char>((plen >> 24) & 0xff);
        }
        try {
            Message m = decode_message(buf);
            ++decoded;
            for (int p = 0; p < 4; ++p) {
                try {
                    switch (p) {
                        case 0: parse_hello(m.payload); break;
                        case 1: parse_global_params(m.payload); break;
                        case 2: parse_train_order(m.payload); break;
                        case 3: parse_client_update(m.payload); break;
                    }
                } catch (const ProtocolError&) {
                }
            }
        } catch (const ProtocolError&) {
            ++rejected;
        } catch (const std::exception& e) {
            return check(false, std::string("fuzz frame leaked a non-protocol error: ") +
                                    e.what());
        }
    }
    std::fprintf(stderr, "    fuzz: %lld decoded, %lld rejected\n",
                 static_cast<long long>(decoded), static_cast<long long>(rejected));
    ok &= check(decoded > 0 && rejected > 0, "fuzz must exercise both outcomes");
    return ok;
}

// ---------------------------------------------------------------------------
// 10. Frame differencing: zero exactly on static clips, bounded to [-1,1] on
//     randomized clips, localized to the frames that changed, and fast enough
//     to diff a 151-frame 112x112 clip in under half a second.
// ---------------------------------------------------------------------------

bool criterion_differencing() {
    bool ok = true;
    Rng rng(1010);

    for (int c = 0; c < 30 && ok; ++c) {
        const int64_t f = 2 + static_cast<int64_t>(rng.next_below(6));
        const int64_t h = 4 + static_cast<int64_t>(rng.next_below(9));
        const int64_t w = 4 + static_cast<int64_t>(rng.next_below(9));
        TensorT<float> frames({f, 3, h, w});
        for (auto& v : frames.data) v = rng.next_float();
        auto diff = frame_difference(frames);
        ok &= check(diff.shape == Shape({1, f - 1, h, w}), "difference shape");
        float lo = 0.0f, hi = 0.0f, amax = 0.0f;
        for (float v : diff.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            amax = std::max(amax, std::fabs(v));
        }
        ok &= check(lo >= -1.0f && hi <= 1.0f, "difference must stay within [-1,1]");
        ok &= check(amax > 0.0f, "a random clip must register motion");
    }

    TensorT<float> still({5, 3, 16, 16});
    for (int64_t p = 0; p < 3 * 16 * 16; ++p) still.data[static_cast<size_t>(p)] = rng.next_float();
    for (int64_t f = 1; f < 5; ++f)
        std::copy_n(still.data.begin(), 3 * 16 * 16, still.data.begin() + f * 3 * 16 * 16);
    auto flat = frame_difference(still);
    ok &= check(std::all_of(flat.data.begin(), flat.data.end(),
                            [](float v) { return v == 0.0f; }),
                "a static clip must difference to exactly zero");

    // Nudging one pixel of frame 2 must light up temporal slices 1 and 2 only.
    TensorT<float> poked = still;
    poked.data[static_cast<size_t>(2 * 3 * 16 * 16 + 5 * 16 + 7)] += 0.6f;
    auto local = frame_difference(poked);
    for (int64_t t = 0; t < 4; ++t) {
        float slice_max = 0.0f;
        for (int64_t p = 0; p < 16 * 16; ++p)
            slice_max = std::max(slice_max,
                                 std::fabs(local.data[static_cast<size_t>(t * 16 * 16 + p)]));
        if (t == 1 || t == 2)
            ok &= check(slice_max > 0.0f, "slice " + std::to_string(t) + " must see the change");
        else
            ok &= check(slice_max == 0.0f, "slice " + std::to_string(t) + " must stay zero");
    }

    TensorT<float> big({151, 3, 112, 112});
    for (auto& v : big.data) v = rng.next_float();
    const auto t0 = std::chrono::steady_clock::now();
    auto big_diff = frame_difference(big);
    const double secs = seconds_since(t0);
    std::fprintf(stderr, "    151x3x112x112 diffed in %.3f s\n", secs);
    ok &= check(big_diff.dim(1) == 150, "full-length clip must shorten by one frame");
    ok &= check(secs < 0.5, "long clip must difference in under half a second");
    return ok;
}

// ---------------------------------------------------------------------------

int run_acceptance() {
    struct Criterion {
        int id;
        const char* title;
        std::function<bool()> fn;
    };
    const std::vector<Criterion> criteria = {
        {1, "gradients match finite differences", criterion_gradients},
        {2, "federated averaging is an exact weighted mean", criterion_fedavg},
        {3, "one federated client reproduces centralized training bitwise", criterion_degenerate},
        {4, "partitioning covers every sample with balanced classes", criterion_partition},
        {5, "learning-rate schedule hits its endpoints and peak exactly", criterion_schedule},
        {6, "trapezoidal ROC-AUC agrees with pair counting", criterion_auc},
        {7, "federated training on synthetic clips reaches high accuracy", criterion_desk_run},
        {8, "full participation matches or beats sampled participation",
         criterion_participation},
        {9, "socket training reproduces the in-process run bitwise", criterion_transport},
        {10, "frame differencing is bounded, motion-sensitive, and fast",
         criterion_differencing},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        std::fprintf(stderr, "criterion %02d: %s\n", c.id, c.title);
        const auto t0 = std::chrono::steady_clock::now();
        bool ok = false;
        try {
            ok = c.fn();
        } catch (const std::exception& e) {
            std::fprintf(stderr, "    threw %s\n", e.what());
        }
        std::fprintf(stderr, "    done in %.1f s\n", seconds_since(t0));
        std::printf("criterion %02d [%s] %s\n", c.id, ok ? "PASS" : "FAIL", c.title);
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    return failures == 0 ? 0 : 1;
}

} // namespace
} // namespace fedgate

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <path-to-cli-binary>\n");
        return 2;
    }
    fedgate::g_cli = argv[1];
    return fedgate::run_acceptance();
}
