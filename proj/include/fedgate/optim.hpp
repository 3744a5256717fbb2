#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "fedgate/errors.hpp"
#include "fedgate/metrics.hpp"
#include "fedgate/model.hpp"

namespace fedgate {

// ---------------------------------------------------------------------------
// SGD with classical momentum: v <- m*v + g, w <- w - lr*v. The learning rate
// arrives fresh every step from the schedule and is never cached here.
// ---------------------------------------------------------------------------

struct SgdState {
    double momentum = 0.9;
    std::vector<float> velocity;
};

// `layout` is only consulted to name the offending layer when a gradient is
// non-finite.
inline void sgd_step(std::vector<float>& params, const std::vector<float>& grads,
                     SgdState& state, double lr, const Layout* layout = nullptr) {
    if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
    if (!(state.momentum >= 0.0 && state.momentum < 1.0))
        throw ConfigError("sgd_step: momentum must be in [0,1)");
    if (grads.size() != params.size())
        throw TrainError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    if (state.velocity.empty()) state.velocity.assign(params.size(), 0.0f);
    if (state.velocity.size() != params.size())
        throw TrainError("sgd_step: velocity size does not match parameters");

    for (size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            std::string where = "index " + std::to_string(i);
            if (layout) {
                int64_t off = 0;
                for (const auto& spec : *layout) {
                    const int64_t n = shape_numel(spec.shape);
                    if (static_cast<int64_t>(i) < off + n) {
                        where = "layer '" + spec.name + "'";
                        break;
                    }
                    off += n;
                }
            }
            throw TrainError("non-finite gradient in " + where);
        }
    }
    const float m = static_cast<float>(state.momentum);
    const float step = static_cast<float>(lr);
    for (size_t i = 0; i < params.size(); ++i) {
        state.velocity[i] = m * state.velocity[i] + grads[i];
        params[i] -= step * state.velocity[i];
    }
}

// ---------------------------------------------------------------------------
// One-cycle schedule: linear ramp lr_min -> lr_max over the first half of the
// steps, back down over the second half.
// ---------------------------------------------------------------------------

struct OneCycleSchedule {
    int64_t total_steps = 1;
    double lr_min = 0.0;
    double lr_max = 0.0;

    void validate() const {
        if (total_steps < 1) throw ConfigError("one-cycle: total_steps must be positive");
        if (!(lr_min > 0.0)) throw ConfigError("one-cycle: lr_min must be positive");
        if (!(lr_max > lr_min)) throw ConfigError("one-cycle: lr_max must exceed lr_min");
    }
};

inline double default_lr_min(double lr_max) { return lr_max / 25.0; }

// Reflecting the step index (min(k, total-k)) makes lr(k) == lr(total-k) hold
// exactly in floating point, including odd totals; the endpoints and the
// midpoint hit lr_min / lr_max without rounding.
inline double one_cycle_lr(const OneCycleSchedule& s, int64_t step) {
    s.validate();
    if (step < 0 || step > s.total_steps)
        throw ConfigError("one-cycle: step " + std::to_string(step) + " outside [0," +
                          std::to_string(s.total_steps) + "]");
    const int64_t mid = s.total_steps / 2;
    const int64_t j = std::min(step, s.total_steps - step);
    if (j <= 0 || mid == 0) return s.lr_min;
    if (j >= mid) return s.lr_max;
    return s.lr_min + (s.lr_max - s.lr_min) *
                          (static_cast<double>(j) / static_cast<double>(mid));
}

// ---------------------------------------------------------------------------
// LR range test: geometric sweep lr_lo -> lr_hi, one SGD step per point,
// bias-corrected EMA smoothing, abort once smoothed loss exceeds 4x its
// running minimum. Bounds are suggested from the smoothed curve.
// ---------------------------------------------------------------------------

struct SweepPoint {
    double lr = 0.0;
    double raw_loss = 0.0;
    double smoothed_loss = 0.0;
};

struct LrSweepResult {
    std::vector<SweepPoint> points;
    double suggested_min_lr = 0.0;
    double suggested_max_lr = 0.0;
};

// Endpoint-exact geometric interpolation: index 0 gives lr_lo, the last index
// gives lr_hi bit-for-bit.
inline double sweep_lr_at(int64_t i, int64_t steps, double lr_lo, double lr_hi) {
    if (i == 0) return lr_lo;
    if (i == steps - 1) return lr_hi;
    return lr_lo * std::pow(lr_hi / lr_lo,
                            static_cast<double>(i) / static_cast<double>(steps - 1));
}

// min_lr: left endpoint of the steepest descending segment of the smoothed
// curve in log-lr coordinates, restricted to the region before divergence.
// max_lr: last lr before smoothed loss first exceeds divergence_factor times
// its running minimum; if it never diverges, the last lr.
inline void suggest_bounds(const std::vector<SweepPoint>& points, double& min_lr,
                           double& max_lr, double divergence_factor = 2.0) {
    std::vector<SweepPoint> valid;
    for (const auto& p : points)
        if (std::isfinite(p.smoothed_loss)) valid.push_back(p);
    if (valid.size() < 10)
        throw ConfigError("suggest_bounds: need at least 10 valid sweep points, have " +
                          std::to_string(valid.size()));

    size_t diverge_at = valid.size(); // first index past the usable region
    double running_min = valid[0].smoothed_loss;
    for (size_t i = 1; i < valid.size(); ++i) {
        if (valid[i].smoothed_loss > divergence_factor * running_min) {
            diverge_at = i;
            break;
        }
        running_min = std::min(running_min, valid[i].smoothed_loss);
    }
    max_lr = valid[diverge_at - 1].lr;

    double steepest = 0.0;
    size_t best = valid.size();
    for (size_t i = 0; i + 1 < diverge_at; ++i) {
        const double dlog = std::log(valid[i + 1].lr) - std::log(valid[i].lr);
        const double slope = (valid[i + 1].smoothed_loss - valid[i].smoothed_loss) / dlog;
        if (slope < steepest) { // strict: ties resolve to the smaller lr
            steepest = slope;
            best = i;
        }
    }
    if (best == valid.size())
        throw TrainError("suggest_bounds: no descending region in the loss curve");
    min_lr = valid[best].lr;
}

// Trainer concept: snapshot() -> State, restore(State), step(lr) -> loss.
template <typename Trainer>
LrSweepResult lr_range_test(Trainer& trainer, int64_t steps, double lr_lo, double lr_hi,
                            double beta = 0.98, double abort_factor = 4.0) {
    if (steps < 10) throw ConfigError("lr_range_test: needs at least 10 steps");
    if (!(lr_lo > 0.0 && lr_lo < lr_hi))
        throw ConfigError("lr_range_test: requires 0 < lr_lo < lr_hi");
    if (!(beta >= 0.0 && beta < 1.0))
        throw ConfigError("lr_range_test: smoothing beta must be in [0,1)");

    auto before = trainer.snapshot();
    LrSweepResult result;
    try {
        double avg = 0.0;
        double best = std::numeric_limits<double>::infinity();
        for (int64_t i = 0; i < steps; ++i) {
            const double lr = sweep_lr_at(i, steps, lr_lo, lr_hi);
            double loss;
            try {
                loss = trainer.step(lr);
            } catch (const TrainError&) {
                // Exploding gradients at high lr count as divergence too.
                loss = std::numeric_limits<double>::infinity();
            }
            if (!std::isfinite(loss)) {
                result.points.push_back({lr, loss, std::numeric_limits<double>::infinity()});
                break;
            }
            avg = beta * avg + (1.0 - beta) * loss;
            const double smoothed = avg / (1.0 - std::pow(beta, static_cast<double>(i + 1)));
            result.points.push_back({lr, loss, smoothed});
            best = std::min(best, smoothed);
            if (smoothed > abort_factor * best) break;
        }
    } catch (...) {
        trainer.restore(before);
        throw;
    }
    trainer.restore(before);
    suggest_bounds(result.points, result.suggested_min_lr, result.suggested_max_lr);
    return result;
}

inline std::string sweep_csv(const LrSweepResult& r) {
    std::string out = "lr,raw_loss,smoothed_loss\n";
    for (const auto& p : r.points)
        out += fmt_g17(p.lr) + "," + fmt_g17(p.raw_loss) + "," + fmt_g17(p.smoothed_loss) + "\n";
    return out;
}

} // namespace fedgate
