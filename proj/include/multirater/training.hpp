#pragma once

#include <cmath>
#include <iostream>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "multirater/data.hpp"
#include "multirater/losses.hpp"
#include "multirater/metrics.hpp"
#include "multirater/network.hpp"
#include "multirater/rng.hpp"

namespace multirater {

enum class Optimizer { sgd, adam };

inline Optimizer parse_optimizer(const std::string& s) {
    if (s == "sgd") return Optimizer::sgd;
    if (s == "adam") return Optimizer::adam;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd|adam)");
}

struct TrainConfig {
    Optimizer optimizer = Optimizer::sgd;
    double lr0 = 1e-3;
    int epochs = 200;
    int batch_size = 4;
    double poly_power = 0.9;
    double momentum = 0.9;  // SGD
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int n_mc_eval = 50;
    uint64_t seed = 0;
    double val_fraction = 0.2;  // internal validation share of the training cases
    bool restore_best = true;   // keep the best-val-Q parameters at the end
    LossConfig loss;

    void validate() const {
        if (lr0 <= 0) throw std::invalid_argument("TrainConfig: lr0 must be > 0");
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (val_fraction < 0 || val_fraction >= 1)
            throw std::invalid_argument("TrainConfig: val_fraction must be in [0,1)");
        if (n_mc_eval < 1) throw std::invalid_argument("TrainConfig: n_mc_eval must be >= 1");
    }
};

/// lr0 * (1 - step/total_steps)^power.
inline double poly_lr(long step, long total_steps, double lr0, double power) {
    if (total_steps < 1) throw std::out_of_range("poly_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps) throw std::out_of_range("poly_lr: step out of range");
    return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps),
                          power);
}

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;
    double kl = 0.0;
    double dice = 0.0;
    double lr = 0.0;
    std::optional<double> val_q_score;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"epoch", epoch}, {"loss", loss}, {"kl", kl},
                            {"dice", dice},   {"lr", lr}};
        if (val_q_score) j["val_q_score"] = *val_q_score;
        else j["val_q_score"] = nullptr;
        return j;
    }
};

struct TrainResult {
    std::vector<EpochLog> log;
    int best_epoch = -1;              // -1 when no validation cases
    double best_val_q = -1.0;
};

/// Monte Carlo inference entry point: n_mc weight draws per branch. For
/// models without variational parameters repeated draws are identical, so
/// n_mc collapses to 1 (with a warning when that changes the request).
inline PredictionSet mc_predict(Model& model, const Tensor& image, int n_mc, Rng& rng) {
    if (!model.bayesian() && n_mc > 1) {
        std::cerr << "[multirater] note: deterministic model, collapsing n_mc=" << n_mc
                  << " to 1\n";
        n_mc = 1;
    }
    return model.forward(image, rng, n_mc);
}

namespace detail {

/// Per-parameter optimizer state, attached in visit order.
struct OptSlot {
    Param* p = nullptr;
    Tensor vel_mu, vel_rho;          // SGD momentum
    Tensor m_mu, v_mu, m_rho, v_rho; // Adam moments
};

inline void sgd_step(OptSlot& s, double lr, double momentum) {
    Param& p = *s.p;
    if (s.vel_mu.empty()) s.vel_mu.resize(p.dist.mu.shape());
    for (size_t i = 0; i < p.dist.mu.size(); ++i) {
        const float v = static_cast<float>(momentum) * s.vel_mu[i] + p.grad_mu[i];
        s.vel_mu[i] = v;
        p.dist.mu[i] -= static_cast<float>(lr) * v;
    }
    if (!p.bayes) return;
    if (s.vel_rho.empty()) s.vel_rho.resize(p.dist.rho.shape());
    for (size_t i = 0; i < p.dist.rho.size(); ++i) {
        const float v = static_cast<float>(momentum) * s.vel_rho[i] + p.grad_rho[i];
        s.vel_rho[i] = v;
        p.dist.rho[i] -= static_cast<float>(lr) * v;
    }
}

inline void adam_update(Tensor& w, const Tensor& g, Tensor& m, Tensor& v, double lr, double b1,
                        double b2, double eps, long t) {
    if (m.empty()) m.resize(w.shape());
    if (v.empty()) v.resize(w.shape());
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        const double mi = b1 * m[i] + (1.0 - b1) * gi;
        const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        w[i] -= static_cast<float>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
}

inline void adam_step(OptSlot& s, double lr, const TrainConfig& cfg, long t) {
    Param& p = *s.p;
    adam_update(p.dist.mu, p.grad_mu, s.m_mu, s.v_mu, lr, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps, t);
    if (p.bayes)
        adam_update(p.dist.rho, p.grad_rho, s.m_rho, s.v_rho, lr, cfg.adam_beta1, cfg.adam_beta2,
                    cfg.adam_eps, t);
}

/// Stacks the selected cases into a minibatch; target r is rater mask r,
/// except for the vanilla variant which trains against the probability map.
inline Batch make_batch(const std::vector<MultiRaterCase>& cases, const std::vector<int>& idx,
                        size_t first, size_t count, bool vanilla) {
    const MultiRaterCase& c0 = cases[static_cast<size_t>(idx[first])];
    const int h = c0.image.dim(0), w = c0.image.dim(1);
    const int m = vanilla ? 1 : c0.num_raters();
    const int n = static_cast<int>(count);
    Batch batch;
    batch.images.resize({n, 1, h, w});
    batch.rater_targets.assign(static_cast<size_t>(m), Tensor({n, 1, h, w}));
    const size_t hw = static_cast<size_t>(h) * w;
    for (int s = 0; s < n; ++s) {
        const MultiRaterCase& c = cases[static_cast<size_t>(idx[first + static_cast<size_t>(s)])];
        std::copy(c.image.data(), c.image.data() + hw,
                  batch.images.data() + static_cast<size_t>(s) * hw);
        if (vanilla) {
            const Tensor pm = probability_map(c.rater_masks);
            std::copy(pm.data(), pm.data() + hw,
                      batch.rater_targets[0].data() + static_cast<size_t>(s) * hw);
        } else {
            for (int r = 0; r < m; ++r) {
                float* dst = batch.rater_targets[static_cast<size_t>(r)].data() +
                             static_cast<size_t>(s) * hw;
                const Mask& mk = c.rater_masks[static_cast<size_t>(r)];
                for (size_t i = 0; i < hw; ++i) dst[i] = static_cast<float>(mk.v[i]);
            }
        }
    }
    return batch;
}

/// Mean-weight fused prediction, for the internal validation metric.
inline double validation_q(Model& model, const std::vector<MultiRaterCase>& val_cases, int L) {
    double q = 0.0;
    for (const MultiRaterCase& c : val_cases) {
        // Mean-mode single pass per branch: deterministic regardless of variant.
        PredictionSet ps;
        {
            Tensor x = c.image;
            x.reshape({1, 1, x.dim(0), x.dim(1)});
            const int m = model.num_branches();
            const int h = c.image.dim(0), w = c.image.dim(1);
            ps.fused.resize({h, w});
            const size_t hw = static_cast<size_t>(h) * w;
            int last_net = -1;
            for (int r = 0; r < m; ++r) {
                MultiDecoderNet& net = model.branch_net(r);
                const int ni = model.variant == Variant::ensemble ? r : 0;
                if (ni != last_net) {
                    net.encode(x);
                    last_net = ni;
                }
                const Tensor& p = net.decode_branch(model.branch_decoder(r), WeightMode::mean,
                                                    nullptr);
                for (size_t i = 0; i < hw; ++i) ps.fused[i] += p[i];
            }
            const float inv = 1.0f / static_cast<float>(m);
            for (size_t i = 0; i < hw; ++i) ps.fused[i] *= inv;
        }
        q += q_score(ps.fused, probability_map(c.rater_masks), L);
    }
    return q / static_cast<double>(val_cases.size());
}

} // namespace detail

/// Trains the model on `cases` per the configured protocol. Writes one
/// NDJSON record per epoch to log_stream when given. Deterministic for a
/// fixed seed on a fixed platform.
inline TrainResult train(Model& model, const std::vector<MultiRaterCase>& cases,
                         const TrainConfig& cfg, std::ostream* log_stream = nullptr) {
    cfg.validate();
    if (cases.empty()) throw std::invalid_argument("train: empty dataset");
    const bool vanilla = model.variant == Variant::vanilla;
    const int m_data = cases[0].num_raters();
    if (!vanilla && model.num_branches() != m_data)
        throw std::invalid_argument("train: model has " + std::to_string(model.num_branches()) +
                                    " branches but the dataset carries " +
                                    std::to_string(m_data) + " rater masks per case");
    for (const MultiRaterCase& c : cases)
        if (c.num_raters() != m_data)
            throw std::invalid_argument("train: case " + c.case_id +
                                        " has an inconsistent rater count");

    Rng root(cfg.seed);
    Rng split_rng = root.substream(0x5e1ec7);
    Rng draw_rng = root.substream(0xd7a3);

    // Internal validation: a seeded 20% (by default) of the training cases.
    std::vector<int> order(cases.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    split_rng.shuffle(order);
    const int n_val = static_cast<int>(std::floor(cfg.val_fraction * static_cast<double>(cases.size())));
    std::vector<MultiRaterCase> val_cases;
    std::vector<int> train_idx;
    for (size_t i = 0; i < order.size(); ++i) {
        if (static_cast<int>(i) < n_val) val_cases.push_back(cases[static_cast<size_t>(order[i])]);
        else train_idx.push_back(order[i]);
    }
    const int n_train = static_cast<int>(train_idx.size());
    const int batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(cfg.epochs) * batches_per_epoch;

    LossConfig loss_cfg = cfg.loss;
    loss_cfg.batches_per_epoch = batches_per_epoch;

    std::vector<detail::OptSlot> slots;
    model.visit_params([&](Param& p) {
        detail::OptSlot s;
        s.p = &p;
        slots.push_back(std::move(s));
    });

    const int L = m_data + 1;
    TrainResult result;
    std::vector<Tensor> best_params;
    long step = 0;
    long adam_t = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng epoch_rng = root.substream(0xe90c000ULL + static_cast<uint64_t>(epoch));
        std::vector<int> perm = train_idx;
        epoch_rng.shuffle(perm);

        EpochLog log;
        log.epoch = epoch;
        double lr_last = 0.0;
        for (size_t first = 0; first < perm.size(); first += static_cast<size_t>(cfg.batch_size)) {
            const size_t count = std::min(static_cast<size_t>(cfg.batch_size),
                                          perm.size() - first);
            Batch batch = detail::make_batch(cases, perm, first, count, vanilla);
            const double lr = poly_lr(step, total_steps, cfg.lr0, cfg.poly_power);
            lr_last = lr;
            for (auto& s : slots) s.p->zero_grad();
            const LossParts parts = total_loss_backward(model, batch, draw_rng, loss_cfg);
            if (!std::isfinite(parts.total))
                throw std::runtime_error("train: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", step " +
                                         std::to_string(step) + " (kl=" + std::to_string(parts.kl) +
                                         ", dice=" + std::to_string(parts.dice) + ")");
            if (cfg.optimizer == Optimizer::sgd) {
                for (auto& s : slots) detail::sgd_step(s, lr, cfg.momentum);
            } else {
                ++adam_t;
                for (auto& s : slots) detail::adam_step(s, lr, cfg, adam_t);
            }
            ++step;
            log.loss += parts.total;
            log.kl += parts.kl;
            log.dice += parts.dice;
        }
        log.loss /= batches_per_epoch;
        log.kl /= batches_per_epoch;
        log.dice /= batches_per_epoch;
        log.lr = lr_last;

        if (!val_cases.empty()) {
            const double q = detail::validation_q(model, val_cases, L);
            log.val_q_score = q;
            if (q > result.best_val_q) {
                result.best_val_q = q;
                result.best_epoch = epoch;
                if (cfg.restore_best) {
                    best_params.clear();
                    model.visit_params([&](Param& p) {
                        best_params.push_back(p.dist.mu);
                        if (p.bayes) best_params.push_back(p.dist.rho);
                    });
                }
            }
        }
        if (log_stream) *log_stream << log.to_json().dump() << "\n";
        result.log.push_back(log);
    }

    if (cfg.restore_best && !best_params.empty()) {
        size_t k = 0;
        model.visit_params([&](Param& p) {
            p.dist.mu = best_params[k++];
            if (p.bayes) p.dist.rho = best_params[k++];
        });
    }
    return result;
}

} // namespace multirater
