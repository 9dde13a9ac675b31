#pragma once

#include <stdexcept>
#include <vector>

#include "multirater/network.hpp"
#include "multirater/tensor.hpp"
#include "multirater/variational.hpp"

namespace multirater {

enum class KlWeightMode { per_batch_count, fixed };

struct LossConfig {
    double dice_smooth = 1.0;
    KlWeightMode kl_weight_mode = KlWeightMode::per_batch_count;
    double kl_beta = 1.0;
    int mc_train_samples = 1;
    // Denominator for per_batch_count mode; the training loop fills this in
    // from the actual epoch layout.
    int batches_per_epoch = 1;

    double kl_scale() const {
        if (dice_smooth <= 0.0) throw std::invalid_argument("LossConfig: dice_smooth must be > 0");
        return kl_weight_mode == KlWeightMode::per_batch_count
                   ? kl_beta / static_cast<double>(batches_per_epoch)
                   : kl_beta;
    }
};

/// A training minibatch: images plus one target grid per logical branch.
/// For the vanilla variant the single target is the probability map; for
/// every other variant target r is rater r's binary mask.
struct Batch {
    Tensor images;                      // (n, c, h, w)
    std::vector<Tensor> rater_targets;  // [m], each (n, 1, h, w)

    int size() const { return images.empty() ? 0 : images.dim(0); }
};

/// 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s) over the whole grid.
inline double soft_dice_loss(const Tensor& pred, const Tensor& target, double smooth = 1.0) {
    if (!pred.same_shape(target))
        throw std::invalid_argument("soft_dice_loss: shape mismatch " +
                                    Tensor::shape_string(pred.shape()) + " vs " +
                                    Tensor::shape_string(target.shape()));
    if (smooth <= 0.0) throw std::invalid_argument("soft_dice_loss: smooth must be > 0");
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        inter += static_cast<double>(pred[i]) * target[i];
        psum += pred[i];
        tsum += target[i];
    }
    return 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
}

namespace detail {

/// Per-sample dice over one flattened grid; writes scale * dL/dp into gp.
inline double dice_grad_one(const float* p, const float* t, size_t n, double smooth,
                            double scale, float* gp) {
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (size_t i = 0; i < n; ++i) {
        inter += static_cast<double>(p[i]) * t[i];
        psum += p[i];
        tsum += t[i];
    }
    const double num = 2.0 * inter + smooth;
    const double den = psum + tsum + smooth;
    const double inv_den2 = 1.0 / (den * den);
    for (size_t i = 0; i < n; ++i)
        gp[i] = static_cast<float>(scale * (num - 2.0 * t[i] * den) * inv_den2);
    return 1.0 - num / den;
}

} // namespace detail

/// Mean per-sample soft dice over the batch dimension.
inline double batch_dice_loss(const Tensor& pred, const Tensor& target, double smooth) {
    if (!pred.same_shape(target)) throw std::invalid_argument("batch_dice_loss: shape mismatch");
    const int n = pred.dim(0);
    const size_t per = pred.size() / static_cast<size_t>(n);
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        const float* p = pred.data() + static_cast<size_t>(s) * per;
        const float* t = target.data() + static_cast<size_t>(s) * per;
        for (size_t i = 0; i < per; ++i) {
            inter += static_cast<double>(p[i]) * t[i];
            psum += p[i];
            tsum += t[i];
        }
        total += 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
    }
    return total / n;
}

/// Mean per-sample dice plus its gradient: gpred = scale * dL/dpred
/// (overwritten). Returns the unscaled loss value.
inline double batch_dice_grad(const Tensor& pred, const Tensor& target, double smooth,
                              double scale, Tensor& gpred) {
    if (!pred.same_shape(target)) throw std::invalid_argument("batch_dice_grad: shape mismatch");
    const int n = pred.dim(0);
    const size_t per = pred.size() / static_cast<size_t>(n);
    gpred.ensure(pred.shape());
    double total = 0.0;
    for (int s = 0; s < n; ++s)
        total += detail::dice_grad_one(pred.data() + static_cast<size_t>(s) * per,
                                       target.data() + static_cast<size_t>(s) * per, per, smooth,
                                       scale / n, gpred.data() + static_cast<size_t>(s) * per);
    return total / n;
}

/// KL of branch r's decoder posterior to the unit prior (0 when the branch
/// has no variational parameters).
inline double branch_kl(Model& model, int r, const PriorSpec& prior = {}) {
    double kl = 0.0;
    Decoder& dec = model.branch_net(r).decoders[static_cast<size_t>(model.branch_decoder(r))];
    dec.visit_params([&](Param& p) {
        if (p.bayes) kl += kl_to_prior(p.dist, prior);
    });
    return kl;
}

/// One branch's objective: scaled KL plus the Monte Carlo mean of the batch
/// dice loss under the branch's weight posterior. Value only; see
/// total_loss_backward for the gradient path.
inline double branch_loss(Model& model, const Batch& batch, int r, Rng& rng,
                          const LossConfig& cfg) {
    if (r < 0 || r >= model.num_branches())
        throw std::out_of_range("branch_loss: branch index out of range");
    if (static_cast<size_t>(r) >= batch.rater_targets.size())
        throw std::invalid_argument("branch_loss: batch lacks target for branch " +
                                    std::to_string(r));
    MultiDecoderNet& net = model.branch_net(r);
    net.encode(batch.images);
    double dice = 0.0;
    for (int j = 0; j < cfg.mc_train_samples; ++j) {
        const Tensor& probs = net.decode_branch(model.branch_decoder(r), WeightMode::sample, &rng);
        dice += batch_dice_loss(probs, batch.rater_targets[static_cast<size_t>(r)],
                                cfg.dice_smooth);
    }
    dice /= cfg.mc_train_samples;
    return cfg.kl_scale() * branch_kl(model, r) + dice;
}

/// Training objective: mean of the branch losses.
inline double total_loss(Model& model, const Batch& batch, Rng& rng, const LossConfig& cfg) {
    const int m = model.num_branches();
    if (static_cast<int>(batch.rater_targets.size()) != m)
        throw std::invalid_argument("total_loss: batch carries " +
                                    std::to_string(batch.rater_targets.size()) +
                                    " targets for m=" + std::to_string(m));
    double total = 0.0;
    for (int r = 0; r < m; ++r) total += branch_loss(model, batch, r, rng, cfg);
    return total / m;
}

struct LossParts {
    double total = 0.0;
    double kl = 0.0;    // scaled KL contribution to total
    double dice = 0.0;  // dice contribution to total
};

/// One backward pass of the training objective over a batch: accumulates
/// dL/dparam into every Param's grad buffers (call zero_grad first) and
/// returns the loss decomposition. Encoders run once per underlying net.
inline LossParts total_loss_backward(Model& model, const Batch& batch, Rng& rng,
                                     const LossConfig& cfg) {
    const int m = model.num_branches();
    if (static_cast<int>(batch.rater_targets.size()) != m)
        throw std::invalid_argument("total_loss_backward: target/branch count mismatch");
    const int mc = cfg.mc_train_samples;
    const double kl_scale = cfg.kl_scale();
    LossParts parts;

    const int nets = static_cast<int>(model.nets.size());
    Tensor gprobs;
    for (int ni = 0; ni < nets; ++ni) {
        MultiDecoderNet& net = model.nets[static_cast<size_t>(ni)];
        net.encode(batch.images);
        std::vector<Tensor> gfeat(static_cast<size_t>(net.cfg.depth));
        for (int k = 0; k < net.cfg.depth; ++k) {
            gfeat[static_cast<size_t>(k)].resize(net.encoder.feature(k).shape());
        }
        for (int d = 0; d < net.cfg.num_branches; ++d) {
            const int r = model.variant == Variant::ensemble ? ni : d;
            const Tensor& target = batch.rater_targets[static_cast<size_t>(r)];
            for (int j = 0; j < mc; ++j) {
                const Tensor& probs = net.decode_branch(d, WeightMode::sample, &rng);
                const double dice =
                    batch_dice_grad(probs, target, cfg.dice_smooth,
                                    1.0 / (static_cast<double>(m) * mc), gprobs);
                parts.dice += dice / (static_cast<double>(m) * mc);
                net.decoders[static_cast<size_t>(d)].backward(gprobs, gfeat);
            }
        }
        net.encoder.backward(gfeat);
    }

    const PriorSpec prior;
    for (int r = 0; r < m; ++r) {
        Decoder& dec = model.branch_net(r).decoders[static_cast<size_t>(model.branch_decoder(r))];
        dec.visit_params([&](Param& p) {
            if (!p.bayes) return;
            parts.kl += kl_scale * kl_to_prior(p.dist, prior) / m;
            kl_gradients(p.dist, prior, kl_scale / m, p.grad_mu, p.grad_rho);
        });
    }
    parts.total = parts.kl + parts.dice;
    return parts;
}

} // namespace multirater
