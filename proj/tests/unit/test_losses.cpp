#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <utility>
#include <vector>

#include "multirater/losses.hpp"
#include "multirater/network.hpp"
#include "multirater/rng.hpp"

using namespace multirater;

namespace {

Tensor random_probs(std::vector<int> shape, Rng& r) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(r.uniform(0.01, 0.99));
    return t;
}

Tensor random_binary(std::vector<int> shape, Rng& r) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = r.uniform() < 0.5 ? 0.0f : 1.0f;
    return t;
}

Batch make_batch(int m, int n, int hw, Rng& r) {
    Batch b;
    b.images = random_probs({n, 1, hw, hw}, r);
    for (int i = 0; i < m; ++i) b.rater_targets.push_back(random_binary({n, 1, hw, hw}, r));
    return b;
}

NetworkConfig tiny_cfg(int m) {
    NetworkConfig c;
    c.depth = 2;
    c.base_channels = 2;
    c.num_branches = m;
    return c;
}

void zero_grads(Model& m) {
    m.visit_params([](Param& p) { p.zero_grad(); });
}

void sgd_step_all(Model& m, double lr) {
    m.visit_params([&](Param& p) {
        for (size_t i = 0; i < p.dist.mu.size(); ++i)
            p.dist.mu[i] -= static_cast<float>(lr * p.grad_mu[i]);
        if (p.bayes)
            for (size_t i = 0; i < p.dist.rho.size(); ++i)
                p.dist.rho[i] -= static_cast<float>(lr * p.grad_rho[i]);
    });
}

} // namespace

TEST_CASE("soft dice hand oracles") {
    Tensor p({2, 2}), t({2, 2});
    // Perfect binary overlap is exactly zero for any smooth.
    p[0] = 1; p[1] = 0; p[2] = 1; p[3] = 1;
    t = p;
    REQUIRE(soft_dice_loss(p, t, 1.0) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(soft_dice_loss(p, t, 7.0) == Catch::Approx(0.0).margin(1e-12));

    // Empty vs empty: the smooth term rescues 0/0.
    Tensor z({3, 3}), z2({3, 3});
    REQUIRE(soft_dice_loss(z, z2, 1.0) == Catch::Approx(0.0));

    // pred all ones on 4 pixels, target marks 2 of them, smooth 1:
    // 1 - (2*2+1)/(4+2+1) = 2/7.
    Tensor p4({2, 2}), t4({2, 2});
    p4.fill(1.0f);
    t4[0] = 1; t4[1] = 1;
    REQUIRE(soft_dice_loss(p4, t4, 1.0) == Catch::Approx(2.0 / 7.0));

    Tensor bad({2, 3});
    REQUIRE_THROWS_AS(soft_dice_loss(p, bad, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(soft_dice_loss(p, t, 0.0), std::invalid_argument);
}

TEST_CASE("soft dice stays in [0,1) and improves as pixels flip toward the target") {
    Rng r(3);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor pred = random_probs({8, 8}, r);
        Tensor target = random_binary({8, 8}, r);
        const double l = soft_dice_loss(pred, target, 1.0);
        REQUIRE(l >= 0.0);
        REQUIRE(l < 1.0);
    }
    for (int trial = 0; trial < 50; ++trial) {
        Tensor pred = random_binary({6, 6}, r);
        Tensor target = random_binary({6, 6}, r);
        // Find a disagreeing pixel and fix it; loss must strictly drop.
        for (size_t i = 0; i < pred.size(); ++i) {
            if (pred[i] != target[i]) {
                const double before = soft_dice_loss(pred, target, 1.0);
                pred[i] = target[i];
                const double after = soft_dice_loss(pred, target, 1.0);
                REQUIRE(after < before);
                break;
            }
        }
    }
}

TEST_CASE("batch dice splits per sample and its gradient passes central differences") {
    Rng r(5);
    Tensor pred({3, 1, 4, 4}), target({3, 1, 4, 4});
    pred = random_probs({3, 1, 4, 4}, r);
    target = random_binary({3, 1, 4, 4}, r);

    // The batch loss is the mean of the per-sample whole-grid losses.
    double manual = 0.0;
    for (int s = 0; s < 3; ++s) {
        Tensor ps({1, 1, 4, 4}), ts({1, 1, 4, 4});
        for (int i = 0; i < 16; ++i) {
            ps[i] = pred[static_cast<size_t>(s) * 16 + i];
            ts[i] = target[static_cast<size_t>(s) * 16 + i];
        }
        manual += soft_dice_loss(ps, ts, 1.0);
    }
    manual /= 3.0;
    REQUIRE(batch_dice_loss(pred, target, 1.0) == Catch::Approx(manual).margin(1e-12));

    // Central differences on an 8x8 grid, relative tolerance 1e-3.
    Tensor p8 = random_probs({2, 1, 8, 8}, r);
    Tensor t8 = random_binary({2, 1, 8, 8}, r);
    Tensor g;
    const double base = batch_dice_grad(p8, t8, 1.0, 1.0, g);
    REQUIRE(base == Catch::Approx(batch_dice_loss(p8, t8, 1.0)).margin(1e-12));
    const double h = 1e-3;
    for (size_t i = 0; i < p8.size(); i += 5) {
        const float keep = p8[i];
        p8[i] = keep + static_cast<float>(h);
        const double lp = batch_dice_loss(p8, t8, 1.0);
        p8[i] = keep - static_cast<float>(h);
        const double lm = batch_dice_loss(p8, t8, 1.0);
        p8[i] = keep;
        const double fd = (lp - lm) / (2 * h);
        const double scale = std::max({std::fabs(fd), std::fabs((double)g[i]), 1e-9});
        REQUIRE(std::fabs(g[i] - fd) / scale < 1e-3);
    }

    // The scale argument multiplies the gradient but not the returned loss.
    Tensor g2;
    const double l2 = batch_dice_grad(p8, t8, 1.0, 0.25, g2);
    REQUIRE(l2 == Catch::Approx(base));
    for (size_t i = 0; i < g.size(); i += 17)
        REQUIRE(g2[i] == Catch::Approx(0.25 * g[i]).margin(1e-9));
}

TEST_CASE("loss config picks the kl scale by mode") {
    LossConfig cfg;
    cfg.kl_beta = 0.5;
    cfg.batches_per_epoch = 10;
    cfg.kl_weight_mode = KlWeightMode::per_batch_count;
    REQUIRE(cfg.kl_scale() == Catch::Approx(0.05));
    cfg.kl_weight_mode = KlWeightMode::fixed;
    REQUIRE(cfg.kl_scale() == Catch::Approx(0.5));
}

TEST_CASE("deterministic branches contribute exactly zero KL") {
    Model model = build_model(Variant::om, tiny_cfg(2));
    Rng r(7);
    model.init(r);
    Rng br(11);
    Batch batch = make_batch(2, 2, 8, br);

    REQUIRE(branch_kl(model, 0) == 0.0);
    REQUIRE(branch_kl(model, 1) == 0.0);

    LossConfig on, off;
    on.kl_beta = 5.0;
    on.kl_weight_mode = KlWeightMode::fixed;
    off.kl_beta = 0.0;
    Rng l1(13), l2(13);
    REQUIRE(branch_loss(model, batch, 0, l1, on) ==
            Catch::Approx(branch_loss(model, batch, 0, l2, off)).margin(1e-12));
}

TEST_CASE("bayesian branch loss composes the kl and dice oracles") {
    NetworkConfig cfg = tiny_cfg(2);
    Model model = build_model(Variant::omba, cfg);
    Rng r(17);
    model.init(r);
    Rng br(19);
    Batch batch = make_batch(2, 2, 8, br);

    LossConfig lc;
    lc.kl_beta = 1e-3;
    lc.kl_weight_mode = KlWeightMode::fixed;
    lc.mc_train_samples = 2;

    Rng draw(99);
    const double got = branch_loss(model, batch, 0, draw, lc);

    // Recompose from the pieces with an identically seeded stream.
    double kl = 0.0;
    model.nets[0].decoders[0].visit_params([&](Param& p) {
        if (p.bayes) kl += kl_to_prior(p.dist, PriorSpec{});
    });
    MultiDecoderNet& net = model.nets[0];
    Tensor x = batch.images;
    net.encode(x);
    Rng draw2(99);
    double dice = 0.0;
    for (int j = 0; j < 2; ++j) {
        const Tensor& probs = net.decode_branch(0, WeightMode::sample, &draw2);
        dice += batch_dice_loss(probs, batch.rater_targets[0], lc.dice_smooth);
    }
    dice /= 2.0;
    REQUIRE(got == Catch::Approx(1e-3 * kl + dice).margin(1e-12));
    REQUIRE(kl > 0.0);  // a fresh random posterior never sits exactly on the prior
}

TEST_CASE("total loss is the branch mean and rejects target mismatches") {
    Model model = build_model(Variant::om, tiny_cfg(3));
    Rng r(23);
    model.init(r);
    Rng br(29);
    Batch batch = make_batch(3, 2, 8, br);
    LossConfig lc;

    Rng unused(0);
    double parts[3];
    for (int b = 0; b < 3; ++b) parts[b] = branch_loss(model, batch, b, unused, lc);
    const double want = (parts[0] + parts[1] + parts[2]) / 3.0;
    Rng unused2(0);
    REQUIRE(total_loss(model, batch, unused2, lc) == Catch::Approx(want).margin(1e-12));

    Batch short_batch = batch;
    short_batch.rater_targets.pop_back();
    Rng u3(0);
    REQUIRE_THROWS_AS(total_loss(model, short_batch, u3, lc), std::invalid_argument);
    REQUIRE_THROWS_AS(branch_loss(model, batch, 3, u3, lc), std::out_of_range);
    REQUIRE_THROWS_AS(branch_loss(model, short_batch, 2, u3, lc), std::invalid_argument);

    // m=1 model: total equals the single branch loss.
    Model solo = build_model(Variant::vanilla, tiny_cfg(1));
    solo.init(r);
    Batch sb = make_batch(1, 2, 8, br);
    Rng u4(0), u5(0);
    REQUIRE(total_loss(solo, sb, u4, lc) ==
            Catch::Approx(branch_loss(solo, sb, 0, u5, lc)).margin(1e-12));
}

TEST_CASE("identical branches and targets make every branch loss equal") {
    Model model = build_model(Variant::om, tiny_cfg(3));
    Rng r(31);
    model.init(r);
    // Copy decoder 0's parameters into decoders 1 and 2.
    auto copy_params = [](Decoder& dst, Decoder& src) {
        std::vector<Tensor*> from, to;
        src.visit_params([&](Param& p) { from.push_back(&p.dist.mu); });
        dst.visit_params([&](Param& p) { to.push_back(&p.dist.mu); });
        for (size_t i = 0; i < from.size(); ++i) *to[i] = *from[i];
    };
    copy_params(model.nets[0].decoders[1], model.nets[0].decoders[0]);
    copy_params(model.nets[0].decoders[2], model.nets[0].decoders[0]);

    Rng br(37);
    Batch batch = make_batch(1, 2, 8, br);
    batch.rater_targets.push_back(batch.rater_targets[0]);
    batch.rater_targets.push_back(batch.rater_targets[0]);

    LossConfig lc;
    Rng u1(0), u2(0);
    const double total = total_loss(model, batch, u1, lc);
    const double one = branch_loss(model, batch, 1, u2, lc);
    REQUIRE(total == Catch::Approx(one).margin(1e-12));
}

TEST_CASE("total loss is invariant under a joint branch and target permutation") {
    Model model = build_model(Variant::om, tiny_cfg(2));
    Rng r(41);
    model.init(r);
    Rng br(43);
    Batch batch = make_batch(2, 2, 8, br);
    LossConfig lc;

    Rng u1(0);
    const double before = total_loss(model, batch, u1, lc);
    std::swap(model.nets[0].decoders[0], model.nets[0].decoders[1]);
    std::swap(batch.rater_targets[0], batch.rater_targets[1]);
    Rng u2(0);
    const double after = total_loss(model, batch, u2, lc);
    REQUIRE(after == Catch::Approx(before).margin(1e-12));
}

TEST_CASE("backward reproduces the loss value it differentiates") {
    for (Variant v : {Variant::om, Variant::omba, Variant::ensemble}) {
        Model model = build_model(v, tiny_cfg(2));
        Rng r(47);
        model.init(r);
        Rng br(53);
        Batch batch = make_batch(2, 2, 8, br);
        LossConfig lc;
        lc.kl_beta = 1e-3;
        lc.kl_weight_mode = KlWeightMode::fixed;

        Rng e1(7);
        const double value = total_loss(model, batch, e1, lc);
        zero_grads(model);
        Rng e2(7);
        const LossParts parts = total_loss_backward(model, batch, e2, lc);
        REQUIRE(parts.total == Catch::Approx(value).margin(1e-9));
        REQUIRE(parts.total == Catch::Approx(parts.kl + parts.dice).margin(1e-12));
        if (v == Variant::omba) REQUIRE(parts.kl > 0.0);
        else REQUIRE(parts.kl == 0.0);
    }
}

TEST_CASE("one small gradient step strictly decreases the loss for every variant") {
    for (Variant v : {Variant::vanilla, Variant::om, Variant::oma, Variant::omba,
                      Variant::ensemble}) {
        Model model = build_model(v, tiny_cfg(2));
        Rng r(61);
        model.init(r);
        const int m = model.num_branches();
        Rng br(67);
        Batch batch = make_batch(m, 2, 8, br);
        LossConfig lc;
        lc.kl_beta = 1e-3;
        lc.kl_weight_mode = KlWeightMode::fixed;

        // The same seed is reused for every pass, so Bayesian draws see the
        // same epsilons and the comparison is on one fixed realization.
        Rng e1(7);
        const double before = total_loss(model, batch, e1, lc);
        zero_grads(model);
        Rng e2(7);
        total_loss_backward(model, batch, e2, lc);
        sgd_step_all(model, 0.02);
        Rng e3(7);
        const double after = total_loss(model, batch, e3, lc);
        INFO("variant " << variant_name(v) << ": " << before << " -> " << after);
        REQUIRE(after < before);
    }
}
