#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "multirater/checkpoint.hpp"
#include "multirater/network.hpp"
#include "multirater/rng.hpp"

using namespace multirater;

namespace {

NetworkConfig tiny_cfg(int depth = 2, int base = 2, int m = 2) {
    NetworkConfig c;
    c.depth = depth;
    c.base_channels = base;
    c.num_branches = m;
    return c;
}

Tensor random_image(int h, int w, Rng& r) {
    Tensor x({h, w});
    for (size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(r.uniform(-1.0, 1.0));
    return x;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

} // namespace

TEST_CASE("network config validation and spatial checks") {
    NetworkConfig c = tiny_cfg(3, 4, 2);
    REQUIRE(c.channels(0) == 4);
    REQUIRE(c.channels(2) == 16);
    REQUIRE_NOTHROW(c.validate());
    REQUIRE_NOTHROW(c.check_spatial(16, 32));
    REQUIRE_THROWS_AS(c.check_spatial(18, 32), std::invalid_argument);

    NetworkConfig bad = c;
    bad.depth = 1;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.num_branches = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("encoder produces halving feature pyramids") {
    NetworkConfig cfg = tiny_cfg(3, 4, 1);
    MultiDecoderNet net;
    net.configure(cfg);
    Rng r(1);
    net.init(r);
    Tensor x({1, 1, 32, 32});
    for (size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(r.uniform(-1.0, 1.0));
    net.encode(x);
    REQUIRE(net.encoder.feature(0).dim(1) == 4);
    REQUIRE(net.encoder.feature(0).dim(2) == 32);
    REQUIRE(net.encoder.feature(1).dim(1) == 8);
    REQUIRE(net.encoder.feature(1).dim(2) == 16);
    REQUIRE(net.encoder.feature(2).dim(1) == 16);
    REQUIRE(net.encoder.feature(2).dim(3) == 8);

    Tensor bad({1, 1, 22, 32});  // 22 % 4 != 0: cannot pool twice
    REQUIRE_THROWS_AS(net.encode(bad), std::invalid_argument);
    Tensor flat({32, 32});
    REQUIRE_THROWS_AS(net.encode(flat), std::invalid_argument);
}

TEST_CASE("zero parameters give all-0.5 probability maps") {
    Model model = build_model(Variant::om, tiny_cfg(2, 2, 3));
    Rng r(2);
    model.init(r);
    model.visit_params([](Param& p) { p.dist.mu.zero(); });
    Tensor img = random_image(8, 8, r);
    Rng fwd(3);
    PredictionSet ps = model.forward(img, fwd, 1);
    for (int b = 0; b < 3; ++b)
        for (size_t i = 0; i < ps.branch_probs[b].size(); ++i)
            REQUIRE(ps.branch_probs[b][i] == 0.5f);
    for (size_t i = 0; i < ps.fused.size(); ++i) REQUIRE(ps.fused[i] == 0.5f);
}

TEST_CASE("forward is deterministic given seeds and emits valid probabilities") {
    for (Variant v : {Variant::om, Variant::omba}) {
        Model a = build_model(v, tiny_cfg(2, 2, 2));
        Model b = build_model(v, tiny_cfg(2, 2, 2));
        Rng ia(42), ib(42), img_rng(5);
        a.init(ia);
        b.init(ib);
        Tensor img = random_image(8, 8, img_rng);
        Rng fa(7), fb(7);
        PredictionSet pa = a.forward(img, fa, 3);
        PredictionSet pb = b.forward(img, fb, 3);
        REQUIRE(pa.total_samples() == 6);  // 2 branches x 3 draws
        for (int r = 0; r < 2; ++r) {
            REQUIRE(bitwise_equal(pa.branch_probs[r], pb.branch_probs[r]));
            for (int j = 0; j < 3; ++j) REQUIRE(pa.mc_samples[r][j] == pb.mc_samples[r][j]);
        }
        REQUIRE(bitwise_equal(pa.fused, pb.fused));
        for (size_t i = 0; i < pa.fused.size(); ++i) {
            REQUIRE(pa.fused[i] > 0.0f);
            REQUIRE(pa.fused[i] < 1.0f);
        }
    }
}

TEST_CASE("fused map is the mean of the branch maps") {
    Model model = build_model(Variant::om, tiny_cfg(2, 2, 3));
    Rng r(9);
    model.init(r);
    Tensor img = random_image(8, 8, r);
    Rng fwd(1);
    PredictionSet ps = model.forward(img, fwd, 1);
    for (size_t i = 0; i < ps.fused.size(); ++i) {
        const float mean =
            (ps.branch_probs[0][i] + ps.branch_probs[1][i] + ps.branch_probs[2][i]) / 3.0f;
        REQUIRE(ps.fused[i] == Catch::Approx(mean).margin(1e-6));
    }
}

TEST_CASE("single-branch model reduces to its own branch map") {
    Model model = build_model(Variant::vanilla, tiny_cfg(2, 2, 5));
    REQUIRE(model.num_branches() == 1);  // vanilla collapses m
    Rng r(11);
    model.init(r);
    Tensor img = random_image(8, 8, r);
    Rng fwd(2);
    PredictionSet ps = model.forward(img, fwd, 1);
    REQUIRE(ps.branch_probs.size() == 1);
    REQUIRE(bitwise_equal(ps.fused, ps.branch_probs[0]));
}

TEST_CASE("decoders share the encoder but are otherwise isolated") {
    Model model = build_model(Variant::om, tiny_cfg(2, 2, 2));
    Rng r(13);
    model.init(r);
    Tensor img = random_image(8, 8, r);

    Rng fwd(3);
    PredictionSet before = model.forward(img, fwd, 1);

    // Re-running a branch after another branch ran must not change it.
    Tensor x = img;
    x.reshape({1, 1, 8, 8});
    model.nets[0].encode(x);
    Tensor d0 = model.nets[0].decode_branch(0, WeightMode::mean, nullptr);
    model.nets[0].decode_branch(1, WeightMode::mean, nullptr);
    Tensor d0_again = model.nets[0].decode_branch(0, WeightMode::mean, nullptr);
    REQUIRE(bitwise_equal(d0, d0_again));

    // Perturbing decoder 1's weights leaves branch 0 bitwise unchanged.
    Decoder& d1 = model.nets[0].decoders[1];
    d1.blocks[0].c1.w.dist.mu[0] += 0.37f;
    d1.head.w.dist.mu[0] -= 0.21f;
    Rng fwd2(3);
    PredictionSet after = model.forward(img, fwd2, 1);
    REQUIRE(bitwise_equal(before.branch_probs[0], after.branch_probs[0]));
    REQUIRE_FALSE(bitwise_equal(before.branch_probs[1], after.branch_probs[1]));

    // Perturbing the shared encoder changes every branch.
    model.nets[0].encoder.blocks[0].c1.w.dist.mu[0] += 0.5f;
    Rng fwd3(3);
    PredictionSet enc_changed = model.forward(img, fwd3, 1);
    REQUIRE_FALSE(bitwise_equal(after.branch_probs[0], enc_changed.branch_probs[0]));
    REQUIRE_FALSE(bitwise_equal(after.branch_probs[1], enc_changed.branch_probs[1]));

    REQUIRE_THROWS_AS(model.nets[0].decode_branch(2, WeightMode::mean, nullptr),
                      std::out_of_range);
    REQUIRE_THROWS_AS(model.nets[0].decode_branch(-1, WeightMode::mean, nullptr),
                      std::out_of_range);
}

TEST_CASE("attention gates stay strictly inside (0,1) on real passes") {
    Model model = build_model(Variant::oma, tiny_cfg(3, 2, 2));
    Rng r(17);
    model.init(r);
    Tensor img = random_image(16, 16, r);
    Rng fwd(4);
    model.forward(img, fwd, 1);
    int checked = 0;
    for (const Decoder& d : model.nets[0].decoders)
        for (const AttentionGate& g : d.gates)
            for (size_t i = 0; i < g.gate.size(); ++i) {
                REQUIRE(g.gate[i] > 0.0f);
                REQUIRE(g.gate[i] < 1.0f);
                ++checked;
            }
    REQUIRE(checked > 0);
}

TEST_CASE("tiny posterior spread collapses samples onto the mean pass") {
    NetworkConfig cfg = tiny_cfg(2, 2, 2);
    cfg.sigma_init = 1e-8;
    Model model = build_model(Variant::omba, cfg);
    Rng r(19);
    model.init(r);
    Tensor img = random_image(8, 8, r);

    Tensor x = img;
    x.reshape({1, 1, 8, 8});
    MultiDecoderNet& net = model.nets[0];
    net.encode(x);
    Tensor mean_out = net.decode_branch(0, WeightMode::mean, nullptr);
    Rng draw(23);
    Tensor sample_out = net.decode_branch(0, WeightMode::sample, &draw);
    for (size_t i = 0; i < mean_out.size(); ++i)
        REQUIRE(std::fabs(mean_out[i] - sample_out[i]) <= 1e-6);
}

TEST_CASE("build_model wires each ladder rung") {
    NetworkConfig cfg = tiny_cfg(2, 2, 3);

    Model vanilla = build_model(Variant::vanilla, cfg);
    REQUIRE(vanilla.nets.size() == 1);
    REQUIRE(vanilla.num_branches() == 1);
    REQUIRE_FALSE(vanilla.nets[0].cfg.use_attention);
    REQUIRE_FALSE(vanilla.bayesian());

    Model om = build_model(Variant::om, cfg);
    REQUIRE(om.nets.size() == 1);
    REQUIRE(om.num_branches() == 3);
    REQUIRE(om.nets[0].decoders.size() == 3);
    REQUIRE_FALSE(om.nets[0].cfg.use_attention);

    Model oma = build_model(Variant::oma, cfg);
    REQUIRE(oma.nets[0].cfg.use_attention);
    REQUIRE_FALSE(oma.bayesian());
    REQUIRE(oma.nets[0].decoders[0].gates.size() == 1);

    Model omba = build_model(Variant::omba, cfg);
    REQUIRE(omba.nets[0].cfg.use_attention);
    REQUIRE(omba.bayesian());

    Model ens = build_model(Variant::ensemble, cfg);
    REQUIRE(ens.nets.size() == 3);
    REQUIRE(ens.num_branches() == 3);
    for (const auto& n : ens.nets) REQUIRE(n.decoders.size() == 1);

    // m full networks hold more parameters than one shared-encoder net.
    REQUIRE(ens.param_count() > om.param_count());
    // The shared-encoder net still holds more than a single U-Net.
    REQUIRE(om.param_count() > vanilla.param_count());
    // Bayesian decoders double their decoder parameter count.
    REQUIRE(omba.param_count() > oma.param_count());

    REQUIRE(parse_variant("omba") == Variant::omba);
    REQUIRE(variant_name(Variant::ensemble) == "ensemble");
    REQUIRE_THROWS_AS(parse_variant("unet"), std::invalid_argument);
}

TEST_CASE("free attention_gate helper matches the member forward") {
    Rng r(29);
    AttentionGate g;
    g.configure(2, 3, false, 0.05);
    g.init(r);
    Tensor fe({1, 2, 4, 4}), fs({1, 3, 4, 4});
    for (size_t i = 0; i < fe.size(); ++i) fe[i] = static_cast<float>(r.uniform(-1.0, 1.0));
    for (size_t i = 0; i < fs.size(); ++i) fs[i] = static_cast<float>(r.uniform(-1.0, 1.0));
    g.prepare(WeightMode::mean, nullptr);
    Tensor a = attention_gate(fe, fs, g);
    Tensor b;
    g.forward(fe, fs, b);
    REQUIRE(bitwise_equal(a, b));
}

TEST_CASE("checkpoints restore parameters and predictions bit-exactly") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "multirater_test_ckpt.bin";

    for (Variant v : {Variant::omba, Variant::ensemble}) {
        NetworkConfig cfg = tiny_cfg(2, 2, 2);
        Model model = build_model(v, cfg);
        Rng r(31);
        model.init(r);

        CheckpointMeta meta;
        meta.variant = v;
        meta.config = cfg;
        meta.seed = 77;
        save_checkpoint(path, model, meta);

        CheckpointMeta back;
        Model loaded = load_checkpoint(path, &back);
        REQUIRE(back.variant == v);
        REQUIRE(back.seed == 77);
        REQUIRE(back.config.num_branches == 2);

        std::vector<const Tensor*> orig, rest;
        model.visit_params([&](Param& p) { orig.push_back(&p.dist.mu); });
        loaded.visit_params([&](Param& p) { rest.push_back(&p.dist.mu); });
        REQUIRE(orig.size() == rest.size());
        for (size_t i = 0; i < orig.size(); ++i) REQUIRE(bitwise_equal(*orig[i], *rest[i]));

        Rng ir(8);
        Tensor img = random_image(8, 8, ir);
        Rng f1(9), f2(9);
        PredictionSet pa = model.forward(img, f1, 2);
        PredictionSet pb = loaded.forward(img, f2, 2);
        for (size_t b = 0; b < pa.branch_probs.size(); ++b)
            REQUIRE(bitwise_equal(pa.branch_probs[b], pb.branch_probs[b]));
        REQUIRE(bitwise_equal(pa.fused, pb.fused));
    }
    fs::remove(path);

    REQUIRE_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "no_such_ckpt.bin"),
                      std::runtime_error);
}
