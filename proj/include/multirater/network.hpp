#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "multirater/layers.hpp"
#include "multirater/rng.hpp"
#include "multirater/tensor.hpp"

namespace multirater {

struct NetworkConfig {
    int depth = 4;           // resolution levels
    int base_channels = 32;  // channels at the top level, doubling per level
    int num_branches = 3;    // m, one decoder per rater
    bool use_attention = false;
    bool use_bayesian_decoders = false;
    int input_channels = 1;
    double sigma_init = 0.05;  // initial posterior std for Bayesian decoders

    int channels(int level) const { return base_channels << level; }

    void validate() const {
        if (depth < 2) throw std::invalid_argument("NetworkConfig: depth must be >= 2");
        if (base_channels < 1) throw std::invalid_argument("NetworkConfig: base_channels must be >= 1");
        if (num_branches < 1) throw std::invalid_argument("NetworkConfig: num_branches must be >= 1");
        if (input_channels < 1) throw std::invalid_argument("NetworkConfig: input_channels must be >= 1");
    }

    void check_spatial(int h, int w) const {
        const int div = 1 << (depth - 1);
        if (h % div || w % div)
            throw std::invalid_argument("input spatial dims (" + std::to_string(h) + "x" +
                                        std::to_string(w) + ") not divisible by " +
                                        std::to_string(div));
    }
};

/// Shared feature extractor: depth conv blocks with 2x2 max pooling in
/// between. feature(k) has the input's size divided by 2^k.
struct Encoder {
    int depth = 0;
    std::vector<ConvBlock> blocks;
    std::vector<MaxPool2> pools;
    std::vector<Tensor> pooled;

    void configure(const NetworkConfig& cfg) {
        depth = cfg.depth;
        blocks.resize(depth);
        pools.resize(depth - 1);
        pooled.resize(depth - 1);
        blocks[0].configure(cfg.input_channels, cfg.channels(0), false, 0.0);
        for (int k = 1; k < depth; ++k)
            blocks[k].configure(cfg.channels(k - 1), cfg.channels(k), false, 0.0);
    }

    void init(Rng& rng) {
        for (auto& b : blocks) b.init(rng);
    }

    void prepare() {
        for (auto& b : blocks) b.prepare(WeightMode::mean, nullptr);
    }

    void forward(const Tensor& x) {
        const Tensor* cur = &x;
        for (int k = 0; k < depth; ++k) {
            if (k > 0) {
                pools[k - 1].forward(*cur, pooled[k - 1]);
                cur = &pooled[k - 1];
            }
            cur = &blocks[k].forward(*cur);
        }
    }

    const Tensor& feature(int k) const { return blocks[k].out; }

    /// gfeat[k] = dL/dfeature(k), summed over every consumer. Mutated in place.
    void backward(std::vector<Tensor>& gfeat) {
        Tensor gin, gprev;
        for (int k = depth - 1; k >= 0; --k) {
            blocks[k].backward(gfeat[k], gin);
            if (k == 0) break;
            pools[k - 1].backward(gin, gprev);
            for (size_t i = 0; i < gprev.size(); ++i) gfeat[k - 1][i] += gprev[i];
        }
    }

    template <class F>
    void visit_params(F&& fn) {
        for (auto& b : blocks) {
            fn(b.c1.w); fn(b.c1.b); fn(b.c2.w); fn(b.c2.b);
        }
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& b : blocks) n += b.param_count();
        return n;
    }
};

/// One rater-specific decoder: bilinear upsampling, optional per-branch
/// attention gates on the skip connections, conv blocks, 1x1 head + sigmoid.
struct Decoder {
    int depth = 0;
    bool attention = false;
    std::vector<int> skip_ch;
    std::vector<ConvBlock> blocks;   // blocks[k] fuses level k
    std::vector<AttentionGate> gates;
    Conv2d head;

    // caches
    std::vector<Tensor> up, fa, cat;
    std::vector<std::vector<int>> up_in_shape;
    Tensor logits, probs;

    void configure(const NetworkConfig& cfg) {
        depth = cfg.depth;
        attention = cfg.use_attention;
        const bool bayes = cfg.use_bayesian_decoders;
        blocks.resize(depth - 1);
        skip_ch.resize(depth - 1);
        up.resize(depth - 1);
        fa.resize(depth - 1);
        cat.resize(depth - 1);
        up_in_shape.resize(depth - 1);
        if (attention) gates.resize(depth - 1);
        for (int k = 0; k < depth - 1; ++k) {
            skip_ch[k] = cfg.channels(k);
            blocks[k].configure(cfg.channels(k) + cfg.channels(k + 1), cfg.channels(k), bayes,
                                cfg.sigma_init);
            if (attention)
                gates[k].configure(cfg.channels(k), cfg.channels(k + 1), bayes, cfg.sigma_init);
        }
        head.configure(cfg.channels(0), 1, 1, bayes, cfg.sigma_init);
    }

    void init(Rng& rng) {
        for (auto& b : blocks) b.init(rng);
        for (auto& g : gates) g.init(rng);
        head.init(rng);
    }

    void prepare(WeightMode mode, Rng* rng) {
        for (auto& b : blocks) b.prepare(mode, rng);
        for (auto& g : gates) g.prepare(mode, rng);
        head.prepare(mode, rng);
    }

    const Tensor& forward(const Encoder& enc) {
        const Tensor* cur = &enc.feature(depth - 1);
        for (int k = depth - 2; k >= 0; --k) {
            up_in_shape[k] = cur->shape();
            upsample2_forward(*cur, up[k]);
            const Tensor* skip = &enc.feature(k);
            if (attention) {
                gates[k].forward(*skip, up[k], fa[k]);
                skip = &fa[k];
            }
            concat_channels(*skip, up[k], cat[k]);
            cur = &blocks[k].forward(cat[k]);
        }
        head.forward(*cur, logits);
        probs = logits;
        sigmoid_inplace(probs);
        return probs;
    }

    /// gprobs = dL/dprobs (consumed). Skip gradients are accumulated into
    /// gfeat; decoder parameter gradients accumulate internally.
    void backward(Tensor& gprobs, std::vector<Tensor>& gfeat) {
        sigmoid_backward_inplace(gprobs, probs);
        Tensor gcur, gcat, gskip, gup, gfe;
        head.backward(gprobs, gcur);
        for (int k = 0; k < depth - 1; ++k) {
            blocks[k].backward(gcur, gcat);
            split_channels(gcat, skip_ch[k], gskip, gup);
            if (attention) {
                gates[k].backward(gskip, gfe, gup);
                for (size_t i = 0; i < gfe.size(); ++i) gfeat[k][i] += gfe[i];
            } else {
                for (size_t i = 0; i < gskip.size(); ++i) gfeat[k][i] += gskip[i];
            }
            upsample2_backward(gup, gcur, up_in_shape[k]);
        }
        Tensor& gbottom = gfeat[depth - 1];
        for (size_t i = 0; i < gcur.size(); ++i) gbottom[i] += gcur[i];
    }

    template <class F>
    void visit_params(F&& fn) {
        for (auto& b : blocks) {
            fn(b.c1.w); fn(b.c1.b); fn(b.c2.w); fn(b.c2.b);
        }
        for (auto& g : gates) {
            fn(g.fx.w); fn(g.fx.b); fn(g.ff.w); fn(g.ff.b);
        }
        fn(head.w);
        fn(head.b);
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& b : blocks) n += b.param_count();
        for (const auto& g : gates) n += g.param_count();
        return n + head.param_count();
    }
};

/// Inference result: per-branch expected probability maps, the thresholded
/// per-draw binary samples, and the uniform-mixture fused map.
struct PredictionSet {
    std::vector<Tensor> branch_probs;          // each (h, w)
    std::vector<std::vector<Mask>> mc_samples; // [branch][draw]
    Tensor fused;                              // (h, w)

    int total_samples() const {
        int n = 0;
        for (const auto& v : mc_samples) n += static_cast<int>(v.size());
        return n;
    }

    std::vector<Mask> all_samples() const {
        std::vector<Mask> out;
        out.reserve(static_cast<size_t>(total_samples()));
        for (const auto& v : mc_samples)
            for (const auto& m : v) out.push_back(m);
        return out;
    }
};

/// One encoder, m decoders.
struct MultiDecoderNet {
    NetworkConfig cfg;
    Encoder encoder;
    std::vector<Decoder> decoders;

    void configure(const NetworkConfig& c) {
        c.validate();
        cfg = c;
        encoder.configure(cfg);
        decoders.resize(static_cast<size_t>(cfg.num_branches));
        for (auto& d : decoders) d.configure(cfg);
    }

    void init(Rng& rng) {
        encoder.init(rng);
        for (auto& d : decoders) d.init(rng);
    }

    void encode(const Tensor& x) {
        if (x.rank() != 4) throw std::invalid_argument("encode: expected (n,c,h,w) input");
        cfg.check_spatial(x.dim(2), x.dim(3));
        encoder.prepare();
        encoder.forward(x);
    }

    /// Runs decoder r on the current encoder features with freshly prepared
    /// weights. Requires encode() first.
    const Tensor& decode_branch(int r, WeightMode mode, Rng* rng) {
        if (r < 0 || r >= cfg.num_branches)
            throw std::out_of_range("decode_branch: branch index " + std::to_string(r) +
                                    " out of range for m=" + std::to_string(cfg.num_branches));
        decoders[static_cast<size_t>(r)].prepare(mode, rng);
        return decoders[static_cast<size_t>(r)].forward(encoder);
    }

    template <class F>
    void visit_params(F&& fn) {
        encoder.visit_params(fn);
        for (auto& d : decoders) d.visit_params(fn);
    }

    size_t param_count() const {
        size_t n = encoder.param_count();
        for (const auto& d : decoders) n += d.param_count();
        return n;
    }
};

enum class Variant { vanilla, om, oma, omba, ensemble };

inline Variant parse_variant(const std::string& s) {
    if (s == "vanilla") return Variant::vanilla;
    if (s == "om") return Variant::om;
    if (s == "oma") return Variant::oma;
    if (s == "omba") return Variant::omba;
    if (s == "ensemble") return Variant::ensemble;
    throw std::invalid_argument("unknown variant '" + s +
                                "' (expected vanilla|om|oma|omba|ensemble)");
}

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::vanilla: return "vanilla";
        case Variant::om: return "om";
        case Variant::oma: return "oma";
        case Variant::omba: return "omba";
        case Variant::ensemble: return "ensemble";
    }
    throw std::logic_error("variant_name: bad enum");
}

/// A trainable model from the baseline ladder. The om family is a single
/// shared-encoder net; the ensemble is m independent single-decoder nets
/// whose outputs are averaged.
struct Model {
    Variant variant = Variant::om;
    std::vector<MultiDecoderNet> nets;

    int num_branches() const {
        return variant == Variant::ensemble ? static_cast<int>(nets.size())
                                            : nets[0].cfg.num_branches;
    }

    bool bayesian() const { return nets[0].cfg.use_bayesian_decoders; }

    /// The net that owns logical branch r, and the decoder index within it.
    MultiDecoderNet& branch_net(int r) {
        return variant == Variant::ensemble ? nets[static_cast<size_t>(r)] : nets[0];
    }
    int branch_decoder(int r) const { return variant == Variant::ensemble ? 0 : r; }

    void init(Rng& rng) {
        for (auto& n : nets) n.init(rng);
    }

    template <class F>
    void visit_params(F&& fn) {
        for (auto& n : nets) n.visit_params(fn);
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& net : nets) n += net.param_count();
        return n;
    }

    /// Monte-Carlo inference: n_mc weight draws per branch, branch_probs the
    /// per-branch draw means, fused the uniform branch mixture, mc_samples
    /// every draw thresholded at 0.5.
    PredictionSet forward(const Tensor& image, Rng& rng, int n_mc) {
        if (n_mc < 1) throw std::invalid_argument("forward: n_mc must be >= 1");
        Tensor x = image;
        if (x.rank() == 2) x.reshape({1, 1, x.dim(0), x.dim(1)});
        else if (x.rank() == 3) x.reshape({1, x.dim(0), x.dim(1), x.dim(2)});
        if (x.rank() != 4 || x.dim(0) != 1)
            throw std::invalid_argument("forward: expected a single image");
        const int h = x.dim(2), w = x.dim(3);
        const int m = num_branches();

        PredictionSet out;
        out.branch_probs.assign(static_cast<size_t>(m), Tensor({h, w}));
        out.mc_samples.resize(static_cast<size_t>(m));
        out.fused.resize({h, w});

        const size_t hw = static_cast<size_t>(h) * w;
        int last_net = -1;
        for (int r = 0; r < m; ++r) {
            MultiDecoderNet& net = branch_net(r);
            const int net_idx = variant == Variant::ensemble ? r : 0;
            if (net_idx != last_net) {
                net.encode(x);
                last_net = net_idx;
            }
            Tensor& acc = out.branch_probs[static_cast<size_t>(r)];
            for (int j = 0; j < n_mc; ++j) {
                const Tensor& p = net.decode_branch(branch_decoder(r), WeightMode::sample, &rng);
                for (size_t i = 0; i < hw; ++i) acc[i] += p[i];
                Tensor grid({h, w});
                std::copy(p.data(), p.data() + hw, grid.data());
                out.mc_samples[static_cast<size_t>(r)].push_back(threshold_mask(grid));
            }
            const float inv = 1.0f / static_cast<float>(n_mc);
            for (size_t i = 0; i < hw; ++i) acc[i] *= inv;
            for (size_t i = 0; i < hw; ++i) out.fused[i] += acc[i];
        }
        const float invm = 1.0f / static_cast<float>(m);
        for (size_t i = 0; i < hw; ++i) out.fused[i] *= invm;
        return out;
    }
};

/// Baseline-ladder factory. cfg.num_branches is the logical rater count m;
/// flags on cfg other than depth/base_channels/input_channels are
/// overridden per variant.
inline Model build_model(Variant variant, NetworkConfig cfg) {
    Model model;
    model.variant = variant;
    switch (variant) {
        case Variant::vanilla:
            cfg.num_branches = 1;
            cfg.use_attention = false;
            cfg.use_bayesian_decoders = false;
            break;
        case Variant::om:
            cfg.use_attention = false;
            cfg.use_bayesian_decoders = false;
            break;
        case Variant::oma:
            cfg.use_attention = true;
            cfg.use_bayesian_decoders = false;
            break;
        case Variant::omba:
            cfg.use_attention = true;
            cfg.use_bayesian_decoders = true;
            break;
        case Variant::ensemble: {
            const int m = cfg.num_branches;
            NetworkConfig sub = cfg;
            sub.num_branches = 1;
            sub.use_attention = false;
            sub.use_bayesian_decoders = false;
            model.nets.resize(static_cast<size_t>(m));
            for (auto& n : model.nets) n.configure(sub);
            return model;
        }
    }
    model.nets.resize(1);
    model.nets[0].configure(cfg);
    return model;
}

/// Standalone gate evaluation on already-sized features, for direct use
/// outside a network.
inline Tensor attention_gate(const Tensor& f_e, const Tensor& f_s, AttentionGate& params) {
    Tensor fa;
    params.forward(f_e, f_s, fa);
    return fa;
}

} // namespace multirater
