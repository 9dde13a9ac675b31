#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "multirater/gemm.hpp"
#include "multirater/rng.hpp"
#include "multirater/tensor.hpp"
#include "multirater/variational.hpp"

namespace multirater {

/// Whether a Bayesian layer runs on drawn weights or on posterior means.
enum class WeightMode { sample, mean };

/// One learnable grid. Deterministic layers train mu directly; Bayesian
/// layers hold the full factorized Gaussian and draw weights per pass.
struct Param {
    GaussianVariational dist;
    bool bayes = false;
    Tensor grad_mu;
    Tensor grad_rho;

    // Per-pass state for the reparameterized draw.
    Tensor w_sample;
    Tensor eps;
    bool sampled = false;

    void setup(std::vector<int> shape, bool bayes_on, double sigma_init) {
        dist = GaussianVariational(std::move(shape));
        bayes = bayes_on;
        grad_mu.resize(dist.mu.shape());
        grad_rho.resize(dist.mu.shape());
        if (bayes) {
            const float rho0 = static_cast<float>(softplus_inverse(sigma_init));
            dist.rho.fill(rho0);
        }
    }

    void init_uniform(Rng& rng, double bound) {
        for (size_t i = 0; i < dist.mu.size(); ++i)
            dist.mu[i] = static_cast<float>(rng.uniform(-bound, bound));
    }

    /// Picks the weights for the next forward pass.
    void prepare(WeightMode mode, Rng* rng) {
        if (bayes && mode == WeightMode::sample) {
            if (!rng) throw std::invalid_argument("Param::prepare: sampling needs an rng");
            w_sample = sample_weights(dist, *rng, &eps);
            sampled = true;
        } else {
            sampled = false;
        }
    }

    const Tensor& weights() const { return sampled ? w_sample : dist.mu; }

    void zero_grad() {
        grad_mu.zero();
        grad_rho.zero();
    }

    /// Accumulates dL/dw into the posterior parameters (pathwise rule for
    /// rho when this pass used a sampled draw).
    void accumulate_grad(const Tensor& gw) {
        for (size_t i = 0; i < gw.size(); ++i) grad_mu[i] += gw[i];
        if (sampled) {
            for (size_t i = 0; i < gw.size(); ++i) {
                const double s = sigmoid(dist.rho[i]);
                grad_rho[i] += static_cast<float>(gw[i] * eps[i] * s);
            }
        }
    }

    size_t count() const { return dist.mu.size() * (bayes ? 2 : 1); }
};

/// 2-d convolution with "same" padding; kernel 1x1 or 3x3. Weights are
/// stored (out_ch, in_ch*k*k) so the forward pass is a single GEMM over
/// the im2col matrix.
struct Conv2d {
    int in_ch = 0, out_ch = 0, ksize = 3, pad = 1;
    Param w, b;

    // forward/backward caches
    Tensor col;  // per-sample slabs (n, in_ch*k*k, h*w); unused for 1x1
    Tensor wt;   // transposed weights for the input gradient
    Tensor gw_scratch;
    const Tensor* x_in = nullptr;

    void configure(int in_channels, int out_channels, int kernel, bool bayes,
                   double sigma_init) {
        in_ch = in_channels;
        out_ch = out_channels;
        ksize = kernel;
        pad = kernel / 2;
        w.setup({out_ch, in_ch * ksize * ksize}, bayes, sigma_init);
        b.setup({out_ch}, bayes, sigma_init);
    }

    void init(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * ksize * ksize);
        w.init_uniform(rng, bound);
        b.init_uniform(rng, bound);
    }

    void prepare(WeightMode mode, Rng* rng) {
        w.prepare(mode, rng);
        b.prepare(mode, rng);
    }

    void forward(const Tensor& x, Tensor& y) {
        if (x.rank() != 4 || x.dim(1) != in_ch)
            throw std::invalid_argument("Conv2d: input channel mismatch, got " +
                                        Tensor::shape_string(x.shape()) + " for in_ch=" +
                                        std::to_string(in_ch));
        const int n = x.dim(0), h = x.dim(2), wd = x.dim(3);
        const int hw = h * wd;
        const int kk = in_ch * ksize * ksize;
        y.ensure({n, out_ch, h, wd});
        if (ksize != 1) col.ensure({n, kk, hw});
        const Tensor& wts = w.weights();
        const Tensor& bias = b.weights();
        for (int s = 0; s < n; ++s) {
            const float* xs = x.data() + static_cast<size_t>(s) * in_ch * hw;
            float* ys = y.data() + static_cast<size_t>(s) * out_ch * hw;
            const float* cols = xs;
            if (ksize != 1) {
                float* cs = col.data() + static_cast<size_t>(s) * kk * hw;
                im2col(xs, h, wd, cs);
                cols = cs;
            }
            sgemm_nn(out_ch, hw, kk, wts.data(), kk, cols, hw, ys, hw);
            for (int o = 0; o < out_ch; ++o) {
                const float bv = bias[o];
                float* row = ys + static_cast<size_t>(o) * hw;
                for (int i = 0; i < hw; ++i) row[i] += bv;
            }
        }
        x_in = &x;
    }

    /// Consumes dL/dy, accumulates parameter gradients, writes dL/dx.
    void backward(const Tensor& gy, Tensor& gx) {
        const Tensor& x = *x_in;
        const int n = x.dim(0), h = x.dim(2), wd = x.dim(3);
        const int hw = h * wd;
        const int kk = in_ch * ksize * ksize;
        gx.ensure(x.shape());
        gw_scratch.ensure({out_ch, kk});
        gw_scratch.zero();

        // Transpose the pass's effective weights once.
        const Tensor& wts = w.weights();
        wt.ensure({kk, out_ch});
        for (int o = 0; o < out_ch; ++o)
            for (int k = 0; k < kk; ++k)
                wt[static_cast<size_t>(k) * out_ch + o] = wts[static_cast<size_t>(o) * kk + k];

        std::vector<double> gb(static_cast<size_t>(out_ch), 0.0);
        Tensor gcol;
        if (ksize != 1) {
            gcol.ensure({kk, hw});
            gx.zero();
        }
        for (int s = 0; s < n; ++s) {
            const float* gys = gy.data() + static_cast<size_t>(s) * out_ch * hw;
            const float* cols = (ksize == 1)
                                    ? x.data() + static_cast<size_t>(s) * in_ch * hw
                                    : col.data() + static_cast<size_t>(s) * kk * hw;
            sgemm_nt(out_ch, kk, hw, gys, hw, cols, hw, gw_scratch.data(), kk, true);
            for (int o = 0; o < out_ch; ++o) {
                const float* row = gys + static_cast<size_t>(o) * hw;
                double acc = 0.0;
                for (int i = 0; i < hw; ++i) acc += row[i];
                gb[static_cast<size_t>(o)] += acc;
            }
            float* gxs = gx.data() + static_cast<size_t>(s) * in_ch * hw;
            if (ksize == 1) {
                sgemm_nn(in_ch, hw, out_ch, wt.data(), out_ch, gys, hw, gxs, hw);
            } else {
                sgemm_nn(kk, hw, out_ch, wt.data(), out_ch, gys, hw, gcol.data(), hw);
                col2im(gcol.data(), h, wd, gxs);
            }
        }
        w.accumulate_grad(gw_scratch);
        Tensor gbias({out_ch});
        for (int o = 0; o < out_ch; ++o) gbias[o] = static_cast<float>(gb[static_cast<size_t>(o)]);
        b.accumulate_grad(gbias);
    }

    size_t param_count() const { return w.count() + b.count(); }

private:
    void im2col(const float* x, int h, int wd, float* cs) const {
        const int hw = h * wd;
        for (int c = 0; c < in_ch; ++c) {
            const float* plane = x + static_cast<size_t>(c) * hw;
            for (int ky = 0; ky < ksize; ++ky) {
                for (int kx = 0; kx < ksize; ++kx) {
                    float* row = cs + (static_cast<size_t>(c) * ksize * ksize + ky * ksize + kx) * hw;
                    const int dy = ky - pad, dx = kx - pad;
                    for (int y = 0; y < h; ++y) {
                        float* dst = row + static_cast<size_t>(y) * wd;
                        const int sy = y + dy;
                        if (sy < 0 || sy >= h) {
                            for (int i = 0; i < wd; ++i) dst[i] = 0.0f;
                            continue;
                        }
                        const float* src = plane + static_cast<size_t>(sy) * wd;
                        const int x0 = std::max(0, -dx);
                        const int x1 = std::min(wd, wd - dx);
                        for (int i = 0; i < x0; ++i) dst[i] = 0.0f;
                        for (int i = x0; i < x1; ++i) dst[i] = src[i + dx];
                        for (int i = x1; i < wd; ++i) dst[i] = 0.0f;
                    }
                }
            }
        }
    }

    void col2im(const float* gcol, int h, int wd, float* gxs) const {
        const int hw = h * wd;
        for (int c = 0; c < in_ch; ++c) {
            float* plane = gxs + static_cast<size_t>(c) * hw;
            for (int ky = 0; ky < ksize; ++ky) {
                for (int kx = 0; kx < ksize; ++kx) {
                    const float* row =
                        gcol + (static_cast<size_t>(c) * ksize * ksize + ky * ksize + kx) * hw;
                    const int dy = ky - pad, dx = kx - pad;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + dy;
                        if (sy < 0 || sy >= h) continue;
                        const float* src = row + static_cast<size_t>(y) * wd;
                        float* dst = plane + static_cast<size_t>(sy) * wd;
                        const int x0 = std::max(0, -dx);
                        const int x1 = std::min(wd, wd - dx);
                        for (int i = x0; i < x1; ++i) dst[i + dx] += src[i];
                    }
                }
            }
        }
    }
};

/// One-off Bayesian convolution over explicit posterior grids: same-padded,
/// kernel size inferred from the weight shape (out_ch, in_ch*k*k).
inline Tensor variational_conv(const Tensor& input, const GaussianVariational& params,
                               const GaussianVariational& bias_params, Rng& rng,
                               WeightMode mode) {
    if (input.rank() != 4) throw std::invalid_argument("variational_conv: expected (n,c,h,w)");
    if (params.mu.rank() != 2)
        throw std::invalid_argument("variational_conv: weights must be (out_ch, in_ch*k*k)");
    const int in_ch = input.dim(1);
    const int out_ch = params.mu.dim(0);
    const int kk = params.mu.dim(1);
    if (kk % in_ch != 0)
        throw std::invalid_argument("variational_conv: weight columns not divisible by input channels");
    const int k2 = kk / in_ch;
    int ksize = 0;
    for (int k = 1; k * k <= k2; ++k)
        if (k * k == k2) ksize = k;
    if (ksize == 0 || bias_params.mu.size() != static_cast<size_t>(out_ch))
        throw std::invalid_argument("variational_conv: incompatible parameter shapes");
    Conv2d conv;
    conv.configure(in_ch, out_ch, ksize, true, 0.05);
    conv.w.dist = params;
    conv.b.dist = bias_params;
    conv.prepare(mode, &rng);
    Tensor out;
    conv.forward(input, out);
    return out;
}

/// 2x2 max pooling, stride 2.
struct MaxPool2 {
    std::vector<int32_t> argmax;

    void forward(const Tensor& x, Tensor& y) {
        const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        if (h % 2 || w % 2) throw std::invalid_argument("MaxPool2: odd spatial size");
        const int oh = h / 2, ow = w / 2;
        y.ensure({n, c, oh, ow});
        argmax.resize(y.size());
        in_shape_ = x.shape();
        size_t oi = 0;
        for (int s = 0; s < n; ++s)
            for (int ch = 0; ch < c; ++ch) {
                const float* plane = x.data() + (static_cast<size_t>(s) * c + ch) * h * w;
                for (int yy = 0; yy < oh; ++yy)
                    for (int xx = 0; xx < ow; ++xx, ++oi) {
                        const int base = (yy * 2) * w + xx * 2;
                        int best = base;
                        float bv = plane[base];
                        const int cand[3] = {base + 1, base + w, base + w + 1};
                        for (int t = 0; t < 3; ++t)
                            if (plane[cand[t]] > bv) {
                                bv = plane[cand[t]];
                                best = cand[t];
                            }
                        y[oi] = bv;
                        argmax[oi] = best;
                    }
            }
    }

    void backward(const Tensor& gy, Tensor& gx) {
        gx.ensure(in_shape_);
        gx.zero();
        const int n = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
        const size_t plane_sz = static_cast<size_t>(h) * w;
        size_t oi = 0;
        const size_t planes = static_cast<size_t>(n) * c;
        const size_t opp = gy.size() / planes;
        for (size_t p = 0; p < planes; ++p) {
            float* gplane = gx.data() + p * plane_sz;
            for (size_t i = 0; i < opp; ++i, ++oi) gplane[argmax[oi]] += gy[oi];
        }
    }

private:
    std::vector<int> in_shape_;
};

namespace detail {

// Factor-2 bilinear interpolation weights (align-corners=false): output
// index d samples source i = (d+0.5)/2 - 0.5, i.e. 0.75/0.25 blends with
// edge clamping.
inline void up2_axis_indices(int d, int size_in, int& i0, int& i1, float& w0, float& w1) {
    const int i = d / 2;
    if (d % 2 == 0) {
        i0 = i;
        i1 = std::max(i - 1, 0);
    } else {
        i0 = i;
        i1 = std::min(i + 1, size_in - 1);
    }
    w0 = 0.75f;
    w1 = 0.25f;
}

} // namespace detail

/// y = bilinear 2x upsample of x (separable, align-corners=false).
inline void upsample2_forward(const Tensor& x, Tensor& y) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    y.ensure({n, c, h * 2, w * 2});
    const size_t planes = static_cast<size_t>(n) * c;
    for (size_t p = 0; p < planes; ++p) {
        const float* src = x.data() + p * h * w;
        float* dst = y.data() + p * static_cast<size_t>(h * 2) * (w * 2);
        for (int oy = 0; oy < h * 2; ++oy) {
            int y0, y1;
            float wy0, wy1;
            detail::up2_axis_indices(oy, h, y0, y1, wy0, wy1);
            const float* r0 = src + static_cast<size_t>(y0) * w;
            const float* r1 = src + static_cast<size_t>(y1) * w;
            float* out = dst + static_cast<size_t>(oy) * (w * 2);
            for (int ox = 0; ox < w * 2; ++ox) {
                int x0, x1;
                float wx0, wx1;
                detail::up2_axis_indices(ox, w, x0, x1, wx0, wx1);
                const float top = wy0 * r0[x0] + wy1 * r1[x0];
                const float side = wy0 * r0[x1] + wy1 * r1[x1];
                out[ox] = wx0 * top + wx1 * side;
            }
        }
    }
}

/// Transpose of upsample2_forward.
inline void upsample2_backward(const Tensor& gy, Tensor& gx, const std::vector<int>& in_shape) {
    gx.ensure(in_shape);
    gx.zero();
    const int h = in_shape[2], w = in_shape[3];
    const size_t planes = static_cast<size_t>(in_shape[0]) * in_shape[1];
    for (size_t p = 0; p < planes; ++p) {
        float* dst = gx.data() + p * h * w;
        const float* g = gy.data() + p * static_cast<size_t>(h * 2) * (w * 2);
        for (int oy = 0; oy < h * 2; ++oy) {
            int y0, y1;
            float wy0, wy1;
            detail::up2_axis_indices(oy, h, y0, y1, wy0, wy1);
            const float* grow = g + static_cast<size_t>(oy) * (w * 2);
            for (int ox = 0; ox < w * 2; ++ox) {
                int x0, x1;
                float wx0, wx1;
                detail::up2_axis_indices(ox, w, x0, x1, wx0, wx1);
                const float gv = grow[ox];
                dst[static_cast<size_t>(y0) * w + x0] += wy0 * wx0 * gv;
                dst[static_cast<size_t>(y1) * w + x0] += wy1 * wx0 * gv;
                dst[static_cast<size_t>(y0) * w + x1] += wy0 * wx1 * gv;
                dst[static_cast<size_t>(y1) * w + x1] += wy1 * wx1 * gv;
            }
        }
    }
}

inline void relu_inplace(Tensor& t) {
    for (size_t i = 0; i < t.size(); ++i) t[i] = t[i] > 0.0f ? t[i] : 0.0f;
}

/// dL/dx for y = relu(x), given the post-activation values.
inline void relu_backward_inplace(Tensor& grad, const Tensor& post) {
    for (size_t i = 0; i < grad.size(); ++i)
        if (!(post[i] > 0.0f)) grad[i] = 0.0f;
}

inline void sigmoid_inplace(Tensor& t) {
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(sigmoid(t[i]));
}

/// dL/dx for y = sigmoid(x) given y: g *= y (1 - y).
inline void sigmoid_backward_inplace(Tensor& grad, const Tensor& post) {
    for (size_t i = 0; i < grad.size(); ++i) grad[i] *= post[i] * (1.0f - post[i]);
}

inline void concat_channels(const Tensor& a, const Tensor& b, Tensor& out) {
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    if (b.dim(0) != n || b.dim(2) != h || b.dim(3) != w)
        throw std::invalid_argument("concat_channels: shape mismatch");
    out.ensure({n, ca + cb, h, w});
    const size_t hw = static_cast<size_t>(h) * w;
    for (int s = 0; s < n; ++s) {
        float* dst = out.data() + static_cast<size_t>(s) * (ca + cb) * hw;
        const float* pa = a.data() + static_cast<size_t>(s) * ca * hw;
        const float* pb = b.data() + static_cast<size_t>(s) * cb * hw;
        std::copy(pa, pa + ca * hw, dst);
        std::copy(pb, pb + cb * hw, dst + ca * hw);
    }
}

inline void split_channels(const Tensor& g, int ca, Tensor& ga, Tensor& gb) {
    const int n = g.dim(0), c = g.dim(1), h = g.dim(2), w = g.dim(3);
    const int cb = c - ca;
    ga.ensure({n, ca, h, w});
    gb.ensure({n, cb, h, w});
    const size_t hw = static_cast<size_t>(h) * w;
    for (int s = 0; s < n; ++s) {
        const float* src = g.data() + static_cast<size_t>(s) * c * hw;
        std::copy(src, src + ca * hw, ga.data() + static_cast<size_t>(s) * ca * hw);
        std::copy(src + ca * hw, src + c * hw, gb.data() + static_cast<size_t>(s) * cb * hw);
    }
}

/// Soft gate on a skip feature: f_a = f_e .* sigmoid(relu(Fx(f_s) + Ff(f_e)))
/// with Fx, Ff 1x1 convolutions onto f_e's channel count. The gate is
/// per-channel; every coefficient lies strictly inside (0,1).
struct AttentionGate {
    Conv2d fx;  // gating path, from the decoder feature
    Conv2d ff;  // skip path, from the encoder feature

    Tensor gate_pre;  // relu(Fx(f_s) + Ff(f_e))
    Tensor gate;      // sigmoid of the above
    Tensor fx_out, ff_out;
    const Tensor* fe_in = nullptr;

    void configure(int skip_channels, int gating_channels, bool bayes, double sigma_init) {
        fx.configure(gating_channels, skip_channels, 1, bayes, sigma_init);
        ff.configure(skip_channels, skip_channels, 1, bayes, sigma_init);
    }

    void init(Rng& rng) {
        fx.init(rng);
        ff.init(rng);
    }

    void prepare(WeightMode mode, Rng* rng) {
        fx.prepare(mode, rng);
        ff.prepare(mode, rng);
    }

    void forward(const Tensor& fe, const Tensor& fs, Tensor& fa) {
        if (fe.dim(2) != fs.dim(2) || fe.dim(3) != fs.dim(3) || fe.dim(0) != fs.dim(0))
            throw std::invalid_argument("AttentionGate: spatial shape mismatch");
        fx.forward(fs, fx_out);
        ff.forward(fe, ff_out);
        gate_pre.ensure(ff_out.shape());
        for (size_t i = 0; i < gate_pre.size(); ++i) gate_pre[i] = fx_out[i] + ff_out[i];
        relu_inplace(gate_pre);
        gate = gate_pre;
        sigmoid_inplace(gate);
        fa.ensure(fe.shape());
        for (size_t i = 0; i < fa.size(); ++i) fa[i] = fe[i] * gate[i];
        fe_in = &fe;
    }

    /// gfe is overwritten; gfs_add is accumulated into (the gating feature
    /// also reaches the decoder through the concat path).
    void backward(const Tensor& gfa, Tensor& gfe, Tensor& gfs_add) {
        const Tensor& fe = *fe_in;
        Tensor gg(gate.shape());
        for (size_t i = 0; i < gg.size(); ++i) gg[i] = gfa[i] * fe[i];
        sigmoid_backward_inplace(gg, gate);
        relu_backward_inplace(gg, gate_pre);

        Tensor gfs_local;
        fx.backward(gg, gfs_local);
        for (size_t i = 0; i < gfs_add.size(); ++i) gfs_add[i] += gfs_local[i];

        ff.backward(gg, gfe);
        for (size_t i = 0; i < gfe.size(); ++i) gfe[i] += gfa[i] * gate[i];
    }

    size_t param_count() const { return fx.param_count() + ff.param_count(); }
};

/// conv -> relu -> conv -> relu.
struct ConvBlock {
    Conv2d c1, c2;
    Tensor h1, out;

    void configure(int in_channels, int out_channels, bool bayes, double sigma_init) {
        c1.configure(in_channels, out_channels, 3, bayes, sigma_init);
        c2.configure(out_channels, out_channels, 3, bayes, sigma_init);
    }

    void init(Rng& rng) {
        c1.init(rng);
        c2.init(rng);
    }

    void prepare(WeightMode mode, Rng* rng) {
        c1.prepare(mode, rng);
        c2.prepare(mode, rng);
    }

    const Tensor& forward(const Tensor& x) {
        c1.forward(x, h1);
        relu_inplace(h1);
        c2.forward(h1, out);
        relu_inplace(out);
        return out;
    }

    void backward(Tensor& gout, Tensor& gx) {
        relu_backward_inplace(gout, out);
        Tensor gh1;
        c2.backward(gout, gh1);
        relu_backward_inplace(gh1, h1);
        c1.backward(gh1, gx);
    }

    size_t param_count() const { return c1.param_count() + c2.param_count(); }
};

} // namespace multirater
