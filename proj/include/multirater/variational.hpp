#pragma once

#include <cmath>
#include <stdexcept>

#include "multirater/rng.hpp"
#include "multirater/tensor.hpp"

namespace multirater {

/// Diagonal Gaussian prior over weights.
struct PriorSpec {
    double mean = 0.0;
    double std = 1.0;

    void validate() const {
        if (!(std > 0.0)) throw std::invalid_argument("PriorSpec: std must be positive");
    }
};

/// sigma = softplus(rho), positive for every finite rho.
inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// rho such that softplus(rho) == sigma.
inline double softplus_inverse(double sigma) {
    return std::log(std::expm1(sigma));
}

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Factorized Gaussian posterior over one weight grid: entry i is
/// N(mu[i], softplus(rho[i])^2).
struct GaussianVariational {
    Tensor mu;
    Tensor rho;

    GaussianVariational() = default;
    explicit GaussianVariational(std::vector<int> shape)
        : mu(shape), rho(std::move(shape)) {}

    void validate() const {
        if (!mu.same_shape(rho))
            throw std::invalid_argument("GaussianVariational: mu/rho shape mismatch");
    }

    size_t size() const { return mu.size(); }
};

/// w = mu + softplus(rho) .* eps, eps ~ N(0, I). Deterministic given the
/// rng stream. When `eps_out` is non-null the drawn noise is stored there
/// for the pathwise gradient.
inline Tensor sample_weights(const GaussianVariational& params, Rng& rng,
                             Tensor* eps_out = nullptr) {
    params.validate();
    Tensor w(params.mu.shape());
    if (eps_out && !eps_out->same_shape(params.mu)) eps_out->resize(params.mu.shape());
    for (size_t i = 0; i < w.size(); ++i) {
        const double e = rng.normal();
        if (eps_out) (*eps_out)[i] = static_cast<float>(e);
        w[i] = static_cast<float>(params.mu[i] + softplus(params.rho[i]) * e);
    }
    return w;
}

/// Closed-form KL( N(mu, sigma^2) || N(prior.mean, prior.std^2) ), summed
/// over all entries. Nonnegative; zero iff the posterior equals the prior.
inline double kl_to_prior(const GaussianVariational& params, const PriorSpec& prior) {
    params.validate();
    prior.validate();
    const double sp = prior.std;
    const double log_sp = std::log(sp);
    double total = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
        const double sq = softplus(params.rho[i]);
        const double dm = params.mu[i] - prior.mean;
        total += (log_sp - std::log(sq)) + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
    }
    return total;
}

/// Accumulates scale * dKL/dmu and scale * dKL/drho into the given grids.
inline void kl_gradients(const GaussianVariational& params, const PriorSpec& prior,
                         double scale, Tensor& grad_mu, Tensor& grad_rho) {
    params.validate();
    prior.validate();
    const double inv_var_p = 1.0 / (prior.std * prior.std);
    for (size_t i = 0; i < params.size(); ++i) {
        const double sq = softplus(params.rho[i]);
        grad_mu[i] += static_cast<float>(scale * (params.mu[i] - prior.mean) * inv_var_p);
        const double dkl_dsigma = sq * inv_var_p - 1.0 / sq;
        grad_rho[i] += static_cast<float>(scale * dkl_dsigma * sigmoid(params.rho[i]));
    }
}

} // namespace multirater
