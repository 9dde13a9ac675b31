#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "multirater/layers.hpp"
#include "multirater/rng.hpp"
#include "multirater/variational.hpp"

using namespace multirater;

namespace {

// Closed-form scalar KL for cross-checking the summed implementation.
double scalar_kl(double mu, double sigma, double pm, double ps) {
    return std::log(ps / sigma) + (sigma * sigma + (mu - pm) * (mu - pm)) / (2.0 * ps * ps) - 0.5;
}

// Trapezoidal quadrature of q log(q/p) over a wide grid; independent of the
// closed form used by the library.
double quadrature_kl(double mu, double sigma, double pm, double ps) {
    const double lo = std::min(mu - 12 * sigma, pm - 12 * ps);
    const double hi = std::max(mu + 12 * sigma, pm + 12 * ps);
    const int n = 200000;
    const double h = (hi - lo) / n;
    auto logpdf = [](double x, double m, double s) {
        const double z = (x - m) / s;
        return -0.5 * z * z - std::log(s) - 0.9189385332046727;  // log sqrt(2 pi)
    };
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = lo + i * h;
        const double lq = logpdf(x, mu, sigma);
        const double q = std::exp(lq);
        const double term = q * (lq - logpdf(x, pm, ps));
        acc += (i == 0 || i == n) ? 0.5 * term : term;
    }
    return acc * h;
}

GaussianVariational scalar_posterior(double mu, double sigma) {
    GaussianVariational g({1});
    g.mu[0] = static_cast<float>(mu);
    g.rho[0] = static_cast<float>(softplus_inverse(sigma));
    return g;
}

} // namespace

TEST_CASE("softplus and its inverse are stable and mutually consistent") {
    for (double x : {-40.0, -5.0, -0.3, 0.0, 0.7, 5.0, 40.0}) {
        REQUIRE(softplus(x) > 0.0);
        REQUIRE(softplus_inverse(softplus(x)) == Catch::Approx(x).margin(1e-9));
    }
    REQUIRE(softplus(100.0) == Catch::Approx(100.0));
    REQUIRE(softplus(-100.0) > 0.0);
}

TEST_CASE("sample_weights reduces to mu in the zero-variance limit") {
    GaussianVariational g({4});
    for (int i = 0; i < 4; ++i) g.mu[i] = static_cast<float>(i) - 1.5f;
    g.rho.fill(-60.0f);  // sigma ~ 1e-26
    Rng r(3);
    Tensor w = sample_weights(g, r);
    for (int i = 0; i < 4; ++i) REQUIRE(w[i] == Catch::Approx(g.mu[i]).margin(1e-12));
}

TEST_CASE("sample_weights is seed-deterministic") {
    GaussianVariational g({8});
    g.mu.fill(0.3f);
    g.rho.fill(0.1f);
    Rng r1(17), r2(17);
    Tensor w1 = sample_weights(g, r1);
    Tensor w2 = sample_weights(g, r2);
    for (size_t i = 0; i < w1.size(); ++i) REQUIRE(w1[i] == w2[i]);
}

TEST_CASE("sample_weights moments match the posterior") {
    GaussianVariational g = scalar_posterior(0.0, 1.0);
    Rng r(100);
    const int n = 10000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        Tensor w = sample_weights(g, r);
        sum += w[0];
        sq += static_cast<double>(w[0]) * w[0];
    }
    const double mean = sum / n;
    const double stdev = std::sqrt(sq / n - mean * mean);
    REQUIRE(std::fabs(mean) < 0.05);
    REQUIRE(std::fabs(stdev - 1.0) < 0.05);
}

TEST_CASE("kl_to_prior known values") {
    // Identical distributions.
    REQUIRE(kl_to_prior(scalar_posterior(0.0, 1.0), PriorSpec{}) ==
            Catch::Approx(0.0).margin(1e-9));
    // Unit-variance mean shift: KL = mu^2 / 2.
    REQUIRE(kl_to_prior(scalar_posterior(1.0, 1.0), PriorSpec{}) ==
            Catch::Approx(0.5).margin(1e-6));
    // Additivity over entries.
    GaussianVariational g({2});
    g.mu[0] = 1.0f; g.mu[1] = 1.0f;
    const float rho1 = static_cast<float>(softplus_inverse(1.0));
    g.rho.fill(rho1);
    REQUIRE(kl_to_prior(g, PriorSpec{}) == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("kl_to_prior is nonnegative and zero only at the prior") {
    Rng r(55);
    for (int t = 0; t < 200; ++t) {
        const double mu = r.uniform(-3, 3);
        const double sigma = r.uniform(0.1, 3.0);
        const double kl = kl_to_prior(scalar_posterior(mu, sigma), PriorSpec{});
        REQUIRE(kl >= -1e-12);
        if (std::fabs(mu) > 0.05 || std::fabs(sigma - 1.0) > 0.05) REQUIRE(kl > 1e-5);
    }
}

TEST_CASE("kl_to_prior matches quadrature on random scalar posteriors") {
    Rng r(7);
    for (int t = 0; t < 100; ++t) {
        const double mu = r.uniform(-3, 3);
        const double sigma = r.uniform(0.1, 3.0);
        const double pm = r.uniform(-1, 1);
        const double ps = r.uniform(0.5, 2.0);
        const double kl = kl_to_prior(scalar_posterior(mu, sigma), PriorSpec{pm, ps});
        REQUIRE(kl == Catch::Approx(quadrature_kl(mu, sigma, pm, ps)).margin(1e-4));
        REQUIRE(kl == Catch::Approx(scalar_kl(mu, sigma, pm, ps)).margin(1e-7));
    }
}

TEST_CASE("kl gradients match central finite differences") {
    Rng r(31);
    GaussianVariational g({3, 4});
    for (size_t i = 0; i < g.mu.size(); ++i) {
        g.mu[i] = static_cast<float>(r.uniform(-2, 2));
        g.rho[i] = static_cast<float>(r.uniform(-2, 2));
    }
    const PriorSpec prior{0.3, 1.4};
    Tensor gmu(g.mu.shape()), grho(g.rho.shape());
    kl_gradients(g, prior, 1.0, gmu, grho);

    const double h = 1e-4;
    for (size_t i = 0; i < g.mu.size(); ++i) {
        GaussianVariational gp = g, gm = g;
        gp.mu[i] += static_cast<float>(h);
        gm.mu[i] -= static_cast<float>(h);
        const double fd = (kl_to_prior(gp, prior) - kl_to_prior(gm, prior)) / (2 * h);
        REQUIRE(gmu[i] == Catch::Approx(fd).epsilon(1e-3).margin(1e-6));

        gp = g; gm = g;
        gp.rho[i] += static_cast<float>(h);
        gm.rho[i] -= static_cast<float>(h);
        const double fdr = (kl_to_prior(gp, prior) - kl_to_prior(gm, prior)) / (2 * h);
        REQUIRE(grho[i] == Catch::Approx(fdr).epsilon(1e-3).margin(1e-6));
    }
}

TEST_CASE("kl_gradients honors its scale and accumulates") {
    GaussianVariational g = scalar_posterior(2.0, 0.7);
    Tensor g1({1}), r1({1});
    kl_gradients(g, PriorSpec{}, 1.0, g1, r1);
    Tensor g2({1}), r2({1});
    kl_gradients(g, PriorSpec{}, 0.25, g2, r2);
    kl_gradients(g, PriorSpec{}, 0.25, g2, r2);
    REQUIRE(g2[0] == Catch::Approx(0.5 * g1[0]).margin(1e-9));
    REQUIRE(r2[0] == Catch::Approx(0.5 * r1[0]).margin(1e-9));
}

TEST_CASE("pathwise gradient of a quadratic matches the analytic expectation") {
    // L(w) = w^2 / 2; E[L] = (mu^2 + sigma^2)/2, so dE/dmu = mu and
    // dE/drho = sigma * sigmoid(rho).
    const double mu = 0.8, sigma = 0.6;
    GaussianVariational g = scalar_posterior(mu, sigma);
    const double rho = g.rho[0];
    Rng r(2);
    double gmu = 0.0, grho = 0.0;
    const int n = 4000;
    for (int i = 0; i < n; ++i) {
        Tensor eps;
        Tensor w = sample_weights(g, r, &eps);
        const double dLdw = w[0];
        gmu += dLdw;
        grho += dLdw * eps[0] * sigmoid(rho);
    }
    gmu /= n;
    grho /= n;
    REQUIRE(gmu == Catch::Approx(mu).epsilon(0.05));
    REQUIRE(grho == Catch::Approx(sigma * sigmoid(rho)).epsilon(0.05));
}

TEST_CASE("variational_conv degenerate and hand-computed cases") {
    // mode=mean with tiny sigma equals a plain convolution with weights mu.
    GaussianVariational w({1, 1});  // 1x1 kernel, 1->1 channels
    w.mu[0] = 2.0f;
    w.rho.fill(-40.0f);
    GaussianVariational b({1});
    b.mu[0] = 0.5f;
    b.rho.fill(-40.0f);
    Tensor x({1, 1, 2, 2});
    x[0] = 1.0f; x[1] = -1.0f; x[2] = 0.25f; x[3] = 3.0f;

    Rng r(1);
    Tensor y = variational_conv(x, w, b, r, WeightMode::mean);
    REQUIRE(y.shape() == std::vector<int>{1, 1, 2, 2});
    REQUIRE(y[0] == Catch::Approx(2.5));
    REQUIRE(y[1] == Catch::Approx(-1.5));
    REQUIRE(y[2] == Catch::Approx(1.0));
    REQUIRE(y[3] == Catch::Approx(6.5));

    // Sample mode with tiny sigma agrees with mean mode.
    Tensor ys = variational_conv(x, w, b, r, WeightMode::sample);
    for (size_t i = 0; i < y.size(); ++i) REQUIRE(ys[i] == Catch::Approx(y[i]).margin(1e-6));

    // All-zero mu, zero bias, mean mode: zero output.
    w.mu.fill(0.0f);
    b.mu.fill(0.0f);
    Tensor y0 = variational_conv(x, w, b, r, WeightMode::mean);
    for (size_t i = 0; i < y0.size(); ++i) REQUIRE(y0[i] == 0.0f);
}
