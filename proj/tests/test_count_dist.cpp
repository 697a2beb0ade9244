#include <cmath>
#include <numbers>
#include <vector>

#include <boost/multiprecision/cpp_dec_float.hpp>

#include "doctest.h"
#include "gimvi/count_dist.hpp"
#include "gimvi/errors.hpp"
#include "test_support.hpp"

using namespace gimvi;
using testing::central_diff;
using testing::rel_err;

namespace {

double log_poisson_bigfloat(int x, double rate) {
    using big = boost::multiprecision::cpp_dec_float_50;
    big lam(rate);
    big fact = 1;
    for (int i = 2; i <= x; ++i) {
        fact *= i;
    }
    const big p = boost::multiprecision::pow(lam, x) * boost::multiprecision::exp(-lam) / fact;
    return static_cast<double>(boost::multiprecision::log(p));
}

template <class F>
double total_mass(F logpmf, int cutoff) {
    double s = 0;
    for (int x = 0; x <= cutoff; ++x) {
        s += std::exp(logpmf(static_cast<double>(x)));
    }
    return s;
}

}

TEST_CASE("poisson_logpmf closed values") {
    CHECK(poisson_logpmf(0, 1.0) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(poisson_logpmf(1, 1.0) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(std::abs(poisson_logpmf(5, 2.3) - log_poisson_bigfloat(5, 2.3)) < 1e-12);
    CHECK(std::abs(poisson_logpmf(40, 17.5) - log_poisson_bigfloat(40, 17.5)) < 1e-10);
}

TEST_CASE("poisson_logpmf rejects bad rates and counts") {
    CHECK_THROWS_AS(poisson_logpmf(1, 0.0), DomainError);
    CHECK_THROWS_AS(poisson_logpmf(1, -1.0), DomainError);
    CHECK_THROWS_AS(poisson_logpmf(1, std::nan("")), DomainError);
    CHECK_THROWS_AS(poisson_logpmf(-1, 1.0), DomainError);
    CHECK_THROWS_AS(poisson_logpmf(1.5, 1.0), DomainError);
    CHECK_NOTHROW(poisson_logpmf(3.0000001, 1.0));
}

TEST_CASE("nb_logpmf with unit inverse dispersion is geometric") {
    // theta = 1: p(x) = q (1-q)^x with q = theta / (theta + mean)
    const double q = 1.0 / 3.0;
    CHECK(nb_logpmf(3, {2.0, 1.0}) == doctest::Approx(std::log(q * std::pow(1 - q, 3))).epsilon(1e-12));
    CHECK(nb_logpmf(3, {2.0, 1.0}) == doctest::Approx(std::log(8.0 / 81.0)).epsilon(1e-12));
    for (int x = 0; x < 10; ++x) {
        CHECK(nb_logpmf(x, {4.0, 1.0}) == doctest::Approx(std::log(0.2 * std::pow(0.8, x))).epsilon(1e-12));
    }
}

TEST_CASE("nb_logpmf at zero") {
    for (double mu : {0.1, 2.0, 50.0}) {
        for (double th : {0.3, 1.0, 20.0}) {
            CHECK(nb_logpmf(0, {mu, th}) == doctest::Approx(th * std::log(th / (th + mu))).epsilon(1e-12));
        }
    }
}

TEST_CASE("nb approaches poisson for large inverse dispersion") {
    CHECK(std::abs(nb_logpmf(4, {3.0, 1e6}) - poisson_logpmf(4, 3.0)) < 1e-3);
    for (int x : {0, 1, 7, 20}) {
        CHECK(std::abs(nb_logpmf(x, {5.0, 1e6}) - poisson_logpmf(x, 5.0)) < 1e-3);
    }
}

TEST_CASE("nb_logpmf rejects invalid parameters") {
    CHECK_THROWS_AS(nb_logpmf(1, {0.0, 1.0}), DomainError);
    CHECK_THROWS_AS(nb_logpmf(1, {1.0, -2.0}), DomainError);
    CHECK_THROWS_AS(nb_logpmf(1, {INFINITY, 1.0}), DomainError);
}

TEST_CASE("zinb limits and mixture value") {
    const NBParams nb{2.5, 1.7};
    for (int x : {0, 1, 5}) {
        CHECK(std::abs(zinb_logpmf(x, {nb, -30.0}) - nb_logpmf(x, nb)) < 1e-9);
    }
    CHECK(std::abs(zinb_logpmf(0, {nb, 30.0})) < 1e-12);
    // Two-term mixture at x = 0 with pi = 0.5 and NB(0) = 1/3.
    const double direct = std::log(0.5 + 0.5 * (1.0 / 3.0));
    CHECK(zinb_logpmf(0, {{2.0, 1.0}, 0.0}) == doctest::Approx(direct).epsilon(1e-12));
    CHECK(zinb_logpmf(0, {{2.0, 1.0}, 0.0}) == doctest::Approx(-0.405465).epsilon(1e-6));
    CHECK(zinb_logpmf(3, {{2.0, 1.0}, 0.0}) == doctest::Approx(std::log(0.5) + nb_logpmf(3, {2.0, 1.0})).epsilon(1e-12));
}

TEST_CASE("zinb stays finite for extreme logits") {
    const NBParams nb{1e-3, 0.5};
    for (double logit : {-700.0, -50.0, 50.0, 700.0}) {
        CHECK(std::isfinite(zinb_logpmf(0, {nb, logit})));
        CHECK(std::isfinite(zinb_logpmf(2, {nb, logit})));
    }
}

TEST_CASE("lognormal_logpdf values and normalization") {
    const double half_log_2pi = 0.5 * std::log(2 * std::numbers::pi);
    CHECK(lognormal_logpdf(1.0, {0.0, 1.0}) == doctest::Approx(-half_log_2pi).epsilon(1e-14));
    CHECK(lognormal_logpdf(std::exp(1.0), {1.0, 1.0}) == doctest::Approx(-half_log_2pi - 1).epsilon(1e-14));
    CHECK_THROWS_AS(lognormal_logpdf(0.0, {0.0, 1.0}), DomainError);
    CHECK_THROWS_AS(lognormal_logpdf(1.0, {0.0, 0.0}), DomainError);

    // Composite Simpson in u = ln x over +-12 sigma.
    for (LogNormalParams p : {LogNormalParams{0.3, 0.7}, LogNormalParams{-2.0, 1.9}, LogNormalParams{6.0, 0.2}}) {
        const int n = 20000;
        const double a = p.mu - 12 * p.sigma, b = p.mu + 12 * p.sigma, h = (b - a) / n;
        double s = 0;
        for (int i = 0; i <= n; ++i) {
            const double u = a + i * h;
            const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
            s += w * std::exp(lognormal_logpdf(std::exp(u), p) + u);
        }
        CHECK(std::abs(s * h / 3 - 1) < 1e-8);
    }
}

TEST_CASE("pmfs sum to one over a parameter grid") {
    for (double rate : {0.05, 1.0, 7.5, 60.0}) {
        const double m = total_mass([&](double x) { return poisson_logpmf(x, rate); }, 400);
        CHECK(std::abs(m - 1) <= 1e-6);
    }
    for (NBParams p : {NBParams{0.5, 0.5}, NBParams{5, 2}, NBParams{20, 10}, NBParams{3, 1e6}, NBParams{1e-4, 3}}) {
        const double m = total_mass([&](double x) { return nb_logpmf(x, p); }, 3000);
        CHECK(std::abs(m - 1) <= 1e-6);
        for (double logit : {-5.0, 0.0, 2.5}) {
            const double mz = total_mass([&](double x) { return zinb_logpmf(x, {p, logit}); }, 3000);
            CHECK(std::abs(mz - 1) <= 1e-6);
        }
    }
}

TEST_CASE("analytic gradients match central differences") {
    // Below ~1e-6 the central difference is dominated by roundoff of the O(1) log-pmf, hence the floor.
    auto rel_err = [](double a, double b) { return testing::rel_err(a, b, 1e-6); };
    for (double x : {0.0, 1.0, 4.0, 17.0}) {
        for (double mu : {0.3, 2.0, 25.0}) {
            const auto pg = poisson_logpmf_grad(x, mu);
            CHECK(pg.value == doctest::Approx(poisson_logpmf(x, mu)).epsilon(1e-14));
            CHECK(rel_err(pg.d_rate, central_diff([&](double r) { return poisson_logpmf(x, r); }, mu)) <= 1e-4);
            for (double th : {0.4, 3.0, 40.0}) {
                const NBParams p{mu, th};
                const auto g = nb_logpmf_grad(x, p);
                CHECK(g.value == doctest::Approx(nb_logpmf(x, p)).epsilon(1e-14));
                CHECK(rel_err(g.d_mean, central_diff([&](double m) { return nb_logpmf(x, {m, th}); }, mu)) <= 1e-4);
                CHECK(rel_err(g.d_inv_dispersion, central_diff([&](double t) { return nb_logpmf(x, {mu, t}); }, th)) <= 1e-4);
                for (double logit : {-3.0, 0.0, 1.5}) {
                    const ZINBParams zp{p, logit};
                    const auto z = zinb_logpmf_grad(x, zp);
                    CHECK(z.value == doctest::Approx(zinb_logpmf(x, zp)).epsilon(1e-13));
                    CHECK(rel_err(z.d_mean, central_diff([&](double m) { return zinb_logpmf(x, {{m, th}, logit}); }, mu)) <= 1e-4);
                    CHECK(rel_err(z.d_inv_dispersion,
                                  central_diff([&](double t) { return zinb_logpmf(x, {{mu, t}, logit}); }, th)) <= 1e-4);
                    CHECK(rel_err(z.d_logit, central_diff([&](double l) { return zinb_logpmf(x, {p, l}); }, logit)) <= 1e-4);
                }
            }
        }
    }
}

TEST_CASE("kl_diag_normal_std values") {
    const std::vector<double> zero{0, 0};
    CHECK(kl_diag_normal_std(zero, zero) == 0.0);
    const std::vector<double> mu{1, 0};
    CHECK(kl_diag_normal_std(mu, zero) == doctest::Approx(0.5).epsilon(1e-15));
    const std::vector<double> three{0, 0, 0};
    CHECK_THROWS_AS(kl_diag_normal_std(mu, three), ContractViolation);
}

TEST_CASE("kl_diag_normal_std against monte carlo") {
    Rng rng = make_rng(11);
    std::normal_distribution<double> n01;
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> mu(10), lv(10);
    for (int i = 0; i < 10; ++i) {
        mu[i] = u(rng);
        lv[i] = u(rng);
    }
    // E_q[log q(z) - log p(z)], with z = mu + sigma * eps.
    const int n = 1000000;
    double acc = 0;
    for (int s = 0; s < n; ++s) {
        double term = 0;
        for (int i = 0; i < 10; ++i) {
            const double eps = n01(rng);
            const double z = mu[i] + std::exp(0.5 * lv[i]) * eps;
            term += -0.5 * eps * eps - 0.5 * lv[i] + 0.5 * z * z;
        }
        acc += term;
    }
    CHECK(std::abs(acc / n - kl_diag_normal_std(mu, lv)) < 1e-2);
}

TEST_CASE("kl_lognormal values, monte carlo and gradient") {
    CHECK(kl_lognormal({0.4, 0.8}, {0.4, 0.8}) == doctest::Approx(0.0));
    CHECK(kl_lognormal({1, 1}, {0, 1}) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(kl_lognormal({0.3, 0.5}, {0.0, 1.2}) > 0);
    CHECK_THROWS_AS(kl_lognormal({0, -1}, {0, 1}), DomainError);

    const LogNormalParams q{1.3, 0.6}, p{0.2, 1.4};
    Rng rng = make_rng(5);
    double acc = 0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
        const double x = sample_lognormal(q, rng);
        acc += lognormal_logpdf(x, q) - lognormal_logpdf(x, p);
    }
    CHECK(std::abs(acc / n - kl_lognormal(q, p)) < 1e-2);

    const auto g = kl_lognormal_grad(q, p);
    CHECK(g.value == doctest::Approx(kl_lognormal(q, p)).epsilon(1e-15));
    CHECK(rel_err(g.d_mu, central_diff([&](double m) { return kl_lognormal({m, q.sigma}, p); }, q.mu)) <= 1e-6);
    CHECK(rel_err(g.d_sigma, central_diff([&](double s) { return kl_lognormal({q.mu, s}, p); }, q.sigma)) <= 1e-6);
}

TEST_CASE("samplers match analytic moments") {
    Rng rng = make_rng(2024);
    const int n = 100000;
    auto draw = [&](auto&& f) {
        std::vector<double> xs(n);
        for (auto& x : xs) {
            x = f();
        }
        return testing::moments(xs);
    };

    const auto pm = draw([&] { return sample_poisson(3.7, rng); });
    CHECK(std::abs(pm.mean - 3.7) < 3 * pm.mean_se);
    CHECK(std::abs(pm.var - 3.7) < 3 * pm.var_se);

    const NBParams nb{5.0, 2.0};
    const auto nm = draw([&] { return sample_nb(nb, rng); });
    CHECK(std::abs(nm.mean - 5.0) < 3 * nm.mean_se);
    CHECK(std::abs(nm.var - (5.0 + 25.0 / 2.0)) < 3 * nm.var_se);

    const double pi = sigmoid(-0.5);
    const auto zm = draw([&] { return sample_zinb({nb, -0.5}, rng); });
    const double zmean = (1 - pi) * 5.0;
    const double zvar = (1 - pi) * (5.0 + 12.5) + pi * (1 - pi) * 25.0;
    CHECK(std::abs(zm.mean - zmean) < 3 * zm.mean_se);
    CHECK(std::abs(zm.var - zvar) < 3 * zm.var_se);

    const LogNormalParams ln{0.5, 0.4};
    const auto lm = draw([&] { return sample_lognormal(ln, rng); });
    const double lmean = std::exp(0.5 + 0.08);
    const double lvar = (std::exp(0.16) - 1) * std::exp(1.0 + 0.16);
    CHECK(std::abs(lm.mean - lmean) < 3 * lm.mean_se);
    CHECK(std::abs(lm.var - lvar) < 3 * lm.var_se);
}

TEST_CASE("zinb without dropout has the nb zero fraction") {
    Rng rng = make_rng(8);
    const NBParams nb{1.2, 0.8};
    const int n = 100000;
    int zeros = 0;
    for (int i = 0; i < n; ++i) {
        zeros += sample_zinb({nb, -30.0}, rng) == 0;
    }
    const double p0 = std::exp(nb_logpmf(0, nb));
    CHECK(std::abs(zeros / static_cast<double>(n) - p0) < 3 * std::sqrt(p0 * (1 - p0) / n));
}

TEST_CASE("samplers reject invalid parameters") {
    Rng rng = make_rng(1);
    CHECK_THROWS_AS(sample_poisson(0.0, rng), DomainError);
    CHECK_THROWS_AS(sample_nb({1.0, 0.0}, rng), DomainError);
    CHECK_THROWS_AS(sample_lognormal({0.0, -1.0}, rng), DomainError);
}

TEST_CASE("softplus, sigmoid and digamma") {
    CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
    CHECK(softplus(800.0) == doctest::Approx(800.0));
    CHECK(softplus(-800.0) >= 0.0);
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(-800.0) >= 0.0);
    CHECK(sigmoid(800.0) <= 1.0);
    // digamma(1) = -Euler gamma; digamma(x + 1) = digamma(x) + 1/x.
    CHECK(digamma(1.0) == doctest::Approx(-0.5772156649015329).epsilon(1e-14));
    CHECK(digamma(4.5) == doctest::Approx(digamma(3.5) + 1 / 3.5).epsilon(1e-13));
}
