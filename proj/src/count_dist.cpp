#include "gimvi/count_dist.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <boost/math/special_functions/digamma.hpp>

#include "gimvi/errors.hpp"

namespace gimvi {

namespace {

double checked_count(double x) {
    if (!std::isfinite(x) || x < -1e-6) {
        throw DomainError("count must be a non-negative finite value, got " + std::to_string(x));
    }
    const double rounded = std::round(x);
    if (std::abs(x - rounded) > 1e-6) {
        throw DomainError("count must be integer-valued within 1e-6, got " + std::to_string(x));
    }
    return std::max(rounded, 0.0);
}

double checked_positive(double v, const char* name) {
    if (!std::isfinite(v) || v <= 0) {
        throw DomainError(std::string(name) + " must be finite and positive, got " + std::to_string(v));
    }
    return v;
}

void check_nb(const NBParams& p) {
    checked_positive(p.mean, "NB mean");
    checked_positive(p.inv_dispersion, "NB inverse dispersion");
}

void check_zinb(const ZINBParams& p) {
    check_nb(p.nb);
    if (!std::isfinite(p.dropout_logit)) {
        throw DomainError("ZINB dropout logit must be finite");
    }
}

void check_lognormal(const LogNormalParams& p) {
    if (!std::isfinite(p.mu)) {
        throw DomainError("log-normal mu must be finite");
    }
    checked_positive(p.sigma, "log-normal sigma");
}

// log(a + b) from log a and log b, with the max factored out.
double log_add(double la, double lb) {
    const double hi = std::max(la, lb);
    const double lo = std::min(la, lb);
    return hi + std::log1p(std::exp(lo - hi));
}

// Evaluated on floored, validated parameters.
NBGrad nb_core(double x, double mu, double theta) {
    const double denom = theta + mu;
    const double log_theta_frac = -std::log1p(mu / theta); // log(theta / (theta + mu))
    NBGrad out;
    out.value = std::lgamma(x + theta) - std::lgamma(theta) - std::lgamma(x + 1.0)
        + theta * log_theta_frac + (x > 0 ? x * (std::log(mu) - std::log(denom)) : 0.0);
    out.d_mean = (x > 0 ? x / mu : 0.0) - (theta + x) / denom;
    out.d_inv_dispersion = digamma(x + theta) - digamma(theta) + log_theta_frac + (mu - x) / denom;
    return out;
}

}

double softplus(double x) {
    if (x > 0) {
        return x + std::log1p(std::exp(-x));
    }
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double digamma(double x) {
    return boost::math::digamma(x);
}

PoissonGrad poisson_logpmf_grad(double x, double rate) {
    x = checked_count(x);
    rate = std::max(checked_positive(rate, "Poisson rate"), kParamFloor);
    PoissonGrad out;
    out.value = (x > 0 ? x * std::log(rate) : 0.0) - rate - std::lgamma(x + 1.0);
    out.d_rate = x / rate - 1.0;
    return out;
}

double poisson_logpmf(double x, double rate) {
    return poisson_logpmf_grad(x, rate).value;
}

NBGrad nb_logpmf_grad(double x, const NBParams& p) {
    x = checked_count(x);
    check_nb(p);
    return nb_core(x, std::max(p.mean, kParamFloor), std::max(p.inv_dispersion, kParamFloor));
}

double nb_logpmf(double x, const NBParams& p) {
    x = checked_count(x);
    check_nb(p);
    const double mu = std::max(p.mean, kParamFloor);
    const double theta = std::max(p.inv_dispersion, kParamFloor);
    return std::lgamma(x + theta) - std::lgamma(theta) - std::lgamma(x + 1.0)
        - theta * std::log1p(mu / theta) + (x > 0 ? x * (std::log(mu) - std::log(theta + mu)) : 0.0);
}

ZINBGrad zinb_logpmf_grad(double x, const ZINBParams& p) {
    x = checked_count(x);
    check_zinb(p);
    const double w = p.dropout_logit;
    const NBGrad nb = nb_core(x, std::max(p.nb.mean, kParamFloor), std::max(p.nb.inv_dispersion, kParamFloor));
    const double pi = sigmoid(w);

    ZINBGrad out;
    if (x > 0) {
        out.value = -softplus(w) + nb.value;
        out.d_mean = nb.d_mean;
        out.d_inv_dispersion = nb.d_inv_dispersion;
        out.d_logit = -pi;
        return out;
    }

    const double log_pi = -softplus(-w);
    const double log_keep = -softplus(w) + nb.value;
    out.value = log_add(log_pi, log_keep);
    const double weight_zero = std::exp(log_pi - out.value);
    const double weight_nb = std::exp(log_keep - out.value);
    out.d_mean = weight_nb * nb.d_mean;
    out.d_inv_dispersion = weight_nb * nb.d_inv_dispersion;
    out.d_logit = weight_zero * (1.0 - pi) - weight_nb * pi;
    return out;
}

double zinb_logpmf(double x, const ZINBParams& p) {
    return zinb_logpmf_grad(x, p).value;
}

double lognormal_logpdf(double x, const LogNormalParams& p) {
    if (!std::isfinite(x) || x <= 0) {
        throw DomainError("log-normal support is x > 0, got " + std::to_string(x));
    }
    check_lognormal(p);
    const double lx = std::log(x);
    const double d = (lx - p.mu) / p.sigma;
    return -0.5 * d * d - std::log(p.sigma) - lx - 0.5 * std::log(2 * std::numbers::pi);
}

double kl_diag_normal_std(std::span<const double> mu, std::span<const double> log_var) {
    require(mu.size() == log_var.size(), "kl_diag_normal_std: mu and log_var lengths differ");
    double total = 0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        // expm1(l) - l stays accurate for l near 0, where the terms cancel.
        total += 0.5 * (std::expm1(log_var[i]) - log_var[i] + mu[i] * mu[i]);
    }
    return total;
}

LogNormalKLGrad kl_lognormal_grad(const LogNormalParams& q, const LogNormalParams& p) {
    check_lognormal(q);
    check_lognormal(p);
    const double diff = q.mu - p.mu;
    const double vp = p.sigma * p.sigma;
    const double ratio = q.sigma / p.sigma;
    LogNormalKLGrad out;
    // 0.5 * (r^2 - 1 - log r^2) is non-negative and vanishes at r = 1.
    out.value = 0.5 * (std::expm1(2 * std::log(ratio)) - 2 * std::log(ratio)) + diff * diff / (2 * vp);
    out.d_mu = diff / vp;
    out.d_sigma = -1.0 / q.sigma + q.sigma / vp;
    return out;
}

double kl_lognormal(const LogNormalParams& q, const LogNormalParams& p) {
    return kl_lognormal_grad(q, p).value;
}

double sample_poisson(double rate, Rng& rng) {
    checked_positive(rate, "Poisson rate");
    std::poisson_distribution<long long> dist(rate);
    return static_cast<double>(dist(rng));
}

double sample_nb(const NBParams& p, Rng& rng) {
    check_nb(p);
    // Gamma-Poisson mixture: rate ~ Gamma(shape = theta, scale = mean / theta).
    std::gamma_distribution<double> gamma(p.inv_dispersion, p.mean / p.inv_dispersion);
    const double rate = gamma(rng);
    if (rate <= 0) {
        return 0.0;
    }
    std::poisson_distribution<long long> dist(rate);
    return static_cast<double>(dist(rng));
}

double sample_zinb(const ZINBParams& p, Rng& rng) {
    check_zinb(p);
    std::bernoulli_distribution dropout(sigmoid(p.dropout_logit));
    const bool zeroed = dropout(rng);
    const double draw = sample_nb(p.nb, rng);
    return zeroed ? 0.0 : draw;
}

double sample_lognormal(const LogNormalParams& p, Rng& rng) {
    check_lognormal(p);
    std::lognormal_distribution<double> dist(p.mu, p.sigma);
    return dist(rng);
}

}
