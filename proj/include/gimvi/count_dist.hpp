#ifndef GIMVI_COUNT_DIST_HPP
#define GIMVI_COUNT_DIST_HPP

#include <span>

#include "gimvi/random.hpp"

/**
 * @file count_dist.hpp
 * @brief Log-densities, analytic gradients and samplers for the count and library-size distributions.
 *
 * Counts are passed as doubles and must lie within 1e-6 of a non-negative integer.
 * Means and inverse dispersions are validated as finite and positive, then floored at `kParamFloor`
 * before evaluation, so the gradient with respect to a floored parameter is zero.
 */

namespace gimvi {

inline constexpr double kParamFloor = 1e-8;

/** Negative binomial in the mean / inverse-dispersion parameterization; variance is `mean + mean^2 / inv_dispersion`. */
struct NBParams {
    double mean;
    double inv_dispersion;
};

/** Negative binomial mixed with a point mass at zero; the mixing weight is `sigmoid(dropout_logit)`. */
struct ZINBParams {
    NBParams nb;
    double dropout_logit;
};

/** Log-normal with `mu` and `sigma` the mean and standard deviation of the underlying normal. */
struct LogNormalParams {
    double mu;
    double sigma;
};

struct PoissonGrad {
    double value;
    double d_rate;
};

struct NBGrad {
    double value;
    double d_mean;
    double d_inv_dispersion;
};

struct ZINBGrad {
    double value;
    double d_mean;
    double d_inv_dispersion;
    double d_logit;
};

/** Gradient of a KL divergence between two log-normals with respect to the parameters of the first. */
struct LogNormalKLGrad {
    double value;
    double d_mu;
    double d_sigma;
};

double poisson_logpmf(double x, double rate);
double nb_logpmf(double x, const NBParams& p);
double zinb_logpmf(double x, const ZINBParams& p);
double lognormal_logpdf(double x, const LogNormalParams& p);

PoissonGrad poisson_logpmf_grad(double x, double rate);
NBGrad nb_logpmf_grad(double x, const NBParams& p);
ZINBGrad zinb_logpmf_grad(double x, const ZINBParams& p);

/** KL(N(mu, diag(exp(log_var))) || N(0, I)). */
double kl_diag_normal_std(std::span<const double> mu, std::span<const double> log_var);

/** KL(q || p); equal to the KL between the underlying normals. */
double kl_lognormal(const LogNormalParams& q, const LogNormalParams& p);
LogNormalKLGrad kl_lognormal_grad(const LogNormalParams& q, const LogNormalParams& p);

double sample_poisson(double rate, Rng& rng);
double sample_nb(const NBParams& p, Rng& rng);
double sample_zinb(const ZINBParams& p, Rng& rng);
double sample_lognormal(const LogNormalParams& p, Rng& rng);

/** Numerically stable `log(1 + exp(x))`. */
double softplus(double x);
double sigmoid(double x);
double digamma(double x);

}

#endif
