#include "gimvi/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gimvi/count_dist.hpp"
#include "gimvi/errors.hpp"

namespace gimvi {

namespace {

std::string to_string(RnaLikelihood l) {
    return l == RnaLikelihood::zinb ? "zinb" : "nb";
}

std::string to_string(SpatialLikelihood l) {
    return l == SpatialLikelihood::poisson ? "poisson" : "nb";
}

std::string to_string(TrainMode m) {
    switch (m) {
    case TrainMode::joint:
        return "joint";
    case TrainMode::rna_only:
        return "rna_only";
    case TrainMode::spatial_only:
        return "spatial_only";
    }
    return "joint";
}

Matrix with_label(const Matrix& x, Modality s) {
    Matrix out(x.rows(), x.cols() + 2);
    out.leftCols(x.cols()) = x;
    out.col(x.cols()) = Vector::Constant(x.rows(), s == Modality::rna ? 1.0 : 0.0);
    out.col(x.cols() + 1) = Vector::Constant(x.rows(), s == Modality::spatial ? 1.0 : 0.0);
    return out;
}

void check_counts(const Matrix& counts, const char* where) {
    for (Eigen::Index i = 0; i < counts.size(); ++i) {
        const double v = counts.data()[i];
        if (!std::isfinite(v) || v < 0) {
            throw DataError(std::string(where) + ": counts must be finite and non-negative");
        }
    }
}

// Gradient of the renormalized panel frequencies pulled back onto the full frequency vector.
Matrix renormalize_backward(const Matrix& rho, const Matrix& rho_panel, const Matrix& d_panel, const GenePanel& panel,
                            bool over_full_panel) {
    Matrix d_rho = Matrix::Zero(rho.rows(), rho.cols());
    for (Eigen::Index n = 0; n < rho.rows(); ++n) {
        if (over_full_panel) {
            // rho' = rho_g / sum over G rho, the denominator being identically one under softmax.
            double mass = rho.row(n).sum();
            double dot = 0;
            for (std::size_t j = 0; j < panel.spatial.size(); ++j) {
                dot += d_panel(n, static_cast<Eigen::Index>(j)) * rho_panel(n, static_cast<Eigen::Index>(j));
            }
            d_rho.row(n).setConstant(-dot / mass);
            for (std::size_t j = 0; j < panel.spatial.size(); ++j) {
                d_rho(n, static_cast<Eigen::Index>(panel.spatial[j])) += d_panel(n, static_cast<Eigen::Index>(j)) / mass;
            }
            continue;
        }
        double mass = 0;
        double dot = 0;
        for (std::size_t j = 0; j < panel.spatial.size(); ++j) {
            mass += rho(n, static_cast<Eigen::Index>(panel.spatial[j]));
            dot += d_panel(n, static_cast<Eigen::Index>(j)) * rho_panel(n, static_cast<Eigen::Index>(j));
        }
        for (std::size_t j = 0; j < panel.spatial.size(); ++j) {
            d_rho(n, static_cast<Eigen::Index>(panel.spatial[j])) = (d_panel(n, static_cast<Eigen::Index>(j)) - dot) / mass;
        }
    }
    return d_rho;
}

Matrix renormalize(const Matrix& rho, const GenePanel& panel, bool over_full_panel) {
    Matrix out(rho.rows(), static_cast<Eigen::Index>(panel.spatial.size()));
    for (Eigen::Index n = 0; n < rho.rows(); ++n) {
        double mass = 0;
        if (over_full_panel) {
            mass = rho.row(n).sum();
        } else {
            for (auto g : panel.spatial) {
                mass += rho(n, static_cast<Eigen::Index>(g));
            }
        }
        if (!(mass >= 1e-12)) {
            throw DomainError("renormalize_rho: frequency mass on the spatial panel is below 1e-12");
        }
        for (std::size_t j = 0; j < panel.spatial.size(); ++j) {
            out(n, static_cast<Eigen::Index>(j)) = rho(n, static_cast<Eigen::Index>(panel.spatial[j])) / mass;
        }
    }
    return out;
}

class BatchCursor {
public:
    BatchCursor(std::size_t n, Rng& rng) : order_(n), rng_(&rng) {
        std::iota(order_.begin(), order_.end(), 0);
        reset();
    }

    void reset() {
        std::shuffle(order_.begin(), order_.end(), *rng_);
        pos_ = 0;
    }

    std::vector<std::size_t> next(std::size_t batch) {
        batch = std::min(batch, order_.size());
        std::vector<std::size_t> out;
        out.reserve(batch);
        while (out.size() < batch) {
            if (pos_ == order_.size()) {
                reset();
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> order_;
    Rng* rng_;
    std::size_t pos_ = 0;
};

Matrix gather_rows(const Eigen::MatrixXd& m, const std::vector<std::size_t>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

}

void GimVIConfig::validate() const {
    require(latent_dim >= 1, "GimVIConfig: latent_dim must be >= 1");
    require(kappa >= 0 && std::isfinite(kappa), "GimVIConfig: kappa must be finite and >= 0");
    require(epochs >= 1, "GimVIConfig: epochs must be >= 1");
    require(batch_size >= 1, "GimVIConfig: batch_size must be >= 1");
    require(hidden_width >= 1, "GimVIConfig: hidden_width must be >= 1");
    require(learning_rate > 0, "GimVIConfig: learning_rate must be > 0");
}

nlohmann::json to_json(const GimVIConfig& cfg) {
    return {{"latent_dim", cfg.latent_dim},
            {"rna_likelihood", to_string(cfg.rna_likelihood)},
            {"spatial_likelihood", to_string(cfg.spatial_likelihood)},
            {"kappa", cfg.kappa},
            {"epochs", cfg.epochs},
            {"batch_size", cfg.batch_size},
            {"seed", cfg.seed},
            {"hidden_width", cfg.hidden_width},
            {"learning_rate", cfg.learning_rate},
            {"renormalize_over_full_panel", cfg.renormalize_over_full_panel},
            {"mode", to_string(cfg.mode)},
            {"freeze_discriminator", cfg.freeze_discriminator},
            {"data_informed_init", cfg.data_informed_init}};
}

GimVIConfig config_from_json(const nlohmann::json& j, GimVIConfig cfg) {
    try {
        cfg.latent_dim = j.value("latent_dim", cfg.latent_dim);
        cfg.kappa = j.value("kappa", cfg.kappa);
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.hidden_width = j.value("hidden_width", cfg.hidden_width);
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        cfg.renormalize_over_full_panel = j.value("renormalize_over_full_panel", cfg.renormalize_over_full_panel);
        cfg.freeze_discriminator = j.value("freeze_discriminator", cfg.freeze_discriminator);
        cfg.data_informed_init = j.value("data_informed_init", cfg.data_informed_init);
        const std::string rna = j.value("rna_likelihood", to_string(cfg.rna_likelihood));
        const std::string spa = j.value("spatial_likelihood", to_string(cfg.spatial_likelihood));
        const std::string mode = j.value("mode", to_string(cfg.mode));
        if (rna != "zinb" && rna != "nb") {
            throw ContractViolation("rna_likelihood must be 'zinb' or 'nb'");
        }
        if (spa != "poisson" && spa != "nb") {
            throw ContractViolation("spatial_likelihood must be 'poisson' or 'nb'");
        }
        cfg.rna_likelihood = rna == "zinb" ? RnaLikelihood::zinb : RnaLikelihood::nb;
        cfg.spatial_likelihood = spa == "poisson" ? SpatialLikelihood::poisson : SpatialLikelihood::nb;
        if (mode == "joint") {
            cfg.mode = TrainMode::joint;
        } else if (mode == "rna_only") {
            cfg.mode = TrainMode::rna_only;
        } else if (mode == "spatial_only") {
            cfg.mode = TrainMode::spatial_only;
        } else {
            throw ContractViolation("mode must be 'joint', 'rna_only' or 'spatial_only'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("invalid model configuration: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

LibraryPrior LibraryPrior::from_counts(const CountMatrix& rna) {
    require(rna.num_cells() >= 1, "LibraryPrior: no RNA cells");
    std::vector<double> logs;
    for (Eigen::Index i = 0; i < rna.values.rows(); ++i) {
        const double total = rna.values.row(i).sum();
        if (total <= 0) {
            throw DataError("LibraryPrior: RNA cell '" + rna.cell_ids[static_cast<std::size_t>(i)] + "' has zero total count");
        }
        logs.push_back(std::log(total));
    }
    const double mean = std::accumulate(logs.begin(), logs.end(), 0.0) / static_cast<double>(logs.size());
    double ss = 0;
    for (double l : logs) {
        ss += (l - mean) * (l - mean);
    }
    LibraryPrior p;
    p.mu = mean;
    // A single cell or identical libraries give zero spread; keep the prior proper.
    p.sigma = std::max(std::sqrt(ss / static_cast<double>(logs.size())), 1e-3);
    return p;
}

ModelState init_model(const GenePanel& panel, const LibraryPrior& prior, const GimVIConfig& cfg) {
    cfg.validate();
    panel.validate();
    require(prior.sigma > 0, "init_model: library prior sigma must be positive");

    ModelState s;
    s.config = cfg;
    s.panel = panel;
    s.prior = prior;

    Rng rng = make_rng(derive_seed(cfg.seed, 1));
    const int g = static_cast<int>(panel.genes.size());
    const int gp = static_cast<int>(panel.spatial.size());
    const int d = cfg.latent_dim;
    const int h = cfg.hidden_width;
    const auto sp = Activation::softplus;

    s.var.rna_hidden = DenseNet::mlp(std::vector<int>{g + 2, h}, sp, sp, rng);
    s.var.spatial_hidden = DenseNet::mlp(std::vector<int>{gp + 2, h}, sp, sp, rng);
    s.var.shared_head = DenseNet::mlp(std::vector<int>{h, 2 * d}, sp, Activation::identity, rng);
    s.var.rna_library = DenseNet::mlp(std::vector<int>{g + 2, h, 2}, sp, Activation::identity, rng);
    s.gen.decoder_rho = DenseNet::mlp(std::vector<int>{d + 2, h, g}, sp, Activation::softmax, rng);
    s.gen.decoder_dropout = DenseNet::mlp(std::vector<int>{d + 2, h, g}, sp, Activation::identity, rng);
    s.gen.log_theta = Vector::Zero(g);
    s.gen.log_theta_prime = Vector::Zero(gp);
    s.disc.classifier = DenseNet::mlp(std::vector<int>{d, h, 1}, sp, Activation::sigmoid, rng);

    s.model_optimizer.learning_rate = cfg.learning_rate;
    s.disc_optimizer.learning_rate = cfg.learning_rate;
    return s;
}

void ModelGradients::set_zero() {
    for (auto* g : {&decoder_rho, &decoder_dropout, &rna_hidden, &spatial_hidden, &shared_head, &rna_library, &classifier}) {
        g->set_zero();
    }
    log_theta.setZero();
    log_theta_prime.setZero();
}

ModelGradients zero_gradients(const ModelState& state) {
    ModelGradients g;
    g.decoder_rho = state.gen.decoder_rho.zero_gradient();
    g.decoder_dropout = state.gen.decoder_dropout.zero_gradient();
    g.rna_hidden = state.var.rna_hidden.zero_gradient();
    g.spatial_hidden = state.var.spatial_hidden.zero_gradient();
    g.shared_head = state.var.shared_head.zero_gradient();
    g.rna_library = state.var.rna_library.zero_gradient();
    g.classifier = state.disc.classifier.zero_gradient();
    g.log_theta = Vector::Zero(state.gen.log_theta.size());
    g.log_theta_prime = Vector::Zero(state.gen.log_theta_prime.size());
    return g;
}

std::vector<ParamView> model_parameters(ModelState& state, ModelGradients& grads) {
    std::vector<ParamView> out;
    auto add = [&](DenseNet& net, NetGradient& g) {
        auto views = net.parameters(g);
        out.insert(out.end(), views.begin(), views.end());
    };
    add(state.gen.decoder_rho, grads.decoder_rho);
    add(state.gen.decoder_dropout, grads.decoder_dropout);
    add(state.var.rna_hidden, grads.rna_hidden);
    add(state.var.spatial_hidden, grads.spatial_hidden);
    add(state.var.shared_head, grads.shared_head);
    add(state.var.rna_library, grads.rna_library);
    out.push_back({std::span<double>(state.gen.log_theta.data(), static_cast<std::size_t>(state.gen.log_theta.size())),
                   std::span<const double>(grads.log_theta.data(), static_cast<std::size_t>(grads.log_theta.size()))});
    out.push_back({std::span<double>(state.gen.log_theta_prime.data(), static_cast<std::size_t>(state.gen.log_theta_prime.size())),
                   std::span<const double>(grads.log_theta_prime.data(), static_cast<std::size_t>(grads.log_theta_prime.size()))});
    return out;
}

std::vector<ParamView> discriminator_parameters(ModelState& state, ModelGradients& grads) {
    return state.disc.classifier.parameters(grads.classifier);
}

Matrix encoder_input(const Matrix& counts, Modality s) {
    return with_label(counts.array().log1p().matrix(), s);
}

Matrix decode_rho(const Generative& gen, const Matrix& z, Modality s) {
    require(z.cols() + 2 == gen.decoder_rho.input_width(), "decode_rho: latent width mismatch");
    return gen.decoder_rho.forward(with_label(z, s));
}

Matrix renormalize_rho(const Matrix& rho, const GenePanel& panel) {
    require(!panel.spatial.empty(), "renormalize_rho: spatial panel is empty");
    require(rho.cols() == static_cast<Eigen::Index>(panel.genes.size()), "renormalize_rho: frequency width does not match G");
    return renormalize(rho, panel, false);
}

RnaPass elbo_rna(const ModelState& state, const Matrix& counts, NoiseSource& noise) {
    require(counts.cols() == state.num_genes(), "elbo_rna: counts must cover the full gene set G");
    require(counts.rows() >= 1, "elbo_rna: empty batch");
    check_counts(counts, "elbo_rna");
    const int d = state.config.latent_dim;
    const Eigen::Index b = counts.rows();
    const Eigen::Index g = counts.cols();
    const bool zinb = state.config.rna_likelihood == RnaLikelihood::zinb;

    RnaPass p;
    p.input = encoder_input(counts, Modality::rna);
    const Matrix hidden = state.var.rna_hidden.forward(p.input, &p.hidden_tape);
    const Matrix head = state.var.shared_head.forward(hidden, &p.head_tape);
    p.mu_z = head.leftCols(d);
    p.log_var_z = head.rightCols(d);
    p.z = reparam_gaussian(p.mu_z, p.log_var_z, noise);

    const Matrix lib = state.var.rna_library.forward(p.input, &p.library_tape);
    p.mu_library = lib.col(0);
    p.log_var_library = lib.col(1);
    p.log_library = reparam_gaussian(p.mu_library, p.log_var_library, noise);
    p.library = p.log_library.sample.array().exp();

    const Matrix dec_in = with_label(p.z.sample, Modality::rna);
    p.rho = state.gen.decoder_rho.forward(dec_in, &p.rho_tape);
    Matrix logits;
    if (zinb) {
        logits = state.gen.decoder_dropout.forward(dec_in, &p.dropout_tape);
    }

    const Vector theta = state.gen.log_theta.array().exp();
    p.d_mean.resize(b, g);
    p.d_theta.resize(b, g);
    p.d_logit = Matrix::Zero(zinb ? b : 0, zinb ? g : 0);
    p.reconstruction = Vector::Zero(b);
    p.kl_z.resize(b);
    p.kl_library.resize(b);
    p.d_kl_library_mu.resize(b);
    p.d_kl_library_sigma.resize(b);
    p.elbo.resize(b);

    for (Eigen::Index n = 0; n < b; ++n) {
        const double ell = p.library(n, 0);
        for (Eigen::Index j = 0; j < g; ++j) {
            const double raw_mean = ell * p.rho(n, j);
            const double mean = std::max(raw_mean, kParamFloor);
            const double th = std::max(theta(j), kParamFloor);
            if (zinb) {
                const ZINBGrad r = zinb_logpmf_grad(counts(n, j), {{mean, th}, logits(n, j)});
                p.reconstruction(n) += r.value;
                p.d_mean(n, j) = raw_mean < kParamFloor ? 0.0 : r.d_mean;
                p.d_theta(n, j) = theta(j) < kParamFloor ? 0.0 : r.d_inv_dispersion;
                p.d_logit(n, j) = r.d_logit;
            } else {
                const NBGrad r = nb_logpmf_grad(counts(n, j), {mean, th});
                p.reconstruction(n) += r.value;
                p.d_mean(n, j) = raw_mean < kParamFloor ? 0.0 : r.d_mean;
                p.d_theta(n, j) = theta(j) < kParamFloor ? 0.0 : r.d_inv_dispersion;
            }
        }
        const Vector mu_row = p.mu_z.row(n).transpose();
        const Vector lv_row = p.log_var_z.row(n).transpose();
        p.kl_z(n) = kl_diag_normal_std(std::span<const double>(mu_row.data(), mu_row.size()),
                                       std::span<const double>(lv_row.data(), lv_row.size()));
        const LogNormalKLGrad kl = kl_lognormal_grad({p.mu_library(n, 0), p.log_library.std_dev(n, 0)}, {state.prior.mu, state.prior.sigma});
        p.kl_library(n) = kl.value;
        p.d_kl_library_mu(n) = kl.d_mu;
        p.d_kl_library_sigma(n) = kl.d_sigma;
        p.elbo(n) = p.reconstruction(n) - p.kl_library(n) - p.kl_z(n);
    }
    p.mean_elbo = p.elbo.mean();
    return p;
}

void backward_rna(const ModelState& state, RnaPass& p, double weight, const Matrix& extra_dz, ModelGradients& grads) {
    const int d = state.config.latent_dim;
    const Eigen::Index b = p.rho.rows();
    const bool zinb = state.config.rna_likelihood == RnaLikelihood::zinb;

    // Loss is -weight * sum_n elbo_n.
    const Matrix d_mean = -weight * p.d_mean;
    const Matrix d_rho = d_mean.array().colwise() * p.library.col(0).array();
    const Vector d_library = d_mean.cwiseProduct(p.rho).rowwise().sum();
    const Vector theta = state.gen.log_theta.array().exp();
    grads.log_theta += ((-weight * p.d_theta).colwise().sum().transpose().array() * theta.array()).matrix();

    Matrix d_dec_in = state.gen.decoder_rho.backward(p.rho_tape, d_rho, grads.decoder_rho);
    if (zinb) {
        d_dec_in += state.gen.decoder_dropout.backward(p.dropout_tape, -weight * p.d_logit, grads.decoder_dropout);
    }
    Matrix dz = d_dec_in.leftCols(d);
    if (extra_dz.size() > 0) {
        require(extra_dz.rows() == b && extra_dz.cols() == d, "backward_rna: extra_dz shape mismatch");
        dz += extra_dz;
    }

    GaussianSampleGrad zg = reparam_backward(p.z, dz);
    zg.d_mu += weight * p.mu_z;
    zg.d_log_var += weight * 0.5 * p.log_var_z.array().exp().matrix() - weight * 0.5 * Matrix::Ones(b, d);
    Matrix d_head(b, 2 * d);
    d_head << zg.d_mu, zg.d_log_var;
    const Matrix d_hidden = state.var.shared_head.backward(p.head_tape, d_head, grads.shared_head);
    state.var.rna_hidden.backward(p.hidden_tape, d_hidden, grads.rna_hidden);

    const Matrix d_log_library = d_library.cwiseProduct(p.library.col(0));
    GaussianSampleGrad lg = reparam_backward(p.log_library, d_log_library);
    lg.d_mu += weight * p.d_kl_library_mu;
    lg.d_log_var += (weight * p.d_kl_library_sigma.array() * 0.5 * p.log_library.std_dev.col(0).array()).matrix();
    Matrix d_lib(b, 2);
    d_lib << lg.d_mu, lg.d_log_var;
    state.var.rna_library.backward(p.library_tape, d_lib, grads.rna_library);
}

SpatialPass elbo_spatial(const ModelState& state, const Matrix& counts, NoiseSource& noise) {
    require(counts.cols() == state.num_spatial_genes(), "elbo_spatial: counts must cover the spatial panel G'");
    require(counts.rows() >= 1, "elbo_spatial: empty batch");
    check_counts(counts, "elbo_spatial");
    const int d = state.config.latent_dim;
    const Eigen::Index b = counts.rows();
    const Eigen::Index gp = counts.cols();
    const bool use_nb = state.config.spatial_likelihood == SpatialLikelihood::nb;

    SpatialPass p;
    p.library = counts.rowwise().sum();
    for (Eigen::Index n = 0; n < b; ++n) {
        if (!(p.library(n) > 0)) {
            throw DataError("elbo_spatial: spatial cell with zero library size");
        }
    }
    p.input = encoder_input(counts, Modality::spatial);
    const Matrix hidden = state.var.spatial_hidden.forward(p.input, &p.hidden_tape);
    const Matrix head = state.var.shared_head.forward(hidden, &p.head_tape);
    p.mu_z = head.leftCols(d);
    p.log_var_z = head.rightCols(d);
    p.z = reparam_gaussian(p.mu_z, p.log_var_z, noise);

    p.rho = state.gen.decoder_rho.forward(with_label(p.z.sample, Modality::spatial), &p.rho_tape);
    p.rho_panel = renormalize(p.rho, state.panel, state.config.renormalize_over_full_panel);

    const Vector theta = state.gen.log_theta_prime.array().exp();
    p.d_rate.resize(b, gp);
    p.d_theta = Matrix::Zero(use_nb ? b : 0, use_nb ? gp : 0);
    p.reconstruction = Vector::Zero(b);
    p.kl_z.resize(b);
    p.elbo.resize(b);
    for (Eigen::Index n = 0; n < b; ++n) {
        for (Eigen::Index j = 0; j < gp; ++j) {
            const double raw_rate = p.library(n) * p.rho_panel(n, j);
            const double rate = std::max(raw_rate, kParamFloor);
            if (use_nb) {
                const NBGrad r = nb_logpmf_grad(counts(n, j), {rate, std::max(theta(j), kParamFloor)});
                p.reconstruction(n) += r.value;
                p.d_rate(n, j) = raw_rate < kParamFloor ? 0.0 : r.d_mean;
                p.d_theta(n, j) = theta(j) < kParamFloor ? 0.0 : r.d_inv_dispersion;
            } else {
                const PoissonGrad r = poisson_logpmf_grad(counts(n, j), rate);
                p.reconstruction(n) += r.value;
                p.d_rate(n, j) = raw_rate < kParamFloor ? 0.0 : r.d_rate;
            }
        }
        const Vector mu_row = p.mu_z.row(n).transpose();
        const Vector lv_row = p.log_var_z.row(n).transpose();
        p.kl_z(n) = kl_diag_normal_std(std::span<const double>(mu_row.data(), mu_row.size()),
                                       std::span<const double>(lv_row.data(), lv_row.size()));
        p.elbo(n) = p.reconstruction(n) - p.kl_z(n);
    }
    p.mean_elbo = p.elbo.mean();
    return p;
}

void backward_spatial(const ModelState& state, SpatialPass& p, double weight, const Matrix& extra_dz, ModelGradients& grads) {
    const int d = state.config.latent_dim;
    const Eigen::Index b = p.rho.rows();
    const bool use_nb = state.config.spatial_likelihood == SpatialLikelihood::nb;

    const Matrix d_rate = -weight * p.d_rate;
    const Matrix d_panel = d_rate.array().colwise() * p.library.array();
    if (use_nb) {
        const Vector theta = state.gen.log_theta_prime.array().exp();
        grads.log_theta_prime += ((-weight * p.d_theta).colwise().sum().transpose().array() * theta.array()).matrix();
    }
    const Matrix d_rho = renormalize_backward(p.rho, p.rho_panel, d_panel, state.panel, state.config.renormalize_over_full_panel);
    const Matrix d_dec_in = state.gen.decoder_rho.backward(p.rho_tape, d_rho, grads.decoder_rho);
    Matrix dz = d_dec_in.leftCols(d);
    if (extra_dz.size() > 0) {
        require(extra_dz.rows() == b && extra_dz.cols() == d, "backward_spatial: extra_dz shape mismatch");
        dz += extra_dz;
    }

    GaussianSampleGrad zg = reparam_backward(p.z, dz);
    zg.d_mu += weight * p.mu_z;
    zg.d_log_var += weight * 0.5 * p.log_var_z.array().exp().matrix() - weight * 0.5 * Matrix::Ones(b, d);
    Matrix d_head(b, 2 * d);
    d_head << zg.d_mu, zg.d_log_var;
    const Matrix d_hidden = state.var.shared_head.backward(p.head_tape, d_head, grads.shared_head);
    state.var.spatial_hidden.backward(p.hidden_tape, d_hidden, grads.spatial_hidden);
}

AdversarialPass adversarial_losses(const Discriminator& disc, const Matrix& z_rna, const Matrix& z_spatial) {
    require(z_rna.rows() > 0 && z_spatial.rows() > 0, "adversarial_losses: both latent batches must be nonempty");
    require(z_rna.cols() == z_spatial.cols(), "adversarial_losses: latent widths differ");
    AdversarialPass p;
    p.n_rna = z_rna.rows();
    p.z.resize(z_rna.rows() + z_spatial.rows(), z_rna.cols());
    p.z << z_rna, z_spatial;
    p.labels = Vector::Zero(p.z.rows());
    p.labels.tail(z_spatial.rows()).setOnes();
    p.prob = disc.classifier.forward(p.z, &p.tape);

    double total = 0;
    for (Eigen::Index i = 0; i < p.z.rows(); ++i) {
        const double q = std::clamp(p.prob(i, 0), 1e-12, 1.0 - 1e-12);
        total -= p.labels(i) * std::log(q) + (1.0 - p.labels(i)) * std::log1p(-q);
    }
    p.classifier_loss = total / static_cast<double>(p.z.rows());
    return p;
}

AdversarialGrad adversarial_backward(const Discriminator& disc, AdversarialPass& p, double kappa, NetGradient& classifier_grad) {
    const auto n = static_cast<double>(p.z.rows());
    Matrix d_prob(p.z.rows(), 1);
    for (Eigen::Index i = 0; i < p.z.rows(); ++i) {
        const double q = std::clamp(p.prob(i, 0), 1e-12, 1.0 - 1e-12);
        d_prob(i, 0) = (-p.labels(i) / q + (1.0 - p.labels(i)) / (1.0 - q)) / n;
    }
    const Matrix dz = disc.classifier.backward(p.tape, d_prob, classifier_grad);

    AdversarialGrad out;
    const Eigen::Index n_spatial = p.z.rows() - p.n_rna;
    if (kappa == 0) {
        out.dz_rna = Matrix::Zero(p.n_rna, p.z.cols());
        out.dz_spatial = Matrix::Zero(n_spatial, p.z.cols());
        return out;
    }
    const Matrix reversed = GradReverse(kappa).backward(dz);
    out.dz_rna = reversed.topRows(p.n_rna);
    out.dz_spatial = reversed.bottomRows(n_spatial);
    return out;
}

LossBreakdown compute_loss(const ModelState& state, const Matrix& rna_counts, const Matrix& spatial_counts, NoiseSource& noise,
                           ModelGradients* grads) {
    LossBreakdown loss;
    loss.kappa = state.config.kappa;
    const TrainMode mode = state.config.mode;
    const Matrix none;

    if (mode == TrainMode::rna_only) {
        RnaPass rp = elbo_rna(state, rna_counts, noise);
        loss.neg_elbo_rna = -rp.mean_elbo;
        if (grads) {
            backward_rna(state, rp, 1.0 / static_cast<double>(rna_counts.rows()), none, *grads);
        }
        return loss;
    }
    if (mode == TrainMode::spatial_only) {
        SpatialPass sp = elbo_spatial(state, spatial_counts, noise);
        loss.neg_elbo_spatial = -sp.mean_elbo;
        if (grads) {
            backward_spatial(state, sp, 1.0 / static_cast<double>(spatial_counts.rows()), none, *grads);
        }
        return loss;
    }

    RnaPass rp = elbo_rna(state, rna_counts, noise);
    SpatialPass sp = elbo_spatial(state, spatial_counts, noise);
    AdversarialPass ap = adversarial_losses(state.disc, rp.z.sample, sp.z.sample);
    loss.neg_elbo_rna = -rp.mean_elbo;
    loss.neg_elbo_spatial = -sp.mean_elbo;
    loss.classifier_loss = ap.classifier_loss;
    if (grads) {
        const AdversarialGrad ag = adversarial_backward(state.disc, ap, state.config.kappa, grads->classifier);
        backward_rna(state, rp, 1.0 / static_cast<double>(rna_counts.rows()), ag.dz_rna, *grads);
        backward_spatial(state, sp, 1.0 / static_cast<double>(spatial_counts.rows()), ag.dz_spatial, *grads);
    }
    return loss;
}

TrainResult train(const CountMatrix& rna, const CountMatrix& spatial, const GenePanel& panel, const GimVIConfig& cfg,
                  const TrainOptions& options) {
    cfg.validate();
    panel.validate();
    const bool use_rna = cfg.mode != TrainMode::spatial_only;
    const bool use_spatial = cfg.mode != TrainMode::rna_only;
    if (use_rna) {
        if (rna.modality != Modality::rna || rna.gene_ids != panel.genes) {
            throw DataError("train: RNA matrix genes do not match the gene panel G");
        }
        if (rna.num_cells() == 0) {
            throw DataError("train: no RNA cells");
        }
    }
    if (use_spatial) {
        if (spatial.modality != Modality::spatial || spatial.gene_ids != panel.spatial_genes()) {
            throw DataError("train: spatial matrix genes do not match the spatial panel G'");
        }
        if (spatial.num_cells() == 0) {
            throw DataError("train: no spatial cells");
        }
    }

    const LibraryPrior prior = use_rna ? LibraryPrior::from_counts(rna) : LibraryPrior{};
    TrainResult result;
    result.state = init_model(panel, prior, cfg);
    ModelState& state = result.state;
    if (use_rna && cfg.data_informed_init) {
        auto& lib_out = state.var.rna_library.layer(state.var.rna_library.num_layers() - 1);
        lib_out.bias(0) = prior.mu;
        lib_out.bias(1) = 2 * std::log(prior.sigma);
        const Vector totals = rna.values.colwise().sum().transpose();
        const Vector freq = (totals.array() + 1.0) / (totals.sum() + static_cast<double>(totals.size()));
        auto& rho_out = state.gen.decoder_rho.layer(state.gen.decoder_rho.num_layers() - 1);
        rho_out.bias = freq.array().log();
    }

    if (options.on_init) {
        options.on_init(state);
    }

    Rng batch_rng = make_rng(derive_seed(cfg.seed, 2));
    Rng noise_rng = make_rng(derive_seed(cfg.seed, 3));
    NoiseSource noise(noise_rng);

    const std::size_t n_rna = use_rna ? rna.num_cells() : 0;
    const std::size_t n_spatial = use_spatial ? spatial.num_cells() : 0;
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t steps = (std::max(n_rna, n_spatial) + batch - 1) / batch;
    BatchCursor rna_cursor(std::max<std::size_t>(n_rna, 1), batch_rng);
    BatchCursor spatial_cursor(std::max<std::size_t>(n_spatial, 1), batch_rng);

    ModelGradients grads = zero_gradients(state);
    const auto model_views = model_parameters(state, grads);
    const auto disc_views = discriminator_parameters(state, grads);
    const Matrix empty;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rna_cursor.reset();
        spatial_cursor.reset();
        EpochRecord rec;
        rec.epoch = epoch;
        for (std::size_t step = 0; step < steps; ++step) {
            const Matrix rna_batch = use_rna ? gather_rows(rna.values, rna_cursor.next(batch)) : empty;
            const Matrix spatial_batch = use_spatial ? gather_rows(spatial.values, spatial_cursor.next(batch)) : empty;
            grads.set_zero();
            LossBreakdown loss;
            try {
                loss = compute_loss(state, rna_batch, spatial_batch, noise, &grads);
            } catch (const DomainError&) {
                throw TrainingDiverged(epoch);
            }
            if (!std::isfinite(loss.total()) || !std::isfinite(loss.classifier_loss)) {
                throw TrainingDiverged(epoch);
            }
            adam_step(model_views, state.model_optimizer);
            if (cfg.mode == TrainMode::joint && !cfg.freeze_discriminator) {
                adam_step(disc_views, state.disc_optimizer);
            }
            rec.elbo_rna -= loss.neg_elbo_rna;
            rec.elbo_spatial -= loss.neg_elbo_spatial;
            rec.adv_loss += loss.classifier_loss;
        }
        rec.elbo_rna /= static_cast<double>(steps);
        rec.elbo_spatial /= static_cast<double>(steps);
        rec.adv_loss /= static_cast<double>(steps);
        result.trace.push_back(rec);
        if (options.on_epoch) {
            options.on_epoch(epoch, state);
        }
    }
    return result;
}

Posterior encode(const ModelState& state, const CountMatrix& cells) {
    const int d = state.config.latent_dim;
    Matrix head;
    if (cells.modality == Modality::rna) {
        if (cells.gene_ids != state.panel.genes) {
            throw DataError("encode: RNA cells must carry exactly the gene set G of the model");
        }
        check_counts(cells.values, "encode");
        head = state.var.shared_head.forward(state.var.rna_hidden.forward(encoder_input(cells.values, Modality::rna)));
    } else {
        if (cells.gene_ids != state.panel.spatial_genes()) {
            throw DataError("encode: spatial cells must carry exactly the spatial panel G' of the model");
        }
        check_counts(cells.values, "encode");
        head = state.var.shared_head.forward(state.var.spatial_hidden.forward(encoder_input(cells.values, Modality::spatial)));
    }
    Posterior post;
    post.mu = head.leftCols(d);
    post.log_var = head.rightCols(d);
    return post;
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& state) {
    std::vector<double> blob;
    nlohmann::json header;
    header["format"] = "gimvi-checkpoint";
    header["version"] = 1;
    header["config"] = to_json(state.config);
    header["panel"] = to_json(state.panel);
    header["library_prior"] = {{"mu", state.prior.mu}, {"sigma", state.prior.sigma}};
    nlohmann::json nets;
    nets["decoder_rho"] = append_net(state.gen.decoder_rho, blob);
    nets["decoder_dropout"] = append_net(state.gen.decoder_dropout, blob);
    nets["rna_hidden"] = append_net(state.var.rna_hidden, blob);
    nets["spatial_hidden"] = append_net(state.var.spatial_hidden, blob);
    nets["shared_head"] = append_net(state.var.shared_head, blob);
    nets["rna_library"] = append_net(state.var.rna_library, blob);
    nets["classifier"] = append_net(state.disc.classifier, blob);
    header["networks"] = nets;
    header["vectors"] = {{"log_theta", append_vector(state.gen.log_theta, blob)},
                         {"log_theta_prime", append_vector(state.gen.log_theta_prime, blob)}};
    write_param_file(path, header, blob);
}

ModelState load_checkpoint(const std::filesystem::path& path) {
    const ParamFile pf = read_param_file(path);
    const auto& h = pf.header;
    try {
        if (h.at("format").get<std::string>() != "gimvi-checkpoint") {
            throw DataError("'" + path.string() + "' is not a gimvi checkpoint");
        }
        ModelState s;
        s.config = config_from_json(h.at("config"));
        s.panel = panel_from_json(h.at("panel"));
        s.prior.mu = h.at("library_prior").at("mu").get<double>();
        s.prior.sigma = h.at("library_prior").at("sigma").get<double>();
        const auto& nets = h.at("networks");
        s.gen.decoder_rho = read_net(nets.at("decoder_rho"), pf.blob);
        s.gen.decoder_dropout = read_net(nets.at("decoder_dropout"), pf.blob);
        s.var.rna_hidden = read_net(nets.at("rna_hidden"), pf.blob);
        s.var.spatial_hidden = read_net(nets.at("spatial_hidden"), pf.blob);
        s.var.shared_head = read_net(nets.at("shared_head"), pf.blob);
        s.var.rna_library = read_net(nets.at("rna_library"), pf.blob);
        s.disc.classifier = read_net(nets.at("classifier"), pf.blob);
        s.gen.log_theta = read_vector(h.at("vectors").at("log_theta"), pf.blob);
        s.gen.log_theta_prime = read_vector(h.at("vectors").at("log_theta_prime"), pf.blob);
        s.model_optimizer.learning_rate = s.config.learning_rate;
        s.disc_optimizer.learning_rate = s.config.learning_rate;
        if (s.gen.decoder_rho.output_width() != s.num_genes() || s.gen.log_theta_prime.size() != s.num_spatial_genes() ||
            s.var.shared_head.output_width() != 2 * s.config.latent_dim) {
            throw DataError("checkpoint networks do not match its gene panel or latent dimension");
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint header in '" + path.string() + "': " + e.what());
    }
}

}
