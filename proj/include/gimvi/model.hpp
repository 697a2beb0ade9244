#ifndef GIMVI_MODEL_HPP
#define GIMVI_MODEL_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gimvi/data_io.hpp"
#include "gimvi/nn_core.hpp"

/**
 * @file model.hpp
 * @brief Joint variational autoencoder over scRNA-seq and spatial counts with a shared latent space.
 *
 * Both modalities decode through one softmax network f(z, s) that yields gene frequencies over G.
 * RNA counts are ZINB (or NB) with a log-normal library size; spatial counts are Poisson (or NB)
 * with the observed row sum as library and frequencies renormalized onto the spatial panel.
 * The two z-encoders have private hidden layers and share their final affine layer.
 * An optional discriminator on z, trained through gradient reversal with weight kappa, pushes the
 * two aggregated posteriors together.
 */

namespace gimvi {

enum class RnaLikelihood { zinb, nb };
enum class SpatialLikelihood { poisson, nb };

/** Which objective terms are active. The single-modality variants give per-dataset reference embeddings. */
enum class TrainMode { joint, rna_only, spatial_only };

struct GimVIConfig {
    int latent_dim = 10;
    RnaLikelihood rna_likelihood = RnaLikelihood::zinb;
    SpatialLikelihood spatial_likelihood = SpatialLikelihood::poisson;
    double kappa = 0.0;
    int epochs = 100;
    int batch_size = 16;
    std::uint64_t seed = 0;
    int hidden_width = 128;
    double learning_rate = 1e-3;
    /// Renormalize spatial frequencies over all of G instead of the spatial panel (a no-op under softmax).
    bool renormalize_over_full_panel = false;
    TrainMode mode = TrainMode::joint;
    /// Keep the discriminator fixed at its initial parameters; used to isolate the adversarial path.
    bool freeze_discriminator = false;
    /// Start the library head at the library prior and the frequency head at the pooled RNA profile
    /// instead of zero biases.
    bool data_informed_init = true;

    void validate() const;
};

nlohmann::json to_json(const GimVIConfig& cfg);
GimVIConfig config_from_json(const nlohmann::json& j, GimVIConfig defaults = {});

/** Log-normal prior on the RNA library size, fixed from the data before training. */
struct LibraryPrior {
    double mu = 0.0;
    double sigma = 1.0;

    /** Mean and standard deviation of log(row sum) over the cells of `rna`. */
    static LibraryPrior from_counts(const CountMatrix& rna);
};

struct Generative {
    DenseNet decoder_rho;     ///< (z, one-hot s) -> softmax frequencies over G
    DenseNet decoder_dropout; ///< (z, one-hot s) -> dropout logits over G
    Vector log_theta;         ///< RNA inverse dispersions over G
    Vector log_theta_prime;   ///< spatial inverse dispersions over G'
};

struct Variational {
    DenseNet rna_hidden;     ///< (log1p counts over G, one-hot s) -> hidden
    DenseNet spatial_hidden; ///< (log1p counts over G', one-hot s) -> hidden
    DenseNet shared_head;    ///< hidden -> (mu_z, log_var_z), used by both z-encoders
    DenseNet rna_library;    ///< (log1p counts over G, one-hot s) -> (mu, log_var) of log library
};

struct Discriminator {
    DenseNet classifier; ///< z -> P(s = spatial)
};

struct ModelState {
    GimVIConfig config;
    GenePanel panel;
    LibraryPrior prior;
    Generative gen;
    Variational var;
    Discriminator disc;
    AdamState model_optimizer;
    AdamState disc_optimizer;

    int num_genes() const { return static_cast<int>(panel.genes.size()); }
    int num_spatial_genes() const { return static_cast<int>(panel.spatial.size()); }
};

ModelState init_model(const GenePanel& panel, const LibraryPrior& prior, const GimVIConfig& cfg);

struct ModelGradients {
    NetGradient decoder_rho;
    NetGradient decoder_dropout;
    NetGradient rna_hidden;
    NetGradient spatial_hidden;
    NetGradient shared_head;
    NetGradient rna_library;
    NetGradient classifier;
    Vector log_theta;
    Vector log_theta_prime;

    void set_zero();
};

ModelGradients zero_gradients(const ModelState& state);

/** Generative and variational parameter blocks (everything the ELBOs and the reversed penalty train). */
std::vector<ParamView> model_parameters(ModelState& state, ModelGradients& grads);

/** Discriminator parameter blocks, trained on the classifier loss. */
std::vector<ParamView> discriminator_parameters(ModelState& state, ModelGradients& grads);

/** Frequencies over G for each row of `z`, decoded under dataset label `s`. */
Matrix decode_rho(const Generative& gen, const Matrix& z, Modality s);

/** Restrict each row of `rho` to the spatial panel and rescale it to sum to one. */
Matrix renormalize_rho(const Matrix& rho, const GenePanel& panel);

/** Encoder input: log1p of the counts with the one-hot dataset label appended. */
Matrix encoder_input(const Matrix& counts, Modality s);

/** One RNA minibatch evaluated with one reparameterized draw of (z, library) per cell. */
struct RnaPass {
    Matrix input;
    Tape hidden_tape, head_tape, library_tape, rho_tape, dropout_tape;
    Matrix mu_z, log_var_z, mu_library, log_var_library;
    GaussianSample z, log_library;
    Matrix rho;
    Matrix library;
    // Per-entry partial derivatives of the reconstruction log-likelihood.
    Matrix d_mean, d_theta, d_logit;
    Vector reconstruction, kl_z, kl_library, elbo;
    Vector d_kl_library_mu, d_kl_library_sigma;
    double mean_elbo = 0;
};

RnaPass elbo_rna(const ModelState& state, const Matrix& counts, NoiseSource& noise);

/** One spatial minibatch; the library of each cell is its observed row sum. */
struct SpatialPass {
    Matrix input;
    Tape hidden_tape, head_tape, rho_tape;
    Matrix mu_z, log_var_z;
    GaussianSample z;
    Matrix rho, rho_panel;
    Vector library;
    Matrix d_rate, d_theta;
    Vector reconstruction, kl_z, elbo;
    double mean_elbo = 0;
};

SpatialPass elbo_spatial(const ModelState& state, const Matrix& counts, NoiseSource& noise);

/**
 * Accumulate gradients of `-weight * sum(elbo)` plus a loss whose gradient with respect to the
 * sampled z is `extra_dz` (may be empty).
 */
void backward_rna(const ModelState& state, RnaPass& pass, double weight, const Matrix& extra_dz, ModelGradients& grads);
void backward_spatial(const ModelState& state, SpatialPass& pass, double weight, const Matrix& extra_dz, ModelGradients& grads);

/** Discriminator evaluated on latent draws of both datasets, labels 0 for RNA and 1 for spatial. */
struct AdversarialPass {
    Matrix z;
    Vector labels;
    Tape tape;
    Matrix prob;
    double classifier_loss = 0;
    Eigen::Index n_rna = 0;
};

AdversarialPass adversarial_losses(const Discriminator& disc, const Matrix& z_rna, const Matrix& z_spatial);

/** Gradient the encoders receive from the penalty path: the classifier gradient reversed and scaled by kappa. */
struct AdversarialGrad {
    Matrix dz_rna;
    Matrix dz_spatial;
};

/** Accumulates classifier gradients of the mean cross-entropy and returns the reversed encoder gradients. */
AdversarialGrad adversarial_backward(const Discriminator& disc, AdversarialPass& pass, double kappa, NetGradient& classifier_grad);

/**
 * Loss accounting for one step. Encoders and decoders minimize `total()`, i.e. the negative ELBOs plus
 * kappa times the penalty, where the penalty is the negated classifier loss; the discriminator
 * minimizes `classifier_loss`.
 */
struct LossBreakdown {
    double neg_elbo_rna = 0;
    double neg_elbo_spatial = 0;
    double classifier_loss = 0;
    double kappa = 0;

    double adversarial_penalty() const { return -classifier_loss; }
    double total() const { return neg_elbo_rna + neg_elbo_spatial + kappa * adversarial_penalty(); }
};

/**
 * Evaluates the step objective on one minibatch per modality. When `grads` is non-null it is
 * accumulated with the gradient of `total()` for model parameters and of `classifier_loss` for the
 * discriminator.
 */
LossBreakdown compute_loss(const ModelState& state, const Matrix& rna_counts, const Matrix& spatial_counts, NoiseSource& noise,
                           ModelGradients* grads);

struct EpochRecord {
    int epoch = 0;
    double elbo_rna = 0;
    double elbo_spatial = 0;
    double adv_loss = 0;
};

struct TrainOptions {
    /// Called once on the initialized state, before the first step.
    std::function<void(ModelState&)> on_init;
    /// Called after every epoch with the current state.
    std::function<void(int, const ModelState&)> on_epoch;
};

struct TrainResult {
    ModelState state;
    std::vector<EpochRecord> trace;
};

/**
 * Stochastic optimization of both ELBOs with Adam. Every step draws one minibatch per modality
 * (epochs count passes over the larger dataset), updates the model on `total()` and the
 * discriminator on its cross-entropy. Deterministic given `cfg.seed`.
 *
 * `rna` must carry exactly `panel.genes` and `spatial` exactly `panel.spatial_genes()`, in order.
 */
TrainResult train(const CountMatrix& rna, const CountMatrix& spatial, const GenePanel& panel, const GimVIConfig& cfg,
                  const TrainOptions& options = {});

/** Posterior parameters of q(z | x, s) per cell. */
struct Posterior {
    Matrix mu;
    Matrix log_var;
};

/** RNA cells go through the RNA encoder, spatial cells through the spatial encoder. */
Posterior encode(const ModelState& state, const CountMatrix& cells);

void save_checkpoint(const std::filesystem::path& path, const ModelState& state);
ModelState load_checkpoint(const std::filesystem::path& path);

}

#endif
