#ifndef GIMVI_IMPUTATION_HPP
#define GIMVI_IMPUTATION_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gimvi/data_io.hpp"
#include "gimvi/model.hpp"

/**
 * @file imputation.hpp
 * @brief Held-out gene imputation for spatial cells, its uncertainty, and two reference predictors.
 */

namespace gimvi {

/**
 * Imputed frequencies for every (spatial cell, held-out gene): mean and sample variance of the
 * decoded frequency across posterior draws. With a single draw the variance is reported as 0 and
 * `degenerate` is set.
 */
struct ImputationResult {
    std::vector<std::string> cell_ids;
    std::vector<std::string> gene_ids;
    Matrix imputed;     ///< cells x held-out genes
    Matrix uncertainty; ///< cells x held-out genes
    int n_samples = 0;
    bool degenerate = false;
    std::vector<std::pair<double, double>> coordinates;
};

/**
 * Draws `n_samples` latent vectors per spatial cell from q(z | x', s = spatial) and decodes them
 * under `decode_label`. `spatial` must carry exactly the model's spatial panel.
 */
ImputationResult impute(const ModelState& state, const CountMatrix& spatial, int n_samples, Modality decode_label,
                        std::uint64_t seed);

/** Columns `cell_id,gene_id,imputed,uncertainty`, plus `x,y` when coordinates are present. */
void write_imputation_csv(const std::filesystem::path& path, const ImputationResult& result);

/** Per-cell scaling to `scale` total counts followed by log1p; an empty cell stays all-zero. */
Matrix log_normalize(const Matrix& counts, double scale = 1e4);

/**
 * k-NN regression in a joint latent space: each spatial cell receives the mean log-normalized
 * held-out expression of its k = max(1, round(k_frac * n_rna)) nearest RNA cells.
 * Returns spatial cells x held-out genes.
 */
Matrix knn_impute_baseline(const Matrix& rna_embedding, const CountMatrix& rna, const Matrix& spatial_embedding,
                           const GenePanel& panel, double k_frac);

/** How well each held-out gene is linearly predictable from the spatial panel within the RNA data. */
struct Predictability {
    Vector residual; ///< mean squared least-squares residual per held-out gene
    int rank = 0;    ///< rank of the design matrix (intercept included)
    bool rank_deficient = false;
    double condition_number = 0;
};

/**
 * Least squares from the log-normalized spatial-panel genes (plus intercept) to each log-normalized
 * held-out gene over the RNA cells; rank-deficient designs use the minimum-norm solution.
 */
Predictability linreg_predictability(const CountMatrix& rna, const GenePanel& panel);

}

#endif
