#ifndef GIMVI_METRICS_HPP
#define GIMVI_METRICS_HPP

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

/**
 * @file metrics.hpp
 * @brief Integration metrics on latent embeddings and rank-based imputation scores.
 *
 * Embeddings are row-per-cell matrices. All neighbor searches are exact and use squared Euclidean
 * distance with ties broken by ascending cell index.
 */

namespace gimvi {

struct KnnGraph {
    int k = 0;
    std::vector<std::vector<std::size_t>> neighbors; ///< per cell, nearest first; never contains the cell itself
};

KnnGraph build_knn(const Eigen::MatrixXd& points, int k);

/** The `k` nearest rows of `reference` for every row of `queries`, nearest first. */
std::vector<std::vector<std::size_t>> knn_query(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& queries, int k);

/**
 * Negative mean KL(local || global) between the dataset-label distribution of each cell's k-NN
 * neighborhood and the overall label distribution. Local counts are smoothed by adding 1/(k+2) per
 * label. Zero means perfect mixing; more negative means more separated.
 */
double mixing_kl(const Eigen::MatrixXd& embedding, std::span<const int> labels, int k);

/**
 * Mean Jaccard index between each cell's k-NN set in `joint` and in `reference`, with neighbors
 * restricted to cells of the same label. Averaged within each label first, then across labels.
 * `k` is capped at (cells in the label - 1).
 */
double knn_purity_jaccard(const Eigen::MatrixXd& joint, const Eigen::MatrixXd& reference, std::span<const int> labels, int k);

/** 1-based ranks, ties receive the average of the ranks they span. */
std::vector<double> average_ranks(std::span<const double> values);

/** Spearman correlation; empty when either input is constant. */
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);

/** Median of the present values; empty if none. */
std::optional<double> median(std::span<const std::optional<double>> values);

struct RelativeChange {
    std::vector<std::optional<double>> delta; ///< per gene, (method - ref) / |ref|
    std::optional<double> median;
    std::size_t excluded = 0; ///< genes where either score is missing or |ref| < 1e-6
};

RelativeChange relative_change(std::span<const std::optional<double>> method, std::span<const std::optional<double>> reference);

/** {10, 20, 50, 100, 200} clipped to n - 1, without duplicates. */
std::vector<int> default_k_sweep(std::size_t n_cells);

}

#endif
