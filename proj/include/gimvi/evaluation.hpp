#ifndef GIMVI_EVALUATION_HPP
#define GIMVI_EVALUATION_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gimvi/data_io.hpp"
#include "gimvi/imputation.hpp"
#include "gimvi/metrics.hpp"
#include "gimvi/model.hpp"

namespace gimvi {

/** RNA data over G, spatial data restricted to the training panel, and the held-out spatial counts. */
struct Experiment {
    CountMatrix rna;
    CountMatrix spatial;
    CountMatrix held_out;
    GenePanel panel;
};

/**
 * Aligns `rna` and `spatial_full` (the complete spatial panel) to `panel`. The RNA columns are
 * reordered to `panel.genes`.
 */
Experiment apply_panel(const CountMatrix& rna, const CountMatrix& spatial_full, const GenePanel& panel);

/** Draws a holdout split over the spatial panel, then aligns both datasets to it. */
Experiment prepare_experiment(const CountMatrix& rna, const CountMatrix& spatial_full, double holdout_fraction,
                              std::uint64_t seed);

/** Spatial cells x held-out genes: the true frequencies of a simulated dataset. */
Matrix truth_frequencies(const SimulationTruth& truth, const GenePanel& panel);

/** Spatial cells x held-out genes: the held-out counts themselves. */
Matrix truth_counts(const Experiment& exp);

/** Posterior means of RNA cells followed by spatial cells, with labels 0 and 1. */
struct JointEmbedding {
    Matrix points;
    std::vector<int> labels;
};

JointEmbedding joint_embedding(const ModelState& state, const Experiment& exp);

/**
 * Per-dataset reference embedding for purity: RNA cells from a model trained on RNA alone,
 * spatial cells from a model trained on spatial data alone.
 */
Matrix reference_embedding(const ModelState& rna_only, const ModelState& spatial_only, const Experiment& exp);

/** Trains the two single-dataset models with `cfg` (its mode is overridden). */
std::pair<ModelState, ModelState> train_reference_models(const Experiment& exp, GimVIConfig cfg);

struct EvalOptions {
    int n_samples = 50;
    double knn_fraction = 0.05;
    Modality decode_label = Modality::rna;
    std::uint64_t seed = 0;
    std::vector<int> k_sweep; ///< empty selects the default sweep for the number of cells
};

struct MetricRow {
    std::string metric;
    int k = 0;
    double value = 0;
};

struct GeneRow {
    std::string gene;
    std::string method;
    std::optional<double> spearman;
    std::optional<double> delta; ///< relative change against the model
};

struct EvalReport {
    std::vector<std::string> genes;
    std::vector<std::optional<double>> spearman_model;
    std::vector<std::optional<double>> spearman_knn;
    Vector uncertainty;       ///< per held-out gene, mean posterior variance over cells
    Predictability linreg;
    RelativeChange knn_vs_model;
    std::optional<double> median_model;
    std::optional<double> median_knn;
    std::optional<double> uncertainty_vs_residual;
    std::vector<MetricRow> metrics;

    std::vector<GeneRow> gene_rows() const;
};

/**
 * Scores the model's imputation and the k-NN baseline against `truth` (spatial cells x held-out
 * genes) and computes mixing over the k sweep, plus purity when `reference` is given.
 */
EvalReport evaluate(const ModelState& state, const Experiment& exp, const Matrix& truth, const EvalOptions& options,
                    const Matrix* reference = nullptr);

/** `metric,k,value` rows. */
void write_metrics_csv(const std::filesystem::path& path, const EvalReport& report);

/** `gene_id,method,spearman,delta` rows; missing scores are left empty. */
void write_genes_csv(const std::filesystem::path& path, const EvalReport& report);

nlohmann::json to_json(const EvalReport& report);

}

#endif
