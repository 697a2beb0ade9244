#ifndef GIMVI_DATA_IO_HPP
#define GIMVI_DATA_IO_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

/**
 * @file data_io.hpp
 * @brief Count matrices, gene panels, file formats and the synthetic-data simulator.
 */

namespace gimvi {

enum class Modality { rna = 0, spatial = 1 };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& name);

/**
 * Cells x genes matrix of non-negative integer-valued counts from one assay.
 * Spatial matrices may carry per-cell (x, y) coordinates.
 */
struct CountMatrix {
    Modality modality = Modality::rna;
    std::vector<std::string> cell_ids;
    std::vector<std::string> gene_ids;
    Eigen::MatrixXd values;
    std::vector<std::pair<double, double>> coordinates;

    std::size_t num_cells() const { return cell_ids.size(); }
    std::size_t num_genes() const { return gene_ids.size(); }
    bool has_coordinates() const { return !coordinates.empty(); }

    /** Throws DataError if any invariant is broken. */
    void validate() const;
};

/** Columns of `m` named by `genes`, in that order; a missing gene is a DataError. */
CountMatrix select_genes(const CountMatrix& m, std::span<const std::string> genes);

/** Rows of `m` at `cells`, in that order. */
CountMatrix select_cells(const CountMatrix& m, std::span<const std::size_t> cells);

enum class CountFormat { dense_csv, triplet };

CountFormat count_format_from_string(const std::string& name);

struct LoadedCounts {
    CountMatrix matrix;
    std::size_t dropped_empty_cells = 0;
};

/**
 * Dense CSV: a header row `cell_id,<gene ids...>`, then one row per cell starting with its id.
 *
 * Triplet: `path` holds a header line `cell gene count` followed by whitespace-separated
 * `<cell index> <gene index> <count>` lines with 0-based indices; ids live in the sidecar files
 * `<path>.cells` and `<path>.genes`, one per line. Unlisted entries are zero.
 *
 * Spatial cells with zero total count are dropped; the number dropped is reported and logged to `log`.
 */
LoadedCounts load_counts(const std::filesystem::path& path, CountFormat format, Modality modality, std::ostream* log = nullptr);

void save_counts(const std::filesystem::path& path, const CountMatrix& m, CountFormat format);

/** Attaches coordinates from a CSV with header `cell_id,x,y`; every cell of `m` must be listed. */
void load_coordinates(const std::filesystem::path& path, CountMatrix& m);

/**
 * Gene universe G (the scRNA-seq genes, in matrix column order), the spatial training panel G'
 * and the held-out genes removed from the spatial panel for evaluation. Indices refer to `genes`.
 */
struct GenePanel {
    std::vector<std::string> genes;
    std::vector<std::size_t> spatial;
    std::vector<std::size_t> held_out;
    std::uint64_t seed = 0;

    std::vector<std::string> spatial_genes() const;
    std::vector<std::string> held_out_genes() const;
    void validate() const;
};

nlohmann::json to_json(const GenePanel& panel);
GenePanel panel_from_json(const nlohmann::json& j);

/**
 * Hold out round(fraction * |spatial panel|) genes chosen uniformly at random.
 * Every spatial panel gene must exist in `rna_genes`; otherwise a DataError lists the missing ids.
 */
GenePanel make_holdout(std::span<const std::string> spatial_panel, std::span<const std::string> rna_genes, double fraction,
                       std::uint64_t seed);

struct SimulationConfig {
    std::size_t n_rna = 1000;
    std::size_t n_spatial = 1000;
    std::size_t n_genes = 100;
    std::size_t n_spatial_genes = 30;
    std::size_t n_clusters = 4;
    double shift_strength = 0.5;
    std::uint64_t seed = 0;
    std::size_t latent_dim = 10;
    double rna_library_per_gene = 20.0;
    double spatial_library_per_gene = 15.0;
    double library_log_sd = 0.3;
};

/** Ground truth behind a simulated pair of datasets. */
struct SimulationTruth {
    Eigen::MatrixXd z_rna;
    Eigen::MatrixXd z_spatial;
    Eigen::MatrixXd rho_rna;     ///< cells x G, frequencies used for the RNA cells
    Eigen::MatrixXd rho_spatial; ///< cells x G, shifted frequencies for the spatial cells
    std::vector<int> cluster_rna;
    std::vector<int> cluster_spatial;
    Eigen::VectorXd library_rna;
    Eigen::VectorXd library_spatial;
    Eigen::VectorXd gene_baseline;
    Eigen::VectorXd gene_shift;
    Eigen::VectorXd inv_dispersion;
    Eigen::VectorXd dropout_logit;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const SimulationTruth& t);
SimulationTruth truth_from_json(const nlohmann::json& j);

struct SimulatedData {
    CountMatrix rna;
    CountMatrix spatial; ///< full spatial panel, before any holdout
    GenePanel panel;     ///< G and the full spatial panel; `held_out` is empty
    SimulationTruth truth;
};

/**
 * Samples a dataset pair from the generative process: z from a Gaussian mixture, frequencies from a
 * random softmax decoder with a modality-dependent per-gene logit shift of size `shift_strength`,
 * RNA counts from ZINB with log-normal library sizes and spatial counts from Poisson on the
 * renormalized spatial panel.
 */
SimulatedData simulate(const SimulationConfig& cfg);

/** Shortest decimal representation that round-trips; integers print without a decimal point. */
std::string format_number(double v);

}

#endif
