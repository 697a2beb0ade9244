#include "gimvi/imputation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "gimvi/errors.hpp"
#include "gimvi/metrics.hpp"

namespace gimvi {

ImputationResult impute(const ModelState& state, const CountMatrix& spatial, int n_samples, Modality decode_label,
                        std::uint64_t seed) {
    require(n_samples >= 1, "impute: n_samples must be >= 1");
    require(!state.panel.held_out.empty(), "impute: the gene panel has no held-out genes");
    if (spatial.modality != Modality::spatial) {
        throw DataError("impute: cells must come from the spatial modality");
    }
    const Posterior post = encode(state, spatial);
    const auto n_cells = static_cast<Eigen::Index>(spatial.num_cells());
    const auto n_held = static_cast<Eigen::Index>(state.panel.held_out.size());

    ImputationResult res;
    res.cell_ids = spatial.cell_ids;
    res.gene_ids = state.panel.held_out_genes();
    res.coordinates = spatial.coordinates;
    res.n_samples = n_samples;
    res.degenerate = n_samples == 1;

    // Welford accumulation over draws.
    Matrix mean = Matrix::Zero(n_cells, n_held);
    Matrix m2 = Matrix::Zero(n_cells, n_held);
    Rng rng = make_rng(seed);
    NoiseSource noise(rng);
    for (int s = 1; s <= n_samples; ++s) {
        const GaussianSample draw = reparam_gaussian(post.mu, post.log_var, noise);
        const Matrix rho = decode_rho(state.gen, draw.sample, decode_label);
        for (Eigen::Index j = 0; j < n_held; ++j) {
            const auto g = static_cast<Eigen::Index>(state.panel.held_out[static_cast<std::size_t>(j)]);
            for (Eigen::Index n = 0; n < n_cells; ++n) {
                const double x = rho(n, g);
                const double delta = x - mean(n, j);
                mean(n, j) += delta / s;
                m2(n, j) += delta * (x - mean(n, j));
            }
        }
    }
    res.imputed = mean;
    res.uncertainty = n_samples > 1 ? Matrix(m2 / (n_samples - 1)) : Matrix::Zero(n_cells, n_held);
    res.uncertainty = res.uncertainty.cwiseMax(0.0);
    return res;
}

void write_imputation_csv(const std::filesystem::path& path, const ImputationResult& r) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    const bool coords = !r.coordinates.empty();
    out << "cell_id,gene_id,imputed,uncertainty" << (coords ? ",x,y" : "") << '\n';
    for (std::size_t n = 0; n < r.cell_ids.size(); ++n) {
        for (std::size_t j = 0; j < r.gene_ids.size(); ++j) {
            const auto ni = static_cast<Eigen::Index>(n);
            const auto ji = static_cast<Eigen::Index>(j);
            out << r.cell_ids[n] << ',' << r.gene_ids[j] << ',' << format_number(r.imputed(ni, ji)) << ','
                << format_number(r.uncertainty(ni, ji));
            if (coords) {
                out << ',' << format_number(r.coordinates[n].first) << ',' << format_number(r.coordinates[n].second);
            }
            out << '\n';
        }
    }
    if (!out) {
        throw std::runtime_error("failed writing '" + path.string() + "'");
    }
}

Matrix log_normalize(const Matrix& counts, double scale) {
    Matrix out(counts.rows(), counts.cols());
    for (Eigen::Index n = 0; n < counts.rows(); ++n) {
        const double total = counts.row(n).sum();
        if (total <= 0) {
            out.row(n).setZero();
            continue;
        }
        out.row(n) = (counts.row(n).array() * (scale / total)).log1p();
    }
    return out;
}

Matrix knn_impute_baseline(const Matrix& rna_embedding, const CountMatrix& rna, const Matrix& spatial_embedding,
                           const GenePanel& panel, double k_frac) {
    require(k_frac > 0 && k_frac < 1, "knn_impute_baseline: k_frac must lie in (0, 1)");
    require(rna.num_cells() > 0 && rna_embedding.rows() > 0, "knn_impute_baseline: no RNA cells");
    require(rna_embedding.rows() == static_cast<Eigen::Index>(rna.num_cells()), "knn_impute_baseline: RNA embedding/cell count mismatch");
    require(!panel.held_out.empty(), "knn_impute_baseline: no held-out genes");
    if (rna.gene_ids != panel.genes) {
        throw DataError("knn_impute_baseline: RNA matrix genes do not match the gene panel");
    }
    const auto n_rna = static_cast<double>(rna.num_cells());
    const int k = std::max(1, static_cast<int>(std::llround(k_frac * n_rna)));

    const Matrix normalized = log_normalize(rna.values);
    const auto neighbors = knn_query(rna_embedding, spatial_embedding, k);
    Matrix out = Matrix::Zero(spatial_embedding.rows(), static_cast<Eigen::Index>(panel.held_out.size()));
    for (std::size_t q = 0; q < neighbors.size(); ++q) {
        for (auto r : neighbors[q]) {
            for (std::size_t j = 0; j < panel.held_out.size(); ++j) {
                out(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(j)) +=
                    normalized(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(panel.held_out[j]));
            }
        }
    }
    return out / static_cast<double>(k);
}

Predictability linreg_predictability(const CountMatrix& rna, const GenePanel& panel) {
    if (rna.gene_ids != panel.genes) {
        throw DataError("linreg_predictability: RNA matrix genes do not match the gene panel");
    }
    require(!panel.held_out.empty(), "linreg_predictability: no held-out genes");
    const auto n = static_cast<Eigen::Index>(rna.num_cells());
    const auto p = static_cast<Eigen::Index>(panel.spatial.size());
    require(n >= p + 1, "linreg_predictability: need at least |G'| + 1 RNA cells");

    const Matrix normalized = log_normalize(rna.values);
    Matrix design(n, p + 1);
    design.col(0).setOnes();
    for (Eigen::Index j = 0; j < p; ++j) {
        design.col(j + 1) = normalized.col(static_cast<Eigen::Index>(panel.spatial[static_cast<std::size_t>(j)]));
    }
    Matrix target(n, static_cast<Eigen::Index>(panel.held_out.size()));
    for (std::size_t j = 0; j < panel.held_out.size(); ++j) {
        target.col(static_cast<Eigen::Index>(j)) = normalized.col(static_cast<Eigen::Index>(panel.held_out[j]));
    }

    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(design);
    const Matrix coef = cod.solve(target);
    const Matrix resid = target - design * coef;

    Predictability out;
    out.residual = resid.array().square().colwise().mean().transpose();
    out.rank = static_cast<int>(cod.rank());
    out.rank_deficient = cod.rank() < design.cols();
    const Vector sv = Eigen::JacobiSVD<Matrix>(design).singularValues();
    out.condition_number = sv(sv.size() - 1) > 0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<double>::infinity();
    return out;
}

}
