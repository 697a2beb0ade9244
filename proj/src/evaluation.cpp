#include "gimvi/evaluation.hpp"

#include <fstream>

#include "gimvi/errors.hpp"

namespace gimvi {

namespace {

std::vector<double> column(const Matrix& m, Eigen::Index j) {
    std::vector<double> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        out[static_cast<std::size_t>(i)] = m(i, j);
    }
    return out;
}

std::vector<std::optional<double>> per_gene_spearman(const Matrix& pred, const Matrix& truth) {
    std::vector<std::optional<double>> out;
    for (Eigen::Index j = 0; j < truth.cols(); ++j) {
        out.push_back(spearman(column(pred, j), column(truth, j)));
    }
    return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    return out;
}

std::string optional_number(const std::optional<double>& v) {
    return v ? format_number(*v) : std::string();
}

nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}

Experiment apply_panel(const CountMatrix& rna, const CountMatrix& spatial_full, const GenePanel& panel) {
    panel.validate();
    if (rna.modality != Modality::rna || spatial_full.modality != Modality::spatial) {
        throw DataError("apply_panel: expected one RNA and one spatial matrix");
    }
    Experiment exp;
    exp.panel = panel;
    exp.rna = select_genes(rna, panel.genes);
    exp.spatial = select_genes(spatial_full, panel.spatial_genes());
    exp.held_out = select_genes(spatial_full, panel.held_out_genes());
    return exp;
}

Experiment prepare_experiment(const CountMatrix& rna, const CountMatrix& spatial_full, double holdout_fraction,
                              std::uint64_t seed) {
    const GenePanel panel = make_holdout(spatial_full.gene_ids, rna.gene_ids, holdout_fraction, seed);
    return apply_panel(rna, spatial_full, panel);
}

Matrix truth_frequencies(const SimulationTruth& truth, const GenePanel& panel) {
    require(truth.rho_spatial.cols() == static_cast<Eigen::Index>(panel.genes.size()),
            "truth_frequencies: truth does not cover the gene panel");
    Matrix out(truth.rho_spatial.rows(), static_cast<Eigen::Index>(panel.held_out.size()));
    for (std::size_t j = 0; j < panel.held_out.size(); ++j) {
        out.col(static_cast<Eigen::Index>(j)) = truth.rho_spatial.col(static_cast<Eigen::Index>(panel.held_out[j]));
    }
    return out;
}

Matrix truth_counts(const Experiment& exp) {
    return exp.held_out.values;
}

JointEmbedding joint_embedding(const ModelState& state, const Experiment& exp) {
    const Matrix a = encode(state, exp.rna).mu;
    const Matrix b = encode(state, exp.spatial).mu;
    JointEmbedding e;
    e.points.resize(a.rows() + b.rows(), a.cols());
    e.points << a, b;
    e.labels.assign(static_cast<std::size_t>(a.rows()), 0);
    e.labels.resize(static_cast<std::size_t>(e.points.rows()), 1);
    return e;
}

Matrix reference_embedding(const ModelState& rna_only, const ModelState& spatial_only, const Experiment& exp) {
    const Matrix a = encode(rna_only, exp.rna).mu;
    const Matrix b = encode(spatial_only, exp.spatial).mu;
    require(a.cols() == b.cols(), "reference_embedding: reference models differ in latent dimension");
    Matrix out(a.rows() + b.rows(), a.cols());
    out << a, b;
    return out;
}

std::pair<ModelState, ModelState> train_reference_models(const Experiment& exp, GimVIConfig cfg) {
    cfg.kappa = 0;
    cfg.mode = TrainMode::rna_only;
    ModelState rna_only = train(exp.rna, exp.spatial, exp.panel, cfg).state;
    cfg.mode = TrainMode::spatial_only;
    ModelState spatial_only = train(exp.rna, exp.spatial, exp.panel, cfg).state;
    return {std::move(rna_only), std::move(spatial_only)};
}

std::vector<GeneRow> EvalReport::gene_rows() const {
    std::vector<GeneRow> rows;
    for (std::size_t g = 0; g < genes.size(); ++g) {
        rows.push_back({genes[g], "gimvi", spearman_model[g], spearman_model[g] && std::abs(*spearman_model[g]) >= 1e-6
                                                                  ? std::optional<double>(0.0)
                                                                  : std::nullopt});
        rows.push_back({genes[g], "knn", spearman_knn[g], knn_vs_model.delta[g]});
    }
    return rows;
}

EvalReport evaluate(const ModelState& state, const Experiment& exp, const Matrix& truth, const EvalOptions& options,
                    const Matrix* reference) {
    const auto n_held = static_cast<Eigen::Index>(exp.panel.held_out.size());
    if (truth.rows() != static_cast<Eigen::Index>(exp.spatial.num_cells()) || truth.cols() != n_held) {
        throw DataError("evaluate: truth must be spatial cells x held-out genes");
    }
    if (state.panel.genes != exp.panel.genes || state.panel.spatial != exp.panel.spatial ||
        state.panel.held_out != exp.panel.held_out) {
        throw DataError("evaluate: the model was trained on a different gene panel");
    }

    EvalReport r;
    r.genes = exp.panel.held_out_genes();
    const ImputationResult imp = impute(state, exp.spatial, options.n_samples, options.decode_label, options.seed);
    const JointEmbedding joint = joint_embedding(state, exp);
    const Matrix rna_points = joint.points.topRows(static_cast<Eigen::Index>(exp.rna.num_cells()));
    const Matrix spatial_points = joint.points.bottomRows(static_cast<Eigen::Index>(exp.spatial.num_cells()));
    const Matrix knn = knn_impute_baseline(rna_points, exp.rna, spatial_points, exp.panel, options.knn_fraction);

    r.spearman_model = per_gene_spearman(imp.imputed, truth);
    r.spearman_knn = per_gene_spearman(knn, truth);
    r.median_model = median(r.spearman_model);
    r.median_knn = median(r.spearman_knn);
    r.knn_vs_model = relative_change(r.spearman_knn, r.spearman_model);
    r.uncertainty = imp.uncertainty.colwise().mean().transpose();
    r.linreg = linreg_predictability(exp.rna, exp.panel);
    if (n_held >= 3) {
        const std::vector<double> u(r.uncertainty.data(), r.uncertainty.data() + r.uncertainty.size());
        const std::vector<double> res(r.linreg.residual.data(), r.linreg.residual.data() + r.linreg.residual.size());
        r.uncertainty_vs_residual = spearman(u, res);
    }

    const std::vector<int> ks = options.k_sweep.empty() ? default_k_sweep(static_cast<std::size_t>(joint.points.rows()))
                                                        : options.k_sweep;
    for (int k : ks) {
        r.metrics.push_back({"mixing_kl", k, mixing_kl(joint.points, joint.labels, k)});
    }
    if (reference) {
        for (int k : ks) {
            r.metrics.push_back({"knn_purity", k, knn_purity_jaccard(joint.points, *reference, joint.labels, k)});
        }
    }
    return r;
}

void write_metrics_csv(const std::filesystem::path& path, const EvalReport& report) {
    auto out = open_out(path);
    out << "metric,k,value\n";
    for (const auto& m : report.metrics) {
        out << m.metric << ',' << m.k << ',' << format_number(m.value) << '\n';
    }
    out << "median_spearman_gimvi,," << optional_number(report.median_model) << '\n';
    out << "median_spearman_knn,," << optional_number(report.median_knn) << '\n';
    out << "median_delta_knn,," << optional_number(report.knn_vs_model.median) << '\n';
    out << "uncertainty_vs_linreg_residual,," << optional_number(report.uncertainty_vs_residual) << '\n';
}

void write_genes_csv(const std::filesystem::path& path, const EvalReport& report) {
    auto out = open_out(path);
    out << "gene_id,method,spearman,delta\n";
    for (const auto& row : report.gene_rows()) {
        out << row.gene << ',' << row.method << ',' << optional_number(row.spearman) << ',' << optional_number(row.delta)
            << '\n';
    }
    for (std::size_t g = 0; g < report.genes.size(); ++g) {
        const auto gi = static_cast<Eigen::Index>(g);
        out << report.genes[g] << ",linreg_residual," << format_number(report.linreg.residual(gi)) << ",\n";
        out << report.genes[g] << ",uncertainty," << format_number(report.uncertainty(gi)) << ",\n";
    }
}

nlohmann::json to_json(const EvalReport& report) {
    nlohmann::json genes = nlohmann::json::array();
    for (const auto& row : report.gene_rows()) {
        genes.push_back({{"gene_id", row.gene},
                         {"method", row.method},
                         {"spearman", optional_json(row.spearman)},
                         {"delta", optional_json(row.delta)}});
    }
    nlohmann::json metrics = nlohmann::json::array();
    for (const auto& m : report.metrics) {
        metrics.push_back({{"metric", m.metric}, {"k", m.k}, {"value", m.value}});
    }
    return {{"genes", genes},
            {"metrics", metrics},
            {"median_spearman_gimvi", optional_json(report.median_model)},
            {"median_spearman_knn", optional_json(report.median_knn)},
            {"median_delta_knn", optional_json(report.knn_vs_model.median)},
            {"excluded_genes", report.knn_vs_model.excluded},
            {"uncertainty_vs_linreg_residual", optional_json(report.uncertainty_vs_residual)},
            {"linreg_rank_deficient", report.linreg.rank_deficient},
            {"linreg_condition_number", report.linreg.condition_number}};
}

}
