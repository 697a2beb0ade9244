#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "gimvi/errors.hpp"
#include "gimvi/evaluation.hpp"
#include "gimvi/imputation.hpp"
#include "gimvi/metrics.hpp"
#include "test_support.hpp"
#include "toy_model.hpp"

using namespace gimvi;

namespace {

CountMatrix make_counts(Modality m, const Matrix& values, std::vector<std::string> genes) {
    CountMatrix c;
    c.modality = m;
    c.values = values;
    c.gene_ids = std::move(genes);
    for (Eigen::Index n = 0; n < values.rows(); ++n) {
        c.cell_ids.push_back((m == Modality::rna ? "r" : "s") + std::to_string(n));
    }
    return c;
}

CountMatrix toy_spatial_cells(const testing::Toy& toy) {
    return make_counts(Modality::spatial, toy.spatial, toy.state.panel.spatial_genes());
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
    Rng rng = make_rng(seed);
    std::normal_distribution<double> n01;
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = scale * n01(rng);
    }
    return m;
}

// Panel of n_obs observed genes, n_hidden held-out genes and one filler gene that brings every cell
// total to 1e4, so that the log-normalized value of a count c is exactly log1p(c).
struct LinregCase {
    CountMatrix rna;
    GenePanel panel;
};

LinregCase linreg_case(const Matrix& observed_log, const Matrix& hidden_log) {
    const Eigen::Index n = observed_log.rows();
    const Eigen::Index p = observed_log.cols();
    const Eigen::Index h = hidden_log.cols();
    Matrix counts(n, p + h + 1);
    counts.leftCols(p) = observed_log.array().exp() - 1;
    counts.middleCols(p, h) = hidden_log.array().exp() - 1;
    for (Eigen::Index i = 0; i < n; ++i) {
        counts(i, p + h) = 1e4 - counts.row(i).head(p + h).sum();
    }
    LinregCase out;
    for (Eigen::Index g = 0; g < p + h + 1; ++g) {
        out.panel.genes.push_back("g" + std::to_string(g));
    }
    for (Eigen::Index g = 0; g < p; ++g) {
        out.panel.spatial.push_back(static_cast<std::size_t>(g));
    }
    for (Eigen::Index g = 0; g < h; ++g) {
        out.panel.held_out.push_back(static_cast<std::size_t>(p + g));
    }
    out.rna = make_counts(Modality::rna, counts, out.panel.genes);
    return out;
}

}

TEST_CASE("impute: one sample is flagged degenerate with zero variance") {
    testing::Toy toy = testing::make_toy();
    const ImputationResult r = impute(toy.state, toy_spatial_cells(toy), 1, Modality::rna, 3);
    CHECK(r.degenerate);
    CHECK(r.n_samples == 1);
    CHECK(r.uncertainty.cwiseAbs().maxCoeff() == 0);
    CHECK(!impute(toy.state, toy_spatial_cells(toy), 2, Modality::rna, 3).degenerate);
}

TEST_CASE("impute: shape, ids and ranges") {
    testing::Toy toy = testing::make_toy();
    const ImputationResult r = impute(toy.state, toy_spatial_cells(toy), 50, Modality::rna, 3);
    CHECK(r.imputed.rows() == 5);
    CHECK(r.imputed.cols() == 2);
    CHECK(r.gene_ids == toy.state.panel.held_out_genes());
    CHECK(r.imputed.minCoeff() >= 0);
    CHECK(r.imputed.maxCoeff() <= 1);
    CHECK(r.uncertainty.minCoeff() >= 0);
    CHECK(r.uncertainty.maxCoeff() > 0);
}

TEST_CASE("impute: mean and variance of the decoded held-out frequencies") {
    testing::Toy toy = testing::make_toy();
    const ModelState& s = toy.state;
    const CountMatrix cells = toy_spatial_cells(toy);
    const ImputationResult r = impute(s, cells, 20000, Modality::rna, 4);
    // Independent draws from the same posterior.
    const Posterior q = encode(s, cells);
    Rng rng = make_rng(99);
    std::normal_distribution<double> n01;
    for (Eigen::Index n = 0; n < 2; ++n) {
        std::vector<double> xs;
        for (int i = 0; i < 20000; ++i) {
            Matrix z(1, 2);
            for (int k = 0; k < 2; ++k) {
                z(0, k) = q.mu(n, k) + std::exp(0.5 * q.log_var(n, k)) * n01(rng);
            }
            xs.push_back(decode_rho(s.gen, z, Modality::rna)(0, static_cast<Eigen::Index>(s.panel.held_out[0])));
        }
        const auto m = testing::moments(xs);
        CHECK(std::abs(r.imputed(n, 0) - m.mean) <= 4 * std::sqrt(2.0) * m.mean_se);
        CHECK(std::abs(r.uncertainty(n, 0) - m.var) <= 4 * std::sqrt(2.0) * m.var_se);
    }
}

TEST_CASE("impute: collapsed posterior gives zero uncertainty and the decoded point") {
    testing::Toy toy = testing::make_toy();
    auto& head = toy.state.var.shared_head.layer(0);
    head.weight.setZero();
    head.bias << 0.3, -0.4, -60, -60;
    const ImputationResult r = impute(toy.state, toy_spatial_cells(toy), 50, Modality::spatial, 1);
    CHECK(r.uncertainty.maxCoeff() < 1e-20);
    const Matrix rho = decode_rho(toy.state.gen, (Matrix(1, 2) << 0.3, -0.4).finished(), Modality::spatial);
    for (Eigen::Index j = 0; j < 2; ++j) {
        const double expected = rho(0, static_cast<Eigen::Index>(toy.state.panel.held_out[static_cast<std::size_t>(j)]));
        CHECK(std::abs(r.imputed(0, j) - expected) < 1e-10);
    }
}

TEST_CASE("impute: contract and data errors") {
    testing::Toy toy = testing::make_toy();
    CHECK_THROWS_AS(impute(toy.state, toy_spatial_cells(toy), 0, Modality::rna, 1), ContractViolation);
    CountMatrix rna = make_counts(Modality::rna, toy.rna, toy.state.panel.genes);
    CHECK_THROWS_AS(impute(toy.state, rna, 5, Modality::rna, 1), DataError);
    ModelState no_holdout = toy.state;
    no_holdout.panel.held_out.clear();
    CHECK_THROWS_AS(impute(no_holdout, toy_spatial_cells(toy), 5, Modality::rna, 1), ContractViolation);
}

TEST_CASE("impute: a held-out copy of an observed gene is recovered; 50 vs 100 samples agree") {
    SimulationConfig sc;
    sc.n_rna = 500;
    sc.n_spatial = 500;
    sc.seed = 21;
    const SimulatedData sim = simulate(sc);
    Experiment exp = prepare_experiment(sim.rna, sim.spatial, 0.25, 21);

    // Append a copy of the most expressed observed gene to the RNA data and hold it out.
    Eigen::Index column = 0;
    exp.spatial.values.colwise().sum().maxCoeff(&column);
    const std::size_t source = exp.panel.spatial[static_cast<std::size_t>(column)];
    exp.panel.genes.push_back("copy");
    exp.panel.held_out.push_back(exp.panel.genes.size() - 1);
    exp.rna.gene_ids = exp.panel.genes;
    exp.rna.values.conservativeResize(Eigen::NoChange, exp.rna.values.cols() + 1);
    exp.rna.values.rightCols(1) = exp.rna.values.col(static_cast<Eigen::Index>(source));

    GimVIConfig cfg;
    cfg.epochs = 50;
    cfg.seed = 21;
    const TrainResult r = train(exp.rna, exp.spatial, exp.panel, cfg);
    const ImputationResult a = impute(r.state, exp.spatial, 50, Modality::rna, 5);
    const ImputationResult b = impute(r.state, exp.spatial, 100, Modality::rna, 6);

    const Vector truth = sim.truth.rho_spatial.col(static_cast<Eigen::Index>(source));
    const Eigen::Index copy = a.imputed.cols() - 1;
    const Vector imputed = a.imputed.col(copy);
    const auto rho = spearman(std::span<const double>(imputed.data(), imputed.size()), std::span<const double>(truth.data(), truth.size()));
    REQUIRE(rho.has_value());
    CHECK(*rho >= 0.8);

    // Per-gene Spearman against truth at both sample sizes.
    GenePanel simulated = exp.panel;
    simulated.genes.pop_back();
    simulated.held_out.pop_back();
    const Matrix tf = truth_frequencies(sim.truth, simulated);
    std::vector<double> changes;
    for (Eigen::Index j = 0; j < tf.cols(); ++j) {
        const Vector t = tf.col(j);
        const Vector x = a.imputed.col(j);
        const Vector y = b.imputed.col(j);
        const auto sa = spearman(std::span<const double>(x.data(), x.size()), std::span<const double>(t.data(), t.size()));
        const auto sb = spearman(std::span<const double>(y.data(), y.size()), std::span<const double>(t.data(), t.size()));
        if (sa && sb) {
            changes.push_back(std::abs(*sa - *sb));
        }
    }
    REQUIRE(!changes.empty());
    std::sort(changes.begin(), changes.end());
    CHECK(changes[changes.size() / 2] < 0.02);
}

TEST_CASE("imputation CSV has one row per cell and held-out gene") {
    testing::Toy toy = testing::make_toy();
    CountMatrix cells = toy_spatial_cells(toy);
    ImputationResult r = impute(toy.state, cells, 10, Modality::rna, 3);
    const auto path = std::filesystem::temp_directory_path() / "gimvi_test_imputation.csv";
    write_imputation_csv(path, r);
    std::ifstream in(path);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) {
        lines.push_back(line);
    }
    REQUIRE(lines.size() == 1 + 5 * 2);
    CHECK(lines[0] == "cell_id,gene_id,imputed,uncertainty");
    CHECK(lines[1].rfind("s0,g1,", 0) == 0);
    CHECK(lines[2].rfind("s0,g7,", 0) == 0);

    r.coordinates.assign(5, {1.5, -2.0});
    write_imputation_csv(path, r);
    std::ifstream in2(path);
    std::getline(in2, line);
    CHECK(line == "cell_id,gene_id,imputed,uncertainty,x,y");
    std::getline(in2, line);
    CHECK(line.substr(line.size() - 7) == ",1.5,-2");
    std::filesystem::remove(path);
}

TEST_CASE("log_normalize: counts per total then log1p") {
    const Matrix counts = (Matrix(2, 3) << 1, 3, 0, 0, 0, 0).finished();
    const Matrix out = log_normalize(counts, 100);
    CHECK(out(0, 0) == doctest::Approx(std::log1p(25.0)).epsilon(1e-14));
    CHECK(out(0, 1) == doctest::Approx(std::log1p(75.0)).epsilon(1e-14));
    CHECK(out(0, 2) == 0);
    CHECK(out.row(1).cwiseAbs().maxCoeff() == 0);
}

namespace {

struct KnnCase {
    Matrix rna_emb;
    Matrix spatial_emb;
    CountMatrix rna;
    GenePanel panel;
};

KnnCase knn_case(std::uint64_t seed, Eigen::Index n_rna = 40, Eigen::Index n_spatial = 15) {
    KnnCase c;
    c.rna_emb = random_matrix(n_rna, 3, seed);
    c.spatial_emb = random_matrix(n_spatial, 3, seed + 1);
    Rng rng = make_rng(seed + 2);
    Matrix counts(n_rna, 6);
    for (Eigen::Index i = 0; i < counts.size(); ++i) {
        counts.data()[i] = static_cast<double>(std::poisson_distribution<int>(4.0)(rng));
    }
    counts.col(0).array() += 1;
    c.panel.genes = {"a", "b", "c", "d", "e", "f"};
    c.panel.spatial = {0, 2, 3};
    c.panel.held_out = {1, 5};
    c.rna = make_counts(Modality::rna, counts, c.panel.genes);
    return c;
}

Matrix brute_force_knn_baseline(const KnnCase& c, int k) {
    const Matrix norm = log_normalize(c.rna.values);
    Matrix out = Matrix::Zero(c.spatial_emb.rows(), static_cast<Eigen::Index>(c.panel.held_out.size()));
    for (Eigen::Index q = 0; q < c.spatial_emb.rows(); ++q) {
        std::vector<std::pair<double, Eigen::Index>> d;
        for (Eigen::Index r = 0; r < c.rna_emb.rows(); ++r) {
            d.emplace_back((c.rna_emb.row(r) - c.spatial_emb.row(q)).squaredNorm(), r);
        }
        std::sort(d.begin(), d.end());
        for (int i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < c.panel.held_out.size(); ++j) {
                out(q, static_cast<Eigen::Index>(j)) += norm(d[static_cast<std::size_t>(i)].second, static_cast<Eigen::Index>(c.panel.held_out[j])) / k;
            }
        }
    }
    return out;
}

}

TEST_CASE("knn baseline: k equal to every RNA cell gives the global mean") {
    const KnnCase c = knn_case(1);
    const Matrix out = knn_impute_baseline(c.rna_emb, c.rna, c.spatial_emb, c.panel, 0.99);
    const Matrix norm = log_normalize(c.rna.values);
    for (Eigen::Index j = 0; j < 2; ++j) {
        const double mean = norm.col(static_cast<Eigen::Index>(c.panel.held_out[static_cast<std::size_t>(j)])).mean();
        CHECK((out.col(j).array() - mean).abs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("knn baseline: k=1 on a coincident latent returns that RNA cell") {
    KnnCase c = knn_case(2);
    c.spatial_emb.row(4) = c.rna_emb.row(17);
    const Matrix out = knn_impute_baseline(c.rna_emb, c.rna, c.spatial_emb, c.panel, 0.02);
    const Matrix norm = log_normalize(c.rna.values);
    CHECK(out(4, 0) == norm(17, 1));
    CHECK(out(4, 1) == norm(17, 5));
}

TEST_CASE("knn baseline: matches an exhaustive-distance oracle") {
    for (std::uint64_t seed = 3; seed < 8; ++seed) {
        const KnnCase c = knn_case(seed);
        const Matrix out = knn_impute_baseline(c.rna_emb, c.rna, c.spatial_emb, c.panel, 0.1);
        CHECK((out - brute_force_knn_baseline(c, 4)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("knn baseline: invariant under a rigid rotation of the latent space") {
    const KnnCase c = knn_case(9);
    const Matrix q = Eigen::HouseholderQR<Matrix>(random_matrix(3, 3, 10)).householderQ();
    const Vector shift = random_matrix(3, 1, 11).col(0);
    const Matrix a = knn_impute_baseline(c.rna_emb, c.rna, c.spatial_emb, c.panel, 0.1);
    const Matrix rr = (c.rna_emb * q).rowwise() + shift.transpose();
    const Matrix rs = (c.spatial_emb * q).rowwise() + shift.transpose();
    const Matrix b = knn_impute_baseline(rr, c.rna, rs, c.panel, 0.1);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("knn baseline: argument checks") {
    const KnnCase c = knn_case(12);
    CHECK_THROWS_AS(knn_impute_baseline(c.rna_emb, c.rna, c.spatial_emb, c.panel, 0.0), ContractViolation);
    CHECK_THROWS_AS(knn_impute_baseline(c.rna_emb, c.rna, c.spatial_emb, c.panel, 1.0), ContractViolation);
    CountMatrix empty = c.rna;
    empty.values.resize(0, 6);
    empty.cell_ids.clear();
    CHECK_THROWS_AS(knn_impute_baseline(Matrix(0, 3), empty, c.spatial_emb, c.panel, 0.1), ContractViolation);
}

TEST_CASE("linreg: exact linear combination of observed genes has zero residual") {
    const Matrix obs = random_matrix(50, 3, 20, 0.5).array().abs() + 0.5;
    Matrix hidden(50, 1);
    hidden.col(0) = 0.2 + 0.7 * obs.col(0).array() - 0.1 * obs.col(1).array() + 0.3 * obs.col(2).array();
    const LinregCase lc = linreg_case(obs, hidden);
    // The filler gene sits in no panel, so the design is the three observed genes plus intercept.
    const Predictability p = linreg_predictability(lc.rna, lc.panel);
    CHECK(p.residual(0) < 1e-20);
    CHECK(p.rank == 4);
    CHECK(!p.rank_deficient);
    CHECK(std::isfinite(p.condition_number));
}

TEST_CASE("linreg: independent noise gene has residual near its variance") {
    const Eigen::Index n = 4000;
    const Matrix obs = random_matrix(n, 3, 30, 0.3).array().abs() + 1.0;
    Matrix hidden = random_matrix(n, 1, 31, 0.4).array() + 2.0;
    const LinregCase lc = linreg_case(obs, hidden);
    const Predictability p = linreg_predictability(lc.rna, lc.panel);
    const double var = (hidden.array() - hidden.mean()).square().mean();
    CHECK(p.residual(0) == doctest::Approx(var).epsilon(0.01));
    CHECK(p.residual(0) <= var);
}

TEST_CASE("linreg: 3 cells, 2 collinear observed genes, 1 hidden against the normal equations") {
    Matrix obs(3, 2);
    obs << 0.5, 0.5, 1.0, 1.0, 2.0, 2.0;
    Matrix hidden(3, 1);
    hidden << 1.0, 2.5, 3.0;
    const LinregCase lc = linreg_case(obs, hidden);
    const Predictability p = linreg_predictability(lc.rna, lc.panel);
    // The design [1, x, x] spans [1, x]; solve the 2x2 normal equations by hand.
    const double xm = (0.5 + 1.0 + 2.0) / 3, ym = (1.0 + 2.5 + 3.0) / 3;
    double sxy = 0, sxx = 0;
    for (int i = 0; i < 3; ++i) {
        sxy += (obs(i, 0) - xm) * (hidden(i, 0) - ym);
        sxx += (obs(i, 0) - xm) * (obs(i, 0) - xm);
    }
    const double b = sxy / sxx, a = ym - b * xm;
    double rss = 0;
    for (int i = 0; i < 3; ++i) {
        const double e = hidden(i, 0) - a - b * obs(i, 0);
        rss += e * e;
    }
    CHECK(p.residual(0) == doctest::Approx(rss / 3).epsilon(1e-9));
    CHECK(p.rank == 2);
    CHECK(p.rank_deficient);
    CHECK(p.condition_number > 1e10);
}

TEST_CASE("linreg: too few RNA cells is a contract violation") {
    Matrix obs(2, 2);
    obs << 0.5, 1.0, 1.0, 0.2;
    const LinregCase lc = linreg_case(obs, Matrix::Constant(2, 1, 1.0));
    CHECK_THROWS_AS(linreg_predictability(lc.rna, lc.panel), ContractViolation);
}
