// Command-line driver: simulate, train, impute, evaluate and sweep-kappa.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gimvi/data_io.hpp"
#include "gimvi/errors.hpp"
#include "gimvi/evaluation.hpp"
#include "gimvi/imputation.hpp"
#include "gimvi/model.hpp"

namespace fs = std::filesystem;
using namespace gimvi;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct RunConfig {
    GimVIConfig model;
    SimulationConfig simulation;
    std::string rna;
    std::string spatial;
    std::string coordinates;
    std::string panel;
    std::string checkpoint;
    std::string truth;
    std::string reference_rna;
    std::string reference_spatial;
    CountFormat format = CountFormat::dense_csv;
    std::string out;
    double holdout_fraction = 0.2;
    std::vector<int> k_sweep;
    int n_samples = 50;
    double knn_fraction = 0.05;
    Modality decode_label = Modality::rna;
    std::vector<double> kappas{0.0, 1.0};
    bool parallel = false;
    bool train_reference = false;
};

// Values given on the command line; each one overrides the matching config key when present.
struct Flags {
    std::string config;
    std::uint64_t seed = 0;
    double kappa = 0;
    int epochs = 0;
    std::string out;
    std::string rna, spatial, coordinates, panel, checkpoint, truth, reference_rna, reference_spatial, format, decode_label;
    int n_samples = 0;
    double holdout_fraction = 0;
    std::vector<double> kappas;
    std::vector<int> k_sweep;
    bool parallel = false;
    bool train_reference = false;
};

SimulationConfig simulation_from_json(const nlohmann::json& j, SimulationConfig c) {
    c.n_rna = j.value("n_rna", c.n_rna);
    c.n_spatial = j.value("n_spatial", c.n_spatial);
    c.n_genes = j.value("n_genes", c.n_genes);
    c.n_spatial_genes = j.value("n_spatial_genes", c.n_spatial_genes);
    c.n_clusters = j.value("n_clusters", c.n_clusters);
    c.shift_strength = j.value("shift_strength", c.shift_strength);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.rna_library_per_gene = j.value("rna_library_per_gene", c.rna_library_per_gene);
    c.spatial_library_per_gene = j.value("spatial_library_per_gene", c.spatial_library_per_gene);
    c.library_log_sd = j.value("library_log_sd", c.library_log_sd);
    return c;
}

nlohmann::json simulation_to_json(const SimulationConfig& c) {
    return {{"n_rna", c.n_rna},
            {"n_spatial", c.n_spatial},
            {"n_genes", c.n_genes},
            {"n_spatial_genes", c.n_spatial_genes},
            {"n_clusters", c.n_clusters},
            {"shift_strength", c.shift_strength},
            {"seed", c.seed},
            {"latent_dim", c.latent_dim},
            {"rna_library_per_gene", c.rna_library_per_gene},
            {"spatial_library_per_gene", c.spatial_library_per_gene},
            {"library_log_sd", c.library_log_sd}};
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ContractViolation("cannot read '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json read_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ContractViolation("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    out << j.dump(2) << '\n';
}

RunConfig load_config(const Flags& f, const CLI::App& sub) {
    RunConfig rc;
    if (!f.config.empty()) {
        const nlohmann::json j = read_json(f.config);
        if (!j.is_object()) {
            throw ContractViolation("config must be a JSON object");
        }
        try {
            rc.model = config_from_json(j);
            if (j.contains("simulation")) {
                rc.simulation = simulation_from_json(j.at("simulation"), rc.simulation);
            }
            rc.simulation.seed = rc.model.seed;
            rc.rna = j.value("rna", rc.rna);
            rc.spatial = j.value("spatial", rc.spatial);
            rc.coordinates = j.value("coordinates", rc.coordinates);
            rc.panel = j.value("panel", rc.panel);
            rc.checkpoint = j.value("checkpoint", rc.checkpoint);
            rc.truth = j.value("truth", rc.truth);
            rc.reference_rna = j.value("reference_rna", rc.reference_rna);
            rc.reference_spatial = j.value("reference_spatial", rc.reference_spatial);
            rc.out = j.value("out", rc.out);
            rc.holdout_fraction = j.value("holdout_fraction", rc.holdout_fraction);
            rc.k_sweep = j.value("k_sweep", rc.k_sweep);
            rc.n_samples = j.value("n_posterior_samples", rc.n_samples);
            rc.knn_fraction = j.value("knn_fraction", rc.knn_fraction);
            rc.kappas = j.value("kappas", rc.kappas);
            rc.parallel = j.value("parallel", rc.parallel);
            rc.train_reference = j.value("train_reference", rc.train_reference);
            if (j.contains("format")) {
                rc.format = count_format_from_string(j.at("format").get<std::string>());
            }
            if (j.contains("decode_label")) {
                rc.decode_label = modality_from_string(j.at("decode_label").get<std::string>());
            }
        } catch (const nlohmann::json::exception& e) {
            throw ContractViolation(std::string("invalid config: ") + e.what());
        }
    }
    auto given = [&](const char* name) {
        const CLI::Option* opt = sub.get_option_no_throw(name);
        return opt != nullptr && opt->count() > 0;
    };
    if (given("--seed")) {
        rc.model.seed = f.seed;
        rc.simulation.seed = f.seed;
    }
    if (given("--kappa")) {
        rc.model.kappa = f.kappa;
    }
    if (given("--epochs")) {
        rc.model.epochs = f.epochs;
    }
    if (given("--out")) {
        rc.out = f.out;
    }
    if (given("--rna")) {
        rc.rna = f.rna;
    }
    if (given("--spatial")) {
        rc.spatial = f.spatial;
    }
    if (given("--coordinates")) {
        rc.coordinates = f.coordinates;
    }
    if (given("--panel")) {
        rc.panel = f.panel;
    }
    if (given("--checkpoint")) {
        rc.checkpoint = f.checkpoint;
    }
    if (given("--truth")) {
        rc.truth = f.truth;
    }
    if (given("--reference-rna")) {
        rc.reference_rna = f.reference_rna;
    }
    if (given("--reference-spatial")) {
        rc.reference_spatial = f.reference_spatial;
    }
    if (given("--format")) {
        rc.format = count_format_from_string(f.format);
    }
    if (given("--decode-label")) {
        rc.decode_label = modality_from_string(f.decode_label);
    }
    if (given("--n-samples")) {
        rc.n_samples = f.n_samples;
    }
    if (given("--holdout-fraction")) {
        rc.holdout_fraction = f.holdout_fraction;
    }
    if (given("--kappas")) {
        rc.kappas = f.kappas;
    }
    if (given("--k")) {
        rc.k_sweep = f.k_sweep;
    }
    if (given("--parallel")) {
        rc.parallel = f.parallel;
    }
    if (given("--train-reference")) {
        rc.train_reference = f.train_reference;
    }
    rc.model.validate();
    require(rc.n_samples >= 1, "n_posterior_samples must be >= 1");
    require(rc.holdout_fraction > 0 && rc.holdout_fraction < 1, "holdout_fraction must lie in (0, 1)");
    require(rc.knn_fraction > 0 && rc.knn_fraction < 1, "knn_fraction must lie in (0, 1)");
    for (int k : rc.k_sweep) {
        require(k >= 1, "every k in the sweep must be >= 1");
    }
    return rc;
}

std::string default_run_dir(std::uint64_t seed) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    return "runs/" + std::string(stamp) + "_seed" + std::to_string(seed);
}

fs::path prepare_out(const RunConfig& rc) {
    const fs::path out = rc.out.empty() ? fs::path(default_run_dir(rc.model.seed)) : fs::path(rc.out);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) {
        throw std::runtime_error("cannot create output directory '" + out.string() + "'");
    }
    return out;
}

const std::string& need(const std::string& path, const char* what) {
    if (path.empty()) {
        throw ContractViolation(std::string("missing input: ") + what);
    }
    if (!fs::exists(path)) {
        throw ContractViolation(std::string(what) + " '" + path + "' does not exist");
    }
    return path;
}

CountMatrix load_rna(const RunConfig& rc) {
    return load_counts(need(rc.rna, "RNA counts (--rna)"), rc.format, Modality::rna, &std::cout).matrix;
}

CountMatrix load_spatial(const RunConfig& rc) {
    CountMatrix m = load_counts(need(rc.spatial, "spatial counts (--spatial)"), rc.format, Modality::spatial, &std::cout).matrix;
    if (!rc.coordinates.empty()) {
        load_coordinates(need(rc.coordinates, "coordinates (--coordinates)"), m);
    }
    return m;
}

ModelState load_model(const std::string& path, const char* what) {
    return load_checkpoint(need(path, what));
}

void write_trace(const fs::path& path, const std::vector<EpochRecord>& trace) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    out << "epoch,elbo_rna,elbo_spatial,adv_loss\n";
    for (const auto& r : trace) {
        out << r.epoch << ',' << format_number(r.elbo_rna) << ',' << format_number(r.elbo_spatial) << ','
            << format_number(r.adv_loss) << '\n';
    }
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) {
        s += (s.empty() ? "" : ", ") + x;
    }
    return s.empty() ? "(none)" : s;
}

// Spatial data must carry every gene of the checkpoint's panel.
void check_panel(const GenePanel& panel, const CountMatrix& spatial, bool need_held_out) {
    std::vector<std::string> expected = panel.spatial_genes();
    if (need_held_out) {
        const auto held = panel.held_out_genes();
        expected.insert(expected.end(), held.begin(), held.end());
    }
    std::vector<std::string> missing;
    for (const auto& g : expected) {
        if (std::find(spatial.gene_ids.begin(), spatial.gene_ids.end(), g) == spatial.gene_ids.end()) {
            missing.push_back(g);
        }
    }
    std::vector<std::string> extra;
    for (const auto& g : spatial.gene_ids) {
        if (std::find(expected.begin(), expected.end(), g) == expected.end()) {
            extra.push_back(g);
        }
    }
    if (!missing.empty()) {
        throw DataError("gene panel mismatch between checkpoint and spatial data\n  missing from data: " + join(missing) +
                        "\n  not in checkpoint panel: " + join(extra));
    }
}

Matrix load_truth(const RunConfig& rc, const Experiment& exp) {
    if (rc.truth.empty()) {
        return truth_counts(exp);
    }
    const SimulationTruth t = truth_from_json(read_json(need(rc.truth, "truth (--truth)")));
    if (t.rho_spatial.rows() != static_cast<Eigen::Index>(exp.spatial.num_cells()) ||
        t.rho_spatial.cols() != static_cast<Eigen::Index>(exp.panel.genes.size())) {
        throw DataError("truth does not match the spatial cells or the gene panel");
    }
    return truth_frequencies(t, exp.panel);
}

EvalOptions eval_options(const RunConfig& rc) {
    EvalOptions o;
    o.n_samples = rc.n_samples;
    o.knn_fraction = rc.knn_fraction;
    o.decode_label = rc.decode_label;
    o.seed = rc.model.seed;
    o.k_sweep = rc.k_sweep;
    return o;
}

int cmd_simulate(const RunConfig& rc) {
    const fs::path out = prepare_out(rc);
    const SimulatedData sim = simulate(rc.simulation);
    const GenePanel panel = make_holdout(sim.spatial.gene_ids, sim.rna.gene_ids, rc.holdout_fraction, rc.simulation.seed);
    save_counts(out / "rna.csv", sim.rna, CountFormat::dense_csv);
    save_counts(out / "spatial.csv", sim.spatial, CountFormat::dense_csv);
    write_json(out / "panel.json", to_json(panel));
    nlohmann::json truth = to_json(sim.truth);
    truth["simulation"] = simulation_to_json(rc.simulation);
    write_json(out / "truth.json", truth);
    std::cout << "seed " << rc.simulation.seed << "\n"
              << "wrote " << sim.rna.num_cells() << " RNA cells x " << sim.rna.num_genes() << " genes and "
              << sim.spatial.num_cells() << " spatial cells x " << sim.spatial.num_genes() << " genes to " << out.string()
              << "\n";
    return 0;
}

Experiment load_experiment(const RunConfig& rc, const GenePanel* panel_override) {
    const CountMatrix rna = load_rna(rc);
    const CountMatrix spatial = load_spatial(rc);
    if (panel_override) {
        check_panel(*panel_override, spatial, true);
        return apply_panel(rna, spatial, *panel_override);
    }
    if (!rc.panel.empty()) {
        return apply_panel(rna, spatial, panel_from_json(read_json(need(rc.panel, "panel (--panel)"))));
    }
    return prepare_experiment(rna, spatial, rc.holdout_fraction, rc.model.seed);
}

int cmd_train(const RunConfig& rc) {
    const Experiment exp = load_experiment(rc, nullptr);
    const fs::path out = prepare_out(rc);
    std::cout << "training kappa=" << format_number(rc.model.kappa) << " seed=" << rc.model.seed << " epochs=" << rc.model.epochs
              << " on " << exp.rna.num_cells() << " RNA and " << exp.spatial.num_cells() << " spatial cells\n";
    const TrainResult res = train(exp.rna, exp.spatial, exp.panel, rc.model);
    save_checkpoint(out / "checkpoint.gimvi", res.state);
    write_trace(out / "trace.csv", res.trace);
    write_json(out / "panel.json", to_json(exp.panel));
    const auto& last = res.trace.back();
    std::cout << "final elbo_rna=" << format_number(last.elbo_rna) << " elbo_spatial=" << format_number(last.elbo_spatial)
              << " adv_loss=" << format_number(last.adv_loss) << "\nwrote " << (out / "checkpoint.gimvi").string() << "\n";
    return 0;
}

int cmd_impute(const RunConfig& rc) {
    const ModelState state = load_model(rc.checkpoint, "checkpoint (--checkpoint)");
    const CountMatrix spatial = load_spatial(rc);
    check_panel(state.panel, spatial, false);
    const CountMatrix observed = select_genes(spatial, state.panel.spatial_genes());
    const fs::path out = prepare_out(rc);
    const ImputationResult res = impute(state, observed, rc.n_samples, rc.decode_label, rc.model.seed);
    write_imputation_csv(out / "imputation.csv", res);
    std::cout << "imputed " << res.gene_ids.size() << " held-out genes for " << res.cell_ids.size() << " cells with "
              << res.n_samples << " posterior samples" << (res.degenerate ? " (single draw: uncertainty is 0)" : "") << "\n";
    return 0;
}

int cmd_evaluate(const RunConfig& rc) {
    const ModelState state = load_model(rc.checkpoint, "checkpoint (--checkpoint)");
    const Experiment exp = load_experiment(rc, &state.panel);
    const Matrix truth = load_truth(rc, exp);
    std::optional<Matrix> reference;
    if (!rc.reference_rna.empty() || !rc.reference_spatial.empty()) {
        const ModelState a = load_model(rc.reference_rna, "reference RNA checkpoint (--reference-rna)");
        const ModelState b = load_model(rc.reference_spatial, "reference spatial checkpoint (--reference-spatial)");
        reference = reference_embedding(a, b, exp);
    } else if (rc.train_reference) {
        std::cout << "training single-dataset reference models\n";
        const auto [a, b] = train_reference_models(exp, state.config);
        reference = reference_embedding(a, b, exp);
    }
    const EvalReport report = evaluate(state, exp, truth, eval_options(rc), reference ? &*reference : nullptr);
    const fs::path out = prepare_out(rc);
    write_metrics_csv(out / "eval_metrics.csv", report);
    write_genes_csv(out / "eval_genes.csv", report);
    write_json(out / "eval.json", to_json(report));
    auto show = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string("n/a"); };
    std::cout << "median Spearman gimvi=" << show(report.median_model) << " knn=" << show(report.median_knn)
              << " (truth: " << (rc.truth.empty() ? "held-out counts" : "simulated frequencies") << ")\n";
    if (!reference) {
        std::cout << "purity skipped: no reference models (use --train-reference or --reference-rna/--reference-spatial)\n";
    }
    return 0;
}

struct SweepRow {
    double kappa = 0;
    EvalReport report;
};

int cmd_sweep(const RunConfig& rc) {
    if (rc.kappas.size() < 2) {
        throw ContractViolation("sweep-kappa needs at least two kappa values");
    }
    for (double k : rc.kappas) {
        require(k >= 0 && std::isfinite(k), "kappa values must be finite and >= 0");
    }
    const Experiment exp = load_experiment(rc, nullptr);
    const Matrix truth = load_truth(rc, exp);
    const fs::path out = prepare_out(rc);
    write_json(out / "panel.json", to_json(exp.panel));

    std::vector<std::optional<SweepRow>> rows(rc.kappas.size());
    std::vector<std::string> errors(rc.kappas.size());
    std::mutex log_mutex;
    auto run_one = [&](std::size_t i) {
        try {
            GimVIConfig cfg = rc.model;
            cfg.kappa = rc.kappas[i];
            const TrainResult res = train(exp.rna, exp.spatial, exp.panel, cfg);
            std::ostringstream trace_name;
            trace_name << "trace_kappa" << format_number(cfg.kappa) << ".csv";
            write_trace(out / trace_name.str(), res.trace);
            rows[i] = SweepRow{cfg.kappa, evaluate(res.state, exp, truth, eval_options(rc))};
            std::lock_guard lock(log_mutex);
            std::cout << "kappa " << format_number(cfg.kappa) << " done\n";
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    };
    if (rc.parallel) {
        std::vector<std::thread> workers;
        for (std::size_t i = 0; i < rc.kappas.size(); ++i) {
            workers.emplace_back(run_one, i);
        }
        for (auto& w : workers) {
            w.join();
        }
    } else {
        for (std::size_t i = 0; i < rc.kappas.size(); ++i) {
            run_one(i);
            if (!errors[i].empty()) {
                break;
            }
        }
    }

    std::ofstream csv(out / "sweep_summary.csv", std::ios::binary | std::ios::trunc);
    if (!csv) {
        throw std::runtime_error("cannot write the sweep summary");
    }
    std::vector<int> ks;
    for (const auto& r : rows) {
        if (r) {
            for (const auto& m : r->report.metrics) {
                ks.push_back(m.k);
            }
            break;
        }
    }
    csv << "kappa,seed,median_spearman_gimvi,median_spearman_knn";
    for (int k : ks) {
        csv << ",mixing_kl_k" << k;
    }
    csv << '\n';
    for (const auto& r : rows) {
        if (!r) {
            continue;
        }
        csv << format_number(r->kappa) << ',' << rc.model.seed << ','
            << (r->report.median_model ? format_number(*r->report.median_model) : "") << ','
            << (r->report.median_knn ? format_number(*r->report.median_knn) : "");
        for (const auto& m : r->report.metrics) {
            csv << ',' << format_number(m.value);
        }
        csv << '\n';
    }
    csv.close();
    for (std::size_t i = 0; i < errors.size(); ++i) {
        if (!errors[i].empty()) {
            std::cerr << "error: kappa " << format_number(rc.kappas[i]) << " failed: " << errors[i]
                      << "\npartial results saved to " << (out / "sweep_summary.csv").string() << "\n";
            return kExitRuntime;
        }
    }
    std::cout << "wrote " << (out / "sweep_summary.csv").string() << "\n";
    return 0;
}

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config, "JSON run configuration");
    sub->add_option("--seed", f.seed, "Random seed (overrides config)");
    sub->add_option("--out", f.out, "Output directory (default runs/<timestamp>_seed<seed>)");
}

void add_inputs(CLI::App* sub, Flags& f) {
    sub->add_option("--rna", f.rna, "scRNA-seq counts");
    sub->add_option("--spatial", f.spatial, "Spatial counts over the full spatial panel");
    sub->add_option("--coordinates", f.coordinates, "Spatial coordinates CSV (cell_id,x,y)");
    sub->add_option("--format", f.format, "Count file format: dense_csv or triplet");
}

void add_model(CLI::App* sub, Flags& f) {
    sub->add_option("--kappa", f.kappa, "Adversarial weight");
    sub->add_option("--epochs", f.epochs, "Training epochs");
    sub->add_option("--holdout-fraction", f.holdout_fraction, "Fraction of the spatial panel held out");
    sub->add_option("--panel", f.panel, "Gene panel JSON to reuse instead of drawing a holdout");
}

void add_eval(CLI::App* sub, Flags& f) {
    sub->add_option("--n-samples", f.n_samples, "Posterior samples per cell");
    sub->add_option("--decode-label", f.decode_label, "Dataset label used for decoding: rna or spatial");
    sub->add_option("--truth", f.truth, "Simulation truth JSON; held-out counts are used when absent");
    sub->add_option("--k", f.k_sweep, "k values for mixing and purity");
}

}

int main(int argc, char** argv) {
    CLI::App app{"gimvi: joint model of scRNA-seq and spatial transcriptomics"};
    app.require_subcommand(1);
    Flags f;

    auto* sim = app.add_subcommand("simulate", "Write a simulated dataset pair, gene panel and truth");
    add_common(sim, f);
    sim->add_option("--holdout-fraction", f.holdout_fraction, "Fraction of the spatial panel held out");

    auto* tr = app.add_subcommand("train", "Fit the model and write a checkpoint and ELBO trace");
    add_common(tr, f);
    add_inputs(tr, f);
    add_model(tr, f);

    auto* imp = app.add_subcommand("impute", "Impute held-out genes for spatial cells");
    add_common(imp, f);
    add_inputs(imp, f);
    imp->add_option("--checkpoint", f.checkpoint, "Trained checkpoint");
    imp->add_option("--n-samples", f.n_samples, "Posterior samples per cell");
    imp->add_option("--decode-label", f.decode_label, "Dataset label used for decoding: rna or spatial");

    auto* ev = app.add_subcommand("evaluate", "Score imputation and integration of a trained model");
    add_common(ev, f);
    add_inputs(ev, f);
    add_eval(ev, f);
    ev->add_option("--checkpoint", f.checkpoint, "Trained checkpoint");
    ev->add_option("--reference-rna", f.reference_rna, "Checkpoint trained on RNA alone, for purity");
    ev->add_option("--reference-spatial", f.reference_spatial, "Checkpoint trained on spatial data alone, for purity");
    ev->add_flag("--train-reference", f.train_reference, "Train the single-dataset reference models for purity");

    auto* sw = app.add_subcommand("sweep-kappa", "Train one model per kappa and summarize");
    add_common(sw, f);
    add_inputs(sw, f);
    add_model(sw, f);
    add_eval(sw, f);
    sw->add_option("--kappas", f.kappas, "Kappa values (at least two)");
    sw->add_flag("--parallel", f.parallel, "Train the kappa values concurrently");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitValidation;
    }

    try {
        if (sim->parsed()) {
            return cmd_simulate(load_config(f, *sim));
        }
        if (tr->parsed()) {
            return cmd_train(load_config(f, *tr));
        }
        if (imp->parsed()) {
            return cmd_impute(load_config(f, *imp));
        }
        if (ev->parsed()) {
            return cmd_evaluate(load_config(f, *ev));
        }
        return cmd_sweep(load_config(f, *sw));
    } catch (const TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const ContractViolation& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
