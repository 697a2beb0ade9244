#include "gimvi/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "gimvi/count_dist.hpp"
#include "gimvi/errors.hpp"
#include "gimvi/random.hpp"

namespace gimvi {

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    std::string tok;
    while (in >> tok) {
        out.push_back(tok);
    }
    return out;
}

void strip_cr(std::string& line) {
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
}

bool parse_double(const std::string& s, double& out) {
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    while (begin < end && *begin == ' ') {
        ++begin;
    }
    while (end > begin && end[-1] == ' ') {
        --end;
    }
    if (begin == end) {
        return false;
    }
    auto res = std::from_chars(begin, end, out);
    return res.ec == std::errc() && res.ptr == end && std::isfinite(out);
}

bool parse_index(const std::string& s, std::size_t& out) {
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

double checked_count(const std::string& path, std::size_t line, const std::string& tok) {
    double v;
    if (!parse_double(tok, v)) {
        throw ParseError(path, line, "not a number: '" + tok + "'");
    }
    if (v < 0) {
        throw ParseError(path, line, "negative count " + tok);
    }
    if (std::abs(v - std::round(v)) > 1e-6) {
        throw ParseError(path, line, "count is not integer-valued: " + tok);
    }
    return v;
}

void check_unique(const std::vector<std::string>& ids, const std::string& path, std::size_t line, const char* what) {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids) {
        if (!seen.insert(id).second) {
            throw ParseError(path, line, std::string("duplicate ") + what + " '" + id + "'");
        }
    }
}

std::vector<std::string> read_id_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open id list '" + path.string() + "'");
    }
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        strip_cr(line);
        if (!line.empty()) {
            ids.push_back(line);
        }
    }
    return ids;
}

CountMatrix load_dense(const std::filesystem::path& path, Modality modality) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open '" + path.string() + "'");
    }
    const std::string name = path.string();
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError(name, 1, "empty file");
    }
    strip_cr(line);
    auto header = split(line, ',');
    if (header.size() < 2) {
        throw ParseError(name, 1, "header must list at least one gene");
    }
    CountMatrix m;
    m.modality = modality;
    m.gene_ids.assign(header.begin() + 1, header.end());
    check_unique(m.gene_ids, name, 1, "gene");

    std::vector<double> values;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        strip_cr(line);
        if (line.empty()) {
            continue;
        }
        auto fields = split(line, ',');
        if (fields.size() != header.size()) {
            throw ParseError(name, lineno, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
        }
        m.cell_ids.push_back(fields[0]);
        for (std::size_t j = 1; j < fields.size(); ++j) {
            values.push_back(checked_count(name, lineno, fields[j]));
        }
    }
    check_unique(m.cell_ids, name, lineno, "cell");
    m.values.resize(static_cast<Eigen::Index>(m.cell_ids.size()), static_cast<Eigen::Index>(m.gene_ids.size()));
    for (std::size_t i = 0; i < m.cell_ids.size(); ++i) {
        for (std::size_t j = 0; j < m.gene_ids.size(); ++j) {
            m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i * m.gene_ids.size() + j];
        }
    }
    return m;
}

CountMatrix load_triplet(const std::filesystem::path& path, Modality modality) {
    const std::string name = path.string();
    CountMatrix m;
    m.modality = modality;
    m.cell_ids = read_id_list(name + ".cells");
    m.gene_ids = read_id_list(name + ".genes");
    check_unique(m.cell_ids, name + ".cells", 1, "cell");
    check_unique(m.gene_ids, name + ".genes", 1, "gene");
    m.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m.cell_ids.size()), static_cast<Eigen::Index>(m.gene_ids.size()));

    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open '" + name + "'");
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError(name, 1, "empty file");
    }
    strip_cr(line);
    if (split_ws(line) != std::vector<std::string>{"cell", "gene", "count"}) {
        throw ParseError(name, 1, "header must be 'cell gene count'");
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        strip_cr(line);
        auto toks = split_ws(line);
        if (toks.empty()) {
            continue;
        }
        if (toks.size() != 3) {
            throw ParseError(name, lineno, "expected 3 fields, found " + std::to_string(toks.size()));
        }
        std::size_t cell, gene;
        if (!parse_index(toks[0], cell) || !parse_index(toks[1], gene)) {
            throw ParseError(name, lineno, "indices must be non-negative integers");
        }
        if (cell >= m.cell_ids.size() || gene >= m.gene_ids.size()) {
            throw ParseError(name, lineno, "index out of range (" + toks[0] + ", " + toks[1] + ")");
        }
        m.values(static_cast<Eigen::Index>(cell), static_cast<Eigen::Index>(gene)) = checked_count(name, lineno, toks[2]);
    }
    return m;
}

Eigen::VectorXd normal_vector(std::size_t n, double mean, double sd, Rng& rng) {
    std::normal_distribution<double> dist(mean, sd);
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        v(i) = dist(rng);
    }
    return v;
}

Eigen::MatrixXd normal_matrix(std::size_t rows, std::size_t cols, double sd, Rng& rng) {
    std::normal_distribution<double> dist(0.0, sd);
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            m(r, c) = dist(rng);
        }
    }
    return m;
}

std::string padded(const char* prefix, std::size_t i, std::size_t total) {
    std::string digits = std::to_string(i);
    const std::size_t width = std::to_string(total > 0 ? total - 1 : 0).size();
    return prefix + std::string(width > digits.size() ? width - digits.size() : 0, '0') + digits;
}

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
    auto rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row;
        row.reserve(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            row.push_back(m(r, c));
        }
        rows.push_back(row);
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(j.at(r).size()) != cols) {
            throw DataError("ragged matrix in JSON");
        }
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = j.at(r).at(c).get<double>();
        }
    }
    return m;
}

nlohmann::json vector_json(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
    auto v = j.get<std::vector<double>>();
    return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}

std::string to_string(Modality m) {
    return m == Modality::rna ? "rna" : "spatial";
}

Modality modality_from_string(const std::string& name) {
    if (name == "rna") {
        return Modality::rna;
    }
    if (name == "spatial") {
        return Modality::spatial;
    }
    throw DataError("unknown modality '" + name + "'");
}

CountFormat count_format_from_string(const std::string& name) {
    if (name == "dense_csv") {
        return CountFormat::dense_csv;
    }
    if (name == "triplet") {
        return CountFormat::triplet;
    }
    throw DataError("unknown count format '" + name + "'");
}

std::string format_number(double v) {
    if (std::isfinite(v) && v == std::round(v) && std::abs(v) < 1e15) {
        return std::to_string(static_cast<long long>(v));
    }
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

void CountMatrix::validate() const {
    if (static_cast<std::size_t>(values.rows()) != cell_ids.size() || static_cast<std::size_t>(values.cols()) != gene_ids.size()) {
        throw DataError("count matrix shape does not match its id lists");
    }
    std::unordered_set<std::string> seen(gene_ids.begin(), gene_ids.end());
    if (seen.size() != gene_ids.size()) {
        throw DataError("duplicate gene identifiers in count matrix");
    }
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        const double v = values.data()[i];
        if (!std::isfinite(v) || v < 0 || std::abs(v - std::round(v)) > 1e-6) {
            throw DataError("count matrix holds a negative or non-integer value: " + std::to_string(v));
        }
    }
    if (!coordinates.empty()) {
        if (modality != Modality::spatial) {
            throw DataError("coordinates are only allowed on spatial matrices");
        }
        if (coordinates.size() != cell_ids.size()) {
            throw DataError("coordinate count does not match cell count");
        }
    }
}

CountMatrix select_genes(const CountMatrix& m, std::span<const std::string> genes) {
    std::unordered_map<std::string, Eigen::Index> index;
    for (std::size_t j = 0; j < m.gene_ids.size(); ++j) {
        index.emplace(m.gene_ids[j], static_cast<Eigen::Index>(j));
    }
    std::vector<std::string> missing;
    for (const auto& g : genes) {
        if (!index.count(g)) {
            missing.push_back(g);
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& g : missing) {
            list += (list.empty() ? "" : ", ") + g;
        }
        throw DataError("genes missing from " + to_string(m.modality) + " matrix: " + list);
    }
    CountMatrix out;
    out.modality = m.modality;
    out.cell_ids = m.cell_ids;
    out.coordinates = m.coordinates;
    out.gene_ids.assign(genes.begin(), genes.end());
    out.values.resize(m.values.rows(), static_cast<Eigen::Index>(genes.size()));
    for (std::size_t j = 0; j < genes.size(); ++j) {
        out.values.col(static_cast<Eigen::Index>(j)) = m.values.col(index.at(genes[j]));
    }
    return out;
}

CountMatrix select_cells(const CountMatrix& m, std::span<const std::size_t> cells) {
    CountMatrix out;
    out.modality = m.modality;
    out.gene_ids = m.gene_ids;
    out.values.resize(static_cast<Eigen::Index>(cells.size()), m.values.cols());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        require(cells[i] < m.num_cells(), "select_cells: cell index out of range");
        out.cell_ids.push_back(m.cell_ids[cells[i]]);
        out.values.row(static_cast<Eigen::Index>(i)) = m.values.row(static_cast<Eigen::Index>(cells[i]));
        if (m.has_coordinates()) {
            out.coordinates.push_back(m.coordinates[cells[i]]);
        }
    }
    return out;
}

LoadedCounts load_counts(const std::filesystem::path& path, CountFormat format, Modality modality, std::ostream* log) {
    LoadedCounts res;
    res.matrix = format == CountFormat::dense_csv ? load_dense(path, modality) : load_triplet(path, modality);
    if (modality == Modality::spatial) {
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < res.matrix.num_cells(); ++i) {
            if (res.matrix.values.row(static_cast<Eigen::Index>(i)).sum() > 0) {
                keep.push_back(i);
            }
        }
        res.dropped_empty_cells = res.matrix.num_cells() - keep.size();
        if (res.dropped_empty_cells > 0) {
            res.matrix = select_cells(res.matrix, keep);
            if (log) {
                *log << "dropped " << res.dropped_empty_cells << " spatial cell(s) with zero total count from " << path.string() << "\n";
            }
        }
    }
    res.matrix.validate();
    return res;
}

void save_counts(const std::filesystem::path& path, const CountMatrix& m, CountFormat format) {
    m.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    }
    if (format == CountFormat::dense_csv) {
        out << "cell_id";
        for (const auto& g : m.gene_ids) {
            out << ',' << g;
        }
        out << '\n';
        for (std::size_t i = 0; i < m.num_cells(); ++i) {
            out << m.cell_ids[i];
            for (std::size_t j = 0; j < m.num_genes(); ++j) {
                out << ',' << format_number(m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
            }
            out << '\n';
        }
    } else {
        out << "cell gene count\n";
        for (std::size_t i = 0; i < m.num_cells(); ++i) {
            for (std::size_t j = 0; j < m.num_genes(); ++j) {
                const double v = m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                if (v != 0) {
                    out << i << ' ' << j << ' ' << format_number(v) << '\n';
                }
            }
        }
        std::ofstream cells(path.string() + ".cells", std::ios::binary | std::ios::trunc);
        std::ofstream genes(path.string() + ".genes", std::ios::binary | std::ios::trunc);
        if (!cells || !genes) {
            throw std::runtime_error("cannot write id sidecars for '" + path.string() + "'");
        }
        for (const auto& c : m.cell_ids) {
            cells << c << '\n';
        }
        for (const auto& g : m.gene_ids) {
            genes << g << '\n';
        }
    }
    if (!out) {
        throw std::runtime_error("failed writing '" + path.string() + "'");
    }
}

void load_coordinates(const std::filesystem::path& path, CountMatrix& m) {
    if (m.modality != Modality::spatial) {
        throw DataError("coordinates can only be attached to a spatial matrix");
    }
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open coordinate file '" + path.string() + "'");
    }
    const std::string name = path.string();
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError(name, 1, "empty file");
    }
    strip_cr(line);
    if (split(line, ',') != std::vector<std::string>{"cell_id", "x", "y"}) {
        throw ParseError(name, 1, "header must be 'cell_id,x,y'");
    }
    std::unordered_map<std::string, std::pair<double, double>> coords;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        strip_cr(line);
        if (line.empty()) {
            continue;
        }
        auto f = split(line, ',');
        double x, y;
        if (f.size() != 3 || !parse_double(f[1], x) || !parse_double(f[2], y)) {
            throw ParseError(name, lineno, "expected 'cell_id,x,y'");
        }
        coords[f[0]] = {x, y};
    }
    std::vector<std::pair<double, double>> out;
    for (const auto& c : m.cell_ids) {
        auto it = coords.find(c);
        if (it == coords.end()) {
            throw DataError("no coordinates for cell '" + c + "' in " + name);
        }
        out.push_back(it->second);
    }
    m.coordinates = std::move(out);
}

std::vector<std::string> GenePanel::spatial_genes() const {
    std::vector<std::string> out;
    for (auto i : spatial) {
        out.push_back(genes.at(i));
    }
    return out;
}

std::vector<std::string> GenePanel::held_out_genes() const {
    std::vector<std::string> out;
    for (auto i : held_out) {
        out.push_back(genes.at(i));
    }
    return out;
}

void GenePanel::validate() const {
    std::vector<char> used(genes.size(), 0);
    for (auto i : spatial) {
        if (i >= genes.size() || used[i]) {
            throw DataError("gene panel: spatial index out of range or repeated");
        }
        used[i] = 1;
    }
    for (auto i : held_out) {
        if (i >= genes.size() || used[i]) {
            throw DataError("gene panel: held-out gene overlaps the spatial panel or is out of range");
        }
        used[i] = 2;
    }
    if (spatial.empty()) {
        throw DataError("gene panel: spatial panel is empty");
    }
}

nlohmann::json to_json(const GenePanel& panel) {
    return {{"genes", panel.genes},
            {"spatial_genes", panel.spatial_genes()},
            {"held_out_genes", panel.held_out_genes()},
            {"seed", panel.seed}};
}

GenePanel panel_from_json(const nlohmann::json& j) {
    GenePanel p;
    p.genes = j.at("genes").get<std::vector<std::string>>();
    p.seed = j.value("seed", std::uint64_t{0});
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < p.genes.size(); ++i) {
        index.emplace(p.genes[i], i);
    }
    auto lookup = [&](const std::string& g) {
        auto it = index.find(g);
        if (it == index.end()) {
            throw DataError("gene panel refers to unknown gene '" + g + "'");
        }
        return it->second;
    };
    for (const auto& g : j.at("spatial_genes").get<std::vector<std::string>>()) {
        p.spatial.push_back(lookup(g));
    }
    for (const auto& g : j.at("held_out_genes").get<std::vector<std::string>>()) {
        p.held_out.push_back(lookup(g));
    }
    p.validate();
    return p;
}

GenePanel make_holdout(std::span<const std::string> spatial_panel, std::span<const std::string> rna_genes, double fraction,
                       std::uint64_t seed) {
    require(fraction > 0 && fraction < 1, "make_holdout: fraction must lie in (0, 1)");
    require(spatial_panel.size() >= 2, "make_holdout: spatial panel needs at least two genes");

    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < rna_genes.size(); ++i) {
        index.emplace(rna_genes[i], i);
    }
    std::vector<std::string> missing;
    for (const auto& g : spatial_panel) {
        if (!index.count(g)) {
            missing.push_back(g);
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& g : missing) {
            list += (list.empty() ? "" : ", ") + g;
        }
        throw DataError("spatial panel genes absent from the scRNA-seq genes: " + list);
    }

    const auto n_hold = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(spatial_panel.size())));
    require(n_hold >= 1 && n_hold < spatial_panel.size(), "make_holdout: fraction leaves no held-out or no observed genes");

    std::vector<std::size_t> order(spatial_panel.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> held(spatial_panel.size(), 0);
    for (std::size_t i = 0; i < n_hold; ++i) {
        held[order[i]] = 1;
    }

    GenePanel p;
    p.genes.assign(rna_genes.begin(), rna_genes.end());
    p.seed = seed;
    for (std::size_t i = 0; i < spatial_panel.size(); ++i) {
        (held[i] ? p.held_out : p.spatial).push_back(index.at(spatial_panel[i]));
    }
    p.validate();
    return p;
}

nlohmann::json to_json(const SimulationTruth& t) {
    return {{"seed", t.seed},
            {"z_rna", matrix_json(t.z_rna)},
            {"z_spatial", matrix_json(t.z_spatial)},
            {"rho_rna", matrix_json(t.rho_rna)},
            {"rho_spatial", matrix_json(t.rho_spatial)},
            {"cluster_rna", t.cluster_rna},
            {"cluster_spatial", t.cluster_spatial},
            {"library_rna", vector_json(t.library_rna)},
            {"library_spatial", vector_json(t.library_spatial)},
            {"gene_baseline", vector_json(t.gene_baseline)},
            {"gene_shift", vector_json(t.gene_shift)},
            {"inv_dispersion", vector_json(t.inv_dispersion)},
            {"dropout_logit", vector_json(t.dropout_logit)}};
}

SimulationTruth truth_from_json(const nlohmann::json& j) {
    SimulationTruth t;
    t.seed = j.at("seed").get<std::uint64_t>();
    t.z_rna = matrix_from_json(j.at("z_rna"));
    t.z_spatial = matrix_from_json(j.at("z_spatial"));
    t.rho_rna = matrix_from_json(j.at("rho_rna"));
    t.rho_spatial = matrix_from_json(j.at("rho_spatial"));
    t.cluster_rna = j.at("cluster_rna").get<std::vector<int>>();
    t.cluster_spatial = j.at("cluster_spatial").get<std::vector<int>>();
    t.library_rna = vector_from_json(j.at("library_rna"));
    t.library_spatial = vector_from_json(j.at("library_spatial"));
    t.gene_baseline = vector_from_json(j.at("gene_baseline"));
    t.gene_shift = vector_from_json(j.at("gene_shift"));
    t.inv_dispersion = vector_from_json(j.at("inv_dispersion"));
    t.dropout_logit = vector_from_json(j.at("dropout_logit"));
    return t;
}

SimulatedData simulate(const SimulationConfig& cfg) {
    require(cfg.n_rna >= 1 && cfg.n_spatial >= 1 && cfg.n_clusters >= 1 && cfg.latent_dim >= 1, "simulate: sizes must be >= 1");
    require(cfg.n_spatial_genes >= 1 && cfg.n_spatial_genes < cfg.n_genes, "simulate: need 1 <= |G'| < |G|");
    require(cfg.shift_strength >= 0, "simulate: shift_strength must be non-negative");

    Rng rng = make_rng(cfg.seed);
    const std::size_t d = cfg.latent_dim;
    const std::size_t n_genes = cfg.n_genes;
    constexpr std::size_t hidden = 32;

    const Eigen::MatrixXd centers = normal_matrix(cfg.n_clusters, d, 2.0, rng);
    const Eigen::MatrixXd w1 = normal_matrix(hidden, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    const Eigen::VectorXd b1 = normal_vector(hidden, 0.0, 0.5, rng);
    const Eigen::MatrixXd w2 = normal_matrix(n_genes, hidden, 2.0 / std::sqrt(static_cast<double>(hidden)), rng);

    SimulationTruth truth;
    truth.seed = cfg.seed;
    truth.gene_baseline = normal_vector(n_genes, 0.0, 1.0, rng);
    truth.gene_shift = cfg.shift_strength * normal_vector(n_genes, 0.0, 1.0, rng);
    truth.inv_dispersion = normal_vector(n_genes, std::log(3.0), 0.5, rng).array().exp();
    truth.dropout_logit = normal_vector(n_genes, -2.0, 0.5, rng);

    std::vector<std::size_t> all_genes(n_genes);
    std::iota(all_genes.begin(), all_genes.end(), 0);
    std::shuffle(all_genes.begin(), all_genes.end(), rng);
    std::vector<std::size_t> panel(all_genes.begin(), all_genes.begin() + static_cast<std::ptrdiff_t>(cfg.n_spatial_genes));
    std::sort(panel.begin(), panel.end());

    std::uniform_int_distribution<int> pick_cluster(0, static_cast<int>(cfg.n_clusters) - 1);
    std::normal_distribution<double> unit(0.0, 1.0);

    auto draw_latent = [&](std::size_t n, Eigen::MatrixXd& z, std::vector<int>& clusters) {
        z.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
        clusters.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            clusters[i] = pick_cluster(rng);
            for (std::size_t k = 0; k < d; ++k) {
                z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = centers(clusters[i], static_cast<Eigen::Index>(k)) + unit(rng);
            }
        }
    };
    auto decode = [&](const Eigen::MatrixXd& z, bool spatial) {
        Eigen::MatrixXd h = ((z * w1.transpose()).rowwise() + b1.transpose()).array().tanh();
        Eigen::MatrixXd logits = (h * w2.transpose()).rowwise() + truth.gene_baseline.transpose();
        if (spatial) {
            logits.rowwise() += truth.gene_shift.transpose();
        }
        for (Eigen::Index r = 0; r < logits.rows(); ++r) {
            const double hi = logits.row(r).maxCoeff();
            logits.row(r) = (logits.row(r).array() - hi).exp();
            logits.row(r) /= logits.row(r).sum();
        }
        return logits;
    };

    draw_latent(cfg.n_rna, truth.z_rna, truth.cluster_rna);
    draw_latent(cfg.n_spatial, truth.z_spatial, truth.cluster_spatial);
    truth.rho_rna = decode(truth.z_rna, false);
    truth.rho_spatial = decode(truth.z_spatial, true);

    SimulatedData out;
    out.truth = truth;
    for (std::size_t g = 0; g < n_genes; ++g) {
        out.panel.genes.push_back(padded("gene_", g, n_genes));
    }
    out.panel.spatial = panel;
    out.panel.seed = cfg.seed;

    CountMatrix& rna = out.rna;
    rna.modality = Modality::rna;
    rna.gene_ids = out.panel.genes;
    rna.values.resize(static_cast<Eigen::Index>(cfg.n_rna), static_cast<Eigen::Index>(n_genes));
    out.truth.library_rna.resize(static_cast<Eigen::Index>(cfg.n_rna));
    const LogNormalParams rna_lib{std::log(cfg.rna_library_per_gene * static_cast<double>(n_genes)), cfg.library_log_sd};
    for (std::size_t i = 0; i < cfg.n_rna; ++i) {
        rna.cell_ids.push_back(padded("rna_", i, cfg.n_rna));
        const double lib = sample_lognormal(rna_lib, rng);
        out.truth.library_rna(static_cast<Eigen::Index>(i)) = lib;
        for (std::size_t g = 0; g < n_genes; ++g) {
            const auto gi = static_cast<Eigen::Index>(g);
            const double mean = std::max(lib * truth.rho_rna(static_cast<Eigen::Index>(i), gi), kParamFloor);
            rna.values(static_cast<Eigen::Index>(i), gi) =
                sample_zinb({{mean, truth.inv_dispersion(gi)}, truth.dropout_logit(gi)}, rng);
        }
    }

    CountMatrix& spa = out.spatial;
    spa.modality = Modality::spatial;
    for (auto g : panel) {
        spa.gene_ids.push_back(out.panel.genes[g]);
    }
    spa.values.resize(static_cast<Eigen::Index>(cfg.n_spatial), static_cast<Eigen::Index>(panel.size()));
    out.truth.library_spatial.resize(static_cast<Eigen::Index>(cfg.n_spatial));
    const LogNormalParams spa_lib{std::log(cfg.spatial_library_per_gene * static_cast<double>(panel.size())), cfg.library_log_sd};
    for (std::size_t i = 0; i < cfg.n_spatial; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        spa.cell_ids.push_back(padded("spa_", i, cfg.n_spatial));
        const double lib = sample_lognormal(spa_lib, rng);
        out.truth.library_spatial(ii) = lib;
        double mass = 0;
        for (auto g : panel) {
            mass += truth.rho_spatial(ii, static_cast<Eigen::Index>(g));
        }
        // A spatial cell must have a positive library; redraw the unlikely all-zero row.
        do {
            for (std::size_t j = 0; j < panel.size(); ++j) {
                const double rate = std::max(lib * truth.rho_spatial(ii, static_cast<Eigen::Index>(panel[j])) / mass, kParamFloor);
                spa.values(ii, static_cast<Eigen::Index>(j)) = sample_poisson(rate, rng);
            }
        } while (spa.values.row(ii).sum() == 0);
    }
    return out;
}

}
