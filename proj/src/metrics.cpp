#include "gimvi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <map>
#include <queue>
#include <utility>

#include "gimvi/errors.hpp"

namespace gimvi {

namespace {

using Candidate = std::pair<double, std::size_t>;

double squared_distance(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b, Eigen::Index j) {
    double s = 0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        const double diff = a(i, c) - b(j, c);
        s += diff * diff;
    }
    return s;
}

// Bounded max-heap over (distance, index); the top is the current worst of the k best.
std::vector<std::size_t> nearest(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& queries, Eigen::Index q,
                                 std::size_t k, std::optional<std::size_t> exclude) {
    std::priority_queue<Candidate> heap;
    for (Eigen::Index r = 0; r < reference.rows(); ++r) {
        const auto idx = static_cast<std::size_t>(r);
        if (exclude && *exclude == idx) {
            continue;
        }
        const Candidate c{squared_distance(queries, q, reference, r), idx};
        if (heap.size() < k) {
            heap.push(c);
        } else if (c < heap.top()) {
            heap.pop();
            heap.push(c);
        }
    }
    std::vector<std::size_t> out(heap.size());
    for (std::size_t i = out.size(); i-- > 0;) {
        out[i] = heap.top().second;
        heap.pop();
    }
    return out;
}

double jaccard(std::vector<std::size_t> a, std::vector<std::size_t> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    const double uni = static_cast<double>(a.size() + b.size() - common.size());
    return uni == 0 ? 1.0 : static_cast<double>(common.size()) / uni;
}

}

KnnGraph build_knn(const Eigen::MatrixXd& points, int k) {
    require(k >= 1, "build_knn: k must be >= 1");
    require(static_cast<Eigen::Index>(k) < points.rows(), "build_knn: k must be smaller than the number of cells");
    KnnGraph g;
    g.k = k;
    g.neighbors.resize(static_cast<std::size_t>(points.rows()));
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        g.neighbors[static_cast<std::size_t>(i)] = nearest(points, points, i, static_cast<std::size_t>(k), static_cast<std::size_t>(i));
    }
    return g;
}

std::vector<std::vector<std::size_t>> knn_query(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& queries, int k) {
    require(k >= 1, "knn_query: k must be >= 1");
    require(reference.rows() >= k, "knn_query: k exceeds the number of reference points");
    require(reference.cols() == queries.cols(), "knn_query: dimension mismatch");
    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(queries.rows()));
    for (Eigen::Index q = 0; q < queries.rows(); ++q) {
        out[static_cast<std::size_t>(q)] = nearest(reference, queries, q, static_cast<std::size_t>(k), std::nullopt);
    }
    return out;
}

double mixing_kl(const Eigen::MatrixXd& embedding, std::span<const int> labels, int k) {
    require(static_cast<Eigen::Index>(labels.size()) == embedding.rows(), "mixing_kl: one label per cell is required");
    std::map<int, std::size_t> global;
    for (int l : labels) {
        ++global[l];
    }
    require(global.size() >= 2, "mixing_kl: at least two distinct labels are required");

    std::vector<int> values;
    std::vector<double> p_global;
    for (const auto& [label, count] : global) {
        values.push_back(label);
        p_global.push_back(static_cast<double>(count) / static_cast<double>(labels.size()));
    }
    const double eps = 1.0 / (k + 2.0);
    const double denom = k + eps * static_cast<double>(values.size());

    const KnnGraph graph = build_knn(embedding, k);
    double total = 0;
    std::vector<double> counts(values.size());
    for (const auto& nb : graph.neighbors) {
        std::fill(counts.begin(), counts.end(), 0.0);
        for (auto j : nb) {
            const auto pos = std::lower_bound(values.begin(), values.end(), labels[j]) - values.begin();
            counts[static_cast<std::size_t>(pos)] += 1;
        }
        double kl = 0;
        for (std::size_t l = 0; l < values.size(); ++l) {
            const double p = (counts[l] + eps) / denom;
            kl += p * std::log(p / p_global[l]);
        }
        total += kl;
    }
    return -total / static_cast<double>(graph.neighbors.size());
}

double knn_purity_jaccard(const Eigen::MatrixXd& joint, const Eigen::MatrixXd& reference, std::span<const int> labels, int k) {
    require(joint.rows() == reference.rows(), "knn_purity_jaccard: embeddings must cover the same cells");
    require(static_cast<Eigen::Index>(labels.size()) == joint.rows(), "knn_purity_jaccard: one label per cell is required");
    require(k >= 1, "knn_purity_jaccard: k must be >= 1");

    std::map<int, std::vector<Eigen::Index>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        groups[labels[i]].push_back(static_cast<Eigen::Index>(i));
    }
    double sum = 0;
    for (const auto& [label, rows] : groups) {
        require(rows.size() >= 2, "knn_purity_jaccard: every label needs at least two cells");
        const int k_eff = std::min<int>(k, static_cast<int>(rows.size()) - 1);
        Eigen::MatrixXd a(static_cast<Eigen::Index>(rows.size()), joint.cols());
        Eigen::MatrixXd b(static_cast<Eigen::Index>(rows.size()), reference.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            a.row(static_cast<Eigen::Index>(i)) = joint.row(rows[i]);
            b.row(static_cast<Eigen::Index>(i)) = reference.row(rows[i]);
        }
        const KnnGraph ga = build_knn(a, k_eff);
        const KnnGraph gb = build_knn(b, k_eff);
        double group_sum = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            group_sum += jaccard(ga.neighbors[i], gb.neighbors[i]);
        }
        sum += group_sum / static_cast<double>(rows.size());
    }
    return sum / static_cast<double>(groups.size());
}

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) {
            ranks[order[t]] = r;
        }
        i = j + 1;
    }
    return ranks;
}

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "spearman: vectors differ in length");
    require(a.size() >= 3, "spearman: at least three observations are required");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean = (n + 1) / 2;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const double da = ra[i] - mean;
        const double db = rb[i] - mean;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0 || sbb == 0) {
        return std::nullopt;
    }
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> median(std::span<const std::optional<double>> values) {
    std::vector<double> present;
    for (const auto& v : values) {
        if (v) {
            present.push_back(*v);
        }
    }
    if (present.empty()) {
        return std::nullopt;
    }
    std::sort(present.begin(), present.end());
    const std::size_t n = present.size();
    return n % 2 == 1 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
}

RelativeChange relative_change(std::span<const std::optional<double>> method, std::span<const std::optional<double>> reference) {
    require(method.size() == reference.size(), "relative_change: gene sets differ");
    require(!method.empty(), "relative_change: no genes");
    RelativeChange rc;
    for (std::size_t g = 0; g < method.size(); ++g) {
        if (!method[g] || !reference[g] || std::abs(*reference[g]) < 1e-6) {
            rc.delta.emplace_back();
            ++rc.excluded;
            continue;
        }
        rc.delta.emplace_back((*method[g] - *reference[g]) / std::abs(*reference[g]));
    }
    require(rc.excluded < method.size(), "relative_change: no gene has a usable score in both methods");
    rc.median = median(rc.delta);
    return rc;
}

std::vector<int> default_k_sweep(std::size_t n_cells) {
    std::vector<int> out;
    if (n_cells < 2) {
        return out;
    }
    for (int k : {10, 20, 50, 100, 200}) {
        const int clipped = std::min<int>(k, static_cast<int>(n_cells) - 1);
        if (out.empty() || out.back() != clipped) {
            out.push_back(clipped);
        }
    }
    return out;
}

}
