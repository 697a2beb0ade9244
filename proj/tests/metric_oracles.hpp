#ifndef GIMVI_METRIC_ORACLES_HPP
#define GIMVI_METRIC_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gimvi/metrics.hpp"
#include "gimvi/random.hpp"

namespace testing {

// O(n^2) references: full sort of every distance, ties by ascending index.
inline std::vector<std::vector<std::size_t>> brute_knn(const Eigen::MatrixXd& pts, int k) {
    std::vector<std::vector<std::size_t>> out;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        std::vector<std::pair<double, std::size_t>> d;
        for (Eigen::Index j = 0; j < pts.rows(); ++j) {
            if (j != i) {
                d.emplace_back((pts.row(i) - pts.row(j)).squaredNorm(), static_cast<std::size_t>(j));
            }
        }
        std::sort(d.begin(), d.end());
        std::vector<std::size_t> nb;
        for (int t = 0; t < k; ++t) {
            nb.push_back(d[static_cast<std::size_t>(t)].second);
        }
        out.push_back(nb);
    }
    return out;
}

inline double brute_mixing_kl(const Eigen::MatrixXd& pts, const std::vector<int>& labels, int k) {
    std::map<int, double> global;
    for (int l : labels) {
        global[l] += 1.0 / static_cast<double>(labels.size());
    }
    const auto nbs = brute_knn(pts, k);
    const double eps = 1.0 / (k + 2.0);
    double total = 0;
    for (const auto& nb : nbs) {
        double kl = 0;
        for (const auto& [label, pg] : global) {
            double c = 0;
            for (auto j : nb) {
                c += labels[j] == label;
            }
            const double p = (c + eps) / (k + eps * static_cast<double>(global.size()));
            kl += p * std::log(p / pg);
        }
        total += kl;
    }
    return -total / static_cast<double>(nbs.size());
}

inline double brute_purity(const Eigen::MatrixXd& joint, const Eigen::MatrixXd& ref, const std::vector<int>& labels, int k) {
    std::set<int> distinct(labels.begin(), labels.end());
    double sum = 0;
    for (int label : distinct) {
        std::vector<Eigen::Index> members;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == label) {
                members.push_back(static_cast<Eigen::Index>(i));
            }
        }
        const int kk = std::min<int>(k, static_cast<int>(members.size()) - 1);
        Eigen::MatrixXd a(static_cast<Eigen::Index>(members.size()), joint.cols());
        Eigen::MatrixXd b(static_cast<Eigen::Index>(members.size()), ref.cols());
        for (std::size_t i = 0; i < members.size(); ++i) {
            a.row(static_cast<Eigen::Index>(i)) = joint.row(members[i]);
            b.row(static_cast<Eigen::Index>(i)) = ref.row(members[i]);
        }
        const auto na = brute_knn(a, kk);
        const auto nb = brute_knn(b, kk);
        double s = 0;
        for (std::size_t i = 0; i < members.size(); ++i) {
            const std::set<std::size_t> sa(na[i].begin(), na[i].end());
            const std::set<std::size_t> sb(nb[i].begin(), nb[i].end());
            std::size_t inter = 0;
            for (auto x : sa) {
                inter += sb.count(x);
            }
            s += static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
        }
        sum += s / static_cast<double>(members.size());
    }
    return sum / static_cast<double>(distinct.size());
}

// Rank of x_i = 1 + #{x_j < x_i} + #{j != i : x_j = x_i} / 2.
inline double brute_spearman(const std::vector<double>& x, const std::vector<double>& y) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            double less = 0, equal = 0;
            for (std::size_t j = 0; j < v.size(); ++j) {
                less += v[j] < v[i];
                equal += j != i && v[j] == v[i];
            }
            r[i] = 1 + less + equal / 2;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(rx.size());
    my /= static_cast<double>(ry.size());
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

struct MetricInstance {
    std::string name;
    Eigen::MatrixXd joint;
    Eigen::MatrixXd reference;
    std::vector<int> labels;
    std::vector<double> x, y;
};

// Gaussian clouds, integer grids with many distance ties, duplicated points and tied score vectors.
inline std::vector<MetricInstance> metric_instances(const std::vector<int>& sizes, std::uint64_t seed) {
    std::vector<MetricInstance> out;
    gimvi::Rng rng = gimvi::make_rng(seed);
    std::normal_distribution<double> n01;
    std::uniform_int_distribution<int> grid(0, 4);
    std::bernoulli_distribution coin(0.4);
    for (int n : sizes) {
        for (int kind = 0; kind < 3; ++kind) {
            MetricInstance m;
            m.name = (kind == 0 ? "gaussian" : kind == 1 ? "grid" : "duplicates") + std::string("_n") + std::to_string(n);
            const Eigen::Index dim = kind == 1 ? 2 : 3;
            m.joint.resize(n, dim);
            m.reference.resize(n, dim + 1);
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index c = 0; c < dim; ++c) {
                    m.joint(i, c) = kind == 1 ? grid(rng) : n01(rng);
                }
                for (Eigen::Index c = 0; c < dim + 1; ++c) {
                    m.reference(i, c) = kind == 1 ? grid(rng) : n01(rng);
                }
                m.labels.push_back(coin(rng) ? 1 : 0);
                const double v = n01(rng);
                m.x.push_back(kind == 0 ? v : std::round(2 * v));
                m.y.push_back(kind == 0 ? v + n01(rng) : std::round(v + n01(rng)));
            }
            if (kind == 2) {
                for (Eigen::Index i = 1; i < n; i += 3) {
                    m.joint.row(i) = m.joint.row(i - 1);
                    m.reference.row(i) = m.reference.row(i - 1);
                }
            }
            m.labels[0] = 0;
            m.labels[1] = 0;
            m.labels[2] = 1;
            m.labels[3] = 1;
            out.push_back(std::move(m));
        }
    }
    return out;
}

struct OracleReport {
    std::size_t instances = 0;
    std::size_t knn_mismatches = 0;
    double max_score_err = 0;
};

inline OracleReport check_metric_oracles(const std::vector<MetricInstance>& instances, const std::vector<int>& ks) {
    OracleReport r;
    for (const auto& m : instances) {
        ++r.instances;
        const auto n = static_cast<int>(m.joint.rows());
        for (int k : ks) {
            const int kk = std::min(k, n - 1);
            if (gimvi::build_knn(m.joint, kk).neighbors != brute_knn(m.joint, kk)) {
                ++r.knn_mismatches;
            }
            const double mix = gimvi::mixing_kl(m.joint, m.labels, kk);
            r.max_score_err = std::max(r.max_score_err, std::abs(mix - brute_mixing_kl(m.joint, m.labels, kk)));
            const double pur = gimvi::knn_purity_jaccard(m.joint, m.reference, m.labels, k);
            r.max_score_err = std::max(r.max_score_err, std::abs(pur - brute_purity(m.joint, m.reference, m.labels, k)));
        }
        const auto s = gimvi::spearman(m.x, m.y);
        const double expected = brute_spearman(m.x, m.y);
        if (!s) {
            if (!std::isnan(expected)) {
                r.max_score_err = INFINITY;
            }
        } else {
            r.max_score_err = std::max(r.max_score_err, std::abs(*s - expected));
        }
    }
    return r;
}

}

#endif
