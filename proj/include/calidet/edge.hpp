#ifndef CALIDET_EDGE_HPP
#define CALIDET_EDGE_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "calidet/errors.hpp"

namespace calidet {

using json = nlohmann::json;

/// sign with sign(0) = 0; flat-fallback columns carry no signal downstream.
inline double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// Set of class indices present in one image. Stored sorted and unique.
class LabelSet {
public:
    LabelSet() = default;
    LabelSet(std::initializer_list<int> classes) : LabelSet(std::vector<int>(classes)) {}
    explicit LabelSet(std::vector<int> classes) : classes_(std::move(classes)) {
        std::sort(classes_.begin(), classes_.end());
        classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
        if (!classes_.empty() && classes_.front() < 0)
            throw DataError("LabelSet: negative class index");
    }

    void require_within(int k) const {
        if (!classes_.empty() && classes_.back() >= k)
            throw DataError("LabelSet: class index " + std::to_string(classes_.back()) +
                            " out of range for k=" + std::to_string(k));
    }

    bool contains(int c) const {
        return std::binary_search(classes_.begin(), classes_.end(), c);
    }
    std::size_t size() const { return classes_.size(); }
    bool empty() const { return classes_.empty(); }
    auto begin() const { return classes_.begin(); }
    auto end() const { return classes_.end(); }
    const std::vector<int>& indices() const { return classes_; }
    bool operator==(const LabelSet& o) const { return classes_ == o.classes_; }

private:
    std::vector<int> classes_;
};

inline std::vector<std::int64_t> contiguous_ids(int k) {
    std::vector<std::int64_t> ids(static_cast<std::size_t>(k));
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
}

/// K x K conditional-probability matrix, entry (i,j) = P(i | j).
/// Diagonal is exactly 1; every entry lies in [0,1]. class_ids carries the
/// external category id for each index (strictly increasing).
class EdgeMatrix {
public:
    EdgeMatrix(std::vector<std::int64_t> class_ids, Eigen::MatrixXd values)
        : class_ids_(std::move(class_ids)), values_(std::move(values)) {
        validate();
    }

    static EdgeMatrix flat_prior(int k) { return flat_prior(contiguous_ids(check_k(k))); }

    static EdgeMatrix flat_prior(std::vector<std::int64_t> class_ids) {
        const auto k = static_cast<Eigen::Index>(class_ids.size());
        Eigen::MatrixXd v = Eigen::MatrixXd::Constant(k, k, 0.5);
        v.diagonal().setOnes();
        return EdgeMatrix(std::move(class_ids), std::move(v));
    }

    int k() const { return static_cast<int>(values_.rows()); }
    const std::vector<std::int64_t>& class_ids() const { return class_ids_; }
    const Eigen::MatrixXd& values() const { return values_; }
    double operator()(int i, int j) const { return values_(i, j); }

    bool operator==(const EdgeMatrix& o) const {
        return class_ids_ == o.class_ids_ && values_ == o.values_;
    }

private:
    static int check_k(int k) {
        if (k < 1) throw DataError("EdgeMatrix: class count must be positive");
        return k;
    }

    void validate() const {
        const auto n = static_cast<Eigen::Index>(class_ids_.size());
        if (n < 1) throw DataError("EdgeMatrix: class count must be positive");
        if (values_.rows() != n || values_.cols() != n)
            throw DataError("EdgeMatrix: values shape does not match class count");
        for (std::size_t i = 1; i < class_ids_.size(); ++i)
            if (class_ids_[i] <= class_ids_[i - 1])
                throw DataError("EdgeMatrix: class_ids must be strictly increasing");
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                const double v = values_(i, j);
                if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                    throw DataError("EdgeMatrix: entry out of [0,1] at (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");
            }
            if (values_(i, i) != 1.0)
                throw DataError("EdgeMatrix: diagonal entry must be exactly 1");
        }
    }

    std::vector<std::int64_t> class_ids_;
    Eigen::MatrixXd values_;
};

/// E - E0: the attention-bias form of a prior. Entries in [-0.5, 0.5],
/// zero diagonal.
struct DeltaEdge {
    Eigen::MatrixXd values;

    explicit DeltaEdge(Eigen::MatrixXd v) : values(std::move(v)) {
        if (values.rows() != values.cols() || values.rows() < 1)
            throw DataError("DeltaEdge: values must be square and non-empty");
        for (Eigen::Index i = 0; i < values.rows(); ++i) {
            for (Eigen::Index j = 0; j < values.cols(); ++j) {
                const double x = values(i, j);
                if (!std::isfinite(x) || x < -0.5 || x > 0.5)
                    throw DataError("DeltaEdge: entry out of [-0.5, 0.5]");
            }
            if (values(i, i) != 0.0) throw DataError("DeltaEdge: diagonal must be zero");
        }
    }

    static DeltaEdge zero(int k) { return DeltaEdge(Eigen::MatrixXd::Zero(k, k)); }

    int k() const { return static_cast<int>(values.rows()); }
};

/// Conditional-probability statistics of a collection of label sets:
/// P(i|j) = #(i and j co-present) / #(j present), with the flat-prior 0.5
/// fallback for classes never present. One sample yields the per-sample
/// edge, a mini-batch the batch edge, the whole set the population edge.
inline EdgeMatrix edge_from_label_sets(std::vector<std::int64_t> class_ids,
                                       std::span<const LabelSet> samples) {
    const int k = static_cast<int>(class_ids.size());
    if (k < 1) throw DataError("edge_from_label_sets: class count must be positive");

    std::vector<std::int64_t> present(static_cast<std::size_t>(k), 0);
    std::vector<std::int64_t> joint(static_cast<std::size_t>(k) * k, 0);
    for (const LabelSet& s : samples) {
        s.require_within(k);
        for (int j : s) {
            ++present[static_cast<std::size_t>(j)];
            for (int i : s) ++joint[static_cast<std::size_t>(i) * k + j];
        }
    }

    Eigen::MatrixXd v(k, k);
    for (int j = 0; j < k; ++j) {
        const std::int64_t cj = present[static_cast<std::size_t>(j)];
        for (int i = 0; i < k; ++i) {
            v(i, j) = cj > 0 ? static_cast<double>(joint[static_cast<std::size_t>(i) * k + j]) /
                                   static_cast<double>(cj)
                             : 0.5;
        }
    }
    v.diagonal().setOnes();
    return EdgeMatrix(std::move(class_ids), std::move(v));
}

inline EdgeMatrix edge_from_label_sets(int k, std::span<const LabelSet> samples) {
    if (k < 1) throw DataError("edge_from_label_sets: class count must be positive");
    return edge_from_label_sets(contiguous_ids(k), samples);
}

inline EdgeMatrix edge_from_label_sets(int k, const std::vector<LabelSet>& samples) {
    return edge_from_label_sets(k, std::span<const LabelSet>(samples));
}

/// Off-diagonal v -> 1 - v; flips 0 and 1, fixes 0.5, keeps the diagonal.
/// Applied to a per-sample edge this produces the deliberately misleading
/// prior used as a sanity probe.
inline EdgeMatrix flip_edge(const EdgeMatrix& e) {
    Eigen::MatrixXd v = Eigen::MatrixXd::Ones(e.k(), e.k()) - e.values();
    v.diagonal().setOnes();
    return EdgeMatrix(e.class_ids(), std::move(v));
}

inline DeltaEdge delta(const EdgeMatrix& e) {
    Eigen::MatrixXd v = e.values().array() - 0.5;
    v.diagonal().setZero();
    return DeltaEdge(std::move(v));
}

/// Column sums of sign(E_x - E0) (.) (E - E0), before the 1/K averaging.
/// Kept separate so callers can defer divisions and stay exact on
/// half-integer edges.
inline Eigen::VectorXd alignment_column_sums(const EdgeMatrix& injected,
                                             const EdgeMatrix& sample_edge) {
    if (injected.k() != sample_edge.k())
        throw DataError("alignment_coefficients: dimension mismatch");
    const int k = injected.k();
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(k);
    for (int j = 0; j < k; ++j) {
        for (int i = 0; i < k; ++i) {
            if (i == j) continue; // both priors have a unit diagonal
            acc(j) += sign_of(sample_edge(i, j) - 0.5) * (injected(i, j) - 0.5);
        }
    }
    return acc;
}

/// Per-class alignment between an injected prior and a sample's own edge:
/// m_j = (1/K) sum_i sign(E_x - E0)(i,j) * (E - E0)(i,j). Positive when the
/// injected prior points the same way as the sample, zero at the flat
/// prior, and zero on columns of classes absent from the sample.
inline Eigen::VectorXd alignment_coefficients(const EdgeMatrix& injected,
                                              const EdgeMatrix& sample_edge) {
    return alignment_column_sums(injected, sample_edge) /
           static_cast<double>(injected.k());
}

/// MAE plus the 0/50/90/97/100-th percentiles of |a - b|.
struct EdgeCompare {
    double mae = 0.0;
    std::array<double, 5> percentiles{}; // 0, 50, 90, 97, 100
};

namespace detail {
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
    const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}
} // namespace detail

inline EdgeCompare edge_mae(const EdgeMatrix& a, const EdgeMatrix& b) {
    if (a.k() != b.k()) throw DataError("edge_mae: dimension mismatch");
    if (a.class_ids() != b.class_ids()) throw DataError("edge_mae: class_ids mismatch");

    const int k = a.k();
    std::vector<double> diffs;
    diffs.reserve(static_cast<std::size_t>(k) * k);
    double sum = 0.0;
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            const double d = std::abs(a(i, j) - b(i, j));
            diffs.push_back(d);
            sum += d;
        }
    std::sort(diffs.begin(), diffs.end());

    EdgeCompare out;
    out.mae = sum / static_cast<double>(k) / static_cast<double>(k);
    const std::array<double, 5> ps{0.0, 50.0, 90.0, 97.0, 100.0};
    for (std::size_t i = 0; i < ps.size(); ++i)
        out.percentiles[i] = detail::percentile_sorted(diffs, ps[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: {"k": <int>, "class_ids": [...], "values": [[...], ...]},
// row-major. Loading re-validates every invariant.

inline json edge_to_json(const EdgeMatrix& e) {
    json values = json::array();
    for (int i = 0; i < e.k(); ++i) {
        json row = json::array();
        for (int j = 0; j < e.k(); ++j) row.push_back(e(i, j));
        values.push_back(std::move(row));
    }
    return json{{"k", e.k()}, {"class_ids", e.class_ids()}, {"values", std::move(values)}};
}

inline EdgeMatrix edge_from_json(const json& j) {
    try {
        const int k = j.at("k").get<int>();
        auto ids = j.at("class_ids").get<std::vector<std::int64_t>>();
        if (static_cast<int>(ids.size()) != k)
            throw DataError("edge file: class_ids length does not match k");
        const json& rows = j.at("values");
        if (!rows.is_array() || static_cast<int>(rows.size()) != k)
            throw DataError("edge file: values must hold k rows");
        Eigen::MatrixXd v(k, k);
        for (int i = 0; i < k; ++i) {
            const json& row = rows.at(static_cast<std::size_t>(i));
            if (!row.is_array() || static_cast<int>(row.size()) != k)
                throw DataError("edge file: row length does not match k");
            for (int c = 0; c < k; ++c) v(i, c) = row.at(static_cast<std::size_t>(c)).get<double>();
        }
        return EdgeMatrix(std::move(ids), std::move(v));
    } catch (const json::exception& ex) {
        throw DataError(std::string("edge file: ") + ex.what());
    }
}

inline json delta_to_json(const DeltaEdge& d) {
    json values = json::array();
    for (int i = 0; i < d.k(); ++i) {
        json row = json::array();
        for (int j = 0; j < d.k(); ++j) row.push_back(d.values(i, j));
        values.push_back(std::move(row));
    }
    return json{{"k", d.k()}, {"values", std::move(values)}};
}

inline void save_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

inline json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& ex) {
        throw DataError(path + ": " + ex.what());
    }
}

inline void save_edge(const std::string& path, const EdgeMatrix& e) {
    save_json(path, edge_to_json(e));
}

inline EdgeMatrix load_edge(const std::string& path) { return edge_from_json(load_json(path)); }

/// CSV inspection export: header row of class ids, then K rows of K values.
inline std::string edge_to_csv(const EdgeMatrix& e) {
    std::ostringstream out;
    out.precision(17);
    for (int j = 0; j < e.k(); ++j) out << (j ? "," : "") << e.class_ids()[static_cast<std::size_t>(j)];
    out << "\n";
    for (int i = 0; i < e.k(); ++i) {
        for (int j = 0; j < e.k(); ++j) out << (j ? "," : "") << e(i, j);
        out << "\n";
    }
    return out.str();
}

} // namespace calidet

#endif // CALIDET_EDGE_HPP
