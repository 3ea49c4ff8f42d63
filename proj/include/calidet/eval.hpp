#ifndef CALIDET_EVAL_HPP
#define CALIDET_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "calidet/dataset.hpp"
#include "calidet/detections.hpp"
#include "calidet/edge.hpp"

namespace calidet {

inline double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

struct EvalConfig {
    std::vector<double> iou_thresholds = default_thresholds();
    int recall_points = 101;
    double score_threshold = 0.0;
    int max_detections = 0; // per image; 0 = uncapped
    std::optional<std::pair<double, double>> area_breaks; // (small/medium, medium/large)

    static std::vector<double> default_thresholds() {
        std::vector<double> t;
        for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
        return t;
    }

    void validate() const {
        if (iou_thresholds.empty()) throw DataError("EvalConfig: no IoU thresholds");
        double prev = 0.0;
        for (double t : iou_thresholds) {
            if (t <= prev || t > 1.0)
                throw DataError("EvalConfig: thresholds must be strictly increasing in (0,1]");
            prev = t;
        }
        if (recall_points < 2) throw DataError("EvalConfig: need at least 2 recall points");
    }
};

/// AP numbers on the 0-100 reporting scale.
struct Metrics {
    double ap = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    std::optional<double> ap_small, ap_medium, ap_large;
    std::vector<double> per_threshold;
    std::int64_t n_images = 0, n_gt = 0, n_det = 0;

    json to_json() const {
        json j{{"ap", ap},   {"ap50", ap50},     {"ap75", ap75},
               {"per_threshold", per_threshold}, {"n_images", n_images},
               {"n_gt", n_gt}, {"n_det", n_det}};
        if (ap_small) j["ap_s"] = *ap_small;
        if (ap_medium) j["ap_m"] = *ap_medium;
        if (ap_large) j["ap_l"] = *ap_large;
        return j;
    }
};

namespace detail {

struct FlatDetection {
    std::size_t image_index;
    std::size_t det_index; // order within its DetectionSet
    double score;
    Box box;
};

/// Deterministic global detection order: score desc, image_id asc,
/// arrival order asc.
inline bool detection_order(const FlatDetection& a, const FlatDetection& b,
                            const std::vector<std::int64_t>& image_ids) {
    if (a.score != b.score) return a.score > b.score;
    const auto ia = image_ids[a.image_index], ib = image_ids[b.image_index];
    if (ia != ib) return ia < ib;
    return a.det_index < b.det_index;
}

/// Average precision for one class at one IoU threshold over pre-sorted
/// detections. Greedy matching: each detection takes the unmatched valid
/// ground truth with the highest IoU >= threshold (ties -> lowest index);
/// failing that it may match an ignored ground truth and drop out of the
/// precision-recall curve entirely.
inline double ap_one_class(const std::vector<FlatDetection>& dets,
                           const std::vector<std::vector<Box>>& valid_gt,
                           const std::vector<std::vector<Box>>& ignored_gt,
                           double thr, int recall_points,
                           const std::optional<std::pair<double, double>>& det_area_range) {
    std::size_t n_gt = 0;
    for (const auto& v : valid_gt) n_gt += v.size();
    if (n_gt == 0) return -1.0; // class absent from ground truth: skip

    std::vector<std::vector<bool>> used(valid_gt.size());
    for (std::size_t i = 0; i < valid_gt.size(); ++i) used[i].assign(valid_gt[i].size(), false);

    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const FlatDetection& d : dets) {
        const auto& gts = valid_gt[d.image_index];
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[d.image_index][g]) continue;
            const double v = iou(d.box, gts[g]);
            if (v >= thr && v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0) {
            used[d.image_index][static_cast<std::size_t>(best)] = true;
            ++tp;
        } else {
            bool ignored = false;
            for (const Box& g : ignored_gt[d.image_index]) {
                if (iou(d.box, g) >= thr) {
                    ignored = true;
                    break;
                }
            }
            if (!ignored && det_area_range) {
                const double a = d.box.area();
                ignored = a < det_area_range->first || a >= det_area_range->second;
            }
            if (ignored) continue; // out of scope for this evaluation
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }

    // Suffix max turns the raw curve into the interpolated envelope.
    std::vector<double> env(precision.size());
    double running = 0.0;
    for (std::size_t i = precision.size(); i-- > 0;) {
        running = std::max(running, precision[i]);
        env[i] = running;
    }

    double ap = 0.0;
    for (int p = 0; p < recall_points; ++p) {
        const double r = static_cast<double>(p) / static_cast<double>(recall_points - 1);
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) ap += env[static_cast<std::size_t>(it - recall.begin())];
    }
    return ap / static_cast<double>(recall_points);
}

} // namespace detail

/// COCO-style average precision: greedy highest-IoU matching per class and
/// threshold, 101-point interpolated precision, AP averaged over classes
/// with at least one ground-truth instance, then over thresholds.
inline Metrics average_precision(const Dataset& gts, const std::vector<DetectionSet>& preds,
                                 const EvalConfig& cfg = {}) {
    cfg.validate();
    std::map<std::int64_t, std::size_t> image_index;
    for (std::size_t i = 0; i < gts.images.size(); ++i)
        image_index[gts.images[i].image_id] = i;

    // Flatten + optionally cap detections per image by score.
    std::vector<std::vector<detail::FlatDetection>> per_class(
        static_cast<std::size_t>(gts.k));
    std::vector<std::int64_t> image_ids;
    image_ids.reserve(gts.images.size());
    for (const auto& im : gts.images) image_ids.push_back(im.image_id);

    std::int64_t n_det = 0;
    for (const DetectionSet& ds : preds) {
        auto it = image_index.find(ds.image_id);
        if (it == image_index.end())
            throw DataError("average_precision: predictions for unknown image " +
                            std::to_string(ds.image_id));
        std::vector<std::size_t> order(ds.detections.size());
        std::iota(order.begin(), order.end(), 0);
        if (cfg.max_detections > 0 &&
            ds.detections.size() > static_cast<std::size_t>(cfg.max_detections)) {
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return ds.detections[a].score > ds.detections[b].score;
            });
            order.resize(static_cast<std::size_t>(cfg.max_detections));
            std::sort(order.begin(), order.end());
        }
        for (std::size_t oi : order) {
            const Detection& d = ds.detections[oi];
            if (d.cls < 0 || d.cls >= gts.k)
                throw DataError("average_precision: detection class out of range");
            if (d.score < cfg.score_threshold) continue;
            per_class[static_cast<std::size_t>(d.cls)].push_back(
                detail::FlatDetection{it->second, oi, d.score, Box{d.cls, d.x, d.y, d.w, d.h}});
            ++n_det;
        }
    }
    for (auto& dets : per_class)
        std::sort(dets.begin(), dets.end(),
                  [&](const detail::FlatDetection& a, const detail::FlatDetection& b) {
                      return detail::detection_order(a, b, image_ids);
                  });

    struct AreaRange {
        std::optional<std::pair<double, double>> range; // nullopt = everything
    };
    std::vector<AreaRange> ranges{{std::nullopt}};
    if (cfg.area_breaks) {
        const auto [s, m] = *cfg.area_breaks;
        const double inf = std::numeric_limits<double>::infinity();
        ranges.push_back({std::make_pair(0.0, s)});
        ranges.push_back({std::make_pair(s, m)});
        ranges.push_back({std::make_pair(m, inf)});
    }

    Metrics out;
    out.n_images = static_cast<std::int64_t>(gts.images.size());
    for (const auto& im : gts.images) out.n_gt += static_cast<std::int64_t>(im.boxes.size());
    out.n_det = n_det;

    std::vector<double> range_ap(ranges.size(), 0.0);
    for (std::size_t ri = 0; ri < ranges.size(); ++ri) {
        // Split ground truth into in-range (valid) and out-of-range (ignored).
        std::vector<std::vector<std::vector<Box>>> valid(
            static_cast<std::size_t>(gts.k),
            std::vector<std::vector<Box>>(gts.images.size()));
        auto ignored = valid;
        for (std::size_t i = 0; i < gts.images.size(); ++i) {
            for (const Box& b : gts.images[i].boxes) {
                const bool in_range =
                    !ranges[ri].range || (b.area() >= ranges[ri].range->first &&
                                          b.area() < ranges[ri].range->second);
                auto& target = in_range ? valid : ignored;
                target[static_cast<std::size_t>(b.cls)][i].push_back(b);
            }
        }

        std::vector<double> threshold_ap;
        for (double thr : cfg.iou_thresholds) {
            double sum = 0.0;
            int classes = 0;
            for (int c = 0; c < gts.k; ++c) {
                const double ap = detail::ap_one_class(
                    per_class[static_cast<std::size_t>(c)], valid[static_cast<std::size_t>(c)],
                    ignored[static_cast<std::size_t>(c)], thr, cfg.recall_points,
                    ranges[ri].range);
                if (ap >= 0.0) {
                    sum += ap;
                    ++classes;
                }
            }
            threshold_ap.push_back(classes > 0 ? 100.0 * sum / classes : 0.0);
        }
        range_ap[ri] =
            std::accumulate(threshold_ap.begin(), threshold_ap.end(), 0.0) /
            static_cast<double>(threshold_ap.size());
        if (ri == 0) {
            out.per_threshold = threshold_ap;
            out.ap = range_ap[0];
            for (std::size_t t = 0; t < cfg.iou_thresholds.size(); ++t) {
                if (std::abs(cfg.iou_thresholds[t] - 0.50) < 1e-12) out.ap50 = threshold_ap[t];
                if (std::abs(cfg.iou_thresholds[t] - 0.75) < 1e-12) out.ap75 = threshold_ap[t];
            }
        }
    }
    if (cfg.area_breaks) {
        out.ap_small = range_ap[1];
        out.ap_medium = range_ap[2];
        out.ap_large = range_ap[3];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prior sweep (standard evaluation with different injected priors)

/// A named prior: either a fixed matrix (e0, et, eb, ...) or a per-image
/// rule (the image's own edge, or its deliberately flipped version).
struct NamedPrior {
    enum class Kind { Fixed, PerImageOwn, PerImageFlipped };
    std::string name;
    Kind kind = Kind::Fixed;
    std::optional<EdgeMatrix> matrix; // required for Fixed

    static NamedPrior fixed(std::string name, EdgeMatrix m) {
        return NamedPrior{std::move(name), Kind::Fixed, std::move(m)};
    }
    static NamedPrior per_image_own(std::string name = "ex") {
        return NamedPrior{std::move(name), Kind::PerImageOwn, std::nullopt};
    }
    static NamedPrior per_image_flipped(std::string name = "ebar") {
        return NamedPrior{std::move(name), Kind::PerImageFlipped, std::nullopt};
    }
};

struct PriorSweepRow {
    std::string name;
    double epsilon = 0.0; // mean MAE vs the default prior
    Metrics metrics;
    double delta_ap = 0.0; // vs the default-prior row
};

struct PriorSweepReport {
    std::vector<PriorSweepRow> rows;

    json to_json() const {
        json out = json::array();
        for (const auto& r : rows) {
            json j = r.metrics.to_json();
            j["prior"] = r.name;
            j["epsilon"] = r.epsilon;
            j["delta_ap"] = r.delta_ap;
            out.push_back(std::move(j));
        }
        return json{{"rows", std::move(out)}};
    }

    std::string to_text() const {
        std::ostringstream os;
        os << std::left << std::setw(8) << "prior" << std::right << std::setw(9) << "eps"
           << std::setw(9) << "AP" << std::setw(9) << "AP50" << std::setw(9) << "AP75"
           << std::setw(10) << "dAP" << "\n";
        os << std::fixed;
        for (const auto& r : rows) {
            os << std::left << std::setw(8) << r.name << std::right << std::setprecision(3)
               << std::setw(9) << r.epsilon << std::setprecision(2) << std::setw(9)
               << r.metrics.ap << std::setw(9) << r.metrics.ap50 << std::setw(9)
               << r.metrics.ap75 << std::setw(10) << std::showpos << r.delta_ap
               << std::noshowpos << "\n";
        }
        return os.str();
    }
};

namespace detail {

inline int canonical_prior_rank(const std::string& name) {
    static const std::vector<std::string> order{"ebar", "e0", "et", "ev", "eb", "ex"};
    for (std::size_t i = 0; i < order.size(); ++i)
        if (name == order[i]) return static_cast<int>(i);
    return static_cast<int>(order.size());
}

} // namespace detail

/// Evaluate a detector once per prior; the epsilon column is the MAE of
/// the injected prior against the default prior (mean over images for
/// per-image priors). Rows come back in the canonical order
/// ebar, e0, et, ev, eb, ex, then anything else.
inline PriorSweepReport prior_sweep(const Detector& detector, const Dataset& data,
                                    const EdgeMatrix& e_t, std::vector<NamedPrior> priors,
                                    const EvalConfig& cfg = {}) {
    std::stable_sort(priors.begin(), priors.end(), [](const NamedPrior& a, const NamedPrior& b) {
        return detail::canonical_prior_rank(a.name) < detail::canonical_prior_rank(b.name);
    });

    PriorSweepReport report;
    for (const NamedPrior& prior : priors) {
        std::vector<DetectionSet> preds;
        preds.reserve(data.images.size());
        double eps_sum = 0.0;
        for (const auto& im : data.images) {
            EdgeMatrix injected = [&]() {
                switch (prior.kind) {
                    case NamedPrior::Kind::Fixed:
                        if (!prior.matrix) throw DataError("prior_sweep: fixed prior without matrix");
                        return *prior.matrix;
                    case NamedPrior::Kind::PerImageOwn:
                        return edge_from_label_sets(data.class_ids,
                                                    std::vector<LabelSet>{im.labels});
                    case NamedPrior::Kind::PerImageFlipped:
                    default:
                        return flip_edge(edge_from_label_sets(
                            data.class_ids, std::vector<LabelSet>{im.labels}));
                }
            }();
            eps_sum += edge_mae(injected, e_t).mae;
            preds.push_back(detector(im, injected));
        }
        PriorSweepRow row;
        row.name = prior.name;
        row.epsilon = data.images.empty() ? 0.0 : eps_sum / static_cast<double>(data.images.size());
        row.metrics = average_precision(data, preds, cfg);
        report.rows.push_back(std::move(row));
    }
    for (auto& row : report.rows) {
        for (const auto& base : report.rows)
            if (base.name == "et") row.delta_ap = row.metrics.ap - base.metrics.ap;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Subset evaluation (simulated relation shift)

struct SubsetEvalReport {
    int subset_size = 0;
    int n_subsets = 0;
    double mean_epsilon = 0.0; // mean MAE(E_b, E_t) over subsets
    Metrics mean_default;      // injected E_t, averaged over subsets
    Metrics mean_subset;       // injected per-subset E_b, averaged

    json to_json() const {
        return json{{"subset_size", subset_size},
                    {"n_subsets", n_subsets},
                    {"mean_epsilon", mean_epsilon},
                    {"et", mean_default.to_json()},
                    {"eb", mean_subset.to_json()},
                    {"delta_ap", mean_subset.ap - mean_default.ap}};
    }
};

namespace detail {

inline void accumulate_metrics(Metrics& acc, const Metrics& m) {
    acc.ap += m.ap;
    acc.ap50 += m.ap50;
    acc.ap75 += m.ap75;
    acc.n_images += m.n_images;
    acc.n_gt += m.n_gt;
    acc.n_det += m.n_det;
}

inline void scale_metrics(Metrics& acc, double inv) {
    acc.ap *= inv;
    acc.ap50 *= inv;
    acc.ap75 *= inv;
}

} // namespace detail

/// Split the data into equal-sized non-overlapping subsets and evaluate
/// each twice: under the default prior and under the subset's own
/// statistics. Metrics are re-accumulated per subset and averaged.
inline SubsetEvalReport subset_eval(const Detector& detector, const Dataset& data,
                                    const EdgeMatrix& e_t, int subset_size, std::uint64_t seed,
                                    const EvalConfig& cfg = {}) {
    SubsetEvalReport report;
    report.subset_size = subset_size;
    const std::vector<Dataset> subsets = split_subsets(data, subset_size, seed);
    report.n_subsets = static_cast<int>(subsets.size());
    if (subsets.empty()) return report;

    for (const Dataset& sub : subsets) {
        const EdgeMatrix e_b = dataset_edge(sub);
        report.mean_epsilon += edge_mae(e_b, e_t).mae;

        std::vector<DetectionSet> preds_default, preds_subset;
        for (const auto& im : sub.images) {
            preds_default.push_back(detector(im, e_t));
            preds_subset.push_back(detector(im, e_b));
        }
        detail::accumulate_metrics(report.mean_default,
                                   average_precision(sub, preds_default, cfg));
        detail::accumulate_metrics(report.mean_subset,
                                   average_precision(sub, preds_subset, cfg));
    }
    const double inv = 1.0 / static_cast<double>(subsets.size());
    report.mean_epsilon *= inv;
    detail::scale_metrics(report.mean_default, inv);
    detail::scale_metrics(report.mean_subset, inv);
    return report;
}

} // namespace calidet

#endif // CALIDET_EVAL_HPP
