#ifndef CALIDET_SELFCAL_HPP
#define CALIDET_SELFCAL_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calidet/dataset.hpp"
#include "calidet/detections.hpp"
#include "calidet/edge.hpp"
#include "calidet/eval.hpp"

namespace calidet {

struct SelfCalConfig {
    double eta = 4.0;              // step size
    int max_iterations = 50;
    double presence_threshold = 0.5; // tau: detection counts as presence
    double confidence_floor = 0.0;   // detections below this are ignored for z
    double convergence_eps = 1e-6;   // stop when step_max falls below
    bool repeat_rows = true;         // Z repeats mean z across rows (column j scaled by z_j)
    bool running_stats = false;      // exponential window over past prediction statistics
    double running_alpha = 0.3;

    void validate() const {
        if (!(eta > 0) || !std::isfinite(eta)) throw DataError("SelfCalConfig: eta must be > 0");
        if (max_iterations < 1) throw DataError("SelfCalConfig: max_iterations must be positive");
        if (presence_threshold < 0 || presence_threshold > 1)
            throw DataError("SelfCalConfig: presence threshold out of [0,1]");
        if (confidence_floor < 0 || confidence_floor > 1)
            throw DataError("SelfCalConfig: confidence floor out of [0,1]");
        if (running_stats && (running_alpha <= 0 || running_alpha > 1))
            throw DataError("SelfCalConfig: running alpha out of (0,1]");
    }
};

/// Per-class maximum confidence among an image's predictions (subject to
/// the floor), zero for classes never predicted.
inline Eigen::VectorXd z_vector(const DetectionSet& preds, int k, double floor = 0.0) {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(k);
    for (const Detection& d : preds.detections) {
        if (d.cls < 0 || d.cls >= k) throw DataError("z_vector: class index out of range");
        if (d.score < floor) continue;
        z(d.cls) = std::max(z(d.cls), d.score);
    }
    return z;
}

/// Statistics of the model's own predictions: an image's predicted
/// presence set is every class with a detection at or above tau, then the
/// usual conditional-probability counting (flat fallback included).
inline EdgeMatrix predictions_to_edge(const std::vector<DetectionSet>& all_preds, int k,
                                      double tau = 0.5) {
    std::vector<LabelSet> sets;
    sets.reserve(all_preds.size());
    for (const DetectionSet& ds : all_preds) {
        std::vector<int> present;
        for (const Detection& d : ds.detections)
            if (d.score >= tau) present.push_back(d.cls);
        sets.push_back(LabelSet(std::move(present)));
    }
    return edge_from_label_sets(k, sets);
}

enum class RepeatAxis { Rows, Columns };

/// One damped update: E_c' = clip(E_c + eta * Z (.) (E_i - E_c)), diagonal
/// reset to 1. Z repeats the mean confidence vector across rows, so the
/// statistics conditioned on class j move at a rate set by how confidently
/// class j is being predicted.
inline EdgeMatrix selfcal_step(const EdgeMatrix& e_c, const EdgeMatrix& e_i,
                               const Eigen::VectorXd& z_bar, double eta,
                               RepeatAxis axis = RepeatAxis::Rows) {
    if (e_c.k() != e_i.k() || z_bar.size() != e_c.k())
        throw DataError("selfcal_step: shape mismatch");
    if (e_c.class_ids() != e_i.class_ids())
        throw DataError("selfcal_step: class_ids mismatch");
    const int k = e_c.k();
    Eigen::MatrixXd v(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            const double zij = axis == RepeatAxis::Rows ? z_bar(j) : z_bar(i);
            v(i, j) = std::clamp(e_c(i, j) + eta * zij * (e_i(i, j) - e_c(i, j)), 0.0, 1.0);
        }
    v.diagonal().setOnes();
    return EdgeMatrix(e_c.class_ids(), std::move(v));
}

struct TraceStep {
    int iteration = 0;
    EdgeMatrix e_c = EdgeMatrix::flat_prior(1); // after this iteration's update
    double step_mae = 0.0;
    double step_max = 0.0;
    Eigen::VectorXd effective_step; // eta * mean z, per class
    std::optional<Metrics> metrics; // evaluated under the pre-update E_c

    json to_json() const {
        json j{{"iteration", iteration},
               {"step_mae", step_mae},
               {"step_max", step_max},
               {"e_c", edge_to_json(e_c)}};
        json eff = json::array();
        for (Eigen::Index i = 0; i < effective_step.size(); ++i) eff.push_back(effective_step(i));
        j["effective_step"] = std::move(eff);
        if (metrics) j["metrics"] = metrics->to_json();
        return j;
    }
};

struct CalibrationTrace {
    std::vector<TraceStep> steps;
    bool aborted = false;
    std::string abort_reason;

    const EdgeMatrix& final_edge() const {
        if (steps.empty()) throw DataError("CalibrationTrace: empty trace");
        return steps.back().e_c;
    }
};

/// Algorithm: initialize E_c from the default prior, then repeatedly
/// detect on the whole sample set under the current E_c, compute the
/// prediction statistics and mean confidence vector, and damp E_c towards
/// the statistics. Stops at max_iterations or when the largest per-entry
/// change falls below the epsilon. A detector failure aborts with the
/// partial trace. When `eval_cfg` is given, each iteration's detections
/// are scored against the ground truth and recorded.
inline CalibrationTrace selfcal_run(const Detector& detector, const Dataset& images,
                                    const SelfCalConfig& cfg, const EdgeMatrix& e_t,
                                    const EvalConfig* eval_cfg = nullptr) {
    cfg.validate();
    if (images.k != e_t.k()) throw DataError("selfcal_run: prior size does not match dataset");

    CalibrationTrace trace;
    EdgeMatrix e_c = e_t;
    std::optional<EdgeMatrix> running;

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        std::vector<DetectionSet> preds;
        preds.reserve(images.images.size());
        try {
            for (const auto& im : images.images) preds.push_back(detector(im, e_c));
        } catch (const std::exception& ex) {
            trace.aborted = true;
            trace.abort_reason = ex.what();
            return trace;
        }

        EdgeMatrix e_i = predictions_to_edge(preds, images.k, cfg.presence_threshold);
        if (cfg.running_stats) {
            if (!running) {
                running = e_i;
            } else {
                Eigen::MatrixXd blend = (1.0 - cfg.running_alpha) * running->values() +
                                        cfg.running_alpha * e_i.values();
                blend.diagonal().setOnes();
                running = EdgeMatrix(e_i.class_ids(), std::move(blend));
            }
            e_i = *running;
        }

        Eigen::VectorXd z_bar = Eigen::VectorXd::Zero(images.k);
        for (const DetectionSet& p : preds)
            z_bar += z_vector(p, images.k, cfg.confidence_floor);
        if (!images.images.empty()) z_bar /= static_cast<double>(images.images.size());

        const EdgeMatrix next = selfcal_step(e_c, e_i, z_bar, cfg.eta,
                                             cfg.repeat_rows ? RepeatAxis::Rows
                                                             : RepeatAxis::Columns);

        TraceStep step;
        step.iteration = iter;
        const Eigen::MatrixXd diff = (next.values() - e_c.values()).cwiseAbs();
        step.step_mae = diff.sum() / static_cast<double>(images.k) / static_cast<double>(images.k);
        step.step_max = diff.maxCoeff();
        step.effective_step = cfg.eta * z_bar;
        if (eval_cfg) step.metrics = average_precision(images, preds, *eval_cfg);
        step.e_c = next;
        trace.steps.push_back(std::move(step));

        e_c = next;
        if (trace.steps.back().step_max < cfg.convergence_eps) break;
    }
    return trace;
}

} // namespace calidet

#endif // CALIDET_SELFCAL_HPP
