#ifndef CALIDET_SIMWORLD_HPP
#define CALIDET_SIMWORLD_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <vector>

#include "calidet/dataset.hpp"
#include "calidet/detections.hpp"
#include "calidet/edge.hpp"
#include "calidet/rng.hpp"

namespace calidet {

/// Generative model of co-occurring labels with boxes, plus an analytic
/// detector whose confidence responds to the injected prior through the
/// per-class alignment term. Stands in for a trained detector at desk
/// scale: every expectation about it is derivable.
struct WorldSpec {
    int k = 0;
    std::vector<Eigen::VectorXd> scenes; // J presence-probability vectors, length K
    Eigen::VectorXd scene_weights;       // mixture weights, sum 1
    double base_logit_present = 0.5;
    double base_logit_absent = -1.5;
    double lambda = 3.0;        // prior-sensitivity coefficient
    double box_jitter_iou = 0.85; // expected IoU of emitted boxes vs ground truth
    double fp_rate = 1.0;       // expected false positives per image
    double logit_noise = 0.8;
    double feat_noise = 0.25;   // feature-map noise for the toy training task
    double canvas = 1000.0;
    std::uint64_t seed = 1;
    std::optional<EdgeMatrix> reference_edge; // empirical E* of the world

    void validate() const {
        if (k < 1) throw DataError("WorldSpec: class count must be positive");
        if (scenes.empty()) throw DataError("WorldSpec: at least one scene required");
        if (scene_weights.size() != static_cast<Eigen::Index>(scenes.size()))
            throw DataError("WorldSpec: scene_weights length mismatch");
        double sum = 0.0;
        for (Eigen::Index j = 0; j < scene_weights.size(); ++j) {
            if (scene_weights(j) < 0) throw DataError("WorldSpec: negative scene weight");
            sum += scene_weights(j);
        }
        if (std::abs(sum - 1.0) > 1e-9) throw DataError("WorldSpec: scene weights must sum to 1");
        for (const auto& s : scenes) {
            if (s.size() != k) throw DataError("WorldSpec: scene profile length mismatch");
            if ((s.array() < 0.0).any() || (s.array() > 1.0).any())
                throw DataError("WorldSpec: presence probability out of [0,1]");
        }
        if (lambda < 0 || !std::isfinite(lambda)) throw DataError("WorldSpec: bad lambda");
        if (box_jitter_iou <= 0.0 || box_jitter_iou > 1.0)
            throw DataError("WorldSpec: box_jitter_iou out of (0,1]");
        if (fp_rate < 0) throw DataError("WorldSpec: negative fp_rate");
    }
};

struct SimDataset {
    Dataset data;
    std::vector<int> scene_of; // latent scene index per image, parallel to data.images
};

namespace detail {

inline LabelSet sample_labels(const WorldSpec& world, Rng& rng, int* scene_out) {
    // Scene choice by cumulative weight, then independent per-class presence.
    const double u = rng.uniform01();
    int scene = 0;
    double cum = 0.0;
    for (Eigen::Index j = 0; j < world.scene_weights.size(); ++j) {
        cum += world.scene_weights(j);
        if (u < cum) {
            scene = static_cast<int>(j);
            break;
        }
        scene = static_cast<int>(j);
    }
    std::vector<int> present;
    const Eigen::VectorXd& probs = world.scenes[static_cast<std::size_t>(scene)];
    for (int c = 0; c < world.k; ++c)
        if (rng.uniform01() < probs(c)) present.push_back(c);
    if (scene_out) *scene_out = scene;
    return LabelSet(std::move(present));
}

inline Box random_box(const WorldSpec& world, int cls, Rng& rng) {
    const double w = rng.uniform(0.05 * world.canvas, 0.3 * world.canvas);
    const double h = rng.uniform(0.05 * world.canvas, 0.3 * world.canvas);
    const double x = rng.uniform(0.0, world.canvas - w);
    const double y = rng.uniform(0.0, world.canvas - h);
    return Box{cls, x, y, w, h};
}

/// Expected IoU of a box shifted by (s*u*w, s*v*h) with u,v ~ U[-1,1],
/// by grid quadrature over the positive quadrant (symmetry).
inline double expected_iou_for_shift_scale(double s) {
    const int grid = 96;
    double acc = 0.0;
    for (int a = 0; a < grid; ++a) {
        const double fx = s * (a + 0.5) / grid;
        for (int b = 0; b < grid; ++b) {
            const double fy = s * (b + 0.5) / grid;
            const double inter = std::max(0.0, 1.0 - fx) * std::max(0.0, 1.0 - fy);
            acc += inter / (2.0 - inter);
        }
    }
    return acc / (grid * grid);
}

/// Shift scale whose expected IoU equals the target; memoized.
inline double shift_scale_for_iou(double target_iou) {
    static std::mutex mu;
    static std::map<double, double> memo;
    std::lock_guard lock(mu);
    auto it = memo.find(target_iou);
    if (it != memo.end()) return it->second;
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 60; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (expected_iou_for_shift_scale(mid) > target_iou)
            lo = mid;
        else
            hi = mid;
    }
    const double s = 0.5 * (lo + hi);
    memo[target_iou] = s;
    return s;
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace detail

/// Seeded random world with strongly structured co-occurrence: per scene,
/// classes are mostly near-always-present or near-never-present, so some
/// pairs co-occur almost deterministically while others are near-exclusive.
/// The reference edge is measured empirically over 10,000 sampled label
/// sets rather than assumed.
inline WorldSpec gen_world(int k, int n_scenes, std::uint64_t seed) {
    if (k < 1 || n_scenes < 1) throw DataError("gen_world: k and scene count must be positive");
    WorldSpec w;
    w.k = k;
    w.seed = seed;
    Rng root(seed);

    Rng scen = root.child("scenes");
    for (int j = 0; j < n_scenes; ++j) {
        Eigen::VectorXd probs(k);
        int high = 0;
        for (int c = 0; c < k; ++c) {
            const double u = scen.uniform01();
            if (u < 0.38) {
                probs(c) = scen.uniform(0.9, 1.0);
                ++high;
            } else if (u < 0.9) {
                probs(c) = scen.uniform(0.0, 0.06);
            } else {
                probs(c) = scen.uniform(0.3, 0.7);
            }
        }
        if (high == 0) probs(static_cast<int>(scen.uniform_int(static_cast<std::uint64_t>(k)))) =
            scen.uniform(0.9, 1.0);
        w.scenes.push_back(std::move(probs));
    }
    // Near-uniform mixture weights keep any single scene from dominating.
    Eigen::VectorXd weights(n_scenes);
    for (int j = 0; j < n_scenes; ++j) weights(j) = 0.6 + 0.8 * scen.uniform01();
    w.scene_weights = weights / weights.sum();

    // Cap the marginal presence of every class so self-calibration with
    // the default step size stays in the contractive regime
    // (eta * mean confidence < 2).
    for (int c = 0; c < k; ++c) {
        double marginal = 0.0;
        for (int j = 0; j < n_scenes; ++j)
            marginal += w.scene_weights(j) * w.scenes[static_cast<std::size_t>(j)](c);
        if (marginal > 0.55) {
            const double scale = 0.55 / marginal;
            for (int j = 0; j < n_scenes; ++j) w.scenes[static_cast<std::size_t>(j)](c) *= scale;
        }
    }

    Rng ref = root.child("refedge");
    std::vector<LabelSet> sets;
    sets.reserve(10000);
    for (int i = 0; i < 10000; ++i) sets.push_back(detail::sample_labels(w, ref, nullptr));
    w.reference_edge = edge_from_label_sets(k, sets);
    w.validate();
    return w;
}

/// Sample n images: scene by weight, per-class presence by scene profile,
/// one uniformly placed box per present class.
inline SimDataset gen_dataset(const WorldSpec& world, int n, std::uint64_t seed) {
    world.validate();
    if (n < 0) throw DataError("gen_dataset: negative image count");
    SimDataset out;
    out.data.k = world.k;
    out.data.class_ids = contiguous_ids(world.k);
    Rng root(seed);
    for (int i = 0; i < n; ++i) {
        Rng rng = root.child("image", static_cast<std::uint64_t>(i));
        int scene = 0;
        LabelSet labels = detail::sample_labels(world, rng, &scene);
        std::vector<Box> boxes;
        for (int c : labels) boxes.push_back(detail::random_box(world, c, rng));
        out.data.images.push_back(
            make_image_record(i + 1, world.canvas, world.canvas, std::move(boxes)));
        out.scene_of.push_back(scene);
    }
    out.data.validate();
    return out;
}

/// Analytic detector. For each class the logit is the present/absent base
/// plus lambda times the alignment between the injected prior and this
/// image's own single-sample edge, plus seeded noise. Present classes emit
/// their ground-truth box jittered to the configured expected IoU;
/// Poisson-many false positives use absent-class logits. Noise draws
/// depend only on (seed, image_id), never on the injected prior.
inline DetectionSet sim_detect(const WorldSpec& world, const ImageRecord& image,
                               const EdgeMatrix& injected, std::uint64_t seed) {
    world.validate();
    if (injected.k() != world.k) throw DataError("sim_detect: prior size does not match world");
    image.labels.require_within(world.k);

    const EdgeMatrix own =
        edge_from_label_sets(world.k, std::vector<LabelSet>{image.labels});
    const Eigen::VectorXd align = alignment_coefficients(injected, own);
    const double shift_scale = detail::shift_scale_for_iou(world.box_jitter_iou);

    Rng rng = Rng(seed).child("detect", static_cast<std::uint64_t>(image.image_id));
    DetectionSet out;
    out.image_id = image.image_id;

    for (const Box& gt : image.boxes) {
        const double noise = rng.normal();
        const double u = rng.uniform(-1.0, 1.0);
        const double v = rng.uniform(-1.0, 1.0);
        const double logit =
            world.base_logit_present + world.lambda * align(gt.cls) + world.logit_noise * noise;
        Detection d;
        d.cls = gt.cls;
        d.score = detail::sigmoid(logit);
        d.x = gt.x + u * shift_scale * gt.w;
        d.y = gt.y + v * shift_scale * gt.h;
        d.w = gt.w;
        d.h = gt.h;
        out.detections.push_back(d);
    }

    const int n_fp = rng.poisson(world.fp_rate);
    for (int f = 0; f < n_fp; ++f) {
        const int cls = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(world.k)));
        const double noise = rng.normal();
        Box box = detail::random_box(world, cls, rng);
        const double logit =
            world.base_logit_absent + world.lambda * align(cls) + world.logit_noise * noise;
        Detection d;
        d.cls = cls;
        d.score = detail::sigmoid(logit);
        d.x = box.x;
        d.y = box.y;
        d.w = box.w;
        d.h = box.h;
        out.detections.push_back(d);
    }
    return out;
}

/// Bind a world into the generic detector interface (seeded by the world).
inline Detector make_sim_detector(WorldSpec world) {
    world.validate();
    detail::shift_scale_for_iou(world.box_jitter_iou); // warm the memo once
    return [world = std::move(world)](const ImageRecord& image, const EdgeMatrix& prior) {
        return sim_detect(world, image, prior, world.seed);
    };
}

/// Fixed random linear map of the latent scene profile plus per-image
/// noise: the toy stand-in for backbone features. Columns are images.
inline Eigen::MatrixXd scene_features(const WorldSpec& world, int d, const SimDataset& ds) {
    if (d < 1) throw DataError("scene_features: feature dimension must be positive");
    Rng map_rng = Rng(world.seed).child("featmap", static_cast<std::uint64_t>(d));
    const Eigen::MatrixXd feat_map = Eigen::MatrixXd::NullaryExpr(
        d, world.k, [&]() { return map_rng.normal() / std::sqrt(static_cast<double>(world.k)); });

    Eigen::MatrixXd features(d, static_cast<Eigen::Index>(ds.data.images.size()));
    for (std::size_t i = 0; i < ds.data.images.size(); ++i) {
        const Eigen::VectorXd& profile = world.scenes[static_cast<std::size_t>(ds.scene_of[i])];
        Rng noise = Rng(world.seed).child(
            "featnoise", static_cast<std::uint64_t>(ds.data.images[i].image_id));
        Eigen::VectorXd eps =
            Eigen::VectorXd::NullaryExpr(d, [&]() { return noise.normal(0.0, world.feat_noise); });
        features.col(static_cast<Eigen::Index>(i)) = feat_map * profile + eps;
    }
    return features;
}

// ---------------------------------------------------------------------------
// Serialization

inline json world_to_json(const WorldSpec& w) {
    json scenes = json::array();
    for (const auto& s : w.scenes) {
        json row = json::array();
        for (Eigen::Index i = 0; i < s.size(); ++i) row.push_back(s(i));
        scenes.push_back(std::move(row));
    }
    json weights = json::array();
    for (Eigen::Index i = 0; i < w.scene_weights.size(); ++i) weights.push_back(w.scene_weights(i));
    json out{{"k", w.k},
             {"scenes", std::move(scenes)},
             {"scene_weights", std::move(weights)},
             {"base_logit_present", w.base_logit_present},
             {"base_logit_absent", w.base_logit_absent},
             {"lambda", w.lambda},
             {"box_jitter_iou", w.box_jitter_iou},
             {"fp_rate", w.fp_rate},
             {"logit_noise", w.logit_noise},
             {"feat_noise", w.feat_noise},
             {"canvas", w.canvas},
             {"seed", w.seed}};
    if (w.reference_edge) out["reference_edge"] = edge_to_json(*w.reference_edge);
    return out;
}

inline WorldSpec world_from_json(const json& j) {
    WorldSpec w;
    try {
        w.k = j.at("k").get<int>();
        for (const json& row : j.at("scenes")) {
            Eigen::VectorXd s(static_cast<Eigen::Index>(row.size()));
            for (std::size_t i = 0; i < row.size(); ++i)
                s(static_cast<Eigen::Index>(i)) = row.at(i).get<double>();
            w.scenes.push_back(std::move(s));
        }
        const json& weights = j.at("scene_weights");
        w.scene_weights.resize(static_cast<Eigen::Index>(weights.size()));
        for (std::size_t i = 0; i < weights.size(); ++i)
            w.scene_weights(static_cast<Eigen::Index>(i)) = weights.at(i).get<double>();
        w.base_logit_present = j.at("base_logit_present").get<double>();
        w.base_logit_absent = j.at("base_logit_absent").get<double>();
        w.lambda = j.at("lambda").get<double>();
        w.box_jitter_iou = j.at("box_jitter_iou").get<double>();
        w.fp_rate = j.at("fp_rate").get<double>();
        w.logit_noise = j.at("logit_noise").get<double>();
        w.feat_noise = j.at("feat_noise").get<double>();
        w.canvas = j.at("canvas").get<double>();
        w.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("reference_edge")) w.reference_edge = edge_from_json(j.at("reference_edge"));
    } catch (const json::exception& ex) {
        throw DataError(std::string("world file: ") + ex.what());
    }
    w.validate();
    return w;
}

} // namespace calidet

#endif // CALIDET_SIMWORLD_HPP
