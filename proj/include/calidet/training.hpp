#ifndef CALIDET_TRAINING_HPP
#define CALIDET_TRAINING_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "calidet/califormer.hpp"
#include "calidet/dataset.hpp"
#include "calidet/edge.hpp"
#include "calidet/rng.hpp"
#include "calidet/simworld.hpp"

namespace calidet {

struct LomaConfig {
    double gamma = 20.0;

    void validate() const {
        if (gamma < 0 || !std::isfinite(gamma)) throw DataError("LomaConfig: gamma must be >= 0");
    }
};

/// Candidate priors for training-time edge sampling plus the Gaussian
/// noise applied on top.
struct EdgeSamplerConfig {
    double sigma = 0.16;
    bool use_ex = true;
    bool use_eb = true;
    bool use_et = true;

    void validate() const {
        if (sigma < 0 || !std::isfinite(sigma)) throw DataError("EdgeSamplerConfig: bad sigma");
        if (!use_ex && !use_eb && !use_et)
            throw DataError("EdgeSamplerConfig: at least one source must be enabled");
    }
};

/// Logit manipulation loss: each class logit is multiplied by the negated
/// alignment between the injected prior and the sample's own edge, then
/// averaged over classes and scaled by gamma. Zero at the flat prior,
/// negative when the prior agrees with the sample, positive when flipped.
/// The single division by K*K keeps half-integer edges exact.
inline double loma_loss(const Eigen::VectorXd& logits, const EdgeMatrix& injected,
                        const EdgeMatrix& sample_edge, double gamma) {
    if (logits.size() != injected.k()) throw DataError("loma_loss: dimension mismatch");
    const double kk = static_cast<double>(injected.k()) * static_cast<double>(injected.k());
    return -(gamma * logits.dot(alignment_column_sums(injected, sample_edge))) / kk;
}

/// d(loma_loss)/d(logits): constant in the logits (the loss is linear).
inline Eigen::VectorXd loma_logit_gradient(const EdgeMatrix& injected,
                                           const EdgeMatrix& sample_edge, double gamma) {
    const double kk = static_cast<double>(injected.k()) * static_cast<double>(injected.k());
    Eigen::VectorXd acc = alignment_column_sums(injected, sample_edge);
    for (Eigen::Index j = 0; j < acc.size(); ++j) acc(j) = -(gamma * acc(j)) / kk;
    return acc;
}

/// Gaussian noise on every entry, clipped to [0,1], diagonal reset to 1.
inline EdgeMatrix perturb_edge(const EdgeMatrix& base, double sigma, Rng& rng) {
    Eigen::MatrixXd v = base.values();
    if (sigma > 0.0) {
        for (Eigen::Index i = 0; i < v.rows(); ++i)
            for (Eigen::Index j = 0; j < v.cols(); ++j)
                v(i, j) = std::clamp(v(i, j) + rng.normal(0.0, sigma), 0.0, 1.0);
    }
    v.diagonal().setOnes();
    return EdgeMatrix(base.class_ids(), std::move(v));
}

/// Draw a training prior: uniform choice among the enabled sources, plus
/// i.i.d. Gaussian noise on every entry, clipped to [0,1], diagonal reset
/// to 1. Re-sampled for every mini-batch.
inline EdgeMatrix sample_edge(const EdgeMatrix& e_x, const EdgeMatrix& e_b, const EdgeMatrix& e_t,
                              const EdgeSamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    if (e_x.k() != e_b.k() || e_b.k() != e_t.k())
        throw DataError("sample_edge: dimension mismatch");

    std::vector<const EdgeMatrix*> sources;
    if (cfg.use_ex) sources.push_back(&e_x);
    if (cfg.use_eb) sources.push_back(&e_b);
    if (cfg.use_et) sources.push_back(&e_t);
    const EdgeMatrix& base =
        *sources[static_cast<std::size_t>(rng.uniform_int(sources.size()))];
    return perturb_edge(base, cfg.sigma, rng);
}

// ---------------------------------------------------------------------------
// Toy multi-label training loop

struct ToyTrainConfig {
    int k = 6;
    int d = 32;
    int epochs = 30;
    double learning_rate = 0.03;
    int batch_size = 16;
    std::uint64_t seed = 1;
    LomaConfig loma;
    EdgeSamplerConfig sampler;
    double rho = 0.2;
    WorldSpec world; // data generator; world.k must equal k
    int train_images = 1500;
    int eval_images = 600;
    int encoder_layers = 3;
    int encoder_heads = 8;
    int ffn_mult = 4;
    bool pre_norm = true;
    bool scale_bias = false;

    void validate() const {
        if (k < 1 || d < 1 || epochs < 1 || batch_size < 1 || train_images < 1 ||
            eval_images < 1)
            throw DataError("ToyTrainConfig: counts must be positive");
        if (!(learning_rate > 0) || !std::isfinite(learning_rate))
            throw DataError("ToyTrainConfig: bad learning rate");
        loma.validate();
        sampler.validate();
        world.validate();
        if (world.k != k) throw DataError("ToyTrainConfig: world class count differs from k");
    }

    CaliFormerConfig encoder_config() const {
        CaliFormerConfig c;
        c.d = d;
        c.k = k;
        c.layers = encoder_layers;
        c.heads = encoder_heads;
        c.ffn_mult = ffn_mult;
        c.pre_norm = pre_norm;
        c.scale_bias = scale_bias;
        return c;
    }
};

struct ToyModel {
    CaliFormerParams params;
    NodeEmbeddings nodes;
    CalibratedHead head;
};

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0, cls_loss = 0.0, loma_loss = 0.0;
    double map_ex_bar = 0.0, map_e0 = 0.0, map_et = 0.0, map_ex = 0.0;

    json to_json() const {
        return json{{"epoch", epoch},
                    {"loss", loss},
                    {"cls_loss", cls_loss},
                    {"loma_loss", loma_loss},
                    {"map_ex_bar", map_ex_bar},
                    {"map_e0", map_e0},
                    {"map_et", map_et},
                    {"map_ex", map_ex}};
    }
};

struct ToyTrainResult {
    ToyModel model;
    std::vector<EpochMetrics> epochs;
    EdgeMatrix e_t = EdgeMatrix::flat_prior(1); // training-set statistics
};

namespace detail {

inline double stable_bce_with_logit(double logit, double target) {
    // max(s,0) - s*y + log(1 + exp(-|s|))
    return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

} // namespace detail

/// Classification mAP for the multi-label toy task: per class, images are
/// ranked by logit and average precision is taken over the positives;
/// classes with no positive image are skipped. 0-100 scale.
inline double multilabel_map(const Eigen::MatrixXd& logits,
                             const std::vector<LabelSet>& labels) {
    const int k = static_cast<int>(logits.rows());
    const auto n = static_cast<std::size_t>(logits.cols());
    if (labels.size() != n) throw DataError("multilabel_map: label count mismatch");

    double sum_ap = 0.0;
    int classes = 0;
    std::vector<std::size_t> order(n);
    for (int c = 0; c < k; ++c) {
        std::size_t positives = 0;
        for (const auto& l : labels) positives += l.contains(c) ? 1 : 0;
        if (positives == 0) continue;
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double la = logits(c, static_cast<Eigen::Index>(a));
            const double lb = logits(c, static_cast<Eigen::Index>(b));
            if (la != lb) return la > lb;
            return a < b;
        });
        double ap = 0.0;
        std::size_t hits = 0;
        for (std::size_t rank = 0; rank < n; ++rank) {
            if (labels[order[rank]].contains(c)) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
            }
        }
        sum_ap += ap / static_cast<double>(positives);
        ++classes;
    }
    return classes > 0 ? 100.0 * sum_ap / classes : 0.0;
}

/// Evaluate a toy model over a feature/label set under one injected prior
/// per image (per_image empty -> the single `fixed` prior for all).
inline Eigen::MatrixXd toy_logits(const ToyModel& model, const Eigen::MatrixXd& features,
                                  const std::vector<DeltaEdge>& per_image,
                                  const DeltaEdge* fixed) {
    const auto n = features.cols();
    Eigen::MatrixXd logits(model.head.weight.cols(), n);
    if (fixed) {
        const Eigen::MatrixXd v_prime = encoder_forward(model.params, model.nodes, *fixed);
        logits = calibrate_logits_batch(model.head, v_prime, features);
    } else {
        if (static_cast<Eigen::Index>(per_image.size()) != n)
            throw DataError("toy_logits: per-image prior count mismatch");
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::MatrixXd v_prime =
                encoder_forward(model.params, model.nodes, per_image[static_cast<std::size_t>(i)]);
            logits.col(i) = calibrate_logits(model.head, v_prime, features.col(i));
        }
    }
    return logits;
}

/// Train the toy multi-label model: sigmoid cross-entropy plus the LoMa
/// term, with the injected prior drawn fresh for every mini-batch and fed
/// through delta -> encoder -> calibrated head. Deterministic under a
/// fixed seed. Each epoch is scored on a held-out set under the flipped,
/// flat, training-set, and per-sample priors.
inline ToyTrainResult train_toy(const ToyTrainConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);

    const SimDataset train = gen_dataset(cfg.world, cfg.train_images, root.child("traindata").seed());
    const SimDataset eval = gen_dataset(cfg.world, cfg.eval_images, root.child("evaldata").seed());
    const Eigen::MatrixXd train_feat = scene_features(cfg.world, cfg.d, train);
    const Eigen::MatrixXd eval_feat = scene_features(cfg.world, cfg.d, eval);

    std::vector<LabelSet> train_labels, eval_labels;
    for (const auto& im : train.data.images) train_labels.push_back(im.labels);
    for (const auto& im : eval.data.images) eval_labels.push_back(im.labels);

    const EdgeMatrix e_t = dataset_edge(train.data);
    const EdgeMatrix e_0 = EdgeMatrix::flat_prior(cfg.k);

    std::vector<EdgeMatrix> train_ex;
    train_ex.reserve(train_labels.size());
    for (const auto& l : train_labels)
        train_ex.push_back(edge_from_label_sets(cfg.k, std::vector<LabelSet>{l}));

    std::vector<DeltaEdge> eval_dx, eval_dxbar;
    for (const auto& l : eval_labels) {
        const EdgeMatrix ex = edge_from_label_sets(cfg.k, std::vector<LabelSet>{l});
        eval_dx.push_back(delta(ex));
        eval_dxbar.push_back(delta(flip_edge(ex)));
    }
    const DeltaEdge d0 = DeltaEdge::zero(cfg.k);
    const DeltaEdge dt = delta(e_t);

    ToyModel model;
    const CaliFormerConfig enc_cfg = cfg.encoder_config();
    {
        Rng init_nodes = root.child("init_nodes");
        Rng init_encoder = root.child("init_encoder");
        Rng init_head = root.child("init_head");
        model.nodes = NodeEmbeddings::init(cfg.d, cfg.k, init_nodes);
        model.params = CaliFormerParams::init(enc_cfg, init_encoder);
        model.head = CalibratedHead::init(cfg.d, cfg.k, init_head, cfg.rho);
    }

    Rng sampler_rng = root.child("sampler");
    ToyTrainResult result;
    result.e_t = e_t;
    const int n_train = static_cast<int>(train_labels.size());
    std::int64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<std::size_t>(n_train));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = root.child("shuffle", static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        double epoch_cls = 0.0, epoch_loma = 0.0;
        std::int64_t n_batches = 0;

        for (int start = 0; start + cfg.batch_size <= n_train; start += cfg.batch_size) {
            const int bsz = cfg.batch_size;
            std::vector<int> batch(order.begin() + start, order.begin() + start + bsz);

            std::vector<LabelSet> batch_labels;
            for (int idx : batch) batch_labels.push_back(train_labels[static_cast<std::size_t>(idx)]);
            const EdgeMatrix e_b = edge_from_label_sets(cfg.k, batch_labels);

            // Which candidate was drawn decides whether the prior is shared
            // across the batch or per-sample.
            std::vector<const EdgeMatrix*> sources;
            if (cfg.sampler.use_ex) sources.push_back(nullptr); // marker: per-sample
            if (cfg.sampler.use_eb) sources.push_back(&e_b);
            if (cfg.sampler.use_et) sources.push_back(&e_t);
            const EdgeMatrix* shared =
                sources[static_cast<std::size_t>(sampler_rng.uniform_int(sources.size()))];

            Eigen::MatrixXd features(cfg.d, bsz);
            for (int b = 0; b < bsz; ++b)
                features.col(b) = train_feat.col(batch[static_cast<std::size_t>(b)]);

            CaliFormerGrads grads = CaliFormerGrads::zeros(model.params, cfg.k);
            Eigen::MatrixXd dhead_w = Eigen::MatrixXd::Zero(cfg.d, cfg.k);
            Eigen::VectorXd dhead_b = Eigen::VectorXd::Zero(cfg.k);
            double batch_cls = 0.0, batch_loma = 0.0;
            const double inv_b = 1.0 / static_cast<double>(bsz);

            auto accumulate_sample = [&](const EdgeMatrix& injected, int sample_idx,
                                         const Eigen::VectorXd& feature) {
                const EdgeMatrix& ex = train_ex[static_cast<std::size_t>(sample_idx)];
                const DeltaEdge bias = delta(injected);
                EncoderTape tape;
                const Eigen::MatrixXd v_prime =
                    encoder_forward(model.params, model.nodes, bias, &tape);
                const Eigen::VectorXd logits = calibrate_logits(model.head, v_prime, feature);

                const LabelSet& y = train_labels[static_cast<std::size_t>(sample_idx)];
                Eigen::VectorXd dlogits(cfg.k);
                double cls = 0.0;
                for (int c = 0; c < cfg.k; ++c) {
                    const double target = y.contains(c) ? 1.0 : 0.0;
                    cls += detail::stable_bce_with_logit(logits(c), target);
                    dlogits(c) = detail::sigmoid(logits(c)) - target;
                }
                const double lm = loma_loss(logits, injected, ex, cfg.loma.gamma);
                dlogits += loma_logit_gradient(injected, ex, cfg.loma.gamma);

                batch_cls += cls * inv_b;
                batch_loma += lm * inv_b;

                const Eigen::MatrixXd dS = dlogits * inv_b;
                HeadGrads hg = head_backward(model.head, feature, dS);
                dhead_w += hg.weight;
                dhead_b += hg.bias;
                encoder_backward(model.params, tape, hg.v_prime, grads);
            };

            try {
                if (shared == nullptr) {
                    // Per-sample edge: each sample trains against its own prior.
                    for (int b = 0; b < bsz; ++b) {
                        const int idx = batch[static_cast<std::size_t>(b)];
                        const EdgeMatrix injected =
                            perturb_edge(train_ex[static_cast<std::size_t>(idx)],
                                         cfg.sampler.sigma, sampler_rng);
                        accumulate_sample(injected, idx, features.col(b));
                    }
                } else {
                    const EdgeMatrix injected =
                        perturb_edge(*shared, cfg.sampler.sigma, sampler_rng);
                    for (int b = 0; b < bsz; ++b)
                        accumulate_sample(injected, batch[static_cast<std::size_t>(b)],
                                          features.col(b));
                }
            } catch (const NumericError& ex) {
                throw NumericError("train_toy: diverged at step " + std::to_string(step) + ": " +
                                   ex.what());
            }

            const double batch_loss = batch_cls + batch_loma;
            if (!std::isfinite(batch_loss))
                throw NumericError("train_toy: non-finite loss at step " + std::to_string(step));

            // Plain SGD.
            const double lr = cfg.learning_rate;
            model.head.weight -= lr * dhead_w;
            model.head.bias -= lr * dhead_b;
            model.nodes.columns -= lr * grads.nodes;
            for (std::size_t l = 0; l < model.params.layers.size(); ++l) {
                EncoderLayerParams& p = model.params.layers[l];
                const EncoderLayerParams& g = grads.layers[l];
                p.wq -= lr * g.wq;
                p.wk -= lr * g.wk;
                p.wv -= lr * g.wv;
                p.wo -= lr * g.wo;
                p.bq -= lr * g.bq;
                p.bk -= lr * g.bk;
                p.bv -= lr * g.bv;
                p.bo -= lr * g.bo;
                p.w1 -= lr * g.w1;
                p.w2 -= lr * g.w2;
                p.b1 -= lr * g.b1;
                p.b2 -= lr * g.b2;
                p.ln1_gain -= lr * g.ln1_gain;
                p.ln1_offset -= lr * g.ln1_offset;
                p.ln2_gain -= lr * g.ln2_gain;
                p.ln2_offset -= lr * g.ln2_offset;
            }

            epoch_cls += batch_cls;
            epoch_loma += batch_loma;
            ++n_batches;
            ++step;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.cls_loss = epoch_cls / static_cast<double>(n_batches);
        em.loma_loss = epoch_loma / static_cast<double>(n_batches);
        em.loss = em.cls_loss + em.loma_loss;
        em.map_ex_bar = multilabel_map(toy_logits(model, eval_feat, eval_dxbar, nullptr), eval_labels);
        em.map_e0 = multilabel_map(toy_logits(model, eval_feat, {}, &d0), eval_labels);
        em.map_et = multilabel_map(toy_logits(model, eval_feat, {}, &dt), eval_labels);
        em.map_ex = multilabel_map(toy_logits(model, eval_feat, eval_dx, nullptr), eval_labels);
        result.epochs.push_back(em);
    }

    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Config serialization (field-for-field mirror of ToyTrainConfig)

inline json toy_config_to_json(const ToyTrainConfig& cfg) {
    return json{{"k", cfg.k},
                {"d", cfg.d},
                {"epochs", cfg.epochs},
                {"learning_rate", cfg.learning_rate},
                {"batch_size", cfg.batch_size},
                {"seed", cfg.seed},
                {"loma", {{"gamma", cfg.loma.gamma}}},
                {"sampler",
                 {{"sigma", cfg.sampler.sigma},
                  {"use_ex", cfg.sampler.use_ex},
                  {"use_eb", cfg.sampler.use_eb},
                  {"use_et", cfg.sampler.use_et}}},
                {"rho", cfg.rho},
                {"world", world_to_json(cfg.world)},
                {"train_images", cfg.train_images},
                {"eval_images", cfg.eval_images},
                {"encoder_layers", cfg.encoder_layers},
                {"encoder_heads", cfg.encoder_heads},
                {"ffn_mult", cfg.ffn_mult},
                {"pre_norm", cfg.pre_norm},
                {"scale_bias", cfg.scale_bias}};
}

inline ToyTrainConfig toy_config_from_json(const json& j) {
    ToyTrainConfig cfg;
    try {
        cfg.k = j.at("k").get<int>();
        cfg.d = j.at("d").get<int>();
        cfg.epochs = j.at("epochs").get<int>();
        cfg.learning_rate = j.at("learning_rate").get<double>();
        cfg.batch_size = j.at("batch_size").get<int>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.loma.gamma = j.at("loma").at("gamma").get<double>();
        const json& s = j.at("sampler");
        cfg.sampler.sigma = s.at("sigma").get<double>();
        cfg.sampler.use_ex = s.at("use_ex").get<bool>();
        cfg.sampler.use_eb = s.at("use_eb").get<bool>();
        cfg.sampler.use_et = s.at("use_et").get<bool>();
        cfg.rho = j.at("rho").get<double>();
        const json& w = j.at("world");
        cfg.world = w.is_string() ? world_from_json(load_json(w.get<std::string>()))
                                  : world_from_json(w);
        cfg.train_images = j.at("train_images").get<int>();
        cfg.eval_images = j.at("eval_images").get<int>();
        cfg.encoder_layers = j.value("encoder_layers", 3);
        cfg.encoder_heads = j.value("encoder_heads", 8);
        cfg.ffn_mult = j.value("ffn_mult", 4);
        cfg.pre_norm = j.value("pre_norm", true);
        cfg.scale_bias = j.value("scale_bias", false);
    } catch (const json::exception& ex) {
        throw DataError(std::string("train config: ") + ex.what());
    }
    return cfg;
}

} // namespace calidet

#endif // CALIDET_TRAINING_HPP
