// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Usage: acceptance [path-to-cli-binary]
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "calidet/califormer.hpp"
#include "calidet/dataset.hpp"
#include "calidet/edge.hpp"
#include "calidet/eval.hpp"
#include "calidet/selfcal.hpp"
#include "calidet/simworld.hpp"
#include "calidet/training.hpp"
#include "oracles.hpp"
#include "param_access.hpp"

using namespace calidet;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool ok, const std::string& detail = "") {
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << "C" << criterion << " " << name;
    if (!detail.empty()) std::cout << "  (" << detail << ")";
    std::cout << std::endl;
    if (!ok) ++g_failures;
}

double elapsed_sec(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

LabelSet random_label_set(Rng& rng, int k) {
    std::vector<int> classes;
    for (int c = 0; c < k; ++c)
        if (rng.uniform01() < 0.4) classes.push_back(c);
    return LabelSet(std::move(classes));
}

// --------------------------------------------------------------------------
// C1: edge statistics reproduce the reference procedures exactly

void criterion_1() {
    const auto start = std::chrono::steady_clock::now();
    bool ok = true;
    std::string detail;

    {
        std::vector<LabelSet> listed{LabelSet{0, 2}, LabelSet{1, 2}, LabelSet{0, 1, 2}};
        for (const auto& s : listed) {
            std::vector<LabelSet> one{s};
            ok = ok && edge_from_label_sets(3, one).values() ==
                           oracles::edge_sample_reference(3, s.indices());
        }
        std::vector<std::set<int>> ref;
        for (const auto& s : listed) ref.emplace_back(s.begin(), s.end());
        ok = ok && edge_from_label_sets(3, listed).values() ==
                       oracles::edge_batch_reference(3, ref);
    }

    Rng rng(101);
    for (int trial = 0; ok && trial < 1000; ++trial) {
        const int k = 1 + static_cast<int>(rng.uniform_int(8));
        const int n = static_cast<int>(rng.uniform_int(51));
        std::vector<LabelSet> sets;
        std::vector<std::set<int>> ref;
        for (int i = 0; i < n; ++i) {
            const LabelSet l = random_label_set(rng, k);
            ref.emplace_back(l.begin(), l.end());
            sets.push_back(l);
        }
        if (edge_from_label_sets(k, sets).values() != oracles::edge_batch_reference(k, ref)) {
            ok = false;
            detail = "fuzz mismatch at trial " + std::to_string(trial);
        }
    }
    const double sec = elapsed_sec(start);
    if (sec >= 1.0) {
        ok = false;
        detail = "runtime " + std::to_string(sec) + "s";
    }
    report(1, "edge oracle exactness (1000 fuzzed + listed samples)", ok, detail);
}

// --------------------------------------------------------------------------
// C2: flat/flip/delta algebra across fuzzed sizes

void criterion_2() {
    bool ok = true;
    Rng rng(22);
    for (int k = 1; ok && k <= 16; ++k) {
        const EdgeMatrix e0 = EdgeMatrix::flat_prior(k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) ok = ok && e0(i, j) == (i == j ? 1.0 : 0.5);
        ok = ok && flip_edge(e0) == e0;
        ok = ok && delta(e0).values.isZero(0.0);
        for (int trial = 0; trial < 25; ++trial) {
            // Per-sample edges hold only {0, 0.5, 1}: the involution is
            // bit-exact there.
            std::vector<LabelSet> one{random_label_set(rng, k)};
            const EdgeMatrix ex = edge_from_label_sets(k, one);
            ok = ok && flip_edge(flip_edge(ex)) == ex;
            // Counted edges hold arbitrary rationals; 1 - (1 - v) can land
            // one ulp off for v < 0.5 (1 - v is then not representable), so
            // exactness is asserted at the representability limit.
            std::vector<LabelSet> sets;
            const int n = 1 + static_cast<int>(rng.uniform_int(12));
            for (int i = 0; i < n; ++i) sets.push_back(random_label_set(rng, k));
            const EdgeMatrix e = edge_from_label_sets(k, sets);
            const double dev =
                (flip_edge(flip_edge(e)).values() - e.values()).cwiseAbs().maxCoeff();
            ok = ok && dev <= 1.2e-16;
        }
    }
    report(2, "flat/flip/delta algebra (k <= 16, exact to representability)", ok);
}

// --------------------------------------------------------------------------
// C3: zero-bias encoder equals the unbiased reference

void criterion_3() {
    bool ok = true;
    double worst = 0.0;
    Rng rng(33);
    for (int trial = 0; trial < 100; ++trial) {
        const int heads = 1 + static_cast<int>(rng.uniform_int(3));
        const int d = heads * (1 + static_cast<int>(rng.uniform_int(4)));
        const int k = 1 + static_cast<int>(rng.uniform_int(6));
        CaliFormerConfig cfg;
        cfg.d = d;
        cfg.k = k;
        cfg.heads = heads;
        cfg.pre_norm = trial % 2 == 0;
        Rng init = rng.child("init", static_cast<std::uint64_t>(trial));
        const auto params = CaliFormerParams::init(cfg, init);
        auto nodes = NodeEmbeddings::init(d, k, init);
        nodes.columns *= 50.0;
        const Eigen::MatrixXd got = encoder_forward(params, nodes, DeltaEdge::zero(k));
        const auto want = oracles::encoder_reference_unbiased(params, nodes.columns);
        for (int t = 0; t < k; ++t)
            for (int a = 0; a < d; ++a)
                worst = std::max(worst,
                                 std::abs(got(a, t) - want[static_cast<std::size_t>(t)]
                                                          [static_cast<std::size_t>(a)]));
    }
    ok = worst <= 1e-10;
    report(3, "zero-bias equivalence (100 instances, 1e-10)", ok,
           "max deviation " + std::to_string(worst));
}

// --------------------------------------------------------------------------
// C4: analytic gradients vs central finite differences

void criterion_4() {
    const auto start = std::chrono::steady_clock::now();
    double worst = 0.0;
    Rng rng(44);
    for (int trial = 0; trial < 100; ++trial) {
        const oracles::CheckedInstance inst = oracles::make_gradcheck_instance(rng, trial);
        auto params = inst.params;
        auto nodes = inst.nodes;
        auto head = inst.head;

        auto loss = [&]() {
            const Eigen::MatrixXd vp = encoder_forward(params, nodes, inst.bias);
            return (inst.alpha.array() *
                    calibrate_logits_batch(head, vp, inst.features).array())
                .sum();
        };

        EncoderTape tape;
        encoder_forward(params, nodes, inst.bias, &tape);
        Eigen::MatrixXd dhead_w;
        Eigen::VectorXd dhead_b;
        CaliFormerGrads grads = backward(params, nodes, inst.bias, head, inst.features,
                                         inst.alpha, tape, dhead_w, dhead_b);

        auto pv = oracles::view_params(params, nodes, head);
        auto gv = oracles::view_grads(grads, dhead_w, dhead_b);
        for (std::size_t blk = 0; blk < pv.size(); ++blk)
            for (std::size_t i = 0; i < pv[blk].second; ++i) {
                const double numeric = oracles::central_difference(pv[blk].first[i], loss);
                worst = std::max(worst, oracles::gradient_rel_error(gv[blk].first[i], numeric));
            }
    }
    const double sec = elapsed_sec(start);
    const bool ok = worst <= 1e-4 && sec < 30.0;
    report(4, "gradient check (100 instances, rel 1e-4)", ok,
           "worst rel " + std::to_string(worst) + ", " + std::to_string(sec) + "s");
}

// --------------------------------------------------------------------------
// C5: LoMa sign structure

void criterion_5() {
    bool ok = true;
    const auto e0 = EdgeMatrix::flat_prior(3);
    std::vector<LabelSet> s{LabelSet{0, 2}};
    const auto ex = edge_from_label_sets(3, s);
    Eigen::VectorXd logits(3);
    logits << 2, -1, 3;

    ok = ok && loma_loss(logits, e0, ex, 1.0) == 0.0;
    ok = ok && loma_loss(logits, ex, ex, 1.0) == -5.0 / 9.0;
    ok = ok && loma_loss(logits, flip_edge(ex), ex, 1.0) == 5.0 / 9.0;

    Rng rng(55);
    for (int trial = 0; ok && trial < 200; ++trial) {
        const int k = 2 + static_cast<int>(rng.uniform_int(7));
        LabelSet labels = random_label_set(rng, k);
        if (labels.empty()) continue;
        std::vector<LabelSet> one{labels};
        const EdgeMatrix sample = edge_from_label_sets(k, one);
        Eigen::VectorXd pos(k);
        for (int c = 0; c < k; ++c)
            pos(c) = labels.contains(c) ? rng.uniform(0.1, 3.0) : rng.uniform(-3.0, 3.0);
        const double at_ex = loma_loss(pos, sample, sample, 1.0);
        const double at_bar = loma_loss(pos, flip_edge(sample), sample, 1.0);
        // Present columns carry off-diagonal signal and their logits are
        // positive, so the loss is strictly negative at the sample's own
        // edge and exactly negated under the flipped prior.
        ok = ok && at_ex < 0.0 && at_bar > 0.0 && at_ex == -at_bar;
    }
    report(5, "LoMa sign structure (-5/9, +5/9 exact; fuzzed signs)", ok);
}

// --------------------------------------------------------------------------
// C6: toy training ordering, and its gamma = 0 ablation

ToyTrainConfig default_toy_config() {
    ToyTrainConfig cfg;
    cfg.k = 6;
    cfg.d = 32;
    cfg.epochs = 25;
    cfg.learning_rate = 0.03;
    cfg.batch_size = 16;
    cfg.seed = 1;
    cfg.encoder_heads = 8;
    cfg.train_images = 1500;
    cfg.eval_images = 600;
    cfg.world = gen_world(6, 3, 2024);
    return cfg;
}

bool ordering_holds(const EpochMetrics& m) {
    return m.map_ex_bar + 1.0 <= m.map_e0 && m.map_e0 < m.map_et &&
           m.map_et <= m.map_ex + 1e-9 && m.map_e0 + 1.0 <= m.map_ex;
}

void criterion_6() {
    const auto start = std::chrono::steady_clock::now();
    ToyTrainConfig cfg = default_toy_config();
    const ToyTrainResult trained = train_toy(cfg);
    const EpochMetrics last = trained.epochs.back();
    const bool ordered = ordering_holds(last);

    ToyTrainConfig ablated = cfg;
    ablated.loma.gamma = 0.0;
    const ToyTrainResult no_loma = train_toy(ablated);
    const bool ablation_fails = !ordering_holds(no_loma.epochs.back());

    const double sec = elapsed_sec(start);
    std::ostringstream detail;
    detail.setf(std::ios::fixed);
    detail.precision(2);
    detail << "mAP ebar/e0/et/ex = " << last.map_ex_bar << "/" << last.map_e0 << "/"
           << last.map_et << "/" << last.map_ex << "; gamma=0 ordered="
           << (ablation_fails ? "no" : "yes") << "; " << sec << "s";
    report(6, "toy ordering with 1-point outer margins, gamma=0 ablation fails",
           ordered && ablation_fails && sec < 300.0, detail.str());
}

// --------------------------------------------------------------------------
// C7: simulator injection ordering across seeds, lambda = 0 control

void criterion_7() {
    bool ok = true;
    std::string detail;
    for (int s = 0; s < 5 && ok; ++s) {
        const WorldSpec w = gen_world(6, 3, 7000 + static_cast<std::uint64_t>(s));
        const SimDataset ds = gen_dataset(w, 1000, 100 + static_cast<std::uint64_t>(s));
        const auto report_rows =
            prior_sweep(make_sim_detector(w), ds.data, *w.reference_edge,
                        {NamedPrior::per_image_flipped(),
                         NamedPrior::fixed("e0", EdgeMatrix::flat_prior(6)),
                         NamedPrior::fixed("et", *w.reference_edge),
                         NamedPrior::per_image_own()})
                .rows;
        for (std::size_t i = 1; i < report_rows.size(); ++i)
            if (report_rows[i].metrics.ap < report_rows[i - 1].metrics.ap) {
                ok = false;
                detail = "seed " + std::to_string(s) + ": " + report_rows[i - 1].name +
                         " > " + report_rows[i].name;
            }
    }
    if (ok) {
        // Control: with the injection path off, every row is identical.
        WorldSpec w = gen_world(6, 3, 7000);
        w.lambda = 0.0;
        const SimDataset ds = gen_dataset(w, 1000, 100);
        const auto rows = prior_sweep(make_sim_detector(w), ds.data, *w.reference_edge,
                                      {NamedPrior::per_image_flipped(),
                                       NamedPrior::fixed("e0", EdgeMatrix::flat_prior(6)),
                                       NamedPrior::per_image_own()})
                              .rows;
        for (std::size_t i = 1; i < rows.size(); ++i)
            ok = ok && rows[i].metrics.ap == rows[0].metrics.ap;
        if (!ok) detail = "lambda=0 control not flat";
    }
    report(7, "simulator injection ordering (1000 images, 5 seeds) + lambda=0 control", ok,
           detail);
}

// --------------------------------------------------------------------------
// C8: self-calibration convergence

void criterion_8() {
    bool ok = true;
    std::string detail;

    // Constant oracle: every image predicts every class at confidence 0.2,
    // so the statistics are all-ones, the effective step is 0.8, and the
    // per-step contraction should measure |1 - 0.8| = 0.2.
    {
        Dataset images;
        images.k = 3;
        images.class_ids = contiguous_ids(3);
        for (int i = 0; i < 4; ++i)
            images.images.push_back(make_image_record(i + 1, 100, 100, {}));
        const Detector oracle = [](const ImageRecord& im, const EdgeMatrix&) {
            DetectionSet ds;
            ds.image_id = im.image_id;
            for (int c = 0; c < 3; ++c) ds.detections.push_back(Detection{c, 0.2, 0, 0, 5, 5});
            return ds;
        };
        SelfCalConfig cfg;
        cfg.eta = 4.0;
        cfg.presence_threshold = 0.1;
        cfg.max_iterations = 10;
        const CalibrationTrace trace =
            selfcal_run(oracle, images, cfg, EdgeMatrix::flat_prior(3));
        for (std::size_t i = 1; i + 1 < trace.steps.size(); ++i) {
            const double ratio = trace.steps[i + 1].step_mae / trace.steps[i].step_mae;
            if (std::abs(ratio - 0.2) > 0.01) {
                ok = false;
                detail = "oracle ratio " + std::to_string(ratio);
            }
        }
        const double final_gap = std::abs(trace.final_edge()(0, 1) - 1.0);
        if (final_gap > 1e-5) {
            ok = false;
            detail = "oracle fixed point missed by " + std::to_string(final_gap);
        }
    }

    // Simulated detector on a 256-image subset.
    if (ok) {
        const WorldSpec w = gen_world(6, 3, 8800);
        const SimDataset subset = gen_dataset(w, 256, 88);
        SelfCalConfig cfg;
        cfg.eta = 4.0;
        cfg.max_iterations = 50;
        EvalConfig eval_cfg;
        const CalibrationTrace trace = selfcal_run(make_sim_detector(w), subset.data, cfg,
                                                   *w.reference_edge, &eval_cfg);
        if (trace.aborted || trace.steps.size() < 2) {
            ok = false;
            detail = "simworld run aborted";
        } else {
            const double ap0 = trace.steps.front().metrics->ap;
            const double ap1 = trace.steps.back().metrics->ap;
            const double s0 = trace.steps.front().step_max;
            const double s1 = trace.steps.back().step_max;
            std::ostringstream os;
            os.setf(std::ios::fixed);
            os.precision(3);
            os << "AP " << ap0 << " -> " << ap1 << ", step_max " << s0 << " -> " << s1;
            detail = os.str();
            ok = ap1 >= ap0 && s1 < 0.1 * s0;
        }
    }
    report(8, "self-calibration convergence (oracle ratio, simworld 256 subset)", ok, detail);
}

// --------------------------------------------------------------------------
// C9: subset epsilon monotonicity

void criterion_9() {
    int strict = 0;
    const int seeds = 10;
    for (int s = 0; s < seeds; ++s) {
        const WorldSpec w = gen_world(6, 3, 9900 + static_cast<std::uint64_t>(s));
        const SimDataset ds = gen_dataset(w, 512, 500 + static_cast<std::uint64_t>(s));
        const Detector det = make_sim_detector(w);
        double prev = 1e9;
        bool decreasing = true;
        for (int size : {8, 16, 32, 64}) {
            const double eps =
                subset_eval(det, ds.data, *w.reference_edge, size,
                            1000 + static_cast<std::uint64_t>(s))
                    .mean_epsilon;
            decreasing = decreasing && eps < prev;
            prev = eps;
        }
        strict += decreasing ? 1 : 0;
    }
    report(9, "subset epsilon strictly decreasing across {8,16,32,64} (10-seed majority)",
           strict > seeds / 2, std::to_string(strict) + "/10 seeds strict");
}

// --------------------------------------------------------------------------
// C10: AP evaluator equals the reference oracle

void criterion_10() {
    bool ok = true;
    std::string detail;

    // Hand cases first.
    {
        Dataset d;
        d.k = 1;
        d.class_ids = contiguous_ids(1);
        d.images.push_back(make_image_record(1, 1000, 1000, {Box{0, 0, 0, 100, 100}}));
        DetectionSet ds;
        ds.image_id = 1;
        ds.detections = {Detection{0, 0.9, 0, 0, 100, 80}, Detection{0, 0.8, 0, 56, 100, 80}};
        EvalConfig cfg;
        cfg.iou_thresholds = {0.5};
        ok = ok && average_precision(d, {ds}, cfg).ap == 100.0;
        ok = ok && iou(Box{0, 0, 0, 2, 2}, Box{0, 1, 1, 2, 2}) == 1.0 / 7.0;
    }

    Rng rng(1010);
    for (int trial = 0; ok && trial < 1000; ++trial) {
        const int k = 1 + static_cast<int>(rng.uniform_int(3));
        const int n_images = 1 + static_cast<int>(rng.uniform_int(3));
        Dataset d;
        d.k = k;
        d.class_ids = contiguous_ids(k);
        std::vector<oracles::RefGt> ref_gts;
        for (int i = 0; i < n_images; ++i) {
            std::vector<Box> boxes;
            const int n_gt = static_cast<int>(rng.uniform_int(3));
            for (int g = 0; g < n_gt; ++g) {
                Box b{static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(k))),
                      rng.uniform(0, 80), rng.uniform(0, 80), rng.uniform(5, 40),
                      rng.uniform(5, 40)};
                boxes.push_back(b);
                ref_gts.push_back(oracles::RefGt{i + 1, b.cls, b});
            }
            d.images.push_back(make_image_record(i + 1, 100, 100, std::move(boxes)));
        }
        std::vector<DetectionSet> preds;
        std::vector<oracles::RefDetection> ref_dets;
        int total_dets = 0;
        for (int i = 0; i < n_images && total_dets < 4; ++i) {
            DetectionSet ds;
            ds.image_id = i + 1;
            const int n_det = static_cast<int>(rng.uniform_int(3));
            for (int j = 0; j < n_det && total_dets < 4; ++j, ++total_dets) {
                Detection det;
                det.cls = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(k)));
                det.score = std::round(rng.uniform01() * 4.0) / 4.0;
                det.x = rng.uniform(0, 80);
                det.y = rng.uniform(0, 80);
                det.w = rng.uniform(5, 40);
                det.h = rng.uniform(5, 40);
                ds.detections.push_back(det);
                ref_dets.push_back(oracles::RefDetection{
                    i + 1, det.cls, det.score, Box{det.cls, det.x, det.y, det.w, det.h},
                    static_cast<std::size_t>(j)});
            }
            preds.push_back(std::move(ds));
        }
        const double thr = 0.25 + 0.5 * rng.uniform01();
        EvalConfig cfg;
        cfg.iou_thresholds = {thr};
        const double got = average_precision(d, preds, cfg).ap;
        double want_sum = 0.0;
        int want_classes = 0;
        for (int c = 0; c < k; ++c) {
            const double ap = oracles::ap_reference(ref_dets, ref_gts, c, thr);
            if (ap >= 0.0) {
                want_sum += ap;
                ++want_classes;
            }
        }
        const double want = want_classes > 0 ? 100.0 * want_sum / want_classes : 0.0;
        if (std::abs(got - want) > 1e-12) {
            ok = false;
            detail = "trial " + std::to_string(trial);
        }
    }
    report(10, "AP evaluator equals the exhaustive oracle (1000 micro-instances + hand cases)",
           ok, detail);
}

// --------------------------------------------------------------------------
// C11: CLI determinism

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& cli, const std::string& args) {
    const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    return std::system(cmd.c_str());
}

void criterion_11(const std::string& cli) {
    bool ok = true;
    std::string detail;
    const fs::path tmp = fs::path("acceptance_tmp");
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    const std::string t = tmp.string() + "/";

    auto twice_identical = [&](const std::string& args_a, const std::string& args_b,
                               const fs::path& out_a, const fs::path& out_b,
                               const std::string& what) {
        if (!ok) return;
        if (run_cli(cli, args_a) != 0 || run_cli(cli, args_b) != 0) {
            ok = false;
            detail = what + " failed to run";
            return;
        }
        if (slurp(out_a) != slurp(out_b) || slurp(out_a).empty()) {
            ok = false;
            detail = what + " not byte-identical";
        }
    };

    twice_identical("edges flat --k 4 --out " + t + "f1.json",
                    "edges flat --k 4 --out " + t + "f2.json", t + "f1.json", t + "f2.json",
                    "edges flat");
    twice_identical("world gen --k 5 --scenes 3 --seed 7 --out " + t + "w1.json",
                    "world gen --k 5 --scenes 3 --seed 7 --out " + t + "w2.json", t + "w1.json",
                    t + "w2.json", "world gen");
    twice_identical("data gen --world " + t + "w1.json --n 40 --seed 3 --out " + t + "d1.json",
                    "data gen --world " + t + "w1.json --n 40 --seed 3 --out " + t + "d2.json",
                    t + "d1.json", t + "d2.json", "data gen");
    twice_identical("edges stats --annotations " + t + "d1.json --out " + t + "s1.json",
                    "edges stats --annotations " + t + "d1.json --out " + t + "s2.json",
                    t + "s1.json", t + "s2.json", "edges stats");
    twice_identical("edges flip --in " + t + "s1.json --out " + t + "fl1.json",
                    "edges flip --in " + t + "s1.json --out " + t + "fl2.json", t + "fl1.json",
                    t + "fl2.json", "edges flip");
    twice_identical("edges delta --in " + t + "s1.json --out " + t + "de1.json",
                    "edges delta --in " + t + "s1.json --out " + t + "de2.json", t + "de1.json",
                    t + "de2.json", "edges delta");
    twice_identical("edges compare " + t + "s1.json " + t + "fl1.json --out " + t + "c1.json",
                    "edges compare " + t + "s1.json " + t + "fl1.json --out " + t + "c2.json",
                    t + "c1.json", t + "c2.json", "edges compare");
    twice_identical("edges sample --et " + t + "s1.json --sigma 0.16 --seed 9 --out " + t +
                        "sa1.json",
                    "edges sample --et " + t + "s1.json --sigma 0.16 --seed 9 --out " + t +
                        "sa2.json",
                    t + "sa1.json", t + "sa2.json", "edges sample");
    twice_identical("selfcal run --world " + t + "w1.json --subset-size 24 --iters 6 --seed 5" +
                        " --out " + t + "tr1.jsonl",
                    "selfcal run --world " + t + "w1.json --subset-size 24 --iters 6 --seed 5" +
                        " --out " + t + "tr2.jsonl",
                    t + "tr1.jsonl", t + "tr2.jsonl", "selfcal run");
    twice_identical("eval sweep --world " + t + "w1.json --data " + t + "d1.json --out " + t +
                        "ev1.json",
                    "eval sweep --world " + t + "w1.json --data " + t + "d1.json --out " + t +
                        "ev2.json",
                    t + "ev1.json", t + "ev2.json", "eval sweep");
    twice_identical("eval subsets --world " + t + "w1.json --data " + t +
                        "d1.json --sizes 8,16 --seed 2 --out " + t + "su1.json",
                    "eval subsets --world " + t + "w1.json --data " + t +
                        "d1.json --sizes 8,16 --seed 2 --out " + t + "su2.json",
                    t + "su1.json", t + "su2.json", "eval subsets");

    if (ok) {
        // Tiny training config, run twice.
        WorldSpec w = gen_world(4, 2, 5);
        ToyTrainConfig cfg;
        cfg.k = 4;
        cfg.d = 8;
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.train_images = 64;
        cfg.eval_images = 32;
        cfg.encoder_heads = 2;
        cfg.world = w;
        std::ofstream(tmp / "toy.json") << toy_config_to_json(cfg).dump(2) << "\n";
        twice_identical("train toy --config " + t + "toy.json --metrics " + t +
                            "m1.jsonl --checkpoint " + t + "ck1.json",
                        "train toy --config " + t + "toy.json --metrics " + t +
                            "m2.jsonl --checkpoint " + t + "ck2.json",
                        t + "m1.jsonl", t + "m2.jsonl", "train toy");
        if (ok && slurp(tmp / "ck1.json") != slurp(tmp / "ck2.json")) {
            ok = false;
            detail = "checkpoints differ";
        }
    }

    if (ok) {
        // Usage contract: unknown flags fail fast, --help succeeds.
        if (std::system((cli + " --help >/dev/null 2>&1").c_str()) != 0) {
            ok = false;
            detail = "--help nonzero";
        } else if (std::system((cli + " edges flat --bogus 1 >/dev/null 2>&1").c_str()) == 0) {
            ok = false;
            detail = "unknown flag accepted";
        } else if (std::system((cli + " edges compare missing_a.json missing_b.json >/dev/null 2>&1")
                                   .c_str()) == 0) {
            ok = false;
            detail = "missing file accepted";
        }
    }
    report(11, "CLI determinism (every command byte-identical across reruns)", ok, detail);
}

// --------------------------------------------------------------------------
// C12: ingest round-trip

void criterion_12() {
    const WorldSpec w = gen_world(6, 3, 1212);
    const SimDataset ds = gen_dataset(w, 300, 12);
    const fs::path tmp = fs::path("acceptance_tmp");
    fs::create_directories(tmp);
    const fs::path file = tmp / "roundtrip.json";
    std::ofstream(file) << dataset_to_coco_json(ds.data).dump() << "\n";
    const Dataset parsed = parse_annotations_file(file.string());
    const bool ok = dataset_edge(parsed) == dataset_edge(ds.data) &&
                    parsed.images.size() == ds.data.images.size();
    report(12, "ingest round-trip (write -> parse -> identical edge)", ok);
}

} // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "./calidet";
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9();
    criterion_10();
    criterion_11(cli);
    criterion_12();

    if (g_failures == 0) {
        std::cout << "all criteria passed" << std::endl;
        return 0;
    }
    std::cout << g_failures << " criteria failed" << std::endl;
    return 1;
}
