// Command-line front door: edge tooling, synthetic world/dataset
// generation, toy training, self-calibration, and evaluation sweeps.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calidet/califormer.hpp"
#include "calidet/dataset.hpp"
#include "calidet/edge.hpp"
#include "calidet/eval.hpp"
#include "calidet/http_detector.hpp"
#include "calidet/selfcal.hpp"
#include "calidet/simworld.hpp"
#include "calidet/training.hpp"

using namespace calidet;

namespace {

/// Flags beat the environment; the environment beats the built-in default.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag_seed,
                           std::uint64_t fallback = 1) {
    if (flag_seed) return *flag_seed;
    if (const char* env = std::getenv("CALIDET_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw DataError("CALIDET_SEED is not an integer");
        }
    }
    return fallback;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << text;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

struct SelfCalOptions {
    std::string world_path;
    std::string data_path;
    std::string et_path;
    std::string out_path;
    std::string detector_url;
    int subset_size = 256;
    double eta = 4.0;
    int iters = 50;
    double tau = 0.5;
    std::optional<std::uint64_t> seed;
    bool with_eval = false;
    bool repeat_columns = false;
    bool running_stats = false;
};

struct SweepOptions {
    std::string world_path;
    std::string data_path;
    std::string et_path;
    std::string out_path;
    std::string priors = "ebar,e0,et,ex";
    std::optional<std::uint64_t> seed;
    int generate_n = 0;
};

struct SubsetsOptions {
    std::string world_path;
    std::string data_path;
    std::string et_path;
    std::string out_path;
    std::string sizes = "8,16,32,64";
    std::optional<std::uint64_t> seed;
    int generate_n = 0;
};

Dataset load_or_generate(const WorldSpec& world, const std::string& data_path, int generate_n,
                         std::uint64_t seed) {
    if (!data_path.empty()) return parse_annotations_file(data_path);
    if (generate_n <= 0) throw DataError("either --data or --n (generate) is required");
    return gen_dataset(world, generate_n, Rng(seed).child("data").seed()).data;
}

EdgeMatrix default_prior(const WorldSpec& world, const std::string& et_path) {
    if (!et_path.empty()) return load_edge(et_path);
    if (world.reference_edge) return *world.reference_edge;
    throw DataError("no default prior: world has no reference edge and --et not given");
}

int run_app(int argc, char** argv) {
    CLI::App app{"run-time calibratable detection toolkit"};
    app.require_subcommand(1);

    // ----------------------------------------------------------------- edges
    auto* edges = app.add_subcommand("edges", "edge matrix tooling");
    edges->require_subcommand(1);

    struct {
        std::string annotations, out, csv;
    } stats_opt;
    auto* stats = edges->add_subcommand("stats", "conditional-probability statistics of a dataset");
    stats->add_option("--annotations", stats_opt.annotations, "COCO-format annotation file")
        ->required();
    stats->add_option("--out", stats_opt.out, "output edge JSON")->required();
    stats->add_option("--csv", stats_opt.csv, "also write a CSV view");
    stats->callback([&] {
        const Dataset d = parse_annotations_file(stats_opt.annotations);
        const EdgeMatrix e = dataset_edge(d);
        save_edge(stats_opt.out, e);
        if (!stats_opt.csv.empty()) write_text(stats_opt.csv, edge_to_csv(e));
        std::cout << "edge " << e.k() << "x" << e.k() << " over " << d.images.size()
                  << " images -> " << stats_opt.out << "\n";
    });

    struct {
        int k = 0;
        std::string out;
    } flat_opt;
    auto* flat = edges->add_subcommand("flat", "flat prior (diagonal 1, off-diagonal 0.5)");
    flat->add_option("--k", flat_opt.k, "class count")->required();
    flat->add_option("--out", flat_opt.out, "output edge JSON")->required();
    flat->callback([&] {
        save_edge(flat_opt.out, EdgeMatrix::flat_prior(flat_opt.k));
        std::cout << "flat prior k=" << flat_opt.k << " -> " << flat_opt.out << "\n";
    });

    struct {
        std::string in, out;
    } flip_opt;
    auto* flip = edges->add_subcommand("flip", "flip off-diagonal values (v -> 1-v)");
    flip->add_option("--in", flip_opt.in, "input edge JSON")->required();
    flip->add_option("--out", flip_opt.out, "output edge JSON")->required();
    flip->callback([&] {
        save_edge(flip_opt.out, flip_edge(load_edge(flip_opt.in)));
        std::cout << "flipped " << flip_opt.in << " -> " << flip_opt.out << "\n";
    });

    struct {
        std::string in, out;
    } delta_opt;
    auto* delta_cmd = edges->add_subcommand("delta", "difference against the flat prior");
    delta_cmd->add_option("--in", delta_opt.in, "input edge JSON")->required();
    delta_cmd->add_option("--out", delta_opt.out, "output delta JSON")->required();
    delta_cmd->callback([&] {
        save_json(delta_opt.out, delta_to_json(delta(load_edge(delta_opt.in))));
        std::cout << "delta " << delta_opt.in << " -> " << delta_opt.out << "\n";
    });

    struct {
        std::string a, b, out;
    } cmp_opt;
    auto* compare = edges->add_subcommand("compare", "MAE and |diff| percentiles of two edges");
    compare->add_option("a", cmp_opt.a, "first edge JSON")->required();
    compare->add_option("b", cmp_opt.b, "second edge JSON")->required();
    compare->add_option("--out", cmp_opt.out, "optional JSON report");
    compare->callback([&] {
        const EdgeCompare c = edge_mae(load_edge(cmp_opt.a), load_edge(cmp_opt.b));
        std::ostringstream os;
        os.precision(12);
        os << "mae " << c.mae << "\npercentiles(0/50/90/97/100)";
        for (double p : c.percentiles) os << " " << p;
        os << "\n";
        std::cout << os.str();
        if (!cmp_opt.out.empty())
            save_json(cmp_opt.out, json{{"mae", c.mae}, {"percentiles", c.percentiles}});
    });

    struct {
        std::string ex, eb, et, out;
        double sigma = 0.16;
        std::optional<std::uint64_t> seed;
    } sample_opt;
    auto* sample = edges->add_subcommand("sample", "draw a training prior from the edge mix");
    sample->add_option("--ex", sample_opt.ex, "per-sample edge JSON");
    sample->add_option("--eb", sample_opt.eb, "batch edge JSON");
    sample->add_option("--et", sample_opt.et, "population edge JSON");
    sample->add_option("--sigma", sample_opt.sigma, "noise standard deviation");
    sample->add_option("--seed", sample_opt.seed, "RNG seed");
    sample->add_option("--out", sample_opt.out, "output edge JSON")->required();
    sample->callback([&] {
        EdgeSamplerConfig cfg;
        cfg.sigma = sample_opt.sigma;
        cfg.use_ex = !sample_opt.ex.empty();
        cfg.use_eb = !sample_opt.eb.empty();
        cfg.use_et = !sample_opt.et.empty();
        cfg.validate();
        // Any provided edge stands in for the missing slots; disabled
        // sources are never selected.
        const std::string any =
            !sample_opt.ex.empty() ? sample_opt.ex
                                   : (!sample_opt.eb.empty() ? sample_opt.eb : sample_opt.et);
        const EdgeMatrix ex = load_edge(sample_opt.ex.empty() ? any : sample_opt.ex);
        const EdgeMatrix eb = load_edge(sample_opt.eb.empty() ? any : sample_opt.eb);
        const EdgeMatrix et = load_edge(sample_opt.et.empty() ? any : sample_opt.et);
        Rng rng = Rng(resolve_seed(sample_opt.seed)).child("sampler");
        save_edge(sample_opt.out, sample_edge(ex, eb, et, cfg, rng));
        std::cout << "sampled prior -> " << sample_opt.out << "\n";
    });

    // ----------------------------------------------------------------- world
    auto* world_cmd = app.add_subcommand("world", "synthetic world tooling");
    world_cmd->require_subcommand(1);
    struct {
        int k = 6, scenes = 3;
        std::optional<std::uint64_t> seed;
        std::string out;
    } wgen_opt;
    auto* wgen = world_cmd->add_subcommand("gen", "generate a seeded world");
    wgen->add_option("--k", wgen_opt.k, "class count");
    wgen->add_option("--scenes", wgen_opt.scenes, "scene count");
    wgen->add_option("--seed", wgen_opt.seed, "RNG seed");
    wgen->add_option("--out", wgen_opt.out, "output world JSON")->required();
    wgen->callback([&] {
        const WorldSpec w = gen_world(wgen_opt.k, wgen_opt.scenes, resolve_seed(wgen_opt.seed));
        save_json(wgen_opt.out, world_to_json(w));
        std::cout << "world k=" << w.k << " scenes=" << w.scenes.size() << " -> " << wgen_opt.out
                  << "\n";
    });

    // ------------------------------------------------------------------ data
    auto* data_cmd = app.add_subcommand("data", "synthetic dataset tooling");
    data_cmd->require_subcommand(1);
    struct {
        std::string world, out;
        int n = 1000;
        std::optional<std::uint64_t> seed;
    } dgen_opt;
    auto* dgen = data_cmd->add_subcommand("gen", "sample a dataset from a world");
    dgen->add_option("--world", dgen_opt.world, "world JSON")->required();
    dgen->add_option("--n", dgen_opt.n, "image count");
    dgen->add_option("--seed", dgen_opt.seed, "RNG seed");
    dgen->add_option("--out", dgen_opt.out, "output COCO-format JSON")->required();
    dgen->callback([&] {
        const WorldSpec w = world_from_json(load_json(dgen_opt.world));
        const SimDataset ds =
            gen_dataset(w, dgen_opt.n, Rng(resolve_seed(dgen_opt.seed)).child("data").seed());
        save_json(dgen_opt.out, dataset_to_coco_json(ds.data));
        std::cout << "dataset n=" << ds.data.images.size() << " -> " << dgen_opt.out << "\n";
    });

    // ----------------------------------------------------------------- train
    auto* train_cmd = app.add_subcommand("train", "toy training");
    train_cmd->require_subcommand(1);
    struct {
        std::string config, metrics, checkpoint;
        std::optional<std::uint64_t> seed;
    } toy_opt;
    auto* toy = train_cmd->add_subcommand("toy", "multi-label toy run with prior injection");
    toy->add_option("--config", toy_opt.config, "ToyTrainConfig JSON")->required();
    toy->add_option("--metrics", toy_opt.metrics, "output metrics JSONL")->required();
    toy->add_option("--checkpoint", toy_opt.checkpoint, "output model checkpoint JSON");
    toy->add_option("--seed", toy_opt.seed, "override the config seed");
    toy->callback([&] {
        ToyTrainConfig cfg = toy_config_from_json(load_json(toy_opt.config));
        if (toy_opt.seed || std::getenv("CALIDET_SEED"))
            cfg.seed = resolve_seed(toy_opt.seed, cfg.seed);
        const ToyTrainResult result = train_toy(cfg);
        std::ostringstream lines;
        for (const auto& em : result.epochs) lines << em.to_json().dump() << "\n";
        write_text(toy_opt.metrics, lines.str());
        if (!toy_opt.checkpoint.empty())
            save_json(toy_opt.checkpoint,
                      califormer_to_json(result.model.params, result.model.nodes,
                                         result.model.head));
        const EpochMetrics& last = result.epochs.back();
        std::cout << "final mAP  ex_bar=" << last.map_ex_bar << "  e0=" << last.map_e0
                  << "  et=" << last.map_et << "  ex=" << last.map_ex << "\n";
    });

    // --------------------------------------------------------------- selfcal
    auto* selfcal_cmd = app.add_subcommand("selfcal", "self-calibration");
    selfcal_cmd->require_subcommand(1);
    SelfCalOptions sc;
    auto* run = selfcal_cmd->add_subcommand("run", "iterate the prior on a sample set");
    run->add_option("--world", sc.world_path, "world JSON (detector + data source)")->required();
    run->add_option("--data", sc.data_path, "COCO-format sample set (generated if omitted)");
    run->add_option("--subset-size", sc.subset_size, "images to generate when --data is omitted");
    run->add_option("--eta", sc.eta, "step size");
    run->add_option("--iters", sc.iters, "maximum iterations");
    run->add_option("--tau", sc.tau, "presence threshold for prediction statistics");
    run->add_option("--et", sc.et_path, "default prior (falls back to the world reference)");
    run->add_option("--detector-url", sc.detector_url, "external detector host:port");
    run->add_option("--seed", sc.seed, "RNG seed");
    run->add_flag("--eval", sc.with_eval, "record AP against ground truth per iteration");
    run->add_flag("--repeat-columns", sc.repeat_columns,
                  "weight rows instead of columns by mean confidence");
    run->add_flag("--running-stats", sc.running_stats,
                  "exponential window over past prediction statistics");
    run->add_option("--out", sc.out_path, "output trace JSONL")->required();
    run->callback([&] {
        const WorldSpec w = world_from_json(load_json(sc.world_path));
        const std::uint64_t seed = resolve_seed(sc.seed);
        const Dataset data = load_or_generate(w, sc.data_path, sc.subset_size, seed);
        const EdgeMatrix e_t = default_prior(w, sc.et_path);

        Detector detector;
        if (!sc.detector_url.empty()) {
            HttpDetectorConfig hc;
            const auto colon = sc.detector_url.rfind(':');
            if (colon == std::string::npos)
                throw DataError("--detector-url must be host:port");
            hc.host = sc.detector_url.substr(0, colon);
            hc.port = std::stoi(sc.detector_url.substr(colon + 1));
            detector = HttpDetector(hc).as_detector();
        } else {
            detector = make_sim_detector(w);
        }

        SelfCalConfig cfg;
        cfg.eta = sc.eta;
        cfg.max_iterations = sc.iters;
        cfg.presence_threshold = sc.tau;
        cfg.repeat_rows = !sc.repeat_columns;
        cfg.running_stats = sc.running_stats;
        EvalConfig eval_cfg;
        const CalibrationTrace trace =
            selfcal_run(detector, data, cfg, e_t, sc.with_eval ? &eval_cfg : nullptr);

        std::ostringstream lines;
        for (const auto& step : trace.steps) lines << step.to_json().dump() << "\n";
        write_text(sc.out_path, lines.str());
        if (trace.aborted) throw DataError("self-calibration aborted: " + trace.abort_reason);
        std::cout << "iterations=" << trace.steps.size()
                  << " final step_max=" << trace.steps.back().step_max << " -> " << sc.out_path
                  << "\n";
    });

    // ------------------------------------------------------------------ eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluation protocols");
    eval_cmd->require_subcommand(1);

    SweepOptions sw;
    auto* sweep = eval_cmd->add_subcommand("sweep", "AP under a list of injected priors");
    sweep->add_option("--world", sw.world_path, "world JSON (detector)")->required();
    sweep->add_option("--data", sw.data_path, "COCO-format dataset (generated if omitted)");
    sweep->add_option("--n", sw.generate_n, "images to generate when --data is omitted");
    sweep->add_option("--priors", sw.priors, "comma list: ebar,e0,et,ev,ex or @file.json");
    sweep->add_option("--et", sw.et_path, "default prior (falls back to the world reference)");
    sweep->add_option("--seed", sw.seed, "RNG seed");
    sweep->add_option("--out", sw.out_path, "output report JSON");
    sweep->callback([&] {
        const WorldSpec w = world_from_json(load_json(sw.world_path));
        const std::uint64_t seed = resolve_seed(sw.seed);
        const Dataset data = load_or_generate(w, sw.data_path, sw.generate_n, seed);
        const EdgeMatrix e_t = default_prior(w, sw.et_path);

        std::vector<NamedPrior> priors;
        for (const std::string& name : split_csv(sw.priors)) {
            if (name == "ebar")
                priors.push_back(NamedPrior::per_image_flipped());
            else if (name == "ex")
                priors.push_back(NamedPrior::per_image_own());
            else if (name == "e0")
                priors.push_back(NamedPrior::fixed("e0", EdgeMatrix::flat_prior(w.k)));
            else if (name == "et")
                priors.push_back(NamedPrior::fixed("et", e_t));
            else if (name == "ev")
                priors.push_back(NamedPrior::fixed("ev", dataset_edge(data)));
            else if (name.size() > 1 && name.front() == '@')
                priors.push_back(NamedPrior::fixed(name.substr(1), load_edge(name.substr(1))));
            else
                throw DataError("unknown prior name: " + name);
        }

        const PriorSweepReport report =
            prior_sweep(make_sim_detector(w), data, e_t, priors);
        std::cout << report.to_text();
        if (!sw.out_path.empty()) save_json(sw.out_path, report.to_json());
    });

    SubsetsOptions su;
    auto* subsets = eval_cmd->add_subcommand("subsets", "subset evaluation across sizes");
    subsets->add_option("--world", su.world_path, "world JSON (detector)")->required();
    subsets->add_option("--data", su.data_path, "COCO-format dataset (generated if omitted)");
    subsets->add_option("--n", su.generate_n, "images to generate when --data is omitted");
    subsets->add_option("--sizes", su.sizes, "comma list of subset sizes");
    subsets->add_option("--et", su.et_path, "default prior (falls back to the world reference)");
    subsets->add_option("--seed", su.seed, "RNG seed");
    subsets->add_option("--out", su.out_path, "output report JSON");
    subsets->callback([&] {
        const WorldSpec w = world_from_json(load_json(su.world_path));
        const std::uint64_t seed = resolve_seed(su.seed);
        const Dataset data = load_or_generate(w, su.data_path, su.generate_n, seed);
        const EdgeMatrix e_t = default_prior(w, su.et_path);
        const Detector detector = make_sim_detector(w);

        json out = json::array();
        std::cout << "size  subsets   eps      AP(et)   AP(eb)   delta\n";
        for (const std::string& tok : split_csv(su.sizes)) {
            const int size = std::stoi(tok);
            const SubsetEvalReport r = subset_eval(detector, data, e_t, size, seed);
            out.push_back(r.to_json());
            std::ostringstream os;
            os.setf(std::ios::fixed);
            os.precision(3);
            os << size << "  " << r.n_subsets << "  " << r.mean_epsilon << "  ";
            os.precision(2);
            os << r.mean_default.ap << "  " << r.mean_subset.ap << "  "
               << (r.mean_subset.ap - r.mean_default.ap) << "\n";
            std::cout << os.str();
        }
        if (!su.out_path.empty()) save_json(su.out_path, json{{"sizes", out}});
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_app(argc, argv);
    } catch (const NumericError& ex) {
        std::cerr << "numeric failure: " << ex.what() << "\n";
        return 3;
    } catch (const DataError& ex) {
        std::cerr << "data error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    }
}
