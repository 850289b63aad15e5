// p2s: dataset generation, preprocessing, training, evaluation, inference
// and the HTTP service.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "p2s/checkpoint.hpp"
#include "p2s/dataset_io.hpp"
#include "p2s/inference.hpp"
#include "p2s/service.hpp"

using namespace p2s;

namespace {

class UsageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

ModelConfig preset(const std::string& name) {
    if (name == "desk") return ModelConfig::desk();
    if (name == "full") return ModelConfig::full_scale();
    throw UsageError("unknown preset \"" + name + "\" (expected desk or full)");
}

std::string run_name(std::uint64_t seed, int fold) {
    return "run" + std::to_string(seed) + "_fold" + std::to_string(fold);
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
    int classes = 3;
    std::size_t per_class = 100;
    std::size_t side = 64;
    std::uint64_t seed = 7;
    std::string out;
};

int cmd_synth(const SynthArgs& a) {
    if (a.side == 0 || a.side % 16 != 0) throw UsageError("--side must be a positive multiple of 16");
    auto m = generate_synthetic({a.classes, a.per_class, a.side, a.seed});
    write_dataset(a.out, m);
    std::cerr << "wrote " << m.entries.size() << " records to " << a.out << '\n';
    return 0;
}

// --- preprocess ------------------------------------------------------------

struct PreprocessArgs {
    std::string data, out;
    std::size_t side = 256;
    std::uint64_t seed = 1;
    double test_fraction = 0.2;
    int folds = 5;
    bool ros_per_fold = false;
};

int cmd_preprocess(const PreprocessArgs& a) {
    if (a.side == 0 || a.side % 16 != 0) throw UsageError("--side must be a positive multiple of 16");
    if (!(a.test_fraction > 0 && a.test_fraction < 1)) throw UsageError("--test-fraction must lie in (0, 1)");
    if (a.folds < 2) throw UsageError("--folds must be at least 2");
    auto raw = read_dataset(a.data);
    std::vector<ManifestEntry> originals;
    for (const auto& e : raw.entries)
        if (!e.duplicate) originals.push_back({e.record});
    raw.entries = std::move(originals);
    auto processed = preprocess_manifest(raw, a.side);
    auto split = split_and_fold(processed, a.seed, {a.test_fraction, a.folds, a.ros_per_fold});
    write_dataset(a.out, split);
    std::size_t tv = 0, te = 0, dup = 0;
    for (const auto& e : split.entries) {
        (e.split == Split::test ? te : tv) += 1;
        dup += e.duplicate;
    }
    std::cerr << "wrote " << a.out << ": " << tv << " trainval entries (" << dup << " oversampled), " << te
              << " test\n";
    return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
    std::string data, config, out, preset = "desk";
    std::vector<std::uint64_t> seeds;
    std::vector<int> folds;
    int epochs = 0;
    std::size_t batch_size = 0;
    bool pooled_auc = false;
};

DatasetManifest require_split(const std::string& dir) {
    auto m = read_dataset(dir);
    bool any_tv = false, any_test = false;
    for (const auto& e : m.entries) {
        any_tv = any_tv || e.split == Split::trainval;
        any_test = any_test || e.split == Split::test;
    }
    if (!any_tv || !any_test)
        throw std::runtime_error(dir + " has no trainval/test labels; run `p2s preprocess` on it first");
    return m;
}

void check_side(const DatasetManifest& m, const ModelConfig& cfg) {
    const auto& r = *m.entries.front().record;
    if (r.image.width != cfg.input_side || r.image.height != cfg.input_side)
        throw std::runtime_error("records are " + std::to_string(r.image.width) + "x" +
                                 std::to_string(r.image.height) + " but the model expects input_side " +
                                 std::to_string(cfg.input_side));
}

int cmd_train(const TrainArgs& a) {
    ModelConfig mcfg = preset(a.preset);
    TrainConfig tcfg;
    tcfg.batch_size = 8;
    if (!a.config.empty()) {
        auto j = read_json_file(a.config);
        detail::reject_unknown(j, {"model", "train"}, a.config);
        if (j.contains("model")) j["model"].get_to(mcfg);
        if (j.contains("train")) j["train"].get_to(tcfg);
    }
    if (!a.seeds.empty()) tcfg.seeds = a.seeds;
    if (a.epochs > 0) tcfg.epochs_per_fold = a.epochs;
    if (a.batch_size > 0) tcfg.batch_size = a.batch_size;
    mcfg.validate();
    tcfg.validate();

    auto m = require_split(a.data);
    check_side(m, mcfg);
    for (int f : a.folds)
        if (f < 0 || f >= m.folds) throw UsageError("--folds entry " + std::to_string(f) + " out of range");

    const fs::path out = a.out;
    fs::create_directories(out / "checkpoints");
    fs::create_directories(out / "logs");
    write_text(out / "config.json", json{{"model", mcfg}, {"train", tcfg}}.dump(2) + "\n");

    ExperimentHooks hooks;
    hooks.folds = a.folds;
    std::ofstream log;
    hooks.fold.on_epoch = [&](const EpochRecord& r) {
        if (r.epoch == 0) log = std::ofstream(out / "logs" / (run_name(r.run_seed, r.fold) + ".jsonl"));
        log << json(r).dump() << '\n' << std::flush;
        std::cerr << "run " << r.run_seed << " fold " << r.fold << " epoch " << r.epoch << " loss " << r.train_loss
                  << " val_dice " << r.val_dice << " lr " << r.lr << (r.checkpoint_written ? " *" : "") << '\n';
    };
    hooks.fold.on_checkpoint = [&](const Prompt2SegModel<float>& model, const EpochRecord& r) {
        save_checkpoint(out / "checkpoints" / (run_name(r.run_seed, r.fold) + ".p2sc"), model,
                        {r.run_seed, r.fold, r.epoch, r.val_dice, m.class_names});
    };
    EvalOptions eval{tcfg.threshold, a.pooled_auc};
    auto res = run_experiment(m, mcfg, tcfg, hooks, eval);
    write_text(out / "report.json", json(res.report).dump(2) + "\n");
    std::ostringstream table;
    print_table(table, res.report);
    write_text(out / "report.txt", table.str());
    std::cout << table.str();
    return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string data, checkpoint_dir, out;
    std::vector<std::string> checkpoints;
    double threshold = 0.5;
    bool pooled_auc = false;
};

int cmd_eval(const EvalArgs& a) {
    std::vector<fs::path> paths(a.checkpoints.begin(), a.checkpoints.end());
    if (!a.checkpoint_dir.empty()) {
        if (!fs::is_directory(a.checkpoint_dir)) throw std::runtime_error("not a directory: " + a.checkpoint_dir);
        std::vector<fs::path> found;
        for (const auto& f : fs::directory_iterator(a.checkpoint_dir))
            if (f.path().extension() == ".p2sc") found.push_back(f.path());
        std::sort(found.begin(), found.end());
        paths.insert(paths.end(), found.begin(), found.end());
    }
    if (paths.empty()) throw UsageError("eval needs --checkpoint or --checkpoints");
    if (!(a.threshold >= 0 && a.threshold <= 1)) throw UsageError("--threshold must lie in [0, 1]");
    auto m = require_split(a.data);
    auto test = m.select(Split::test);
    std::vector<MetricsReport> reports;
    for (const auto& p : paths) {
        auto ck = load_checkpoint(p);
        if (ck.provenance.class_names != m.class_names)
            throw std::runtime_error(p.string() + " was trained on different classes than " + a.data);
        check_side(m, ck.model.config());
        auto rep = evaluate(ck.model, test, m.class_names, {a.threshold, a.pooled_auc});
        rep.seeds = {ck.provenance.seed};
        rep.folds = {ck.provenance.fold};
        reports.push_back(std::move(rep));
        std::cerr << "evaluated " << p.string() << '\n';
    }
    auto report = average_reports(reports);
    if (!a.out.empty()) write_text(a.out, json(report).dump(2) + "\n");
    print_table(std::cout, report);
    return 0;
}

// --- predict ---------------------------------------------------------------

struct PredictArgs {
    std::string checkpoint, image, doodle, out, prob, prob_pfm;
    int class_id = 0;
    double threshold = 0.5;
};

// Portable float map, grayscale, little-endian, rows bottom to top.
void write_pfm(const fs::path& path, const GrayF& g) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "Pf\n" << g.width << ' ' << g.height << "\n-1.0\n";
    std::vector<std::uint8_t> row(4 * g.width);
    for (std::size_t y = g.height; y-- > 0;) {
        for (std::size_t x = 0; x < g.width; ++x) {
            auto bits = std::bit_cast<std::uint32_t>(g.at(x, y));
            for (int b = 0; b < 4; ++b) row[4 * x + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(bits >> (8 * b));
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

int cmd_predict(const PredictArgs& a) {
    if (!(a.threshold >= 0 && a.threshold <= 1)) throw UsageError("--threshold must lie in [0, 1]");
    auto ck = load_checkpoint(a.checkpoint);
    const int k = static_cast<int>(ck.provenance.class_names.size());
    if (k == 0) throw std::runtime_error(a.checkpoint + " carries no class names");
    if (a.class_id < 0 || a.class_id >= k)
        throw UsageError("--class-id must lie in [0, " + std::to_string(k) + ")");
    Gray8 image = to_gray(decode_png(read_file(a.image)));
    Gray8 doodle = nonzero_mask(decode_png(read_file(a.doodle)));
    auto pred = predict(ck.model, image, doodle, a.class_id, k, a.threshold);
    Gray8 mask = pred.mask;
    for (auto& v : mask.pixels) v = v ? 255 : 0;
    write_png(a.out, mask);
    if (!a.prob.empty()) write_png(a.prob, quantize_probability(pred.prob));
    if (!a.prob_pfm.empty()) write_pfm(a.prob_pfm, pred.prob);
    return 0;
}

// --- serve -----------------------------------------------------------------

struct ServeArgs {
    std::string checkpoint, host = "127.0.0.1", samples, static_dir;
    int port = 8080;
    int workers = 2;
};

int cmd_serve(const ServeArgs& a) {
    int port = a.port;
    if (const char* env = std::getenv("PORT"); env && *env) {
        try {
            port = std::stoi(env);
        } catch (const std::exception&) {
            throw UsageError("PORT is not a number: " + std::string(env));
        }
    }
    if (port < 0 || port > 65535) throw UsageError("port out of range");
    auto ck = load_checkpoint(a.checkpoint);
    std::vector<DemoSample> samples;
    if (!a.samples.empty()) {
        samples = demo_samples_from(read_dataset(a.samples));
    } else {
        samples = synthetic_demo_samples(ck.provenance.class_names, ck.model.config().input_side);
    }
    ServiceOptions opt;
    opt.inference_slots = a.workers;
    opt.static_dir = a.static_dir;
    SegmentService service(std::move(ck), std::move(samples), opt);
    httplib::Server svr;
    service.install(svr);
    if (!svr.bind_to_port(a.host, port)) throw std::runtime_error("cannot bind " + a.host + ":" + std::to_string(port));
    std::cerr << "serving model " << service.checkpoint().model_id << " on http://" << a.host << ':' << port << '\n';
    svr.listen_after_bind();
    return 0;
}

// --- info ------------------------------------------------------------------

struct InfoArgs {
    std::string checkpoint, config, preset;
    bool as_json = false;
};

int cmd_info(const InfoArgs& a) {
    json out;
    std::optional<LoadedCheckpoint> ck;
    std::optional<Prompt2SegModel<float>> built;
    const Prompt2SegModel<float>* model = nullptr;
    if (!a.checkpoint.empty()) {
        ck.emplace(load_checkpoint(a.checkpoint));
        model = &ck->model;
        out["model_id"] = ck->model_id;
        out["provenance"] = ck->provenance;
    } else {
        ModelConfig cfg = preset(a.preset.empty() ? "desk" : a.preset);
        if (!a.config.empty()) {
            auto j = read_json_file(a.config);
            (j.contains("model") ? j["model"] : j).get_to(cfg);
        }
        cfg.validate();
        built.emplace(cfg, 0);
        model = &*built;
    }
    const auto b = parameter_breakdown(*model);
    out["config"] = model->config();
    out["parameter_count"] = b.total;
    out["buffer_count"] = b.buffers;
    out["by_module"] = b.by_module;
    out["by_kind"] = b.by_kind;
    if (a.as_json) {
        std::cout << out.dump(2) << '\n';
        return 0;
    }
    std::cout << "parameters " << b.total << '\n' << "buffers " << b.buffers << '\n';
    for (const auto& [k, v] : b.by_module) std::cout << "  module " << k << ' ' << v << '\n';
    for (const auto& [k, v] : b.by_kind) std::cout << "  kind " << k << ' ' << v << '\n';
    if (ck) std::cout << "model_id " << ck->model_id << '\n';
    std::cout << "config " << json(model->config()).dump() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Doodle-prompted segmentation: data, training, evaluation and serving"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate the synthetic shapes-and-scribbles dataset");
    s->add_option("--classes", synth.classes, "Number of shape classes (1-3)")->check(CLI::Range(1, 3));
    s->add_option("--per-class", synth.per_class, "Records per class")->check(CLI::PositiveNumber);
    s->add_option("--side", synth.side, "Image side in pixels");
    s->add_option("--seed", synth.seed, "Generator seed");
    s->add_option("--out", synth.out, "Output dataset directory")->required();

    PreprocessArgs prep;
    auto* p = app.add_subcommand("preprocess", "Crop, resize, equalize, split and fold a dataset");
    p->add_option("--data", prep.data, "Raw dataset directory")->required();
    p->add_option("--out", prep.out, "Output dataset directory")->required();
    p->add_option("--side", prep.side, "Output side in pixels");
    p->add_option("--seed", prep.seed, "Split seed");
    p->add_option("--test-fraction", prep.test_fraction, "Held-out fraction per class");
    p->add_option("--folds", prep.folds, "Cross-validation folds");
    p->add_flag("--ros-per-fold", prep.ros_per_fold, "Oversample inside each fold instead of before folding");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Cross-validated training over all run seeds");
    t->add_option("--data", train.data, "Preprocessed dataset directory")->required();
    t->add_option("--config", train.config, "JSON file with optional \"model\" and \"train\" objects");
    t->add_option("--preset", train.preset, "Base model config: desk or full");
    t->add_option("--out", train.out, "Output directory for checkpoints, logs and reports")->required();
    t->add_option("--seeds", train.seeds, "Run seeds (overrides the config)")->delimiter(',');
    t->add_option("--folds", train.folds, "Subset of folds to train")->delimiter(',');
    t->add_option("--epochs", train.epochs, "Epochs per fold (overrides the config)");
    t->add_option("--batch-size", train.batch_size, "Batch size (overrides the config)");
    t->add_flag("--pooled-auc", train.pooled_auc, "Pool pixels across samples for AUC");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate checkpoints on the held-out test split");
    e->add_option("--data", ev.data, "Preprocessed dataset directory")->required();
    e->add_option("--checkpoint", ev.checkpoints, "Checkpoint file (repeatable)");
    e->add_option("--checkpoints", ev.checkpoint_dir, "Directory of .p2sc files");
    e->add_option("--threshold", ev.threshold, "Binarization threshold");
    e->add_flag("--pooled-auc", ev.pooled_auc, "Pool pixels across samples for AUC");
    e->add_option("--out", ev.out, "Write the report as JSON");

    PredictArgs pr;
    auto* d = app.add_subcommand("predict", "Segment one image/doodle pair");
    d->add_option("--checkpoint", pr.checkpoint)->required();
    d->add_option("--image", pr.image, "Image PNG")->required();
    d->add_option("--doodle", pr.doodle, "Doodle PNG (non-zero pixels mark the prompt)")->required();
    d->add_option("--class-id", pr.class_id, "Class of the doodled structure")->required();
    d->add_option("--out", pr.out, "Mask PNG (0/255)")->required();
    d->add_option("--prob", pr.prob, "Probability PNG (0-255)");
    d->add_option("--prob-pfm", pr.prob_pfm, "Full-precision probability map (PFM)");
    d->add_option("--threshold", pr.threshold, "Binarization threshold");

    ServeArgs sv;
    auto* v = app.add_subcommand("serve", "Run the HTTP inference service");
    v->add_option("--checkpoint", sv.checkpoint)->required();
    v->add_option("--host", sv.host, "Bind address");
    v->add_option("--port", sv.port, "Bind port (PORT overrides)");
    v->add_option("--samples", sv.samples, "Dataset directory to serve demo samples from");
    v->add_option("--static", sv.static_dir, "Directory with the browser client");
    v->add_option("--workers", sv.workers, "Concurrent inferences")->check(CLI::Range(1, 64));

    InfoArgs in;
    auto* i = app.add_subcommand("info", "Parameter count and config of a checkpoint or config");
    i->add_option("--checkpoint", in.checkpoint);
    i->add_option("--config", in.config, "Model config JSON");
    i->add_option("--preset", in.preset, "desk or full");
    i->add_flag("--json", in.as_json, "Print JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        std::cerr << "p2s: usage error: " << ex.what() << '\n';
        return 2;
    }

    try {
        if (*s) return cmd_synth(synth);
        if (*p) return cmd_preprocess(prep);
        if (*t) return cmd_train(train);
        if (*e) return cmd_eval(ev);
        if (*d) return cmd_predict(pr);
        if (*v) return cmd_serve(sv);
        if (*i) return cmd_info(in);
    } catch (const UsageError& ex) {
        std::cerr << "p2s: usage error: " << ex.what() << '\n';
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "p2s: error: " << ex.what() << '\n';
        return 1;
    }
    return 2;
}
