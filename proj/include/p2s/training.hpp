#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "p2s/dataset.hpp"
#include "p2s/metrics.hpp"
#include "p2s/model.hpp"
#include "p2s/optim.hpp"

namespace p2s {

struct TrainConfig {
    double lr0 = 1e-3;
    int plateau_patience = 5;
    double lr_factor = 0.2;
    double lr_min = 1e-9;
    int early_stop_patience = 10;
    int epochs_per_fold = 20;
    std::size_t batch_size = 8;
    double min_delta = 1e-4;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    double dice_smooth = 1.0;
    OptimizerKind optimizer = OptimizerKind::adam;
    double threshold = 0.5;

    void validate() const {
        if (!(lr_factor > 0 && lr_factor < 1)) throw std::invalid_argument("train config: lr_factor must be in (0,1)");
        if (!(lr_min > 0)) throw std::invalid_argument("train config: lr_min must be positive");
        if (plateau_patience < 1 || early_stop_patience < 1)
            throw std::invalid_argument("train config: patience values must be >= 1");
        if (batch_size == 0 || epochs_per_fold < 1)
            throw std::invalid_argument("train config: batch_size and epochs_per_fold must be positive");
    }
};

class TrainingError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Soft Dice loss over the whole batch:
/// 1 - (2 sum(p t) + s) / (sum p + sum t + s).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& truth, T smooth) {
    if (pred.shape() != truth.shape()) shape_mismatch("dice_loss", pred.shape(), truth.shape());
    Tensor<T> inter = sum(mul(pred, truth));
    Tensor<T> num = add_scalar(mul_scalar(inter, T{2}), smooth);
    Tensor<T> den = add_scalar(add(sum(pred), sum(truth)), smooth);
    return add_scalar(mul_scalar(div(num, den), T{-1}), T{1});
}

/// Multiplies the learning rate by `factor` once the monitored score has
/// gone `patience` epochs without beating its best by more than min_delta.
class LrPlateauSchedule {
   public:
    LrPlateauSchedule(double lr0, int patience, double factor, double lr_min, double min_delta)
        : lr_(lr0), patience_(patience), factor_(factor), lr_min_(lr_min), min_delta_(min_delta) {}

    explicit LrPlateauSchedule(const TrainConfig& c)
        : LrPlateauSchedule(c.lr0, c.plateau_patience, c.lr_factor, c.lr_min, c.min_delta) {}

    double step(double score) {
        if (score > best_ + min_delta_) {
            best_ = score;
            wait_ = 0;
        } else if (++wait_ >= patience_) {
            lr_ = std::max(lr_ * factor_, lr_min_);
            wait_ = 0;
        }
        return lr_;
    }

    double lr() const { return lr_; }
    int wait() const { return wait_; }

   private:
    double lr_;
    int patience_;
    double factor_, lr_min_, min_delta_;
    double best_ = -std::numeric_limits<double>::infinity();
    int wait_ = 0;
};

class EarlyStopping {
   public:
    EarlyStopping(int patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

    struct Verdict {
        bool improved = false;
        bool stop = false;
    };

    Verdict observe(double score) {
        if (score > best_ + min_delta_) {
            best_ = score;
            wait_ = 0;
            return {true, false};
        }
        return {false, ++wait_ >= patience_};
    }

    double best() const { return best_; }

   private:
    int patience_;
    double min_delta_;
    double best_ = -std::numeric_limits<double>::infinity();
    int wait_ = 0;
};

struct EpochRecord {
    std::uint64_t run_seed = 0;
    int fold = 0;
    int epoch = 0;  // zero-based
    double train_loss = 0;
    double val_dice = 0;
    double lr = 0;
    bool checkpoint_written = false;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    double best_val_dice = 0;
    int best_epoch = -1;
    bool early_stopped = false;
};

/// Parameter and buffer values of a model, in store order.
struct ModelState {
    std::vector<std::vector<float>> params, buffers;
};

inline ModelState capture_state(const Prompt2SegModel<float>& m) {
    ModelState s;
    for (const auto& p : m.store().params()) s.params.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    for (const auto& b : m.store().buffers()) s.buffers.emplace_back(b.tensor.data().begin(), b.tensor.data().end());
    return s;
}

inline void restore_state(Prompt2SegModel<float>& m, const ModelState& s) {
    auto& st = m.store();
    if (s.params.size() != st.params().size() || s.buffers.size() != st.buffers().size())
        throw std::invalid_argument("restore_state: tensor count mismatch");
    auto copy = [](const std::vector<float>& src, Tensor<float> dst) {
        if (src.size() != dst.size()) throw std::invalid_argument("restore_state: tensor size mismatch");
        std::copy(src.begin(), src.end(), dst.mutable_data().begin());
    };
    for (std::size_t i = 0; i < s.params.size(); ++i) copy(s.params[i], st.params()[i].tensor);
    for (std::size_t i = 0; i < s.buffers.size(); ++i) copy(s.buffers[i], st.buffers()[i].tensor);
}

struct Batch {
    Tensor<float> image, doodle, mask;
};

/// Stacks encoded records into N x S x S x 1 tensors.
inline Batch make_batch(const std::vector<ManifestEntry>& entries, std::span<const std::size_t> idx, int num_classes) {
    if (idx.empty()) throw std::invalid_argument("make_batch: empty batch");
    const auto& first = *entries[idx[0]].record;
    const std::size_t h = first.image.height, w = first.image.width, px = h * w;
    std::vector<float> img(idx.size() * px), doo(idx.size() * px), msk(idx.size() * px);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& r = *entries[idx[b]].record;
        if (r.image.width != w || r.image.height != h)
            throw std::invalid_argument("make_batch: record " + r.id + " has different dimensions");
        auto enc = encode_and_normalize(r.image, r.doodle, r.mask.pixels.empty() ? nullptr : &r.mask, r.class_id,
                                        num_classes);
        std::copy(enc.image.pixels.begin(), enc.image.pixels.end(), img.begin() + static_cast<long>(b * px));
        std::copy(enc.doodle.pixels.begin(), enc.doodle.pixels.end(), doo.begin() + static_cast<long>(b * px));
        if (!enc.mask.pixels.empty())
            std::copy(enc.mask.pixels.begin(), enc.mask.pixels.end(), msk.begin() + static_cast<long>(b * px));
    }
    Shape s{idx.size(), h, w, 1};
    return {Tensor<float>(s, std::move(img)), Tensor<float>(s, std::move(doo)), Tensor<float>(s, std::move(msk))};
}

/// Infer-mode probability maps (one vector of H*W floats per entry).
inline std::vector<std::vector<float>> predict_entries(const Prompt2SegModel<float>& model,
                                                       const std::vector<ManifestEntry>& entries, int num_classes,
                                                       std::size_t batch_size = 8) {
    NoGradGuard guard;
    std::vector<std::vector<float>> out;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < entries.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(entries.size(), start + batch_size); ++i) idx.push_back(i);
        auto batch = make_batch(entries, idx, num_classes);
        auto probs = model.forward(batch.image, batch.doodle, Mode::infer);
        const std::size_t px = probs.size() / idx.size();
        for (std::size_t b = 0; b < idx.size(); ++b)
            out.emplace_back(probs.data().begin() + static_cast<long>(b * px),
                             probs.data().begin() + static_cast<long>((b + 1) * px));
    }
    return out;
}

/// Mean per-sample hard Dice at the threshold; used as the validation score.
inline double mean_dice(const Prompt2SegModel<float>& model, const std::vector<ManifestEntry>& entries,
                        int num_classes, double threshold) {
    if (entries.empty()) throw std::invalid_argument("mean_dice: no records");
    auto probs = predict_entries(model, entries, num_classes);
    double total = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto pred = binarize<float>(probs[i], threshold);
        total += dice_coefficient(pred, entries[i].record->mask.pixels);
    }
    return total / static_cast<double>(entries.size());
}

struct FoldResult {
    TrainLog log;
    ModelState best;
    int checkpoint_writes = 0;
};

struct FoldHooks {
    // Called after each improving epoch, with the model holding the new best weights.
    std::function<void(const Prompt2SegModel<float>&, const EpochRecord&)> on_checkpoint;
    std::function<void(const EpochRecord&)> on_epoch;
    // Replaces the measured validation score (used to script schedules).
    std::function<double(int epoch, double measured)> val_override;
};

/// Trains one fold: Dice loss, Adam (or SGD), plateau LR schedule, early
/// stopping and best-checkpoint tracking. On return the model holds the best
/// weights seen.
inline FoldResult train_fold(Prompt2SegModel<float>& model, const FoldData& data, int num_classes,
                             const TrainConfig& cfg, std::uint64_t run_seed, int fold, const FoldHooks& hooks = {}) {
    cfg.validate();
    if (data.train.empty() || data.val.empty()) throw TrainingError("train_fold: empty train or validation split");
    Optimizer<float> opt(model.store().param_tensors(), cfg.optimizer);
    LrPlateauSchedule schedule(cfg);
    EarlyStopping stopper(cfg.early_stop_patience, cfg.min_delta);
    std::mt19937_64 rng(mix_seed(run_seed, 0xba7c + static_cast<std::uint64_t>(fold)));

    FoldResult result;
    result.best = capture_state(model);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double lr = cfg.lr0;
    for (int epoch = 0; epoch < cfg.epochs_per_fold; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
            auto batch = make_batch(data.train, idx, num_classes);
            auto pred = model.forward(batch.image, batch.doodle, Mode::train);
            auto loss = dice_loss(pred, batch.mask, static_cast<float>(cfg.dice_smooth));
            const double lv = loss.item();
            if (!std::isfinite(lv))
                throw TrainingError("train_fold: non-finite loss at run " + std::to_string(run_seed) + " fold " +
                                    std::to_string(fold) + " epoch " + std::to_string(epoch) + " batch " +
                                    std::to_string(batches));
            loss.backward();
            opt.step(lr);
            loss_sum += lv;
            ++batches;
        }

        EpochRecord rec;
        rec.run_seed = run_seed;
        rec.fold = fold;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(batches);
        rec.val_dice = mean_dice(model, data.val, num_classes, cfg.threshold);
        if (hooks.val_override) rec.val_dice = hooks.val_override(epoch, rec.val_dice);
        auto verdict = stopper.observe(rec.val_dice);
        if (verdict.improved) {
            rec.checkpoint_written = true;
            result.best = capture_state(model);
            result.log.best_val_dice = rec.val_dice;
            result.log.best_epoch = epoch;
            ++result.checkpoint_writes;
            if (hooks.on_checkpoint) hooks.on_checkpoint(model, rec);
        }
        // Logged rate is the one in force after this epoch's schedule update.
        lr = rec.lr = schedule.step(rec.val_dice);
        result.log.epochs.push_back(rec);
        if (hooks.on_epoch) hooks.on_epoch(rec);
        if (verdict.stop) {
            result.log.early_stopped = true;
            break;
        }
    }
    restore_state(model, result.best);
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation reports.

struct MetricsRow {
    std::string name;
    double dice = 0, jaccard = 0, accuracy = 0;  // percentages
    std::optional<double> auc;
    std::size_t samples = 0;
    std::size_t auc_excluded = 0;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;  // one per class, then "All"
    std::vector<std::uint64_t> seeds;
    std::vector<int> folds;
    double threshold = 0.5;
    bool pooled_auc = false;
    std::string aggregation = "per-sample mean within class; All = mean over all samples";
    std::size_t evaluations = 1;

    const MetricsRow& row(const std::string& name) const {
        for (const auto& r : rows)
            if (r.name == name) return r;
        throw std::out_of_range("report has no row " + name);
    }
};

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

struct EvalOptions {
    double threshold = 0.5;
    bool pooled_auc = false;
};

/// Scores every test record and aggregates per class plus an "All" row.
inline MetricsReport evaluate(const Prompt2SegModel<float>& model, const std::vector<ManifestEntry>& test,
                              const std::vector<std::string>& class_names, EvalOptions opt = {}) {
    if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
    const int k = static_cast<int>(class_names.size());
    auto probs = predict_entries(model, test, k);

    struct Acc {
        double dice = 0, jaccard = 0, acc = 0, auc = 0;
        std::size_t n = 0, n_auc = 0, excluded = 0;
        std::vector<float> pooled_p;
        std::vector<std::uint8_t> pooled_t;
    };
    std::vector<Acc> acc(static_cast<std::size_t>(k) + 1);
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& r = *test[i].record;
        auto s = score_sample<float>(probs[i], r.mask.pixels, opt.threshold);
        for (auto* a : {&acc[static_cast<std::size_t>(r.class_id)], &acc.back()}) {
            a->dice += s.dice;
            a->jaccard += s.jaccard;
            a->acc += s.accuracy;
            ++a->n;
            if (s.auc) {
                a->auc += *s.auc;
                ++a->n_auc;
            } else {
                ++a->excluded;
            }
            if (opt.pooled_auc) {
                a->pooled_p.insert(a->pooled_p.end(), probs[i].begin(), probs[i].end());
                a->pooled_t.insert(a->pooled_t.end(), r.mask.pixels.begin(), r.mask.pixels.end());
            }
        }
    }
    MetricsReport rep;
    rep.threshold = opt.threshold;
    rep.pooled_auc = opt.pooled_auc;
    for (std::size_t c = 0; c <= static_cast<std::size_t>(k); ++c) {
        const auto& a = acc[c];
        MetricsRow row;
        row.name = c < static_cast<std::size_t>(k) ? class_names[c] : "All";
        row.samples = a.n;
        row.auc_excluded = a.excluded;
        if (a.n > 0) {
            row.dice = round2(100.0 * a.dice / static_cast<double>(a.n));
            row.jaccard = round2(100.0 * a.jaccard / static_cast<double>(a.n));
            row.accuracy = round2(100.0 * a.acc / static_cast<double>(a.n));
        }
        if (opt.pooled_auc && a.n > 0) {
            try {
                row.auc = round2(100.0 * pixel_auc<float>(a.pooled_p, a.pooled_t));
            } catch (const DegenerateLabels&) {
            }
        } else if (a.n_auc > 0) {
            row.auc = round2(100.0 * a.auc / static_cast<double>(a.n_auc));
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

/// Dice of the thresholded prediction against the prompted instance and
/// against every other instance in the scene. Only records carrying an
/// instance raster contribute; instances cropped away entirely are skipped.
struct ConditioningScores {
    double target_dice = 0;
    double distractor_dice = 0;
    std::size_t samples = 0;
    std::size_t distractors = 0;
};

inline ConditioningScores conditioning_scores(const Prompt2SegModel<float>& model,
                                              const std::vector<ManifestEntry>& test, int num_classes,
                                              double threshold = 0.5) {
    std::vector<ManifestEntry> with_inst;
    for (const auto& e : test)
        if (!e.record->instances.pixels.empty()) with_inst.push_back(e);
    if (with_inst.empty()) throw std::invalid_argument("conditioning_scores: no record carries instance labels");
    auto probs = predict_entries(model, with_inst, num_classes);
    ConditioningScores out;
    for (std::size_t i = 0; i < with_inst.size(); ++i) {
        const auto& r = *with_inst[i].record;
        auto pred = binarize<float>(probs[i], threshold);
        out.target_dice += dice_coefficient(pred, r.mask.pixels);
        ++out.samples;
        const int max_id = *std::max_element(r.instances.pixels.begin(), r.instances.pixels.end());
        for (int id = 1; id <= max_id; ++id) {
            if (id == r.target_instance) continue;
            std::vector<std::uint8_t> inst(r.instances.size());
            bool any = false;
            for (std::size_t p = 0; p < inst.size(); ++p) {
                inst[p] = r.instances.pixels[p] == id ? 1 : 0;
                any = any || inst[p];
            }
            if (!any) continue;
            out.distractor_dice += dice_coefficient(pred, inst);
            ++out.distractors;
        }
    }
    out.target_dice /= static_cast<double>(out.samples);
    if (out.distractors > 0) out.distractor_dice /= static_cast<double>(out.distractors);
    return out;
}

/// Row-wise mean of several evaluations of the same test set.
inline MetricsReport average_reports(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("average_reports: nothing to average");
    MetricsReport out = reports.front();
    out.evaluations = reports.size();
    out.seeds.clear();
    out.folds.clear();
    for (std::size_t r = 0; r < out.rows.size(); ++r) {
        double d = 0, j = 0, a = 0, auc = 0;
        std::size_t n_auc = 0, excluded = 0;
        for (const auto& rep : reports) {
            const auto& row = rep.rows.at(r);
            d += row.dice;
            j += row.jaccard;
            a += row.accuracy;
            excluded += row.auc_excluded;
            if (row.auc) {
                auc += *row.auc;
                ++n_auc;
            }
        }
        const double n = static_cast<double>(reports.size());
        auto& row = out.rows[r];
        row.dice = round2(d / n);
        row.jaccard = round2(j / n);
        row.accuracy = round2(a / n);
        row.auc = n_auc ? std::optional<double>(round2(auc / static_cast<double>(n_auc))) : std::nullopt;
        row.auc_excluded = excluded;
    }
    for (const auto& rep : reports) {
        out.seeds.insert(out.seeds.end(), rep.seeds.begin(), rep.seeds.end());
        out.folds.insert(out.folds.end(), rep.folds.begin(), rep.folds.end());
    }
    return out;
}

/// Aligned text table: Class | Dice | Jaccard | AUC | Accuracy.
inline void print_table(std::ostream& os, const MetricsReport& rep) {
    std::size_t width = 5;
    for (const auto& r : rep.rows) width = std::max(width, r.name.size());
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s %8s %8s %8s %8s\n", static_cast<int>(width), "Class", "Dice", "Jaccard",
                  "AUC", "Accuracy");
    os << buf;
    for (const auto& r : rep.rows) {
        char auc[16];
        if (r.auc) std::snprintf(auc, sizeof auc, "%.2f", *r.auc);
        else std::snprintf(auc, sizeof auc, "n/a");
        std::snprintf(buf, sizeof buf, "%-*s %8.2f %8.2f %8s %8.2f\n", static_cast<int>(width), r.name.c_str(), r.dice,
                      r.jaccard, auc, r.accuracy);
        os << buf;
    }
}

struct ExperimentHooks {
    FoldHooks fold;
    // Called with each fold's best model after training.
    std::function<void(const Prompt2SegModel<float>&, std::uint64_t run_seed, int fold, const FoldResult&)> on_fold_done;
    std::vector<int> folds;  // empty = all folds
};

struct ExperimentResult {
    MetricsReport report;
    std::vector<MetricsReport> per_fold;
    std::vector<TrainLog> logs;
};

/// For every run seed and fold: fresh model, train, evaluate the best
/// checkpoint on the test split; reports are averaged over all of them.
inline ExperimentResult run_experiment(const DatasetManifest& manifest, const ModelConfig& model_cfg,
                                       const TrainConfig& train_cfg, const ExperimentHooks& hooks = {},
                                       EvalOptions eval = {}) {
    train_cfg.validate();
    auto test = manifest.select(Split::test);
    std::vector<int> folds = hooks.folds;
    if (folds.empty())
        for (int f = 0; f < manifest.folds; ++f) folds.push_back(f);
    ExperimentResult out;
    for (auto seed : train_cfg.seeds) {
        for (int fold : folds) {
            Prompt2SegModel<float> model(model_cfg, mix_seed(seed, static_cast<std::uint64_t>(fold)));
            auto data = fold_split(manifest, fold, seed);
            auto res = train_fold(model, data, manifest.num_classes(), train_cfg, seed, fold, hooks.fold);
            if (hooks.on_fold_done) hooks.on_fold_done(model, seed, fold, res);
            auto rep = evaluate(model, test, manifest.class_names, eval);
            rep.seeds = {seed};
            rep.folds = {fold};
            out.per_fold.push_back(std::move(rep));
            out.logs.push_back(std::move(res.log));
        }
    }
    out.report = average_reports(out.per_fold);
    return out;
}

}  // namespace p2s
