#pragma once

// JSON forms of configs, manifests, logs and reports.

#include <nlohmann/json.hpp>

#include <string>

#include "p2s/training.hpp"

namespace p2s {

using json = nlohmann::json;

namespace detail {
template <typename V>
void read_opt(const json& j, const char* key, V& out) {
    if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& what) {
    if (!j.is_object()) throw std::invalid_argument(what + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (auto* k : known) ok = ok || it.key() == k;
        if (!ok) throw std::invalid_argument(what + ": unknown key \"" + it.key() + "\"");
    }
}
}  // namespace detail

inline std::string to_string(FusionMode m) { return m == FusionMode::concat ? "concat" : "add"; }

inline FusionMode fusion_mode_from(const std::string& s) {
    if (s == "concat") return FusionMode::concat;
    if (s == "add") return FusionMode::add;
    throw std::invalid_argument("fusion_mode must be \"concat\" or \"add\", got \"" + s + "\"");
}

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"input_side", c.input_side},
             {"stage_filters", c.stage_filters},
             {"se_reduction", c.se_reduction},
             {"use_depthwise", c.use_depthwise},
             {"use_se", c.use_se},
             {"use_residual", c.use_residual},
             {"fusion_mode", to_string(c.fusion_mode)},
             {"shared_encoder_weights", c.shared_encoder_weights},
             {"allow_irregular_filters", c.allow_irregular_filters}};
}

/// Missing keys keep the desk defaults; unknown keys are rejected.
inline void from_json(const json& j, ModelConfig& c) {
    detail::reject_unknown(j,
                           {"input_side", "stage_filters", "se_reduction", "use_depthwise", "use_se", "use_residual",
                            "fusion_mode", "shared_encoder_weights", "allow_irregular_filters"},
                           "model config");
    detail::read_opt(j, "input_side", c.input_side);
    detail::read_opt(j, "stage_filters", c.stage_filters);
    detail::read_opt(j, "se_reduction", c.se_reduction);
    detail::read_opt(j, "use_depthwise", c.use_depthwise);
    detail::read_opt(j, "use_se", c.use_se);
    detail::read_opt(j, "use_residual", c.use_residual);
    if (j.contains("fusion_mode")) c.fusion_mode = fusion_mode_from(j.at("fusion_mode").get<std::string>());
    detail::read_opt(j, "shared_encoder_weights", c.shared_encoder_weights);
    detail::read_opt(j, "allow_irregular_filters", c.allow_irregular_filters);
}

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"lr0", c.lr0},
             {"plateau_patience", c.plateau_patience},
             {"lr_factor", c.lr_factor},
             {"lr_min", c.lr_min},
             {"early_stop_patience", c.early_stop_patience},
             {"epochs_per_fold", c.epochs_per_fold},
             {"batch_size", c.batch_size},
             {"min_delta", c.min_delta},
             {"seeds", c.seeds},
             {"dice_smooth", c.dice_smooth},
             {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
             {"threshold", c.threshold}};
}

inline void from_json(const json& j, TrainConfig& c) {
    detail::reject_unknown(j,
                           {"lr0", "plateau_patience", "lr_factor", "lr_min", "early_stop_patience", "epochs_per_fold",
                            "batch_size", "min_delta", "seeds", "dice_smooth", "optimizer", "threshold"},
                           "train config");
    detail::read_opt(j, "lr0", c.lr0);
    detail::read_opt(j, "plateau_patience", c.plateau_patience);
    detail::read_opt(j, "lr_factor", c.lr_factor);
    detail::read_opt(j, "lr_min", c.lr_min);
    detail::read_opt(j, "early_stop_patience", c.early_stop_patience);
    detail::read_opt(j, "epochs_per_fold", c.epochs_per_fold);
    detail::read_opt(j, "batch_size", c.batch_size);
    detail::read_opt(j, "min_delta", c.min_delta);
    detail::read_opt(j, "seeds", c.seeds);
    detail::read_opt(j, "dice_smooth", c.dice_smooth);
    if (j.contains("optimizer")) {
        auto s = j.at("optimizer").get<std::string>();
        if (s == "adam") c.optimizer = OptimizerKind::adam;
        else if (s == "sgd") c.optimizer = OptimizerKind::sgd;
        else throw std::invalid_argument("optimizer must be \"adam\" or \"sgd\", got \"" + s + "\"");
    }
    detail::read_opt(j, "threshold", c.threshold);
}

inline void to_json(json& j, const EpochRecord& r) {
    j = json{{"run_seed", r.run_seed},     {"fold", r.fold}, {"epoch", r.epoch},
             {"train_loss", r.train_loss}, {"val_dice", r.val_dice}, {"lr", r.lr},
             {"checkpoint_written", r.checkpoint_written}};
}

inline void from_json(const json& j, EpochRecord& r) {
    j.at("run_seed").get_to(r.run_seed);
    j.at("fold").get_to(r.fold);
    j.at("epoch").get_to(r.epoch);
    j.at("train_loss").get_to(r.train_loss);
    j.at("val_dice").get_to(r.val_dice);
    j.at("lr").get_to(r.lr);
    j.at("checkpoint_written").get_to(r.checkpoint_written);
}

inline void to_json(json& j, const MetricsRow& r) {
    j = json{{"name", r.name},
             {"dice", r.dice},
             {"jaccard", r.jaccard},
             {"auc", r.auc ? json(*r.auc) : json(nullptr)},
             {"accuracy", r.accuracy},
             {"samples", r.samples},
             {"auc_excluded", r.auc_excluded}};
}

inline void from_json(const json& j, MetricsRow& r) {
    j.at("name").get_to(r.name);
    j.at("dice").get_to(r.dice);
    j.at("jaccard").get_to(r.jaccard);
    j.at("accuracy").get_to(r.accuracy);
    if (!j.at("auc").is_null()) r.auc = j.at("auc").get<double>();
    j.at("samples").get_to(r.samples);
    j.at("auc_excluded").get_to(r.auc_excluded);
}

inline void to_json(json& j, const MetricsReport& r) {
    j = json{{"rows", r.rows},
             {"provenance",
              {{"seeds", r.seeds},
               {"folds", r.folds},
               {"threshold", r.threshold},
               {"pooled_auc", r.pooled_auc},
               {"aggregation", r.aggregation},
               {"evaluations", r.evaluations}}}};
}

inline void from_json(const json& j, MetricsReport& r) {
    j.at("rows").get_to(r.rows);
    const auto& p = j.at("provenance");
    p.at("seeds").get_to(r.seeds);
    p.at("folds").get_to(r.folds);
    p.at("threshold").get_to(r.threshold);
    p.at("pooled_auc").get_to(r.pooled_auc);
    p.at("aggregation").get_to(r.aggregation);
    p.at("evaluations").get_to(r.evaluations);
}

inline std::string to_string(Split s) {
    switch (s) {
        case Split::trainval: return "trainval";
        case Split::test: return "test";
        default: return "unassigned";
    }
}

inline Split split_from(const std::string& s) {
    if (s == "trainval") return Split::trainval;
    if (s == "test") return Split::test;
    if (s == "unassigned") return Split::unassigned;
    throw std::invalid_argument("unknown split label \"" + s + "\"");
}

/// Manifest metadata without pixel data. Oversampled duplicates appear as
/// additional entries that repeat an id with "duplicate": true.
inline json manifest_to_json(const DatasetManifest& m) {
    json entries = json::array();
    for (const auto& e : m.entries) {
        json je{{"id", e.record->id},
                {"class", m.class_names.at(static_cast<std::size_t>(e.record->class_id))},
                {"class_id", e.record->class_id},
                {"split", to_string(e.split)},
                {"fold", e.fold},
                {"duplicate", e.duplicate}};
        if (e.record->target_instance > 0) je["target_instance"] = e.record->target_instance;
        entries.push_back(std::move(je));
    }
    return json{{"class_names", m.class_names}, {"seed", m.seed},    {"side", m.side},
                {"folds", m.folds},             {"ros_per_fold", m.ros_per_fold}, {"records", entries}};
}

}  // namespace p2s
