#pragma once

// HTTP inference service.
//
//   GET  /health         200 "ok"
//   GET  /model/info     {config, parameter_count, buffer_count, model_id, class_names, provenance}
//   GET  /samples        [{id, class_id, class_name, width, height}]
//   GET  /samples/{id}   {id, class_id, class_name, width, height, image, doodle, mask}   (base64 PNG)
//   POST /segment        {image, doodle, class_id, threshold?}
//                        -> {mask, prob, width, height, threshold, inference_ms, model_id}
// Errors are JSON {"error": message} (plus "id" on 500): 400 malformed
// request, 404 unknown sample, 413 body over the limit, 422 class_id or
// threshold out of range, 500 internal failure.

#include <sodium.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <random>
#include <semaphore>
#include <set>

#include "p2s/checkpoint.hpp"
#include "p2s/dataset.hpp"
#include "p2s/inference.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose _res macro breaks Eigen headers.
#include <httplib.h>

namespace p2s {

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    if (sodium_init() < 0) throw std::runtime_error("libsodium initialisation failed");
    std::string out(sodium_base64_ENCODED_LEN(bytes.size(), sodium_base64_VARIANT_ORIGINAL), '\0');
    sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), sodium_base64_VARIANT_ORIGINAL);
    out.pop_back();  // trailing NUL
    return out;
}

/// Accepts plain base64 or a data URL ("data:image/png;base64,...").
inline std::optional<std::vector<std::uint8_t>> base64_decode(std::string_view text) {
    if (sodium_init() < 0) throw std::runtime_error("libsodium initialisation failed");
    if (text.starts_with("data:")) {
        auto comma = text.find(',');
        if (comma == std::string_view::npos) return std::nullopt;
        text.remove_prefix(comma + 1);
    }
    std::vector<std::uint8_t> out(text.size() / 4 * 3 + 3);
    std::size_t len = 0;
    if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), " \r\n", &len, nullptr,
                          sodium_base64_VARIANT_ORIGINAL) != 0)
        return std::nullopt;
    out.resize(len);
    return out;
}

struct DemoSample {
    std::string id;
    int class_id = 0;
    Gray8 image, doodle, mask;
};

/// Demo samples drawn from the synthetic generator; only meaningful when the
/// model was trained on the synthetic classes.
inline std::vector<DemoSample> synthetic_demo_samples(const std::vector<std::string>& class_names, std::size_t side,
                                                      std::size_t per_class = 4, std::uint64_t seed = 2024) {
    const auto& names = synthetic_class_names();
    if (class_names.empty() || class_names.size() > names.size() ||
        !std::equal(class_names.begin(), class_names.end(), names.begin()))
        return {};
    auto m = generate_synthetic({static_cast<int>(class_names.size()), per_class, side, seed});
    std::vector<DemoSample> out;
    for (const auto& e : m.entries) {
        Gray8 mask = e.record->mask;
        out.push_back({e.record->id, e.record->class_id, e.record->image, e.record->doodle, std::move(mask)});
    }
    return out;
}

inline std::vector<DemoSample> demo_samples_from(const DatasetManifest& m, std::size_t limit = 24) {
    std::vector<DemoSample> out;
    std::set<const SampleRecord*> seen;
    auto pool = m.select(Split::test);
    if (pool.empty()) pool = m.entries;
    for (const auto& e : pool) {
        if (out.size() >= limit) break;
        if (!seen.insert(e.record.get()).second) continue;
        out.push_back({e.record->id, e.record->class_id, e.record->image, e.record->doodle, e.record->mask});
    }
    return out;
}

struct ServiceOptions {
    std::size_t max_body_bytes = 8u << 20;
    std::size_t max_pixels = 4096u * 4096u;
    int inference_slots = 2;
    int http_threads = 8;
    std::string static_dir;  // optional browser client
};

class HttpError : public std::runtime_error {
   public:
    HttpError(int status, const std::string& msg) : std::runtime_error(msg), status_(status) {}
    int status() const { return status_; }

   private:
    int status_;
};

class SegmentService {
   public:
    SegmentService(LoadedCheckpoint ckpt, std::vector<DemoSample> samples, ServiceOptions opt = {})
        : ckpt_(std::move(ckpt)), samples_(std::move(samples)), opt_(std::move(opt)), slots_(opt_.inference_slots) {
        if (ckpt_.provenance.class_names.empty())
            throw std::invalid_argument("service: checkpoint carries no class names");
        if (opt_.inference_slots < 1 || opt_.inference_slots > 64)
            throw std::invalid_argument("service: inference slots must be in [1, 64]");
    }

    int num_classes() const { return static_cast<int>(ckpt_.provenance.class_names.size()); }
    const LoadedCheckpoint& checkpoint() const { return ckpt_; }

    json info() const {
        return {{"config", ckpt_.model.config()},
                {"parameter_count", ckpt_.model.parameter_count()},
                {"buffer_count", ckpt_.model.store().buffer_count()},
                {"model_id", ckpt_.model_id},
                {"class_names", ckpt_.provenance.class_names},
                {"provenance", ckpt_.provenance}};
    }

    json sample_list() const {
        json out = json::array();
        for (const auto& s : samples_) out.push_back(sample_meta(s));
        return out;
    }

    json sample(const std::string& id) const {
        for (const auto& s : samples_) {
            if (s.id != id) continue;
            json j = sample_meta(s);
            Gray8 mask = s.mask;
            for (auto& v : mask.pixels) v = v ? 255 : 0;
            j["image"] = base64_encode(encode_png(s.image));
            j["doodle"] = base64_encode(encode_png(s.doodle));
            j["mask"] = base64_encode(encode_png(mask));
            return j;
        }
        throw HttpError(404, "unknown sample \"" + id + "\"");
    }

    /// Handles a SegmentRequest body; throws HttpError for client errors.
    json segment(const std::string& body) {
        json req;
        try {
            req = json::parse(body);
        } catch (const json::exception&) {
            throw HttpError(400, "request body is not valid JSON");
        }
        if (!req.is_object()) throw HttpError(400, "request body must be a JSON object");
        const Gray8 image = to_gray(field_png(req, "image"));
        const Gray8 doodle_raw = nonzero_mask(field_png(req, "doodle"));
        if (!image.same_dims(doodle_raw))
            throw HttpError(400, "image is " + dims(image) + " but doodle is " + dims(doodle_raw));
        if (!req.contains("class_id") || !req["class_id"].is_number_integer())
            throw HttpError(400, "class_id must be an integer");
        const auto class_id = req["class_id"].get<long long>();
        if (class_id < 0 || class_id >= num_classes())
            throw HttpError(422, "class_id " + std::to_string(class_id) + " outside [0, " +
                                     std::to_string(num_classes()) + ")");
        double threshold = 0.5;
        if (req.contains("threshold") && !req["threshold"].is_null()) {
            if (!req["threshold"].is_number()) throw HttpError(400, "threshold must be a number");
            threshold = req["threshold"].get<double>();
            if (!(threshold >= 0.0 && threshold <= 1.0)) throw HttpError(422, "threshold must lie in [0, 1]");
        }
        const auto t0 = std::chrono::steady_clock::now();
        Prediction pred;
        {
            slots_.acquire();
            struct Release {
                std::counting_semaphore<64>& s;
                ~Release() { s.release(); }
            } release{slots_};
            pred = predict(ckpt_.model, image, doodle_raw, static_cast<int>(class_id), num_classes(), threshold);
        }
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        Gray8 mask = pred.mask;
        for (auto& v : mask.pixels) v = v ? 255 : 0;
        return {{"mask", base64_encode(encode_png(mask))},
                {"prob", base64_encode(encode_png(quantize_probability(pred.prob)))},
                {"width", image.width},
                {"height", image.height},
                {"threshold", threshold},
                {"inference_ms", ms},
                {"model_id", ckpt_.model_id}};
    }

    void install(httplib::Server& svr) {
        svr.set_payload_max_length(opt_.max_body_bytes);
        svr.new_task_queue = [n = opt_.http_threads] { return new httplib::ThreadPool(static_cast<std::size_t>(n)); };
        svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                 {"Access-Control-Allow-Headers", "Content-Type"}});
        svr.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        svr.Get("/health", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
        svr.Get("/model/info", [this](const httplib::Request&, httplib::Response& res) { send(res, 200, info()); });
        svr.Get("/samples", [this](const httplib::Request&, httplib::Response& res) { send(res, 200, sample_list()); });
        svr.Get(R"(/samples/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { return sample(req.matches[1]); });
        });
        svr.Post("/segment", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { return segment(req.body); });
        });
        svr.set_exception_handler([this](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            internal_error(res, ep);
        });
        svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return;
            const char* msg = res.status == 413 ? "request body exceeds the size limit"
                              : res.status == 404 ? "not found"
                                                  : "request failed";
            res.set_content(json{{"error", msg}}.dump(), "application/json");
        });
        if (!opt_.static_dir.empty() && !svr.set_mount_point("/", opt_.static_dir))
            throw std::invalid_argument("service: static directory not found: " + opt_.static_dir);
    }

   private:
    static std::string dims(const Gray8& g) { return std::to_string(g.width) + "x" + std::to_string(g.height); }

    json sample_meta(const DemoSample& s) const {
        return {{"id", s.id},
                {"class_id", s.class_id},
                {"class_name", ckpt_.provenance.class_names.at(static_cast<std::size_t>(s.class_id))},
                {"width", s.image.width},
                {"height", s.image.height}};
    }

    Image8 field_png(const json& req, const char* key) const {
        auto it = req.find(key);
        if (it == req.end() || !it->is_string()) throw HttpError(400, std::string(key) + " must be a base64 PNG string");
        auto bytes = base64_decode(it->get_ref<const std::string&>());
        if (!bytes) throw HttpError(400, std::string(key) + " is not valid base64");
        try {
            return decode_png(*bytes, opt_.max_pixels);
        } catch (const PngError& e) {
            throw HttpError(400, std::string(key) + ": " + e.what());
        }
    }

    static void send(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    template <typename F>
    void guarded(httplib::Response& res, F&& fn) {
        try {
            send(res, 200, fn());
        } catch (const HttpError& e) {
            send(res, e.status(), {{"error", e.what()}});
        } catch (...) {
            internal_error(res, std::current_exception());
        }
    }

    void internal_error(httplib::Response& res, std::exception_ptr ep) {
        char id[17];
        {
            std::lock_guard lock(error_mu_);
            std::snprintf(id, sizeof id, "%016llx", static_cast<unsigned long long>(error_ids_()));
        }
        std::string what = "unknown exception";
        try {
            if (ep) std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            what = e.what();
        } catch (...) {
        }
        std::cerr << "p2s serve: internal error " << id << ": " << what << '\n';
        send(res, 500, {{"error", "internal error"}, {"id", id}});
    }

    LoadedCheckpoint ckpt_;
    std::vector<DemoSample> samples_;
    ServiceOptions opt_;
    std::counting_semaphore<64> slots_;
    std::mutex error_mu_;
    std::mt19937_64 error_ids_{std::random_device{}()};
};

}  // namespace p2s
