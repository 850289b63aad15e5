#pragma once

// Dataset directories on disk:
//   root/<class_name>/{images,doodles,masks}/<id>.png   8-bit grayscale
//   root/<class_name>/labels/<id>.png                    synthetic instance map (optional)
//   root/manifest.json                                   ids, classes, split, fold, seed

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "p2s/png_io.hpp"
#include "p2s/serialize.hpp"

namespace p2s {

namespace fs = std::filesystem;

inline void write_dataset(const fs::path& root, const DatasetManifest& m) {
    std::set<const SampleRecord*> written;
    for (const auto& e : m.entries) {
        const auto& r = *e.record;
        if (!written.insert(&r).second) continue;
        const fs::path dir = root / m.class_names.at(static_cast<std::size_t>(r.class_id));
        for (auto* sub : {"images", "doodles", "masks"}) fs::create_directories(dir / sub);
        write_png(dir / "images" / (r.id + ".png"), r.image);
        write_png(dir / "doodles" / (r.id + ".png"), r.doodle);
        Gray8 mask = r.mask;
        for (auto& v : mask.pixels) v = v ? 255 : 0;
        write_png(dir / "masks" / (r.id + ".png"), mask);
        if (!r.instances.pixels.empty()) {
            fs::create_directories(dir / "labels");
            write_png(dir / "labels" / (r.id + ".png"), r.instances);
        }
    }
    fs::create_directories(root);
    std::ofstream(root / "manifest.json") << manifest_to_json(m).dump(2) << '\n';
}

namespace detail {
inline std::shared_ptr<SampleRecord> read_record(const fs::path& class_dir, const std::string& id, int class_id) {
    auto r = std::make_shared<SampleRecord>();
    r->id = id;
    r->class_id = class_id;
    const auto file = id + ".png";
    r->image = read_png_gray(class_dir / "images" / file);
    if (!fs::exists(class_dir / "doodles" / file)) throw DataError("record " + id + ": missing doodle " + file);
    r->doodle = read_png_gray(class_dir / "doodles" / file);
    if (!fs::exists(class_dir / "masks" / file)) throw DataError("record " + id + ": missing mask " + file);
    r->mask = read_png_gray(class_dir / "masks" / file);
    if (!r->image.same_dims(r->doodle) || !r->image.same_dims(r->mask))
        throw DataError("record " + id + ": image, doodle and mask dimensions differ");
    for (auto& v : r->mask.pixels) v = v ? 1 : 0;
    if (fs::exists(class_dir / "labels" / file)) r->instances = read_png_gray(class_dir / "labels" / file);
    return r;
}
}  // namespace detail

/// Loads a dataset directory. With manifest.json the listed entries (and
/// their split/fold labels) are restored; without it every class directory
/// is scanned in name order and records come back unassigned.
inline DatasetManifest read_dataset(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("dataset directory not found: " + root.string());
    DatasetManifest m;
    const fs::path mpath = root / "manifest.json";
    if (fs::exists(mpath)) {
        std::ifstream in(mpath);
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw DataError("manifest.json: " + std::string(e.what()));
        }
        j.at("class_names").get_to(m.class_names);
        detail::read_opt(j, "seed", m.seed);
        detail::read_opt(j, "side", m.side);
        detail::read_opt(j, "folds", m.folds);
        detail::read_opt(j, "ros_per_fold", m.ros_per_fold);
        std::map<std::string, std::shared_ptr<const SampleRecord>> cache;
        for (const auto& je : j.at("records")) {
            const auto id = je.at("id").get<std::string>();
            const int class_id = je.at("class_id").get<int>();
            if (class_id < 0 || class_id >= m.num_classes())
                throw DataError("manifest.json: record " + id + " has class_id out of range");
            auto& rec = cache[id];
            if (!rec) {
                auto r = detail::read_record(root / m.class_names[static_cast<std::size_t>(class_id)], id, class_id);
                r->target_instance = je.value("target_instance", 0);
                rec = std::move(r);
            }
            m.entries.push_back({rec, split_from(je.value("split", std::string("unassigned"))), je.value("fold", -1),
                                 je.value("duplicate", false)});
        }
        return m;
    }
    std::vector<fs::path> class_dirs;
    for (const auto& d : fs::directory_iterator(root))
        if (d.is_directory() && fs::is_directory(d.path() / "images")) class_dirs.push_back(d.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw DataError("no <class>/images directories under " + root.string());
    for (const auto& dir : class_dirs) {
        const int class_id = m.num_classes();
        m.class_names.push_back(dir.filename().string());
        std::vector<std::string> ids;
        for (const auto& f : fs::directory_iterator(dir / "images"))
            if (f.path().extension() == ".png") ids.push_back(f.path().stem().string());
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) m.entries.push_back({detail::read_record(dir, id, class_id)});
    }
    return m;
}

}  // namespace p2s
