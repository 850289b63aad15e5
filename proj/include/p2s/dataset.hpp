#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "p2s/preprocess.hpp"

namespace p2s {

struct SampleRecord {
    std::string id;
    int class_id = 0;
    Gray8 image;
    Gray8 doodle;  // non-zero pixels mark the prompt
    Gray8 mask;    // {0,1}
    // Synthetic data only: per-pixel shape index (0 = background) and the
    // index of the doodled shape.
    Gray8 instances;
    int target_instance = 0;
};

enum class Split { unassigned, trainval, test };

struct ManifestEntry {
    std::shared_ptr<const SampleRecord> record;
    Split split = Split::unassigned;
    int fold = -1;
    bool duplicate = false;  // added by random oversampling
};

struct DatasetManifest {
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> entries;
    std::uint64_t seed = 0;
    std::size_t side = 0;
    int folds = 5;
    bool ros_per_fold = false;

    int num_classes() const { return static_cast<int>(class_names.size()); }

    std::vector<ManifestEntry> select(Split s) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.split == s) out.push_back(e);
        return out;
    }
};

class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Stable 64-bit mix used to derive per-record and per-fold seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Duplicates uniformly drawn same-class records until every class matches
/// the largest class. Originals are kept, in order, ahead of the duplicates.
inline std::vector<ManifestEntry> random_oversample(const std::vector<ManifestEntry>& records, int num_classes,
                                                    std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < records.size(); ++i) {
        int c = records[i].record->class_id;
        if (c < 0 || c >= num_classes) throw DataError("random_oversample: class id out of range");
        by_class[static_cast<std::size_t>(c)].push_back(i);
    }
    std::size_t target = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].empty()) throw DataError("random_oversample: class " + std::to_string(c) + " has no records");
        target = std::max(target, by_class[c].size());
    }
    std::mt19937_64 rng(seed);
    std::vector<ManifestEntry> out = records;
    for (auto& members : by_class) {
        std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
        for (std::size_t k = members.size(); k < target; ++k) {
            ManifestEntry dup = records[members[pick(rng)]];
            dup.duplicate = true;
            out.push_back(std::move(dup));
        }
    }
    return out;
}

struct SplitOptions {
    double test_fraction = 0.2;
    int folds = 5;
    // Oversample each fold's training part instead of the whole trainval set.
    bool ros_per_fold = false;
};

/// Stratified trainval/test split, oversampling of trainval, and round-robin
/// fold assignment after a seeded per-class shuffle.
inline DatasetManifest split_and_fold(const DatasetManifest& in, std::uint64_t seed, SplitOptions opt = {}) {
    const int k = in.num_classes();
    std::vector<std::vector<ManifestEntry>> by_class(static_cast<std::size_t>(k));
    for (const auto& e : in.entries) {
        if (e.duplicate) continue;
        int c = e.record->class_id;
        if (c < 0 || c >= k) throw DataError("split_and_fold: record " + e.record->id + " has an invalid class");
        by_class[static_cast<std::size_t>(c)].push_back(e);
    }
    std::mt19937_64 rng(mix_seed(seed, 0x5117));
    std::vector<ManifestEntry> trainval, test;
    for (int c = 0; c < k; ++c) {
        auto& members = by_class[static_cast<std::size_t>(c)];
        std::shuffle(members.begin(), members.end(), rng);
        const auto n_test =
            static_cast<std::size_t>(std::lround(opt.test_fraction * static_cast<double>(members.size())));
        if (members.size() - n_test < static_cast<std::size_t>(opt.folds))
            throw DataError("split_and_fold: class " + in.class_names[static_cast<std::size_t>(c)] + " has " +
                            std::to_string(members.size() - n_test) + " trainval records, need at least " +
                            std::to_string(opt.folds));
        for (std::size_t i = 0; i < members.size(); ++i) {
            ManifestEntry e = members[i];
            e.fold = -1;
            e.split = i < n_test ? Split::test : Split::trainval;
            (i < n_test ? test : trainval).push_back(std::move(e));
        }
    }
    if (!opt.ros_per_fold) trainval = random_oversample(trainval, k, mix_seed(seed, 0x705));

    // Fold labels: per class, shuffle then deal round-robin, continuing the
    // counter across classes so total fold sizes also stay within one.
    std::vector<std::vector<std::size_t>> tv_by_class(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < trainval.size(); ++i)
        tv_by_class[static_cast<std::size_t>(trainval[i].record->class_id)].push_back(i);
    std::size_t dealt = 0;
    for (auto& idx : tv_by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        for (auto i : idx) trainval[i].fold = static_cast<int>(dealt++ % static_cast<std::size_t>(opt.folds));
    }

    DatasetManifest out;
    out.class_names = in.class_names;
    out.seed = seed;
    out.side = in.side;
    out.folds = opt.folds;
    out.ros_per_fold = opt.ros_per_fold;
    out.entries = std::move(trainval);
    out.entries.insert(out.entries.end(), test.begin(), test.end());
    return out;
}

struct FoldData {
    std::vector<ManifestEntry> train, val;
};

/// Training and validation entries for one cross-validation fold.
inline FoldData fold_split(const DatasetManifest& m, int fold, std::uint64_t seed) {
    if (fold < 0 || fold >= m.folds) throw DataError("fold " + std::to_string(fold) + " out of range");
    FoldData out;
    for (const auto& e : m.entries) {
        if (e.split != Split::trainval) continue;
        (e.fold == fold ? out.val : out.train).push_back(e);
    }
    if (m.ros_per_fold) out.train = random_oversample(out.train, m.num_classes(), mix_seed(seed, 0xf01d + fold));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes-and-scribbles data.

struct SynthOptions {
    int num_classes = 3;
    std::size_t per_class = 100;
    std::size_t side = 64;
    std::uint64_t seed = 7;
};

inline const std::vector<std::string>& synthetic_class_names() {
    static const std::vector<std::string> names{"ellipse", "rectangle", "ring"};
    return names;
}

namespace detail {

struct ShapeSpec {
    int kind = 0;  // 0 ellipse, 1 rectangle, 2 ring
    double cx = 0, cy = 0, a = 0, b = 0, inner = 0;
};

inline bool shape_contains(const ShapeSpec& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    switch (s.kind) {
        case 0:
            return (dx * dx) / (s.a * s.a) + (dy * dy) / (s.b * s.b) <= 1.0;
        case 1:
            return std::abs(dx) <= s.a && std::abs(dy) <= s.b;
        default: {
            const double r2 = dx * dx + dy * dy;
            return r2 <= s.a * s.a && r2 >= s.inner * s.inner;
        }
    }
}

inline Gray8 render_shape(const ShapeSpec& s, std::size_t side) {
    Gray8 m(side, side);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
            m.at(x, y) = shape_contains(s, static_cast<double>(x), static_cast<double>(y)) ? 1 : 0;
    return m;
}

inline ShapeSpec random_shape(int kind, std::size_t side, std::mt19937_64& rng) {
    const double s = static_cast<double>(side);
    auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    ShapeSpec sh;
    sh.kind = kind;
    if (kind == 0) {
        sh.a = u(0.09 * s, 0.17 * s);
        sh.b = u(0.09 * s, 0.17 * s);
    } else if (kind == 1) {
        sh.a = u(0.08 * s, 0.15 * s);
        sh.b = u(0.08 * s, 0.15 * s);
    } else {
        sh.a = u(0.13 * s, 0.19 * s);
        sh.b = sh.a;
        sh.inner = sh.a - std::max(4.0, u(0.06 * s, 0.09 * s));
    }
    const double ext = std::max(sh.a, sh.b) + 1;
    sh.cx = u(ext, s - 1 - ext);
    sh.cy = u(ext, s - 1 - ext);
    return sh;
}

// Pixels whose 2x2 stroke footprint lies inside the mask.
inline std::vector<std::pair<int, int>> stroke_anchors(const Gray8& mask) {
    std::vector<std::pair<int, int>> out;
    for (std::size_t y = 0; y + 1 < mask.height; ++y)
        for (std::size_t x = 0; x + 1 < mask.width; ++x)
            if (mask.at(x, y) && mask.at(x + 1, y) && mask.at(x, y + 1) && mask.at(x + 1, y + 1))
                out.emplace_back(static_cast<int>(x), static_cast<int>(y));
    return out;
}

template <typename F>
void walk_line(int x0, int y0, int x1, int y1, F&& visit) {
    const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
    for (int i = 0; i <= steps; ++i) {
        const double t = steps == 0 ? 0.0 : static_cast<double>(i) / steps;
        visit(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))));
    }
}

// Polyline of 3-6 segments drawn with a 2 px square pen, entirely inside the mask.
inline Gray8 scribble_inside(const Gray8& mask, std::uint8_t value, std::mt19937_64& rng) {
    const auto anchors = stroke_anchors(mask);
    if (anchors.empty()) throw DataError("synthetic: target too thin for a scribble");
    Gray8 safe(mask.width, mask.height);
    for (auto [x, y] : anchors) safe.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = 1;
    auto segment_ok = [&](std::pair<int, int> a, std::pair<int, int> b) {
        bool ok = true;
        walk_line(a.first, a.second, b.first, b.second,
                  [&](int x, int y) { ok = ok && safe.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)); });
        return ok;
    };
    const int segments = std::uniform_int_distribution<int>(3, 6)(rng);
    const double reach = std::max(3.0, 0.12 * static_cast<double>(mask.width));
    std::uniform_int_distribution<std::size_t> pick(0, anchors.size() - 1);
    for (int attempt = 0; attempt < 50; ++attempt) {
        std::vector<std::pair<int, int>> pts{anchors[pick(rng)]};
        for (int tries = 0; tries < 400 && static_cast<int>(pts.size()) <= segments; ++tries) {
            auto cand = anchors[pick(rng)];
            const double d = std::hypot(cand.first - pts.back().first, cand.second - pts.back().second);
            if (d < 2.0 || d > reach) continue;
            if (segment_ok(pts.back(), cand)) pts.push_back(cand);
        }
        if (static_cast<int>(pts.size()) <= segments) continue;
        Gray8 doodle(mask.width, mask.height);
        for (std::size_t i = 0; i + 1 < pts.size(); ++i)
            walk_line(pts[i].first, pts[i].second, pts[i + 1].first, pts[i + 1].second, [&](int x, int y) {
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        doodle.at(static_cast<std::size_t>(x + dx), static_cast<std::size_t>(y + dy)) = value;
            });
        return doodle;
    }
    throw DataError("synthetic: could not fit a scribble inside the target");
}

}  // namespace detail

/// One synthetic sample: 2-4 separated shapes on a noisy background, one of
/// them (of kind class_id) chosen as the target and scribbled on.
inline SampleRecord synthesize_sample(int class_id, int num_classes, std::size_t side, std::uint64_t seed,
                                      std::string id) {
    if (side == 0 || side % 16 != 0) throw DataError("synthetic: side must be a positive multiple of 16");
    std::mt19937_64 rng(seed);
    auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    for (int restart = 0; restart < 20; ++restart) {
        const int count = std::uniform_int_distribution<int>(2, 4)(rng);
        const int target = std::uniform_int_distribution<int>(0, count - 1)(rng);
        Gray8 instances(side, side);
        Gray8 halo(side, side);  // occupied pixels grown by a 2 px margin
        bool placed_all = true;
        std::vector<detail::ShapeSpec> shapes;
        for (int k = 0; k < count && placed_all; ++k) {
            const int kind = k == target ? class_id : std::uniform_int_distribution<int>(0, num_classes - 1)(rng);
            bool placed = false;
            for (int tries = 0; tries < 200 && !placed; ++tries) {
                auto sh = detail::random_shape(kind, side, rng);
                Gray8 m = detail::render_shape(sh, side);
                bool clash = false;
                for (std::size_t i = 0; i < m.size() && !clash; ++i) clash = m.pixels[i] && halo.pixels[i];
                if (clash) continue;
                for (std::size_t y = 0; y < side; ++y)
                    for (std::size_t x = 0; x < side; ++x) {
                        if (!m.at(x, y)) continue;
                        instances.at(x, y) = static_cast<std::uint8_t>(k + 1);
                        for (std::size_t yy = y >= 2 ? y - 2 : 0; yy <= std::min(side - 1, y + 2); ++yy)
                            for (std::size_t xx = x >= 2 ? x - 2 : 0; xx <= std::min(side - 1, x + 2); ++xx)
                                halo.at(xx, yy) = 1;
                    }
                shapes.push_back(sh);
                placed = true;
            }
            placed_all = placed;
        }
        if (!placed_all) continue;

        SampleRecord r;
        r.id = std::move(id);
        r.class_id = class_id;
        r.instances = instances;
        r.target_instance = target + 1;
        r.mask = Gray8(side, side);
        for (std::size_t i = 0; i < r.mask.size(); ++i) r.mask.pixels[i] = instances.pixels[i] == target + 1 ? 1 : 0;

        std::normal_distribution<double> noise(0.0, 8.0);
        const double background = u(20, 70);
        std::vector<double> level(static_cast<std::size_t>(count));
        for (auto& l : level) l = u(110, 230);
        r.image = Gray8(side, side);
        for (std::size_t i = 0; i < r.image.size(); ++i) {
            const int inst = instances.pixels[i];
            const double base = inst ? level[static_cast<std::size_t>(inst - 1)] : background;
            r.image.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(base + noise(rng)), 0L, 255L));
        }
        const auto value = static_cast<std::uint8_t>(std::lround(255.0 * (class_id + 1) / num_classes));
        r.doodle = detail::scribble_inside(r.mask, value, rng);
        return r;
    }
    throw DataError("synthetic: shape placement failed for " + id);
}

/// per_class samples for each class; deterministic in the seed.
inline DatasetManifest generate_synthetic(const SynthOptions& opt) {
    if (opt.num_classes < 1 || opt.num_classes > 3) throw DataError("synthetic: 1 to 3 classes supported");
    DatasetManifest m;
    m.class_names.assign(synthetic_class_names().begin(), synthetic_class_names().begin() + opt.num_classes);
    m.seed = opt.seed;
    m.side = opt.side;
    for (int c = 0; c < opt.num_classes; ++c)
        for (std::size_t i = 0; i < opt.per_class; ++i) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%s_%04zu", m.class_names[static_cast<std::size_t>(c)].c_str(), i);
            auto rec = std::make_shared<SampleRecord>(synthesize_sample(
                c, opt.num_classes, opt.side, mix_seed(opt.seed, static_cast<std::uint64_t>(c) * 1000003ULL + i), buf));
            m.entries.push_back({std::move(rec), Split::unassigned, -1, false});
        }
    return m;
}

/// Applies the training preprocessing chain to every record (instances are
/// resized with nearest-neighbour sampling alongside the mask).
inline DatasetManifest preprocess_manifest(const DatasetManifest& in, std::size_t side) {
    DatasetManifest out = in;
    out.side = side;
    std::map<const SampleRecord*, std::shared_ptr<const SampleRecord>> done;
    for (auto& e : out.entries) {
        auto& slot = done[e.record.get()];
        if (!slot) {
            auto r = std::make_shared<SampleRecord>(*e.record);
            Box b = crop_box(r->mask);
            auto t = preprocess_triple({r->image, r->doodle, r->mask}, side);
            if (!r->instances.pixels.empty()) r->instances = resize(crop(r->instances, b), side, Interp::nearest);
            r->image = std::move(t.image);
            r->doodle = std::move(t.doodle);
            r->mask = std::move(t.mask);
            slot = std::move(r);
        }
        e.record = slot;
    }
    return out;
}

}  // namespace p2s
