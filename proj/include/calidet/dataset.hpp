#ifndef CALIDET_DATASET_HPP
#define CALIDET_DATASET_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "calidet/edge.hpp"
#include "calidet/rng.hpp"

namespace calidet {

struct Box {
    int cls = 0;
    double x = 0, y = 0, w = 0, h = 0;

    double area() const { return w * h; }
};

/// Annotation side of one image: label set plus ground-truth boxes.
/// labels always equals the set of classes appearing in boxes.
struct ImageRecord {
    std::int64_t image_id = 0;
    double width = 0, height = 0;
    LabelSet labels;
    std::vector<Box> boxes;
};

inline ImageRecord make_image_record(std::int64_t id, double width, double height,
                                     std::vector<Box> boxes) {
    std::vector<int> classes;
    classes.reserve(boxes.size());
    for (const Box& b : boxes) {
        if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) ||
            !std::isfinite(b.h))
            throw DataError("image " + std::to_string(id) + ": non-finite box");
        if (b.w <= 0 || b.h <= 0)
            throw DataError("image " + std::to_string(id) + ": box with non-positive size");
        classes.push_back(b.cls);
    }
    return ImageRecord{id, width, height, LabelSet(std::move(classes)), std::move(boxes)};
}

struct Dataset {
    int k = 0;
    std::vector<std::int64_t> class_ids;
    std::vector<ImageRecord> images;

    std::size_t annotation_count() const {
        std::size_t n = 0;
        for (const auto& im : images) n += im.boxes.size();
        return n;
    }

    void validate() const {
        if (k < 1) throw DataError("Dataset: class count must be positive");
        if (static_cast<int>(class_ids.size()) != k)
            throw DataError("Dataset: class_ids length does not match k");
        std::set<std::int64_t> seen;
        for (const auto& im : images) {
            if (!seen.insert(im.image_id).second)
                throw DataError("Dataset: duplicate image_id " + std::to_string(im.image_id));
            im.labels.require_within(k);
            std::vector<int> from_boxes;
            for (const Box& b : im.boxes) {
                if (b.cls < 0 || b.cls >= k)
                    throw DataError("Dataset: box class out of range in image " +
                                    std::to_string(im.image_id));
                from_boxes.push_back(b.cls);
            }
            if (LabelSet(std::move(from_boxes)) != im.labels)
                throw DataError("Dataset: labels do not match box classes in image " +
                                std::to_string(im.image_id));
        }
    }
};

/// Population conditional-probability statistics of a dataset's label sets.
inline EdgeMatrix dataset_edge(const Dataset& d) {
    std::vector<LabelSet> sets;
    sets.reserve(d.images.size());
    for (const auto& im : d.images) sets.push_back(im.labels);
    return edge_from_label_sets(d.class_ids, sets);
}

// ---------------------------------------------------------------------------
// COCO-format ingestion

/// Parse a COCO-format annotation document: `images`, `annotations`,
/// `categories` with the usual field names. Category ids are sorted
/// ascending to produce the contiguous index mapping; images with zero
/// annotations are kept with empty label sets.
inline Dataset parse_annotations(const json& doc) {
    Dataset d;
    try {
        const json& cats = doc.at("categories");
        for (const json& c : cats) d.class_ids.push_back(c.at("id").get<std::int64_t>());
        std::sort(d.class_ids.begin(), d.class_ids.end());
        if (std::adjacent_find(d.class_ids.begin(), d.class_ids.end()) != d.class_ids.end())
            throw DataError("annotations: duplicate category id");
        d.k = static_cast<int>(d.class_ids.size());
        if (d.k < 1) throw DataError("annotations: no categories");

        std::unordered_map<std::int64_t, int> cat_index;
        for (int i = 0; i < d.k; ++i) cat_index[d.class_ids[static_cast<std::size_t>(i)]] = i;

        struct RawImage {
            double width, height;
            std::vector<Box> boxes;
        };
        std::map<std::int64_t, RawImage> by_id; // ordered: stable image order
        for (const json& im : doc.at("images")) {
            const auto id = im.at("id").get<std::int64_t>();
            if (by_id.count(id)) throw DataError("annotations: duplicate image id");
            by_id[id] = RawImage{im.at("width").get<double>(), im.at("height").get<double>(), {}};
        }

        for (const json& a : doc.at("annotations")) {
            const auto image_id = a.at("image_id").get<std::int64_t>();
            auto it = by_id.find(image_id);
            if (it == by_id.end())
                throw DataError("annotations: annotation references unknown image " +
                                std::to_string(image_id));
            const auto cat = a.at("category_id").get<std::int64_t>();
            auto ci = cat_index.find(cat);
            if (ci == cat_index.end())
                throw DataError("annotations: annotation references unknown category " +
                                std::to_string(cat));
            const json& bb = a.at("bbox");
            if (!bb.is_array() || bb.size() != 4)
                throw DataError("annotations: bbox must have 4 entries");
            Box b{ci->second, bb.at(0).get<double>(), bb.at(1).get<double>(),
                  bb.at(2).get<double>(), bb.at(3).get<double>()};
            it->second.boxes.push_back(b);
        }

        for (auto& [id, raw] : by_id)
            d.images.push_back(make_image_record(id, raw.width, raw.height, std::move(raw.boxes)));
    } catch (const json::exception& ex) {
        throw DataError(std::string("annotations: ") + ex.what());
    }
    d.validate();
    return d;
}

inline Dataset parse_annotations_file(const std::string& path) {
    return parse_annotations(load_json(path));
}

/// Emit a dataset in the same COCO-format JSON parse_annotations consumes.
inline json dataset_to_coco_json(const Dataset& d) {
    json images = json::array();
    json annotations = json::array();
    json categories = json::array();
    for (int i = 0; i < d.k; ++i) {
        const auto id = d.class_ids[static_cast<std::size_t>(i)];
        categories.push_back({{"id", id}, {"name", "class_" + std::to_string(id)}});
    }
    std::int64_t ann_id = 1;
    for (const auto& im : d.images) {
        images.push_back({{"id", im.image_id}, {"width", im.width}, {"height", im.height}});
        for (const Box& b : im.boxes) {
            annotations.push_back(
                {{"id", ann_id++},
                 {"image_id", im.image_id},
                 {"category_id", d.class_ids[static_cast<std::size_t>(b.cls)]},
                 {"bbox", {b.x, b.y, b.w, b.h}},
                 {"area", b.area()},
                 {"iscrowd", 0}});
        }
    }
    return json{{"images", std::move(images)},
                {"annotations", std::move(annotations)},
                {"categories", std::move(categories)}};
}

// ---------------------------------------------------------------------------
// Cross-taxonomy remapping

/// Many-to-one external-id mapping; unmapped source classes are dropped.
struct ClassMapping {
    std::map<std::int64_t, std::int64_t> entries; // source id -> target id

    static ClassMapping from_json(const json& j) {
        ClassMapping m;
        for (const json& e : j) {
            const auto src = e.at("source").get<std::int64_t>();
            const auto tgt = e.at("target").get<std::int64_t>();
            if (!m.entries.emplace(src, tgt).second)
                throw DataError("class mapping: duplicate source id " + std::to_string(src));
        }
        return m;
    }

    json to_json() const {
        json out = json::array();
        for (const auto& [src, tgt] : entries) out.push_back({{"source", src}, {"target", tgt}});
        return out;
    }
};

struct FilterReport {
    std::int64_t images_before = 0, images_after = 0;
    std::int64_t annotations_before = 0, annotations_after = 0;

    static double retention_pct(std::int64_t after, std::int64_t before) {
        if (before == 0) return 100.0;
        return std::round(1000.0 * static_cast<double>(after) / static_cast<double>(before)) / 10.0;
    }

    json to_json() const {
        return json{{"images_before", images_before},
                    {"images_after", images_after},
                    {"annotations_before", annotations_before},
                    {"annotations_after", annotations_after},
                    {"image_retention_pct", retention_pct(images_after, images_before)},
                    {"annotation_retention_pct",
                     retention_pct(annotations_after, annotations_before)}};
    }
};

/// Remap a dataset onto a target taxonomy. Annotations whose source class
/// is unmapped are removed; an image that loses all of its annotations in
/// the process is removed. Images that were already empty pass through.
inline std::pair<Dataset, FilterReport> remap_dataset(const Dataset& d, const ClassMapping& m,
                                                      std::vector<std::int64_t> target_ids) {
    std::sort(target_ids.begin(), target_ids.end());
    if (std::adjacent_find(target_ids.begin(), target_ids.end()) != target_ids.end())
        throw DataError("remap: duplicate target id");
    if (target_ids.empty()) throw DataError("remap: empty target taxonomy");

    std::unordered_map<std::int64_t, int> target_index;
    for (std::size_t i = 0; i < target_ids.size(); ++i)
        target_index[target_ids[i]] = static_cast<int>(i);
    for (const auto& [src, tgt] : m.entries)
        if (!target_index.count(tgt))
            throw DataError("remap: mapping target " + std::to_string(tgt) +
                            " not in target taxonomy");

    // source index -> target index, or -1 when dropped
    std::vector<int> source_to_target(static_cast<std::size_t>(d.k), -1);
    for (int i = 0; i < d.k; ++i) {
        auto it = m.entries.find(d.class_ids[static_cast<std::size_t>(i)]);
        if (it != m.entries.end()) source_to_target[static_cast<std::size_t>(i)] = target_index[it->second];
    }

    Dataset out;
    out.k = static_cast<int>(target_ids.size());
    out.class_ids = std::move(target_ids);

    FilterReport report;
    report.images_before = static_cast<std::int64_t>(d.images.size());
    for (const auto& im : d.images) {
        report.annotations_before += static_cast<std::int64_t>(im.boxes.size());
        std::vector<Box> kept;
        for (Box b : im.boxes) {
            const int t = source_to_target[static_cast<std::size_t>(b.cls)];
            if (t < 0) continue;
            b.cls = t;
            kept.push_back(b);
        }
        if (kept.empty() && !im.boxes.empty()) continue; // emptied by remapping
        report.annotations_after += static_cast<std::int64_t>(kept.size());
        out.images.push_back(make_image_record(im.image_id, im.width, im.height, std::move(kept)));
    }
    report.images_after = static_cast<std::int64_t>(out.images.size());
    out.validate();
    return {std::move(out), report};
}

// ---------------------------------------------------------------------------
// Subset segmentation

/// Shuffle images with a seeded generator and partition into
/// floor(n / subset_size) subsets of exactly subset_size images; the
/// remainder is discarded. Returns an empty list when the dataset is
/// smaller than one subset.
inline std::vector<Dataset> split_subsets(const Dataset& d, int subset_size, std::uint64_t seed) {
    if (subset_size < 1) throw DataError("split_subsets: subset size must be positive");
    std::vector<std::size_t> order(d.images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng(seed).child("split");
    rng.shuffle(order);

    const std::size_t n_subsets = d.images.size() / static_cast<std::size_t>(subset_size);
    std::vector<Dataset> out;
    out.reserve(n_subsets);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < n_subsets; ++s) {
        Dataset sub;
        sub.k = d.k;
        sub.class_ids = d.class_ids;
        for (int i = 0; i < subset_size; ++i) sub.images.push_back(d.images[order[pos++]]);
        out.push_back(std::move(sub));
    }
    return out;
}

} // namespace calidet

#endif // CALIDET_DATASET_HPP
