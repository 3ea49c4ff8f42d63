#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "calidet/dataset.hpp"
#include "calidet/rng.hpp"

using namespace calidet;

namespace {

json minimal_doc() {
    return json{
        {"images", {{{"id", 1}, {"width", 640}, {"height", 480}}}},
        {"annotations", json::array()},
        {"categories", {{{"id", 16}, {"name", "a"}}, {{"id", 31}, {"name", "b"}},
                        {{"id", 33}, {"name", "c"}}}}};
}

Dataset random_dataset(Rng& rng, int k, int n_images) {
    Dataset d;
    d.k = k;
    d.class_ids = contiguous_ids(k);
    for (int i = 0; i < n_images; ++i) {
        std::vector<Box> boxes;
        for (int c = 0; c < k; ++c)
            if (rng.uniform01() < 0.4)
                boxes.push_back(Box{c, rng.uniform(0, 500), rng.uniform(0, 500),
                                    rng.uniform(10, 100), rng.uniform(10, 100)});
        d.images.push_back(make_image_record(i + 1, 1000, 1000, std::move(boxes)));
    }
    d.validate();
    return d;
}

} // namespace

TEST_CASE("parse minimal document") {
    const Dataset d = parse_annotations(minimal_doc());
    REQUIRE(d.k == 3);
    REQUIRE(d.class_ids == std::vector<std::int64_t>{16, 31, 33});
    REQUIRE(d.images.size() == 1);
    REQUIRE(d.images[0].labels.empty());
}

TEST_CASE("category ids map to sorted contiguous indices") {
    json doc = minimal_doc();
    doc["annotations"] = {
        {{"id", 1}, {"image_id", 1}, {"category_id", 16}, {"bbox", {0, 0, 10, 10}}},
        {{"id", 2}, {"image_id", 1}, {"category_id", 31}, {"bbox", {20, 20, 10, 10}}}};
    const Dataset d = parse_annotations(doc);
    REQUIRE(d.images[0].labels == LabelSet{0, 1});
}

TEST_CASE("parse errors") {
    SECTION("annotation cites missing image") {
        json doc = minimal_doc();
        doc["annotations"] = {
            {{"id", 1}, {"image_id", 99}, {"category_id", 16}, {"bbox", {0, 0, 5, 5}}}};
        REQUIRE_THROWS_AS(parse_annotations(doc), DataError);
    }
    SECTION("annotation cites missing category") {
        json doc = minimal_doc();
        doc["annotations"] = {
            {{"id", 1}, {"image_id", 1}, {"category_id", 7}, {"bbox", {0, 0, 5, 5}}}};
        REQUIRE_THROWS_AS(parse_annotations(doc), DataError);
    }
    SECTION("non-finite bbox") {
        json doc = minimal_doc();
        doc["annotations"] = {
            {{"id", 1}, {"image_id", 1}, {"category_id", 16}, {"bbox", {0, 0, 5, 5}}}};
        doc["annotations"][0]["bbox"][2] = "not a number";
        REQUIRE_THROWS_AS(parse_annotations(doc), DataError);
    }
    SECTION("non-positive box size") {
        json doc = minimal_doc();
        doc["annotations"] = {
            {{"id", 1}, {"image_id", 1}, {"category_id", 16}, {"bbox", {0, 0, 0, 5}}}};
        REQUIRE_THROWS_AS(parse_annotations(doc), DataError);
    }
    SECTION("missing sections") {
        REQUIRE_THROWS_AS(parse_annotations(json{{"images", json::array()}}), DataError);
    }
}

TEST_CASE("coco round-trip") {
    Rng rng(3);
    const Dataset d = random_dataset(rng, 4, 12);
    const Dataset back = parse_annotations(dataset_to_coco_json(d));
    REQUIRE(back.k == d.k);
    REQUIRE(back.images.size() == d.images.size());
    REQUIRE(dataset_edge(back) == dataset_edge(d));
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        REQUIRE(back.images[i].image_id == d.images[i].image_id);
        REQUIRE(back.images[i].labels == d.images[i].labels);
        REQUIRE(back.images[i].boxes.size() == d.images[i].boxes.size());
        for (std::size_t b = 0; b < d.images[i].boxes.size(); ++b) {
            REQUIRE(back.images[i].boxes[b].x == d.images[i].boxes[b].x);
            REQUIRE(back.images[i].boxes[b].w == d.images[i].boxes[b].w);
        }
    }
}

TEST_CASE("dataset edge") {
    SECTION("three-sample dataset reproduces the batch matrix") {
        Dataset d;
        d.k = 3;
        d.class_ids = contiguous_ids(3);
        auto add = [&](std::int64_t id, std::vector<int> classes) {
            std::vector<Box> boxes;
            for (int c : classes) boxes.push_back(Box{c, 0, 0, 10, 10});
            d.images.push_back(make_image_record(id, 100, 100, std::move(boxes)));
        };
        add(1, {0, 2});
        add(2, {1, 2});
        add(3, {0, 1, 2});
        const auto e = dataset_edge(d);
        REQUIRE(e(0, 2) == 2.0 / 3.0);
        REQUIRE(e(2, 0) == 1.0);
    }
    SECTION("empty dataset gives the flat prior") {
        Dataset d;
        d.k = 2;
        d.class_ids = contiguous_ids(2);
        REQUIRE(dataset_edge(d) == EdgeMatrix::flat_prior(2));
    }
}

TEST_CASE("remap") {
    Rng rng(17);
    const Dataset d = random_dataset(rng, 3, 20);

    SECTION("identity mapping keeps everything") {
        ClassMapping m;
        for (auto id : d.class_ids) m.entries[id] = id;
        const auto [out, report] = remap_dataset(d, m, d.class_ids);
        REQUIRE(out.images.size() == d.images.size());
        REQUIRE(report.images_after == report.images_before);
        REQUIRE(report.annotations_after == report.annotations_before);
        REQUIRE(FilterReport::retention_pct(report.images_after, report.images_before) == 100.0);
        REQUIRE(dataset_edge(out) == dataset_edge(d));
    }
    SECTION("dropping every class empties the dataset") {
        ClassMapping m; // nothing mapped
        const auto [out, report] = remap_dataset(d, m, std::vector<std::int64_t>{0});
        for (const auto& im : out.images) REQUIRE(im.boxes.empty());
        REQUIRE(report.annotations_after == 0);
        REQUIRE(FilterReport::retention_pct(report.annotations_after,
                                            report.annotations_before) == 0.0);
    }
    SECTION("duplicate source id rejected") {
        json j = json::array({{{"source", 1}, {"target", 2}}, {{"source", 1}, {"target", 3}}});
        REQUIRE_THROWS_AS(ClassMapping::from_json(j), DataError);
    }
    SECTION("mapping target outside taxonomy rejected") {
        ClassMapping m;
        m.entries[0] = 99;
        REQUIRE_THROWS_AS(remap_dataset(d, m, std::vector<std::int64_t>{1, 2}), DataError);
    }
    SECTION("remap commutes with edge computation") {
        // Map classes {0,1,2} -> {10,10,20}: merging 0 and 1.
        ClassMapping m;
        m.entries[0] = 10;
        m.entries[1] = 10;
        m.entries[2] = 20;
        const auto [out, report] = remap_dataset(d, m, std::vector<std::int64_t>{10, 20});

        std::vector<LabelSet> manual;
        for (const auto& im : d.images) {
            std::vector<int> mapped;
            for (int c : im.labels) mapped.push_back(c == 2 ? 1 : 0);
            if (!mapped.empty() || im.boxes.empty()) manual.push_back(LabelSet(std::move(mapped)));
        }
        const auto direct = edge_from_label_sets(std::vector<std::int64_t>{10, 20}, manual);
        REQUIRE(dataset_edge(out) == direct);
    }
}

TEST_CASE("split subsets") {
    Rng rng(23);
    const Dataset d = random_dataset(rng, 3, 10);

    SECTION("n=10 size=5 covers everything") {
        const auto parts = split_subsets(d, 5, 99);
        REQUIRE(parts.size() == 2);
        std::set<std::int64_t> seen;
        for (const auto& p : parts) {
            REQUIRE(p.images.size() == 5);
            for (const auto& im : p.images) REQUIRE(seen.insert(im.image_id).second);
        }
        REQUIRE(seen.size() == 10);
    }
    SECTION("n=10 size=4 discards the remainder") {
        const auto parts = split_subsets(d, 4, 99);
        REQUIRE(parts.size() == 2);
        std::size_t total = 0;
        for (const auto& p : parts) total += p.images.size();
        REQUIRE(total == 8);
    }
    SECTION("same seed, same partition") {
        const auto a = split_subsets(d, 3, 1234);
        const auto b = split_subsets(d, 3, 1234);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a[i].images.size(); ++j)
                REQUIRE(a[i].images[j].image_id == b[i].images[j].image_id);
    }
    SECTION("oversized subset yields empty list") {
        REQUIRE(split_subsets(d, 11, 1).empty());
    }
    SECTION("label multiset is preserved across the retained prefix") {
        const auto parts = split_subsets(d, 5, 7);
        std::multiset<std::vector<int>> from_parts, from_full;
        for (const auto& p : parts)
            for (const auto& im : p.images) from_parts.insert(im.labels.indices());
        for (const auto& im : d.images) from_full.insert(im.labels.indices());
        REQUIRE(from_parts == from_full); // size 5 * 2 == 10 covers all
    }
}

TEST_CASE("subset mean edge differs from the full edge") {
    // 2 classes, 4 images: {0,1}, {0}, {1}, {0,1}. Full-set P(1|0) = 2/3.
    // Split into halves {{0,1},{0}} and {{1},{0,1}}: P(1|0) = 1/2 and 1,
    // mean 3/4 != 2/3. Conditional probabilities do not average.
    Dataset d;
    d.k = 2;
    d.class_ids = contiguous_ids(2);
    auto add = [&](std::int64_t id, std::vector<int> classes) {
        std::vector<Box> boxes;
        for (int c : classes) boxes.push_back(Box{c, 0, 0, 5, 5});
        d.images.push_back(make_image_record(id, 10, 10, std::move(boxes)));
    };
    add(1, {0, 1});
    add(2, {0});
    add(3, {1});
    add(4, {0, 1});

    const auto full = dataset_edge(d);
    REQUIRE(full(1, 0) == 2.0 / 3.0);

    Dataset first, second;
    first.k = second.k = 2;
    first.class_ids = second.class_ids = d.class_ids;
    first.images = {d.images[0], d.images[1]};
    second.images = {d.images[2], d.images[3]};
    const double mean_p10 = 0.5 * (dataset_edge(first)(1, 0) + dataset_edge(second)(1, 0));
    REQUIRE(mean_p10 == 0.75);
    REQUIRE(mean_p10 != full(1, 0));
}

TEST_CASE("filter report json rounds percentages to 0.1") {
    FilterReport r;
    r.images_before = 80000;
    r.images_after = 71316;
    r.annotations_before = 1240587;
    r.annotations_after = 438215;
    const json j = r.to_json();
    REQUIRE(j["image_retention_pct"].get<double>() == 89.1);
    REQUIRE(j["annotation_retention_pct"].get<double>() == 35.3);
}
