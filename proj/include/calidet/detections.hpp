#ifndef CALIDET_DETECTIONS_HPP
#define CALIDET_DETECTIONS_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "calidet/dataset.hpp"
#include "calidet/edge.hpp"

namespace calidet {

struct Detection {
    int cls = 0;
    double score = 0.0; // confidence in [0, 1]
    double x = 0, y = 0, w = 0, h = 0;
};

/// Per-image predictions from a detector honoring an injected prior.
struct DetectionSet {
    std::int64_t image_id = 0;
    std::vector<Detection> detections;
};

inline json detection_set_to_json(const DetectionSet& ds) {
    json dets = json::array();
    for (const Detection& d : ds.detections)
        dets.push_back({{"class", d.cls},
                        {"score", d.score},
                        {"bbox", {d.x, d.y, d.w, d.h}}});
    return json{{"image_id", ds.image_id}, {"detections", std::move(dets)}};
}

inline DetectionSet detection_set_from_json(const json& j) {
    DetectionSet ds;
    try {
        ds.image_id = j.at("image_id").get<std::int64_t>();
        for (const json& dj : j.at("detections")) {
            Detection d;
            d.cls = dj.at("class").get<int>();
            d.score = dj.at("score").get<double>();
            const json& bb = dj.at("bbox");
            if (!bb.is_array() || bb.size() != 4)
                throw DataError("detections: bbox must have 4 entries");
            d.x = bb.at(0).get<double>();
            d.y = bb.at(1).get<double>();
            d.w = bb.at(2).get<double>();
            d.h = bb.at(3).get<double>();
            if (d.score < 0.0 || d.score > 1.0)
                throw DataError("detections: score out of [0,1]");
            ds.detections.push_back(d);
        }
    } catch (const json::exception& ex) {
        throw DataError(std::string("detections: ") + ex.what());
    }
    return ds;
}

/// A detector is any callable producing predictions for one image under an
/// injected prior. It must be pure: the same (image, prior) pair always
/// yields the same detections.
using Detector = std::function<DetectionSet(const ImageRecord&, const EdgeMatrix&)>;

} // namespace calidet

#endif // CALIDET_DETECTIONS_HPP
