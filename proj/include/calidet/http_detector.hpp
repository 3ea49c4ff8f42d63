#ifndef CALIDET_HTTP_DETECTOR_HPP
#define CALIDET_HTTP_DETECTOR_HPP

#include <chrono>
#include <string>
#include <thread>

// Eigen must precede httplib: the socket headers httplib drags in leak
// macros that clash with Eigen internals.
#include "calidet/detections.hpp"
#include "calidet/edge.hpp"

#include <httplib.h>

namespace calidet {

/// Client for an external detector endpoint. The server receives
/// POST /detect with {"image_id": <int>, "edge": <edge JSON>} and must
/// answer with a DetectionSet JSON
/// {"image_id": ..., "detections": [{"class": i, "score": s, "bbox": [x,y,w,h]}, ...]}.
struct HttpDetectorConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    double timeout_sec = 10.0;
    int retries = 2;
    double retry_delay_sec = 0.2;
};

class HttpDetector {
public:
    explicit HttpDetector(HttpDetectorConfig cfg) : cfg_(std::move(cfg)) {}

    DetectionSet operator()(const ImageRecord& image, const EdgeMatrix& prior) const {
        const json body{{"image_id", image.image_id}, {"edge", edge_to_json(prior)}};
        const std::string payload = body.dump();

        std::string last_error;
        for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
            if (attempt > 0)
                std::this_thread::sleep_for(
                    std::chrono::duration<double>(cfg_.retry_delay_sec));
            httplib::Client client(cfg_.host, cfg_.port);
            client.set_connection_timeout(std::chrono::duration<double>(cfg_.timeout_sec));
            client.set_read_timeout(std::chrono::duration<double>(cfg_.timeout_sec));
            auto res = client.Post("/detect", payload, "application/json");
            if (!res) {
                last_error = "connection failed (" + httplib::to_string(res.error()) + ")";
                continue;
            }
            if (res->status != 200) {
                last_error = "status " + std::to_string(res->status);
                continue;
            }
            const json parsed = json::parse(res->body, nullptr, false);
            if (parsed.is_discarded()) throw DataError("detector endpoint: invalid JSON");
            DetectionSet ds = detection_set_from_json(parsed);
            if (ds.image_id != image.image_id)
                throw DataError("detector endpoint: response image_id mismatch");
            return ds;
        }
        throw DataError("detector endpoint unreachable after " +
                        std::to_string(cfg_.retries + 1) + " attempts: " + last_error);
    }

    /// Adapt to the generic detector interface.
    Detector as_detector() const {
        return [self = *this](const ImageRecord& im, const EdgeMatrix& e) { return self(im, e); };
    }

private:
    HttpDetectorConfig cfg_;
};

} // namespace calidet

#endif // CALIDET_HTTP_DETECTOR_HPP
