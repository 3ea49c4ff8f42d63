#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <map>
#include <thread>

#include "calidet/http_detector.hpp"
#include "calidet/selfcal.hpp"
#include "calidet/simworld.hpp"

using namespace calidet;

namespace {

/// Serves the detector wire contract on a loopback port, backed by the
/// analytic detector over a fixed dataset.
class TestDetectorServer {
public:
    TestDetectorServer(WorldSpec world, Dataset data)
        : world_(std::move(world)), data_(std::move(data)) {
        for (const auto& im : data_.images) by_id_[im.image_id] = &im;
        server_.Post("/detect", [this](const httplib::Request& req, httplib::Response& res) {
            ++requests_;
            const json body = json::parse(req.body);
            const auto id = body.at("image_id").get<std::int64_t>();
            auto it = by_id_.find(id);
            if (it == by_id_.end()) {
                res.status = 404;
                return;
            }
            const EdgeMatrix prior = edge_from_json(body.at("edge"));
            const DetectionSet out = sim_detect(world_, *it->second, prior, world_.seed);
            res.set_content(detection_set_to_json(out).dump(), "application/json");
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    ~TestDetectorServer() {
        server_.stop();
        thread_.join();
    }

    int port() const { return port_; }
    int requests() const { return requests_.load(); }

private:
    WorldSpec world_;
    Dataset data_;
    std::map<std::int64_t, const ImageRecord*> by_id_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> requests_{0};
};

} // namespace

TEST_CASE("http detector client") {
    const WorldSpec w = gen_world(4, 2, 301);
    const SimDataset ds = gen_dataset(w, 16, 7);
    TestDetectorServer server(w, ds.data);

    HttpDetectorConfig cfg;
    cfg.port = server.port();
    cfg.timeout_sec = 5.0;
    const HttpDetector client(cfg);

    SECTION("round-trips the in-process detections exactly") {
        for (const auto& im : ds.data.images) {
            const DetectionSet remote = client(im, *w.reference_edge);
            const DetectionSet local = sim_detect(w, im, *w.reference_edge, w.seed);
            REQUIRE(remote.image_id == local.image_id);
            REQUIRE(remote.detections.size() == local.detections.size());
            for (std::size_t i = 0; i < local.detections.size(); ++i) {
                REQUIRE(remote.detections[i].cls == local.detections[i].cls);
                REQUIRE(remote.detections[i].score == local.detections[i].score);
                REQUIRE(remote.detections[i].x == local.detections[i].x);
                REQUIRE(remote.detections[i].w == local.detections[i].w);
            }
        }
    }
    SECTION("self-calibration through the endpoint matches in-process") {
        SelfCalConfig sc;
        sc.max_iterations = 4;
        const CalibrationTrace remote =
            selfcal_run(client.as_detector(), ds.data, sc, *w.reference_edge);
        const CalibrationTrace local =
            selfcal_run(make_sim_detector(w), ds.data, sc, *w.reference_edge);
        REQUIRE_FALSE(remote.aborted);
        REQUIRE(remote.steps.size() == local.steps.size());
        for (std::size_t i = 0; i < local.steps.size(); ++i) {
            REQUIRE(remote.steps[i].e_c == local.steps[i].e_c);
            REQUIRE(remote.steps[i].step_mae == local.steps[i].step_mae);
        }
    }
    SECTION("unknown image surfaces as a data error") {
        const ImageRecord ghost = make_image_record(999, 100, 100, {});
        REQUIRE_THROWS_AS(client(ghost, *w.reference_edge), DataError);
    }
}

TEST_CASE("http detector retries then fails cleanly") {
    HttpDetectorConfig cfg;
    cfg.port = 1; // nothing listens there
    cfg.timeout_sec = 0.2;
    cfg.retries = 1;
    cfg.retry_delay_sec = 0.01;
    const HttpDetector client(cfg);
    const ImageRecord im = make_image_record(1, 10, 10, {});
    REQUIRE_THROWS_AS(client(im, EdgeMatrix::flat_prior(2)), DataError);
}
