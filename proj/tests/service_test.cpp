#include <gtest/gtest.h>
#include <httplib.h>
#include <png.h>

#include <filesystem>
#include <future>
#include <thread>

#include "fixtures.hpp"
#include "psal/checkpoint.hpp"
#include "psal/error.hpp"
#include "psal/image_codec.hpp"
#include "psal/service.hpp"

namespace psal {
namespace {

using nlohmann::json;
using testing::trained_fixture;

SessionData fixture_session() {
  const auto& f = trained_fixture();
  SessionData s{f.model, f.data, {}, {}};
  s.stats = compute_stats(s.model, s.data.splits.train, "train", 4);
  s.index = ProfileIndex::build(s.model, s.data.splits.val, s.stats, 4);
  return s;
}

const Service& service() {
  static Service svc(fixture_session());
  return svc;
}

ApiResponse get(const std::string& path, std::map<std::string, std::string> q = {}) {
  return service().handle("GET", path, q, "");
}

ApiResponse post(const std::string& path, const json& body) { return service().handle("POST", path, {}, body.dump()); }

std::size_t first_misclassified() {
  const auto r = get("/api/v1/samples", {{"split", "val"}, {"filter", "misclassified"}, {"limit", "1"}});
  EXPECT_EQ(r.status, 200);
  return r.body["samples"][0]["id"].get<std::size_t>();
}

TEST(ImageCodec, Base64RoundTripAndKnownValues) {
  EXPECT_EQ(base64_encode({'M', 'a', 'n'}), "TWFu");
  EXPECT_EQ(base64_encode({'M', 'a'}), "TWE=");
  EXPECT_EQ(base64_encode({'M'}), "TQ==");
  std::vector<std::uint8_t> bytes(257);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i * 7);
  EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  EXPECT_THROW(base64_decode("abc"), FormatError);
}

TEST(ImageCodec, PngDecodesToSamePixels) {
  for (std::size_t channels : {1u, 3u, 4u}) {
    std::vector<std::uint8_t> px(5 * 3 * channels);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 37 + 11);
    const auto png = encode_png(5, 3, channels, px);
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    ASSERT_TRUE(png_image_begin_read_from_memory(&img, png.data(), png.size()));
    EXPECT_EQ(img.width, 5u);
    EXPECT_EQ(img.height, 3u);
    EXPECT_EQ(PNG_IMAGE_PIXEL_CHANNELS(img.format), channels);
    std::vector<std::uint8_t> back(PNG_IMAGE_SIZE(img));
    ASSERT_TRUE(png_image_finish_read(&img, nullptr, back.data(), 0, nullptr));
    EXPECT_EQ(back, px);
  }
  EXPECT_THROW(encode_png(3, 2, 2, std::vector<std::uint8_t>(12)), ShapeError);
}

TEST(Service, ModelReportsRegistry) {
  const auto r = get("/api/v1/model");
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["filter_count"].get<std::size_t>(), trained_fixture().model.registry().filter_count());
  std::size_t sum = 0;
  for (const auto& l : r.body["layers"]) sum += l["filter_count"].get<std::size_t>();
  EXPECT_EQ(sum, r.body["filter_count"].get<std::size_t>());
}

TEST(Service, SamplePagingAndFilter) {
  const auto all = get("/api/v1/samples", {{"split", "val"}, {"limit", "1000"}});
  ASSERT_EQ(all.status, 200);
  const auto& val = trained_fixture().data.splits.val;
  EXPECT_EQ(all.body["total"].get<std::size_t>(), val.size());
  const auto wrong = get("/api/v1/samples", {{"filter", "misclassified"}, {"limit", "1000"}});
  const auto right = get("/api/v1/samples", {{"filter", "correct"}, {"limit", "1000"}});
  EXPECT_EQ(wrong.body["total"].get<std::size_t>() + right.body["total"].get<std::size_t>(), val.size());
  for (const auto& s : wrong.body["samples"]) EXPECT_FALSE(s["correct"].get<bool>());
  const auto page = get("/api/v1/samples", {{"offset", "3"}, {"limit", "2"}});
  ASSERT_EQ(page.body["samples"].size(), 2u);
  EXPECT_EQ(page.body["samples"][0]["id"], all.body["samples"][3]["id"]);
  EXPECT_EQ(get("/api/v1/samples", {{"limit", "0"}}).status, 400);
  EXPECT_EQ(get("/api/v1/samples", {{"bogus", "1"}}).status, 400);
}

TEST(Service, SampleDetailHasDecodablePng) {
  const std::size_t id = first_misclassified();
  const auto r = get("/api/v1/samples/" + std::to_string(id));
  ASSERT_EQ(r.status, 200);
  const auto png = base64_decode(r.body["image_png"].get<std::string>());
  EXPECT_EQ(png[0], 0x89);
  EXPECT_EQ(r.body["shape"], json({3, 16, 16}));
  const auto missing = get("/api/v1/samples/999999");
  EXPECT_EQ(missing.status, 404);
  EXPECT_EQ(missing.body["code"], "not_found");
  EXPECT_TRUE(missing.body.contains("message"));
  EXPECT_EQ(get("/api/v1/samples/abc").status, 400);
  EXPECT_EQ(get("/api/v1/nothing").status, 404);
  EXPECT_EQ(service().handle("POST", "/api/v1/model", {}, "").status, 405);
}

TEST(Service, ProfileSortedPerLayer) {
  const std::size_t id = first_misclassified();
  const auto r = get("/api/v1/samples/" + std::to_string(id) + "/profile", {{"sorted", "per_layer"}});
  ASSERT_EQ(r.status, 200);
  for (const auto& layer : r.body["sorted"]) {
    double prev = 1e300;
    for (const auto& e : layer["entries"]) {
      EXPECT_LE(e["value"].get<double>(), prev);
      prev = e["value"].get<double>();
    }
  }
}

TEST(Service, NeighborsMatchIndex) {
  const std::size_t id = first_misclassified();
  const auto r = get("/api/v1/samples/" + std::to_string(id) + "/neighbors",
                     {{"k", "5"}, {"pool", "misclassified"}, {"layers", "0..1"}});
  ASSERT_EQ(r.status, 200);
  EXPECT_LE(r.body["neighbors"].size(), 5u);
  for (const auto& n : r.body["neighbors"]) {
    EXPECT_FALSE(n["correct"].get<bool>());
    EXPECT_NE(n["id"].get<std::size_t>(), id);
  }
  EXPECT_EQ(get("/api/v1/samples/" + std::to_string(id) + "/neighbors", {{"layers", "3-4"}}).status, 400);
}

TEST(Service, EmptyMaskLeavesConfidencesUnchanged) {
  const std::size_t id = first_misclassified();
  const auto before = get("/api/v1/samples/" + std::to_string(id));
  const auto r = post("/api/v1/samples/" + std::to_string(id) + "/whatif/mask", json::object());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["confidences"], before.body["confidences"]);
  EXPECT_EQ(r.body["masked_pixels"], 0);
  EXPECT_EQ(r.body["filter_saliency"]["delta"].get<double>(), 0.0);
  const auto masked = post("/api/v1/samples/" + std::to_string(id) + "/whatif/mask",
                           {{"regions", {{{"top", 2}, {"left", 2}, {"height", 6}, {"width", 6}}}}});
  ASSERT_EQ(masked.status, 200);
  EXPECT_EQ(masked.body["masked_pixels"], 36);
  EXPECT_EQ(post("/api/v1/samples/" + std::to_string(id) + "/whatif/mask", {{"shape", "circle"}}).status, 400);
  EXPECT_EQ(post("/api/v1/samples/" + std::to_string(id) + "/whatif/mask",
                 {{"regions", {{{"top", 14}, {"left", 2}, {"height", 6}, {"width", 6}}}}})
                .status,
            400);
}

TEST(Service, PruneZeroCountHasZeroDeltas) {
  const std::size_t id = first_misclassified();
  const auto r = post("/api/v1/samples/" + std::to_string(id) + "/whatif/prune", {{"mode", "random"}, {"count", 0}});
  ASSERT_EQ(r.status, 200);
  EXPECT_FALSE(r.body["corrected"].get<bool>());
  for (const auto& d : r.body["delta"]) EXPECT_EQ(d.get<double>(), 0.0);
  EXPECT_EQ(post("/api/v1/samples/" + std::to_string(id) + "/whatif/prune", {{"mode", "worst"}}).status, 400);
}

TEST(Service, FinetuneReportsNeighborsAndRespectsCap) {
  const std::size_t id = first_misclassified();
  const std::string path = "/api/v1/samples/" + std::to_string(id) + "/whatif/finetune";
  EXPECT_EQ(post(path, {{"mode", "most_salient"}, {"count", 1}}).status, 400);
  const auto r = post(path, {{"mode", "most_salient"}, {"count", 1}, {"step_size", 0.01}, {"allow_over_cap", true},
                             {"neighbors", 4}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_LE(r.body["neighbors"].size(), 4u);
  EXPECT_GT(r.body["delta_true"].get<double>(), 0.0);
}

TEST(Service, PasteCopiesRegion) {
  const std::size_t id = first_misclassified();
  const std::string path = "/api/v1/samples/" + std::to_string(id) + "/whatif/paste";
  const auto self = post(path, {{"source_id", id},
                                {"source_rect", {{"top", 0}, {"left", 0}, {"height", 4}, {"width", 4}}},
                                {"dest_xy", {0, 0}}});
  ASSERT_EQ(self.status, 200) << self.body.dump();
  for (const auto& d : self.body["delta"]) EXPECT_EQ(d.get<double>(), 0.0);
  EXPECT_EQ(post(path, {{"source_id", id},
                        {"source_rect", {{"top", 0}, {"left", 0}, {"height", 4}, {"width", 4}}},
                        {"dest_xy", {14, 0}}})
                .status,
            400);
}

TEST(Service, InputSaliencyIsCachedAndIdempotent) {
  const std::size_t id = first_misclassified();
  const std::string path = "/api/v1/samples/" + std::to_string(id) + "/input_saliency";
  const json body{{"top_filters", 5}, {"boost", 100}, {"postprocess", true}};
  const auto a = post(path, body);
  ASSERT_EQ(a.status, 200) << a.body.dump();
  EXPECT_EQ(a.body["grid"].size(), 16u);
  EXPECT_EQ(a.body, post(path, body).body);
  EXPECT_TRUE(a.body.contains("overlay_png"));
}

TEST(Service, WhatIfsLeaveServedStateUnchanged) {
  const std::size_t id = first_misclassified();
  const std::string base = "/api/v1/samples/" + std::to_string(id);
  const auto before = get(base).body;
  const auto model_before = get("/api/v1/model").body;
  const json prune{{"mode", "most_salient"}, {"count", 5}};
  const auto p1 = post(base + "/whatif/prune", prune);
  post(base + "/whatif/finetune", {{"count", 2}, {"allow_over_cap", true}, {"step_size", 0.1}});
  post(base + "/whatif/mask", {{"regions", {{{"top", 0}, {"left", 0}, {"height", 8}, {"width", 8}}}}});
  EXPECT_EQ(p1.body, post(base + "/whatif/prune", prune).body);
  EXPECT_EQ(get(base).body, before);
  EXPECT_EQ(get("/api/v1/model").body, model_before);
}

TEST(Service, ConcurrentRequestsAgree) {
  const std::size_t id = first_misclassified();
  const std::string path = "/api/v1/samples/" + std::to_string(id + 0) + "/profile";
  std::vector<std::future<json>> futures;
  for (int i = 0; i < 6; ++i) {
    futures.push_back(std::async(std::launch::async, [&] { return get(path).body; }));
  }
  const json first = futures[0].get();
  for (std::size_t i = 1; i < futures.size(); ++i) EXPECT_EQ(futures[i].get(), first);
}

TEST(Service, HttpRoundTrip) {
  Service svc(fixture_session());
  std::promise<int> ready;
  std::thread t([&] { svc.serve("127.0.0.1", 0, [&](int port) { ready.set_value(port); }); });
  const int port = ready.get_future().get();
  httplib::Client client("127.0.0.1", port);
  const auto res = client.Get("/api/v1/model");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["filter_count"], get("/api/v1/model").body["filter_count"]);
  const auto bad = client.Post("/api/v1/samples/0/whatif/prune", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(json::parse(bad->body)["code"], "invalid_json");
  svc.stop();
  t.join();
}

TEST(Service, LoadSessionChecksArtifacts) {
  const auto dir = std::filesystem::temp_directory_path() / "psal_service_test";
  std::filesystem::remove_all(dir);
  SynthSpec synth;
  synth.per_class = 10;
  synth.seed = 2;
  DatasetManifest manifest{"synth", synth, {}, {0.6, 0.2, 0.2, 1}};
  const Dataset raw = load_raw(manifest);
  const PreparedData data = prepare(raw, manifest.split);
  Model model(testing::fixture_spec(), 1);
  model.round_to_storage_precision();
  save_checkpoint(model, {}, dir / "m.psal");
  const std::string text = manifest_to_json(manifest, data, dataset_checksum(raw)).dump();
  write_file_bytes(dir / "data.json", {text.begin(), text.end()});
  const ProfileStats stats = compute_stats(model, data.splits.train, "train", 2);
  save_stats(stats, dir / "stats.json");
  ProfileIndex::build(model, data.splits.val, stats, 2).save(dir / "index.json");
  const ServiceArtifacts a{dir / "m.psal", dir / "data.json", dir / "stats.json", dir / "index.json"};
  const SessionData s = load_session(a);
  EXPECT_EQ(s.model.fingerprint(), model.fingerprint());
  EXPECT_EQ(s.index.size(), data.splits.val.size());

  ServiceArtifacts missing = a;
  missing.stats = dir / "nope.json";
  EXPECT_THROW(load_session(missing), MissingArtifactError);
  Model other(testing::fixture_spec(), 2);
  save_checkpoint(other, {}, dir / "other.psal");
  ServiceArtifacts mismatch = a;
  mismatch.checkpoint = dir / "other.psal";
  EXPECT_THROW(load_session(mismatch), ConfigError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace psal
