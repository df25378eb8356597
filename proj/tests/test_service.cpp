// REST contract tests. Every request goes over a real socket through the
// httplib client against a service bound to a free local port.

#include <atomic>
#include <chrono>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>
#include <json.hpp>

#include "support.hpp"
#include "tumorseg/engine.hpp"
#include "tumorseg/image.hpp"
#include "tumorseg/service.hpp"

using namespace tumorseg;
using fixture::TempDir;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kUser = "alice";
constexpr const char* kPassword = "correct horse battery";

/// Blocks every prediction until released, so tests can observe "processing".
class GatedPredictor : public Predictor {
 public:
  std::vector<Detection> predict(const Image& image) const override {
    std::unique_lock lock(mu_);
    entered_ = true;
    cv_.notify_all();
    cv_.wait(lock, [&] { return open_; });
    return inner_.predict(image);
  }
  void wait_entered() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return entered_; });
  }
  void open() {
    std::lock_guard lock(mu_);
    open_ = true;
    cv_.notify_all();
  }

 private:
  fixture::ThresholdPredictor inner_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  mutable bool entered_ = false;
  bool open_ = false;
};

/// Square of `side` bright pixels on a dark 32x32 scan.
Image bright_square(int side) {
  Image img(32, 32, 1, 30);
  for (int r = 4; r < 4 + side; ++r)
    for (int c = 4; c < 4 + side; ++c) img.at(r, c) = 220;
  return img;
}

std::string png_bytes(const Image& img) {
  const auto v = encode_png(img);
  return std::string(v.begin(), v.end());
}

class Harness {
 public:
  explicit Harness(std::shared_ptr<const Predictor> predictor, std::function<void(ServiceConfig&)> tweak = {}) {
    cfg_.storage_root = dir_ / "storage";
    cfg_.run_dir = dir_ / "run";
    cfg_.token_secret = "0123456789abcdef-test-secret";
    cfg_.port = 0;
    cfg_.users.push_back({kUser, kPassword});
    if (tweak) tweak(cfg_);
    predictor_ = std::move(predictor);
    boot();
  }
  ~Harness() { service_.reset(); }

  void boot() {
    service_ = std::make_unique<Service>(cfg_, predictor_, [this] {
      return std::chrono::system_clock::now() + std::chrono::seconds(offset_.load());
    });
    port_ = service_->start();
  }
  void restart() {
    service_.reset();
    boot();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(30, 0);
    return c;
  }
  void advance(long seconds) { offset_ += seconds; }
  Service& service() { return *service_; }
  const ServiceConfig& config() const { return cfg_; }

  std::string login(const std::string& user = kUser, const std::string& pw = kPassword) {
    auto res = client().Post("/api/login", json{{"username", user}, {"password", pw}}.dump(), "application/json");
    if (!res || res->status != 200) return {};
    return json::parse(res->body)["token"].get<std::string>();
  }

  httplib::Result upload(const std::string& token, const std::string& bytes, const std::string& patient_id,
                         const std::string& filename = "scan.png", const std::string& type = "image/png") {
    httplib::MultipartFormDataItems items{{"file", bytes, filename, type}};
    if (!patient_id.empty()) items.push_back({"patient_id", patient_id, "", ""});
    return client().Post("/api/scans", auth(token), items);
  }

  httplib::Result get(const std::string& token, const std::string& path) { return client().Get(path, auth(token)); }

  /// Polls until the result leaves 202; returns the final response body and status.
  std::pair<int, json> wait_result(const std::string& token, const std::string& upload_id) {
    for (int i = 0; i < 3000; ++i) {
      auto res = get(token, "/api/scans/" + upload_id + "/result");
      if (!res) return {0, {}};
      if (res->status != 202) return {res->status, json::parse(res->body)};
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    return {0, {}};
  }

  static httplib::Headers auth(const std::string& token) { return {{"Authorization", "Bearer " + token}}; }

 private:
  TempDir dir_;
  ServiceConfig cfg_;
  std::shared_ptr<const Predictor> predictor_;
  std::atomic<long> offset_{0};
  std::unique_ptr<Service> service_;
  int port_ = 0;
};

std::shared_ptr<const Predictor> threshold_model() { return std::make_shared<fixture::ThresholdPredictor>(); }

}  // namespace

// --- configuration and credentials ------------------------------------------------

TEST(ServiceConfig, ParsesAndRejectsUnknownKeys) {
  const auto c = parse_service_config(R"({"storage_root": "/srv/x", "token_secret": "0123456789abcdef",
      "port": 9000, "users": [{"username": "u", "password": "p"}]})");
  EXPECT_EQ(c.storage_root, "/srv/x");
  EXPECT_EQ(c.port, 9000);
  EXPECT_EQ(c.effective_database_path(), fs::path("/srv/x") / "tumorseg.db");
  ASSERT_EQ(c.users.size(), 1u);
  EXPECT_THROW(parse_service_config(R"({"token_secret": "0123456789abcdef", "colour": 1})"), ConfigError);
  EXPECT_THROW(parse_service_config(R"({"token_secret": "short"})").validate(), ConfigError);
  EXPECT_THROW(parse_service_config(R"({"token_secret": "0123456789abcdef", "port": "x"})"), ConfigError);
}

TEST(ServiceConfig, EnvironmentOverridesFile) {
  TempDir dir;
  {
    std::ofstream f(dir / "svc.json");
    f << R"({"token_secret": "0123456789abcdef", "port": 9000, "detection_threshold": 0.4})";
  }
  const std::map<std::string, std::string> env{{"TUMORSEG_PORT", "9100"}, {"TUMORSEG_RUN_DIR", "/runs/7"}};
  auto lookup = [&](const std::string& k) -> std::optional<std::string> {
    auto it = env.find(k);
    return it == env.end() ? std::nullopt : std::optional(it->second);
  };
  const auto c = load_service_config(dir / "svc.json", lookup);
  EXPECT_EQ(c.port, 9100);
  EXPECT_EQ(c.run_dir, "/runs/7");
  EXPECT_EQ(c.detection_threshold, 0.4);
  const std::map<std::string, std::string> bad{{"TUMORSEG_PORT", "nine"}};
  EXPECT_THROW(load_service_config(dir / "svc.json",
                                   [&](const std::string& k) -> std::optional<std::string> {
                                     auto it = bad.find(k);
                                     return it == bad.end() ? std::nullopt : std::optional(it->second);
                                   }),
               ConfigError);
}

TEST(Credentials, HashAndVerify) {
  const auto d1 = hash_password("s3cret"), d2 = hash_password("s3cret");
  EXPECT_NE(d1, d2);  // salted
  EXPECT_EQ(d1.rfind("pbkdf2-sha256$", 0), 0u);
  EXPECT_TRUE(verify_password("s3cret", d1));
  EXPECT_TRUE(verify_password("s3cret", d2));
  EXPECT_FALSE(verify_password("s3creT", d1));
  EXPECT_FALSE(verify_password("s3cret", "garbage"));
  EXPECT_FALSE(verify_password("s3cret", "pbkdf2-sha256$0$00$00"));
}

TEST(UploadStatus, NamesRoundTrip) {
  for (auto s : {UploadStatus::received, UploadStatus::processing, UploadStatus::done, UploadStatus::failed})
    EXPECT_EQ(parse_upload_status(to_string(s)), s);
  EXPECT_THROW(parse_upload_status("lost"), Error);
}

// --- authentication ---------------------------------------------------------------------

TEST(ServiceAuth, LoginIssuesToken) {
  Harness h(threshold_model());
  auto res = h.client().Post("/api/login", json{{"username", kUser}, {"password", kPassword}}.dump(),
                             "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto body = json::parse(res->body);
  EXPECT_EQ(body["token_type"], "Bearer");
  EXPECT_EQ(body["expires_in"], 3600);
  EXPECT_GE(body["token"].get<std::string>().size(), 32u);
}

TEST(ServiceAuth, WrongPasswordAndMalformedBodies) {
  Harness h(threshold_model());
  auto res = h.client().Post("/api/login", json{{"username", kUser}, {"password", "nope"}}.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 401);
  EXPECT_FALSE(json::parse(res->body).contains("token"));
  res = h.client().Post("/api/login", json{{"username", "mallory"}, {"password", "x"}}.dump(), "application/json");
  EXPECT_EQ(res->status, 401);
  res = h.client().Post("/api/login", "{not json", "application/json");
  EXPECT_EQ(res->status, 400);
  res = h.client().Post("/api/login", json{{"username", kUser}}.dump(), "application/json");
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["field"], "password");
}

TEST(ServiceAuth, ProtectedEndpointsRequireValidToken) {
  Harness h(threshold_model());
  auto c = h.client();
  const std::vector<std::string> gets{"/api/scans/u1", "/api/scans/u1/result", "/api/patients/P-1/results",
                                      "/api/artifacts/u1_overlay.png"};
  for (const std::string& token : {std::string{}, std::string("forged")}) {
    httplib::Headers hdr;
    if (!token.empty()) hdr = Harness::auth(token);
    for (const auto& p : gets) {
      auto res = c.Get(p, hdr);
      ASSERT_TRUE(res);
      EXPECT_EQ(res->status, 401) << p;
    }
    EXPECT_EQ(c.Delete("/api/scans/u1", hdr)->status, 401);
    const httplib::MultipartFormDataItems items{{"file", png_bytes(bright_square(4)), "s.png", "image/png"},
                                                {"patient_id", "P-1", "", ""}};
    EXPECT_EQ(c.Post("/api/scans", hdr, items)->status, 401);
  }
}

TEST(ServiceAuth, TokenExpiresWithClock) {
  Harness h(threshold_model());
  const auto token = h.login();
  ASSERT_FALSE(token.empty());
  EXPECT_EQ(h.get(token, "/api/patients/P-1/results")->status, 200);
  h.advance(3599);
  EXPECT_EQ(h.get(token, "/api/patients/P-1/results")->status, 200);
  h.advance(2);
  EXPECT_EQ(h.get(token, "/api/patients/P-1/results")->status, 401);
  EXPECT_EQ(h.upload(token, png_bytes(bright_square(5)), "P-1")->status, 401);
}

// --- uploads and results --------------------------------------------------------------

TEST(ServiceUpload, RoundTripCarriesPatientIdAndOverlay) {
  Harness h(threshold_model());
  const auto token = h.login();
  const auto scan = generate_synthetic_dataset(2, 3).scans[0];
  ASSERT_EQ(scan.ground_truth->label, Label::tumor);
  auto res = h.upload(token, png_bytes(scan.image), "P-17");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 202) << res->body;
  const auto accepted = json::parse(res->body);
  const std::string id = accepted["upload_id"];
  EXPECT_EQ(accepted["patient_id"], "P-17");
  EXPECT_EQ(accepted["status"], "received");

  const auto [status, body] = h.wait_result(token, id);
  ASSERT_EQ(status, 200) << body.dump();
  EXPECT_EQ(body["patient_id"], "P-17");
  EXPECT_EQ(body["label"], "tumor");
  EXPECT_GE(body["confidence"].get<double>(), h.config().detection_threshold);
  ASSERT_EQ(body["detections"].size(), 1u);
  EXPECT_EQ(body["detections"][0]["class_label"], "tumor");

  auto art = h.get(token, body["overlay_url"]);
  ASSERT_TRUE(art);
  EXPECT_EQ(art->status, 200);
  EXPECT_EQ(art->get_header_value("Content-Type"), "image/png");
  const std::vector<std::uint8_t> bytes(art->body.begin(), art->body.end());
  const Image overlay = decode_image(bytes);
  EXPECT_EQ(overlay.rows, scan.image.rows);
  EXPECT_NE(overlay, to_three_channels(scan.image));

  const auto rec = json::parse(h.get(token, "/api/scans/" + id)->body);
  EXPECT_EQ(rec["status"], "done");
}

TEST(ServiceUpload, NegativeScanGivesNoTumorAndUntouchedOverlay) {
  Harness h(threshold_model());
  const auto token = h.login();
  const Image blank(32, 32, 1, 40);
  const auto id = json::parse(h.upload(token, png_bytes(blank), "P-2")->body)["upload_id"].get<std::string>();
  const auto [status, body] = h.wait_result(token, id);
  ASSERT_EQ(status, 200);
  EXPECT_EQ(body["label"], "no_tumor");
  EXPECT_EQ(body["confidence"], 1.0);
  const auto art = h.get(token, body["overlay_url"]);
  const std::vector<std::uint8_t> bytes(art->body.begin(), art->body.end());
  EXPECT_EQ(decode_image(bytes), blank);
}

TEST(ServiceUpload, ValidationFailures) {
  Harness h(threshold_model(), [](ServiceConfig& c) { c.max_upload_bytes = 4096; });
  const auto token = h.login();
  auto res = h.upload(token, "just some text", "P-1", "notes.txt", "text/plain");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  auto body = json::parse(res->body);
  EXPECT_EQ(body["code"], "unsupported_media");
  EXPECT_NE(body["message"].get<std::string>().find("unsupported media"), std::string::npos);

  res = h.upload(token, png_bytes(bright_square(3)), "");
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["field"], "patient_id");

  res = h.upload(token, png_bytes(bright_square(3)), "P-\x01");
  EXPECT_EQ(res->status, 400);

  std::string big = png_bytes(bright_square(3));
  big.resize(10000, 'x');
  res = h.upload(token, big, "P-1");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 413);

  std::string truncated = png_bytes(bright_square(3)).substr(0, 40);
  res = h.upload(token, truncated, "P-1");
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["code"], "invalid_image");

  res = h.client().Post("/api/scans", Harness::auth(token), "{}", "application/json");
  EXPECT_EQ(res->status, 400);
}

TEST(ServiceUpload, UnknownUploadIs404) {
  Harness h(threshold_model());
  const auto token = h.login();
  EXPECT_EQ(h.get(token, "/api/scans/u404/result")->status, 404);
  EXPECT_EQ(h.get(token, "/api/scans/u404")->status, 404);
  EXPECT_EQ(h.client().Delete("/api/scans/u404", Harness::auth(token))->status, 404);
}

TEST(ServiceUpload, StatusSequenceIsMonotone) {
  auto gate = std::make_shared<GatedPredictor>();
  Harness h(gate);
  const auto token = h.login();
  const auto id = json::parse(h.upload(token, png_bytes(bright_square(6)), "P-9")->body)["upload_id"].get<std::string>();
  gate->wait_entered();
  std::vector<std::string> seen{"received"};
  auto observe = [&] {
    const auto s = json::parse(h.get(token, "/api/scans/" + id)->body)["status"].get<std::string>();
    if (s != seen.back()) seen.push_back(s);
  };
  observe();
  EXPECT_EQ(seen.back(), "processing");
  EXPECT_EQ(h.get(token, "/api/scans/" + id + "/result")->status, 202);
  EXPECT_EQ(h.client().Delete("/api/scans/" + id, Harness::auth(token))->status, 409);
  gate->open();
  h.service().drain();
  observe();
  EXPECT_EQ(seen, (std::vector<std::string>{"received", "processing", "done"}));
}

TEST(ServiceUpload, PredictorFailureMarksUploadFailed) {
  Harness h(std::make_shared<fixture::ThrowingPredictor>());
  const auto token = h.login();
  const auto id = json::parse(h.upload(token, png_bytes(bright_square(6)), "P-5")->body)["upload_id"].get<std::string>();
  const auto [status, body] = h.wait_result(token, id);
  EXPECT_EQ(status, 500);
  EXPECT_EQ(body["status"], "failed");
  EXPECT_NE(body["message"].get<std::string>().find("model exploded"), std::string::npos);
  const auto rec = json::parse(h.get(token, "/api/scans/" + id)->body);
  EXPECT_EQ(rec["status"], "failed");
  EXPECT_TRUE(json::parse(h.get(token, "/api/patients/P-5/results")->body).empty());
}

TEST(ServicePatients, HistoryNewestFirst) {
  Harness h(threshold_model());
  const auto token = h.login();
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) {
    const auto id = json::parse(h.upload(token, png_bytes(bright_square(3 + i)), "P-42")->body)["upload_id"];
    ids.push_back(id);
    h.service().drain();
    h.advance(60);
  }
  h.upload(token, png_bytes(bright_square(4)), "P-43");
  h.service().drain();
  auto res = h.get(token, "/api/patients/P-42/results");
  ASSERT_EQ(res->status, 200);
  const auto list = json::parse(res->body);
  ASSERT_EQ(list.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(list[i]["upload_id"], ids[2 - i]);
    EXPECT_EQ(list[i]["patient_id"], "P-42");
  }
  EXPECT_GT(list[0]["created_at"].get<std::string>(), list[1]["created_at"].get<std::string>());

  res = h.get(token, "/api/patients/nobody/results");
  EXPECT_EQ(res->status, 200);
  EXPECT_TRUE(json::parse(res->body).empty());
}

TEST(ServiceArtifacts, TraversalRejectedAndDeletedArtifactsGone) {
  Harness h(threshold_model());
  const auto token = h.login();
  const auto id = json::parse(h.upload(token, png_bytes(bright_square(5)), "P-3")->body)["upload_id"].get<std::string>();
  const auto [status, body] = h.wait_result(token, id);
  ASSERT_EQ(status, 200);
  const std::string url = body["overlay_url"];
  EXPECT_EQ(h.get(token, url)->status, 200);

  for (const char* bad : {"/api/artifacts/../config.json", "/api/artifacts/..%2Fconfig.json",
                          "/api/artifacts/%2E%2E%2Ftumorseg.db", "/api/artifacts/a/../../tumorseg.db",
                          "/api/artifacts/.hidden"}) {
    auto res = h.get(token, bad);
    ASSERT_TRUE(res);
    EXPECT_TRUE(res->status == 400 || res->status == 404) << bad << " -> " << res->status;
    EXPECT_NE(res->get_header_value("Content-Type"), "image/png");
  }
  EXPECT_EQ(h.get(token, "/api/artifacts/..%2Fconfig.json")->status, 400);
  EXPECT_EQ(h.get(token, "/api/artifacts/nobody_overlay.png")->status, 404);

  EXPECT_EQ(h.client().Delete("/api/scans/" + id, Harness::auth(token))->status, 204);
  EXPECT_EQ(h.get(token, url)->status, 404);
  EXPECT_EQ(h.get(token, "/api/scans/" + id + "/result")->status, 404);
  EXPECT_TRUE(json::parse(h.get(token, "/api/patients/P-3/results")->body).empty());
}

TEST(ServiceStorage, PathsStayInsideStorageRoot) {
  Harness h(threshold_model());
  const auto token = h.login();
  h.upload(token, png_bytes(bright_square(5)), "../../etc/passwd");
  h.service().drain();
  const auto root = fs::canonical(h.config().storage_root);
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    const auto p = fs::canonical(entry.path());
    EXPECT_EQ(std::mismatch(root.begin(), root.end(), p.begin()).first, root.end()) << p;
  }
  EXPECT_EQ(std::distance(fs::directory_iterator(root / "uploads"), fs::directory_iterator{}), 1);
}

TEST(ServiceStorage, ResultsSurviveRestart) {
  Harness h(threshold_model());
  auto token = h.login();
  const auto id = json::parse(h.upload(token, png_bytes(bright_square(5)), "P-8")->body)["upload_id"].get<std::string>();
  ASSERT_EQ(h.wait_result(token, id).first, 200);
  h.restart();
  token = h.login();
  const auto [status, body] = h.wait_result(token, id);
  EXPECT_EQ(status, 200);
  EXPECT_EQ(body["patient_id"], "P-8");
}

TEST(ServiceConcurrency, SixteenSimultaneousUploads) {
  Harness h(threshold_model());
  const auto token = h.login();
  constexpr int kN = 16;
  std::vector<std::string> ids(kN);
  std::vector<int> codes(kN, 0);
  std::vector<std::thread> threads;
  std::atomic<int> ready{0};
  for (int i = 0; i < kN; ++i)
    threads.emplace_back([&, i] {
      const std::string bytes = png_bytes(bright_square(2 + i));
      ++ready;
      while (ready.load() < kN) std::this_thread::yield();
      auto res = h.upload(token, bytes, "P-" + std::to_string(100 + i));
      if (!res) return;
      codes[i] = res->status;
      if (res->status == 202) ids[i] = json::parse(res->body)["upload_id"];
    });
  for (auto& t : threads) t.join();
  std::set<std::string> distinct(ids.begin(), ids.end());
  EXPECT_EQ(distinct.size(), static_cast<std::size_t>(kN));
  for (int i = 0; i < kN; ++i) {
    ASSERT_EQ(codes[i], 202) << i;
    const auto [status, body] = h.wait_result(token, ids[i]);
    ASSERT_EQ(status, 200);
    EXPECT_EQ(body["patient_id"], "P-" + std::to_string(100 + i));
    // Each image has a distinct bright area, so a swapped result would show here.
    const auto& box = body["detections"][0]["box"];
    EXPECT_EQ(box["r1"].get<int>() - box["r0"].get<int>(), 2 + i);
  }
}

TEST(ServiceStartup, SecondInstanceCannotShareAPort) {
  Harness h(threshold_model());
  TempDir dir;
  ServiceConfig other;
  other.storage_root = dir / "storage";
  other.token_secret = "0123456789abcdef-test-secret";
  other.port = h.client().port();
  Service second(other, threshold_model());
  EXPECT_THROW(second.start(), IoError);
}
