#include <atomic>
#include <fstream>
#include <regex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "crypto_util.hpp"
#include "store.hpp"
#include "tumorseg/engine.hpp"
#include "tumorseg/reporting.hpp"
#include "tumorseg/service.hpp"

namespace tumorseg {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(UploadStatus s) {
  switch (s) {
    case UploadStatus::received: return "received";
    case UploadStatus::processing: return "processing";
    case UploadStatus::done: return "done";
    case UploadStatus::failed: return "failed";
  }
  return "failed";
}

UploadStatus parse_upload_status(std::string_view text) {
  for (auto s : {UploadStatus::received, UploadStatus::processing, UploadStatus::done, UploadStatus::failed})
    if (to_string(s) == text) return s;
  throw ValidationError("unknown upload status '" + std::string(text) + "'");
}

namespace {

constexpr std::size_t kMultipartOverhead = 1u << 20;
constexpr std::size_t kMaxPatientIdLength = 128;
// Verified against when the username is unknown so both paths cost the same.
const std::string& dummy_digest() {
  static const std::string digest = hash_password("not-a-real-password");
  return digest;
}

std::string iso_time(std::chrono::system_clock::time_point tp) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(tp.time_since_epoch()).count();
  const std::time_t secs = static_cast<std::time_t>(ms / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  const std::size_t n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  std::snprintf(buf + n, sizeof buf - n, ".%03dZ", static_cast<int>(ms % 1000));
  return buf;
}

std::int64_t epoch_seconds(std::chrono::system_clock::time_point tp) {
  return std::chrono::duration_cast<std::chrono::seconds>(tp.time_since_epoch()).count();
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                const std::string& field = {}) {
  json body{{"code", code}, {"message", message}};
  if (!field.empty()) body["field"] = field;
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json detection_json(const Detection& d) {
  const auto counts = encode_rle(d.mask);
  return json{{"box", {{"r0", d.box.r0}, {"c0", d.box.c0}, {"r1", d.box.r1}, {"c1", d.box.c1}}},
              {"class_label", std::string(to_string(d.class_label))},
              {"score", d.score},
              {"mask_rle", {{"size", {d.mask.rows, d.mask.cols}}, {"counts", counts}}}};
}

bool printable(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return c >= 0x20 && c < 0x7f; });
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

bool within(const fs::path& root, const fs::path& p) {
  auto r = root.begin(), q = p.begin();
  for (; r != root.end(); ++r, ++q)
    if (q == p.end() || *r != *q) return false;
  return true;
}

}  // namespace

struct Service::Impl {
  ServiceConfig cfg;
  Clock clock;
  fs::path root;  // canonical storage root
  fs::path uploads_dir, artifacts_dir;
  detail::Store store;
  std::shared_ptr<const Predictor> predictor;
  InferenceQueue queue;
  httplib::Server server;
  std::thread thread;

  Impl(ServiceConfig c, std::shared_ptr<const Predictor> p, Clock clk)
      : cfg(std::move(c)),
        clock(clk ? std::move(clk) : Clock([] { return std::chrono::system_clock::now(); })),
        root(prepare_root(cfg)),
        uploads_dir(root / "uploads"),
        artifacts_dir(root / "artifacts"),
        store(cfg.effective_database_path()),
        predictor(std::move(p)),
        queue(predictor) {
    fs::create_directories(uploads_dir);
    fs::create_directories(artifacts_dir);
    for (const auto& u : cfg.users)
      if (!store.password_digest(u.username)) store.put_user(u.username, hash_password(u.password));
    // Work interrupted by a previous shutdown.
    for (const auto& u : store.uploads_with_status(UploadStatus::processing))
      store.transition(u.upload_id, UploadStatus::processing, UploadStatus::failed, "interrupted by a service restart");
    for (const auto& u : store.uploads_with_status(UploadStatus::received)) enqueue(u.upload_id);
    routes();
  }

  static fs::path prepare_root(const ServiceConfig& c) {
    c.validate();
    std::error_code ec;
    fs::create_directories(c.storage_root, ec);
    if (ec) throw IoError(c.storage_root.string() + ": " + ec.message());
    return fs::canonical(c.storage_root);
  }

  std::string now_iso() const { return iso_time(clock()); }

  // Inference job for one upload; the model only ever sees the image.
  void enqueue(const std::string& upload_id) {
    queue.post([this, upload_id](const Predictor& model) {
      if (!store.transition(upload_id, UploadStatus::received, UploadStatus::processing)) return;
      try {
        const auto rec = store.upload(upload_id);
        if (!rec) return;  // deleted meanwhile
        const Image image = read_image(rec->stored_path);
        const Diagnosis dx = diagnose(model.predict(image), cfg.detection_threshold);
        auto overlay = render_overlay(upload_id, image, dx.detections);
        write_overlay(overlay, artifacts_dir);
        DiagnosisResult r;
        r.upload_id = upload_id;
        r.label = dx.label;
        r.confidence = dx.confidence;
        r.overlay_ref = overlay_file_name(upload_id);
        r.detections = dx.detections;
        r.created_at = now_iso();
        json dets = json::array();
        for (const auto& d : r.detections) dets.push_back(detection_json(d));
        store.complete(r, dets.dump());
      } catch (const std::exception& e) {
        store.transition(upload_id, UploadStatus::processing, UploadStatus::failed, e.what());
      }
    });
  }

  std::optional<std::string> authenticate(const httplib::Request& req, httplib::Response& res) {
    const std::string h = req.get_header_value("Authorization");
    const std::string prefix = "Bearer ";
    if (h.size() > prefix.size() && h.compare(0, prefix.size(), prefix) == 0) {
      const auto token = h.substr(prefix.size());
      if (auto user = store.token_user(detail::hmac_sha256_hex(cfg.token_secret, token), epoch_seconds(clock())))
        return user;
    }
    res.set_header("WWW-Authenticate", "Bearer");
    send_error(res, 401, "unauthorized", "missing, invalid or expired token");
    return std::nullopt;
  }

  json result_json(detail::Store::ResultRow row, const std::string& patient_id) {
    const std::string id = row.result.upload_id;
    PatientIdMap ids;
    ids.entries.emplace(id, patient_id);
    const auto r = reattach_patient_id(std::move(row.result), ids, id);
    return json{{"upload_id", r.upload_id},
                {"patient_id", *r.patient_id},
                {"status", "done"},
                {"label", std::string(to_string(r.label))},
                {"confidence", r.confidence},
                {"overlay_ref", r.overlay_ref},
                {"overlay_url", "/api/artifacts/" + r.overlay_ref},
                {"detections", json::parse(row.detections_json)},
                {"created_at", r.created_at}};
  }

  json upload_json(const UploadRecord& u) {
    json j{{"upload_id", u.upload_id},
           {"patient_id", u.patient_id},
           {"status", std::string(to_string(u.status))},
           {"created_at", u.created_at},
           {"result_url", "/api/scans/" + u.upload_id + "/result"}};
    if (u.status == UploadStatus::failed) j["reason"] = u.failure_reason;
    return j;
  }

  void routes() {
    // httplib's default turns on SO_REUSEPORT, which would let a second
    // instance share a port that is already serving.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    server.set_payload_max_length(cfg.max_upload_bytes + kMultipartOverhead);
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
      if (res.status == 413)
        send_error(res, 413, "payload_too_large", "request body exceeds the upload limit");
      else if (res.status == 404)
        send_error(res, 404, "not_found", "no such resource");
      else
        send_error(res, res.status, "error", httplib::status_message(res.status));
      return httplib::Server::HandlerResponse::Handled;
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      send_error(res, 500, "internal", msg);
    });

    server.Post("/api/login", [this](const httplib::Request& req, httplib::Response& res) { login(req, res); });
    server.Post("/api/scans", [this](const httplib::Request& req, httplib::Response& res) { upload(req, res); });
    server.Get(R"(/api/scans/([^/]+)/result)", [this](const httplib::Request& req, httplib::Response& res) {
      if (authenticate(req, res)) get_result(req.matches[1], res);
    });
    server.Get(R"(/api/scans/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authenticate(req, res)) return;
      const auto u = store.upload(req.matches[1]);
      if (!u) return send_error(res, 404, "not_found", "unknown upload_id");
      send_json(res, 200, upload_json(*u));
    });
    server.Delete(R"(/api/scans/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (authenticate(req, res)) remove(req.matches[1], res);
    });
    server.Get(R"(/api/patients/([^/]+)/results)", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authenticate(req, res)) return;
      const std::string pid = req.matches[1];
      json out = json::array();
      for (auto& row : store.results_for_patient(pid)) out.push_back(result_json(std::move(row), pid));
      send_json(res, 200, out);
    });
    server.Get(R"(/api/artifacts/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (authenticate(req, res)) artifact(req.matches[1], res);
    });
  }

  void login(const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) return send_error(res, 400, "bad_request", "body must be a JSON object");
    for (const char* f : {"username", "password"})
      if (!body.contains(f) || !body[f].is_string() || body[f].get<std::string>().empty())
        return send_error(res, 400, "bad_request", std::string(f) + " is required", f);
    const auto username = body["username"].get<std::string>();
    const auto digest = store.password_digest(username);
    const bool ok = verify_password(body["password"].get<std::string>(), digest ? *digest : dummy_digest());
    if (!digest || !ok) return send_error(res, 401, "invalid_credentials", "invalid username or password");
    const auto now = clock();
    store.purge_tokens(epoch_seconds(now));
    const std::string token = detail::to_hex(detail::random_bytes(32));
    const auto expires = now + std::chrono::seconds(cfg.token_ttl_seconds);
    store.put_token(detail::hmac_sha256_hex(cfg.token_secret, token), username, epoch_seconds(expires));
    send_json(res, 200,
              {{"token", token},
               {"token_type", "Bearer"},
               {"expires_in", cfg.token_ttl_seconds},
               {"expires_at", iso_time(expires)}});
  }

  void upload(const httplib::Request& req, httplib::Response& res) {
    if (!authenticate(req, res)) return;
    if (!req.is_multipart_form_data())
      return send_error(res, 400, "bad_request", "expected multipart/form-data with parts 'file' and 'patient_id'");
    if (!req.has_file("file")) return send_error(res, 400, "bad_request", "file is required", "file");
    const std::string patient_id = req.has_file("patient_id") ? trim(req.get_file_value("patient_id").content) : "";
    if (patient_id.empty()) return send_error(res, 400, "bad_request", "patient_id is required", "patient_id");
    if (patient_id.size() > kMaxPatientIdLength || !printable(patient_id))
      return send_error(res, 400, "bad_request", "patient_id must be printable ASCII, at most 128 characters",
                        "patient_id");
    const auto& content = req.get_file_value("file").content;
    if (content.size() > cfg.max_upload_bytes)
      return send_error(res, 413, "payload_too_large",
                        "file exceeds the upload limit of " + std::to_string(cfg.max_upload_bytes) + " bytes", "file");
    const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(content.data()), content.size());
    const bool png = looks_like_png(bytes);
    if (!png && !looks_like_jpeg(bytes))
      return send_error(res, 400, "unsupported_media", "unsupported media: expected a PNG or JPEG image", "file");
    try {
      validate_image(decode_image(bytes, "upload"), "upload");
    } catch (const Error& e) {
      return send_error(res, 400, "invalid_image", e.what(), "file");
    }

    UploadRecord rec;
    rec.upload_id = "u" + detail::to_hex(detail::random_bytes(12));
    rec.patient_id = patient_id;
    rec.stored_path = uploads_dir / (rec.upload_id + (png ? ".png" : ".jpg"));
    rec.status = UploadStatus::received;
    rec.created_at = now_iso();
    {
      std::ofstream out(rec.stored_path, std::ios::binary);
      out.write(content.data(), static_cast<std::streamsize>(content.size()));
      if (!out) return send_error(res, 500, "storage", "could not store the upload");
    }
    store.insert_upload(rec);
    enqueue(rec.upload_id);
    send_json(res, 202, upload_json(rec));
  }

  void get_result(const std::string& upload_id, httplib::Response& res) {
    const auto u = store.upload(upload_id);
    if (!u) return send_error(res, 404, "not_found", "unknown upload_id");
    switch (u->status) {
      case UploadStatus::received:
      case UploadStatus::processing: return send_json(res, 202, upload_json(*u));
      case UploadStatus::failed: {
        json body{{"code", "inference_failed"},
                  {"message", u->failure_reason},
                  {"upload_id", u->upload_id},
                  {"status", "failed"}};
        return send_json(res, 500, body);
      }
      case UploadStatus::done: break;
    }
    auto row = store.result(upload_id);
    if (!row) return send_error(res, 500, "internal", "result missing for a completed upload");
    send_json(res, 200, result_json(std::move(*row), u->patient_id));
  }

  void remove(const std::string& upload_id, httplib::Response& res) {
    const auto u = store.upload(upload_id);
    if (!u) return send_error(res, 404, "not_found", "unknown upload_id");
    if (u->status == UploadStatus::received || u->status == UploadStatus::processing)
      return send_error(res, 409, "conflict", "upload is still being processed");
    const auto row = store.result(upload_id);
    store.remove_upload(upload_id);
    std::error_code ec;
    fs::remove(u->stored_path, ec);
    if (row) fs::remove(artifacts_dir / row->result.overlay_ref, ec);
    res.status = 204;
  }

  void artifact(const std::string& name, httplib::Response& res) {
    static const std::regex safe(R"([A-Za-z0-9][A-Za-z0-9_.-]*)");
    if (!std::regex_match(name, safe) || name.find("..") != std::string::npos)
      return send_error(res, 400, "invalid_name", "artifact names may not contain path components", "name");
    if (!store.upload_for_artifact(name)) return send_error(res, 404, "not_found", "unknown artifact");
    const fs::path path = fs::weakly_canonical(artifacts_dir / name);
    if (!within(root, path)) return send_error(res, 400, "invalid_name", "artifact outside the storage root", "name");
    std::ifstream in(path, std::ios::binary);
    if (!in) return send_error(res, 404, "not_found", "artifact file missing");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    res.set_content(std::move(bytes), "image/png");
  }
};

Service::Service(ServiceConfig config, std::shared_ptr<const Predictor> predictor, Clock clock)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(predictor), std::move(clock))) {}

Service::~Service() { stop(); }

void Service::add_user(const std::string& username, const std::string& password) {
  if (username.empty() || password.empty()) throw ConfigError("username and password must be non-empty");
  impl_->store.put_user(username, hash_password(password));
}

int Service::start() {
  if (impl_->thread.joinable()) throw ConfigError("service already started");
  auto& s = impl_->server;
  const auto& c = impl_->cfg;
  int port = c.port;
  if (port == 0) {
    port = s.bind_to_any_port(c.host);
    if (port < 0) throw IoError("cannot bind " + c.host + " to a free port");
  } else if (!s.bind_to_port(c.host, port)) {
    throw IoError("cannot bind " + c.host + ":" + std::to_string(port));
  }
  impl_->thread = std::thread([&s] { s.listen_after_bind(); });
  s.wait_until_ready();
  return port;
}

void Service::run() {
  const auto& c = impl_->cfg;
  if (!impl_->server.bind_to_port(c.host, c.port)) throw IoError("cannot bind " + c.host + ":" + std::to_string(c.port));
  impl_->server.listen_after_bind();
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

void Service::drain() { impl_->queue.drain(); }

const ServiceConfig& Service::config() const noexcept { return impl_->cfg; }

std::shared_ptr<const Predictor> load_service_predictor(const fs::path& run_dir) {
  const auto config = read_run_config(run_dir);
  return std::make_shared<Model>(load_inference_model(run_dir, config));
}

void add_service_user(const ServiceConfig& config, const std::string& username, const std::string& password) {
  if (username.empty() || password.empty()) throw ConfigError("username and password must be non-empty");
  detail::Store store(config.effective_database_path());
  store.put_user(username, hash_password(password));
}

}  // namespace tumorseg
