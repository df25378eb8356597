#pragma once

// REST service: clinicians log in, upload a scan for a patient and poll for
// the diagnosis and overlay. Inference runs on a single worker thread; results
// persist in SQLite and the storage root.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tumorseg/data.hpp"
#include "tumorseg/detection.hpp"

namespace tumorseg {

inline constexpr std::size_t kDefaultMaxUploadBytes = 16u * 1024u * 1024u;

struct UserSeed {
  std::string username;
  std::string password;
};

struct ServiceConfig {
  std::filesystem::path storage_root = "storage";
  std::filesystem::path database_path;  // empty: <storage_root>/tumorseg.db
  std::filesystem::path run_dir = "run";
  double detection_threshold = 0.5;
  std::string token_secret;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::int64_t token_ttl_seconds = 3600;
  std::size_t max_upload_bytes = kDefaultMaxUploadBytes;
  std::vector<UserSeed> users;  // created at startup when absent

  void validate() const;
  std::filesystem::path effective_database_path() const;
};

/// Parses a JSON config document. Unknown keys are rejected.
ServiceConfig parse_service_config(const std::string& json_text);

/// Reads `file` (if given) and then applies TUMORSEG_* overrides looked up with
/// `getenv_fn`: STORAGE_ROOT, DATABASE_PATH, RUN_DIR, DETECTION_THRESHOLD,
/// TOKEN_SECRET, HOST, PORT, TOKEN_TTL_SECONDS, MAX_UPLOAD_BYTES.
ServiceConfig load_service_config(const std::optional<std::filesystem::path>& file,
                                  const std::function<std::optional<std::string>(const std::string&)>& getenv_fn);

/// Environment lookup through std::getenv.
std::optional<std::string> process_env(const std::string& name);

// Credentials ------------------------------------------------------------------

/// "pbkdf2-sha256$<iterations>$<salt hex>$<hash hex>"
std::string hash_password(const std::string& password);
bool verify_password(const std::string& password, const std::string& digest);

// Domain records ----------------------------------------------------------------

enum class UploadStatus { received, processing, done, failed };
std::string_view to_string(UploadStatus s);
UploadStatus parse_upload_status(std::string_view text);

struct UploadRecord {
  std::string upload_id;
  std::string patient_id;
  std::filesystem::path stored_path;
  UploadStatus status = UploadStatus::received;
  std::string failure_reason;
  std::string created_at;
};

struct DiagnosisResult {
  std::string upload_id;
  std::optional<std::string> patient_id;
  Label label = Label::no_tumor;
  double confidence = 1.0;
  std::string overlay_ref;  // artifact name, served under /api/artifacts/
  std::vector<Detection> detections;
  std::string created_at;
};

// Service -------------------------------------------------------------------

using Clock = std::function<std::chrono::system_clock::time_point()>;

class Service {
 public:
  /// Opens (or creates) the database and storage root, seeds configured users
  /// and starts the inference worker around `predictor`.
  Service(ServiceConfig config, std::shared_ptr<const Predictor> predictor, Clock clock = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Creates or replaces an account.
  void add_user(const std::string& username, const std::string& password);

  /// Binds host:port (0 picks a free port) and serves on a background thread.
  /// Returns the bound port; throws IoError when the bind fails.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();

  /// Blocks until every queued inference job has finished.
  void drain();

  const ServiceConfig& config() const noexcept;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Loads the newest checkpoint of `run_dir` using its recorded config.
std::shared_ptr<const Predictor> load_service_predictor(const std::filesystem::path& run_dir);

/// Adds or replaces a user directly in the service database.
void add_service_user(const ServiceConfig& config, const std::string& username, const std::string& password);

}  // namespace tumorseg
