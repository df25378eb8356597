#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <sqlite3.h>

#include "tumorseg/service.hpp"

namespace tumorseg::detail {

/// Accounts, tokens, uploads and results in one SQLite file. A single
/// connection guarded by a mutex serialises every statement.
class Store {
 public:
  explicit Store(const std::filesystem::path& path);
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  void put_user(const std::string& username, const std::string& password_digest);
  std::optional<std::string> password_digest(const std::string& username);

  void put_token(const std::string& token_hash, const std::string& username, std::int64_t expires_at);
  /// Username owning the token when it has not expired at `now`.
  std::optional<std::string> token_user(const std::string& token_hash, std::int64_t now);
  void purge_tokens(std::int64_t now);

  void insert_upload(const UploadRecord& upload);
  std::optional<UploadRecord> upload(const std::string& upload_id);
  std::vector<UploadRecord> uploads_with_status(UploadStatus status);
  /// Moves `from` -> `to`; false when the record is not in state `from`.
  bool transition(const std::string& upload_id, UploadStatus from, UploadStatus to, const std::string& reason = {});

  /// Stores the result and marks the upload done in one transaction.
  void complete(const DiagnosisResult& result, const std::string& detections_json);
  struct ResultRow {
    DiagnosisResult result;  // detections left empty
    std::string detections_json;
  };
  std::optional<ResultRow> result(const std::string& upload_id);
  /// Newest first.
  std::vector<ResultRow> results_for_patient(const std::string& patient_id);
  std::optional<std::string> upload_for_artifact(const std::string& artifact_name);
  /// Removes the upload and its result; false when unknown.
  bool remove_upload(const std::string& upload_id);

 private:
  void exec(const char* sql);

  std::mutex mu_;
  sqlite3* db_ = nullptr;
};

}  // namespace tumorseg::detail
