#include "store.hpp"

namespace tumorseg::detail {

namespace fs = std::filesystem;

namespace {

// RAII prepared statement.
class Stmt {
 public:
  Stmt(sqlite3* db, const char* sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql, -1, &s_, nullptr) != SQLITE_OK)
      throw IoError(std::string("database: ") + sqlite3_errmsg(db));
  }
  ~Stmt() { sqlite3_finalize(s_); }
  Stmt(const Stmt&) = delete;
  Stmt& operator=(const Stmt&) = delete;

  Stmt& bind(int i, const std::string& v) {
    check(sqlite3_bind_text(s_, i, v.c_str(), static_cast<int>(v.size()), SQLITE_TRANSIENT));
    return *this;
  }
  Stmt& bind(int i, std::int64_t v) {
    check(sqlite3_bind_int64(s_, i, v));
    return *this;
  }
  Stmt& bind(int i, double v) {
    check(sqlite3_bind_double(s_, i, v));
    return *this;
  }
  /// True while a row is available.
  bool step() {
    const int rc = sqlite3_step(s_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    throw IoError(std::string("database: ") + sqlite3_errmsg(db_));
  }
  std::string text(int col) const {
    const auto* p = sqlite3_column_text(s_, col);
    return p ? reinterpret_cast<const char*>(p) : "";
  }
  std::int64_t integer(int col) const { return sqlite3_column_int64(s_, col); }
  double real(int col) const { return sqlite3_column_double(s_, col); }

 private:
  void check(int rc) {
    if (rc != SQLITE_OK) throw IoError(std::string("database: ") + sqlite3_errmsg(db_));
  }
  sqlite3* db_;
  sqlite3_stmt* s_ = nullptr;
};

UploadRecord read_upload(const Stmt& s) {
  UploadRecord u;
  u.upload_id = s.text(0);
  u.patient_id = s.text(1);
  u.stored_path = s.text(2);
  u.status = parse_upload_status(s.text(3));
  u.failure_reason = s.text(4);
  u.created_at = s.text(5);
  return u;
}

Store::ResultRow read_result(const Stmt& s) {
  Store::ResultRow row;
  row.result.upload_id = s.text(0);
  row.result.label = s.text(1) == "tumor" ? Label::tumor : Label::no_tumor;
  row.result.confidence = s.real(2);
  row.result.overlay_ref = s.text(3);
  row.detections_json = s.text(4);
  row.result.created_at = s.text(5);
  return row;
}

constexpr const char* kUploadCols = "upload_id, patient_id, stored_path, status, reason, created_at";
// Results carry no patient_id; it lives only on the upload row.
constexpr const char* kResultCols = "r.upload_id, r.label, r.confidence, r.overlay_name, r.detections, r.created_at";

}  // namespace

Store::Store(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  if (sqlite3_open_v2(path.c_str(), &db_, SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE | SQLITE_OPEN_FULLMUTEX, nullptr) !=
      SQLITE_OK) {
    const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
    sqlite3_close(db_);
    throw IoError("database " + path.string() + ": " + msg);
  }
  sqlite3_busy_timeout(db_, 5000);
  exec("PRAGMA foreign_keys = ON");
  exec("CREATE TABLE IF NOT EXISTS users (username TEXT PRIMARY KEY, password_digest TEXT NOT NULL, "
       "role TEXT NOT NULL DEFAULT 'clinician')");
  exec("CREATE TABLE IF NOT EXISTS tokens (token_hash TEXT PRIMARY KEY, username TEXT NOT NULL, "
       "expires_at INTEGER NOT NULL)");
  exec("CREATE TABLE IF NOT EXISTS uploads (seq INTEGER PRIMARY KEY AUTOINCREMENT, upload_id TEXT UNIQUE NOT NULL, "
       "patient_id TEXT NOT NULL, stored_path TEXT NOT NULL, status TEXT NOT NULL, reason TEXT NOT NULL DEFAULT '', "
       "created_at TEXT NOT NULL)");
  exec("CREATE TABLE IF NOT EXISTS results (seq INTEGER PRIMARY KEY AUTOINCREMENT, upload_id TEXT UNIQUE NOT NULL "
       "REFERENCES uploads(upload_id) ON DELETE CASCADE, label TEXT NOT NULL, "
       "confidence REAL NOT NULL, overlay_name TEXT NOT NULL, detections TEXT NOT NULL, created_at TEXT NOT NULL)");
  exec("CREATE INDEX IF NOT EXISTS uploads_by_patient ON uploads(patient_id)");
}

Store::~Store() { sqlite3_close(db_); }

void Store::exec(const char* sql) {
  char* err = nullptr;
  if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
    const std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    throw IoError("database: " + msg);
  }
}

void Store::put_user(const std::string& username, const std::string& digest) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "INSERT INTO users(username, password_digest) VALUES(?, ?) "
              "ON CONFLICT(username) DO UPDATE SET password_digest = excluded.password_digest");
  s.bind(1, username).bind(2, digest).step();
}

std::optional<std::string> Store::password_digest(const std::string& username) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "SELECT password_digest FROM users WHERE username = ?");
  s.bind(1, username);
  if (!s.step()) return std::nullopt;
  return s.text(0);
}

void Store::put_token(const std::string& token_hash, const std::string& username, std::int64_t expires_at) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "INSERT INTO tokens(token_hash, username, expires_at) VALUES(?, ?, ?)");
  s.bind(1, token_hash).bind(2, username).bind(3, expires_at).step();
}

std::optional<std::string> Store::token_user(const std::string& token_hash, std::int64_t now) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "SELECT username FROM tokens WHERE token_hash = ? AND expires_at > ?");
  s.bind(1, token_hash).bind(2, now);
  if (!s.step()) return std::nullopt;
  return s.text(0);
}

void Store::purge_tokens(std::int64_t now) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "DELETE FROM tokens WHERE expires_at <= ?");
  s.bind(1, now).step();
}

void Store::insert_upload(const UploadRecord& u) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "INSERT INTO uploads(upload_id, patient_id, stored_path, status, reason, created_at) "
              "VALUES(?, ?, ?, ?, ?, ?)");
  s.bind(1, u.upload_id)
      .bind(2, u.patient_id)
      .bind(3, u.stored_path.string())
      .bind(4, std::string(to_string(u.status)))
      .bind(5, u.failure_reason)
      .bind(6, u.created_at)
      .step();
}

std::optional<UploadRecord> Store::upload(const std::string& upload_id) {
  std::lock_guard lock(mu_);
  Stmt s(db_, (std::string("SELECT ") + kUploadCols + " FROM uploads WHERE upload_id = ?").c_str());
  s.bind(1, upload_id);
  if (!s.step()) return std::nullopt;
  return read_upload(s);
}

std::vector<UploadRecord> Store::uploads_with_status(UploadStatus status) {
  std::lock_guard lock(mu_);
  Stmt s(db_, (std::string("SELECT ") + kUploadCols + " FROM uploads WHERE status = ? ORDER BY seq").c_str());
  s.bind(1, std::string(to_string(status)));
  std::vector<UploadRecord> out;
  while (s.step()) out.push_back(read_upload(s));
  return out;
}

bool Store::transition(const std::string& upload_id, UploadStatus from, UploadStatus to, const std::string& reason) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "UPDATE uploads SET status = ?, reason = ? WHERE upload_id = ? AND status = ?");
  s.bind(1, std::string(to_string(to))).bind(2, reason).bind(3, upload_id).bind(4, std::string(to_string(from))).step();
  return sqlite3_changes(db_) == 1;
}

void Store::complete(const DiagnosisResult& r, const std::string& detections_json) {
  std::lock_guard lock(mu_);
  exec("BEGIN IMMEDIATE");
  try {
    Stmt u(db_, "UPDATE uploads SET status = 'done' WHERE upload_id = ? AND status = 'processing'");
    u.bind(1, r.upload_id).step();
    if (sqlite3_changes(db_) != 1) throw Error("upload " + r.upload_id + " is not processing");
    Stmt s(db_, "INSERT INTO results(upload_id, label, confidence, overlay_name, detections, created_at) "
                "VALUES(?, ?, ?, ?, ?, ?)");
    s.bind(1, r.upload_id)
        .bind(2, std::string(to_string(r.label)))
        .bind(3, r.confidence)
        .bind(4, r.overlay_ref)
        .bind(5, detections_json)
        .bind(6, r.created_at)
        .step();
    exec("COMMIT");
  } catch (...) {
    exec("ROLLBACK");
    throw;
  }
}

std::optional<Store::ResultRow> Store::result(const std::string& upload_id) {
  std::lock_guard lock(mu_);
  Stmt s(db_, (std::string("SELECT ") + kResultCols + " FROM results r WHERE r.upload_id = ?").c_str());
  s.bind(1, upload_id);
  if (!s.step()) return std::nullopt;
  return read_result(s);
}

std::vector<Store::ResultRow> Store::results_for_patient(const std::string& patient_id) {
  std::lock_guard lock(mu_);
  Stmt s(db_, (std::string("SELECT ") + kResultCols +
               " FROM results r JOIN uploads u ON u.upload_id = r.upload_id WHERE u.patient_id = ? "
                             "ORDER BY r.created_at DESC, r.seq DESC")
                  .c_str());
  s.bind(1, patient_id);
  std::vector<ResultRow> out;
  while (s.step()) out.push_back(read_result(s));
  return out;
}

std::optional<std::string> Store::upload_for_artifact(const std::string& artifact_name) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "SELECT upload_id FROM results WHERE overlay_name = ?");
  s.bind(1, artifact_name);
  if (!s.step()) return std::nullopt;
  return s.text(0);
}

bool Store::remove_upload(const std::string& upload_id) {
  std::lock_guard lock(mu_);
  Stmt s(db_, "DELETE FROM uploads WHERE upload_id = ?");
  s.bind(1, upload_id).step();
  return sqlite3_changes(db_) == 1;
}

}  // namespace tumorseg::detail
