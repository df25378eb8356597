#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tumorseg/service.hpp"

namespace tumorseg {

using json = nlohmann::json;
namespace fs = std::filesystem;

void ServiceConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("service config: " + msg); };
  if (storage_root.empty()) fail("storage_root must be set");
  if (run_dir.empty()) fail("run_dir must be set");
  if (!(detection_threshold >= 0.0 && detection_threshold <= 1.0)) fail("detection_threshold must be in [0, 1]");
  if (token_secret.size() < 16) fail("token_secret must be at least 16 characters");
  if (port < 0 || port > 65535) fail("port must be in [0, 65535]");
  if (host.empty()) fail("host must be set");
  if (token_ttl_seconds <= 0) fail("token_ttl_seconds must be positive");
  if (max_upload_bytes == 0) fail("max_upload_bytes must be positive");
  for (const auto& u : users)
    if (u.username.empty() || u.password.empty()) fail("users need a username and a password");
}

fs::path ServiceConfig::effective_database_path() const {
  return database_path.empty() ? storage_root / "tumorseg.db" : database_path;
}

namespace {

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("service config: field '") + key + "' has the wrong type");
  }
}

void take_path(const json& j, const char* key, fs::path& out) {
  std::string s;
  if (!j.contains(key)) return;
  take(j, key, s);
  out = s;
}

template <typename T>
T parse_number(const std::string& name, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (!in || !in.eof()) throw ConfigError("environment " + name + "='" + text + "' is not a valid number");
  return v;
}

}  // namespace

ServiceConfig parse_service_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("service config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("service config: expected a JSON object");
  static const std::vector<std::string> known{"storage_root", "database_path",   "run_dir",          "detection_threshold",
                                              "token_secret", "host",            "port",             "token_ttl_seconds",
                                              "max_upload_bytes", "users"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("service config: unknown field '" + key + "'");
  ServiceConfig c;
  take_path(j, "storage_root", c.storage_root);
  take_path(j, "database_path", c.database_path);
  take_path(j, "run_dir", c.run_dir);
  take(j, "detection_threshold", c.detection_threshold);
  take(j, "token_secret", c.token_secret);
  take(j, "host", c.host);
  take(j, "port", c.port);
  take(j, "token_ttl_seconds", c.token_ttl_seconds);
  take(j, "max_upload_bytes", c.max_upload_bytes);
  if (j.contains("users")) {
    if (!j["users"].is_array()) throw ConfigError("service config: 'users' must be an array");
    for (const auto& u : j["users"]) {
      UserSeed seed;
      take(u, "username", seed.username);
      take(u, "password", seed.password);
      c.users.push_back(seed);
    }
  }
  return c;
}

ServiceConfig load_service_config(const std::optional<fs::path>& file,
                                  const std::function<std::optional<std::string>(const std::string&)>& getenv_fn) {
  ServiceConfig c;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("service config: cannot read " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    c = parse_service_config(ss.str());
  }
  auto env = [&](const char* suffix) { return getenv_fn(std::string("TUMORSEG_") + suffix); };
  if (auto v = env("STORAGE_ROOT")) c.storage_root = *v;
  if (auto v = env("DATABASE_PATH")) c.database_path = *v;
  if (auto v = env("RUN_DIR")) c.run_dir = *v;
  if (auto v = env("DETECTION_THRESHOLD")) c.detection_threshold = parse_number<double>("TUMORSEG_DETECTION_THRESHOLD", *v);
  if (auto v = env("TOKEN_SECRET")) c.token_secret = *v;
  if (auto v = env("HOST")) c.host = *v;
  if (auto v = env("PORT")) c.port = parse_number<int>("TUMORSEG_PORT", *v);
  if (auto v = env("TOKEN_TTL_SECONDS")) c.token_ttl_seconds = parse_number<std::int64_t>("TUMORSEG_TOKEN_TTL_SECONDS", *v);
  if (auto v = env("MAX_UPLOAD_BYTES")) c.max_upload_bytes = parse_number<std::size_t>("TUMORSEG_MAX_UPLOAD_BYTES", *v);
  c.validate();
  return c;
}

std::optional<std::string> process_env(const std::string& name) {
  const char* v = std::getenv(name.c_str());
  if (!v) return std::nullopt;
  return std::string(v);
}

}  // namespace tumorseg
