#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include "crypto_util.hpp"
#include "tumorseg/service.hpp"

namespace tumorseg {

namespace {

constexpr int kIterations = 60000;
constexpr std::size_t kSaltBytes = 16;
constexpr std::size_t kHashBytes = 32;

std::vector<unsigned char> pbkdf2(const std::string& password, const std::vector<unsigned char>& salt, int iterations) {
  std::vector<unsigned char> out(kHashBytes);
  if (PKCS5_PBKDF2_HMAC(password.data(), static_cast<int>(password.size()), salt.data(), static_cast<int>(salt.size()),
                        iterations, EVP_sha256(), static_cast<int>(out.size()), out.data()) != 1)
    throw Error("pbkdf2 failed");
  return out;
}

}  // namespace

std::string hash_password(const std::string& password) {
  const auto salt = detail::random_bytes(kSaltBytes);
  return "pbkdf2-sha256$" + std::to_string(kIterations) + "$" + detail::to_hex(salt) + "$" +
         detail::to_hex(pbkdf2(password, salt, kIterations));
}

bool verify_password(const std::string& password, const std::string& digest) {
  // scheme$iterations$salt$hash
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    const auto pos = digest.find('$', start);
    parts.push_back(digest.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (parts.size() != 4 || parts[0] != "pbkdf2-sha256") return false;
  int iterations = 0;
  try {
    iterations = std::stoi(parts[1]);
  } catch (const std::logic_error&) {
    return false;
  }
  const auto salt = detail::from_hex(parts[2]);
  const auto expected = detail::from_hex(parts[3]);
  if (iterations <= 0 || salt.empty() || expected.size() != kHashBytes) return false;
  const auto got = pbkdf2(password, salt, iterations);
  return CRYPTO_memcmp(got.data(), expected.data(), kHashBytes) == 0;
}

}  // namespace tumorseg
