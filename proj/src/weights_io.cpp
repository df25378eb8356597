#include "weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace tumorseg::detail {
namespace {

static_assert(std::endian::native == std::endian::little, "weights files are written in host order");

constexpr char kMagic[4] = {'T', 'S', 'G', 'W'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError(path.string() + ": truncated weights file");
  return v;
}

std::string read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError(path.string() + ": not a weights file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw IoError(path.string() + ": unsupported weights version " + std::to_string(version));
  const auto meta_len = get<std::uint32_t>(in, path);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), meta_len);
  if (!in) throw IoError(path.string() + ": truncated weights header");
  return meta;
}

}  // namespace

void write_weights(const std::filesystem::path& path, const std::string& meta, const nn::ParamSet<float>& tensors) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string() + ": cannot open for writing");
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
      for (int d : t.shape) put<std::int32_t>(out, d);
      out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError(path.string() + ": write failed (disk full?)");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": " + ec.message());
}

WeightsFile read_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open weights file");
  WeightsFile wf;
  wf.meta = read_header(in, path);
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint16_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get<std::uint8_t>(in, path);
    std::vector<int> shape(rank);
    for (auto& d : shape) {
      d = get<std::int32_t>(in, path);
      if (d < 0) throw IoError(path.string() + ": negative dimension in tensor " + name);
    }
    nn::Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw IoError(path.string() + ": truncated data for tensor " + name);
    wf.tensors.emplace(std::move(name), std::move(t));
  }
  return wf;
}

std::string read_weights_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open weights file");
  return read_header(in, path);
}

}  // namespace tumorseg::detail
