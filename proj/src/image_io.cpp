#include <cstring>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "tumorseg/image.hpp"

namespace tumorseg {
namespace {

Image from_mat(const cv::Mat& src, const std::string& context) {
  cv::Mat m = src;
  if (m.depth() == CV_16U) m.convertTo(m, CV_8U, 1.0 / 257.0);
  if (m.depth() != CV_8U) throw IoError(context + ": unsupported pixel depth");
  switch (m.channels()) {
    case 1: break;
    case 3: cv::cvtColor(m, m, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(m, m, cv::COLOR_BGRA2RGB); break;
    default: throw IoError(context + ": unsupported channel count " + std::to_string(m.channels()));
  }
  if (!m.isContinuous()) m = m.clone();
  Image out(m.rows, m.cols, m.channels());
  std::memcpy(out.pixels.data(), m.data, out.pixels.size());
  return out;
}

cv::Mat to_mat(const Image& image) {
  validate_image(image);
  cv::Mat m(image.rows, image.cols, image.channels == 1 ? CV_8UC1 : CV_8UC3,
            const_cast<std::uint8_t*>(image.pixels.data()));
  cv::Mat out;
  if (image.channels == 3)
    cv::cvtColor(m, out, cv::COLOR_RGB2BGR);
  else
    out = m.clone();
  return out;
}

}  // namespace

void validate_image(const Image& image, const std::string& context) {
  if (image.channels != 1 && image.channels != 3)
    throw ValidationError(context + ": channels must be 1 or 3, got " + std::to_string(image.channels));
  if (image.rows < kMinImageSide || image.cols < kMinImageSide)
    throw ValidationError(context + ": image " + std::to_string(image.rows) + "x" + std::to_string(image.cols) +
                          " is smaller than the minimum side " + std::to_string(kMinImageSide));
  if (image.pixels.size() != static_cast<std::size_t>(image.rows) * image.cols * image.channels)
    throw ValidationError(context + ": pixel buffer size does not match dimensions");
}

Image to_three_channels(const Image& image) {
  if (image.channels == 3) return image;
  Image out(image.rows, image.cols, 3);
  for (std::size_t i = 0; i < image.pixels.size(); ++i)
    out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = image.pixels[i];
  return out;
}

bool looks_like_png(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t sig[] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  return b.size() >= sizeof(sig) && std::memcmp(b.data(), sig, sizeof(sig)) == 0;
}

bool looks_like_jpeg(std::span<const std::uint8_t> b) {
  return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF;
}

Image decode_image(std::span<const std::uint8_t> bytes, const std::string& context) {
  if (!looks_like_png(bytes) && !looks_like_jpeg(bytes))
    throw IoError(context + ": not a PNG or JPEG file");
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat m;
  try {
    m = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw IoError(context + ": cannot decode image: " + e.what());
  }
  if (m.empty()) throw IoError(context + ": cannot decode image");
  return from_mat(m, context);
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open image");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_image(bytes, path.string());
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_mat(image), out)) throw IoError("PNG encoding failed");
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IoError(path.string() + ": cannot read mask");
  BinaryMask mask(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) mask.at(r, c) = m.at<std::uint8_t>(r, c) != 0;
  return mask;
}

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
  cv::Mat m(mask.rows, mask.cols, CV_8UC1);
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c) m.at<std::uint8_t>(r, c) = mask.at(r, c) ? 255 : 0;
  if (!cv::imwrite(path.string(), m)) throw IoError(path.string() + ": cannot write mask");
}

}  // namespace tumorseg
