#include "eegvlm/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "eegvlm/digest.hpp"
#include "eegvlm/error.hpp"

namespace eegvlm::render {

void RenderConfig::validate() const {
  if (width_px < 32 || height_px < 32) {
    throw Error(ErrorCode::InvalidSpec, "image must be at least 32x32");
  }
  if (!(amplitude_range_uv > 0)) throw Error(ErrorCode::InvalidSpec, "amplitude range must be > 0");
  if (line_width_px < 1) throw Error(ErrorCode::InvalidSpec, "line width must be >= 1");
  if (margins_px < 0 || 2 * margins_px >= std::min(width_px, height_px) - 1) {
    throw Error(ErrorCode::InvalidSpec, "margins leave no drawing area");
  }
}

std::string RenderConfig::digest() const {
  std::ostringstream os;
  os.precision(17);
  os << "render-v1 " << width_px << 'x' << height_px << " range=" << amplitude_range_uv
     << " lw=" << line_width_px << " margin=" << margins_px << " bg=" << int(background[0]) << ','
     << int(background[1]) << ',' << int(background[2]) << " fg=" << int(trace_color[0]) << ','
     << int(trace_color[1]) << ',' << int(trace_color[2]);
  return sha256_hex(os.str()).substr(0, 16);
}

double amplitude_to_y(double amplitude_uv, const RenderConfig& cfg) {
  const double r = cfg.amplitude_range_uv;
  const double v = std::clamp(amplitude_uv, -r, r);
  const double top = cfg.margins_px + 0.5;
  const double bottom = cfg.height_px - cfg.margins_px - 0.5;
  return top + (r - v) / (2.0 * r) * (bottom - top);
}

double sample_to_x(std::size_t index, std::size_t count, const RenderConfig& cfg) {
  const double left = cfg.margins_px + 0.5;
  const double right = cfg.width_px - cfg.margins_px - 0.5;
  return left + static_cast<double>(index) / static_cast<double>(count - 1) * (right - left);
}

namespace {

double segment_distance(double px, double py, double x0, double y0, double x1, double y1) {
  const double dx = x1 - x0;
  const double dy = y1 - y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = x0 + t * dx - px;
  const double ey = y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

EpochImage render_samples(std::span<const double> samples, const RenderConfig& cfg) {
  cfg.validate();
  if (samples.size() < 2) throw Error(ErrorCode::DegenerateEpoch, "need at least 2 samples");
  const int w = cfg.width_px;
  const int h = cfg.height_px;
  std::vector<float> coverage(static_cast<std::size_t>(w) * h, 0.0f);
  const double half = cfg.line_width_px / 2.0;
  const double reach = half + 0.5;

  double prev_x = sample_to_x(0, samples.size(), cfg);
  double prev_y = amplitude_to_y(samples[0], cfg);
  for (std::size_t i = 1; i < samples.size(); ++i) {
    const double x = sample_to_x(i, samples.size(), cfg);
    const double y = amplitude_to_y(samples[i], cfg);
    const int col0 = std::max(0, static_cast<int>(std::floor(std::min(prev_x, x) - reach)));
    const int col1 = std::min(w - 1, static_cast<int>(std::floor(std::max(prev_x, x) + reach)));
    const int row0 = std::max(0, static_cast<int>(std::floor(std::min(prev_y, y) - reach)));
    const int row1 = std::min(h - 1, static_cast<int>(std::floor(std::max(prev_y, y) + reach)));
    for (int r = row0; r <= row1; ++r) {
      for (int c = col0; c <= col1; ++c) {
        const double d = segment_distance(c + 0.5, r + 0.5, prev_x, prev_y, x, y);
        const double cov = std::clamp(reach - d, 0.0, 1.0);
        float& slot = coverage[static_cast<std::size_t>(r) * w + c];
        slot = std::max(slot, static_cast<float>(cov));
      }
    }
    prev_x = x;
    prev_y = y;
  }

  EpochImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t p = 0; p < coverage.size(); ++p) {
    for (int ch = 0; ch < 3; ++ch) {
      const double bg = cfg.background[ch];
      const double fg = cfg.trace_color[ch];
      img.pixels[p * 3 + ch] =
          static_cast<std::uint8_t>(std::lround(bg + coverage[p] * (fg - bg)));
    }
  }
  img.provenance.config_digest = cfg.digest();
  return img;
}

EpochImage render_epoch(const preprocess::LabeledEpoch& epoch, const RenderConfig& cfg) {
  EpochImage img = render_samples(epoch.samples, cfg);
  img.provenance.source_id = epoch.source_id;
  img.provenance.epoch_index = epoch.epoch_index;
  return img;
}

std::string image_filename(const std::string& source_id, int epoch_index, Stage stage) {
  return source_id + "_" + std::to_string(epoch_index) + "_" + std::string(stage_name(stage)) + ".png";
}

std::vector<std::uint8_t> encode_png(const EpochImage& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::IoFailure, std::string("png size query failed: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::IoFailure, std::string("png encode failed: ") + png.message);
  }
  out.resize(size);
  return out;
}

EpochImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::IoFailure, std::string("png decode failed: ") + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  EpochImage img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  img.pixels.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::IoFailure, std::string("png decode failed: ") + png.message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const EpochImage& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

EpochImage read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingUpstream, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

}  // namespace eegvlm::render
