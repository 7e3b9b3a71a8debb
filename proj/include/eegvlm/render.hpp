#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eegvlm/preprocess.hpp"

namespace eegvlm::render {

struct RenderConfig {
  int width_px = 224;
  int height_px = 224;
  double amplitude_range_uv = 150.0;  // symmetric clip bound
  int line_width_px = 1;
  int margins_px = 0;
  std::array<std::uint8_t, 3> background{255, 255, 255};
  std::array<std::uint8_t, 3> trace_color{0, 0, 0};

  void validate() const;  // throws InvalidSpec
  std::string digest() const;
};

struct Provenance {
  std::string source_id;
  int epoch_index = 0;
  std::string config_digest;
};

struct EpochImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, H x W x 3
  Provenance provenance;

  std::uint8_t at(int y, int x, int channel) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + channel];
  }
  bool is_background(int y, int x, const RenderConfig& cfg) const {
    return at(y, x, 0) == cfg.background[0] && at(y, x, 1) == cfg.background[1] &&
           at(y, x, 2) == cfg.background[2];
  }
};

// Vertical pixel coordinate (pixel-center units, 0.5 = center of the top row)
// that an amplitude maps to after clipping.
double amplitude_to_y(double amplitude_uv, const RenderConfig& cfg);
double sample_to_x(std::size_t index, std::size_t count, const RenderConfig& cfg);

// Throws DegenerateEpoch for fewer than 2 samples.
EpochImage render_epoch(const preprocess::LabeledEpoch& epoch, const RenderConfig& cfg);
EpochImage render_samples(std::span<const double> samples, const RenderConfig& cfg);

std::string image_filename(const std::string& source_id, int epoch_index, Stage stage);

std::vector<std::uint8_t> encode_png(const EpochImage& image);
EpochImage decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const EpochImage& image);
EpochImage read_png(const std::filesystem::path& path);

}  // namespace eegvlm::render
