#include "eegvlm/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "eegvlm/error.hpp"

namespace eegvlm::preprocess {

std::complex<double> BiquadCoefficients::response(double freq_hz, double sampling_rate_hz) const {
  const double w = 2.0 * std::numbers::pi * freq_hz / sampling_rate_hz;
  const std::complex<double> z1 = std::polar(1.0, -w);
  const std::complex<double> z2 = z1 * z1;
  return (b[0] + b[1] * z1 + b[2] * z2) / (a[0] + a[1] * z1 + a[2] * z2);
}

double BiquadCoefficients::pole_radius() const {
  // z^2 + a1 z + a2 = 0
  const std::complex<double> disc = std::sqrt(std::complex<double>(a[1] * a[1] - 4.0 * a[2]));
  const std::complex<double> p1 = (-a[1] + disc) / 2.0;
  const std::complex<double> p2 = (-a[1] - disc) / 2.0;
  return std::max(std::abs(p1), std::abs(p2));
}

BiquadCoefficients design_bandpass(const FilterSpec& spec) {
  const double fs = spec.sampling_rate_hz;
  if (spec.analog_order != 1) {
    throw Error(ErrorCode::InvalidSpec, "only the first-order analog prototype is supported");
  }
  if (!(fs > 0) || !(spec.low_cut_hz > 0) || !(spec.low_cut_hz < spec.high_cut_hz) ||
      !(spec.high_cut_hz < fs / 2)) {
    throw Error(ErrorCode::InvalidSpec, "require 0 < low < high < fs/2");
  }
  const double wl = 2.0 * std::numbers::pi * spec.low_cut_hz;
  const double wh = 2.0 * std::numbers::pi * spec.high_cut_hz;
  const double w0 = std::sqrt(wl * wh);
  const double bw = wh - wl;
  // s = k (z - 1) / (z + 1), with k chosen so analog w0 maps onto digital w0.
  const double k = w0 / std::tan(w0 / (2.0 * fs));
  const double k2 = k * k;
  const double w02 = w0 * w0;
  const double a0 = k2 + bw * k + w02;
  BiquadCoefficients c;
  c.b = {bw * k / a0, 0.0, -bw * k / a0};
  c.a = {1.0, (2.0 * w02 - 2.0 * k2) / a0, (k2 - bw * k + w02) / a0};
  return c;
}

std::vector<double> lfilter(std::span<const double> signal, const BiquadCoefficients& c,
                            std::array<double, 2> initial) {
  std::vector<double> y(signal.size());
  double z1 = initial[0];
  double z2 = initial[1];
  for (std::size_t i = 0; i < signal.size(); ++i) {
    const double x = signal[i];
    const double out = c.b[0] * x + z1;
    z1 = c.b[1] * x - c.a[1] * out + z2;
    z2 = c.b[2] * x - c.a[2] * out;
    y[i] = out;
  }
  return y;
}

namespace {

std::array<double, 2> steady_state(const BiquadCoefficients& c, double level) {
  const double y = (c.b[0] + c.b[1] + c.b[2]) / (c.a[0] + c.a[1] + c.a[2]);
  return {(y - c.b[0]) * level, (c.b[2] - c.a[2] * y) * level};
}

std::size_t pad_length(const BiquadCoefficients& c, std::size_t n) {
  const double r = c.pole_radius();
  const double tau = r > 0.0 ? -1.0 / std::log(r) : 1.0;
  const auto pad = static_cast<std::size_t>(std::ceil(3.0 * tau));
  return std::min(std::max<std::size_t>(pad, 6), n - 1);
}

}  // namespace

std::vector<double> apply_filter(std::span<const double> signal, const BiquadCoefficients& coeffs,
                                 FilterMode mode) {
  if (signal.empty()) throw Error(ErrorCode::EmptySignal, "cannot filter an empty signal");
  if (mode == FilterMode::Causal) return lfilter(signal, coeffs);

  const std::size_t n = signal.size();
  const std::size_t pad = n > 1 ? pad_length(coeffs, n) : 0;
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * signal[0] - signal[i]);
  ext.insert(ext.end(), signal.begin(), signal.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * signal[n - 1] - signal[n - 1 - i]);

  std::vector<double> y = lfilter(ext, coeffs, steady_state(coeffs, ext.front()));
  std::reverse(y.begin(), y.end());
  y = lfilter(y, coeffs, steady_state(coeffs, y.front()));
  std::reverse(y.begin(), y.end());
  return std::vector<double>(y.begin() + static_cast<long>(pad),
                             y.begin() + static_cast<long>(pad + n));
}

int samples_per_epoch(double sampling_rate_hz) {
  return static_cast<int>(std::lround(kEpochSeconds * sampling_rate_hz));
}

std::vector<LabeledEpoch> segment_epochs(std::span<const double> signal, double sampling_rate_hz,
                                         std::span<const edf::EpochLabel> labels,
                                         const std::string& source_id) {
  std::vector<LabeledEpoch> out;
  const int len = samples_per_epoch(sampling_rate_hz);
  if (len <= 0) return out;
  const std::size_t windows = std::min(signal.size() / len, labels.size());
  for (std::size_t i = 0; i < windows; ++i) {
    if (!labels[i].has_value()) continue;
    LabeledEpoch e;
    e.samples.assign(signal.begin() + static_cast<long>(i * len),
                     signal.begin() + static_cast<long>((i + 1) * len));
    e.sampling_rate_hz = sampling_rate_hz;
    e.stage = *labels[i];
    e.source_id = source_id;
    e.epoch_index = static_cast<int>(i);
    out.push_back(std::move(e));
  }
  return out;
}

void write_epoch_store(const std::filesystem::path& dir, const std::string& source_id,
                       double sampling_rate_hz, std::span<const LabeledEpoch> epochs) {
  const auto rec_dir = dir / source_id;
  std::filesystem::create_directories(rec_dir);
  std::ofstream manifest(rec_dir / "manifest.tsv");
  if (!manifest) throw Error(ErrorCode::IoFailure, "cannot write manifest in " + rec_dir.string());
  for (const auto& e : epochs) {
    std::ofstream bin(rec_dir / (std::to_string(e.epoch_index) + ".f32"), std::ios::binary);
    if (!bin) throw Error(ErrorCode::IoFailure, "cannot write epoch file in " + rec_dir.string());
    for (double v : e.samples) {
      const float f = static_cast<float>(v);
      std::uint32_t u = 0;
      std::memcpy(&u, &f, sizeof(u));
      const char bytes[4] = {static_cast<char>(u & 0xFF), static_cast<char>((u >> 8) & 0xFF),
                             static_cast<char>((u >> 16) & 0xFF), static_cast<char>(u >> 24)};
      bin.write(bytes, 4);
    }
    manifest << source_id << '\t' << e.epoch_index << '\t' << stage_name(e.stage) << '\n';
  }
  std::ofstream rate(rec_dir / "rate.txt");
  rate.precision(17);
  rate << sampling_rate_hz << '\n';
}

std::vector<LabeledEpoch> read_epoch_store(const std::filesystem::path& dir,
                                           const std::string& source_id) {
  const auto rec_dir = dir / source_id;
  std::ifstream rate_in(rec_dir / "rate.txt");
  std::ifstream manifest(rec_dir / "manifest.tsv");
  double rate = 0.0;
  if (!rate_in || !manifest || !(rate_in >> rate)) {
    throw Error(ErrorCode::MissingUpstream, "no epoch store at " + rec_dir.string());
  }
  std::vector<LabeledEpoch> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string sid, index, stage;
    std::getline(ls, sid, '\t');
    std::getline(ls, index, '\t');
    std::getline(ls, stage, '\t');
    const auto parsed = parse_stage_name(stage);
    if (!parsed) throw Error(ErrorCode::UnknownLabel, "bad stage in manifest: " + stage);
    LabeledEpoch e;
    e.source_id = sid;
    e.epoch_index = std::stoi(index);
    e.stage = *parsed;
    e.sampling_rate_hz = rate;
    std::ifstream bin(rec_dir / (index + ".f32"), std::ios::binary);
    if (!bin) throw Error(ErrorCode::MissingUpstream, "missing epoch file " + index);
    unsigned char b[4];
    while (bin.read(reinterpret_cast<char*>(b), 4)) {
      const std::uint32_t u = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      float f = 0.0f;
      std::memcpy(&f, &u, sizeof(f));
      e.samples.push_back(f);
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace eegvlm::preprocess
