#pragma once

#include <array>
#include <complex>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eegvlm/edf.hpp"
#include "eegvlm/stage.hpp"

namespace eegvlm::preprocess {

inline constexpr double kEpochSeconds = 30.0;

struct FilterSpec {
  int analog_order = 1;
  double low_cut_hz = 0.5;
  double high_cut_hz = 35.0;
  double sampling_rate_hz = 100.0;
};

struct BiquadCoefficients {
  std::array<double, 3> b{};
  std::array<double, 3> a{1.0, 0.0, 0.0};

  std::complex<double> response(double freq_hz, double sampling_rate_hz) const;
  double gain(double freq_hz, double sampling_rate_hz) const {
    return std::abs(response(freq_hz, sampling_rate_hz));
  }
  // Largest pole magnitude; < 1 for a stable filter.
  double pole_radius() const;
};

// First-order analog Butterworth band-pass prototype realized as one digital
// biquad via the bilinear transform, pre-warped at the geometric band center
// so the passband peak lands on sqrt(low * high). Throws InvalidSpec.
BiquadCoefficients design_bandpass(const FilterSpec& spec);

enum class FilterMode { ZeroPhase, Causal };

// ZeroPhase: forward pass, reverse, forward again, reverse, with odd
// reflection padding of three time constants and steady-state initial
// conditions. Causal: a single forward pass from rest. Throws EmptySignal.
std::vector<double> apply_filter(std::span<const double> signal,
                                 const BiquadCoefficients& coeffs,
                                 FilterMode mode = FilterMode::ZeroPhase);

// Direct-form II transposed single pass. `initial` is the two-element state.
std::vector<double> lfilter(std::span<const double> signal, const BiquadCoefficients& coeffs,
                            std::array<double, 2> initial = {0.0, 0.0});

struct LabeledEpoch {
  std::vector<double> samples;
  double sampling_rate_hz = 0.0;
  Stage stage = Stage::Wake;
  std::string source_id;
  int epoch_index = 0;
};

int samples_per_epoch(double sampling_rate_hz);

// Non-overlapping 30 s windows paired with labels; stops at the shorter of
// the two, drops the incomplete tail and excluded epochs.
std::vector<LabeledEpoch> segment_epochs(std::span<const double> signal,
                                         double sampling_rate_hz,
                                         std::span<const edf::EpochLabel> labels,
                                         const std::string& source_id = "");

// Epoch store: <dir>/<source_id>/<epoch_index>.f32 (little-endian float32)
// plus <dir>/<source_id>/manifest.tsv with "source_id\tepoch_index\tstage"
// lines and a rate.txt holding the sampling rate.
void write_epoch_store(const std::filesystem::path& dir, const std::string& source_id,
                       double sampling_rate_hz, std::span<const LabeledEpoch> epochs);
std::vector<LabeledEpoch> read_epoch_store(const std::filesystem::path& dir,
                                           const std::string& source_id);

}  // namespace eegvlm::preprocess
