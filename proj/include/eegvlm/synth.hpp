#pragma once

// Synthetic single-channel sleep EEG with stage-typical rhythms, written as
// an EDF PSG file plus an EDF+ hypnogram for pipeline fixtures.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "eegvlm/stage.hpp"

namespace eegvlm::synth {

// One 30 s epoch of a pure stage rhythm in microvolts:
//   Wake  ~10 Hz alpha
//   N1    mixed 5 / 15 Hz
//   N2    13 Hz bursts over a low theta background
//   N3    ~1 Hz high-amplitude slow waves
//   REM   2-6 Hz sawtooth waves
std::vector<double> synth_epoch(Stage stage, double sampling_rate_hz, std::mt19937_64& rng);

// Shuffled sequence holding `per_class` copies of every stage.
std::vector<Stage> balanced_sequence(int per_class, std::uint64_t seed);

struct FixtureFiles {
  std::filesystem::path psg;
  std::filesystem::path hypnogram;
  std::string source_id;
};

struct RecordingOptions {
  double sampling_rate_hz = 100.0;
  std::uint64_t seed = 0;
  // Appends one "Sleep stage ?" epoch, which ingestion must drop.
  bool trailing_unknown = false;
};

// Writes <dir>/<source_id>-PSG.edf (channels "EEG Fpz-Cz", "EEG Pz-Oz") and
// <dir>/<source_id>-Hypnogram.edf.
FixtureFiles write_recording(const std::filesystem::path& dir, const std::string& source_id,
                             std::span<const Stage> stages, const RecordingOptions& opts = {});

}  // namespace eegvlm::synth
