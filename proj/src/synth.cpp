#include "eegvlm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "eegvlm/edf.hpp"
#include "eegvlm/error.hpp"
#include "eegvlm/preprocess.hpp"

namespace eegvlm::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

void add_sine(std::vector<double>& x, double fs, double freq, double amp, double phase) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += amp * std::sin(kTwoPi * freq * static_cast<double>(i) / fs + phase);
}

// Hann-windowed burst of a sinusoid centred at `center_s`.
void add_burst(std::vector<double>& x, double fs, double center_s, double length_s, double freq, double amp) {
  const long start = std::lround((center_s - length_s / 2) * fs);
  const long n = std::lround(length_s * fs);
  for (long k = 0; k < n; ++k) {
    const long i = start + k;
    if (i < 0 || i >= static_cast<long>(x.size())) continue;
    const double w = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(k) / static_cast<double>(n - 1));
    x[i] += amp * w * std::sin(kTwoPi * freq * static_cast<double>(k) / fs);
  }
}

// Rising slowly, dropping fast: the notched profile of REM sawtooth waves.
void add_sawtooth_train(std::vector<double>& x, double fs, double start_s, double length_s, double freq, double amp) {
  const long start = std::lround(start_s * fs);
  const long n = std::lround(length_s * fs);
  for (long k = 0; k < n; ++k) {
    const long i = start + k;
    if (i < 0 || i >= static_cast<long>(x.size())) continue;
    const double phase = std::fmod(freq * static_cast<double>(k) / fs, 1.0);
    const double saw = phase < 0.8 ? -1.0 + 2.0 * phase / 0.8 : 1.0 - 2.0 * (phase - 0.8) / 0.2;
    x[i] += amp * saw;
  }
}

}  // namespace

std::vector<double> synth_epoch(Stage stage, double fs, std::mt19937_64& rng) {
  const int n = preprocess::samples_per_epoch(fs);
  const double seconds = static_cast<double>(n) / fs;
  std::vector<double> x(n, 0.0);
  std::normal_distribution<double> noise(0.0, 2.5);
  for (double& v : x) v = noise(rng);
  auto phase = [&] { return uniform(rng, 0.0, kTwoPi); };

  // Wake, N1, N2 and REM share one amplitude range so that only rhythm and
  // texture tell them apart; N3 is the high-amplitude class.
  auto amplitude = [&] { return uniform(rng, 25.0, 50.0); };
  switch (stage) {
    case Stage::Wake: {
      add_sine(x, fs, uniform(rng, 9.0, 11.0), amplitude(), phase());
      break;
    }
    case Stage::N1: {
      const double a = amplitude();
      const double share = uniform(rng, 0.4, 0.6);
      add_sine(x, fs, uniform(rng, 4.5, 5.5), a * share, phase());
      add_sine(x, fs, uniform(rng, 14.0, 16.0), a * (1.0 - share), phase());
      break;
    }
    case Stage::N2: {
      add_sine(x, fs, uniform(rng, 4.0, 7.0), uniform(rng, 5.0, 10.0), phase());
      const int bursts = 4 + static_cast<int>(rng() % 4);
      for (int k = 0; k < bursts; ++k) {
        add_burst(x, fs, uniform(rng, 1.0, seconds - 1.0), uniform(rng, 0.8, 2.0), uniform(rng, 12.0, 14.0),
                  amplitude());
      }
      break;
    }
    case Stage::N3: {
      add_sine(x, fs, uniform(rng, 0.8, 1.2), uniform(rng, 75.0, 120.0), phase());
      break;
    }
    case Stage::REM: {
      const double f = uniform(rng, 2.0, 6.0);
      add_sawtooth_train(x, fs, uniform(rng, -1.0, 0.0), seconds + 1.0, f, amplitude());
      break;
    }
  }
  return x;
}

std::vector<Stage> balanced_sequence(int per_class, std::uint64_t seed) {
  std::vector<Stage> out;
  for (Stage s : kAllStages) out.insert(out.end(), static_cast<std::size_t>(per_class), s);
  std::mt19937_64 rng(seed);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

namespace {

std::string hypnogram_text(Stage s) {
  switch (s) {
    case Stage::Wake: return "Sleep stage W";
    case Stage::N1: return "Sleep stage 1";
    case Stage::N2: return "Sleep stage 2";
    case Stage::N3: return "Sleep stage 3";
    case Stage::REM: return "Sleep stage R";
  }
  return "Sleep stage ?";
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
}

}  // namespace

FixtureFiles write_recording(const std::filesystem::path& dir, const std::string& source_id,
                             std::span<const Stage> stages, const RecordingOptions& opts) {
  const double fs = opts.sampling_rate_hz;
  const int per_epoch = preprocess::samples_per_epoch(fs);
  std::mt19937_64 rng(opts.seed);
  const long epochs = static_cast<long>(stages.size()) + (opts.trailing_unknown ? 1 : 0);

  std::vector<double> eeg, second;
  for (Stage s : stages) {
    const auto e = synth_epoch(s, fs, rng);
    eeg.insert(eeg.end(), e.begin(), e.end());
  }
  if (opts.trailing_unknown) {
    std::normal_distribution<double> noise(0.0, 20.0);
    for (int i = 0; i < per_epoch; ++i) eeg.push_back(noise(rng));
  }
  std::normal_distribution<double> noise(0.0, 10.0);
  for (std::size_t i = 0; i < eeg.size(); ++i) second.push_back(0.5 * eeg[i] + noise(rng));

  edf::SignalSpec spec;
  spec.transducer = "Ag-AgCl electrodes";
  spec.physical_dimension = "uV";
  spec.physical_min = -500.0;
  spec.physical_max = 500.0;
  spec.digital_min = -32768;
  spec.digital_max = 32767;
  spec.prefiltering = "HP:0.1Hz";
  spec.samples_per_record = per_epoch;
  auto digitize = [&](const std::vector<double>& phys) {
    std::vector<std::int16_t> d(phys.size());
    const double scale = (spec.digital_max - spec.digital_min) / (spec.physical_max - spec.physical_min);
    for (std::size_t i = 0; i < phys.size(); ++i) {
      const double v = std::clamp(phys[i], spec.physical_min, spec.physical_max);
      d[i] = static_cast<std::int16_t>(std::clamp<long>(
          std::lround((v - spec.physical_min) * scale + spec.digital_min), spec.digital_min, spec.digital_max));
    }
    return d;
  };

  edf::EdfHeader psg;
  psg.patient_id = "X X X " + source_id;
  psg.recording_id = "Startdate 01-JAN-1990 X X synthetic";
  psg.start_datetime = {1990, 1, 1, 22, 0, 0};
  psg.record_count = epochs;
  psg.record_duration_s = preprocess::kEpochSeconds;
  std::vector<edf::SignalSpec> signals(2, spec);
  signals[0].label = "EEG Fpz-Cz";
  signals[1].label = "EEG Pz-Oz";
  const std::vector<std::vector<std::int16_t>> digital{digitize(eeg), digitize(second)};

  std::filesystem::create_directories(dir);
  FixtureFiles files{dir / (source_id + "-PSG.edf"), dir / (source_id + "-Hypnogram.edf"), source_id};
  write_bytes(files.psg, edf::write_edf(psg, signals, digital));

  // Consecutive equal stages share one annotation, as scored hypnograms do.
  std::vector<edf::HypnogramAnnotation> notes;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string text = hypnogram_text(stages[i]);
    if (!notes.empty() && notes.back().stage_text == text) {
      notes.back().duration_s += preprocess::kEpochSeconds;
    } else {
      notes.push_back({static_cast<double>(i) * preprocess::kEpochSeconds, preprocess::kEpochSeconds, text});
    }
  }
  if (opts.trailing_unknown) {
    notes.push_back({static_cast<double>(stages.size()) * preprocess::kEpochSeconds, preprocess::kEpochSeconds,
                     "Sleep stage ?"});
  }
  const int payload = static_cast<int>(notes.size()) * 24 + 64;
  edf::EdfHeader hyp;
  hyp.patient_id = psg.patient_id;
  hyp.recording_id = psg.recording_id;
  hyp.start_datetime = psg.start_datetime;
  hyp.reserved = "EDF+C";
  hyp.record_count = 1;
  hyp.record_duration_s = static_cast<double>(epochs) * preprocess::kEpochSeconds;
  const std::vector<edf::SignalSpec> hyp_signals{edf::annotation_signal_spec(payload)};
  const std::vector<std::vector<std::int16_t>> hyp_digital{
      edf::encode_annotation_signal(notes, 1, hyp.record_duration_s, payload)};
  write_bytes(files.hypnogram, edf::write_edf(hyp, hyp_signals, hyp_digital));
  return files;
}

}  // namespace eegvlm::synth
