#pragma once

// EDF / EDF+ ingestion: fixed header, per-signal headers, 16-bit data records
// and EDF+ time-stamped annotation lists (TALs).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eegvlm/stage.hpp"

namespace eegvlm::edf {

struct DateTime {
  int year = 1985;
  int month = 1;
  int day = 1;
  int hour = 0;
  int minute = 0;
  int second = 0;

  bool operator==(const DateTime&) const = default;
};

struct EdfHeader {
  std::string version_tag = "0";
  std::string patient_id;
  std::string recording_id;
  DateTime start_datetime;
  int header_bytes = 0;
  std::string reserved;  // "EDF+C" / "EDF+D" for EDF+ files
  long record_count = 0;
  double record_duration_s = 1.0;
  int signal_count = 0;

  bool operator==(const EdfHeader&) const = default;
};

struct SignalSpec {
  std::string label;
  std::string transducer;
  std::string physical_dimension;
  double physical_min = -1.0;
  double physical_max = 1.0;
  int digital_min = -32768;
  int digital_max = 32767;
  std::string prefiltering;
  int samples_per_record = 1;
  std::string reserved;

  bool is_annotation() const { return label == "EDF Annotations"; }
  double to_physical(int digital) const;

  bool operator==(const SignalSpec&) const = default;
};

struct HypnogramAnnotation {
  double onset_s = 0.0;
  double duration_s = 0.0;
  std::string stage_text;

  bool operator==(const HypnogramAnnotation&) const = default;
};

struct Channel {
  std::string label;
  double sampling_rate_hz = 0.0;
  std::vector<double> samples;  // physical units
};

struct Recording {
  EdfHeader header;
  std::vector<SignalSpec> signals;               // all signals, in file order
  std::vector<std::vector<std::int16_t>> digital;  // raw samples per signal
  std::vector<Channel> channels;                 // calibrated, annotations excluded
  std::vector<HypnogramAnnotation> annotations;  // decoded EDF+ TALs

  const DateTime& start_datetime() const { return header.start_datetime; }
};

// Throws Error{MalformedHeader | InconsistentSpec | TruncatedData}.
Recording parse_edf(std::span<const std::uint8_t> raw_bytes);
Recording read_edf_file(const std::string& path);

struct ChannelView {
  std::string label;
  double sampling_rate_hz = 0.0;
  std::span<const double> samples;
};

// Case-insensitive, whitespace-normalized match. Throws ChannelNotFound or
// AmbiguousChannel.
ChannelView select_channel(const Recording& recording, std::string_view label);

// nullopt marks an excluded epoch (movement / unknown).
using EpochLabel = std::optional<Stage>;

// Maps a raw hypnogram text ("Sleep stage W", "Sleep stage 4", "R", ...).
// Throws UnknownStageText.
EpochLabel map_stage_text(std::string_view stage_text);

// Expands annotations into per-30 s labels. Gaps between annotations are
// filled with excluded epochs.
std::vector<EpochLabel> map_stage_labels(std::span<const HypnogramAnnotation> annotations);

// --- fixture writer -------------------------------------------------------

// Serializes header + signal specs + raw digital samples. header_bytes and
// signal_count are recomputed from `signals`.
std::vector<std::uint8_t> write_edf(const EdfHeader& header,
                                    std::span<const SignalSpec> signals,
                                    std::span<const std::vector<std::int16_t>> digital);
std::vector<std::uint8_t> write_edf(const Recording& recording);

// Encodes annotations as an "EDF Annotations" signal payload: one time-keeping
// TAL per record, each annotation placed in the record that contains its
// onset. Throws InconsistentSpec if a record overflows.
std::vector<std::int16_t> encode_annotation_signal(
    std::span<const HypnogramAnnotation> annotations, long record_count,
    double record_duration_s, int samples_per_record);

SignalSpec annotation_signal_spec(int samples_per_record);

}  // namespace eegvlm::edf
