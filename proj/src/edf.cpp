#include "eegvlm/edf.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "eegvlm/error.hpp"

namespace eegvlm::edf {

namespace {

constexpr int kFixedHeaderBytes = 256;
constexpr int kSignalHeaderBytes = 256;
constexpr char kTalOnsetEnd = 0x14;
constexpr char kTalDurationStart = 0x15;

[[noreturn]] void malformed(const std::string& what) {
  throw Error(ErrorCode::MalformedHeader, what);
}

class HeaderReader {
 public:
  HeaderReader(std::span<const std::uint8_t> bytes, std::size_t offset)
      : bytes_(bytes), pos_(offset) {}

  std::string text(int width, const char* field) {
    if (pos_ + width > bytes_.size()) malformed(std::string("header ends inside ") + field);
    std::string out;
    out.reserve(width);
    for (int i = 0; i < width; ++i) {
      const std::uint8_t c = bytes_[pos_ + i];
      if (c < 0x20 || c > 0x7E) {
        malformed(std::string("non-ASCII byte in ") + field);
      }
      out.push_back(static_cast<char>(c));
    }
    pos_ += width;
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
  }

  long integer(int width, const char* field) {
    const std::string s = text(width, field);
    long value = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
      malformed(std::string("bad integer in ") + field + ": '" + s + "'");
    }
    return value;
  }

  double real(int width, const char* field) {
    std::string s = text(width, field);
    const char* begin = s.data();
    if (!s.empty() && s.front() == '+') ++begin;
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(begin, s.data() + s.size(), value);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(value)) {
      malformed(std::string("bad number in ") + field + ": '" + s + "'");
    }
    return value;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_;
};

DateTime parse_datetime(const std::string& date, const std::string& time) {
  int dd = 0, mo = 0, yy = 0, hh = 0, mi = 0, ss = 0;
  if (date.size() != 8 || std::sscanf(date.c_str(), "%2d.%2d.%2d", &dd, &mo, &yy) != 3) {
    malformed("bad start date '" + date + "'");
  }
  if (time.size() != 8 || std::sscanf(time.c_str(), "%2d.%2d.%2d", &hh, &mi, &ss) != 3) {
    malformed("bad start time '" + time + "'");
  }
  if (mo < 1 || mo > 12 || dd < 1 || dd > 31 || hh > 23 || mi > 59 || ss > 60) {
    malformed("start date/time out of range");
  }
  // EDF clipping date: 85-99 -> 1985-1999, 00-84 -> 2000-2084.
  return DateTime{yy >= 85 ? 1900 + yy : 2000 + yy, mo, dd, hh, mi, ss};
}

// Decodes the TALs of one data record.
void decode_tals(std::span<const std::int16_t> record_samples,
                 std::vector<HypnogramAnnotation>& out) {
  std::string buf(record_samples.size() * 2, '\0');
  for (std::size_t i = 0; i < record_samples.size(); ++i) {
    const auto u = static_cast<std::uint16_t>(record_samples[i]);
    buf[2 * i] = static_cast<char>(u & 0xFF);
    buf[2 * i + 1] = static_cast<char>(u >> 8);
  }
  std::size_t pos = 0;
  while (pos < buf.size()) {
    const std::size_t end = buf.find('\0', pos);
    const std::size_t tal_end = end == std::string::npos ? buf.size() : end;
    std::string_view tal(buf.data() + pos, tal_end - pos);
    pos = tal_end + 1;
    if (tal.empty()) continue;
    const std::size_t onset_end = tal.find(kTalOnsetEnd);
    if (onset_end == std::string_view::npos) {
      throw Error(ErrorCode::MalformedHeader, "TAL without onset terminator");
    }
    std::string_view timing = tal.substr(0, onset_end);
    std::string_view onset_text = timing;
    std::string_view duration_text;
    if (const std::size_t d = timing.find(kTalDurationStart); d != std::string_view::npos) {
      onset_text = timing.substr(0, d);
      duration_text = timing.substr(d + 1);
    }
    if (onset_text.empty() || (onset_text[0] != '+' && onset_text[0] != '-')) {
      throw Error(ErrorCode::MalformedHeader, "TAL onset must be signed");
    }
    double onset = 0.0;
    double duration = 0.0;
    const char* ob = onset_text.data() + (onset_text[0] == '+' ? 1 : 0);
    if (std::from_chars(ob, onset_text.data() + onset_text.size(), onset).ec != std::errc()) {
      throw Error(ErrorCode::MalformedHeader, "bad TAL onset");
    }
    if (!duration_text.empty() &&
        std::from_chars(duration_text.data(), duration_text.data() + duration_text.size(),
                        duration).ec != std::errc()) {
      throw Error(ErrorCode::MalformedHeader, "bad TAL duration");
    }
    std::string_view rest = tal.substr(onset_end + 1);
    while (!rest.empty()) {
      const std::size_t t = rest.find(kTalOnsetEnd);
      std::string_view text = rest.substr(0, t);
      if (!text.empty()) out.push_back(HypnogramAnnotation{onset, duration, std::string(text)});
      if (t == std::string_view::npos) break;
      rest = rest.substr(t + 1);
    }
  }
}

std::string normalize_label(std::string_view label) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : label) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

void put_field(std::vector<std::uint8_t>& out, std::string_view text, int width) {
  if (static_cast<int>(text.size()) > width) {
    throw Error(ErrorCode::InconsistentSpec,
                "field '" + std::string(text) + "' exceeds " + std::to_string(width) + " bytes");
  }
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), static_cast<std::size_t>(width) - text.size(), ' ');
}

std::string format_number(double value, int width) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  std::string s(buf, res.ptr);
  if (static_cast<int>(s.size()) <= width) return s;
  for (int precision = width; precision > 0; --precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, value);
    if (static_cast<int>(std::string_view(buf).size()) <= width) return buf;
  }
  throw Error(ErrorCode::InconsistentSpec, "number does not fit EDF field");
}

std::string format_tal_time(double seconds) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), seconds);
  std::string s(buf, res.ptr);
  return seconds < 0 ? s : "+" + s;
}

}  // namespace

double SignalSpec::to_physical(int digital) const {
  return (static_cast<double>(digital) - digital_min) * (physical_max - physical_min) /
             (static_cast<double>(digital_max) - digital_min) +
         physical_min;
}

Recording parse_edf(std::span<const std::uint8_t> raw_bytes) {
  if (raw_bytes.size() < kFixedHeaderBytes) malformed("file shorter than 256-byte header");
  Recording rec;
  EdfHeader& h = rec.header;
  HeaderReader r(raw_bytes, 0);
  h.version_tag = r.text(8, "version");
  h.patient_id = r.text(80, "patient id");
  h.recording_id = r.text(80, "recording id");
  const std::string date = r.text(8, "start date");
  const std::string time = r.text(8, "start time");
  h.start_datetime = parse_datetime(date, time);
  h.header_bytes = static_cast<int>(r.integer(8, "header bytes"));
  h.reserved = r.text(44, "reserved");
  h.record_count = r.integer(8, "record count");
  h.record_duration_s = r.real(8, "record duration");
  h.signal_count = static_cast<int>(r.integer(4, "signal count"));

  if (h.signal_count < 1) malformed("signal count must be >= 1");
  if (h.header_bytes != kFixedHeaderBytes + kSignalHeaderBytes * h.signal_count) {
    malformed("header byte count " + std::to_string(h.header_bytes) +
              " inconsistent with " + std::to_string(h.signal_count) + " signals");
  }
  if (!(h.record_duration_s > 0.0)) malformed("record duration must be positive");
  if (h.record_count < -1) malformed("record count must be >= 0 (or -1)");
  if (raw_bytes.size() < static_cast<std::size_t>(h.header_bytes)) {
    malformed("file shorter than declared header");
  }

  const int ns = h.signal_count;
  rec.signals.resize(ns);
  HeaderReader sr(raw_bytes, kFixedHeaderBytes);
  for (auto& s : rec.signals) s.label = sr.text(16, "label");
  for (auto& s : rec.signals) s.transducer = sr.text(80, "transducer");
  for (auto& s : rec.signals) s.physical_dimension = sr.text(8, "physical dimension");
  for (auto& s : rec.signals) s.physical_min = sr.real(8, "physical min");
  for (auto& s : rec.signals) s.physical_max = sr.real(8, "physical max");
  for (auto& s : rec.signals) s.digital_min = static_cast<int>(sr.integer(8, "digital min"));
  for (auto& s : rec.signals) s.digital_max = static_cast<int>(sr.integer(8, "digital max"));
  for (auto& s : rec.signals) s.prefiltering = sr.text(80, "prefiltering");
  for (auto& s : rec.signals) {
    s.samples_per_record = static_cast<int>(sr.integer(8, "samples per record"));
  }
  for (auto& s : rec.signals) s.reserved = sr.text(32, "signal reserved");

  long record_samples = 0;
  for (const auto& s : rec.signals) {
    if (s.digital_min >= s.digital_max) {
      throw Error(ErrorCode::InconsistentSpec, "digital_min >= digital_max for '" + s.label + "'");
    }
    if (s.physical_min == s.physical_max) {
      throw Error(ErrorCode::InconsistentSpec, "physical_min == physical_max for '" + s.label + "'");
    }
    if (s.samples_per_record < 1) {
      throw Error(ErrorCode::InconsistentSpec, "samples_per_record < 1 for '" + s.label + "'");
    }
    if (s.digital_min < -32768 || s.digital_max > 32767) {
      throw Error(ErrorCode::InconsistentSpec, "digital range exceeds 16 bits for '" + s.label + "'");
    }
    record_samples += s.samples_per_record;
  }

  const std::size_t record_bytes = static_cast<std::size_t>(record_samples) * 2;
  const std::size_t data_bytes = raw_bytes.size() - h.header_bytes;
  if (h.record_count == -1) h.record_count = static_cast<long>(data_bytes / record_bytes);
  if (data_bytes < record_bytes * static_cast<std::size_t>(h.record_count)) {
    throw Error(ErrorCode::TruncatedData,
                "data region holds " + std::to_string(data_bytes) + " bytes, header promises " +
                    std::to_string(record_bytes * h.record_count));
  }

  rec.digital.resize(ns);
  for (int i = 0; i < ns; ++i) {
    rec.digital[i].resize(static_cast<std::size_t>(rec.signals[i].samples_per_record) * h.record_count);
  }
  const std::uint8_t* p = raw_bytes.data() + h.header_bytes;
  for (long r_i = 0; r_i < h.record_count; ++r_i) {
    for (int i = 0; i < ns; ++i) {
      const int n = rec.signals[i].samples_per_record;
      std::int16_t* dst = rec.digital[i].data() + static_cast<std::size_t>(r_i) * n;
      for (int k = 0; k < n; ++k, p += 2) {
        dst[k] = static_cast<std::int16_t>(static_cast<std::uint16_t>(p[0]) |
                                           (static_cast<std::uint16_t>(p[1]) << 8));
      }
    }
  }

  for (int i = 0; i < ns; ++i) {
    const SignalSpec& s = rec.signals[i];
    if (s.is_annotation()) {
      for (long r_i = 0; r_i < h.record_count; ++r_i) {
        decode_tals(std::span<const std::int16_t>(rec.digital[i]).subspan(
                        static_cast<std::size_t>(r_i) * s.samples_per_record, s.samples_per_record),
                    rec.annotations);
      }
      continue;
    }
    Channel ch;
    ch.label = s.label;
    ch.sampling_rate_hz = s.samples_per_record / h.record_duration_s;
    ch.samples.resize(rec.digital[i].size());
    std::transform(rec.digital[i].begin(), rec.digital[i].end(), ch.samples.begin(),
                   [&s](std::int16_t d) { return s.to_physical(d); });
    rec.channels.push_back(std::move(ch));
  }
  return rec;
}

Recording read_edf_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_edf(bytes);
}

ChannelView select_channel(const Recording& recording, std::string_view label) {
  const std::string wanted = normalize_label(label);
  const Channel* found = nullptr;
  for (const auto& ch : recording.channels) {
    if (normalize_label(ch.label) != wanted) continue;
    if (found != nullptr) {
      throw Error(ErrorCode::AmbiguousChannel, "more than one channel matches '" + std::string(label) + "'");
    }
    found = &ch;
  }
  if (found == nullptr) {
    throw Error(ErrorCode::ChannelNotFound, "no channel matches '" + std::string(label) + "'");
  }
  return ChannelView{found->label, found->sampling_rate_hz, found->samples};
}

EpochLabel map_stage_text(std::string_view stage_text) {
  std::string_view t = stage_text;
  while (!t.empty() && t.back() == ' ') t.remove_suffix(1);
  constexpr std::string_view kPrefix = "Sleep stage ";
  if (t.starts_with(kPrefix)) {
    const std::string_view code = t.substr(kPrefix.size());
    if (code == "W") return Stage::Wake;
    if (code == "1") return Stage::N1;
    if (code == "2") return Stage::N2;
    if (code == "3" || code == "4") return Stage::N3;
    if (code == "R") return Stage::REM;
    if (code == "?") return std::nullopt;
  }
  if (t == "Movement time") return std::nullopt;
  throw Error(ErrorCode::UnknownStageText, "unmapped stage text '" + std::string(stage_text) + "'");
}

std::vector<EpochLabel> map_stage_labels(std::span<const HypnogramAnnotation> annotations) {
  constexpr double kEpochSeconds = 30.0;
  std::vector<HypnogramAnnotation> sorted(annotations.begin(), annotations.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.onset_s < b.onset_s; });
  std::vector<EpochLabel> labels;
  for (const auto& a : sorted) {
    const EpochLabel label = map_stage_text(a.stage_text);
    const double epochs_exact = a.duration_s / kEpochSeconds;
    const long epochs = std::lround(epochs_exact);
    if (a.onset_s < 0 || a.duration_s < 0 || std::abs(epochs_exact - epochs) > 1e-6) {
      throw Error(ErrorCode::InconsistentSpec,
                  "stage annotation at " + std::to_string(a.onset_s) +
                      " s is not a whole number of 30 s epochs");
    }
    const long start = std::lround(a.onset_s / kEpochSeconds);
    if (start > static_cast<long>(labels.size())) labels.resize(start, std::nullopt);
    labels.resize(start);
    labels.insert(labels.end(), epochs, label);
  }
  return labels;
}

std::vector<std::uint8_t> write_edf(const EdfHeader& header,
                                    std::span<const SignalSpec> signals,
                                    std::span<const std::vector<std::int16_t>> digital) {
  if (signals.size() != digital.size() || signals.empty()) {
    throw Error(ErrorCode::InconsistentSpec, "signals and digital arrays disagree");
  }
  const int ns = static_cast<int>(signals.size());
  std::vector<std::uint8_t> out;
  char buf[32];
  put_field(out, header.version_tag, 8);
  put_field(out, header.patient_id, 80);
  put_field(out, header.recording_id, 80);
  const DateTime& t = header.start_datetime;
  std::snprintf(buf, sizeof(buf), "%02d.%02d.%02d", t.day, t.month, t.year % 100);
  put_field(out, buf, 8);
  std::snprintf(buf, sizeof(buf), "%02d.%02d.%02d", t.hour, t.minute, t.second);
  put_field(out, buf, 8);
  put_field(out, std::to_string(kFixedHeaderBytes + kSignalHeaderBytes * ns), 8);
  put_field(out, header.reserved, 44);
  put_field(out, std::to_string(header.record_count), 8);
  put_field(out, format_number(header.record_duration_s, 8), 8);
  put_field(out, std::to_string(ns), 4);

  for (const auto& s : signals) put_field(out, s.label, 16);
  for (const auto& s : signals) put_field(out, s.transducer, 80);
  for (const auto& s : signals) put_field(out, s.physical_dimension, 8);
  for (const auto& s : signals) put_field(out, format_number(s.physical_min, 8), 8);
  for (const auto& s : signals) put_field(out, format_number(s.physical_max, 8), 8);
  for (const auto& s : signals) put_field(out, std::to_string(s.digital_min), 8);
  for (const auto& s : signals) put_field(out, std::to_string(s.digital_max), 8);
  for (const auto& s : signals) put_field(out, s.prefiltering, 80);
  for (const auto& s : signals) put_field(out, std::to_string(s.samples_per_record), 8);
  for (const auto& s : signals) put_field(out, s.reserved, 32);

  for (int i = 0; i < ns; ++i) {
    if (digital[i].size() != static_cast<std::size_t>(signals[i].samples_per_record) * header.record_count) {
      throw Error(ErrorCode::InconsistentSpec, "sample count mismatch for '" + signals[i].label + "'");
    }
  }
  for (long r = 0; r < header.record_count; ++r) {
    for (int i = 0; i < ns; ++i) {
      const int n = signals[i].samples_per_record;
      for (int k = 0; k < n; ++k) {
        const auto u = static_cast<std::uint16_t>(digital[i][static_cast<std::size_t>(r) * n + k]);
        out.push_back(static_cast<std::uint8_t>(u & 0xFF));
        out.push_back(static_cast<std::uint8_t>(u >> 8));
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> write_edf(const Recording& recording) {
  return write_edf(recording.header, recording.signals, recording.digital);
}

std::vector<std::int16_t> encode_annotation_signal(
    std::span<const HypnogramAnnotation> annotations, long record_count,
    double record_duration_s, int samples_per_record) {
  const std::size_t record_bytes = static_cast<std::size_t>(samples_per_record) * 2;
  std::vector<std::string> records(static_cast<std::size_t>(record_count));
  for (long r = 0; r < record_count; ++r) {
    records[r] = format_tal_time(r * record_duration_s);
    records[r] += kTalOnsetEnd;
    records[r] += kTalOnsetEnd;
    records[r] += '\0';
  }
  for (const auto& a : annotations) {
    long r = static_cast<long>(std::floor(a.onset_s / record_duration_s));
    r = std::clamp(r, 0L, record_count - 1);
    std::string tal = format_tal_time(a.onset_s);
    tal += kTalDurationStart;
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), a.duration_s);
    tal.append(buf, res.ptr);
    tal += kTalOnsetEnd;
    tal += a.stage_text;
    tal += kTalOnsetEnd;
    tal += '\0';
    records[r] += tal;
  }
  std::vector<std::int16_t> out;
  out.reserve(static_cast<std::size_t>(record_count) * samples_per_record);
  for (auto& rec : records) {
    if (rec.size() > record_bytes) {
      throw Error(ErrorCode::InconsistentSpec, "annotations overflow an EDF+ data record");
    }
    rec.resize(record_bytes, '\0');
    for (std::size_t i = 0; i < rec.size(); i += 2) {
      const auto lo = static_cast<std::uint8_t>(rec[i]);
      const auto hi = static_cast<std::uint8_t>(rec[i + 1]);
      out.push_back(static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8))));
    }
  }
  return out;
}

SignalSpec annotation_signal_spec(int samples_per_record) {
  SignalSpec s;
  s.label = "EDF Annotations";
  s.physical_min = -1;
  s.physical_max = 1;
  s.digital_min = -32768;
  s.digital_max = 32767;
  s.samples_per_record = samples_per_record;
  return s;
}

}  // namespace eegvlm::edf
