#include <doctest.h>

#include <cstring>
#include <random>

#include "eegvlm/edf.hpp"
#include "eegvlm/error.hpp"

using namespace eegvlm;
using namespace eegvlm::edf;

namespace {

SignalSpec eeg_spec(const std::string& label, int spr) {
  SignalSpec s;
  s.label = label;
  s.transducer = "AgAgCl electrode";
  s.physical_dimension = "uV";
  s.physical_min = -200.0;
  s.physical_max = 200.0;
  s.digital_min = -2048;
  s.digital_max = 2047;
  s.samples_per_record = spr;
  return s;
}

struct Fixture {
  EdfHeader header;
  std::vector<SignalSpec> signals;
  std::vector<std::vector<std::int16_t>> digital;
  std::vector<HypnogramAnnotation> annotations;
};

Fixture make_fixture(std::uint64_t seed) {
  Fixture f;
  f.header.patient_id = "X F 01-JAN-1970 test";
  f.header.recording_id = "Startdate 02-MAR-1989 fixture";
  f.header.start_datetime = {1989, 3, 2, 23, 15, 7};
  f.header.reserved = "EDF+C";
  f.header.record_count = 4;
  f.header.record_duration_s = 30.0;
  f.signals = {eeg_spec("EEG Fpz-Cz", 300), eeg_spec("EEG Pz-Oz", 150), annotation_signal_spec(60)};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(-2048, 2047);
  for (int i = 0; i < 2; ++i) {
    std::vector<std::int16_t> d(static_cast<std::size_t>(f.signals[i].samples_per_record) * 4);
    for (auto& v : d) v = static_cast<std::int16_t>(dist(rng));
    f.digital.push_back(std::move(d));
  }
  f.annotations = {{0.0, 60.0, "Sleep stage W"}, {60.0, 30.0, "Sleep stage 2"},
                   {90.0, 30.0, "Sleep stage R"}};
  f.digital.push_back(encode_annotation_signal(f.annotations, 4, 30.0, 60));
  return f;
}

void put_ascii(std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& text,
               std::size_t width) {
  std::string padded = text;
  padded.resize(width, ' ');
  std::memcpy(bytes.data() + offset, padded.data(), width);
}

}  // namespace

TEST_CASE("calibration endpoints and the 12-bit midpoint") {
  const SignalSpec s = eeg_spec("x", 1);
  CHECK(s.to_physical(s.digital_min) == doctest::Approx(s.physical_min).epsilon(1e-15));
  CHECK(s.to_physical(s.digital_max) == doctest::Approx(s.physical_max).epsilon(1e-15));
  // (0 + 2048) * 400 / 4095 - 200
  CHECK(s.to_physical(0) == doctest::Approx(819200.0 / 4095.0 - 200.0).epsilon(1e-12));
  CHECK(s.to_physical(0) == doctest::Approx(0.0489).epsilon(1e-3));
}

TEST_CASE("calibration is affine and monotone for random specs") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> dmin(-32768, 0);
  std::uniform_real_distribution<double> phys(-1000.0, 1000.0);
  for (int trial = 0; trial < 200; ++trial) {
    SignalSpec s;
    s.digital_min = dmin(rng);
    s.digital_max = s.digital_min + 1 + static_cast<int>(rng() % static_cast<unsigned>(32767 - s.digital_min));
    s.physical_min = phys(rng);
    s.physical_max = s.physical_min + 1e-3 + std::abs(phys(rng));
    CHECK(s.to_physical(s.digital_min) == doctest::Approx(s.physical_min));
    CHECK(s.to_physical(s.digital_max) == doctest::Approx(s.physical_max));
    const int mid = s.digital_min + (s.digital_max - s.digital_min) / 2;
    CHECK(s.to_physical(mid) <= s.to_physical(mid + 1));
    const double slope = s.to_physical(mid + 1) - s.to_physical(mid);
    CHECK(s.to_physical(s.digital_min + 1) - s.to_physical(s.digital_min) ==
          doctest::Approx(slope).epsilon(1e-9));
  }
}

TEST_CASE("fixture writer round-trips byte-exact") {
  const Fixture f = make_fixture(11);
  const auto bytes = write_edf(f.header, f.signals, f.digital);
  CHECK(bytes.size() == 256 + 256 * 3 + 4 * (300 + 150 + 60) * 2);

  const Recording rec = parse_edf(bytes);
  CHECK(rec.header.header_bytes == 256 + 256 * 3);
  CHECK(rec.header.signal_count == 3);
  CHECK(rec.header.record_count == 4);
  CHECK(rec.header.start_datetime == f.header.start_datetime);
  CHECK(rec.header.patient_id == f.header.patient_id);
  CHECK(rec.signals == f.signals);
  CHECK(rec.digital == f.digital);
  CHECK(write_edf(rec) == bytes);

  REQUIRE(rec.channels.size() == 2);
  CHECK(rec.channels[0].sampling_rate_hz == doctest::Approx(10.0));
  CHECK(rec.channels[1].sampling_rate_hz == doctest::Approx(5.0));
  CHECK(rec.channels[0].samples.size() == 1200);
  for (std::size_t i = 0; i < rec.channels[1].samples.size(); ++i) {
    CHECK(rec.channels[1].samples[i] == f.signals[1].to_physical(f.digital[1][i]));
  }
  CHECK(rec.annotations == f.annotations);
}

TEST_CASE("header violations are rejected") {
  const Fixture f = make_fixture(12);
  const auto good = write_edf(f.header, f.signals, f.digital);

  SUBCASE("short file") {
    std::vector<std::uint8_t> bytes(good.begin(), good.begin() + 100);
    CHECK_THROWS_AS(parse_edf(bytes), Error);
    try {
      parse_edf(bytes);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MalformedHeader);
    }
  }
  SUBCASE("header byte count disagrees with signal count") {
    auto bytes = good;
    put_ascii(bytes, 184, "512", 8);
    try {
      parse_edf(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MalformedHeader);
    }
  }
  SUBCASE("non-ASCII byte") {
    auto bytes = good;
    bytes[20] = 0xC3;
    try {
      parse_edf(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MalformedHeader);
    }
  }
  SUBCASE("numeric field with garbage") {
    auto bytes = good;
    put_ascii(bytes, 236, "4x", 8);  // record count
    try {
      parse_edf(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::MalformedHeader);
    }
  }
  SUBCASE("digital_min above digital_max") {
    auto bytes = good;
    // digital min block starts after label/transducer/dimension/physmin/physmax
    put_ascii(bytes, 256 + 3 * (16 + 80 + 8 + 8 + 8), "3000", 8);
    try {
      parse_edf(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InconsistentSpec);
    }
  }
  SUBCASE("equal physical bounds") {
    auto bytes = good;
    put_ascii(bytes, 256 + 3 * (16 + 80 + 8) + 8 * 3, "-200", 8);  // physical max of signal 0
    try {
      parse_edf(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InconsistentSpec);
    }
  }
  SUBCASE("truncated data region") {
    std::vector<std::uint8_t> bytes(good.begin(), good.end() - 2);
    try {
      parse_edf(bytes);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::TruncatedData);
    }
  }
}

TEST_CASE("select_channel matching rules") {
  const Fixture f = make_fixture(13);
  const Recording rec = parse_edf(write_edf(f.header, f.signals, f.digital));

  const auto exact = select_channel(rec, "EEG Fpz-Cz");
  CHECK(exact.label == "EEG Fpz-Cz");
  CHECK(exact.samples.data() == rec.channels[0].samples.data());

  const auto loose = select_channel(rec, "  eeg   FPZ-cz ");
  CHECK(loose.samples.data() == rec.channels[0].samples.data());
  CHECK(loose.sampling_rate_hz == doctest::Approx(10.0));

  try {
    select_channel(rec, "EMG");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ChannelNotFound);
  }

  Recording dup = rec;
  dup.channels.push_back(dup.channels[0]);
  dup.channels.back().label = "eeg fpz-cz";
  try {
    select_channel(dup, "EEG Fpz-Cz");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::AmbiguousChannel);
  }
}

TEST_CASE("stage text mapping") {
  CHECK(map_stage_text("Sleep stage W") == Stage::Wake);
  CHECK(map_stage_text("Sleep stage 1") == Stage::N1);
  CHECK(map_stage_text("Sleep stage 2") == Stage::N2);
  CHECK(map_stage_text("Sleep stage 3") == Stage::N3);
  CHECK(map_stage_text("Sleep stage 4") == Stage::N3);
  CHECK(map_stage_text("Sleep stage R") == Stage::REM);
  CHECK_FALSE(map_stage_text("Movement time").has_value());
  CHECK_FALSE(map_stage_text("Sleep stage ?").has_value());
  try {
    map_stage_text("Sleep stage 5");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnknownStageText);
  }
}

TEST_CASE("stage annotations expand into 30 s labels") {
  const std::vector<HypnogramAnnotation> one{{0.0, 90.0, "Sleep stage W"}};
  const auto labels = map_stage_labels(one);
  CHECK(labels == std::vector<EpochLabel>{Stage::Wake, Stage::Wake, Stage::Wake});

  std::mt19937_64 rng(3);
  const char* texts[] = {"Sleep stage W", "Sleep stage 1", "Sleep stage 2", "Sleep stage 3",
                         "Sleep stage 4", "Sleep stage R", "Movement time", "Sleep stage ?"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<HypnogramAnnotation> anns;
    double onset = 0.0;
    long expected = 0;
    const int n = 1 + static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) {
      const double dur = 30.0 * static_cast<double>(1 + rng() % 6);
      anns.push_back({onset, dur, texts[rng() % 8]});
      onset += dur;
      expected += std::lround(dur / 30.0);
    }
    const auto out = map_stage_labels(anns);
    CHECK(static_cast<long>(out.size()) == expected);
  }
}
