#include <doctest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "eegvlm/edf.hpp"
#include "eegvlm/error.hpp"
#include "eegvlm/pipeline.hpp"
#include "eegvlm/synth.hpp"

using namespace eegvlm;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("eegvlm_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::IoFailure;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

pipeline::RunConfig small_config(const fs::path& dir, std::vector<synth::FixtureFiles> files) {
  pipeline::RunConfig cfg;
  for (const auto& f : files) cfg.recordings.push_back({f.psg, f.hypnogram, f.source_id});
  cfg.render.width_px = 64;
  cfg.render.height_px = 32;
  cfg.patch_px = 32;
  cfg.vision_width_scale = 0.125;
  cfg.out_dir = dir / "run";
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(EEGVLM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("preprocess: ten annotated epochs give ten manifest lines") {
  TempDir tmp("pp10");
  const auto stages = synth::balanced_sequence(2, 3);
  synth::RecordingOptions opts;
  opts.trailing_unknown = true;
  const auto files = synth::write_recording(tmp.path(), "R1", stages, opts);
  const auto cfg = small_config(tmp.path(), {files});
  const auto result = pipeline::cmd_preprocess(cfg);
  CHECK(result.warnings.empty());
  const auto manifest = read_text(cfg.out_dir / "epochs" / "manifest.tsv");
  CHECK(count_lines(manifest) == 10);
  std::istringstream in(manifest);
  std::string line;
  for (Stage s : stages) {
    std::getline(in, line);
    CHECK(line.ends_with("\t" + std::string(stage_name(s))));
  }
}

TEST_CASE("preprocess: a recording with only excluded epochs warns and succeeds") {
  TempDir tmp("ppexcl");
  const std::vector<Stage> stages(3, Stage::N2);
  auto files = synth::write_recording(tmp.path(), "R2", stages);
  // Replace the hypnogram with movement / unknown annotations only.
  edf::EdfHeader h;
  h.reserved = "EDF+C";
  h.record_count = 1;
  h.record_duration_s = 90.0;
  const std::vector<edf::HypnogramAnnotation> anns{{0, 30, "Movement time"}, {30, 60, "Sleep stage ?"}};
  const std::vector<edf::SignalSpec> specs{edf::annotation_signal_spec(120)};
  const std::vector<std::vector<std::int16_t>> data{edf::encode_annotation_signal(anns, 1, 90.0, 120)};
  const auto bytes = edf::write_edf(h, specs, data);
  std::ofstream(files.hypnogram, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                         static_cast<std::streamsize>(bytes.size()));

  const auto cfg = small_config(tmp.path(), {files});
  const auto result = pipeline::cmd_preprocess(cfg);
  REQUIRE(result.warnings.size() == 1);
  CHECK(result.warnings[0].find("R2") != std::string::npos);
  CHECK(read_text(cfg.out_dir / "epochs" / "manifest.tsv").empty());
}

TEST_CASE("preprocess: corrupted header fails fast or is skipped") {
  TempDir tmp("ppbad");
  const auto good = synth::write_recording(tmp.path(), "GOOD", synth::balanced_sequence(1, 1));
  const auto bad = synth::write_recording(tmp.path(), "BAD", synth::balanced_sequence(1, 2));
  {
    std::fstream f(bad.psg, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(184);
    f.write("99999   ", 8);  // header byte count
  }
  auto cfg = small_config(tmp.path(), {bad, good});
  CHECK(code_of([&] { pipeline::cmd_preprocess(cfg); }) == ErrorCode::MalformedHeader);

  cfg.skip_bad = true;
  const auto result = pipeline::cmd_preprocess(cfg);
  REQUIRE(result.warnings.size() == 1);
  CHECK(result.warnings[0].find("BAD") != std::string::npos);
  const auto manifest = read_text(cfg.out_dir / "epochs" / "manifest.tsv");
  CHECK(count_lines(manifest) == 5);
  CHECK(manifest.find("BAD") == std::string::npos);
}

TEST_CASE("render is idempotent for unchanged inputs") {
  TempDir tmp("render");
  const auto files = synth::write_recording(tmp.path(), "R3", synth::balanced_sequence(1, 4));
  const auto cfg = small_config(tmp.path(), {files});
  pipeline::cmd_preprocess(cfg);
  pipeline::cmd_render(cfg);
  const auto entries = pipeline::read_image_manifest(cfg.out_dir);
  REQUIRE(entries.size() == 5);
  std::map<std::string, fs::file_time_type> stamps;
  for (const auto& e : entries) stamps[e.file] = fs::last_write_time(cfg.out_dir / "images" / e.file);
  const auto manifest_time = fs::last_write_time(cfg.out_dir / "images" / "manifest.tsv");

  pipeline::cmd_preprocess(cfg);
  pipeline::cmd_render(cfg);
  for (const auto& e : pipeline::read_image_manifest(cfg.out_dir)) {
    CHECK(fs::last_write_time(cfg.out_dir / "images" / e.file) == stamps[e.file]);
  }
  CHECK(fs::last_write_time(cfg.out_dir / "images" / "manifest.tsv") == manifest_time);

  auto changed = cfg;
  changed.render.amplitude_range_uv = 80.0;
  pipeline::cmd_render(changed);
  const auto after = pipeline::read_image_manifest(cfg.out_dir);
  CHECK(after[0].image_digest != entries[0].image_digest);
}

TEST_CASE("evaluate without a joint checkpoint names the missing artifact") {
  TempDir tmp("noeval");
  const auto files = synth::write_recording(tmp.path(), "R4", synth::balanced_sequence(1, 5));
  const auto cfg = small_config(tmp.path(), {files});
  try {
    pipeline::cmd_evaluate(cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingUpstream);
    CHECK(std::string(e.what()).find("model.ckpt") != std::string::npos);
    CHECK(pipeline::exit_code_for(e.code()) == 1);
  }
}

TEST_CASE("config validation and round-trip") {
  TempDir tmp("config");
  const auto files = synth::write_recording(tmp.path(), "R5", synth::balanced_sequence(1, 6));
  const auto cfg = small_config(tmp.path(), {files});
  CHECK_NOTHROW(cfg.validate());
  const auto back = pipeline::RunConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.digest() == cfg.digest());
  auto reseeded = cfg;
  reseeded.seed = 99;
  CHECK(reseeded.digest() != cfg.digest());

  auto j = cfg.to_json();
  j["surprise"] = 1;
  CHECK(code_of([&] { pipeline::RunConfig::from_json(j); }) == ErrorCode::ConfigInvalid);

  auto missing = cfg;
  missing.recordings[0].psg = tmp.path() / "nope.edf";
  CHECK(code_of([&] { missing.validate(); }) == ErrorCode::ConfigInvalid);
  auto encoder = cfg;
  encoder.encoder_id = "resnet-free";
  CHECK(code_of([&] { encoder.validate(); }) == ErrorCode::ConfigInvalid);
  auto preset = cfg;
  preset.preset = "no-such-row";
  CHECK(code_of([&] { preset.validate(); }) == ErrorCode::ConfigInvalid);
  auto patch = cfg;
  patch.patch_px = 14;
  CHECK(code_of([&] { patch.validate(); }) == ErrorCode::ConfigInvalid);
  // Validation precedes side effects.
  CHECK(code_of([&] { pipeline::cmd_preprocess(missing); }) == ErrorCode::ConfigInvalid);
  CHECK_FALSE(fs::exists(missing.out_dir / "epochs"));

  CHECK(pipeline::derive_seed(1, "split") == pipeline::derive_seed(1, "split"));
  CHECK(pipeline::derive_seed(1, "split") != pipeline::derive_seed(1, "cot"));
  CHECK(pipeline::derive_seed(1, "split") != pipeline::derive_seed(2, "split"));

  CHECK(pipeline::exit_code_for(ErrorCode::ConfigInvalid) == 1);
  CHECK(pipeline::exit_code_for(ErrorCode::MalformedHeader) == 2);
  CHECK(pipeline::exit_code_for(ErrorCode::ServiceUnavailable) == 2);
}

TEST_CASE("cli exit codes") {
  TempDir tmp("cli");
  const auto dir = tmp.path().string();
  CHECK(run_cli("") == 1);
  CHECK(run_cli("preprocess --config " + dir + "/absent.json") == 1);
  CHECK(run_cli("preprocess --bogus") == 1);

  REQUIRE(run_cli("synth --out " + dir + " --per-class 1 --seed 3") == 0);
  CHECK(run_cli("evaluate --config " + dir + "/config.json") == 1);
  CHECK(run_cli("preprocess --config " + dir + "/config.json --out " + dir + "/run") == 0);

  std::fstream f(tmp.path() / "SYN0-PSG.edf", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(0);
  f.write("\xff", 1);
  f.close();
  CHECK(run_cli("preprocess --config " + dir + "/config.json --out " + dir + "/run2") == 2);
  CHECK(run_cli("preprocess --skip-bad --config " + dir + "/config.json --out " + dir + "/run3") == 0);
}

TEST_CASE("the 50-epoch fixture runs end to end within five minutes") {
  TempDir tmp("fixture50");
  const auto dir = tmp.path().string();
  REQUIRE(run_cli("synth --out " + dir + " --per-class 10 --seed 11") == 0);
  const auto start = std::chrono::steady_clock::now();
  CHECK(run_cli("all --config " + dir + "/config.json") == 0);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  MESSAGE("50-epoch pipeline took " << seconds << " s");
  CHECK(seconds < 300.0);
  const fs::path run = tmp.path() / "run";
  CHECK(count_lines(read_text(run / "epochs" / "manifest.tsv")) == 50);
  for (const char* f : {"metrics.txt", "table.txt", "scores.svg", "confusion.svg"}) {
    CHECK(fs::exists(run / "report" / "patch-aligned" / f));
  }
  const auto metrics = read_text(run / "eval" / "patch-aligned" / "metrics.txt");
  CHECK(metrics.find("accuracy=") != std::string::npos);
  CHECK(metrics.find("f1.rem=") != std::string::npos);
}
