#pragma once

// Declarative run configuration and the pipeline commands behind the CLI.
//
// Output layout under out_dir:
//   epochs/<source>/...            epoch store per recording, epochs/manifest.tsv
//   images/*.png                   rendered epochs, images/manifest.tsv
//   vision/                        split.tsv, model.ckpt, training_log.csv
//   cot/                           records.jsonl, llava.json, summary.txt, cache/
//   joint/<preset>/                model.ckpt, training_log.csv
//   eval/<preset>/                 predictions.tsv, metrics.txt, raw/*.txt
//   report/<preset>/               metrics.txt, table.txt, scores.svg, confusion.svg

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eegvlm/cot.hpp"
#include "eegvlm/error.hpp"
#include "eegvlm/joint.hpp"
#include "eegvlm/lm.hpp"
#include "eegvlm/preprocess.hpp"
#include "eegvlm/render.hpp"
#include "eegvlm/vision.hpp"

namespace eegvlm::pipeline {

struct RecordingPaths {
  std::filesystem::path psg;
  std::filesystem::path hypnogram;
  std::string source_id;  // defaults to the PSG file stem
};

struct CotSettings {
  std::string client = "oracle";  // "oracle" (ground-truth mock), "never" (mock) or "http"
  int per_class_quota = 1300;
  bool allow_short = false;
  double oracle_error_rate = 0.0;
  int max_in_flight = 4;
  double requests_per_second = 0.0;
  int max_attempts = 4;
  int initial_backoff_ms = 200;
  cot::HttpClientOptions http;
};

struct RunConfig {
  std::vector<RecordingPaths> recordings;
  std::string channel = "EEG Fpz-Cz";
  preprocess::FilterSpec filter;  // sampling rate comes from the recording
  render::RenderConfig render;
  double vision_width_scale = 1.0;
  vision::TrainConfig vision_train;
  std::string encoder_id = "toy-patch";
  int patch_px = 14;
  std::string lm_id = "toy-lm";
  lm::ToyLmConfig lm;
  int max_new_tokens = 160;
  joint::JointTrainConfig joint_train;
  CotSettings cot;
  int test_per_class = 75;
  std::string preset = "patch-aligned";
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "run";
  bool skip_bad = false;

  vision::VisionConfig vision_config() const;
  // Throws ConfigInvalid.
  void validate() const;
  nlohmann::json to_json() const;
  // Relative paths resolve against base_dir. Unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
  std::string digest() const;
};

// Sub-seed for a named consumer, derived from the single run seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose);

struct CommandResult {
  std::string summary;
  std::vector<std::string> warnings;
};

CommandResult cmd_preprocess(const RunConfig& cfg);
CommandResult cmd_render(const RunConfig& cfg);
CommandResult cmd_train_vision(const RunConfig& cfg);
CommandResult cmd_gen_cot(const RunConfig& cfg);
CommandResult cmd_train_joint(const RunConfig& cfg);
CommandResult cmd_evaluate(const RunConfig& cfg);
CommandResult cmd_report(const RunConfig& cfg);

// One row of images/manifest.tsv.
struct ImageEntry {
  std::string file;  // relative to images/
  std::string source_id;
  int epoch_index = 0;
  Stage stage = Stage::Wake;
  std::string input_digest;
  std::string image_digest;
};

std::vector<ImageEntry> read_image_manifest(const std::filesystem::path& out_dir);

// 0 success, 1 validation error, 2 runtime failure.
int exit_code_for(ErrorCode code);

}  // namespace eegvlm::pipeline
