#pragma once

// Stage-wise chain-of-thought data generation: one sub-prompt per stage,
// independent VLM queries, and assembly of the five analyses plus a summary
// sentence into a training answer.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eegvlm/stage.hpp"

namespace eegvlm::cot {

struct StageProfile {
  Stage stage = Stage::Wake;
  std::vector<std::string> descriptors;
};

// The five built-in profiles in class order.
std::vector<StageProfile> default_profiles();

struct SubPrompt {
  Stage stage = Stage::Wake;
  std::string prompt_text;
};

inline constexpr int kTemplateVersion = 1;

// One prompt per stage in class order. Throws MissingProfile when a stage has
// no profile or an empty descriptor list.
std::vector<SubPrompt> build_stage_prompts(std::span<const StageProfile> profiles);
// The overall instruction X_q used as the question of every record.
std::string overall_question();

struct StageAnalysis {
  Stage stage = Stage::Wake;
  std::string analysis_text;
  bool evidence = false;
};

// Requires an "Evidence: present" or "Evidence: absent" marker. Throws
// MalformedResponse.
StageAnalysis parse_analysis(Stage stage, const std::string& text);

struct VlmRequest {
  std::string image_digest;
  std::span<const std::uint8_t> png;
  Stage stage = Stage::Wake;
  std::string prompt;
};

// Thrown by clients for failures worth retrying (timeouts, 429, 5xx).
class TransientFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VlmClient {
 public:
  virtual ~VlmClient() = default;
  virtual std::string model_id() const = 0;
  virtual std::string complete(const VlmRequest& request) = 0;
};

// Returns canned text keyed by (image digest, stage).
class CannedClient final : public VlmClient {
 public:
  void set(const std::string& image_digest, Stage stage, std::string text);
  std::string model_id() const override { return "mock-canned"; }
  std::string complete(const VlmRequest& request) override;

 private:
  std::map<std::pair<std::string, Stage>, std::string> responses_;
};

// Knows the true stage of every image and reports evidence for it. With a
// non-zero error rate each (image, stage) answer flips with that probability,
// decided by a hash so results stay deterministic.
class OracleClient final : public VlmClient {
 public:
  explicit OracleClient(std::map<std::string, Stage> truth, double error_rate = 0.0, std::uint64_t seed = 0);
  std::string model_id() const override { return "mock-oracle"; }
  std::string complete(const VlmRequest& request) override;

 private:
  std::map<std::string, Stage> truth_;
  double error_rate_;
  std::uint64_t seed_;
};

// Reports no evidence for any stage, so no label can be decided.
class NeverLabelsClient final : public VlmClient {
 public:
  std::string model_id() const override { return "mock-never"; }
  std::string complete(const VlmRequest& request) override;
};

// Fails the first `failures` calls for every distinct request, then forwards.
class FlakyClient final : public VlmClient {
 public:
  FlakyClient(VlmClient& inner, int failures) : inner_(inner), failures_(failures) {}
  std::string model_id() const override { return inner_.model_id(); }
  std::string complete(const VlmRequest& request) override;
  long attempts() const;

 private:
  VlmClient& inner_;
  int failures_;
  mutable std::mutex mu_;
  std::map<std::string, int> seen_;
  long attempts_ = 0;
};

struct HttpClientOptions {
  std::string base_url = "http://127.0.0.1:8080";  // scheme://host[:port]
  std::string path = "/v1/answer";
  std::string model_id = "external-vlm";
  std::string api_key_env = "EEGVLM_VLM_API_KEY";
  double timeout_s = 60.0;
};

// JSON over HTTP: {"model", "image_base64", "prompt"} -> {"answer"}.
class HttpVlmClient final : public VlmClient {
 public:
  explicit HttpVlmClient(HttpClientOptions opts);
  std::string model_id() const override { return opts_.model_id; }
  std::string complete(const VlmRequest& request) override;

 private:
  HttpClientOptions opts_;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
};

struct EngineOptions {
  RetryPolicy retry;
  int max_in_flight = 4;
  double requests_per_second = 0.0;  // 0 = unlimited
  std::optional<std::filesystem::path> cache_dir;
};

// Content-addressed, single-flight, retrying front end for a VlmClient.
class QueryEngine {
 public:
  QueryEngine(VlmClient& client, EngineOptions opts);

  // Throws ServiceUnavailable after exhausting retries, MalformedResponse.
  StageAnalysis query(const std::string& image_digest, std::span<const std::uint8_t> png, const SubPrompt& prompt);
  std::string cache_key(const std::string& image_digest, const SubPrompt& prompt) const;
  long client_calls() const;
  long cache_hits() const;

 private:
  std::string fetch(const VlmRequest& request);
  void throttle();

  VlmClient& client_;
  EngineOptions opts_;
  mutable std::mutex mu_;
  std::condition_variable slots_cv_;
  int in_flight_ = 0;
  std::map<std::string, std::string> cache_;
  std::map<std::string, std::shared_future<std::string>> pending_;
  long client_calls_ = 0;
  long cache_hits_ = 0;
  std::chrono::steady_clock::time_point next_slot_{};
};

std::vector<std::string> default_summary_bank();
// Deterministic bank index from (image digest, seed).
std::size_t summary_index(const std::string& image_digest, std::uint64_t seed, std::size_t bank_size);

struct AssembledAnswer {
  std::string reasoning;
  Stage final_label = Stage::Wake;
  bool conflict = false;  // more than one stage reported evidence
};

// Stage chosen when several show evidence, highest first.
inline constexpr std::array<Stage, kNumStages> kEvidencePriority = {Stage::N3, Stage::N2, Stage::REM, Stage::N1,
                                                                    Stage::Wake};

// Throws MissingAnalysis (not exactly one analysis per stage) or
// NoDecidableLabel (no stage reported evidence).
AssembledAnswer assemble_answer(std::span<const StageAnalysis> analyses, std::span<const std::string> summary_bank,
                                std::size_t selection);

struct CotInput {
  std::string image_path;
  std::string image_digest;
  std::vector<std::uint8_t> png;
  Stage ground_truth = Stage::Wake;
};

struct CotRecord {
  std::string image_path;
  std::string image_digest;
  std::string question;
  std::string reasoning;
  std::optional<Stage> final_label;
  Stage ground_truth = Stage::Wake;
  bool valid = false;
  bool conflict = false;
};

struct ClassCounts {
  std::array<int, kNumStages> attempted{};
  std::array<int, kNumStages> valid{};
};

struct CotDataset {
  std::vector<CotRecord> records;
  ClassCounts counts;
};

struct CotBuildOptions {
  int per_class_quota = 1300;
  std::uint64_t seed = 0;
  bool allow_short = false;
  int workers = 4;
};

// Throws InsufficientData when a class has fewer inputs than the quota and
// allow_short is off.
CotDataset build_cot_dataset(std::span<const CotInput> inputs, QueryEngine& engine, const CotBuildOptions& opts,
                             std::span<const StageProfile> profiles = {});

nlohmann::json record_to_json(const CotRecord& record);
CotRecord record_from_json(const nlohmann::json& j);
// One JSON object per line.
std::string to_jsonl(std::span<const CotRecord> records);
std::vector<CotRecord> from_jsonl(const std::string& text);
// Instruction-tuning conversation format for the valid records.
nlohmann::json to_llava(std::span<const CotRecord> records);

}  // namespace eegvlm::cot
