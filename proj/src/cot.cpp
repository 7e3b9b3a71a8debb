#include "eegvlm/cot.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "eegvlm/digest.hpp"
#include "eegvlm/error.hpp"
#include "eegvlm/lm.hpp"

namespace eegvlm::cot {

std::vector<StageProfile> default_profiles() {
  return {
      {Stage::Wake, {"Alpha Waves"}},
      {Stage::N1, {"Low Amplitude Mixed Frequency (LAMF: Alpha, Beta)", "Vertex Sharp Waves"}},
      {Stage::N2, {"K-Complexes", "Sleep Spindles"}},
      {Stage::N3, {"Slow Waves"}},
      {Stage::REM, {"LAMF (Beta, Theta)", "Sawtooth Waves"}},
  };
}

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

const StageProfile* find_profile(std::span<const StageProfile> profiles, Stage stage) {
  for (const auto& p : profiles) {
    if (p.stage == stage) return &p;
  }
  return nullptr;
}

std::uint64_t hash64(const std::string& text) {
  const std::string hex = sha256_hex(text);
  return std::stoull(hex.substr(0, 16), nullptr, 16);
}

}  // namespace

std::vector<SubPrompt> build_stage_prompts(std::span<const StageProfile> profiles) {
  std::vector<SubPrompt> prompts;
  for (Stage s : kAllStages) {
    const StageProfile* p = find_profile(profiles, s);
    if (p == nullptr || p->descriptors.empty()) {
      throw Error(ErrorCode::MissingProfile, "no descriptor profile for stage " + std::string(stage_name(s)));
    }
    const std::string name(stage_name(s));
    std::string text = "You are scoring a 30-second single-channel EEG epoch shown as an image. Consider only stage " +
                       name + ". Look for the waveforms and the frequency and amplitude patterns typical of " +
                       name + ": " + join(p->descriptors, "; ") +
                       ". Start your reply with \"Evidence: present\" or \"Evidence: absent\" and then describe "
                       "what you see in one or two sentences.";
    prompts.push_back({s, std::move(text)});
  }
  return prompts;
}

std::string overall_question() {
  return "Analyze this EEG epoch stage by stage, checking the features of Wake, N1, N2, N3 and REM in turn, "
         "then state the sleep stage.";
}

StageAnalysis parse_analysis(Stage stage, const std::string& text) {
  const bool present = text.find("Evidence: present") != std::string::npos;
  const bool absent = text.find("Evidence: absent") != std::string::npos;
  if (present == absent) {
    throw Error(ErrorCode::MalformedResponse,
                "response for " + std::string(stage_name(stage)) + " lacks a single evidence marker");
  }
  return {stage, text, present};
}

// --- mock clients ---------------------------------------------------------------

void CannedClient::set(const std::string& image_digest, Stage stage, std::string text) {
  responses_[{image_digest, stage}] = std::move(text);
}

std::string CannedClient::complete(const VlmRequest& request) {
  const auto it = responses_.find({request.image_digest, request.stage});
  if (it == responses_.end()) throw Error(ErrorCode::ServiceUnavailable, "no canned response for request");
  return it->second;
}

namespace {

std::string oracle_text(Stage stage, bool present) {
  const auto profiles = default_profiles();
  const auto& d = profiles[stage_index(stage)].descriptors;
  if (present) return "Evidence: present. The trace shows " + join(d, " and ") + ".";
  return "Evidence: absent. No " + join(d, " or ") + " can be seen.";
}

}  // namespace

OracleClient::OracleClient(std::map<std::string, Stage> truth, double error_rate, std::uint64_t seed)
    : truth_(std::move(truth)), error_rate_(error_rate), seed_(seed) {}

std::string OracleClient::complete(const VlmRequest& request) {
  const auto it = truth_.find(request.image_digest);
  if (it == truth_.end()) throw Error(ErrorCode::ServiceUnavailable, "oracle has no label for image");
  bool present = it->second == request.stage;
  if (error_rate_ > 0.0) {
    const std::uint64_t h = hash64(std::to_string(seed_) + ":" + request.image_digest + ":" +
                                   std::string(stage_name(request.stage)));
    if (static_cast<double>(h >> 11) * 0x1.0p-53 < error_rate_) present = !present;
  }
  return oracle_text(request.stage, present);
}

std::string NeverLabelsClient::complete(const VlmRequest& request) { return oracle_text(request.stage, false); }

std::string FlakyClient::complete(const VlmRequest& request) {
  {
    std::lock_guard lock(mu_);
    ++attempts_;
    int& n = seen_[request.image_digest + "|" + request.prompt];
    if (n < failures_) {
      ++n;
      throw TransientFailure("injected fault");
    }
  }
  return inner_.complete(request);
}

long FlakyClient::attempts() const {
  std::lock_guard lock(mu_);
  return attempts_;
}

// --- HTTP client -----------------------------------------------------------------

HttpVlmClient::HttpVlmClient(HttpClientOptions opts) : opts_(std::move(opts)) {}

std::string HttpVlmClient::complete(const VlmRequest& request) {
  httplib::Client cli(opts_.base_url);
  const auto secs = static_cast<time_t>(opts_.timeout_s);
  const auto usecs = static_cast<time_t>((opts_.timeout_s - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (const char* key = std::getenv(opts_.api_key_env.c_str()); key != nullptr && *key != '\0') {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const nlohmann::json body = {
      {"model", opts_.model_id}, {"image_base64", base64_encode(request.png)}, {"prompt", request.prompt}};
  const auto res = cli.Post(opts_.path, headers, body.dump(), "application/json");
  if (!res) throw TransientFailure("HTTP request failed: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500) {
    throw TransientFailure("HTTP status " + std::to_string(res->status));
  }
  if (res->status != 200) {
    throw Error(ErrorCode::ServiceUnavailable, "VLM service answered HTTP " + std::to_string(res->status));
  }
  const auto parsed = nlohmann::json::parse(res->body, nullptr, false);
  if (parsed.is_discarded() || !parsed.contains("answer") || !parsed["answer"].is_string()) {
    throw Error(ErrorCode::MalformedResponse, "VLM response has no string \"answer\" field");
  }
  return parsed["answer"].get<std::string>();
}

// --- query engine ----------------------------------------------------------------

QueryEngine::QueryEngine(VlmClient& client, EngineOptions opts) : client_(client), opts_(std::move(opts)) {
  if (opts_.max_in_flight < 1) opts_.max_in_flight = 1;
  if (opts_.retry.max_attempts < 1) opts_.retry.max_attempts = 1;
  if (opts_.cache_dir) std::filesystem::create_directories(*opts_.cache_dir);
}

std::string QueryEngine::cache_key(const std::string& image_digest, const SubPrompt& prompt) const {
  return sha256_hex(image_digest + "\n" + sha256_hex(prompt.prompt_text) + "\n" + client_.model_id());
}

long QueryEngine::client_calls() const {
  std::lock_guard lock(mu_);
  return client_calls_;
}

long QueryEngine::cache_hits() const {
  std::lock_guard lock(mu_);
  return cache_hits_;
}

void QueryEngine::throttle() {
  if (opts_.requests_per_second <= 0.0) return;
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mu_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_slot_);
    next_slot_ = slot + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                            std::chrono::duration<double>(1.0 / opts_.requests_per_second));
  }
  std::this_thread::sleep_until(slot);
}

std::string QueryEngine::fetch(const VlmRequest& request) {
  auto backoff = opts_.retry.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    {
      std::unique_lock lock(mu_);
      slots_cv_.wait(lock, [&] { return in_flight_ < opts_.max_in_flight; });
      ++in_flight_;
      ++client_calls_;
    }
    throttle();
    auto release = [&] {
      std::lock_guard lock(mu_);
      --in_flight_;
      slots_cv_.notify_one();
    };
    try {
      std::string text = client_.complete(request);
      release();
      return text;
    } catch (const TransientFailure& e) {
      release();
      if (attempt >= opts_.retry.max_attempts) {
        throw Error(ErrorCode::ServiceUnavailable,
                    "VLM unavailable after " + std::to_string(attempt) + " attempts: " + e.what());
      }
    } catch (...) {
      release();
      throw;
    }
    std::this_thread::sleep_for(backoff);
    backoff = std::chrono::milliseconds(static_cast<long>(static_cast<double>(backoff.count()) * opts_.retry.multiplier));
  }
}

StageAnalysis QueryEngine::query(const std::string& image_digest, std::span<const std::uint8_t> png,
                                 const SubPrompt& prompt) {
  const std::string key = cache_key(image_digest, prompt);
  std::promise<std::string> promise;
  {
    std::unique_lock lock(mu_);
    if (const auto it = cache_.find(key); it != cache_.end()) {
      ++cache_hits_;
      return parse_analysis(prompt.stage, it->second);
    }
    if (opts_.cache_dir) {
      std::ifstream in(*opts_.cache_dir / (key + ".txt"), std::ios::binary);
      if (in) {
        std::ostringstream ss;
        ss << in.rdbuf();
        cache_[key] = ss.str();
        ++cache_hits_;
        return parse_analysis(prompt.stage, cache_[key]);
      }
    }
    if (const auto it = pending_.find(key); it != pending_.end()) {
      auto fut = it->second;
      lock.unlock();
      return parse_analysis(prompt.stage, fut.get());
    }
    pending_[key] = promise.get_future().share();
  }

  try {
    std::string text = fetch({image_digest, png, prompt.stage, prompt.prompt_text});
    StageAnalysis analysis = parse_analysis(prompt.stage, text);
    {
      std::lock_guard lock(mu_);
      cache_[key] = text;
      pending_.erase(key);
    }
    if (opts_.cache_dir) {
      const auto final_path = *opts_.cache_dir / (key + ".txt");
      const auto tmp = *opts_.cache_dir / (key + ".tmp");
      {
        std::ofstream out(tmp, std::ios::binary);
        out << text;
      }
      std::filesystem::rename(tmp, final_path);
    }
    promise.set_value(std::move(text));
    return analysis;
  } catch (...) {
    {
      std::lock_guard lock(mu_);
      pending_.erase(key);
    }
    promise.set_exception(std::current_exception());
    throw;
  }
}

// --- assembly ---------------------------------------------------------------------

std::vector<std::string> default_summary_bank() {
  return {
      "Taken together, the epoch is scored as {stage}.",
      "Overall, the most consistent sleep stage is {stage}.",
      "Weighing all of these findings, the answer is {stage}.",
      "In summary, this EEG epoch corresponds to {stage}.",
      "The combined evidence points to {stage}.",
      "Final decision: {stage}.",
      "After checking each candidate in turn, the epoch is best labeled {stage}.",
      "These observations support a classification of {stage}.",
  };
}

std::size_t summary_index(const std::string& image_digest, std::uint64_t seed, std::size_t bank_size) {
  if (bank_size == 0) throw Error(ErrorCode::InvalidSpec, "summary bank is empty");
  return hash64(std::to_string(seed) + "/" + image_digest) % bank_size;
}

namespace {

std::string format_sections(std::span<const StageAnalysis* const> ordered) {
  std::string out;
  for (const auto* a : ordered) {
    out += std::string(stage_name(a->stage)) + ": " + a->analysis_text + "\n";
  }
  return out;
}

std::array<const StageAnalysis*, kNumStages> order_analyses(std::span<const StageAnalysis> analyses) {
  std::array<const StageAnalysis*, kNumStages> ordered{};
  for (const auto& a : analyses) {
    auto& slot = ordered[stage_index(a.stage)];
    if (slot != nullptr) throw Error(ErrorCode::MissingAnalysis, "duplicate analysis for a stage");
    if (a.analysis_text.empty()) throw Error(ErrorCode::MissingAnalysis, "empty stage analysis");
    slot = &a;
  }
  for (Stage s : kAllStages) {
    if (ordered[stage_index(s)] == nullptr) {
      throw Error(ErrorCode::MissingAnalysis, "no analysis for stage " + std::string(stage_name(s)));
    }
  }
  return ordered;
}

}  // namespace

AssembledAnswer assemble_answer(std::span<const StageAnalysis> analyses, std::span<const std::string> summary_bank,
                                std::size_t selection) {
  const auto ordered = order_analyses(analyses);
  if (summary_bank.empty()) throw Error(ErrorCode::InvalidSpec, "summary bank is empty");
  int evident = 0;
  std::optional<Stage> chosen;
  for (Stage s : kEvidencePriority) {
    if (ordered[stage_index(s)]->evidence) {
      ++evident;
      if (!chosen) chosen = s;
    }
  }
  if (!chosen) throw Error(ErrorCode::NoDecidableLabel, "no stage reported evidence");

  std::string summary = summary_bank[selection % summary_bank.size()];
  const auto pos = summary.find("{stage}");
  if (pos == std::string::npos) throw Error(ErrorCode::InvalidSpec, "summary template lacks {stage}");
  summary.replace(pos, 7, stage_name(*chosen));

  AssembledAnswer out;
  out.reasoning = format_sections(ordered) + summary;
  out.final_label = lm::extract_stage(summary).label;
  out.conflict = evident > 1;
  return out;
}

// --- dataset ----------------------------------------------------------------------

CotDataset build_cot_dataset(std::span<const CotInput> inputs, QueryEngine& engine, const CotBuildOptions& opts,
                             std::span<const StageProfile> profiles) {
  const auto fallback = default_profiles();
  const auto prompts = build_stage_prompts(profiles.empty() ? std::span<const StageProfile>(fallback) : profiles);
  const auto bank = default_summary_bank();

  std::vector<std::size_t> selected;
  CotDataset out;
  for (Stage s : kAllStages) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i].ground_truth == s) idx.push_back(i);
    }
    if (static_cast<int>(idx.size()) < opts.per_class_quota && !opts.allow_short) {
      throw Error(ErrorCode::InsufficientData, "stage " + std::string(stage_name(s)) + " has " +
                                                   std::to_string(idx.size()) + " epochs, quota is " +
                                                   std::to_string(opts.per_class_quota));
    }
    std::mt19937_64 rng(opts.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(stage_index(s) + 1));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(0, opts.per_class_quota))));
    std::sort(idx.begin(), idx.end());
    selected.insert(selected.end(), idx.begin(), idx.end());
    out.counts.attempted[stage_index(s)] = static_cast<int>(idx.size());
  }

  // Fan out the five sub-prompts of every selected epoch.
  const std::size_t tasks = selected.size() * kNumStages;
  std::vector<std::optional<StageAnalysis>> results(tasks);
  std::vector<std::exception_ptr> errors(tasks);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks; t = next++) {
      const CotInput& in = inputs[selected[t / kNumStages]];
      try {
        results[t] = engine.query(in.image_digest, in.png, prompts[t % kNumStages]);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const int n = std::max(1, std::min<int>(opts.workers, static_cast<int>(std::max<std::size_t>(tasks, 1))));
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  }

  for (std::size_t r = 0; r < selected.size(); ++r) {
    const CotInput& in = inputs[selected[r]];
    CotRecord rec;
    rec.image_path = in.image_path;
    rec.image_digest = in.image_digest;
    rec.question = overall_question();
    rec.ground_truth = in.ground_truth;
    std::vector<StageAnalysis> analyses;
    bool malformed = false;
    for (int s = 0; s < kNumStages; ++s) {
      const std::size_t t = r * kNumStages + s;
      if (errors[t]) {
        try {
          std::rethrow_exception(errors[t]);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::MalformedResponse) throw;
          malformed = true;
        }
      } else {
        analyses.push_back(*results[t]);
      }
    }
    if (!malformed) {
      try {
        const auto answer = assemble_answer(analyses, bank, summary_index(in.image_digest, opts.seed, bank.size()));
        rec.reasoning = answer.reasoning;
        rec.final_label = answer.final_label;
        rec.conflict = answer.conflict;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NoDecidableLabel) throw;
        std::array<const StageAnalysis*, kNumStages> ordered{};
        for (const auto& a : analyses) ordered[stage_index(a.stage)] = &a;
        rec.reasoning = format_sections(ordered);
        rec.reasoning.pop_back();
      }
    }
    rec.valid = rec.final_label.has_value() && *rec.final_label == rec.ground_truth;
    if (rec.valid) ++out.counts.valid[stage_index(rec.ground_truth)];
    out.records.push_back(std::move(rec));
  }
  return out;
}

nlohmann::json record_to_json(const CotRecord& r) {
  nlohmann::json j = {{"image", r.image_path},
                      {"image_digest", r.image_digest},
                      {"question", r.question},
                      {"reasoning", r.reasoning},
                      {"ground_truth", stage_name(r.ground_truth)},
                      {"valid", r.valid},
                      {"conflict", r.conflict}};
  j["final_label"] = r.final_label ? nlohmann::json(stage_name(*r.final_label)) : nlohmann::json(nullptr);
  return j;
}

CotRecord record_from_json(const nlohmann::json& j) {
  auto stage_of = [](const nlohmann::json& v) {
    const auto s = parse_stage_name(v.get<std::string>());
    if (!s) throw Error(ErrorCode::UnknownLabel, "unknown stage '" + v.get<std::string>() + "'");
    return *s;
  };
  CotRecord r;
  try {
    r.image_path = j.at("image").get<std::string>();
    r.image_digest = j.at("image_digest").get<std::string>();
    r.question = j.at("question").get<std::string>();
    r.reasoning = j.at("reasoning").get<std::string>();
    r.ground_truth = stage_of(j.at("ground_truth"));
    if (!j.at("final_label").is_null()) r.final_label = stage_of(j.at("final_label"));
    r.valid = j.at("valid").get<bool>();
    r.conflict = j.at("conflict").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedResponse, std::string("bad CoT record: ") + e.what());
  }
  return r;
}

std::string to_jsonl(std::span<const CotRecord> records) {
  std::string out;
  for (const auto& r : records) out += record_to_json(r).dump() + "\n";
  return out;
}

std::vector<CotRecord> from_jsonl(const std::string& text) {
  std::vector<CotRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::MalformedResponse, "CoT log line is not valid JSON");
    out.push_back(record_from_json(j));
  }
  return out;
}

nlohmann::json to_llava(std::span<const CotRecord> records) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : records) {
    if (!r.valid) continue;
    out.push_back({{"id", r.image_digest.substr(0, 16)},
                   {"image", r.image_path},
                   {"conversations",
                    {{{"from", "human"}, {"value", "<image>\n" + r.question}}, {{"from", "gpt"}, {"value", r.reasoning}}}}});
  }
  return out;
}

}  // namespace eegvlm::cot
