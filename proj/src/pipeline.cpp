#include "eegvlm/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "eegvlm/align.hpp"
#include "eegvlm/checkpoint.hpp"
#include "eegvlm/digest.hpp"
#include "eegvlm/edf.hpp"
#include "eegvlm/error.hpp"
#include "eegvlm/eval.hpp"

namespace eegvlm::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// --- small file helpers -----------------------------------------------------------

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  const std::string s = read_text(path);
  return {s.begin(), s.end()};
}

// Atomic replace; returns false when the file already held this content.
bool write_if_changed(const fs::path& path, const std::string& content) {
  if (fs::exists(path) && read_text(path) == content) return false;
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << content;
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
  return true;
}

void require(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw Error(ErrorCode::MissingUpstream, "missing " + path.string() + " (run '" + producer + "' first)");
  }
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, '\t')) out.push_back(field);
  return out;
}

Stage stage_field(const std::string& s) {
  const auto st = parse_stage_name(s);
  if (!st) throw Error(ErrorCode::UnknownLabel, "unknown stage '" + s + "'");
  return *st;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw Error(ErrorCode::ConfigInvalid, "unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void get_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void log_line(const std::string& cmd, const std::string& msg) { std::cerr << "[" << cmd << "] " << msg << "\n"; }

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
  return std::stoull(sha256_hex(std::to_string(seed) + "/" + purpose).substr(0, 16), nullptr, 16);
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::MissingUpstream:
    case ErrorCode::InvalidSpec:
      return 1;
    default:
      return 2;
  }
}

// --- RunConfig -----------------------------------------------------------------------

vision::VisionConfig RunConfig::vision_config() const {
  vision::VisionConfig vc;
  vc.input_height = render.height_px;
  vc.input_width = render.width_px;
  vc.width_scale = vision_width_scale;
  return vc;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::ConfigInvalid, msg); };
  if (recordings.empty()) fail("no recordings configured");
  std::set<std::string> ids;
  for (const auto& r : recordings) {
    if (!fs::exists(r.psg)) fail("recording not found: " + r.psg.string());
    if (!fs::exists(r.hypnogram)) fail("hypnogram not found: " + r.hypnogram.string());
    if (r.source_id.empty() || r.source_id.find_first_of("/\\\t\n") != std::string::npos) {
      fail("invalid source id '" + r.source_id + "'");
    }
    if (!ids.insert(r.source_id).second) fail("duplicate source id '" + r.source_id + "'");
  }
  if (channel.empty()) fail("channel label is empty");
  if (filter.analog_order != 1) fail("only first-order band-pass filters are supported");
  if (!(filter.low_cut_hz > 0 && filter.low_cut_hz < filter.high_cut_hz)) fail("filter needs 0 < low < high");
  try {
    render.validate();
    vision_config().validate();
  } catch (const Error& e) {
    fail(e.what());
  }
  if (vision_train.epochs < 1 || vision_train.batch_size < 1 || !(vision_train.learning_rate > 0)) {
    fail("vision training needs positive epochs, batch size and learning rate");
  }
  if (!align::EncoderRegistry::global().is_known(encoder_id)) fail("unknown encoder id '" + encoder_id + "'");
  if (patch_px < 1 || render.width_px % patch_px != 0 || render.height_px % patch_px != 0) {
    fail("patch size must divide the image size");
  }
  if (!lm::LmRegistry::global().is_known(lm_id)) fail("unknown language model id '" + lm_id + "'");
  if (lm.embed_dim < 1 || lm.heads < 1 || lm.embed_dim % lm.heads != 0 || lm.layers < 1 || lm.mlp_mult < 1 ||
      lm.max_positions < 2) {
    fail("invalid language model shape");
  }
  if (max_new_tokens < 1) fail("max_new_tokens must be positive");
  if (joint_train.epochs < 1 || joint_train.batch_size < 1 || !(joint_train.learning_rate > 0)) {
    fail("joint training needs positive epochs, batch size and learning rate");
  }
  if (cot.client != "oracle" && cot.client != "never" && cot.client != "http") {
    fail("cot.client must be oracle, never or http");
  }
  if (cot.per_class_quota < 1 || cot.max_in_flight < 1 || cot.max_attempts < 1 || cot.initial_backoff_ms < 0) {
    fail("invalid CoT client settings");
  }
  if (cot.oracle_error_rate < 0 || cot.oracle_error_rate > 1) fail("cot.oracle_error_rate must be in [0, 1]");
  if (test_per_class < 1) fail("split.test_per_class must be positive");
  try {
    joint::preset_by_name(preset);
  } catch (const Error& e) {
    fail(e.what());
  }
  if (out_dir.empty()) fail("out_dir is empty");
}

json RunConfig::to_json() const {
  json recs = json::array();
  for (const auto& r : recordings) {
    recs.push_back({{"psg", r.psg.string()}, {"hypnogram", r.hypnogram.string()}, {"source_id", r.source_id}});
  }
  return {
      {"recordings", recs},
      {"channel", channel},
      {"filter", {{"order", filter.analog_order}, {"low_cut_hz", filter.low_cut_hz}, {"high_cut_hz", filter.high_cut_hz}}},
      {"render",
       {{"width_px", render.width_px},
        {"height_px", render.height_px},
        {"amplitude_range_uv", render.amplitude_range_uv},
        {"line_width_px", render.line_width_px},
        {"margins_px", render.margins_px}}},
      {"vision",
       {{"width_scale", vision_width_scale},
        {"epochs", vision_train.epochs},
        {"learning_rate", vision_train.learning_rate},
        {"batch_size", vision_train.batch_size}}},
      {"encoder", {{"id", encoder_id}, {"patch_px", patch_px}}},
      {"lm",
       {{"id", lm_id},
        {"embed_dim", lm.embed_dim},
        {"layers", lm.layers},
        {"heads", lm.heads},
        {"mlp_mult", lm.mlp_mult},
        {"max_positions", lm.max_positions},
        {"max_new_tokens", max_new_tokens}}},
      {"joint",
       {{"epochs", joint_train.epochs},
        {"learning_rate", joint_train.learning_rate},
        {"batch_size", joint_train.batch_size}}},
      {"cot",
       {{"client", cot.client},
        {"per_class_quota", cot.per_class_quota},
        {"allow_short", cot.allow_short},
        {"oracle_error_rate", cot.oracle_error_rate},
        {"max_in_flight", cot.max_in_flight},
        {"requests_per_second", cot.requests_per_second},
        {"max_attempts", cot.max_attempts},
        {"initial_backoff_ms", cot.initial_backoff_ms},
        {"http",
         {{"base_url", cot.http.base_url},
          {"path", cot.http.path},
          {"model_id", cot.http.model_id},
          {"api_key_env", cot.http.api_key_env},
          {"timeout_s", cot.http.timeout_s}}}}},
      {"split", {{"test_per_class", test_per_class}}},
      {"preset", preset},
      {"seed", seed},
      {"out_dir", out_dir.string()},
  };
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  RunConfig c;
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  try {
    check_keys(j,
               {"recordings", "channel", "filter", "render", "vision", "encoder", "lm", "joint", "cot", "split",
                "preset", "seed", "out_dir"},
               "config");
    if (j.contains("recordings")) {
      for (const auto& r : j.at("recordings")) {
        check_keys(r, {"psg", "hypnogram", "source_id"}, "recordings[]");
        RecordingPaths rp{resolve(r.at("psg").get<std::string>()), resolve(r.at("hypnogram").get<std::string>()),
                          r.value("source_id", std::string())};
        if (rp.source_id.empty()) rp.source_id = rp.psg.stem().string();
        c.recordings.push_back(std::move(rp));
      }
    }
    get_opt(j, "channel", c.channel);
    if (j.contains("filter")) {
      const auto& f = j.at("filter");
      check_keys(f, {"order", "low_cut_hz", "high_cut_hz"}, "filter");
      get_opt(f, "order", c.filter.analog_order);
      get_opt(f, "low_cut_hz", c.filter.low_cut_hz);
      get_opt(f, "high_cut_hz", c.filter.high_cut_hz);
    }
    if (j.contains("render")) {
      const auto& r = j.at("render");
      check_keys(r, {"width_px", "height_px", "amplitude_range_uv", "line_width_px", "margins_px"}, "render");
      get_opt(r, "width_px", c.render.width_px);
      get_opt(r, "height_px", c.render.height_px);
      get_opt(r, "amplitude_range_uv", c.render.amplitude_range_uv);
      get_opt(r, "line_width_px", c.render.line_width_px);
      get_opt(r, "margins_px", c.render.margins_px);
    }
    if (j.contains("vision")) {
      const auto& v = j.at("vision");
      check_keys(v, {"width_scale", "epochs", "learning_rate", "batch_size"}, "vision");
      get_opt(v, "width_scale", c.vision_width_scale);
      get_opt(v, "epochs", c.vision_train.epochs);
      get_opt(v, "learning_rate", c.vision_train.learning_rate);
      get_opt(v, "batch_size", c.vision_train.batch_size);
    }
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      check_keys(e, {"id", "patch_px"}, "encoder");
      get_opt(e, "id", c.encoder_id);
      get_opt(e, "patch_px", c.patch_px);
    }
    if (j.contains("lm")) {
      const auto& l = j.at("lm");
      check_keys(l, {"id", "embed_dim", "layers", "heads", "mlp_mult", "max_positions", "max_new_tokens"}, "lm");
      get_opt(l, "id", c.lm_id);
      get_opt(l, "embed_dim", c.lm.embed_dim);
      get_opt(l, "layers", c.lm.layers);
      get_opt(l, "heads", c.lm.heads);
      get_opt(l, "mlp_mult", c.lm.mlp_mult);
      get_opt(l, "max_positions", c.lm.max_positions);
      get_opt(l, "max_new_tokens", c.max_new_tokens);
    }
    if (j.contains("joint")) {
      const auto& t = j.at("joint");
      check_keys(t, {"epochs", "learning_rate", "batch_size"}, "joint");
      get_opt(t, "epochs", c.joint_train.epochs);
      get_opt(t, "learning_rate", c.joint_train.learning_rate);
      get_opt(t, "batch_size", c.joint_train.batch_size);
    }
    if (j.contains("cot")) {
      const auto& t = j.at("cot");
      check_keys(t,
                 {"client", "per_class_quota", "allow_short", "oracle_error_rate", "max_in_flight",
                  "requests_per_second", "max_attempts", "initial_backoff_ms", "http"},
                 "cot");
      get_opt(t, "client", c.cot.client);
      get_opt(t, "per_class_quota", c.cot.per_class_quota);
      get_opt(t, "allow_short", c.cot.allow_short);
      get_opt(t, "oracle_error_rate", c.cot.oracle_error_rate);
      get_opt(t, "max_in_flight", c.cot.max_in_flight);
      get_opt(t, "requests_per_second", c.cot.requests_per_second);
      get_opt(t, "max_attempts", c.cot.max_attempts);
      get_opt(t, "initial_backoff_ms", c.cot.initial_backoff_ms);
      if (t.contains("http")) {
        const auto& h = t.at("http");
        check_keys(h, {"base_url", "path", "model_id", "api_key_env", "timeout_s"}, "cot.http");
        get_opt(h, "base_url", c.cot.http.base_url);
        get_opt(h, "path", c.cot.http.path);
        get_opt(h, "model_id", c.cot.http.model_id);
        get_opt(h, "api_key_env", c.cot.http.api_key_env);
        get_opt(h, "timeout_s", c.cot.http.timeout_s);
      }
    }
    if (j.contains("split")) {
      check_keys(j.at("split"), {"test_per_class"}, "split");
      get_opt(j.at("split"), "test_per_class", c.test_per_class);
    }
    get_opt(j, "preset", c.preset);
    get_opt(j, "seed", c.seed);
    if (j.contains("out_dir")) c.out_dir = resolve(j.at("out_dir").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("bad config value: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::ConfigInvalid, "config file not found: " + path.string());
  const auto j = json::parse(read_text(path), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::ConfigInvalid, "config is not valid JSON: " + path.string());
  return from_json(j, path.parent_path());
}

std::string RunConfig::digest() const {
  json j = to_json();
  j.erase("out_dir");
  return sha256_hex(j.dump()).substr(0, 16);
}

// --- preprocess ---------------------------------------------------------------------

CommandResult cmd_preprocess(const RunConfig& cfg) {
  cfg.validate();
  CommandResult result;
  const fs::path epochs_dir = cfg.out_dir / "epochs";
  fs::create_directories(epochs_dir);
  std::string manifest;
  long total = 0, reused = 0;
  for (const auto& rec : cfg.recordings) {
    try {
      const auto psg_bytes = read_bytes(rec.psg);
      const auto hyp_bytes = read_bytes(rec.hypnogram);
      const fs::path store = epochs_dir / rec.source_id;
      const std::string input_digest =
          sha256_hex(sha256_hex(psg_bytes) + sha256_hex(hyp_bytes) + cfg.channel + std::to_string(cfg.filter.low_cut_hz) +
                     "/" + std::to_string(cfg.filter.high_cut_hz) + "/" + std::to_string(cfg.filter.analog_order));
      std::vector<preprocess::LabeledEpoch> epochs;
      if (fs::exists(store / "input.digest") && read_text(store / "input.digest") == input_digest) {
        epochs = preprocess::read_epoch_store(epochs_dir, rec.source_id);
        ++reused;
      } else {
        const auto psg = edf::parse_edf(psg_bytes);
        const auto hyp = edf::parse_edf(hyp_bytes);
        const auto channel = edf::select_channel(psg, cfg.channel);
        const auto labels = edf::map_stage_labels(hyp.annotations);
        preprocess::FilterSpec spec = cfg.filter;
        spec.sampling_rate_hz = channel.sampling_rate_hz;
        const auto filtered =
            preprocess::apply_filter(channel.samples, preprocess::design_bandpass(spec), preprocess::FilterMode::ZeroPhase);
        epochs = preprocess::segment_epochs(filtered, channel.sampling_rate_hz, labels, rec.source_id);
        preprocess::write_epoch_store(epochs_dir, rec.source_id, channel.sampling_rate_hz, epochs);
        write_if_changed(store / "input.digest", input_digest);
      }
      if (epochs.empty()) {
        result.warnings.push_back(rec.source_id + ": no scorable epochs (all excluded)");
      }
      for (const auto& e : epochs) {
        manifest += rec.source_id + "\t" + std::to_string(e.epoch_index) + "\t" + std::string(stage_name(e.stage)) + "\n";
      }
      total += static_cast<long>(epochs.size());
    } catch (const Error& e) {
      if (!cfg.skip_bad) throw;
      result.warnings.push_back("skipped " + rec.source_id + ": " + e.what());
    }
  }
  write_if_changed(epochs_dir / "manifest.tsv", manifest);
  result.summary = std::to_string(total) + " epochs from " + std::to_string(cfg.recordings.size()) + " recording(s)" +
                   (reused > 0 ? ", " + std::to_string(reused) + " unchanged" : "");
  return result;
}

// --- render -------------------------------------------------------------------------

std::vector<ImageEntry> read_image_manifest(const fs::path& out_dir) {
  const fs::path path = out_dir / "images" / "manifest.tsv";
  require(path, "render");
  std::vector<ImageEntry> out;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 6) throw Error(ErrorCode::IoFailure, "malformed image manifest line: " + line);
    out.push_back({f[0], f[1], std::stoi(f[2]), stage_field(f[3]), f[4], f[5]});
  }
  return out;
}

namespace {

std::string format_image_manifest(const std::vector<ImageEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    out += e.file + "\t" + e.source_id + "\t" + std::to_string(e.epoch_index) + "\t" + std::string(stage_name(e.stage)) +
           "\t" + e.input_digest + "\t" + e.image_digest + "\n";
  }
  return out;
}

}  // namespace

CommandResult cmd_render(const RunConfig& cfg) {
  cfg.validate();
  const fs::path epochs_manifest = cfg.out_dir / "epochs" / "manifest.tsv";
  require(epochs_manifest, "preprocess");
  std::vector<std::string> sources;
  {
    std::istringstream in(read_text(epochs_manifest));
    std::string line;
    while (std::getline(in, line)) {
      const auto f = split_tabs(line);
      if (!f.empty() && (sources.empty() || sources.back() != f[0])) sources.push_back(f[0]);
    }
  }
  const fs::path images_dir = cfg.out_dir / "images";
  fs::create_directories(images_dir);
  std::map<std::string, ImageEntry> previous;
  if (fs::exists(images_dir / "manifest.tsv")) {
    for (auto& e : read_image_manifest(cfg.out_dir)) previous[e.file] = e;
  }
  const std::string render_digest = cfg.render.digest();
  std::vector<ImageEntry> entries;
  long written = 0, unchanged = 0;
  for (const auto& source : sources) {
    for (const auto& epoch : preprocess::read_epoch_store(cfg.out_dir / "epochs", source)) {
      ImageEntry entry;
      entry.file = render::image_filename(source, epoch.epoch_index, epoch.stage);
      entry.source_id = source;
      entry.epoch_index = epoch.epoch_index;
      entry.stage = epoch.stage;
      entry.input_digest = sha256_hex(
          std::span(reinterpret_cast<const std::uint8_t*>(epoch.samples.data()), epoch.samples.size() * sizeof(double))) ;
      entry.input_digest = sha256_hex(entry.input_digest + render_digest);
      const fs::path png_path = images_dir / entry.file;
      const auto it = previous.find(entry.file);
      if (it != previous.end() && it->second.input_digest == entry.input_digest && fs::exists(png_path) &&
          sha256_hex(read_bytes(png_path)) == it->second.image_digest) {
        entry.image_digest = it->second.image_digest;
        ++unchanged;
      } else {
        const auto png = render::encode_png(render::render_epoch(epoch, cfg.render));
        entry.image_digest = sha256_hex(png);
        write_if_changed(png_path, std::string(png.begin(), png.end()));
        ++written;
      }
      entries.push_back(std::move(entry));
    }
  }
  write_if_changed(images_dir / "manifest.tsv", format_image_manifest(entries));
  return {std::to_string(entries.size()) + " images: " + std::to_string(written) + " written, " +
              std::to_string(unchanged) + " unchanged",
          {}};
}

// --- shared model loading --------------------------------------------------------------

namespace {

fs::path vision_ckpt(const RunConfig& cfg) { return cfg.out_dir / "vision" / "model.ckpt"; }
fs::path split_path(const RunConfig& cfg) { return cfg.out_dir / "vision" / "split.tsv"; }
fs::path joint_dir(const RunConfig& cfg) { return cfg.out_dir / "joint" / cfg.preset; }
fs::path eval_dir(const RunConfig& cfg, const std::string& preset) { return cfg.out_dir / "eval" / preset; }

// file -> true when held out for testing.
std::map<std::string, bool> read_split(const RunConfig& cfg) {
  require(split_path(cfg), "train-vision");
  std::map<std::string, bool> out;
  std::istringstream in(read_text(split_path(cfg)));
  std::string line;
  while (std::getline(in, line)) {
    const auto f = split_tabs(line);
    if (f.size() == 2) out[f[0]] = f[1] == "test";
  }
  return out;
}

vision::VisionModel load_vision(const RunConfig& cfg) {
  require(vision_ckpt(cfg), "train-vision");
  const auto archive = checkpoint::load(vision_ckpt(cfg));
  const auto vc = vision::VisionConfig::from_json(archive.manifest.at("vision_config"));
  vision::VisionModel model(vc, 0);
  model.load_archive(archive);
  return model;
}

std::unique_ptr<align::LowLevelEncoder> make_encoder(const RunConfig& cfg, int feature_dim) {
  align::EncoderOptions opts;
  opts.patch_px = cfg.patch_px;
  opts.feature_dim = feature_dim;
  opts.seed = derive_seed(cfg.seed, "encoder");
  return align::EncoderRegistry::global().create(cfg.encoder_id, opts);
}

struct ImageFeatures {
  align::PatchTokens z_v;
  vision::SemanticFeature z_f;
};

ImageFeatures features_for(const fs::path& png, vision::VisionModel& vision, const align::LowLevelEncoder& encoder,
                           bool keep_spatial) {
  const auto image = render::read_png(png);
  return {encoder.encode(image), vision.forward_features(vision::image_to_tensor(image), keep_spatial)};
}

void require_toy_lm(const RunConfig& cfg) {
  if (cfg.lm_id != "toy-lm") {
    // Plug-in models carry their own tuning; the registry reports whether one is installed.
    lm::LmRegistry::global().create(cfg.lm_id);
    throw Error(ErrorCode::ModelUnavailable, "joint tuning of plug-in model '" + cfg.lm_id + "' is delegated to the plug-in");
  }
}

}  // namespace

// --- train-vision -------------------------------------------------------------------------

CommandResult cmd_train_vision(const RunConfig& cfg) {
  cfg.validate();
  const auto entries = read_image_manifest(cfg.out_dir);
  std::vector<Stage> labels;
  for (const auto& e : entries) labels.push_back(e.stage);
  const auto split = eval::split_dataset(labels, cfg.test_per_class, derive_seed(cfg.seed, "split"));
  std::vector<bool> is_test(entries.size(), false);
  for (std::size_t i : split.test) is_test[i] = true;
  std::string split_text;
  for (std::size_t i = 0; i < entries.size(); ++i) split_text += entries[i].file + (is_test[i] ? "\ttest\n" : "\ttrain\n");
  write_if_changed(split_path(cfg), split_text);

  vision::TrainConfig tc = cfg.vision_train;
  tc.seed = derive_seed(cfg.seed, "vision-train");
  const auto vc = cfg.vision_config();
  const std::string input_digest = sha256_hex(
      read_text(cfg.out_dir / "images" / "manifest.tsv") + split_text + vc.to_json().dump() +
      json{{"epochs", tc.epochs}, {"lr", tc.learning_rate}, {"batch", tc.batch_size}, {"seed", tc.seed}}.dump());
  if (fs::exists(vision_ckpt(cfg))) {
    const auto existing = checkpoint::load(vision_ckpt(cfg));
    if (existing.manifest.value("input_digest", std::string()) == input_digest) {
      return {"vision checkpoint up to date", {}};
    }
  }

  std::vector<nn::Tensor> images;
  std::vector<Stage> train_labels;
  for (std::size_t i : split.train) {
    images.push_back(vision::image_to_tensor(render::read_png(cfg.out_dir / "images" / entries[i].file)));
    train_labels.push_back(entries[i].stage);
  }
  vision::VisionModel model(vc, derive_seed(cfg.seed, "vision-init"));
  const auto result = vision::train_vision(model, images, train_labels, tc, [](const vision::EpochLog& log) {
    log_line("train-vision", "epoch " + std::to_string(log.epoch) + " loss " + std::to_string(log.loss) + " acc " +
                                 std::to_string(log.accuracy));
  });
  auto archive = model.to_archive();
  archive.manifest["input_digest"] = input_digest;
  archive.manifest["train_config"] = {{"epochs", tc.epochs}, {"learning_rate", tc.learning_rate}, {"batch_size", tc.batch_size}};
  checkpoint::save(vision_ckpt(cfg), archive);
  write_if_changed(cfg.out_dir / "vision" / "training_log.csv", vision::training_log_csv(result.epochs));
  const auto& last = result.epochs.back();
  return {"trained on " + std::to_string(images.size()) + " images, held out " + std::to_string(split.test.size()) +
              "; final loss " + std::to_string(last.loss) + ", train accuracy " + std::to_string(last.accuracy),
          {}};
}

// --- gen-cot --------------------------------------------------------------------------------

CommandResult cmd_gen_cot(const RunConfig& cfg) {
  cfg.validate();
  const auto entries = read_image_manifest(cfg.out_dir);
  const auto split = read_split(cfg);
  std::vector<cot::CotInput> inputs;
  std::map<std::string, Stage> truth;
  for (const auto& e : entries) {
    const auto it = split.find(e.file);
    if (it == split.end()) throw Error(ErrorCode::MissingUpstream, "split.tsv does not list " + e.file + "; rerun train-vision");
    if (it->second) continue;
    inputs.push_back({"images/" + e.file, e.image_digest, read_bytes(cfg.out_dir / "images" / e.file), e.stage});
    truth[e.image_digest] = e.stage;
  }

  std::unique_ptr<cot::VlmClient> client;
  if (cfg.cot.client == "oracle") {
    client = std::make_unique<cot::OracleClient>(truth, cfg.cot.oracle_error_rate, derive_seed(cfg.seed, "oracle"));
  } else if (cfg.cot.client == "never") {
    client = std::make_unique<cot::NeverLabelsClient>();
  } else {
    client = std::make_unique<cot::HttpVlmClient>(cfg.cot.http);
  }
  cot::EngineOptions eo;
  eo.retry.max_attempts = cfg.cot.max_attempts;
  eo.retry.initial_backoff = std::chrono::milliseconds(cfg.cot.initial_backoff_ms);
  eo.max_in_flight = cfg.cot.max_in_flight;
  eo.requests_per_second = cfg.cot.requests_per_second;
  eo.cache_dir = cfg.out_dir / "cot" / "cache";
  cot::QueryEngine engine(*client, eo);

  cot::CotBuildOptions bo;
  bo.per_class_quota = cfg.cot.per_class_quota;
  bo.allow_short = cfg.cot.allow_short;
  bo.seed = derive_seed(cfg.seed, "cot");
  bo.workers = cfg.cot.max_in_flight;
  const auto ds = cot::build_cot_dataset(inputs, engine, bo);

  const fs::path dir = cfg.out_dir / "cot";
  write_if_changed(dir / "records.jsonl", cot::to_jsonl(ds.records));
  write_if_changed(dir / "llava.json", cot::to_llava(ds.records).dump(1) + "\n");
  std::ostringstream summary;
  int attempted = 0, valid = 0, conflicts = 0;
  summary << "stage\tattempted\tvalid\n";
  for (Stage s : kAllStages) {
    summary << stage_name(s) << "\t" << ds.counts.attempted[stage_index(s)] << "\t" << ds.counts.valid[stage_index(s)]
            << "\n";
    attempted += ds.counts.attempted[stage_index(s)];
    valid += ds.counts.valid[stage_index(s)];
  }
  for (const auto& r : ds.records) conflicts += r.conflict ? 1 : 0;
  summary << "total\t" << attempted << "\t" << valid << "\nconflicts\t" << conflicts << "\n";
  write_if_changed(dir / "summary.txt", summary.str());
  return {std::to_string(valid) + " valid of " + std::to_string(attempted) + " attempted (" +
              std::to_string(engine.client_calls()) + " client calls, " + std::to_string(engine.cache_hits()) +
              " cache hits)",
          {}};
}

// --- train-joint ------------------------------------------------------------------------------

CommandResult cmd_train_joint(const RunConfig& cfg) {
  cfg.validate();
  require_toy_lm(cfg);
  const auto preset = joint::preset_by_name(cfg.preset);
  const fs::path records_path = cfg.out_dir / "cot" / "records.jsonl";
  require(records_path, "gen-cot");
  const std::string records_text = read_text(records_path);
  const auto records = cot::from_jsonl(records_text);
  auto vision = load_vision(cfg);
  const int feature_dim = vision.config().final_channels();
  const auto encoder = make_encoder(cfg, feature_dim);

  joint::JointTrainConfig tc = cfg.joint_train;
  tc.seed = derive_seed(cfg.seed, "joint-train");
  const std::string input_digest = sha256_hex(
      records_text + checkpoint::load(vision_ckpt(cfg)).manifest.value("input_digest", std::string()) +
      json{{"lm", cfg.to_json()["lm"]}, {"joint", cfg.to_json()["joint"]}, {"encoder", cfg.to_json()["encoder"]},
           {"preset", cfg.preset}, {"seed", cfg.seed}}
          .dump());
  const fs::path ckpt = joint_dir(cfg) / "model.ckpt";
  if (fs::exists(ckpt) && checkpoint::load(ckpt).manifest.value("input_digest", std::string()) == input_digest) {
    return {"joint checkpoint up to date", {}};
  }

  std::vector<joint::JointSample> samples;
  for (const auto& r : records) {
    if (!r.valid) continue;
    auto f = features_for(cfg.out_dir / r.image_path, vision, *encoder, false);
    samples.push_back({std::move(f.z_v), std::move(f.z_f.pooled), r.question,
                       preset.chain_of_thought ? r.reasoning : joint::label_answer(r.ground_truth), r.ground_truth});
  }
  if (samples.empty()) throw Error(ErrorCode::EmptyDataset, "no valid CoT records to train on");

  auto tokenizer = joint::build_tokenizer(samples);
  joint::JointModel model(preset, feature_dim, cfg.lm, tokenizer, derive_seed(cfg.seed, "joint-init"));
  std::size_t longest = 0;
  for (const auto& s : samples) {
    const std::size_t visual = preset.wiring == joint::Wiring::PatchAligned ? 2 * s.z_v.count()
                               : preset.wiring == joint::Wiring::RawHf      ? s.z_v.count() + 1
                                                                           : s.z_v.count();
    longest = std::max(longest, visual + tokenizer.encode(s.question).size() + 1 + tokenizer.encode(s.answer).size());
  }
  if (static_cast<int>(longest) > cfg.lm.max_positions) {
    throw Error(ErrorCode::ConfigInvalid, "training sequences reach " + std::to_string(longest) +
                                              " rows; raise lm.max_positions");
  }

  std::string log_csv = "epoch,loss\n";
  const auto log = joint::train_joint(model, samples, tc, [&](const joint::JointEpochLog& l) {
    log_line("train-joint", cfg.preset + " epoch " + std::to_string(l.epoch) + " loss " + std::to_string(l.loss));
  });
  for (const auto& l : log) log_csv += std::to_string(l.epoch) + "," + std::to_string(l.loss) + "\n";
  auto archive = model.to_archive();
  archive.manifest["input_digest"] = input_digest;
  archive.manifest["encoder"] = {{"id", cfg.encoder_id}, {"patch_px", cfg.patch_px}};
  checkpoint::save(ckpt, archive);
  write_if_changed(joint_dir(cfg) / "training_log.csv", log_csv);
  return {"preset " + cfg.preset + ": trained on " + std::to_string(samples.size()) + " records, final loss " +
              std::to_string(log.back().loss),
          {}};
}

// --- evaluate ---------------------------------------------------------------------------------

CommandResult cmd_evaluate(const RunConfig& cfg) {
  cfg.validate();
  const fs::path ckpt = joint_dir(cfg) / "model.ckpt";
  require(ckpt, "train-joint --preset " + cfg.preset);
  const auto entries = read_image_manifest(cfg.out_dir);
  const auto split = read_split(cfg);
  auto vision = load_vision(cfg);
  const auto archive = checkpoint::load(ckpt);
  const auto model = joint::JointModel::from_archive(archive);
  if (model.preset().name != cfg.preset) {
    throw Error(ErrorCode::MissingUpstream, "checkpoint " + ckpt.string() + " was trained with preset " + model.preset().name);
  }
  const auto encoder = make_encoder(cfg, model.feature_dim());

  const fs::path dir = eval_dir(cfg, cfg.preset);
  const std::string input_digest = sha256_hex(archive.manifest.value("input_digest", std::string()) +
                                              read_text(split_path(cfg)) + std::to_string(cfg.max_new_tokens));
  if (fs::exists(dir / "input.digest") && fs::exists(dir / "predictions.tsv") &&
      read_text(dir / "input.digest") == input_digest) {
    return {"predictions up to date", {}};
  }

  std::vector<int> truth, pred, head_pred;
  long unparsed = 0;
  std::string predictions;
  const std::string question = cot::overall_question();
  for (const auto& e : entries) {
    const auto it = split.find(e.file);
    if (it == split.end() || !it->second) continue;
    const auto f = features_for(cfg.out_dir / "images" / e.file, vision, *encoder, true);
    const std::string text = model.answer(f.z_v, f.z_f.pooled, question, cfg.max_new_tokens);
    int p;
    bool parsed = true;
    try {
      p = stage_index(lm::extract_stage(text).label);
    } catch (const Error& err) {
      if (err.code() != ErrorCode::NoStageFound) throw;
      // Unparseable answers count as wrong.
      p = (stage_index(e.stage) + 1) % kNumStages;
      parsed = false;
      ++unparsed;
    }
    const std::string raw = "raw/" + fs::path(e.file).stem().string() + ".txt";
    write_if_changed(dir / raw, text + "\n");
    predictions += e.file + "\t" + std::string(stage_name(e.stage)) + "\t" + std::string(stage_name(stage_from_index(p))) +
                   "\t" + (parsed ? "1" : "0") + "\t" + raw + "\n";
    truth.push_back(stage_index(e.stage));
    pred.push_back(p);
    head_pred.push_back(stage_index(vision.classify(f.z_f).argmax()));
  }
  if (truth.empty()) throw Error(ErrorCode::EmptyDataset, "split has no test images");
  write_if_changed(dir / "predictions.tsv", predictions);

  const auto bundle = eval::metrics(eval::confusion(truth, pred));
  const auto head = eval::metrics(eval::confusion(truth, head_pred));
  eval::RunMetadata meta;
  meta.title = "preset " + cfg.preset;
  meta.config_digest = cfg.digest();
  meta.extra = {{"preset", cfg.preset},
                {"scored", std::to_string(truth.size())},
                {"unparseable", std::to_string(unparsed)},
                {"vision_head_accuracy", std::to_string(head.accuracy)}};
  write_if_changed(dir / "metrics.txt", eval::format_metrics_file(bundle, meta));
  write_if_changed(dir / "input.digest", input_digest);
  CommandResult result{"preset " + cfg.preset + ": accuracy " + std::to_string(bundle.accuracy) + ", kappa " +
                           std::to_string(bundle.kappa) + " on " + std::to_string(truth.size()) + " test epochs",
                       {}};
  if (unparsed > 0) result.warnings.push_back(std::to_string(unparsed) + " answers named no stage");
  return result;
}

// --- report -----------------------------------------------------------------------------------

CommandResult cmd_report(const RunConfig& cfg) {
  cfg.validate();
  std::vector<std::string> presets;
  if (fs::exists(cfg.out_dir / "eval")) {
    for (const auto& d : fs::directory_iterator(cfg.out_dir / "eval")) {
      if (fs::exists(d.path() / "predictions.tsv")) presets.push_back(d.path().filename().string());
    }
  }
  std::sort(presets.begin(), presets.end());
  if (std::find(presets.begin(), presets.end(), cfg.preset) == presets.end()) {
    require(eval_dir(cfg, cfg.preset) / "predictions.tsv", "evaluate --preset " + cfg.preset);
  }
  std::ostringstream grid;
  grid << "preset\taccuracy\tmf1\tkappa\n";
  for (const auto& preset : presets) {
    std::vector<int> truth, pred;
    std::istringstream in(read_text(eval_dir(cfg, preset) / "predictions.tsv"));
    std::string line;
    long unparsed = 0;
    while (std::getline(in, line)) {
      const auto f = split_tabs(line);
      if (f.size() < 4) continue;
      truth.push_back(stage_index(stage_field(f[1])));
      pred.push_back(stage_index(stage_field(f[2])));
      unparsed += f[3] == "0" ? 1 : 0;
    }
    const auto cm = eval::confusion(truth, pred);
    const auto bundle = eval::metrics(cm);
    eval::RunMetadata meta;
    meta.title = "preset " + preset;
    meta.config_digest = cfg.digest();
    meta.extra = {{"preset", preset}, {"scored", std::to_string(truth.size())}, {"unparseable", std::to_string(unparsed)}};
    eval::report(bundle, cm, meta, cfg.out_dir / "report" / preset);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s\t%.3f\t%.3f\t%.3f\n", preset.c_str(), bundle.accuracy, bundle.macro_f1,
                  bundle.kappa);
    grid << buf;
  }
  write_if_changed(cfg.out_dir / "report" / "presets.tsv", grid.str());
  return {"reports for " + std::to_string(presets.size()) + " preset(s) in " + (cfg.out_dir / "report").string(), {}};
}

}  // namespace eegvlm::pipeline
