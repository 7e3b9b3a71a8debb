#include <fstream>
#include <functional>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "eegvlm/error.hpp"
#include "eegvlm/pipeline.hpp"
#include "eegvlm/synth.hpp"

using namespace eegvlm;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool skip_bad = false;
  std::string preset;
};

pipeline::RunConfig load_config(const Overrides& o) {
  auto cfg = pipeline::RunConfig::load(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.skip_bad) cfg.skip_bad = true;
  if (!o.preset.empty()) cfg.preset = o.preset;
  return cfg;
}

void print(const std::string& name, const pipeline::CommandResult& r) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << name << ": " << r.summary << "\n";
}

// Desk-scale fixture: EDF recordings plus a config that runs end to end.
int write_fixture(const std::filesystem::path& dir, int per_class, int recordings, std::uint64_t seed, int width_px,
                  int height_px) {
  const auto stages = synth::balanced_sequence(per_class, seed);
  nlohmann::json recs = nlohmann::json::array();
  const std::size_t chunk = (stages.size() + recordings - 1) / recordings;
  for (int r = 0; r < recordings; ++r) {
    const std::size_t begin = std::min(stages.size(), r * chunk);
    const std::size_t end = std::min(stages.size(), begin + chunk);
    const std::string id = "SYN" + std::to_string(r);
    synth::RecordingOptions opts;
    opts.seed = seed + 1000 + r;
    opts.trailing_unknown = true;
    const auto files = synth::write_recording(dir, id, std::span(stages).subspan(begin, end - begin), opts);
    recs.push_back({{"psg", files.psg.filename().string()},
                    {"hypnogram", files.hypnogram.filename().string()},
                    {"source_id", id}});
  }
  const int test_per_class = std::max(1, per_class / 5);
  nlohmann::json cfg = {
      {"recordings", recs},
      {"channel", "EEG Fpz-Cz"},
      {"render", {{"width_px", width_px}, {"height_px", height_px}}},
      {"vision", {{"width_scale", 0.125}, {"epochs", 30}, {"batch_size", 8}}},
      {"encoder", {{"id", "toy-patch"}, {"patch_px", 32}}},
      {"lm", {{"embed_dim", 64}, {"layers", 2}, {"heads", 4}, {"max_positions", 256}, {"max_new_tokens", 120}}},
      {"joint", {{"epochs", 6}, {"learning_rate", 2e-3}}},
      {"cot", {{"client", "oracle"}, {"per_class_quota", per_class}, {"allow_short", true}}},
      {"split", {{"test_per_class", test_per_class}}},
      {"preset", "patch-aligned"},
      {"seed", seed},
      {"out_dir", "run"},
  };
  std::ofstream(dir / "config.json") << cfg.dump(2) << "\n";
  std::cout << "wrote " << stages.size() << " epochs in " << recordings << " recording(s) and config.json to "
            << dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sleep-stage EEG image pipeline with hierarchical visual tokens and stage-wise reasoning data"};
  app.require_subcommand(1);
  Overrides o;
  std::uint64_t seed_value = 0;

  using Command = std::function<pipeline::CommandResult(const pipeline::RunConfig&)>;
  const std::vector<std::pair<std::string, Command>> commands = {
      {"preprocess", pipeline::cmd_preprocess}, {"render", pipeline::cmd_render},
      {"train-vision", pipeline::cmd_train_vision}, {"gen-cot", pipeline::cmd_gen_cot},
      {"train-joint", pipeline::cmd_train_joint}, {"evaluate", pipeline::cmd_evaluate},
      {"report", pipeline::cmd_report}};
  const std::map<std::string, std::string> help = {
      {"preprocess", "read EDF recordings, band-pass filter, cut 30 s epochs"},
      {"render", "rasterize epochs to PNG images"},
      {"train-vision", "split the images and train the vision module"},
      {"gen-cot", "query the VLM stage by stage and build the reasoning dataset"},
      {"train-joint", "train projection and language model for the selected preset"},
      {"evaluate", "answer held-out images and score predictions"},
      {"report", "write metric tables and figures"}};

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed_value, "override the run seed")->each([&](const std::string&) { o.seed = seed_value; });
    sub->add_option("--out", o.out, "override the output directory");
    sub->add_flag("--skip-bad", o.skip_bad, "skip malformed recordings instead of failing");
    sub->add_option("--preset", o.preset, "ablation preset: patch-aligned, raw-hf, wo-feature-embedding, wo-cot");
  };
  std::vector<std::pair<CLI::App*, Command>> subs;
  for (const auto& [name, fn] : commands) {
    auto* sub = app.add_subcommand(name, help.at(name));
    add_common(sub);
    subs.emplace_back(sub, fn);
  }
  auto* all = app.add_subcommand("all", "run every stage in order");
  add_common(all);

  std::string fixture_dir;
  int per_class = 10, recordings = 1, width_px = 256, height_px = 64;
  std::uint64_t fixture_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic EDF fixture and a matching config");
  synth_cmd->add_option("--out", fixture_dir, "fixture directory")->required();
  synth_cmd->add_option("--per-class", per_class, "epochs per stage")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--recordings", recordings, "number of recordings")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--width", width_px, "rendered image width (multiple of 32)")->check(CLI::Range(32, 2048));
  synth_cmd->add_option("--height", height_px, "rendered image height (multiple of 32)")->check(CLI::Range(32, 2048));
  synth_cmd->add_option("--seed", fixture_seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth_cmd->parsed()) return write_fixture(fixture_dir, per_class, recordings, fixture_seed, width_px, height_px);
    const auto cfg = load_config(o);
    cfg.validate();
    if (all->parsed()) {
      for (const auto& [name, fn] : commands) print(name, fn(cfg));
      return 0;
    }
    for (const auto& [sub, fn] : subs) {
      if (sub->parsed()) print(sub->get_name(), fn(cfg));
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pipeline::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
