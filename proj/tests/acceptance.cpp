// Acceptance run: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

#include "eegvlm/align.hpp"
#include "eegvlm/cot.hpp"
#include "eegvlm/digest.hpp"
#include "eegvlm/edf.hpp"
#include "eegvlm/error.hpp"
#include "eegvlm/eval.hpp"
#include "eegvlm/pipeline.hpp"
#include "eegvlm/preprocess.hpp"
#include "eegvlm/render.hpp"
#include "eegvlm/synth.hpp"
#include "eegvlm/vision.hpp"

using namespace eegvlm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name) : path_(fs::temp_directory_path() / ("eegvlm_accept_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() { fs::remove_all(path_); }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// --- 1 ------------------------------------------------------------------------

std::string random_ascii(std::mt19937_64& rng, std::size_t max_len, std::size_t min_len = 0) {
  std::string s(min_len + rng() % (max_len - min_len + 1), ' ');
  for (char& c : s) c = static_cast<char>('A' + rng() % 26);
  return s;
}

Outcome edf_round_trip() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  int exact = 0;
  for (int trial = 0; trial < 20; ++trial) {
    edf::EdfHeader h;
    h.patient_id = random_ascii(rng, 60);
    h.recording_id = random_ascii(rng, 60);
    h.start_datetime = {1985 + static_cast<int>(rng() % 99), 1 + static_cast<int>(rng() % 12),
                        1 + static_cast<int>(rng() % 28), static_cast<int>(rng() % 24), static_cast<int>(rng() % 60),
                        static_cast<int>(rng() % 60)};
    h.record_count = 1 + static_cast<long>(rng() % 6);
    h.record_duration_s = std::array{1.0, 10.0, 30.0}[rng() % 3];
    std::vector<edf::SignalSpec> specs;
    std::vector<std::vector<std::int16_t>> data;
    const int ns = 1 + static_cast<int>(rng() % 4);
    for (int s = 0; s < ns; ++s) {
      edf::SignalSpec spec;
      // EDF pads with spaces, so a label must not end in one.
      spec.label = "EEG " + random_ascii(rng, 8, 1);
      spec.physical_dimension = "uV";
      spec.physical_min = -static_cast<double>(50 + rng() % 500);
      spec.physical_max = static_cast<double>(50 + rng() % 500);
      spec.digital_min = -static_cast<int>(100 + rng() % 32000);
      spec.digital_max = static_cast<int>(100 + rng() % 32000);
      spec.samples_per_record = 1 + static_cast<int>(rng() % 300);
      std::uniform_int_distribution<int> d(spec.digital_min, spec.digital_max);
      std::vector<std::int16_t> samples(static_cast<std::size_t>(spec.samples_per_record) * h.record_count);
      for (auto& v : samples) v = static_cast<std::int16_t>(d(rng));
      specs.push_back(spec);
      data.push_back(std::move(samples));
    }
    const auto bytes = edf::write_edf(h, specs, data);
    const auto rec = edf::parse_edf(bytes);
    const bool same = rec.header.patient_id == h.patient_id && rec.header.recording_id == h.recording_id &&
                      rec.header.start_datetime == h.start_datetime && rec.header.record_count == h.record_count &&
                      rec.header.signal_count == ns && rec.header.header_bytes == 256 + 256 * ns &&
                      rec.signals == specs && rec.digital == data && edf::write_edf(rec) == bytes;
    exact += same;
  }
  const double secs = seconds_since(t0);
  return {exact == 20 && secs < 10.0, std::to_string(exact) + "/20 byte-exact, " + fmt("%.2f s", secs)};
}

// --- 2 ------------------------------------------------------------------------

Outcome filter_suite() {
  const auto t0 = Clock::now();
  const double fs_hz = 100.0;
  const auto c = preprocess::design_bandpass({1, 0.5, 35.0, fs_hz});
  const double dc = c.gain(0.0, fs_hz), nyq = c.gain(fs_hz / 2, fs_hz);

  // Peak of the length-8192 impulse response spectrum by direct DFT.
  std::vector<double> impulse(8192, 0.0);
  impulse[0] = 1.0;
  const auto h = preprocess::lfilter(impulse, c);
  double best = -1.0, peak_hz = 0.0;
  for (std::size_t k = 1; k * fs_hz / 8192.0 < 15.0; ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < h.size(); ++t) {
      const double ph = -2.0 * std::numbers::pi * static_cast<double>(k * t % 8192) / 8192.0;
      re += h[t] * std::cos(ph);
      im += h[t] * std::sin(ph);
    }
    if (std::hypot(re, im) > best) {
      best = std::hypot(re, im);
      peak_hz = k * fs_hz / 8192.0;
    }
  }

  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 30.0);
  double lin_err = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> x(6000), y(6000), m(6000);
    const double a = nd(rng) / 30.0, b = nd(rng) / 30.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = nd(rng);
      y[i] = nd(rng);
      m[i] = a * x[i] + b * y[i];
    }
    const auto fx = preprocess::apply_filter(x, c), fy = preprocess::apply_filter(y, c);
    const auto fm = preprocess::apply_filter(m, c);
    double scale = 0.0, err = 0.0;
    for (std::size_t i = 0; i < fm.size(); ++i) {
      scale = std::max(scale, std::abs(fm[i]));
      err = std::max(err, std::abs(fm[i] - (a * fx[i] + b * fy[i])));
    }
    lin_err = std::max(lin_err, err / scale);
  }

  std::vector<double> pulse(3001, 0.0);
  for (int i = -60; i <= 60; ++i) pulse[1500 + i] = std::exp(-0.5 * (i / 15.0) * (i / 15.0));
  const auto sym = preprocess::apply_filter(pulse, c);
  double peak = 0.0, asym = 0.0;
  for (std::size_t i = 0; i < sym.size(); ++i) {
    peak = std::max(peak, std::abs(sym[i]));
    asym = std::max(asym, std::abs(sym[i] - sym[sym.size() - 1 - i]));
  }
  const double secs = seconds_since(t0);
  const bool pass = dc < 1e-6 && nyq < 1e-6 && std::abs(peak_hz - std::sqrt(0.5 * 35.0)) <= 0.5 &&
                    lin_err < 1e-9 && asym < 1e-9 * peak && secs < 30.0;
  return {pass, "DC " + fmt("%.1e", dc) + ", Nyquist " + fmt("%.1e", nyq) + ", peak " + fmt("%.3f Hz", peak_hz) +
                    ", linearity " + fmt("%.1e", lin_err) + ", asymmetry " + fmt("%.1e", asym / peak) + ", " +
                    fmt("%.2f s", secs)};
}

// --- 3 ------------------------------------------------------------------------

Outcome alignment_algebra() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  int ok = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int p = 1 + static_cast<int>(rng() % 300), d = 1 + static_cast<int>(rng() % 96);
    nn::Tensor hv({p, d}), hf({1, d});
    for (double& v : hv.data) v = nd(rng);
    for (double& v : hf.data) v = nd(rng);
    const auto zero_f = align::align(hv, nn::Tensor({1, d}));
    const auto zero_v = align::align(nn::Tensor({p, d}), hf);
    const auto full = align::align(hv, hf);
    const auto expanded = align::expand(hf, p);
    double err = 0.0;
    for (std::size_t i = 0; i < hv.size(); ++i) {
      err = std::max(err, std::abs(zero_f.data[i] - hv.data[i]));
      err = std::max(err, std::abs(zero_v.data[i] - expanded.data[i]));
      err = std::max(err, std::abs((full.data[i] - hv.data[i]) - hf.data[i % d]));
    }
    ok += err <= 1e-12 && full.shape == std::vector<int>{p, d};
  }
  const double secs = seconds_since(t0);
  return {ok == 1000 && secs < 10.0, std::to_string(ok) + "/1000 cases, " + fmt("%.2f s", secs)};
}

// --- 4 ------------------------------------------------------------------------

Outcome vision_shapes_gradients() {
  const auto t0 = Clock::now();
  vision::VisionModel full(vision::VisionConfig{}, 1);
  const auto f = full.forward_features(nn::Tensor({3, 224, 224}, 0.5));
  const bool shape_ok = f.spatial_map && f.spatial_map->shape == std::vector<int>{1024, 7, 7};

  vision::VisionConfig rc;
  rc.width_scale = 0.125;
  rc.input_height = 32;
  rc.input_width = 32;
  vision::VisionModel model(rc, 17);
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  nn::Tensor images({2, 3, 32, 32});
  for (double& v : images.data) v = ud(rng);
  nn::Tensor r({2, kNumStages});
  for (double& v : r.data) v = nd(rng);
  auto loss = [&](const nn::Tensor& x) {
    const auto logits = model.forward_logits(x, false);
    return std::inner_product(logits.data.begin(), logits.data.end(), r.data.begin(), 0.0);
  };
  model.zero_grad();
  model.forward_logits(images, false);
  const auto grad = model.backward_logits(r, true);
  const double h = 1e-3;
  double worst = 0.0;
  const int coords = 24;
  for (int i = 0; i < coords; ++i) {
    const std::size_t idx = rng() % images.size();
    auto plus = images, minus = images;
    plus.data[idx] += h;
    minus.data[idx] -= h;
    const double fd = (loss(plus) - loss(minus)) / (2 * h);
    worst = std::max(worst, std::abs(fd - grad.data[idx]) / std::max({std::abs(fd), std::abs(grad.data[idx]), 1e-8}));
  }
  const double secs = seconds_since(t0);
  return {shape_ok && worst < 1e-4 && secs < 120.0,
          std::string("map ") + (shape_ok ? "(1024,7,7)" : "wrong shape") + ", max rel err " + fmt("%.1e", worst) +
              " over " + std::to_string(coords) + " coords, " + fmt("%.1f s", secs)};
}

// --- 5 ------------------------------------------------------------------------

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(42);
  int ok = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 30 + static_cast<int>(rng() % 300);
    std::vector<int> t(n), p(n);
    for (int i = 0; i < n; ++i) {
      t[i] = static_cast<int>(rng() % 5);
      p[i] = rng() % 3 == 0 ? static_cast<int>(rng() % 5) : t[i];
    }
    const auto m = eval::metrics(eval::confusion(t, p));
    // First principles, straight from the label vectors.
    double agree = 0.0, chance = 0.0, mf1 = 0.0, err = 0.0;
    for (int c = 0; c < 5; ++c) {
      double tp = 0, tc = 0, pc = 0;
      for (int i = 0; i < n; ++i) {
        tp += t[i] == c && p[i] == c;
        tc += t[i] == c;
        pc += p[i] == c;
      }
      agree += tp;
      chance += (tc / n) * (pc / n);
      const double prec = pc > 0 ? tp / pc : 0.0, rec = tc > 0 ? tp / tc : 0.0;
      const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
      mf1 += f1 / 5;
      err = std::max(err, std::abs(f1 - m.per_class_f1[c]));
    }
    const double acc = agree / n;
    err = std::max({err, std::abs(acc - m.accuracy), std::abs(mf1 - m.macro_f1),
                    std::abs((acc - chance) / (1 - chance) - m.kappa)});
    ok += err <= 1e-9;
  }
  auto two = [](long a, long b, long c, long d) {
    eval::ConfusionMatrix cm(2);
    cm.at(0, 0) = a;
    cm.at(0, 1) = b;
    cm.at(1, 0) = c;
    cm.at(1, 1) = d;
    return eval::metrics(cm);
  };
  const auto perfect = two(30, 0, 0, 20), chance = two(25, 25, 25, 25), worked = two(40, 10, 20, 30);
  const bool examples = perfect.kappa == 1.0 && chance.kappa == 0.0 && std::abs(worked.kappa - 0.4) < 1e-12 &&
                        std::abs(worked.accuracy - 0.7) < 1e-12;
  const double secs = seconds_since(t0);
  return {ok == 200 && examples && secs < 10.0,
          std::to_string(ok) + "/200 random cases, worked kappas " + fmt("%.3f", perfect.kappa) + "/" +
              fmt("%.3f", chance.kappa) + "/" + fmt("%.3f", worked.kappa) + ", " + fmt("%.2f s", secs)};
}

// --- 6 ------------------------------------------------------------------------

Outcome cot_pipeline() {
  ScratchDir dir("cot");
  const auto stages = synth::balanced_sequence(10, 6);
  const auto files = synth::write_recording(dir.path(), "FIX", stages, {100.0, 6, true});
  pipeline::RunConfig cfg;
  cfg.recordings.push_back({files.psg, files.hypnogram, files.source_id});
  cfg.render.width_px = 256;
  cfg.render.height_px = 64;
  cfg.patch_px = 32;
  cfg.out_dir = dir.path() / "run";
  pipeline::cmd_preprocess(cfg);
  pipeline::cmd_render(cfg);

  std::vector<cot::CotInput> inputs;
  std::map<std::string, Stage> truth;
  for (const auto& e : pipeline::read_image_manifest(cfg.out_dir)) {
    const auto png_path = cfg.out_dir / "images" / e.file;
    std::ifstream in(png_path, std::ios::binary);
    std::vector<std::uint8_t> png((std::istreambuf_iterator<char>(in)), {});
    inputs.push_back({e.file, e.image_digest, std::move(png), e.stage});
    truth[e.image_digest] = e.stage;
  }
  cot::EngineOptions eo;
  eo.retry.initial_backoff = std::chrono::milliseconds(1);
  cot::CotBuildOptions bo;
  bo.per_class_quota = 8;
  bo.seed = 77;

  cot::OracleClient noisy(truth, 0.15, 4);
  cot::QueryEngine e1(noisy, eo), e2(noisy, eo);
  const auto run1 = cot::to_jsonl(cot::build_cot_dataset(inputs, e1, bo).records);
  const auto run2 = cot::to_jsonl(cot::build_cot_dataset(inputs, e2, bo).records);
  const bool reproducible = run1 == run2 && sha256_hex(run1) == sha256_hex(run2);

  cot::OracleClient correct(truth);
  cot::QueryEngine e3(correct, eo);
  const auto good = cot::build_cot_dataset(inputs, e3, bo);
  cot::NeverLabelsClient never;
  cot::QueryEngine e4(never, eo);
  const auto bad = cot::build_cot_dataset(inputs, e4, bo);
  auto count_valid = [](const cot::CotDataset& d) {
    return static_cast<int>(std::count_if(d.records.begin(), d.records.end(), [](const auto& r) { return r.valid; }));
  };
  const int good_valid = count_valid(good), bad_valid = count_valid(bad);
  const bool semantics = inputs.size() == 50 && good_valid == static_cast<int>(good.records.size()) &&
                         good.records.size() == 40 && bad_valid == 0 && bad.records.size() == 40;
  return {reproducible && semantics,
          std::string(reproducible ? "byte-identical" : "NOT reproducible") + " jsonl (sha " +
              sha256_hex(run1).substr(0, 12) + "), always-correct " + std::to_string(good_valid) + "/" +
              std::to_string(good.records.size()) + " valid, never-labels " + std::to_string(bad_valid) + "/" +
              std::to_string(bad.records.size()) + " valid"};
}

// --- 7 ------------------------------------------------------------------------

Outcome toy_end_to_end() {
  const auto t0 = Clock::now();
  ScratchDir dir("e2e");
  const std::uint64_t seed = 7;
  synth::RecordingOptions ro;
  ro.seed = seed + 1000;
  ro.trailing_unknown = true;
  const auto files = synth::write_recording(dir.path(), "SYN0", synth::balanced_sequence(100, seed), ro);
  const nlohmann::json j = {
      {"recordings", {{{"psg", files.psg.string()}, {"hypnogram", files.hypnogram.string()}, {"source_id", "SYN0"}}}},
      {"render", {{"width_px", 256}, {"height_px", 64}}},
      {"vision", {{"width_scale", 0.125}, {"epochs", 30}, {"batch_size", 8}}},
      {"encoder", {{"id", "toy-patch"}, {"patch_px", 32}}},
      {"lm", {{"embed_dim", 64}, {"layers", 2}, {"heads", 4}, {"max_positions", 256}, {"max_new_tokens", 120}}},
      {"joint", {{"epochs", 6}, {"learning_rate", 2e-3}}},
      {"cot", {{"client", "oracle"}, {"per_class_quota", 100}, {"allow_short", true}}},
      {"split", {{"test_per_class", 20}}},
      {"preset", "patch-aligned"},
      {"seed", seed},
      {"out_dir", (dir.path() / "run").string()},
  };
  auto cfg = pipeline::RunConfig::from_json(j);
  pipeline::cmd_preprocess(cfg);
  pipeline::cmd_render(cfg);
  pipeline::cmd_train_vision(cfg);
  pipeline::cmd_gen_cot(cfg);

  auto run_preset = [&](const std::string& preset) {
    cfg.preset = preset;
    pipeline::cmd_train_joint(cfg);
    pipeline::cmd_evaluate(cfg);
    std::ifstream in(cfg.out_dir / "eval" / preset / "metrics.txt");
    return eval::parse_metrics_file(std::string(std::istreambuf_iterator<char>(in), {}));
  };
  const auto full = run_preset("patch-aligned");
  const auto ablated = run_preset("wo-feature-embedding");
  const double acc = std::stod(full.at("accuracy")), kappa = std::stod(full.at("kappa"));
  const double ablated_acc = std::stod(ablated.at("accuracy"));
  const double scored = std::stod(full.at("scored")), unparsed = std::stod(full.at("unparseable"));
  const double secs = seconds_since(t0);
  const bool pass = acc >= 0.90 && kappa >= 0.85 && ablated_acc < acc && scored == 100 && secs < 20 * 60;
  return {pass, "patch-aligned acc " + fmt("%.3f", acc) + " kappa " + fmt("%.3f", kappa) + ", wo-feature-embedding acc " +
                    fmt("%.3f", ablated_acc) + ", labels emitted " + fmt("%.0f", scored - unparsed) + "/" +
                    fmt("%.0f", scored) + ", " + fmt("%.0f s", secs)};
}

// --- 8 ------------------------------------------------------------------------

Outcome split_protocol() {
  const int counts[5] = {1175, 1186, 757, 836, 1165};
  std::vector<Stage> labels;
  for (int s = 0; s < 5; ++s) labels.insert(labels.end(), counts[s], stage_from_index(s));
  std::mt19937_64 rng(8);
  std::shuffle(labels.begin(), labels.end(), rng);
  const auto a = eval::split_dataset(labels, 75, 2024);
  const auto b = eval::split_dataset(labels, 75, 2024);
  const bool same = a.test == b.test && a.train == b.train;
  return {labels.size() == 5119 && a.test.size() == 375 && a.train.size() == 4744 && same,
          std::to_string(labels.size()) + " records -> " + std::to_string(a.test.size()) + " test / " +
              std::to_string(a.train.size()) + " train, " + (same ? "deterministic" : "NOT deterministic")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"EDF round-trip", edf_round_trip},
      {"filter suite", filter_suite},
      {"alignment algebra", alignment_algebra},
      {"vision shapes and gradients", vision_shapes_gradients},
      {"metric oracle equivalence", metric_oracle},
      {"CoT pipeline", cot_pipeline},
      {"end-to-end toy separability", toy_end_to_end},
      {"split protocol", split_protocol},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << i + 1 << ": " << (o.pass ? "PASS" : "FAIL") << " - " << criteria[i].first << " ("
              << o.detail << ")" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
