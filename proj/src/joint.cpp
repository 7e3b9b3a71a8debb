#include "eegvlm/joint.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "eegvlm/error.hpp"

namespace eegvlm::joint {

namespace {

std::string wiring_name(Wiring w) {
  switch (w) {
    case Wiring::PatchAligned: return "patch-aligned";
    case Wiring::RawHf: return "raw-hf";
    case Wiring::VisualOnly: return "visual-only";
  }
  return "?";
}

Wiring wiring_from_name(const std::string& s) {
  if (s == "patch-aligned") return Wiring::PatchAligned;
  if (s == "raw-hf") return Wiring::RawHf;
  if (s == "visual-only") return Wiring::VisualOnly;
  throw Error(ErrorCode::ConfigInvalid, "unknown wiring '" + s + "'");
}

void append_rows(nn::Tensor& dst, const nn::Tensor& src) {
  dst.data.insert(dst.data.end(), src.data.begin(), src.data.end());
  dst.shape[0] += src.dim(0);
}

}  // namespace

Preset preset_by_name(const std::string& name) {
  if (name == "patch-aligned") return {name, Wiring::PatchAligned, true};
  if (name == "raw-hf") return {name, Wiring::RawHf, true};
  if (name == "wo-feature-embedding") return {name, Wiring::VisualOnly, true};
  if (name == "wo-cot") return {name, Wiring::PatchAligned, false};
  throw Error(ErrorCode::ConfigInvalid, "unknown preset '" + name + "'");
}

std::vector<std::string> preset_names() { return {"patch-aligned", "raw-hf", "wo-feature-embedding", "wo-cot"}; }

std::string label_answer(Stage stage) { return "The sleep stage is " + std::string(stage_name(stage)) + "."; }

lm::Tokenizer build_tokenizer(std::span<const JointSample> samples) {
  lm::Tokenizer tok;
  std::vector<std::string> texts;
  for (Stage s : kAllStages) texts.push_back(label_answer(s));
  for (const auto& s : samples) {
    texts.push_back(s.question);
    texts.push_back(s.answer);
  }
  tok.add_texts(texts);
  return tok;
}

JointModel::JointModel(const Preset& preset, int feature_dim, const lm::ToyLmConfig& lm_cfg,
                       lm::Tokenizer tokenizer, std::uint64_t seed)
    : preset_(preset),
      w_(feature_dim, lm_cfg.embed_dim, seed ^ 0x5eedULL),
      lm_(lm_cfg, std::move(tokenizer), seed) {}

nn::Tensor JointModel::sequence(const align::PatchTokens& z_v, std::span<const double> z_f,
                                const std::string& question) const {
  const auto h_q = lm_.embed(question);
  if (preset_.wiring == Wiring::VisualOnly) {
    nn::Tensor rows = w_.project(z_v.tokens);
    append_rows(rows, h_q);
    return rows;
  }
  const auto tokens = align::embed_visual(z_v, z_f, w_);
  if (preset_.wiring == Wiring::RawHf) {
    nn::Tensor rows = tokens.h_v;
    append_rows(rows, tokens.h_f);
    append_rows(rows, h_q);
    return rows;
  }
  return lm::assemble_inputs(tokens.h_v, tokens.h_f_prime, h_q);
}

std::string JointModel::answer(const align::PatchTokens& z_v, std::span<const double> z_f,
                               const std::string& question, int max_new_tokens) const {
  return lm::generate(&lm_, sequence(z_v, z_f, question), max_new_tokens);
}

double JointModel::accumulate(const JointSample& sample) {
  const int d = lm_.embed_dim();
  const int p = sample.z_v.count();
  if (p < 1) throw Error(ErrorCode::ShapeMismatch, "sample has no patch tokens");
  const bool use_hf = preset_.wiring != Wiring::VisualOnly;

  // Project patch rows and (optionally) the semantic row in one batch.
  nn::Tensor z = sample.z_v.tokens;
  if (use_hf) {
    if (static_cast<int>(sample.z_f.size()) != w_.in_dim()) {
      throw Error(ErrorCode::ShapeMismatch, "semantic feature width differs from projection input");
    }
    z.data.insert(z.data.end(), sample.z_f.begin(), sample.z_f.end());
    z.shape[0] += 1;
  }
  align::ProjectionW::Cache cache;
  const nn::Tensor projected = w_.forward(z, &cache);

  nn::Tensor rows({p, d});
  std::copy_n(projected.data.begin(), static_cast<long>(p) * d, rows.data.begin());
  const double* h_f = projected.data.data() + static_cast<std::size_t>(p) * d;
  int visual_rows = p;
  if (preset_.wiring == Wiring::PatchAligned) {
    nn::Tensor aligned = rows;
    for (int r = 0; r < p; ++r) {
      for (int j = 0; j < d; ++j) aligned.data[static_cast<std::size_t>(r) * d + j] += h_f[j];
    }
    append_rows(rows, aligned);
    visual_rows = 2 * p;
  } else if (preset_.wiring == Wiring::RawHf) {
    nn::Tensor hf({1, d});
    std::copy_n(h_f, d, hf.data.begin());
    append_rows(rows, hf);
    visual_rows = p + 1;
  }

  const auto& tok = lm_.tokenizer();
  const auto q_ids = tok.encode(sample.question);
  if (q_ids.empty()) throw Error(ErrorCode::ShapeMismatch, "question has no tokens");
  const auto a_ids = tok.encode(sample.answer);
  std::vector<int> text_ids = q_ids;
  text_ids.push_back(lm::Tokenizer::kBos);
  text_ids.insert(text_ids.end(), a_ids.begin(), a_ids.end());
  append_rows(rows, lm_.embed_ids(text_ids));

  std::vector<int> targets(static_cast<std::size_t>(visual_rows + q_ids.size()), -1);
  targets.insert(targets.end(), a_ids.begin(), a_ids.end());
  targets.push_back(lm::Tokenizer::kEos);

  nn::Tensor grad_rows;
  const double loss = lm_.train_step(rows, targets, &grad_rows);
  lm_.accumulate_embedding_grad(text_ids, grad_rows, visual_rows);

  nn::Tensor grad_proj(projected.shape);
  for (int r = 0; r < p; ++r) {
    for (int j = 0; j < d; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * d + j;
      grad_proj.data[i] = grad_rows.data[i];
      if (preset_.wiring == Wiring::PatchAligned) {
        const double g = grad_rows.data[static_cast<std::size_t>(p + r) * d + j];
        grad_proj.data[i] += g;
        grad_proj.data[static_cast<std::size_t>(p) * d + j] += g;
      }
    }
  }
  if (preset_.wiring == Wiring::RawHf) {
    std::copy_n(grad_rows.data.begin() + static_cast<long>(p) * d, d,
                grad_proj.data.begin() + static_cast<long>(p) * d);
  }
  w_.backward(grad_proj, cache);
  return loss;
}

std::vector<nn::Param*> JointModel::params() {
  auto out = w_.params();
  for (auto* p : lm_.params()) out.push_back(p);
  return out;
}

checkpoint::Archive JointModel::to_archive() const {
  checkpoint::Archive archive;
  w_.add_to(archive);
  lm_.add_to(archive);
  archive.manifest["preset"] = {{"name", preset_.name},
                                {"wiring", wiring_name(preset_.wiring)},
                                {"chain_of_thought", preset_.chain_of_thought}};
  archive.manifest["feature_dim"] = w_.in_dim();
  return archive;
}

JointModel JointModel::from_archive(const checkpoint::Archive& archive) {
  const auto& m = archive.manifest;
  if (!m.contains("preset") || !m.contains("lm") || !m.contains("feature_dim")) {
    throw Error(ErrorCode::MissingUpstream, "joint checkpoint manifest is incomplete");
  }
  Preset preset{m["preset"]["name"].get<std::string>(), wiring_from_name(m["preset"]["wiring"].get<std::string>()),
                m["preset"]["chain_of_thought"].get<bool>()};
  lm::ToyLmConfig cfg;
  cfg.embed_dim = m["lm"]["embed_dim"];
  cfg.layers = m["lm"]["layers"];
  cfg.heads = m["lm"]["heads"];
  cfg.mlp_mult = m["lm"]["mlp_mult"];
  cfg.max_positions = m["lm"]["max_positions"];
  lm::Tokenizer tok;
  tok.set_words(m["lm"]["vocabulary"].get<std::vector<std::string>>());
  JointModel model(preset, m["feature_dim"].get<int>(), cfg, std::move(tok), 0);
  model.w_.load_from(archive);
  model.lm_.load_from(archive);
  return model;
}

std::vector<JointEpochLog> train_joint(JointModel& model, std::span<const JointSample> samples,
                                       const JointTrainConfig& cfg,
                                       const std::function<void(const JointEpochLog&)>& on_epoch) {
  if (samples.empty()) throw Error(ErrorCode::EmptyDataset, "no joint training samples");
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0)) {
    throw Error(ErrorCode::ConfigInvalid, "joint training needs positive epochs, batch size and learning rate");
  }
  nn::Adam adam({cfg.learning_rate});
  auto params = model.params();
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  std::vector<JointEpochLog> log;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      for (auto* p : params) p->zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const double loss = model.accumulate(samples[order[i]]);
        if (!std::isfinite(loss)) throw Error(ErrorCode::NonFiniteLoss, "joint loss diverged");
        total += loss;
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      for (auto* p : params) {
        for (double& g : p->grad) g *= scale;
      }
      adam.step(params);
    }
    log.push_back({epoch, total / static_cast<double>(samples.size())});
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

}  // namespace eegvlm::joint
