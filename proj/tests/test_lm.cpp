#include <doctest.h>

#include <cmath>
#include <random>

#include "eegvlm/error.hpp"
#include "eegvlm/lm.hpp"

using namespace eegvlm;

namespace {

nn::Tensor random_rows(int rows, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  nn::Tensor t({rows, d});
  for (double& v : t.data) v = dist(rng);
  return t;
}

lm::Tokenizer small_vocab() {
  lm::Tokenizer tok;
  tok.add_texts({"the stage is Wake N1 N2 N3 REM .", "What sleep stage is shown ?"});
  return tok;
}

lm::ToyLmConfig small_config() {
  lm::ToyLmConfig cfg;
  cfg.embed_dim = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.max_positions = 32;
  return cfg;
}

}  // namespace

TEST_CASE("assemble_inputs keeps order and slices back") {
  const auto hv = random_rows(2, 4, 1);
  const auto hf = random_rows(2, 4, 2);
  const auto hq = random_rows(3, 4, 3);
  const auto seq = lm::assemble_inputs(hv, hf, hq);
  REQUIRE(seq.dim(0) == 7);
  CHECK(std::equal(hv.data.begin(), hv.data.end(), seq.data.begin()));
  CHECK(std::equal(hf.data.begin(), hf.data.end(), seq.data.begin() + 8));
  CHECK(std::equal(hq.data.begin(), hq.data.end(), seq.data.begin() + 16));

  nn::Tensor empty({0, 4});
  CHECK_THROWS_AS(lm::assemble_inputs(hv, hf, empty), Error);
  CHECK_THROWS_AS(lm::assemble_inputs(hv, random_rows(2, 5, 4), hq), Error);
}

TEST_CASE("extract_stage uses the last mention") {
  CHECK(lm::extract_stage("therefore the stage is N2.").label == Stage::N2);
  const auto p = lm::extract_stage("features argue against REM; this epoch is N1");
  CHECK(p.label == Stage::N1);
  CHECK(p.extraction_site == std::string("features argue against REM; this epoch is N1").find("N1"));
  CHECK(lm::extract_stage("classic SWS pattern").label == Stage::N3);
  CHECK(lm::extract_stage("Stage 2 with spindles").label == Stage::N2);
  CHECK(lm::extract_stage("Sleep stage R").label == Stage::REM);
  CHECK(lm::extract_stage("subject is awake? no: wake").label == Stage::Wake);
  CHECK_THROWS_AS(lm::extract_stage("nothing to see here"), Error);
  // N10 is not N1, and "rem" inside a word does not count.
  CHECK_THROWS_AS(lm::extract_stage("N10 premium"), Error);
}

TEST_CASE("tokenizer round-trips known text") {
  auto tok = small_vocab();
  const auto ids = tok.encode("the stage is N2.");
  CHECK(ids.size() == 5);
  CHECK(tok.decode(ids) == "the stage is N2.");
  CHECK(tok.encode("zebra").front() == lm::Tokenizer::kUnk);
}

TEST_CASE("toy LM greedy decoding is deterministic and cache-consistent") {
  const auto cfg = small_config();
  lm::ToyLanguageModel model(cfg, small_vocab(), 7);
  const auto seq = random_rows(5, cfg.embed_dim, 9);
  CHECK(model.generate(seq, 0).empty());
  const auto a = model.generate(seq, 6);
  CHECK(a == model.generate(seq, 6));
  CHECK(lm::generate(&model, seq, 6) == a);
  CHECK_THROWS_AS(lm::generate(nullptr, seq, 6), Error);

  // Recompute greedy decoding with full uncached passes.
  nn::Tensor rows = seq;
  auto append = [&](int id) {
    const auto e = model.embed_ids({id});
    rows.data.insert(rows.data.end(), e.data.begin(), e.data.end());
    rows.shape[0] += 1;
  };
  append(lm::Tokenizer::kBos);
  std::vector<int> ids;
  for (int t = 0; t < 6; ++t) {
    const auto logits = model.forward_logits(rows);
    const int v = model.tokenizer().size();
    const double* last = logits.data.data() + static_cast<std::size_t>(rows.dim(0) - 1) * v;
    const int next = static_cast<int>(std::max_element(last, last + v) - last);
    if (next == lm::Tokenizer::kEos) break;
    ids.push_back(next);
    append(next);
  }
  CHECK(model.tokenizer().decode(ids) == a);
}

TEST_CASE("toy LM analytic gradients match finite differences") {
  const auto cfg = small_config();
  lm::ToyLanguageModel model(cfg, small_vocab(), 11);
  auto rows = random_rows(6, cfg.embed_dim, 12);
  const std::vector<int> targets{-1, -1, 4, 5, 6, lm::Tokenizer::kEos};
  for (auto* p : model.params()) p->zero_grad();
  nn::Tensor grad_rows;
  model.train_step(rows, targets, &grad_rows);

  auto loss_at = [&]() {
    std::vector<nn::Tensor> saved;
    std::vector<std::vector<double>> grads;
    for (auto* p : model.params()) grads.push_back(p->grad);
    const double l = model.train_step(rows, targets, nullptr);
    std::size_t i = 0;
    for (auto* p : model.params()) p->grad = grads[i++];
    return l;
  };
  const double h = 1e-6;
  std::mt19937_64 rng(3);
  int checked = 0;
  for (auto* p : model.params()) {
    for (int trial = 0; trial < 2; ++trial) {
      const std::size_t idx = rng() % p->value.size();
      const double orig = p->value[idx];
      p->value[idx] = orig + h;
      const double up = loss_at();
      p->value[idx] = orig - h;
      const double down = loss_at();
      p->value[idx] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = p->grad[idx];
      if (std::abs(fd) + std::abs(an) < 1e-9) continue;
      CHECK(std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)) < 1e-4);
      ++checked;
    }
  }
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t idx = rng() % rows.size();
    const double orig = rows.data[idx];
    rows.data[idx] = orig + h;
    const double up = loss_at();
    rows.data[idx] = orig - h;
    const double down = loss_at();
    rows.data[idx] = orig;
    const double fd = (up - down) / (2 * h);
    CHECK(std::abs(fd - grad_rows.data[idx]) <= 1e-4 * std::max(1e-3, std::abs(fd)));
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("toy LM learns to answer from its visual prefix") {
  auto cfg = small_config();
  auto tok = small_vocab();
  lm::ToyLanguageModel model(cfg, tok, 5);
  nn::Adam adam({3e-3});
  const auto a = random_rows(3, cfg.embed_dim, 100);
  const auto b = random_rows(3, cfg.embed_dim, 200);
  const auto ans_a = tok.encode("the stage is N3 .");
  const auto ans_b = tok.encode("the stage is REM .");
  auto build = [&](const nn::Tensor& prefix, const std::vector<int>& ans, std::vector<int>& targets) {
    std::vector<int> ids{lm::Tokenizer::kBos};
    ids.insert(ids.end(), ans.begin(), ans.end());
    nn::Tensor rows = prefix;
    const auto e = model.embed_ids(ids);
    rows.data.insert(rows.data.end(), e.data.begin(), e.data.end());
    rows.shape[0] += static_cast<int>(ids.size());
    targets.assign(prefix.dim(0), -1);
    targets.insert(targets.end(), ans.begin(), ans.end());
    targets.push_back(lm::Tokenizer::kEos);
    return std::make_pair(rows, ids);
  };
  for (int step = 0; step < 150; ++step) {
    for (auto* p : model.params()) p->zero_grad();
    for (const auto* pair : {&a, &b}) {
      std::vector<int> targets;
      auto [rows, ids] = build(*pair, pair == &a ? ans_a : ans_b, targets);
      nn::Tensor grad;
      model.train_step(rows, targets, &grad);
      model.accumulate_embedding_grad(ids, grad, pair->dim(0));
    }
    adam.step(model.params());
  }
  CHECK(model.generate(a, 8) == "the stage is N3.");
  CHECK(model.generate(b, 8) == "the stage is REM.");
}
