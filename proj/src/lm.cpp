#include "eegvlm/lm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "eegvlm/error.hpp"
#include "eegvlm/kernels/kernels.hpp"

namespace eegvlm::lm {

// --- assembly / extraction ------------------------------------------------------

nn::Tensor assemble_inputs(const nn::Tensor& h_v, const nn::Tensor& h_f_prime, const nn::Tensor& h_q) {
  for (const auto* t : {&h_v, &h_f_prime, &h_q}) {
    if (t->shape.size() != 2) throw Error(ErrorCode::ShapeMismatch, "inputs must be [rows, D] matrices");
  }
  const int d = h_q.dim(1);
  if (h_v.dim(1) != d || h_f_prime.dim(1) != d) {
    throw Error(ErrorCode::ShapeMismatch, "embedding widths differ");
  }
  if (h_q.dim(0) < 1) throw Error(ErrorCode::ShapeMismatch, "text tokens must have T >= 1");
  nn::Tensor out({h_v.dim(0) + h_f_prime.dim(0) + h_q.dim(0), d});
  auto it = std::copy(h_v.data.begin(), h_v.data.end(), out.data.begin());
  it = std::copy(h_f_prime.data.begin(), h_f_prime.data.end(), it);
  std::copy(h_q.data.begin(), h_q.data.end(), it);
  return out;
}

std::string generate(const LanguageModel* lm, const nn::Tensor& sequence, int max_length) {
  if (lm == nullptr) throw Error(ErrorCode::ModelUnavailable, "no language model bound");
  return lm->generate(sequence, max_length);
}

namespace {

struct Word {
  std::string lower;
  std::string original;
  std::size_t offset;
};

std::vector<Word> alnum_words(std::string_view text) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!std::isalnum(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    const std::size_t start = i;
    while (i < text.size() && std::isalnum(static_cast<unsigned char>(text[i]))) ++i;
    Word w{std::string(text.substr(start, i - start)), std::string(text.substr(start, i - start)), start};
    std::transform(w.lower.begin(), w.lower.end(), w.lower.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    words.push_back(std::move(w));
  }
  return words;
}

std::optional<Stage> single_word_stage(const Word& w) {
  if (w.lower == "wake" || w.original == "W") return Stage::Wake;
  if (w.lower == "n1") return Stage::N1;
  if (w.lower == "n2") return Stage::N2;
  if (w.lower == "n3" || w.lower == "sws") return Stage::N3;
  if (w.lower == "rem" || w.original == "R") return Stage::REM;
  return std::nullopt;
}

std::optional<Stage> stage_code(const std::string& code) {
  if (code == "1") return Stage::N1;
  if (code == "2") return Stage::N2;
  if (code == "3" || code == "4") return Stage::N3;
  if (code == "w") return Stage::Wake;
  if (code == "r") return Stage::REM;
  return std::nullopt;
}

}  // namespace

StagePrediction extract_stage(std::string_view text) {
  const auto words = alnum_words(text);
  std::optional<StagePrediction> best;
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::optional<Stage> s;
    if (words[i].lower == "stage" && i + 1 < words.size()) {
      s = stage_code(words[i + 1].lower);
      if (s) {
        best = StagePrediction{*s, std::string(text), words[i].offset};
        ++i;
        continue;
      }
    }
    s = single_word_stage(words[i]);
    if (s) best = StagePrediction{*s, std::string(text), words[i].offset};
  }
  if (!best) throw Error(ErrorCode::NoStageFound, "no sleep stage mentioned");
  return *best;
}

// --- tokenizer ----------------------------------------------------------------

namespace {

bool is_punct(char c) {
  return c == ',' || c == '.' || c == ':' || c == ';' || c == '!' || c == '?' || c == '(' || c == ')';
}

}  // namespace

Tokenizer::Tokenizer() { set_words({"<pad>", "<bos>", "<eos>", "<unk>"}); }

void Tokenizer::set_words(std::vector<std::string> words) {
  words_ = std::move(words);
  index_.clear();
  for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c) && !(c == '.' && !cur.empty() && std::isdigit(static_cast<unsigned char>(cur.back())) &&
                                i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i + 1])))) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

void Tokenizer::add_texts(const std::vector<std::string>& texts) {
  for (const auto& t : texts) {
    for (auto& w : split(t)) {
      if (!index_.contains(w)) {
        index_[w] = static_cast<int>(words_.size());
        words_.push_back(std::move(w));
      }
    }
  }
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split(text)) {
    const auto it = index_.find(w);
    ids.push_back(it == index_.end() ? kUnk : it->second);
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size() || id == kPad || id == kBos || id == kEos) continue;
    const std::string& w = words_[id];
    const bool glue = w.size() == 1 && is_punct(w[0]) && w[0] != '(';
    if (!out.empty() && !glue && out.back() != '(') out.push_back(' ');
    out += w;
  }
  return out;
}

// --- toy transformer ----------------------------------------------------------

namespace {

constexpr double kNormEps = 1e-6;

void normal_init(nn::Param& p, nn::Rng& rng, double std_dev) {
  std::normal_distribution<double> dist(0.0, std_dev);
  for (double& v : p.value) v = dist(rng);
}

// y = g * x / rms(x) row-wise; returns per-row inverse rms.
std::vector<double> rms_norm(const nn::Tensor& x, const nn::Param& g, nn::Tensor& y) {
  const int rows = x.dim(0);
  const int d = x.dim(1);
  y = nn::Tensor(x.shape);
  std::vector<double> inv(rows);
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + static_cast<std::size_t>(r) * d;
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += xr[j] * xr[j];
    inv[r] = 1.0 / std::sqrt(ss / d + kNormEps);
    for (int j = 0; j < d; ++j) y.data[static_cast<std::size_t>(r) * d + j] = g.value[j] * xr[j] * inv[r];
  }
  return inv;
}

nn::Tensor rms_norm_backward(const nn::Tensor& dy, const nn::Tensor& x, nn::Param& g,
                             const std::vector<double>& inv) {
  const int rows = x.dim(0);
  const int d = x.dim(1);
  nn::Tensor dx(x.shape);
  for (int r = 0; r < rows; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * d;
    double dot = 0.0;
    for (int j = 0; j < d; ++j) {
      const double n = x.data[off + j] * inv[r];
      g.grad[j] += dy.data[off + j] * n;
      dot += dy.data[off + j] * g.value[j] * n;
    }
    dot /= d;
    for (int j = 0; j < d; ++j) {
      const double n = x.data[off + j] * inv[r];
      dx.data[off + j] = inv[r] * (dy.data[off + j] * g.value[j] - n * dot);
    }
  }
  return dx;
}

// out[rows, out_dim] = x[rows, in] * W^T (+ bias), W stored [out_dim, in].
nn::Tensor matmul_wt(const nn::Tensor& x, const nn::Param& w, const nn::Param* bias = nullptr) {
  const int rows = x.dim(0);
  const int out_dim = w.shape[0];
  const int in = w.shape[1];
  nn::Tensor y({rows, out_dim});
  kernels::gemm(false, true, rows, out_dim, in, x.data, w.value, y.data, false);
  if (bias != nullptr) {
    for (int r = 0; r < rows; ++r) {
      for (int j = 0; j < out_dim; ++j) y.data[static_cast<std::size_t>(r) * out_dim + j] += bias->value[j];
    }
  }
  return y;
}

// Accumulates dW += dy^T x (and dbias) and returns dx = dy W.
nn::Tensor matmul_wt_backward(const nn::Tensor& dy, const nn::Tensor& x, nn::Param& w, nn::Param* bias = nullptr) {
  const int rows = dy.dim(0);
  const int out_dim = w.shape[0];
  const int in = w.shape[1];
  kernels::gemm(true, false, out_dim, in, rows, dy.data, x.data, w.grad, true);
  if (bias != nullptr) {
    for (int r = 0; r < rows; ++r) {
      for (int j = 0; j < out_dim; ++j) bias->grad[j] += dy.data[static_cast<std::size_t>(r) * out_dim + j];
    }
  }
  nn::Tensor dx({rows, in});
  kernels::gemm(false, false, rows, in, out_dim, dy.data, w.value, dx.data, false);
  return dx;
}

}  // namespace

struct ToyLanguageModel::LayerCache {
  nn::Tensor x_in, a, q, k, v, o, x_mid, b, u, gact;
  std::vector<double> inv1, inv2;
  std::vector<std::vector<double>> probs;  // per head [S, S] (lower triangle used)
};

struct ToyLanguageModel::ForwardCache {
  std::vector<LayerCache> layers;
  nn::Tensor x_final, f;
  std::vector<double> inv_final;
};

ToyLanguageModel::ToyLanguageModel(const ToyLmConfig& cfg, Tokenizer tokenizer, std::uint64_t seed)
    : cfg_(cfg), tokenizer_(std::move(tokenizer)) {
  if (cfg_.embed_dim % cfg_.heads != 0) {
    throw Error(ErrorCode::ShapeMismatch, "embed_dim must be divisible by heads");
  }
  const int d = cfg_.embed_dim;
  const int v = tokenizer_.size();
  const int m = cfg_.mlp_mult * d;
  nn::Rng rng(seed);
  token_embedding_ = nn::Param("lm.token_embedding", {v, d});
  normal_init(token_embedding_, rng, 0.5);
  position_embedding_ = nn::Param("lm.position_embedding", {cfg_.max_positions, d});
  normal_init(position_embedding_, rng, 0.1);
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double residual_std = proj_std / std::sqrt(2.0 * cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "lm.layer" + std::to_string(l) + ".";
    Layer layer{nn::Param(p + "norm1", {d}), nn::Param(p + "wq", {d, d}), nn::Param(p + "wk", {d, d}),
                nn::Param(p + "wv", {d, d}),  nn::Param(p + "wo", {d, d}), nn::Param(p + "norm2", {d}),
                nn::Param(p + "w1", {m, d}),  nn::Param(p + "b1", {m}),   nn::Param(p + "w2", {d, m}),
                nn::Param(p + "b2", {d})};
    std::fill(layer.norm1.value.begin(), layer.norm1.value.end(), 1.0);
    std::fill(layer.norm2.value.begin(), layer.norm2.value.end(), 1.0);
    normal_init(layer.wq, rng, proj_std);
    normal_init(layer.wk, rng, proj_std);
    normal_init(layer.wv, rng, proj_std);
    normal_init(layer.wo, rng, residual_std);
    normal_init(layer.w1, rng, proj_std);
    normal_init(layer.w2, rng, residual_std / std::sqrt(static_cast<double>(cfg_.mlp_mult)));
    layers_.push_back(std::move(layer));
  }
  final_norm_ = nn::Param("lm.final_norm", {d});
  std::fill(final_norm_.value.begin(), final_norm_.value.end(), 1.0);
  unembed_ = nn::Param("lm.unembed", {v, d});
  normal_init(unembed_, rng, proj_std);
}

nn::Tensor ToyLanguageModel::embed_ids(const std::vector<int>& ids) const {
  const int d = cfg_.embed_dim;
  nn::Tensor out({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(token_embedding_.value.begin() + static_cast<long>(ids[i]) * d, d,
                out.data.begin() + static_cast<long>(i) * d);
  }
  return out;
}

nn::Tensor ToyLanguageModel::embed(const std::string& text) const { return embed_ids(tokenizer_.encode(text)); }

void ToyLanguageModel::accumulate_embedding_grad(const std::vector<int>& ids, const nn::Tensor& grad_rows,
                                                 int row_offset) {
  const int d = cfg_.embed_dim;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* g = grad_rows.data.data() + (static_cast<std::size_t>(row_offset) + i) * d;
    double* dst = token_embedding_.grad.data() + static_cast<std::size_t>(ids[i]) * d;
    for (int j = 0; j < d; ++j) dst[j] += g[j];
  }
}

double ToyLanguageModel::forward(const nn::Tensor& rows, ForwardCache* cache, nn::Tensor* logits) const {
  const int s = rows.dim(0);
  const int d = cfg_.embed_dim;
  const int h = cfg_.heads;
  const int dh = d / h;
  const int m = cfg_.mlp_mult * d;
  if (rows.shape.size() != 2 || rows.dim(1) != d) throw Error(ErrorCode::ShapeMismatch, "rows must be [S, D]");
  if (s > cfg_.max_positions) throw Error(ErrorCode::ShapeMismatch, "sequence exceeds max_positions");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  nn::Tensor x = rows;
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += position_embedding_.value[i];
  ForwardCache local;
  ForwardCache& c = cache != nullptr ? *cache : local;
  c.layers.assign(layers_.size(), {});

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    LayerCache& lc = c.layers[l];
    lc.x_in = x;
    lc.inv1 = rms_norm(x, L.norm1, lc.a);
    lc.q = matmul_wt(lc.a, L.wq);
    lc.k = matmul_wt(lc.a, L.wk);
    lc.v = matmul_wt(lc.a, L.wv);
    lc.o = nn::Tensor({s, d});
    lc.probs.assign(h, std::vector<double>(static_cast<std::size_t>(s) * s, 0.0));
    for (int hh = 0; hh < h; ++hh) {
      auto& p = lc.probs[hh];
      for (int i = 0; i < s; ++i) {
        const double* qi = lc.q.data.data() + static_cast<std::size_t>(i) * d + hh * dh;
        double mx = -1e300;
        for (int j = 0; j <= i; ++j) {
          const double* kj = lc.k.data.data() + static_cast<std::size_t>(j) * d + hh * dh;
          double dot = 0.0;
          for (int t = 0; t < dh; ++t) dot += qi[t] * kj[t];
          p[static_cast<std::size_t>(i) * s + j] = dot * scale;
          mx = std::max(mx, dot * scale);
        }
        double sum = 0.0;
        for (int j = 0; j <= i; ++j) {
          double& e = p[static_cast<std::size_t>(i) * s + j];
          e = std::exp(e - mx);
          sum += e;
        }
        double* oi = lc.o.data.data() + static_cast<std::size_t>(i) * d + hh * dh;
        for (int j = 0; j <= i; ++j) {
          double& e = p[static_cast<std::size_t>(i) * s + j];
          e /= sum;
          const double* vj = lc.v.data.data() + static_cast<std::size_t>(j) * d + hh * dh;
          for (int t = 0; t < dh; ++t) oi[t] += e * vj[t];
        }
      }
    }
    const nn::Tensor attn = matmul_wt(lc.o, L.wo);
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += attn.data[i];
    lc.x_mid = x;
    lc.inv2 = rms_norm(x, L.norm2, lc.b);
    lc.u = matmul_wt(lc.b, L.w1, &L.b1);
    lc.gact = nn::Tensor({s, m});
    for (std::size_t i = 0; i < lc.u.size(); ++i) lc.gact.data[i] = nn::gelu(lc.u.data[i]);
    const nn::Tensor mlp = matmul_wt(lc.gact, L.w2, &L.b2);
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += mlp.data[i];
  }
  c.x_final = x;
  c.inv_final = rms_norm(x, final_norm_, c.f);
  if (logits != nullptr) *logits = matmul_wt(c.f, unembed_);
  return 0.0;
}

nn::Tensor ToyLanguageModel::forward_logits(const nn::Tensor& rows) const {
  nn::Tensor logits;
  forward(rows, nullptr, &logits);
  return logits;
}

double ToyLanguageModel::train_step(const nn::Tensor& rows, const std::vector<int>& targets,
                                    nn::Tensor* grad_rows) {
  const int s = rows.dim(0);
  const int d = cfg_.embed_dim;
  const int h = cfg_.heads;
  const int dh = d / h;
  const int vocab = tokenizer_.size();
  if (static_cast<int>(targets.size()) != s) throw Error(ErrorCode::ShapeMismatch, "one target per row required");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCache c;
  nn::Tensor logits;
  forward(rows, &c, &logits);

  int count = 0;
  for (int t : targets) count += t >= 0 ? 1 : 0;
  if (count == 0) throw Error(ErrorCode::EmptyDataset, "no target tokens in training sequence");
  nn::Tensor dlogits(logits.shape);
  double loss = 0.0;
  for (int i = 0; i < s; ++i) {
    if (targets[i] < 0) continue;
    const double* z = logits.data.data() + static_cast<std::size_t>(i) * vocab;
    const double zmax = *std::max_element(z, z + vocab);
    double sum = 0.0;
    for (int j = 0; j < vocab; ++j) sum += std::exp(z[j] - zmax);
    const double lse = std::log(sum) + zmax;
    loss += lse - z[targets[i]];
    for (int j = 0; j < vocab; ++j) {
      dlogits.data[static_cast<std::size_t>(i) * vocab + j] =
          (std::exp(z[j] - lse) - (j == targets[i] ? 1.0 : 0.0)) / count;
    }
  }
  loss /= count;

  nn::Tensor dx = rms_norm_backward(matmul_wt_backward(dlogits, c.f, unembed_), c.x_final, final_norm_, c.inv_final);

  for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
    Layer& L = layers_[l];
    LayerCache& lc = c.layers[l];
    // MLP branch.
    nn::Tensor dgact = matmul_wt_backward(dx, lc.gact, L.w2, &L.b2);
    for (std::size_t i = 0; i < dgact.size(); ++i) dgact.data[i] *= nn::gelu_grad(lc.u.data[i]);
    const nn::Tensor db = matmul_wt_backward(dgact, lc.b, L.w1, &L.b1);
    const nn::Tensor dmid = rms_norm_backward(db, lc.x_mid, L.norm2, lc.inv2);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dmid.data[i];
    // Attention branch.
    const nn::Tensor d_o = matmul_wt_backward(dx, lc.o, L.wo);
    nn::Tensor dq({s, d}), dk({s, d}), dv({s, d});
    std::vector<double> dp(s);
    for (int hh = 0; hh < h; ++hh) {
      const auto& p = lc.probs[hh];
      for (int i = 0; i < s; ++i) {
        const double* doi = d_o.data.data() + static_cast<std::size_t>(i) * d + hh * dh;
        double row_dot = 0.0;
        for (int j = 0; j <= i; ++j) {
          const double* vj = lc.v.data.data() + static_cast<std::size_t>(j) * d + hh * dh;
          double* dvj = dv.data.data() + static_cast<std::size_t>(j) * d + hh * dh;
          const double pij = p[static_cast<std::size_t>(i) * s + j];
          double acc = 0.0;
          for (int t = 0; t < dh; ++t) {
            acc += doi[t] * vj[t];
            dvj[t] += pij * doi[t];
          }
          dp[j] = acc;
          row_dot += acc * pij;
        }
        const double* qi = lc.q.data.data() + static_cast<std::size_t>(i) * d + hh * dh;
        double* dqi = dq.data.data() + static_cast<std::size_t>(i) * d + hh * dh;
        for (int j = 0; j <= i; ++j) {
          const double ds = p[static_cast<std::size_t>(i) * s + j] * (dp[j] - row_dot) * scale;
          if (ds == 0.0) continue;
          const double* kj = lc.k.data.data() + static_cast<std::size_t>(j) * d + hh * dh;
          double* dkj = dk.data.data() + static_cast<std::size_t>(j) * d + hh * dh;
          for (int t = 0; t < dh; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
    }
    nn::Tensor da = matmul_wt_backward(dq, lc.a, L.wq);
    const nn::Tensor dak = matmul_wt_backward(dk, lc.a, L.wk);
    const nn::Tensor dav = matmul_wt_backward(dv, lc.a, L.wv);
    for (std::size_t i = 0; i < da.size(); ++i) da.data[i] += dak.data[i] + dav.data[i];
    const nn::Tensor din = rms_norm_backward(da, lc.x_in, L.norm1, lc.inv1);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += din.data[i];
  }
  for (std::size_t i = 0; i < dx.size(); ++i) position_embedding_.grad[i] += dx.data[i];
  if (grad_rows != nullptr) *grad_rows = std::move(dx);
  return loss;
}

std::string ToyLanguageModel::generate(const nn::Tensor& sequence, int max_length) const {
  if (max_length <= 0) return "";
  const int d = cfg_.embed_dim;
  const int h = cfg_.heads;
  const int dh = d / h;
  const int m = cfg_.mlp_mult * d;
  const int vocab = tokenizer_.size();
  if (sequence.shape.size() != 2 || sequence.dim(1) != d) {
    throw Error(ErrorCode::ShapeMismatch, "sequence must be [S, D]");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::vector<double>> k_cache(layers_.size()), v_cache(layers_.size());
  std::vector<double> x(d), a(d), q(d), kk(d), vv(d), o(d), tmp(d), u(m), scores;
  int position = 0;

  // Pushes one row through all layers, appending to the caches; returns the
  // logits of that position.
  auto step = [&](const double* row) {
    for (int j = 0; j < d; ++j) x[j] = row[j] + position_embedding_.value[static_cast<std::size_t>(position) * d + j];
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      auto norm = [&](const std::vector<double>& in, const nn::Param& g, std::vector<double>& out) {
        double ss = 0.0;
        for (int j = 0; j < d; ++j) ss += in[j] * in[j];
        const double inv = 1.0 / std::sqrt(ss / d + kNormEps);
        for (int j = 0; j < d; ++j) out[j] = g.value[j] * in[j] * inv;
      };
      auto matvec = [&](const nn::Param& w, const std::vector<double>& in, std::vector<double>& out, int rows_out,
                        int cols_in, const nn::Param* bias) {
        kernels::gemm(false, true, 1, rows_out, cols_in, in, w.value, out, false);
        if (bias != nullptr) {
          for (int j = 0; j < rows_out; ++j) out[j] += bias->value[j];
        }
      };
      norm(x, L.norm1, a);
      matvec(L.wq, a, q, d, d, nullptr);
      matvec(L.wk, a, kk, d, d, nullptr);
      matvec(L.wv, a, vv, d, d, nullptr);
      k_cache[l].insert(k_cache[l].end(), kk.begin(), kk.end());
      v_cache[l].insert(v_cache[l].end(), vv.begin(), vv.end());
      const int n = position + 1;
      std::fill(o.begin(), o.end(), 0.0);
      scores.resize(n);
      for (int hh = 0; hh < h; ++hh) {
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
          const double* kj = k_cache[l].data() + static_cast<std::size_t>(j) * d + hh * dh;
          double dot = 0.0;
          for (int t = 0; t < dh; ++t) dot += q[hh * dh + t] * kj[t];
          scores[j] = dot * scale;
          mx = std::max(mx, scores[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          sum += scores[j];
        }
        for (int j = 0; j < n; ++j) {
          const double* vj = v_cache[l].data() + static_cast<std::size_t>(j) * d + hh * dh;
          const double w = scores[j] / sum;
          for (int t = 0; t < dh; ++t) o[hh * dh + t] += w * vj[t];
        }
      }
      matvec(L.wo, o, tmp, d, d, nullptr);
      for (int j = 0; j < d; ++j) x[j] += tmp[j];
      norm(x, L.norm2, a);
      matvec(L.w1, a, u, m, d, &L.b1);
      for (int j = 0; j < m; ++j) u[j] = nn::gelu(u[j]);
      kernels::gemm(false, true, 1, d, m, u, L.w2.value, tmp, false);
      for (int j = 0; j < d; ++j) x[j] += tmp[j] + L.b2.value[j];
    }
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += x[j] * x[j];
    const double inv = 1.0 / std::sqrt(ss / d + kNormEps);
    for (int j = 0; j < d; ++j) a[j] = final_norm_.value[j] * x[j] * inv;
    std::vector<double> logits(vocab);
    kernels::gemm(false, true, 1, vocab, d, a, unembed_.value, logits, false);
    ++position;
    return logits;
  };

  const int s = sequence.dim(0);
  if (s + 1 > cfg_.max_positions) throw Error(ErrorCode::ShapeMismatch, "sequence exceeds max_positions");
  for (int i = 0; i < s; ++i) step(sequence.data.data() + static_cast<std::size_t>(i) * d);
  std::vector<double> logits = step(token_embedding_.value.data() + static_cast<std::size_t>(Tokenizer::kBos) * d);
  std::vector<int> out;
  for (int t = 0; t < max_length; ++t) {
    const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (next == Tokenizer::kEos) break;
    out.push_back(next);
    if (position >= cfg_.max_positions || t + 1 == max_length) break;
    logits = step(token_embedding_.value.data() + static_cast<std::size_t>(next) * d);
  }
  return tokenizer_.decode(out);
}

std::vector<nn::Param*> ToyLanguageModel::params() {
  std::vector<nn::Param*> out{&token_embedding_, &position_embedding_};
  for (auto& L : layers_) {
    for (nn::Param* p : {&L.norm1, &L.wq, &L.wk, &L.wv, &L.wo, &L.norm2, &L.w1, &L.b1, &L.w2, &L.b2}) {
      out.push_back(p);
    }
  }
  out.push_back(&final_norm_);
  out.push_back(&unembed_);
  return out;
}

void ToyLanguageModel::add_to(checkpoint::Archive& archive) const {
  for (auto* p : const_cast<ToyLanguageModel*>(this)->params()) archive.add(*p);
  archive.manifest["lm"] = {{"id", id()},
                            {"embed_dim", cfg_.embed_dim},
                            {"layers", cfg_.layers},
                            {"heads", cfg_.heads},
                            {"mlp_mult", cfg_.mlp_mult},
                            {"max_positions", cfg_.max_positions},
                            {"vocabulary", tokenizer_.words()}};
}

void ToyLanguageModel::load_from(const checkpoint::Archive& archive) {
  for (auto* p : params()) archive.restore(*p);
}

// --- registry -----------------------------------------------------------------

LmRegistry::LmRegistry() { factories_["toy-lm"] = nullptr; }

LmRegistry& LmRegistry::global() {
  static LmRegistry registry;
  return registry;
}

void LmRegistry::register_factory(const std::string& id, LmFactory factory) { factories_[id] = std::move(factory); }

bool LmRegistry::is_known(const std::string& id) const { return factories_.contains(id); }

std::unique_ptr<LanguageModel> LmRegistry::create(const std::string& id) const {
  const auto it = factories_.find(id);
  if (it == factories_.end() || !it->second) {
    throw Error(ErrorCode::ModelUnavailable,
                id == "toy-lm" ? "toy-lm is constructed by the joint trainer, not the registry"
                               : "language model plug-in '" + id + "' is not installed");
  }
  return it->second();
}

}  // namespace eegvlm::lm
