#include "eegvlm/vision.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "eegvlm/digest.hpp"
#include "eegvlm/error.hpp"

namespace eegvlm::vision {

namespace {

int conv_out(int size, int kernel, int stride, int pad) { return (size + 2 * pad - kernel) / stride + 1; }

int spatial_after_backbone(int size) {
  size = conv_out(size, 7, 2, 3);  // stem
  size = conv_out(size, 3, 2, 1);  // max pool
  for (int stage = 0; stage < 3; ++stage) size = conv_out(size, 3, 2, 1);
  return size;
}

}  // namespace

int VisionConfig::base_channels() const {
  return std::max(1, static_cast<int>(std::lround(64.0 * width_scale)));
}

int VisionConfig::final_channels() const {
  return std::max(1, static_cast<int>(std::lround(1024.0 * width_scale)));
}

int VisionConfig::feature_height() const { return spatial_after_backbone(input_height); }
int VisionConfig::feature_width() const { return spatial_after_backbone(input_width); }

void VisionConfig::validate() const {
  if (!(width_scale > 0.0 && width_scale <= 1.0)) {
    throw Error(ErrorCode::ShapeMismatch, "width_scale must lie in (0, 1]");
  }
  if (input_channels != 3 || input_height < 32 || input_width < 32 || num_classes != kNumStages) {
    throw Error(ErrorCode::ShapeMismatch, "vision input must be 3 x >=32 x >=32 with 5 classes");
  }
}

std::string VisionConfig::digest() const { return sha256_hex(to_json().dump()).substr(0, 16); }

nlohmann::json VisionConfig::to_json() const {
  return {{"input", {input_channels, input_height, input_width}},
          {"num_classes", num_classes},
          {"width_scale", width_scale},
          {"final_conv_out_channels", final_channels()}};
}

VisionConfig VisionConfig::from_json(const nlohmann::json& j) {
  VisionConfig c;
  const auto& input = j.at("input");
  c.input_channels = input.at(0);
  c.input_height = input.at(1);
  c.input_width = input.at(2);
  c.num_classes = j.at("num_classes");
  c.width_scale = j.at("width_scale");
  return c;
}

std::span<const double> SemanticFeature::flattened() const {
  if (spatial_map) return spatial_map->data;
  return pooled;
}

Stage StageLogits::argmax() const {
  return stage_from_index(static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin()));
}

ClassifierHead::ClassifierHead(int in_features, const std::string& name)
    : fc_(name, in_features, kNumStages) {}

StageLogits ClassifierHead::classify(const SemanticFeature& feature) const {
  const auto x = feature.flattened();
  if (x.size() != static_cast<std::size_t>(fc_.in_features())) {
    throw Error(ErrorCode::ShapeMismatch, "classifier expects " + std::to_string(fc_.in_features()) +
                                              " features, got " + std::to_string(x.size()));
  }
  StageLogits out;
  fc_.apply(x, 1, out.values);
  return out;
}

nn::Tensor image_to_tensor(const render::EpochImage& image) {
  nn::Tensor t({3, image.height, image.width});
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) t.data[c * plane + p] = image.pixels[p * 3 + c] / 255.0;
  }
  return t;
}

// --- Block ------------------------------------------------------------------

VisionModel::Block::Block(const std::string& name, int in_c, int out_c, int stride, int mid_c)
    : conv1(name + ".conv1", in_c, mid_c, 3, stride, 1),
      bn1(name + ".bn1", mid_c),
      conv2(name + ".conv2", mid_c, out_c, 3, 1, 1),
      bn2(name + ".bn2", out_c),
      projection(stride != 1 || in_c != out_c) {
  if (projection) {
    shortcut_conv = nn::Conv2d(name + ".downsample.conv", in_c, out_c, 1, stride, 0);
    shortcut_bn = nn::BatchNorm2d(name + ".downsample.bn", out_c);
  }
}

nn::Tensor VisionModel::Block::forward(const nn::Tensor& x, bool training) {
  nn::Tensor h = relu1.forward(bn1.forward(conv1.forward(x), training));
  h = bn2.forward(conv2.forward(h), training);
  const nn::Tensor identity = projection ? shortcut_bn.forward(shortcut_conv.forward(x), training) : x;
  for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += identity.data[i];
  return relu_out.forward(h);
}

nn::Tensor VisionModel::Block::backward(const nn::Tensor& grad) {
  const nn::Tensor g = relu_out.backward(grad);
  nn::Tensor dx = conv1.backward(bn1.backward(relu1.backward(conv2.backward(bn2.backward(g)))));
  if (projection) {
    const nn::Tensor ds = shortcut_conv.backward(shortcut_bn.backward(g));
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += ds.data[i];
  } else {
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += g.data[i];
  }
  return dx;
}

void VisionModel::Block::collect(std::vector<nn::Param*>& params, std::vector<nn::Param*>& buffers) {
  for (auto* p : conv1.params()) params.push_back(p);
  for (auto* p : bn1.params()) params.push_back(p);
  for (auto* p : conv2.params()) params.push_back(p);
  for (auto* p : bn2.params()) params.push_back(p);
  for (auto* p : bn1.buffers()) buffers.push_back(p);
  for (auto* p : bn2.buffers()) buffers.push_back(p);
  if (projection) {
    for (auto* p : shortcut_conv.params()) params.push_back(p);
    for (auto* p : shortcut_bn.params()) params.push_back(p);
    for (auto* p : shortcut_bn.buffers()) buffers.push_back(p);
  }
}

// --- VisionModel ------------------------------------------------------------

VisionModel::VisionModel(const VisionConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const int c = cfg_.base_channels();
  const int final_c = cfg_.final_channels();
  stem_conv_ = nn::Conv2d("stem.conv", cfg_.input_channels, c, 7, 2, 3);
  stem_bn_ = nn::BatchNorm2d("stem.bn", c);
  const int widths[4] = {c, 2 * c, 4 * c, 8 * c};
  int in_c = c;
  for (int stage = 0; stage < 4; ++stage) {
    const std::string prefix = "layer" + std::to_string(stage + 1);
    const int w = widths[stage];
    blocks_.emplace_back(prefix + ".0", in_c, w, stage == 0 ? 1 : 2, w);
    // The last block of the last stage widens to final_c.
    const int out = stage == 3 ? final_c : w;
    blocks_.emplace_back(prefix + ".1", w, out, 1, w);
    in_c = w;
  }
  spatial_shape_ = {final_c, cfg_.feature_height(), cfg_.feature_width()};
  head_ = ClassifierHead(final_c * cfg_.feature_height() * cfg_.feature_width(), "classifier");

  nn::Rng rng(seed);
  stem_conv_.init(rng);
  for (auto& b : blocks_) {
    b.conv1.init(rng);
    b.conv2.init(rng);
    if (b.projection) b.shortcut_conv.init(rng);
  }
  head_.init(rng);
}

void VisionModel::check_input(const nn::Tensor& images) const {
  if (images.shape.size() != 4 || images.dim(1) != cfg_.input_channels ||
      images.dim(2) != cfg_.input_height || images.dim(3) != cfg_.input_width) {
    throw Error(ErrorCode::ShapeMismatch, "image tensor does not match the vision config");
  }
}

nn::Tensor VisionModel::normalize(const nn::Tensor& images) const {
  nn::Tensor x = images;
  const std::size_t plane = static_cast<std::size_t>(images.dim(2)) * images.dim(3);
  for (int n = 0; n < images.dim(0); ++n) {
    for (int c = 0; c < 3; ++c) {
      double* p = x.data.data() + (static_cast<std::size_t>(n) * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean_[c]) / std_[c];
    }
  }
  return x;
}

nn::Tensor VisionModel::forward_spatial(const nn::Tensor& images, bool training) {
  check_input(images);
  nn::Tensor h = stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(normalize(images)), training));
  h = pool_.forward(h);
  for (auto& b : blocks_) h = b.forward(h, training);
  return h;
}

SemanticFeature VisionModel::forward_features(const nn::Tensor& image, bool keep_spatial) {
  nn::Tensor batch = image;
  if (batch.shape.size() == 3) batch.shape.insert(batch.shape.begin(), 1);
  if (batch.shape.size() != 4 || batch.dim(0) != 1) {
    throw Error(ErrorCode::ShapeMismatch, "forward_features takes a single [3, H, W] image");
  }
  nn::Tensor map = forward_spatial(batch, false);
  SemanticFeature f;
  const int channels = map.dim(1);
  const std::size_t hw = static_cast<std::size_t>(map.dim(2)) * map.dim(3);
  f.pooled.resize(channels);
  for (int c = 0; c < channels; ++c) {
    const double* p = map.data.data() + c * hw;
    f.pooled[c] = std::accumulate(p, p + hw, 0.0) / static_cast<double>(hw);
  }
  if (keep_spatial) {
    map.shape.erase(map.shape.begin());
    f.spatial_map = std::move(map);
  }
  return f;
}

nn::Tensor VisionModel::forward_logits(const nn::Tensor& images, bool training) {
  nn::Tensor map = forward_spatial(images, training);
  map.shape = {images.dim(0), static_cast<int>(map.stride0())};
  return head_.linear().forward(map);
}

nn::Tensor VisionModel::backward_logits(const nn::Tensor& grad_logits, bool need_input_grad) {
  nn::Tensor g = head_.linear().backward(grad_logits);
  g.shape = {grad_logits.dim(0), spatial_shape_[0], spatial_shape_[1], spatial_shape_[2]};
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) g = it->backward(g);
  g = pool_.backward(g);
  g = stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(g)), need_input_grad);
  if (!need_input_grad) return {};
  const std::size_t plane = static_cast<std::size_t>(g.dim(2)) * g.dim(3);
  for (int n = 0; n < g.dim(0); ++n) {
    for (int c = 0; c < 3; ++c) {
      double* p = g.data.data() + (static_cast<std::size_t>(n) * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] /= std_[c];
    }
  }
  return g;
}

void VisionModel::set_input_normalization(std::array<double, 3> mean, std::array<double, 3> std_dev) {
  mean_ = mean;
  for (int c = 0; c < 3; ++c) std_[c] = std_dev[c] > 1e-12 ? std_dev[c] : 1.0;
}

std::vector<nn::Param*> VisionModel::params() {
  std::vector<nn::Param*> params;
  std::vector<nn::Param*> buffers;
  for (auto* p : stem_conv_.params()) params.push_back(p);
  for (auto* p : stem_bn_.params()) params.push_back(p);
  for (auto& b : blocks_) b.collect(params, buffers);
  for (auto* p : head_.linear().params()) params.push_back(p);
  return params;
}

std::vector<nn::Param*> VisionModel::buffers() {
  std::vector<nn::Param*> params;
  std::vector<nn::Param*> buffers;
  for (auto* p : stem_bn_.buffers()) buffers.push_back(p);
  for (auto& b : blocks_) b.collect(params, buffers);
  return buffers;
}

void VisionModel::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

checkpoint::Archive VisionModel::to_archive() const {
  auto& self = const_cast<VisionModel&>(*this);
  checkpoint::Archive a;
  for (auto* p : self.params()) a.add(*p);
  for (auto* p : self.buffers()) a.add(*p);
  nn::Param norm("input_normalization", {2, 3});
  for (int c = 0; c < 3; ++c) {
    norm.value[c] = mean_[c];
    norm.value[3 + c] = std_[c];
  }
  a.add(norm);
  a.manifest["vision_config"] = cfg_.to_json();
  a.manifest["config_digest"] = cfg_.digest();
  return a;
}

void VisionModel::load_archive(const checkpoint::Archive& archive) {
  for (auto* p : params()) archive.restore(*p);
  for (auto* p : buffers()) archive.restore(*p);
  nn::Param norm("input_normalization", {2, 3});
  archive.restore(norm);
  for (int c = 0; c < 3; ++c) {
    mean_[c] = norm.value[c];
    std_[c] = norm.value[3 + c];
  }
}

// --- training ---------------------------------------------------------------

TrainResult train_vision(VisionModel& model, std::span<const nn::Tensor> images,
                         std::span<const Stage> labels, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch) {
  if (images.empty() || images.size() != labels.size()) {
    throw Error(ErrorCode::EmptyDataset, "vision training needs a non-empty labeled dataset");
  }
  // Per-channel input statistics over the training set.
  std::array<double, 3> mean{}, sq{};
  double count = 0.0;
  for (const auto& img : images) {
    const std::size_t plane = img.size() / 3;
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = img.data[c * plane + i];
        mean[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(plane);
  }
  std::array<double, 3> std_dev{};
  for (int c = 0; c < 3; ++c) {
    mean[c] /= count;
    std_dev[c] = std::sqrt(std::max(0.0, sq[c] / count - mean[c] * mean[c]));
  }
  model.set_input_normalization(mean, std_dev);

  const auto& vc = model.config();
  nn::Adam adam({cfg.learning_rate});
  nn::Rng rng(cfg.seed);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  TrainResult result;
  auto params = model.params();
  long steps = 0;
  const std::size_t per_image = images[0].size();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      // A single-sample batch gives degenerate batch statistics.
      if (n == 1 && order.size() > 1) continue;
      nn::Tensor batch({static_cast<int>(n), 3, vc.input_height, vc.input_width});
      std::vector<int> targets(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& src = images[order[start + i]];
        std::copy(src.data.begin(), src.data.end(), batch.data.begin() + i * per_image);
        targets[i] = stage_index(labels[order[start + i]]);
      }
      model.zero_grad();
      const nn::Tensor logits = model.forward_logits(batch, true);
      nn::Tensor grad;
      const double loss = nn::softmax_cross_entropy(logits, targets, &grad);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at epoch " + std::to_string(epoch) +
                                                  ", step " + std::to_string(steps));
      }
      model.backward_logits(grad);
      adam.step(params);
      ++steps;
      result.step_losses.push_back(loss);
      loss_sum += loss * static_cast<double>(n);
      seen += n;
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data.data() + i * kNumStages;
        if (std::max_element(row, row + kNumStages) - row == targets[i]) ++correct;
      }
      if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
    }
    EpochLog log{epoch, seen ? loss_sum / seen : 0.0, seen ? static_cast<double>(correct) / seen : 0.0};
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
  }
  return result;
}

std::string training_log_csv(std::span<const EpochLog> log) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,loss,accuracy\n";
  for (const auto& e : log) os << e.epoch << ',' << e.loss << ',' << e.accuracy << '\n';
  return os.str();
}

}  // namespace eegvlm::vision
