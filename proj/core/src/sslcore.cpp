#include "cassle/sslcore.hpp"

#include <cmath>
#include <string>

namespace cassle::ssl {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw SslError(msg); }

torch::nn::Sequential conv_bn_relu(int64_t in, int64_t out, int64_t stride) {
  return torch::nn::Sequential(
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)),
      torch::nn::BatchNorm2d(out), torch::nn::ReLU());
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, std::string_view what) {
  if (a.dim() != 2 || a.sizes() != b.sizes()) {
    fail(std::string(what) + " needs two (n, d) batches of equal shape");
  }
}

}  // namespace

BackboneFamily parse_backbone_family(std::string_view name) {
  if (name == "small-conv") return BackboneFamily::small_conv;
  if (name == "resnet-like") return BackboneFamily::resnet_like;
  fail("unknown backbone family '" + std::string(name) + "'");
}

std::string_view to_string(BackboneFamily family) {
  return family == BackboneFamily::small_conv ? "small-conv" : "resnet-like";
}

void BackboneSpec::validate() const {
  for (int w : widths) {
    if (w < 1) fail("backbone widths must be positive");
  }
}

StageTag parse_stage_tag(std::string_view name) {
  if (name == "stage1") return StageTag::stage1;
  if (name == "stage2") return StageTag::stage2;
  if (name == "stage3") return StageTag::stage3;
  if (name == "stage4") return StageTag::stage4;
  if (name == "extractor") return StageTag::extractor;
  if (name == "projector") return StageTag::projector;
  fail("unknown stage tag '" + std::string(name) + "'");
}

std::string_view to_string(StageTag tag) {
  switch (tag) {
    case StageTag::stage1: return "stage1";
    case StageTag::stage2: return "stage2";
    case StageTag::stage3: return "stage3";
    case StageTag::stage4: return "stage4";
    case StageTag::extractor: return "extractor";
    case StageTag::projector: return "projector";
  }
  return "unknown";
}

BackboneImpl::BackboneImpl(BackboneSpec spec) : spec_(spec) {
  spec_.validate();
  int64_t in = 3;
  for (int i = 0; i < 4; ++i) {
    const int64_t out = spec_.widths[i];
    const int64_t stride = i == 0 ? 1 : 2;
    torch::nn::Sequential stage = conv_bn_relu(in, out, stride);
    if (spec_.family == BackboneFamily::resnet_like) {
      // Residual block: conv-bn-relu-conv-bn plus projected shortcut, then ReLU.
      stage = torch::nn::Sequential(
          torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)),
          torch::nn::BatchNorm2d(out), torch::nn::ReLU(),
          torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1).bias(false)),
          torch::nn::BatchNorm2d(out));
      shortcuts_.push_back(register_module(
          "shortcut" + std::to_string(i + 1),
          torch::nn::Sequential(
              torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
              torch::nn::BatchNorm2d(out))));
    }
    stages_.push_back(register_module("stage" + std::to_string(i + 1), stage));
    in = out;
  }
}

torch::Tensor BackboneImpl::forward_stage(int index, const torch::Tensor& x) {
  if (index < 0 || index >= 4) fail("stage index out of range");
  if (spec_.family == BackboneFamily::resnet_like) {
    return torch::relu(stages_[index]->forward(x) + shortcuts_[index]->forward(x));
  }
  return stages_[index]->forward(x);
}

torch::Tensor BackboneImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 3) fail("backbone expects (N, 3, H, W) input");
  torch::Tensor h = x;
  for (int i = 0; i < 4; ++i) h = forward_stage(i, h);
  return h.mean({2, 3});
}

std::array<torch::Tensor, 5> BackboneImpl::forward_taps(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 3) fail("backbone expects (N, 3, H, W) input");
  std::array<torch::Tensor, 5> taps;
  torch::Tensor h = x;
  for (int i = 0; i < 4; ++i) {
    h = forward_stage(i, h);
    taps[i] = h.flatten(1);
  }
  taps[4] = h.mean({2, 3});
  return taps;
}

EmbeddingBatch EmbeddingBatch::normalized() const {
  if (l2_normalized) return *this;
  return {torch::nn::functional::normalize(
              matrix, torch::nn::functional::NormalizeFuncOptions().dim(1).eps(1e-12)),
          stage_tag, true};
}

torch::Tensor images_to_tensor(std::span<const aug::Image> images) {
  if (images.empty()) fail("empty image batch");
  const int h = images.front().height;
  const int w = images.front().width;
  auto out = torch::empty({static_cast<int64_t>(images.size()), 3, h, w}, torch::kFloat32);
  float* dst = out.data_ptr<float>();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (img.height != h || img.width != w || img.channels != 3) {
      fail("images in a batch must share 3-channel dims");
    }
    float* base = dst + n * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      base[p] = img.pixels[3 * p];
      base[plane + p] = img.pixels[3 * p + 1];
      base[2 * plane + p] = img.pixels[3 * p + 2];
    }
  }
  return out;
}

EmbeddingBatch extract_features(Backbone& backbone, const torch::Tensor& images, StageTag tap) {
  if (tap == StageTag::projector) fail("the projector tap needs omega; use the analysis module");
  torch::NoGradGuard no_grad;
  const bool was_training = backbone->is_training();
  backbone->eval();
  auto taps = backbone->forward_taps(images);
  if (was_training) backbone->train();
  return {taps[static_cast<std::size_t>(tap)], tap, false};
}

// --- Objectives ------------------------------------------------------------

Method parse_method(std::string_view name) {
  if (name == "simclr") return Method::simclr;
  if (name == "moco-v2") return Method::moco_v2;
  if (name == "barlow-twins") return Method::barlow_twins;
  if (name == "simsiam") return Method::simsiam;
  fail("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::simclr: return "simclr";
    case Method::moco_v2: return "moco-v2";
    case Method::barlow_twins: return "barlow-twins";
    case Method::simsiam: return "simsiam";
  }
  return "unknown";
}

MethodConfig MethodConfig::defaults(Method method) {
  MethodConfig c;
  c.method = method;
  c.temperature = method == Method::moco_v2 ? 0.2 : 0.5;
  return c;
}

void MethodConfig::validate(int batch_size) const {
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (!(momentum >= 0.0 && momentum <= 1.0)) fail("momentum must lie in [0, 1]");
  if (bt_lambda < 0.0) fail("bt_lambda must be non-negative");
  if (predictor_hidden < 1) fail("predictor_hidden must be positive");
  if (method == Method::moco_v2) {
    if (queue_size < 1 || batch_size < 1 || queue_size % batch_size != 0) {
      fail("queue_size must be a positive multiple of the batch size");
    }
  }
}

void require_unit_rows(const torch::Tensor& t, std::string_view name) {
  if (t.dim() != 2) fail(std::string(name) + " must be a matrix");
  if (t.size(0) == 0) return;
  const double tol = t.scalar_type() == torch::kFloat64 ? 1e-8 : 1e-4;
  const auto dev = (t.detach().norm(2, 1) - 1.0).abs().max().item<double>();
  // Non-finite rows are a numerical failure, not a caller error; they reach
  // the loss so the trainer can abort on it.
  if (std::isnan(dev)) return;
  if (dev > tol) {
    fail(std::string(name) + " rows must be L2-normalized (max |norm - 1| = " + std::to_string(dev) + ")");
  }
}

torch::Tensor info_nce(const torch::Tensor& query, const torch::Tensor& positive_key,
                       const torch::Tensor& negatives, double temperature) {
  require_same_shape(query, positive_key, "info_nce");
  if (negatives.dim() != 2 || (negatives.size(0) > 0 && negatives.size(1) != query.size(1))) {
    fail("info_nce negatives must be (K, d)");
  }
  if (!(temperature > 0.0)) fail("temperature must be positive");
  require_unit_rows(query, "query");
  require_unit_rows(positive_key, "positive key");
  require_unit_rows(negatives, "negatives");
  auto pos = (query * positive_key).sum(1, true);
  auto logits = negatives.size(0) > 0 ? torch::cat({pos, query.matmul(negatives.t())}, 1) : pos;
  logits = logits / temperature;
  return -torch::log_softmax(logits, 1).select(1, 0).mean();
}

torch::Tensor info_nce_diagonal(const torch::Tensor& similarity, double temperature) {
  if (similarity.dim() != 2 || similarity.size(0) != similarity.size(1) || similarity.size(0) < 1) {
    fail("similarity matrix must be square and non-empty");
  }
  if (!(temperature > 0.0)) fail("temperature must be positive");
  return -torch::log_softmax(similarity / temperature, 1).diagonal().mean();
}

torch::Tensor nt_xent(const torch::Tensor& z1, const torch::Tensor& z2, double temperature) {
  require_same_shape(z1, z2, "nt_xent");
  const int64_t n = z1.size(0);
  if (n < 2) fail("nt_xent needs a batch of at least 2 pairs");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  require_unit_rows(z1, "z1");
  require_unit_rows(z2, "z2");
  auto z = torch::cat({z1, z2}, 0);
  auto logits = z.matmul(z.t()) / temperature;
  auto self_mask = torch::eye(2 * n, torch::TensorOptions().dtype(torch::kBool));
  logits = logits.masked_fill(self_mask, -std::numeric_limits<double>::infinity());
  auto idx = torch::arange(2 * n, torch::kLong);
  auto targets = torch::remainder(idx + n, 2 * n);
  auto logp = torch::log_softmax(logits, 1);
  return -logp.gather(1, targets.unsqueeze(1)).mean();
}

torch::Tensor barlow_twins_loss(const torch::Tensor& z1, const torch::Tensor& z2, double lambda) {
  require_same_shape(z1, z2, "barlow_twins_loss");
  const int64_t n = z1.size(0);
  if (n < 2) fail("barlow_twins_loss needs a batch of at least 2");
  auto c = z1.t().matmul(z2) / static_cast<double>(n);
  auto diag = c.diagonal();
  auto on = (1.0 - diag).pow(2).sum();
  auto off = c.pow(2).sum() - diag.pow(2).sum();
  return on + lambda * off;
}

torch::Tensor simsiam_loss(const torch::Tensor& p1, const torch::Tensor& z2, const torch::Tensor& p2,
                           const torch::Tensor& z1) {
  require_same_shape(p1, z2, "simsiam_loss");
  require_same_shape(p2, z1, "simsiam_loss");
  require_same_shape(p1, p2, "simsiam_loss");
  auto cosine = [](const torch::Tensor& p, const torch::Tensor& z) {
    const auto pn = p.norm(2, 1);
    const auto zn = z.norm(2, 1);
    if ((pn.detach() <= 0.0).any().item<bool>() || (zn <= 0.0).any().item<bool>()) {
      fail("simsiam_loss got a zero-norm vector");
    }
    return ((p * z).sum(1) / (pn * zn)).mean();
  };
  return -0.5 * (cosine(p1, z2.detach()) + cosine(p2, z1.detach()));
}

void momentum_update(const std::vector<torch::Tensor>& online, const std::vector<torch::Tensor>& target,
                     double m) {
  if (online.size() != target.size()) fail("momentum_update parameter lists differ in length");
  if (!(m >= 0.0 && m <= 1.0)) fail("momentum must lie in [0, 1]");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < online.size(); ++i) {
    if (online[i].sizes() != target[i].sizes()) fail("momentum_update shape mismatch");
  }
  for (std::size_t i = 0; i < online.size(); ++i) {
    target[i].mul_(m).add_(online[i].detach(), 1.0 - m);
  }
}

KeyQueue::KeyQueue(int64_t size, int64_t dim, uint64_t seed, torch::Dtype dtype) {
  if (size < 1 || dim < 1) fail("queue size and dim must be positive");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  buffer_ = torch::nn::functional::normalize(
      torch::randn({size, dim}, gen, torch::TensorOptions().dtype(dtype)),
      torch::nn::functional::NormalizeFuncOptions().dim(1));
}

void KeyQueue::enqueue(const torch::Tensor& keys) {
  if (!buffer_.defined()) fail("queue is not initialized");
  if (keys.dim() != 2 || keys.size(1) != dim()) fail("keys must be (B, d) with the queue's d");
  const int64_t b = keys.size(0);
  if (b > size()) fail("key batch larger than the queue");
  torch::NoGradGuard no_grad;
  const auto k = keys.detach().to(buffer_.scalar_type());
  const int64_t first = std::min(b, size() - head_);
  buffer_.slice(0, head_, head_ + first).copy_(k.slice(0, 0, first));
  if (first < b) buffer_.slice(0, 0, b - first).copy_(k.slice(0, first, b));
  head_ = (head_ + b) % size();
}

torch::Tensor KeyQueue::contents() const {
  if (!buffer_.defined()) fail("queue is not initialized");
  if (head_ == 0) return buffer_.clone();
  return torch::cat({buffer_.slice(0, head_), buffer_.slice(0, 0, head_)}, 0);
}

void KeyQueue::restore(torch::Tensor buffer, int64_t head) {
  if (buffer.dim() != 2 || head < 0 || head >= std::max<int64_t>(1, buffer.size(0))) {
    fail("invalid queue state");
  }
  buffer_ = std::move(buffer);
  head_ = head;
}

// --- Model ------------------------------------------------------------------

cond::FinalNorm final_norm_for(Method method) {
  switch (method) {
    case Method::barlow_twins: return cond::FinalNorm::batchnorm;
    case Method::simsiam: return cond::FinalNorm::batchnorm_affine;
    default: return cond::FinalNorm::none;
  }
}

SslModelImpl::SslModelImpl(ModelSpec spec) : spec_(std::move(spec)) {
  const auto width = spec_.backbone.embedding_width();
  spec_.conditioning = spec_.conditioning.resolved(width);
  const auto norm = final_norm_for(spec_.method.method);
  backbone = register_module("backbone", Backbone(spec_.backbone));
  projector = register_module("projector", cond::ConditionedProjector(spec_.conditioning, width, norm));
  const auto out = spec_.conditioning.output_width(width);
  if (spec_.method.method == Method::simsiam) {
    predictor = register_module("predictor", cond::Mlp(std::vector<int64_t>{out, spec_.method.predictor_hidden, out}));
  }
  if (spec_.method.method == Method::moco_v2) {
    key_backbone = register_module("key_backbone", Backbone(spec_.backbone));
    key_projector =
        register_module("key_projector", cond::ConditionedProjector(spec_.conditioning, width, norm));
    cond::copy_state(*backbone, *key_backbone);
    cond::copy_state(*projector, *key_projector);
    for (auto& p : key_backbone->parameters()) p.set_requires_grad(false);
    for (auto& p : key_projector->parameters()) p.set_requires_grad(false);
  }
}

std::vector<torch::Tensor> SslModelImpl::online_parameters() {
  auto params = backbone->parameters();
  for (auto& p : projector->parameters()) params.push_back(p);
  if (!predictor.is_empty()) {
    for (auto& p : predictor->parameters()) params.push_back(p);
  }
  return params;
}

std::vector<torch::Tensor> SslModelImpl::mirrored_online_parameters() {
  auto params = backbone->parameters();
  for (auto& p : projector->parameters()) params.push_back(p);
  return params;
}

std::vector<torch::Tensor> SslModelImpl::momentum_parameters() {
  if (key_backbone.is_empty()) return {};
  auto params = key_backbone->parameters();
  for (auto& p : key_projector->parameters()) params.push_back(p);
  return params;
}

namespace {

torch::Tensor unit(const torch::Tensor& z) {
  return torch::nn::functional::normalize(z, torch::nn::functional::NormalizeFuncOptions().dim(1));
}

}  // namespace

MocoStepResult moco_step(SslModel& model, KeyQueue& queue, const ViewBatch& batch) {
  if (!model->has_momentum_copy()) fail("moco_step needs a model with momentum copies");
  const auto& cfg = model->spec().method;
  if (queue.size() != cfg.queue_size) {
    fail("queue length " + std::to_string(queue.size()) + " violates configured K = " +
         std::to_string(cfg.queue_size));
  }
  auto q = unit(model->project(batch.view1, batch.omega1));
  torch::Tensor k;
  {
    torch::NoGradGuard no_grad;
    momentum_update(model->mirrored_online_parameters(), model->momentum_parameters(), cfg.momentum);
    k = unit(model->key_projector->forward(model->key_backbone->forward(batch.view2), batch.omega2));
  }
  auto negatives = queue.contents().to(q.scalar_type());
  auto loss = info_nce(q, k, negatives, cfg.temperature);
  queue.enqueue(k);
  return {loss, k};
}

torch::Tensor training_loss(SslModel& model, const ViewBatch& batch, KeyQueue* queue) {
  const auto& cfg = model->spec().method;
  switch (cfg.method) {
    case Method::simclr: {
      // Both views share one forward pass (and one set of batch statistics).
      const int64_t n = batch.view1.size(0);
      auto z = unit(model->project(torch::cat({batch.view1, batch.view2}, 0),
                                   torch::cat({batch.omega1, batch.omega2}, 0)));
      return nt_xent(z.slice(0, 0, n), z.slice(0, n), cfg.temperature);
    }
    case Method::moco_v2:
      if (queue == nullptr) fail("moco-v2 training needs a key queue");
      return moco_step(model, *queue, batch).loss;
    case Method::barlow_twins: {
      auto z1 = model->project(batch.view1, batch.omega1);
      auto z2 = model->project(batch.view2, batch.omega2);
      return barlow_twins_loss(z1, z2, cfg.bt_lambda);
    }
    case Method::simsiam: {
      auto z1 = model->project(batch.view1, batch.omega1);
      auto z2 = model->project(batch.view2, batch.omega2);
      auto p1 = model->predictor->forward(z1);
      auto p2 = model->predictor->forward(z2);
      return simsiam_loss(p1, z2, p2, z1);
    }
  }
  fail("unknown method");
}

}  // namespace cassle::ssl
