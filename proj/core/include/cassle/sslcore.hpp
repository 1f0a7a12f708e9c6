#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "cassle/augpipe.hpp"
#include "cassle/condproj.hpp"

namespace cassle::ssl {

class SslError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// --- Backbone ----------------------------------------------------------------

enum class BackboneFamily { small_conv, resnet_like };

BackboneFamily parse_backbone_family(std::string_view name);
std::string_view to_string(BackboneFamily family);

/// Four-stage convolutional feature extractor; stage 1 keeps resolution,
/// stages 2-4 halve it. The embedding is the global average of stage 4.
struct BackboneSpec {
  BackboneFamily family = BackboneFamily::small_conv;
  std::array<int, 4> widths{16, 32, 64, 128};

  int64_t embedding_width() const { return widths[3]; }
  void validate() const;
  bool operator==(const BackboneSpec&) const = default;
};

enum class StageTag { stage1, stage2, stage3, stage4, extractor, projector };

StageTag parse_stage_tag(std::string_view name);
std::string_view to_string(StageTag tag);
inline constexpr std::array<StageTag, 5> kExtractorTaps{StageTag::stage1, StageTag::stage2,
                                                        StageTag::stage3, StageTag::stage4,
                                                        StageTag::extractor};

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(BackboneSpec spec);

  /// (N, 3, H, W) -> (N, |e|).
  torch::Tensor forward(const torch::Tensor& x);

  /// Output feature map of one stage.
  torch::Tensor forward_stage(int index, const torch::Tensor& x);

  /// Flattened stage 1-4 maps followed by the pooled embedding.
  std::array<torch::Tensor, 5> forward_taps(const torch::Tensor& x);

  const BackboneSpec& spec() const { return spec_; }

 private:
  BackboneSpec spec_;
  std::vector<torch::nn::Sequential> stages_;
  std::vector<torch::nn::Sequential> shortcuts_;
};
TORCH_MODULE(Backbone);

/// Representations of a batch plus the stage that produced them.
struct EmbeddingBatch {
  torch::Tensor matrix;  // (n, d)
  StageTag stage_tag = StageTag::extractor;
  bool l2_normalized = false;

  EmbeddingBatch normalized() const;
  int64_t rows() const { return matrix.size(0); }
  int64_t cols() const { return matrix.size(1); }
};

/// (N, 3, H, W) float tensor from HWC images.
torch::Tensor images_to_tensor(std::span<const aug::Image> images);

/// Features at `tap` in eval mode, without gradients. The projector tap needs
/// omega and is rejected here.
EmbeddingBatch extract_features(Backbone& backbone, const torch::Tensor& images, StageTag tap);

// --- Objectives -------------------------------------------------------------

enum class Method { simclr, moco_v2, barlow_twins, simsiam };

Method parse_method(std::string_view name);
std::string_view to_string(Method method);

struct MethodConfig {
  Method method = Method::simclr;
  double temperature = 0.5;
  int queue_size = 4096;
  double momentum = 0.99;
  double bt_lambda = 0.0051;
  int predictor_hidden = 128;

  /// Defaults for a method (temperature 0.5 SimCLR, 0.2 MoCo-v2).
  static MethodConfig defaults(Method method);
  /// Checks invariants; `batch_size` is needed for the queue divisibility rule.
  void validate(int batch_size) const;
  bool operator==(const MethodConfig&) const = default;
};

/// Throws SslError unless each row has unit L2 norm.
void require_unit_rows(const torch::Tensor& t, std::string_view name);

/// Mean over the batch of -log softmax of the positive logit against
/// `negatives` (shared by every query). Rows must be unit norm.
torch::Tensor info_nce(const torch::Tensor& query, const torch::Tensor& positive_key,
                       const torch::Tensor& negatives, double temperature);

/// InfoNCE over a precomputed (n, n) similarity matrix with positives on the diagonal.
torch::Tensor info_nce_diagonal(const torch::Tensor& similarity, double temperature);

/// Symmetric SimCLR objective over 2n unit-norm embeddings.
torch::Tensor nt_xent(const torch::Tensor& z1, const torch::Tensor& z2, double temperature);

/// sum_d (1 - C_dd)^2 + lambda * sum_{d != d'} C_dd'^2 with C = z1^T z2 / n.
/// Inputs are expected to be batch-standardized.
torch::Tensor barlow_twins_loss(const torch::Tensor& z1, const torch::Tensor& z2, double lambda);

/// -(cos(p1, z2) + cos(p2, z1)) / 2, averaged over the batch; z branches detached.
torch::Tensor simsiam_loss(const torch::Tensor& p1, const torch::Tensor& z2, const torch::Tensor& p2,
                           const torch::Tensor& z1);

/// target <- m * target + (1 - m) * online, elementwise.
void momentum_update(const std::vector<torch::Tensor>& online, const std::vector<torch::Tensor>& target,
                     double m);

/// Fixed-size FIFO of key embeddings.
class KeyQueue {
 public:
  KeyQueue() = default;
  /// Starts filled with random unit vectors drawn from `seed`.
  KeyQueue(int64_t size, int64_t dim, uint64_t seed, torch::Dtype dtype = torch::kFloat32);

  /// Appends a batch of keys, evicting the oldest.
  void enqueue(const torch::Tensor& keys);

  /// (K, d), oldest first.
  torch::Tensor contents() const;

  int64_t size() const { return buffer_.defined() ? buffer_.size(0) : 0; }
  int64_t dim() const { return buffer_.defined() ? buffer_.size(1) : 0; }

  const torch::Tensor& buffer() const { return buffer_; }
  int64_t head() const { return head_; }
  void restore(torch::Tensor buffer, int64_t head);

 private:
  torch::Tensor buffer_;
  int64_t head_ = 0;  // index of the oldest entry
};

// --- Model ----------------------------------------------------------------

struct ModelSpec {
  BackboneSpec backbone;
  cond::ConditioningSpec conditioning;
  MethodConfig method;
};

/// Feature extractor, conditioned projector, and the method-specific extras
/// (SimSiam predictor, MoCo momentum copies).
class SslModelImpl : public torch::nn::Module {
 public:
  explicit SslModelImpl(ModelSpec spec);

  torch::Tensor embed(const torch::Tensor& images) { return backbone->forward(images); }
  torch::Tensor project(const torch::Tensor& images, const torch::Tensor& omega) {
    return projector->forward(backbone->forward(images), omega);
  }

  /// Parameters updated by the optimizer (excludes momentum copies).
  std::vector<torch::Tensor> online_parameters();
  /// Parameters of the online networks mirrored by the momentum copies.
  std::vector<torch::Tensor> mirrored_online_parameters();
  std::vector<torch::Tensor> momentum_parameters();

  const ModelSpec& spec() const { return spec_; }
  bool has_momentum_copy() const { return !key_backbone.is_empty(); }

  Backbone backbone{nullptr};
  cond::ConditionedProjector projector{nullptr};
  cond::Mlp predictor{nullptr};
  Backbone key_backbone{nullptr};
  cond::ConditionedProjector key_projector{nullptr};

 private:
  ModelSpec spec_;
};
TORCH_MODULE(SslModel);

cond::FinalNorm final_norm_for(Method method);

/// One training batch: two views and their omegas.
struct ViewBatch {
  torch::Tensor view1;   // (N, 3, H, W)
  torch::Tensor view2;
  torch::Tensor omega1;  // (N, 14)
  torch::Tensor omega2;
};

struct MocoStepResult {
  torch::Tensor loss;
  torch::Tensor keys;  // enqueued key batch
};

/// Momentum-encoder step: updates the key networks by EMA, computes keys from
/// view 2 (conditioned on omega2), scores queries against the queue, then
/// enqueues the keys.
MocoStepResult moco_step(SslModel& model, KeyQueue& queue, const ViewBatch& batch);

/// Method-dispatched training loss. `queue` is required for MoCo-v2.
torch::Tensor training_loss(SslModel& model, const ViewBatch& batch, KeyQueue* queue);

}  // namespace cassle::ssl
