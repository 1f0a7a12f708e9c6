#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "cassle/augpipe.hpp"

namespace cassle::cond {

class ConditioningError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// How the augmentation embedding g reaches the projector.
enum class ConditioningMode { none, concat, add, mul, hypernet };

ConditioningMode parse_mode(std::string_view name);
std::string_view to_string(ConditioningMode mode);

/// Augmentation encoder and projector architecture.
struct ConditioningSpec {
  ConditioningMode mode = ConditioningMode::concat;
  /// Number of linear layers in the augmentation encoder; 0 passes raw omega.
  int gamma_depth = 6;
  int gamma_hidden = 64;
  int gamma_out = 64;
  /// Number of linear layers in the projector; 0 makes it the identity.
  int projector_depth = 2;
  int projector_hidden = 512;
  int projector_out = 128;

  /// Copy with gamma_out forced to the embedding width for add/mul; validated.
  ConditioningSpec resolved(int64_t embedding_width) const;
  void validate(int64_t embedding_width) const;

  /// Width of g (14 when gamma_depth is 0).
  int64_t gamma_width() const;
  /// Width of the projector input after injection.
  int64_t joint_width(int64_t embedding_width) const;
  /// Width of the projector output.
  int64_t output_width(int64_t embedding_width) const;

  bool operator==(const ConditioningSpec&) const = default;
};

/// Normalization after the last projector layer.
enum class FinalNorm { none, batchnorm, batchnorm_affine };

/// Linear layers of widths[0] -> ... -> widths.back(), ReLU between layers,
/// linear output.
class MlpImpl : public torch::nn::Module {
 public:
  explicit MlpImpl(std::vector<int64_t> widths);

  torch::Tensor forward(const torch::Tensor& x);

  const std::vector<int64_t>& widths() const { return widths_; }
  std::vector<torch::nn::Linear>& layers() { return layers_; }

  /// All weights and biases, layer by layer (row-major weight, then bias).
  torch::Tensor flat_parameters() const;
  void load_flat_parameters(const torch::Tensor& flat);

  static int64_t parameter_count(std::span<const int64_t> widths);

 private:
  std::vector<int64_t> widths_;
  std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(Mlp);

/// The augmentation encoder: an MLP from omega to g.
class AugmentationEncoderImpl : public torch::nn::Module {
 public:
  AugmentationEncoderImpl(int depth, int hidden, int out);

  torch::Tensor forward(const torch::Tensor& omega);

  int depth() const { return depth_; }
  int64_t out_width() const;
  Mlp& mlp() { return mlp_; }

 private:
  int depth_;
  int hidden_;
  int out_;
  Mlp mlp_{nullptr};
};
TORCH_MODULE(AugmentationEncoder);

/// One generated linear layer, batched over samples.
struct LinearParams {
  torch::Tensor weight;  // (N, out, in)
  torch::Tensor bias;    // (N, out)
};

/// Maps g to every weight and bias of a projector MLP. The input-dependent
/// path starts at zero and the constant path holds a reference projector, so
/// the generated projector matches the reference for every g at init.
class HyperNetworkImpl : public torch::nn::Module {
 public:
  HyperNetworkImpl(int64_t cond_width, const MlpImpl& reference);

  /// (N, P) flat parameter sets.
  torch::Tensor forward(const torch::Tensor& g);
  std::vector<LinearParams> unpack(const torch::Tensor& flat) const;

  const std::vector<int64_t>& target_widths() const { return widths_; }
  int64_t parameter_count() const;
  torch::nn::Linear& generator() { return generator_; }

 private:
  std::vector<int64_t> widths_;
  torch::nn::Linear generator_{nullptr};
};
TORCH_MODULE(HyperNetwork);

/// The projector conditioned on augmentation information, pi(e | omega).
class ConditionedProjectorImpl : public torch::nn::Module {
 public:
  ConditionedProjectorImpl(ConditioningSpec spec, int64_t embedding_width,
                           FinalNorm final_norm = FinalNorm::none);

  /// e: (N, |e|), omega: (N, 14). omega is ignored when mode is none.
  torch::Tensor forward(const torch::Tensor& e, const torch::Tensor& omega);

  const ConditioningSpec& spec() const { return spec_; }
  int64_t embedding_width() const { return embedding_width_; }
  FinalNorm final_norm() const { return final_norm_; }

  bool has_gamma() const { return !gamma_.is_empty(); }
  AugmentationEncoder& gamma() { return gamma_; }
  /// Projector MLP (absent in hypernet mode and for depth 0).
  bool has_mlp() const { return !mlp_.is_empty(); }
  Mlp& mlp() { return mlp_; }
  bool has_hyper() const { return !hyper_.is_empty(); }
  HyperNetwork& hyper() { return hyper_; }

  std::vector<int64_t> projector_widths() const;

 private:
  torch::Tensor finish(torch::Tensor z);

  ConditioningSpec spec_;
  int64_t embedding_width_;
  FinalNorm final_norm_;
  AugmentationEncoder gamma_{nullptr};
  Mlp mlp_{nullptr};
  HyperNetwork hyper_{nullptr};
  torch::nn::BatchNorm1d final_bn_{nullptr};
};
TORCH_MODULE(ConditionedProjector);

/// omega rows as an (N, 14) tensor.
torch::Tensor omega_tensor(std::span<const aug::OmegaVector> omegas,
                           torch::Dtype dtype = torch::kFloat32);

torch::Tensor encode_augmentation(AugmentationEncoder& gamma, const torch::Tensor& omega);

/// concat -> [e ; g], add -> e + g, mul -> e * g, none -> e.
torch::Tensor inject(ConditioningMode mode, const torch::Tensor& e, const torch::Tensor& g);

std::vector<LinearParams> hyper_generate(HyperNetwork& hyper, const torch::Tensor& g);

/// Runs an MLP with per-sample generated parameters.
torch::Tensor generated_forward(const std::vector<LinearParams>& layers, const torch::Tensor& x);

torch::Tensor project(ConditionedProjector& projector, const torch::Tensor& e,
                      const torch::Tensor& omega);

/// dst <- src for matching parameter and buffer lists.
void copy_state(torch::nn::Module& src, torch::nn::Module& dst);

}  // namespace cassle::cond
