#include "cassle/condproj.hpp"

#include <numeric>
#include <string>

namespace cassle::cond {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ConditioningError(msg); }

std::string shape_str(const torch::Tensor& t) {
  std::string s = "(";
  for (int64_t i = 0; i < t.dim(); ++i) {
    if (i) s += ", ";
    s += std::to_string(t.size(i));
  }
  return s + ")";
}

}  // namespace

ConditioningMode parse_mode(std::string_view name) {
  if (name == "none") return ConditioningMode::none;
  if (name == "concat") return ConditioningMode::concat;
  if (name == "add") return ConditioningMode::add;
  if (name == "mul") return ConditioningMode::mul;
  if (name == "hypernet") return ConditioningMode::hypernet;
  fail("unknown conditioning mode '" + std::string(name) + "'");
}

std::string_view to_string(ConditioningMode mode) {
  switch (mode) {
    case ConditioningMode::none: return "none";
    case ConditioningMode::concat: return "concat";
    case ConditioningMode::add: return "add";
    case ConditioningMode::mul: return "mul";
    case ConditioningMode::hypernet: return "hypernet";
  }
  return "unknown";
}

ConditioningSpec ConditioningSpec::resolved(int64_t embedding_width) const {
  ConditioningSpec out = *this;
  if (mode == ConditioningMode::add || mode == ConditioningMode::mul) {
    out.gamma_out = static_cast<int>(embedding_width);
  }
  out.validate(embedding_width);
  return out;
}

void ConditioningSpec::validate(int64_t embedding_width) const {
  if (embedding_width < 1) fail("embedding width must be positive");
  if (gamma_depth < 0 || projector_depth < 0) fail("layer counts must be non-negative");
  if (gamma_depth > 0 && (gamma_out < 1 || (gamma_depth > 1 && gamma_hidden < 1))) {
    fail("augmentation encoder widths must be positive");
  }
  if (projector_depth > 0 && (projector_out < 1 || (projector_depth > 1 && projector_hidden < 1))) {
    fail("projector widths must be positive");
  }
  if (gamma_depth == 0 && mode != ConditioningMode::concat && mode != ConditioningMode::none) {
    fail("gamma_depth 0 (raw omega) is only legal in concat mode");
  }
  if ((mode == ConditioningMode::add || mode == ConditioningMode::mul) &&
      gamma_width() != embedding_width) {
    fail("add/mul conditioning needs gamma_out equal to the embedding width (" +
         std::to_string(embedding_width) + "), got " + std::to_string(gamma_width()));
  }
  if (mode == ConditioningMode::hypernet && projector_depth == 0) {
    fail("hypernet conditioning needs a projector with at least one layer");
  }
}

int64_t ConditioningSpec::gamma_width() const {
  return gamma_depth == 0 ? static_cast<int64_t>(aug::kOmegaDim) : gamma_out;
}

int64_t ConditioningSpec::joint_width(int64_t embedding_width) const {
  return mode == ConditioningMode::concat ? embedding_width + gamma_width() : embedding_width;
}

int64_t ConditioningSpec::output_width(int64_t embedding_width) const {
  return projector_depth == 0 ? joint_width(embedding_width) : projector_out;
}

// --- Mlp -------------------------------------------------------------------

MlpImpl::MlpImpl(std::vector<int64_t> widths) : widths_(std::move(widths)) {
  if (widths_.size() < 2) fail("an MLP needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
    layers_.push_back(register_module("fc" + std::to_string(i),
                                      torch::nn::Linear(widths_[i], widths_[i + 1])));
  }
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 2 || x.size(1) != widths_.front()) {
    fail("MLP expects input (N, " + std::to_string(widths_.front()) + "), got " + shape_str(x));
  }
  torch::Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h);
    if (i + 1 < layers_.size()) h = torch::relu(h);
  }
  return h;
}

torch::Tensor MlpImpl::flat_parameters() const {
  std::vector<torch::Tensor> parts;
  for (const auto& layer : layers_) {
    parts.push_back(layer->weight.reshape({-1}));
    parts.push_back(layer->bias.reshape({-1}));
  }
  return torch::cat(parts);
}

void MlpImpl::load_flat_parameters(const torch::Tensor& flat) {
  if (flat.dim() != 1 || flat.numel() != parameter_count(widths_)) {
    fail("flat parameter count mismatch: expected " + std::to_string(parameter_count(widths_)) +
         ", got " + std::to_string(flat.numel()));
  }
  torch::NoGradGuard no_grad;
  int64_t offset = 0;
  for (auto& layer : layers_) {
    const auto wn = layer->weight.numel();
    layer->weight.copy_(flat.slice(0, offset, offset + wn).view_as(layer->weight));
    offset += wn;
    const auto bn = layer->bias.numel();
    layer->bias.copy_(flat.slice(0, offset, offset + bn));
    offset += bn;
  }
}

int64_t MlpImpl::parameter_count(std::span<const int64_t> widths) {
  int64_t total = 0;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) total += widths[i] * widths[i + 1] + widths[i + 1];
  return total;
}

// --- Augmentation encoder --------------------------------------------------

AugmentationEncoderImpl::AugmentationEncoderImpl(int depth, int hidden, int out)
    : depth_(depth), hidden_(hidden), out_(out) {
  if (depth < 0) fail("augmentation encoder depth must be non-negative");
  if (depth == 0) return;
  std::vector<int64_t> widths{static_cast<int64_t>(aug::kOmegaDim)};
  for (int i = 0; i + 1 < depth; ++i) widths.push_back(hidden);
  widths.push_back(out);
  mlp_ = register_module("mlp", Mlp(widths));
}

torch::Tensor AugmentationEncoderImpl::forward(const torch::Tensor& omega) {
  if (omega.dim() != 2 || omega.size(1) != static_cast<int64_t>(aug::kOmegaDim)) {
    fail("omega must have shape (N, 14), got " + shape_str(omega));
  }
  if (depth_ == 0) return omega;
  return mlp_->forward(omega);
}

int64_t AugmentationEncoderImpl::out_width() const {
  return depth_ == 0 ? static_cast<int64_t>(aug::kOmegaDim) : out_;
}

// --- Hypernetwork ----------------------------------------------------------

HyperNetworkImpl::HyperNetworkImpl(int64_t cond_width, const MlpImpl& reference)
    : widths_(reference.widths()) {
  const auto count = MlpImpl::parameter_count(widths_);
  generator_ = register_module("generator", torch::nn::Linear(cond_width, count));
  torch::NoGradGuard no_grad;
  generator_->weight.zero_();
  generator_->bias.copy_(reference.flat_parameters().to(generator_->bias.dtype()));
}

torch::Tensor HyperNetworkImpl::forward(const torch::Tensor& g) {
  if (g.dim() != 2 || g.size(1) != generator_->weight.size(1)) {
    fail("hypernetwork expects g of shape (N, " + std::to_string(generator_->weight.size(1)) +
         "), got " + shape_str(g));
  }
  return generator_->forward(g);
}

std::vector<LinearParams> HyperNetworkImpl::unpack(const torch::Tensor& flat) const {
  const auto count = parameter_count();
  if (flat.dim() != 2 || flat.size(1) != count) {
    fail("generated parameter count mismatch: expected " + std::to_string(count) + ", got " +
         shape_str(flat));
  }
  std::vector<LinearParams> out;
  const int64_t n = flat.size(0);
  int64_t offset = 0;
  for (std::size_t i = 0; i + 1 < widths_.size(); ++i) {
    const int64_t in = widths_[i];
    const int64_t o = widths_[i + 1];
    LinearParams p;
    p.weight = flat.slice(1, offset, offset + o * in).view({n, o, in});
    offset += o * in;
    p.bias = flat.slice(1, offset, offset + o);
    offset += o;
    out.push_back(std::move(p));
  }
  return out;
}

int64_t HyperNetworkImpl::parameter_count() const { return MlpImpl::parameter_count(widths_); }

// --- Conditioned projector ---------------------------------------------------

ConditionedProjectorImpl::ConditionedProjectorImpl(ConditioningSpec spec, int64_t embedding_width,
                                                   FinalNorm final_norm)
    : spec_(spec.resolved(embedding_width)),
      embedding_width_(embedding_width),
      final_norm_(final_norm) {
  if (spec_.mode != ConditioningMode::none) {
    gamma_ = register_module(
        "gamma", AugmentationEncoder(spec_.gamma_depth, spec_.gamma_hidden, spec_.gamma_out));
  }
  const auto widths = projector_widths();
  if (spec_.mode == ConditioningMode::hypernet) {
    Mlp reference(widths);
    hyper_ = register_module("hyper", HyperNetwork(spec_.gamma_width(), *reference));
  } else if (spec_.projector_depth > 0) {
    mlp_ = register_module("mlp", Mlp(widths));
  }
  if (final_norm_ != FinalNorm::none) {
    final_bn_ = register_module(
        "final_bn", torch::nn::BatchNorm1d(torch::nn::BatchNorm1dOptions(spec_.output_width(
                                                                              embedding_width_))
                                               .affine(final_norm_ == FinalNorm::batchnorm_affine)));
  }
}

std::vector<int64_t> ConditionedProjectorImpl::projector_widths() const {
  std::vector<int64_t> widths{spec_.joint_width(embedding_width_)};
  for (int i = 0; i + 1 < spec_.projector_depth; ++i) widths.push_back(spec_.projector_hidden);
  if (spec_.projector_depth > 0) widths.push_back(spec_.projector_out);
  return widths;
}

torch::Tensor ConditionedProjectorImpl::finish(torch::Tensor z) {
  return final_bn_.is_empty() ? z : final_bn_->forward(z);
}

torch::Tensor ConditionedProjectorImpl::forward(const torch::Tensor& e, const torch::Tensor& omega) {
  if (e.dim() != 2 || e.size(1) != embedding_width_) {
    fail("projector expects e of shape (N, " + std::to_string(embedding_width_) + "), got " +
         shape_str(e));
  }
  if (spec_.mode == ConditioningMode::none) {
    return finish(mlp_.is_empty() ? e : mlp_->forward(e));
  }
  if (omega.dim() != 2 || omega.size(0) != e.size(0)) {
    fail("omega batch " + shape_str(omega) + " does not match e batch " + shape_str(e));
  }
  const auto g = encode_augmentation(gamma_, omega);
  if (spec_.mode == ConditioningMode::hypernet) {
    return finish(generated_forward(hyper_generate(hyper_, g), e));
  }
  const auto joint = inject(spec_.mode, e, g);
  return finish(mlp_.is_empty() ? joint : mlp_->forward(joint));
}

// --- Free functions --------------------------------------------------------

torch::Tensor omega_tensor(std::span<const aug::OmegaVector> omegas, torch::Dtype dtype) {
  auto t = torch::empty({static_cast<int64_t>(omegas.size()), static_cast<int64_t>(aug::kOmegaDim)},
                        torch::kFloat64);
  auto acc = t.accessor<double, 2>();
  for (std::size_t i = 0; i < omegas.size(); ++i) {
    if (omegas[i].layout_version != aug::kOmegaLayoutVersion) fail("omega layout_version mismatch");
    for (std::size_t j = 0; j < aug::kOmegaDim; ++j) {
      acc[static_cast<int64_t>(i)][static_cast<int64_t>(j)] = omegas[i].values[j];
    }
  }
  return t.to(dtype);
}

torch::Tensor encode_augmentation(AugmentationEncoder& gamma, const torch::Tensor& omega) {
  return gamma->forward(omega);
}

torch::Tensor inject(ConditioningMode mode, const torch::Tensor& e, const torch::Tensor& g) {
  switch (mode) {
    case ConditioningMode::none: return e;
    case ConditioningMode::concat:
      if (e.dim() != 2 || g.dim() != 2 || e.size(0) != g.size(0)) {
        fail("concat needs matching batch sizes, got " + shape_str(e) + " and " + shape_str(g));
      }
      return torch::cat({e, g}, 1);
    case ConditioningMode::add:
    case ConditioningMode::mul:
      if (e.sizes() != g.sizes()) {
        fail("add/mul conditioning needs |e| == |g|, got " + shape_str(e) + " and " + shape_str(g));
      }
      return mode == ConditioningMode::add ? e + g : e * g;
    case ConditioningMode::hypernet:
      fail("hypernet conditioning does not inject into the projector input");
  }
  fail("unknown conditioning mode");
}

std::vector<LinearParams> hyper_generate(HyperNetwork& hyper, const torch::Tensor& g) {
  return hyper->unpack(hyper->forward(g));
}

torch::Tensor generated_forward(const std::vector<LinearParams>& layers, const torch::Tensor& x) {
  torch::Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& p = layers[i];
    if (h.dim() != 2 || p.weight.size(0) != h.size(0) || p.weight.size(2) != h.size(1)) {
      fail("generated layer " + std::to_string(i) + " weight " + shape_str(p.weight) +
           " does not fit input " + shape_str(h));
    }
    h = torch::bmm(p.weight, h.unsqueeze(2)).squeeze(2) + p.bias;
    if (i + 1 < layers.size()) h = torch::relu(h);
  }
  return h;
}

torch::Tensor project(ConditionedProjector& projector, const torch::Tensor& e,
                      const torch::Tensor& omega) {
  return projector->forward(e, omega);
}

void copy_state(torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard no_grad;
  auto sp = src.parameters();
  auto dp = dst.parameters();
  auto sb = src.buffers();
  auto db = dst.buffers();
  if (sp.size() != dp.size() || sb.size() != db.size()) fail("module structures differ");
  for (std::size_t i = 0; i < sp.size(); ++i) {
    if (sp[i].sizes() != dp[i].sizes()) fail("parameter shapes differ");
    dp[i].copy_(sp[i]);
  }
  for (std::size_t i = 0; i < sb.size(); ++i) {
    if (sb[i].sizes() != db[i].sizes()) fail("buffer shapes differ");
    db[i].copy_(sb[i]);
  }
}

}  // namespace cassle::cond
