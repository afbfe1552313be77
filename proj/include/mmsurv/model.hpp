#pragma once

#include <optional>
#include <utility>

#include "mmsurv/adam.hpp"
#include "mmsurv/autodiff.hpp"
#include "mmsurv/conv3d.hpp"

namespace mmsurv {

/// Architecture switches. volume_shape is the (D,H,W) every input volume is
/// resized to before entering the image branch.
struct ModelConfig {
  int resnet_depth = 18;  // one of 18, 34, 50, 101
  bool use_image = true;
  bool use_clinical = true;
  int64_t image_proj_dim = 25;
  int64_t clinical_dim = 27;
  bool head_hidden = true;
  double lambda = 1e-4;
  int64_t base_channels = 8;
  std::array<int64_t, 3> volume_shape{8, 24, 24};  // D,H,W

  void validate() const {
    if (resnet_depth != 18 && resnet_depth != 34 && resnet_depth != 50 && resnet_depth != 101)
      throw ShapeError("ModelConfig: resnet_depth must be one of 18, 34, 50, 101");
    if (!use_image && !use_clinical)
      throw ShapeError("ModelConfig: at least one modality must be enabled");
    if (image_proj_dim < 1 || clinical_dim < 1 || base_channels < 1)
      throw ShapeError("ModelConfig: widths must be positive");
    if (lambda < 0) throw ShapeError("ModelConfig: lambda must be >= 0");
  }

  int64_t fused_width() const {
    return (use_image ? image_proj_dim : 0) + (use_clinical ? clinical_dim : 0);
  }
};

// The four-stage plan: block counts per stage and the block kind.
struct StagePlan {
  std::array<int, 4> blocks;
  bool bottleneck;
};

inline StagePlan stage_plan(int depth) {
  switch (depth) {
    case 18: return {{2, 2, 2, 2}, false};
    case 34: return {{3, 4, 6, 3}, false};
    case 50: return {{3, 4, 6, 3}, true};
    case 101: return {{3, 4, 23, 3}, true};
    default: throw ShapeError("stage_plan: unsupported depth " + std::to_string(depth));
  }
}

// Per-stage strides: the depth axis is halved only in stages 2 and 3 so the
// shallow depth dimension (8 voxels at full scale) survives the plan.
inline std::array<Triple, 4> stage_strides() {
  return {Triple{1, 1, 1}, Triple{2, 2, 2}, Triple{2, 2, 2}, Triple{1, 2, 2}};
}

constexpr std::array<int64_t, 3> kMinVolumeShape{4, 8, 8};  // D,H,W

namespace init {

// He-uniform in double, cast to the working scalar, so float and double
// models built from one seed agree to rounding.
template <class Scalar>
void he_uniform(Tensor<Scalar>& t, int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
}

}  // namespace init

template <class Scalar>
struct Conv3dLayer {
  Tensor<Scalar> weight, bias;
  Triple stride{1, 1, 1}, pad{0, 0, 0};
  ConvImpl impl = ConvImpl::Im2col;

  static Conv3dLayer make(int64_t in_c, int64_t out_c, Triple kernel, Triple stride, Triple pad,
                          Rng& rng) {
    Conv3dLayer l;
    l.weight = Tensor<Scalar>::zeros({out_c, in_c, kernel[0], kernel[1], kernel[2]}, true);
    l.bias = Tensor<Scalar>::zeros({out_c}, true);
    l.stride = stride;
    l.pad = pad;
    init::he_uniform(l.weight, in_c * kernel[0] * kernel[1] * kernel[2], rng);
    return l;
  }
  Tensor<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& x) const {
    return conv3d(g, x, weight, bias, stride, pad, impl);
  }
};

template <class Scalar>
struct LinearLayer {
  Tensor<Scalar> weight, bias;

  static LinearLayer make(int64_t in_w, int64_t out_w, Rng& rng) {
    LinearLayer l;
    l.weight = Tensor<Scalar>::zeros({out_w, in_w}, true);
    l.bias = Tensor<Scalar>::zeros({out_w}, true);
    init::he_uniform(l.weight, in_w, rng);
    return l;
  }
  Tensor<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& x) const {
    return linear(g, x, weight, bias);
  }
};

template <class Scalar>
struct BatchNormLayer {
  Tensor<Scalar> gamma, beta;
  RunningStats<Scalar> running;
  Scalar eps = static_cast<Scalar>(1e-5);

  static BatchNormLayer make(int64_t channels) {
    BatchNormLayer l;
    l.gamma = Tensor<Scalar>::full({channels}, Scalar(1), true);
    l.beta = Tensor<Scalar>::zeros({channels}, true);
    l.running = RunningStats<Scalar>::make(channels);
    return l;
  }
  Tensor<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& x, BnMode mode) {
    return batch_norm(g, x, gamma, beta, eps, mode, running);
  }
};

/// o = F(x) + shortcut(x), relu applied after the addition. Basic blocks use
/// two 3x3x3 convolutions; bottleneck blocks use 1x1x1 / 3x3x3 / 1x1x1 with
/// expansion 4. The shortcut is the identity when shapes allow, otherwise a
/// strided 1x1x1 projection with its own normalization.
template <class Scalar>
struct ResidualBlock {
  bool bottleneck = false;
  bool has_projection = false;
  Conv3dLayer<Scalar> conv1, conv2, conv3;
  BatchNormLayer<Scalar> bn1, bn2, bn3;
  Conv3dLayer<Scalar> proj;
  BatchNormLayer<Scalar> proj_bn;
  int64_t in_channels = 0, out_channels = 0;

  static ResidualBlock make(int64_t in_c, int64_t planes, Triple stride, bool bottleneck,
                            Rng& rng) {
    ResidualBlock b;
    b.bottleneck = bottleneck;
    b.in_channels = in_c;
    b.out_channels = bottleneck ? planes * 4 : planes;
    const bool strided = stride != Triple{1, 1, 1};
    b.has_projection = strided || in_c != b.out_channels;
    if (bottleneck) {
      b.conv1 = Conv3dLayer<Scalar>::make(in_c, planes, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, rng);
      b.bn1 = BatchNormLayer<Scalar>::make(planes);
      b.conv2 = Conv3dLayer<Scalar>::make(planes, planes, {3, 3, 3}, stride, {1, 1, 1}, rng);
      b.bn2 = BatchNormLayer<Scalar>::make(planes);
      b.conv3 =
          Conv3dLayer<Scalar>::make(planes, b.out_channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, rng);
      b.bn3 = BatchNormLayer<Scalar>::make(b.out_channels);
    } else {
      b.conv1 = Conv3dLayer<Scalar>::make(in_c, planes, {3, 3, 3}, stride, {1, 1, 1}, rng);
      b.bn1 = BatchNormLayer<Scalar>::make(planes);
      b.conv2 = Conv3dLayer<Scalar>::make(planes, planes, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, rng);
      b.bn2 = BatchNormLayer<Scalar>::make(planes);
    }
    if (b.has_projection) {
      b.proj = Conv3dLayer<Scalar>::make(in_c, b.out_channels, {1, 1, 1}, stride, {0, 0, 0}, rng);
      b.proj_bn = BatchNormLayer<Scalar>::make(b.out_channels);
    }
    return b;
  }

  Tensor<Scalar> shortcut(Graph<Scalar>& g, const Tensor<Scalar>& x, BnMode mode) {
    if (!has_projection) return x;
    return proj_bn.forward(g, proj.forward(g, x), mode);
  }

  Tensor<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& x, BnMode mode) {
    Tensor<Scalar> f;
    if (bottleneck) {
      f = relu(g, bn1.forward(g, conv1.forward(g, x), mode));
      f = relu(g, bn2.forward(g, conv2.forward(g, f), mode));
      f = bn3.forward(g, conv3.forward(g, f), mode);
    } else {
      f = relu(g, bn1.forward(g, conv1.forward(g, x), mode));
      f = bn2.forward(g, conv2.forward(g, f), mode);
    }
    return relu(g, add(g, f, shortcut(g, x, mode)));
  }
};

/// 3D-ResNet: stem convolution, four residual stages, global average pool,
/// linear projection to image_proj_dim.
template <class Scalar>
struct ImageBranch {
  Conv3dLayer<Scalar> stem;
  BatchNormLayer<Scalar> stem_bn;
  std::vector<ResidualBlock<Scalar>> blocks;
  LinearLayer<Scalar> proj;
  int64_t final_channels = 0;

  static ImageBranch make(const ModelConfig& cfg, Rng& rng) {
    ImageBranch br;
    const auto plan = stage_plan(cfg.resnet_depth);
    const auto strides = stage_strides();
    const int64_t bc = cfg.base_channels;
    br.stem = Conv3dLayer<Scalar>::make(1, bc, {7, 7, 7}, {1, 2, 2}, {3, 3, 3}, rng);
    br.stem_bn = BatchNormLayer<Scalar>::make(bc);
    int64_t in_c = bc;
    for (int stage = 0; stage < 4; ++stage) {
      const int64_t planes = bc << stage;
      for (int b = 0; b < plan.blocks[static_cast<size_t>(stage)]; ++b) {
        const Triple stride = b == 0 ? strides[static_cast<size_t>(stage)] : Triple{1, 1, 1};
        br.blocks.push_back(
            ResidualBlock<Scalar>::make(in_c, planes, stride, plan.bottleneck, rng));
        in_c = br.blocks.back().out_channels;
      }
    }
    br.final_channels = in_c;
    br.proj = LinearLayer<Scalar>::make(in_c, cfg.image_proj_dim, rng);
    return br;
  }

  static void check_input_shape(const Shape& s) {
    if (s.size() != 5 || s[1] != 1)
      throw ShapeError("image branch: expected volumes shaped [N,1,D,H,W], got " + shape_str(s));
    if (s[2] < kMinVolumeShape[0] || s[3] < kMinVolumeShape[1] || s[4] < kMinVolumeShape[2])
      throw ShapeError("image branch: volume " + shape_str(s) +
                       " is too small for the stride plan; minimum (D,H,W) is (" +
                       std::to_string(kMinVolumeShape[0]) + "," +
                       std::to_string(kMinVolumeShape[1]) + "," +
                       std::to_string(kMinVolumeShape[2]) + ")");
  }

  Tensor<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& volume, BnMode mode) {
    check_input_shape(volume.shape());
    auto x = relu(g, stem_bn.forward(g, stem.forward(g, volume), mode));
    for (auto& b : blocks) x = b.forward(g, x, mode);
    return proj.forward(g, global_avg_pool(g, x));
  }
};

/// Two hidden layers (64, 32, relu) then a linear map to clinical_dim so
/// the fusion ratio reads image_proj_dim : clinical_dim.
template <class Scalar>
struct ClinicalBranch {
  LinearLayer<Scalar> fc1, fc2, fc3;

  static ClinicalBranch make(const ModelConfig& cfg, Rng& rng) {
    ClinicalBranch br;
    br.fc1 = LinearLayer<Scalar>::make(cfg.clinical_dim, 64, rng);
    br.fc2 = LinearLayer<Scalar>::make(64, 32, rng);
    br.fc3 = LinearLayer<Scalar>::make(32, cfg.clinical_dim, rng);
    return br;
  }
  Tensor<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& clinical) {
    auto h = relu(g, fc1.forward(g, clinical));
    h = relu(g, fc2.forward(g, h));
    return fc3.forward(g, h);
  }
};

/// Per-modality batch normalization before feature concatenation.
template <class Scalar>
struct FusionLayer {
  BatchNormLayer<Scalar> image_bn, clinical_bn;

  static FusionLayer make(const ModelConfig& cfg) {
    FusionLayer f;
    f.image_bn = BatchNormLayer<Scalar>::make(cfg.image_proj_dim);
    f.clinical_bn = BatchNormLayer<Scalar>::make(cfg.clinical_dim);
    return f;
  }

  Tensor<Scalar> forward(Graph<Scalar>& g, std::optional<Tensor<Scalar>> image_feats,
                         std::optional<Tensor<Scalar>> clinical_feats, BnMode mode) {
    if (image_feats && clinical_feats)
      return concat_features(g, image_bn.forward(g, *image_feats, mode),
                             clinical_bn.forward(g, *clinical_feats, mode));
    if (image_feats) return image_bn.forward(g, *image_feats, mode);
    if (clinical_feats) return clinical_bn.forward(g, *clinical_feats, mode);
    throw ShapeError("fuse: no modality present");
  }
};

/// Optional hidden layer (32, relu), linear to one output, sigmoid.
template <class Scalar>
struct SurvivalHead {
  bool has_hidden = false;
  LinearLayer<Scalar> hidden, out;

  static SurvivalHead make(const ModelConfig& cfg, Rng& rng) {
    SurvivalHead h;
    h.has_hidden = cfg.head_hidden;
    const int64_t k = cfg.fused_width();
    if (h.has_hidden) {
      h.hidden = LinearLayer<Scalar>::make(k, 32, rng);
      h.out = LinearLayer<Scalar>::make(32, 1, rng);
    } else {
      h.out = LinearLayer<Scalar>::make(k, 1, rng);
    }
    return h;
  }
  Tensor<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& fused) {
    auto h = has_hidden ? relu(g, hidden.forward(g, fused)) : fused;
    auto logits = out.forward(g, h);
    return reshape(g, sigmoid(g, logits), {fused.dim(0)});
  }
};

template <class Scalar>
using NamedTensor = std::pair<std::string, Tensor<Scalar>>;

/// The full multimodal regression network. Both branches are always
/// constructed (so ablation switches can be flipped and unused branches
/// provably receive zero gradient); the switches control the forward wiring.
template <class Scalar>
struct MultimodalModel {
  ModelConfig config;
  ImageBranch<Scalar> image;
  ClinicalBranch<Scalar> clinical;
  FusionLayer<Scalar> fusion;
  SurvivalHead<Scalar> head;

  static MultimodalModel build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x5eed));
    MultimodalModel m;
    m.config = cfg;
    m.image = ImageBranch<Scalar>::make(cfg, rng);
    m.clinical = ClinicalBranch<Scalar>::make(cfg, rng);
    m.fusion = FusionLayer<Scalar>::make(cfg);
    m.head = SurvivalHead<Scalar>::make(cfg, rng);
    return m;
  }

  /// volume: [N,1,D,H,W] (ignored when use_image is false);
  /// clinical: [N,clinical_dim] (ignored when use_clinical is false).
  Tensor<Scalar> forward(Graph<Scalar>& g, const Tensor<Scalar>& volume,
                         const Tensor<Scalar>& clinical_x, BnMode mode) {
    std::optional<Tensor<Scalar>> img_f, clin_f;
    if (config.use_image) img_f = image.forward(g, volume, mode);
    if (config.use_clinical) {
      if (clinical_x.shape().size() != 2 || clinical_x.dim(1) != config.clinical_dim)
        throw ShapeError("clinical branch: expected [N," + std::to_string(config.clinical_dim) +
                         "], got " + shape_str(clinical_x.shape()));
      clin_f = clinical.forward(g, clinical_x);
    }
    auto fused = fusion.forward(g, img_f, clin_f, mode);
    return head.forward(g, fused);
  }

  std::vector<NamedTensor<Scalar>> named_parameters() {
    std::vector<NamedTensor<Scalar>> out;
    auto conv = [&](const std::string& n, Conv3dLayer<Scalar>& l) {
      out.emplace_back(n + ".weight", l.weight);
      out.emplace_back(n + ".bias", l.bias);
    };
    auto lin = [&](const std::string& n, LinearLayer<Scalar>& l) {
      out.emplace_back(n + ".weight", l.weight);
      out.emplace_back(n + ".bias", l.bias);
    };
    auto bn = [&](const std::string& n, BatchNormLayer<Scalar>& l) {
      out.emplace_back(n + ".gamma", l.gamma);
      out.emplace_back(n + ".beta", l.beta);
    };
    conv("image.stem", image.stem);
    bn("image.stem_bn", image.stem_bn);
    for (size_t i = 0; i < image.blocks.size(); ++i) {
      auto& b = image.blocks[i];
      const std::string p = "image.block" + std::to_string(i);
      conv(p + ".conv1", b.conv1);
      bn(p + ".bn1", b.bn1);
      conv(p + ".conv2", b.conv2);
      bn(p + ".bn2", b.bn2);
      if (b.bottleneck) {
        conv(p + ".conv3", b.conv3);
        bn(p + ".bn3", b.bn3);
      }
      if (b.has_projection) {
        conv(p + ".proj", b.proj);
        bn(p + ".proj_bn", b.proj_bn);
      }
    }
    lin("image.proj", image.proj);
    lin("clinical.fc1", clinical.fc1);
    lin("clinical.fc2", clinical.fc2);
    lin("clinical.fc3", clinical.fc3);
    bn("fusion.image_bn", fusion.image_bn);
    bn("fusion.clinical_bn", fusion.clinical_bn);
    if (head.has_hidden) lin("head.hidden", head.hidden);
    lin("head.out", head.out);
    return out;
  }

  std::vector<Tensor<Scalar>> parameters() {
    std::vector<Tensor<Scalar>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  /// Weight matrices/kernels only: biases and normalization parameters stay
  /// out of the L2 penalty.
  std::vector<Tensor<Scalar>> penalized_weights() {
    std::vector<Tensor<Scalar>> out;
    for (auto& [name, t] : named_parameters())
      if (name.ends_with(".weight")) out.push_back(t);
    return out;
  }

  /// Batch-norm running statistics, serialized alongside parameters.
  std::vector<std::pair<std::string, std::vector<Scalar>*>> named_buffers() {
    std::vector<std::pair<std::string, std::vector<Scalar>*>> out;
    auto bn = [&](const std::string& n, BatchNormLayer<Scalar>& l) {
      out.emplace_back(n + ".running_mean", &l.running.mean);
      out.emplace_back(n + ".running_var", &l.running.var);
    };
    bn("image.stem_bn", image.stem_bn);
    for (size_t i = 0; i < image.blocks.size(); ++i) {
      auto& b = image.blocks[i];
      const std::string p = "image.block" + std::to_string(i);
      bn(p + ".bn1", b.bn1);
      bn(p + ".bn2", b.bn2);
      if (b.bottleneck) bn(p + ".bn3", b.bn3);
      if (b.has_projection) bn(p + ".proj_bn", b.proj_bn);
    }
    bn("fusion.image_bn", fusion.image_bn);
    bn("fusion.clinical_bn", fusion.clinical_bn);
    return out;
  }

  int64_t parameter_count() {
    int64_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }
};

}  // namespace mmsurv
