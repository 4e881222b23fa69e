#pragma once

#include <string>
#include <vector>

#include "gfsseg/layers.hpp"
#include "gfsseg/tensor.hpp"

namespace gfsseg {

struct NetworkConfig {
  std::vector<int> backbone_channels{12, 24, 48};
  int classifier_hidden = 48;
  int num_outputs = 2;
  std::vector<int> pooling_scales{1, 2, 4};
  bool aux_tap = true;
  int in_channels = 3;

  bool operator==(const NetworkConfig&) const = default;
};

enum class FreezeVariant { none, freeze_backbone, freeze_all_but_last };

struct FreezePolicy {
  FreezeVariant variant = FreezeVariant::none;
};

enum class Mode { train, eval };

// The toy segmentation net: a strided conv backbone (stride 2 on the first
// three blocks, x8 downsampling), a pyramid-pooling neck, a conv classifier
// body producing the penultimate features, and a 1x1 output head. An optional
// auxiliary head taps the next-to-last backbone block.
struct Network {
  NetworkConfig config;
  std::vector<Conv2d> bb_conv;
  std::vector<BatchNorm2d> bb_bn;
  std::vector<Conv2d> pp_conv;  // one 1x1 reduction per pooling scale
  Conv2d body_conv;
  BatchNorm2d body_bn;
  Conv2d final_conv;
  Conv2d aux_conv;  // meaningful only when config.aux_tap
  FreezePolicy policy;
};

struct ForwardResult {
  Tensor logits;       // {B, num_outputs, H, W}, input resolution
  Tensor penultimate;  // {B, classifier_hidden, h, w}, feature resolution
  bool has_aux = false;
  Tensor aux_logits;  // {B, num_outputs, H, W} when has_aux
};

struct ForwardCache {
  int in_h = 0, in_w = 0;
  int feat_h = 0, feat_w = 0;
  int tap_h = 0, tap_w = 0;
  std::vector<Conv2dCache> bb_conv_c;
  std::vector<BatchNormCache> bb_bn_c;
  std::vector<ReluCache> bb_relu_c;
  std::vector<Conv2dCache> pp_conv_c;
  Conv2dCache body_conv_c;
  BatchNormCache body_bn_c;
  ReluCache body_relu_c;
  Conv2dCache final_conv_c;
  Conv2dCache aux_conv_c;
};

// Named handle on one parameter tensor and its gradient buffer.
struct ParamRef {
  std::string group;  // backbone | classifier.body | classifier.final
  std::string name;   // group-qualified, unique
  Tensor* value = nullptr;
  Tensor* grad = nullptr;  // null for buffers (batch-norm running stats)
};

Network build_network(const NetworkConfig& config, std::uint64_t seed);

ForwardResult forward(Network& net, const Tensor& images, Mode mode,
                      ForwardCache* cache = nullptr);

// Propagates gradients from the heads back to every unfrozen parameter.
// penultimate_grad (optional) is added at the penultimate features, which is
// where feature-space regularizers attach. aux_grad is ignored when the net
// has no auxiliary head.
void backward(Network& net, const ForwardCache& cache, const Tensor& logits_grad,
              const Tensor* penultimate_grad = nullptr, const Tensor* aux_grad = nullptr);

std::vector<ParamRef> all_parameters(Network& net);
std::vector<ParamRef> all_buffers(Network& net);

// Sets the active policy (which also controls batch-norm mode in frozen
// groups) and returns the trainable parameters under it.
std::vector<ParamRef> apply_freeze(Network& net, FreezePolicy policy);
std::vector<ParamRef> trainable_parameters(Network& net);
bool group_frozen(const FreezePolicy& policy, const std::string& group);

void zero_grad(Network& net);
std::size_t count_parameters(const Network& net);
double parameter_fraction(Network& net, FreezePolicy policy);

// Grows the output head from old_classes to new_classes rows: existing rows
// (weights and bias) are copied bit-exactly, new rows drawn from seed. The
// auxiliary head is expanded the same way.
void expand_classifier_outputs(Network& net, int old_classes, int new_classes,
                               std::uint64_t seed);

void save_checkpoint(Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);
Network load_checkpoint(const std::string& path, const NetworkConfig& expected);

}  // namespace gfsseg
