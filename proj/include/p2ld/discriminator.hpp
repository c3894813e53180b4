#pragma once

#include <vector>

#include <torch/torch.h>

#include "p2ld/generator.hpp"

namespace p2ld {

struct DiscriminatorConfig {
  int in_channels = 6;  ///< photo ⊕ drawing
  std::vector<int> widths = {64, 128, 256, 512};
  double leaky_slope = 0.2;
  /// Instance norm on every block but the first. Disabling it makes each score a
  /// strictly local function of its receptive field.
  bool instance_norm = true;

  void validate() const;
  /// Side length of the input window that one score depends on.
  int receptive_field() const;
  bool operator==(const DiscriminatorConfig&) const = default;
};

/// 4×4 stride-2 pad-1 conv → optional instance norm → leaky ReLU. Rejects odd sides.
struct DiscBlockImpl : nn::Module {
  DiscBlockImpl(int in_channels, int out_channels, bool use_norm, double slope);
  torch::Tensor forward(const torch::Tensor& x);

  nn::Conv2d conv{nullptr};
  nn::InstanceNorm2d norm{nullptr};
  double slope;
};
TORCH_MODULE(DiscBlock);

/// Conditional PatchGAN: scores a (photo, drawing) pair on a grid of S/2^k cells,
/// k = number of blocks. Outputs are raw, unsquashed scores of shape B×1×G×G.
struct DiscriminatorImpl : nn::Module {
  explicit DiscriminatorImpl(DiscriminatorConfig cfg = {});

  torch::Tensor forward(const torch::Tensor& photo, const torch::Tensor& drawing);
  /// Scores an already-concatenated B×in_channels×S×S input.
  torch::Tensor score(const torch::Tensor& joint);

  const DiscriminatorConfig& config() const { return cfg_; }

  nn::Sequential blocks{nullptr};
  nn::Conv2d head{nullptr};

 private:
  DiscriminatorConfig cfg_;
};
TORCH_MODULE(Discriminator);

}  // namespace p2ld
