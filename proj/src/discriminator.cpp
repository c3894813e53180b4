#include "p2ld/discriminator.hpp"

#include <sstream>

namespace p2ld {

void DiscriminatorConfig::validate() const {
  if (in_channels <= 0) throw ConfigError("discriminator in_channels must be positive");
  if (widths.empty()) throw ConfigError("discriminator widths must be nonempty");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] <= 0) throw ConfigError("discriminator widths must be positive");
    if (i > 0 && widths[i] <= widths[i - 1]) throw ConfigError("discriminator widths must be strictly increasing");
  }
  if (leaky_slope < 0.0) throw ConfigError("leaky_slope must be non-negative");
}

int DiscriminatorConfig::receptive_field() const {
  // Walk back from one output cell: 3×3 head at stride 2^n, then each 4×4 stride-2 block.
  int rf = 3;
  for (std::size_t i = widths.size(); i-- > 0;) rf = (rf - 1) * 2 + 4;
  return rf;
}

DiscBlockImpl::DiscBlockImpl(int in_channels, int out_channels, bool use_norm, double slope_) : slope(slope_) {
  conv = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 4).stride(2).padding(1)));
  if (use_norm) norm = register_module("norm", nn::InstanceNorm2d(nn::InstanceNorm2dOptions(out_channels).affine(true)));
}

torch::Tensor DiscBlockImpl::forward(const torch::Tensor& x) {
  if (x.size(-1) % 2 != 0 || x.size(-2) % 2 != 0) {
    std::ostringstream msg;
    msg << "disc_block: input side must be even, got " << x.size(-2) << "x" << x.size(-1);
    throw std::invalid_argument(msg.str());
  }
  auto h = conv(x);
  if (!norm.is_empty()) h = norm(h);
  return torch::leaky_relu(h, slope);
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  blocks = nn::Sequential();
  int in = cfg_.in_channels;
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    blocks->push_back(DiscBlock(in, cfg_.widths[i], cfg_.instance_norm && i > 0, cfg_.leaky_slope));
    in = cfg_.widths[i];
  }
  register_module("blocks", blocks);
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, 1, 3).stride(1).padding(1)));

  apply([](nn::Module& m) {
    torch::NoGradGuard guard;
    if (auto* c = m.as<nn::Conv2dImpl>()) {
      nn::init::normal_(c->weight, 0.0, 0.02);
      if (c->bias.defined()) c->bias.zero_();
    } else if (auto* n = m.as<nn::InstanceNorm2dImpl>()) {
      n->weight.fill_(1.0);
      n->bias.zero_();
    }
  });
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& photo, const torch::Tensor& drawing) {
  if (photo.sizes() != drawing.sizes()) {
    std::ostringstream msg;
    msg << "discriminator inputs differ in shape: " << photo.sizes() << " vs " << drawing.sizes();
    throw std::invalid_argument(msg.str());
  }
  return score(torch::cat({photo, drawing}, 1));
}

torch::Tensor DiscriminatorImpl::score(const torch::Tensor& joint) {
  TORCH_CHECK(joint.dim() == 4, "discriminator expects N×C×H×W input");
  if (joint.size(1) != cfg_.in_channels)
    throw std::invalid_argument("discriminator expects " + std::to_string(cfg_.in_channels) + " channels, got " +
                                std::to_string(joint.size(1)));
  const int64_t factor = int64_t{1} << cfg_.widths.size();
  if (joint.size(2) % factor != 0 || joint.size(3) % factor != 0)
    throw std::invalid_argument("discriminator input side must be divisible by " + std::to_string(factor));
  return head(blocks->forward(joint));
}

}  // namespace p2ld
