#include "p2ld/generator.hpp"

#include <iostream>
#include <sstream>

namespace p2ld {

namespace F = torch::nn::functional;

std::string to_string(FusionMode m) { return m == FusionMode::Sum ? "sum" : "concat"; }
std::string to_string(DecoderBlock b) { return b == DecoderBlock::ConvUp ? "conv_up" : "convtranspose_up"; }

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "sum") return FusionMode::Sum;
  if (s == "concat") return FusionMode::Concat;
  throw ConfigError("unknown fusion_mode '" + s + "' (expected sum|concat)");
}

DecoderBlock parse_decoder_block(const std::string& s) {
  if (s == "conv_up") return DecoderBlock::ConvUp;
  if (s == "convtranspose_up") return DecoderBlock::ConvTransposeUp;
  throw ConfigError("unknown decoder_block '" + s + "' (expected conv_up|convtranspose_up)");
}

void GeneratorConfig::validate() const {
  if (input_size < 32 || input_size % 32 != 0)
    throw ConfigError("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
  if (encoder_stages.size() != kStages) throw ConfigError("encoder_stages must have exactly 5 entries");
  if (decoder_channels.size() != kStages) throw ConfigError("decoder_channels must have exactly 5 entries");
  // The resolution ladder S/2 … S/32 fixes the stride schedule (stage 2 halves via max-pool).
  static constexpr std::array<int, kStages> strides = {2, 1, 2, 2, 2};
  for (int i = 0; i < kStages; ++i) {
    const auto& s = encoder_stages[i];
    const auto name = "encoder stage " + std::to_string(i + 1);
    if (s.out_channels <= 0) throw ConfigError(name + ": out_channels must be positive");
    if (s.stride != strides[i])
      throw ConfigError(name + ": stride must be " + std::to_string(strides[i]) + " to keep the S/2^i ladder");
    if (s.blocks < 1) throw ConfigError(name + ": blocks must be >= 1");
    if (s.cardinality < 1) throw ConfigError(name + ": cardinality must be >= 1");
    if (i > 0 && (s.width() <= 0 || s.width() % s.cardinality != 0))
      throw ConfigError(name + ": cardinality " + std::to_string(s.cardinality) + " does not divide bottleneck width " +
                        std::to_string(s.width()));
  }
  for (int c : decoder_channels)
    if (c <= 0) throw ConfigError("decoder_channels must be positive");
  if (output_channels <= 0) throw ConfigError("output_channels must be positive");
}

int GeneratorConfig::working_channels(int stage) const {
  return stage == 0 ? decoder_channels[0] : decoder_channels[stage - 1];
}

GeneratorConfig GeneratorConfig::miniature() {
  GeneratorConfig cfg;
  cfg.input_size = 32;
  cfg.encoder_stages = {{4, 2, 1, 1, 0}, {8, 1, 1, 2, 4}, {8, 2, 1, 2, 4}, {8, 2, 1, 2, 4}, {8, 2, 1, 2, 4}};
  cfg.decoder_channels = {8, 8, 8, 4, 4};
  return cfg;
}

torch::Tensor upsample_nearest2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

int pds_halvings(int source_res, int target_res) {
  if (source_res <= 0 || target_res <= 0) throw std::invalid_argument("pds: resolutions must be positive");
  if (target_res > source_res)
    throw std::invalid_argument("pds: target resolution " + std::to_string(target_res) + " exceeds source " +
                                std::to_string(source_res));
  if (source_res % target_res != 0) throw std::invalid_argument("pds: resolution ratio is not a power of two");
  const int ratio = source_res / target_res;
  if ((ratio & (ratio - 1)) != 0) throw std::invalid_argument("pds: resolution ratio is not a power of two");
  int k = 0;
  while ((1 << k) < ratio) ++k;
  return k;
}

torch::Tensor fuse_sum(const torch::Tensor& prev, const std::vector<torch::Tensor>& contributions, int stage) {
  auto out = prev;
  for (std::size_t j = 0; j < contributions.size(); ++j) {
    const auto& c = contributions[j];
    if (c.sizes() != prev.sizes()) {
      std::ostringstream msg;
      msg << "fuse: decoder stage " << stage << " contribution " << j << " has shape " << c.sizes()
          << ", expected " << prev.sizes();
      throw std::invalid_argument(msg.str());
    }
    out = out + c;
  }
  return out;
}

namespace {

nn::Conv2dOptions conv(int in, int out, int k, int stride, int pad, bool bias = false) {
  return nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(bias);
}

nn::InstanceNorm2d inorm(int ch) { return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(ch).affine(true)); }

void conv_norm_relu(nn::Sequential& seq, nn::Conv2dOptions opts) {
  const int out = static_cast<int>(opts.out_channels());
  seq->push_back(nn::Conv2d(opts));
  seq->push_back(inorm(out));
  seq->push_back(nn::ReLU());
}

}  // namespace

ResNeXtBlockImpl::ResNeXtBlockImpl(int in_channels, int out_channels, int width, int cardinality, int stride) {
  if (width % cardinality != 0)
    throw ConfigError("cardinality " + std::to_string(cardinality) + " does not divide width " + std::to_string(width));
  reduce = register_module("reduce", nn::Conv2d(conv(in_channels, width, 1, 1, 0)));
  reduce_norm = register_module("reduce_norm", inorm(width));
  grouped = register_module("grouped", nn::Conv2d(conv(width, width, 3, stride, 1).groups(cardinality)));
  grouped_norm = register_module("grouped_norm", inorm(width));
  expand = register_module("expand", nn::Conv2d(conv(width, out_channels, 1, 1, 0)));
  expand_norm = register_module("expand_norm", inorm(out_channels));
  if (in_channels != out_channels || stride != 1) {
    projection = register_module("projection", nn::Sequential(nn::Conv2d(conv(in_channels, out_channels, 1, stride, 0)),
                                                              inorm(out_channels)));
  }
}

torch::Tensor ResNeXtBlockImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(reduce_norm(reduce(x)));
  h = torch::relu(grouped_norm(grouped(h)));
  h = expand_norm(expand(h));
  const auto shortcut = projection.is_empty() ? x : projection->forward(x);
  return torch::relu(shortcut + h);
}

void ResNeXtBlockImpl::zero_residual_branch() {
  torch::NoGradGuard guard;
  expand->weight.zero_();
  expand_norm->bias.zero_();
}

EncoderImpl::EncoderImpl(const std::vector<EncoderStageSpec>& specs) {
  if (specs.size() != kStages) throw ConfigError("encoder needs exactly 5 stage specs");
  stem = nn::Sequential();
  conv_norm_relu(stem, conv(3, specs[0].out_channels, 7, 2, 3));
  register_module("stem", stem);
  pool = register_module("pool", nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));

  int in = specs[0].out_channels;
  for (int i = 1; i < kStages; ++i) {
    const auto& s = specs[i];
    nn::Sequential stage;
    for (int b = 0; b < s.blocks; ++b) {
      stage->push_back(ResNeXtBlock(b == 0 ? in : s.out_channels, s.out_channels, s.width(), s.cardinality,
                                    b == 0 ? s.stride : 1));
    }
    stages.push_back(register_module("stage" + std::to_string(i + 1), stage));
    in = s.out_channels;
  }
}

std::vector<torch::Tensor> EncoderImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> feats;
  feats.reserve(kStages);
  feats.push_back(stem->forward(x));
  feats.push_back(stages[0]->forward(pool(feats.back())));
  for (int i = 1; i < kStages - 1; ++i) feats.push_back(stages[i]->forward(feats.back()));
  return feats;
}

PdsImpl::PdsImpl(int in_channels, int out_channels, int halvings_) : halvings(halvings_) {
  if (halvings < 0) throw ConfigError("pds: negative halving count");
  body = nn::Sequential();
  if (halvings == 0) {
    conv_norm_relu(body, conv(in_channels, out_channels, 1, 1, 0));
  } else {
    for (int k = 0; k < halvings; ++k) conv_norm_relu(body, conv(k == 0 ? in_channels : out_channels, out_channels, 3, 2, 1));
  }
  register_module("body", body);
}

torch::Tensor PdsImpl::forward(const torch::Tensor& x) { return body->forward(x); }

DecodeLayerImpl::DecodeLayerImpl(int in_channels, int out_channels, DecoderBlock kind_) : kind(kind_) {
  pre = nn::Sequential();
  post = nn::Sequential();
  if (kind == DecoderBlock::ConvUp) {
    conv_norm_relu(pre, conv(in_channels, out_channels, 3, 1, 1));
    conv_norm_relu(pre, conv(out_channels, out_channels, 3, 1, 1));
  } else {
    pre->push_back(nn::ConvTranspose2d(
        nn::ConvTranspose2dOptions(in_channels, out_channels, 4).stride(2).padding(1).bias(false)));
    pre->push_back(inorm(out_channels));
    pre->push_back(nn::ReLU());
    // Transposed conv and upsample each double; the strided conv brings the net factor back to 2.
    conv_norm_relu(post, conv(out_channels, out_channels, 3, 2, 1));
  }
  register_module("pre", pre);
  register_module("post", post);
}

torch::Tensor DecodeLayerImpl::forward(const torch::Tensor& x) {
  auto h = upsample_nearest2x(pre->forward(x));
  return post->is_empty() ? h : post->forward(h);
}

SkipMask full_skip_mask() {
  SkipMask m{};
  for (auto& row : m) row.fill(true);
  return m;
}

GeneratorImpl::GeneratorImpl(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  encoder = register_module("encoder", Encoder(cfg_.encoder_stages));

  for (int stage = 0; stage < kStages; ++stage) {
    const int working = cfg_.working_channels(stage);
    const int level = kStages - stage;  // stage resolution is S / 2^level
    nn::ModuleList list;
    for (int f : contributors(stage)) {
      const int in = cfg_.encoder_stages[f].out_channels;
      list->push_back(Pds(in, working, level - (f + 1)));
    }
    pds.push_back(register_module("pds" + std::to_string(stage), list));

    const auto inputs = static_cast<int>(list->size()) + (stage == 0 ? 0 : 1);
    if (cfg_.fusion_mode == FusionMode::Concat && inputs > 1) {
      concat_projection.push_back(register_module("concat" + std::to_string(stage),
                                                   nn::Conv2d(conv(inputs * working, working, 1, 1, 0, true))));
    } else {
      concat_projection.push_back(nullptr);
    }
    decoder.push_back(
        register_module("decode" + std::to_string(stage), DecodeLayer(working, cfg_.decoder_channels[stage], cfg_.decoder_block)));
  }
  output_conv = register_module("output_conv", nn::Conv2d(conv(cfg_.decoder_channels.back(), cfg_.output_channels, 3, 1, 1, true)));

  apply([](nn::Module& m) { init_weights(m); });
  {
    // Fan-out scaling over three output channels would saturate tanh at init.
    torch::NoGradGuard guard;
    nn::init::xavier_normal_(output_conv->weight);
  }
  if (cfg_.pretrained_encoder) load_encoder_weights(encoder, *cfg_.pretrained_encoder);
}

std::vector<int> GeneratorImpl::contributors(int stage) const {
  std::vector<int> out;
  const int level = kStages - stage;
  if (cfg_.skips_enabled) {
    for (int f = 0; f < level; ++f) out.push_back(f);
  } else if (stage == 0) {
    out.push_back(kStages - 1);
  }
  return out;
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& photo) { return forward(photo, full_skip_mask(), nullptr); }

torch::Tensor GeneratorImpl::forward(const torch::Tensor& photo, const SkipMask& mask, GeneratorTrace* trace) {
  TORCH_CHECK(photo.dim() == 4, "generator expects N×C×H×W input, got ", photo.sizes());
  if (photo.size(1) != 3)
    throw std::invalid_argument("generator expects 3 input channels, got " + std::to_string(photo.size(1)));
  if (photo.size(2) != photo.size(3) || photo.size(2) % 32 != 0)
    throw std::invalid_argument("generator input must be square with side divisible by 32");
  if (!warned_range_) {
    torch::NoGradGuard guard;
    const double lo = photo.min().item<double>(), hi = photo.max().item<double>();
    if (lo < -1.0 - 1e-3 || hi > 1.0 + 1e-3) {
      std::cerr << "warning: generator input outside [-1, 1] (min " << lo << ", max " << hi
                << "); was it normalized?\n";
      warned_range_ = true;
    }
  }

  auto feats = encoder->forward(photo);
  if (trace) {
    trace->encoder_features = feats;
    trace->skip_inputs.assign(kStages, {});
  }

  torch::Tensor prev;
  for (int stage = 0; stage < kStages; ++stage) {
    const auto who = contributors(stage);
    std::vector<torch::Tensor> contributions;
    for (std::size_t j = 0; j < who.size(); ++j) {
      const int f = who[j];
      // F5 at stage 0 is the previous layer's output, not a maskable skip.
      const bool is_prev = stage == 0 && f == kStages - 1;
      auto input = feats[f].view_as(feats[f]);
      if (trace) trace->skip_inputs[stage].push_back(input);
      auto projected = pds[stage][j]->as<PdsImpl>()->forward(input);
      if (is_prev) {
        prev = projected;
      } else {
        contributions.push_back(mask[stage][f] ? projected : torch::zeros_like(projected));
      }
    }

    torch::Tensor fused;
    if (concat_projection[stage]) {
      std::vector<torch::Tensor> all{prev};
      all.insert(all.end(), contributions.begin(), contributions.end());
      for (const auto& c : all)
        if (c.sizes() != prev.sizes())
          throw std::invalid_argument("fuse: shape mismatch at decoder stage " + std::to_string(stage));
      fused = concat_projection[stage]->forward(torch::cat(all, 1));
    } else {
      fused = fuse_sum(prev, contributions, stage);
    }
    prev = decoder[stage]->forward(fused);
    if (trace) trace->decoder_outputs.push_back(prev);
  }
  return torch::tanh(output_conv->forward(prev));
}

void init_weights(nn::Module& m) {
  torch::NoGradGuard guard;
  if (auto* c = m.as<nn::Conv2dImpl>()) {
    nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanOut, torch::kReLU);
    if (c->bias.defined()) c->bias.zero_();
  } else if (auto* t = m.as<nn::ConvTranspose2dImpl>()) {
    nn::init::kaiming_normal_(t->weight, 0.0, torch::kFanOut, torch::kReLU);
    if (t->bias.defined()) t->bias.zero_();
  } else if (auto* n = m.as<nn::InstanceNorm2dImpl>()) {
    if (n->weight.defined()) n->weight.fill_(1.0);
    if (n->bias.defined()) n->bias.zero_();
  }
}

void load_encoder_weights(Encoder& encoder, const std::string& path) {
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path);
  } catch (const c10::Error& e) {
    throw std::runtime_error("cannot read encoder weights from " + path + ": " + e.what_without_backtrace());
  }
  torch::NoGradGuard guard;
  for (auto& item : encoder->named_parameters()) {
    torch::Tensor value;
    if (!archive.try_read(item.key(), value))
      throw std::runtime_error("encoder weights " + path + " lack '" + item.key() + "'");
    if (value.sizes() != item.value().sizes()) {
      std::ostringstream msg;
      msg << "encoder weight '" << item.key() << "' has shape " << value.sizes() << ", expected "
          << item.value().sizes();
      throw std::runtime_error(msg.str());
    }
    item.value().copy_(value);
  }
}

std::vector<WeightEntry> weight_manifest(const nn::Module& module) {
  std::vector<WeightEntry> out;
  for (const auto& item : module.named_parameters()) out.push_back({item.key(), item.value().sizes().vec()});
  for (const auto& item : module.named_buffers()) out.push_back({item.key(), item.value().sizes().vec()});
  return out;
}

}  // namespace p2ld
