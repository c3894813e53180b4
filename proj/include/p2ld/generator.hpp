#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace p2ld {

namespace nn = torch::nn;

/// Raised when a model configuration violates a structural invariant.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class FusionMode { Sum, Concat };
enum class DecoderBlock { ConvUp, ConvTransposeUp };

std::string to_string(FusionMode m);
std::string to_string(DecoderBlock b);
FusionMode parse_fusion_mode(const std::string& s);
DecoderBlock parse_decoder_block(const std::string& s);

/// One encoder stage. Stage 1 is the 7×7 stem convolution (blocks and cardinality
/// unused); stages 2–5 are stacks of ResNeXt bottleneck blocks.
struct EncoderStageSpec {
  int out_channels = 64;
  int stride = 1;
  int blocks = 1;
  int cardinality = 1;
  int bottleneck_width = 0;  ///< 0 selects out_channels / 2 (ResNeXt 32×4d layout).

  int width() const { return bottleneck_width > 0 ? bottleneck_width : out_channels / 2; }
  bool operator==(const EncoderStageSpec&) const = default;
};

inline constexpr int kStages = 5;

struct GeneratorConfig {
  int input_size = 512;
  std::vector<EncoderStageSpec> encoder_stages = {
      {64, 2, 1, 1, 0}, {256, 1, 3, 32, 0}, {512, 2, 4, 32, 0}, {1024, 2, 6, 32, 0}, {2048, 2, 3, 32, 0}};
  std::vector<int> decoder_channels = {1024, 512, 256, 128, 64};
  FusionMode fusion_mode = FusionMode::Sum;
  bool skips_enabled = true;
  DecoderBlock decoder_block = DecoderBlock::ConvUp;
  int output_channels = 3;
  std::optional<std::string> pretrained_encoder;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  /// Channel count entering decoder stage k (0 = deepest).
  int working_channels(int stage) const;

  /// Small network (S=32, encoder widths 4,8,8,8,8) for gradient checks.
  static GeneratorConfig miniature();

  bool operator==(const GeneratorConfig&) const = default;
};

/// Nearest-neighbour ×2 upsampling of an N×C×H×W tensor.
torch::Tensor upsample_nearest2x(const torch::Tensor& x);

/// Number of stride-2 convolutions needed to bring `source_res` down to `target_res`.
/// Throws std::invalid_argument unless the ratio is a non-negative power of two.
int pds_halvings(int source_res, int target_res);

/// Element-wise sum of `prev` and every contribution. Throws std::invalid_argument
/// naming `stage` when any shape differs from `prev`.
torch::Tensor fuse_sum(const torch::Tensor& prev, const std::vector<torch::Tensor>& contributions, int stage);

/// Grouped bottleneck residual block: out = relu(shortcut(x) + expand(group3x3(reduce(x)))).
/// The 3×3 grouped convolution realises the sum of `cardinality` parallel paths.
struct ResNeXtBlockImpl : nn::Module {
  ResNeXtBlockImpl(int in_channels, int out_channels, int width, int cardinality, int stride);
  torch::Tensor forward(const torch::Tensor& x);

  /// Zeroes the final 1×1 convolution so every transformation path outputs 0.
  void zero_residual_branch();
  bool has_projection() const { return !projection.is_empty(); }

  nn::Conv2d reduce{nullptr}, grouped{nullptr}, expand{nullptr};
  nn::InstanceNorm2d reduce_norm{nullptr}, grouped_norm{nullptr}, expand_norm{nullptr};
  nn::Sequential projection{nullptr};
};
TORCH_MODULE(ResNeXtBlock);

/// conv1 … conv5 of a ResNeXt backbone; returns the five stage outputs.
struct EncoderImpl : nn::Module {
  explicit EncoderImpl(const std::vector<EncoderStageSpec>& stages);
  std::vector<torch::Tensor> forward(const torch::Tensor& x);

  nn::Sequential stem{nullptr};
  nn::MaxPool2d pool{nullptr};
  std::vector<nn::Sequential> stages;
};
TORCH_MODULE(Encoder);

/// Progressive downsampling: `halvings` stride-2 3×3 convolutions (the first one
/// projecting channels), or one 1×1 projection when no halving is needed. Every
/// convolution is followed by instance norm and ReLU.
struct PdsImpl : nn::Module {
  PdsImpl(int in_channels, int out_channels, int halvings);
  torch::Tensor forward(const torch::Tensor& x);

  int halvings = 0;
  nn::Sequential body{nullptr};
};
TORCH_MODULE(Pds);

/// Doubles the spatial resolution. ConvUp: two 3×3 conv+norm+ReLU then nearest ×2.
/// ConvTransposeUp: stride-2 transposed conv, nearest ×2, stride-2 3×3 conv.
struct DecodeLayerImpl : nn::Module {
  DecodeLayerImpl(int in_channels, int out_channels, DecoderBlock kind);
  torch::Tensor forward(const torch::Tensor& x);

  DecoderBlock kind;
  nn::Sequential pre{nullptr};
  nn::Sequential post{nullptr};
};
TORCH_MODULE(DecodeLayer);

/// Which skip contributions reach each decoder stage: mask[stage][feature], with
/// feature 0 = F1. Masked contributions are replaced by zero tensors.
using SkipMask = std::array<std::array<bool, kStages>, kStages>;
SkipMask full_skip_mask();

/// Intermediate tensors of one forward pass, for inspection and gradient tracing.
struct GeneratorTrace {
  std::vector<torch::Tensor> encoder_features;            ///< F1 … F5
  std::vector<std::vector<torch::Tensor>> skip_inputs;   ///< [stage] → aliases of F_i fed to PDS
  std::vector<torch::Tensor> decoder_outputs;             ///< one per decoder stage
};

struct GeneratorImpl : nn::Module {
  explicit GeneratorImpl(GeneratorConfig cfg);

  torch::Tensor forward(const torch::Tensor& photo);
  torch::Tensor forward(const torch::Tensor& photo, const SkipMask& mask, GeneratorTrace* trace = nullptr);

  /// Encoder feature indices (0-based) feeding decoder stage `stage` through PDS.
  /// Stage 0 always includes F5, which stands in for the previous layer there.
  std::vector<int> contributors(int stage) const;

  const GeneratorConfig& config() const { return cfg_; }

  Encoder encoder{nullptr};
  std::vector<nn::ModuleList> pds;              ///< pds[stage][j] pairs with contributors(stage)[j]
  std::vector<nn::Conv2d> concat_projection;    ///< concat mode only
  std::vector<DecodeLayer> decoder;
  nn::Conv2d output_conv{nullptr};

 private:
  GeneratorConfig cfg_;
  bool warned_range_ = false;
};
TORCH_MODULE(Generator);

/// He initialisation for convolutions, unit/zero affine for instance norm.
void init_weights(nn::Module& module);

/// Copies encoder weights from a torch archive keyed by parameter name
/// (see weight_manifest). Missing or mis-shaped entries throw.
void load_encoder_weights(Encoder& encoder, const std::string& path);

struct WeightEntry {
  std::string name;
  std::vector<int64_t> shape;
};
std::vector<WeightEntry> weight_manifest(const nn::Module& module);

}  // namespace p2ld
