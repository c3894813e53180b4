#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "p2ld/data.hpp"
#include "p2ld/discriminator.hpp"
#include "p2ld/generator.hpp"
#include "p2ld/objectives.hpp"

namespace p2ld {

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int epochs = 200;
  int batch_size = 1;
  int image_size = 512;
  LossWeights weights;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;  ///< epochs; 0 disables periodic checkpoints
  std::string device = "cpu";

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Everything needed to rebuild a training run.
struct RunConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  TrainConfig train;

  bool operator==(const RunConfig&) const = default;
};

/// A loss term became NaN or infinite (CLI exit code 3).
struct TrainingAborted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint could not be written, read or matched to this build (CLI exit code 4).
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::int64_t kCheckpointFormatVersion = 1;

/// Models, optimizers and progress counters of one run. Construction seeds torch's
/// generator with cfg.train.seed, so equal configs build bitwise-equal models.
struct TrainState {
  explicit TrainState(RunConfig cfg);

  RunConfig config;
  torch::Device device;
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g;
  std::unique_ptr<torch::optim::Adam> opt_d;
  std::int64_t epoch = 0;  ///< completed epochs
  std::int64_t step = 0;   ///< completed optimisation steps
};

/// Resolves the run device: P2LD_DEVICE overrides `requested`.
torch::Device resolve_device(const std::string& requested);

/// Enables deterministic kernels and seeds torch's global generator.
void seed_everything(std::uint64_t seed);

/// One discriminator update on λ1·ra_d_loss. `fake` is detached here, so the
/// generator's parameters receive no gradient. Returns the weighted loss.
double discriminator_update(TrainState& state, const torch::Tensor& photo, const torch::Tensor& drawing,
                            const torch::Tensor& fake);

/// One generator update on λ2·ra_g_loss + λ3·pixel_l1 with the current discriminator.
/// Returns {g_adv, g_pix, g_total}.
struct GeneratorLosses {
  double g_adv, g_pix, g_total;
};
GeneratorLosses generator_update(TrainState& state, const torch::Tensor& photo, const torch::Tensor& drawing,
                                 const torch::Tensor& fake);

/// Generate, update D, then update G. Inputs are N×3×S×S batches in [-1, 1].
/// Throws TrainingAborted naming the first non-finite term.
LossReport train_step(TrainState& state, const torch::Tensor& photo, const torch::Tensor& drawing);
LossReport train_step(TrainState& state, const NormalizedPair& pair);

/// Random-access source of normalized training pairs.
class PairSource {
 public:
  virtual ~PairSource() = default;
  virtual std::size_t size() const = 0;
  virtual NormalizedPair get(std::size_t index) const = 0;
};

/// Pairs held in memory.
class MemoryPairSource : public PairSource {
 public:
  explicit MemoryPairSource(std::vector<NormalizedPair> pairs) : pairs_(std::move(pairs)) {}
  std::size_t size() const override { return pairs_.size(); }
  NormalizedPair get(std::size_t index) const override { return pairs_.at(index); }

 private:
  std::vector<NormalizedPair> pairs_;
};

/// The train split of a manifest, decoded from disk on demand. Decoded pairs are
/// cached while the cache stays under `cache_bytes`.
class ManifestPairSource : public PairSource {
 public:
  ManifestPairSource(const DatasetManifest& manifest, int image_size, std::size_t cache_bytes = 512u << 20);
  std::size_t size() const override { return pairs_.size(); }
  NormalizedPair get(std::size_t index) const override;

 private:
  std::vector<ImagePair> pairs_;
  int image_size_;
  std::size_t cache_limit_;
  mutable std::vector<std::optional<NormalizedPair>> cache_;
  mutable std::size_t cached_bytes_ = 0;
};

/// Visiting order of epoch `epoch`, a pure function of (seed, epoch, n).
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::int64_t epoch, std::size_t n);

struct FitOptions {
  std::optional<std::filesystem::path> out_dir;  ///< checkpoints land here when set
  std::function<void(std::int64_t step, const LossReport&)> on_step;
  std::function<void(std::int64_t epoch, const LossReport& mean)> on_epoch;
  /// Stop after this many global steps (mid-epoch if needed); -1 runs to completion.
  std::int64_t stop_after_step = -1;
};

/// Runs the remaining epochs of `state` (resuming mid-epoch when state.step says
/// so) over `data`, checkpointing every cfg.checkpoint_every epochs and at the end.
/// Returns the path of the last checkpoint written, if any.
std::optional<std::filesystem::path> fit(TrainState& state, const PairSource& data, const FitOptions& opts = {});

std::size_t steps_per_epoch(std::size_t pairs, int batch_size);

/// Atomic write (temp file + rename); one retry before CheckpointError.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Rebuilds the full training state; throws CheckpointError without side effects.
TrainState load_checkpoint(const std::filesystem::path& path, std::optional<std::string> device = std::nullopt);
/// Builds the generator stored in a checkpoint without touching optimizer state.
Generator load_generator(const std::filesystem::path& path, RunConfig* config_out = nullptr);
/// Reads only the configuration snapshot.
RunConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace p2ld
