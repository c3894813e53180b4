#include "p2ld/trainer.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "p2ld/config.hpp"
#include "p2ld/util.hpp"

namespace p2ld {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("beta1 must lie in [0, 1)");
  if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("beta2 must lie in [0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (image_size < 32 || image_size % 32 != 0) throw ConfigError("image_size must be a positive multiple of 32");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  try {
    weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

torch::Device resolve_device(const std::string& requested) {
  std::string name = requested.empty() ? "cpu" : requested;
  if (const char* env = std::getenv("P2LD_DEVICE"); env && *env) name = env;
  try {
    torch::Device device(name);
    if (device.is_cuda() && !torch::cuda::is_available()) throw ConfigError("device '" + name + "' is not available");
    return device;
  } catch (const c10::Error&) {
    throw ConfigError("unknown device '" + name + "'");
  }
}

void seed_everything(std::uint64_t seed) {
  at::globalContext().setDeterministicAlgorithms(true, false);
  torch::manual_seed(seed);
}

TrainState::TrainState(RunConfig cfg) : config(std::move(cfg)), device(resolve_device(config.train.device)) {
  config.generator.validate();
  config.discriminator.validate();
  config.train.validate();
  seed_everything(config.train.seed);
  generator = Generator(config.generator);
  discriminator = Discriminator(config.discriminator);
  generator->to(device);
  discriminator->to(device);
  const auto& t = config.train;
  auto adam = [&t] { return torch::optim::AdamOptions(t.lr).betas({t.beta1, t.beta2}); };
  opt_g = std::make_unique<torch::optim::Adam>(generator->parameters(), adam());
  opt_d = std::make_unique<torch::optim::Adam>(discriminator->parameters(), adam());
}

namespace {

void check_finite(double value, const char* term, std::int64_t step) {
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite " << term << " (" << value << ") at step " << step;
    throw TrainingAborted(msg.str());
  }
}

}  // namespace

double discriminator_update(TrainState& state, const torch::Tensor& photo, const torch::Tensor& drawing,
                            const torch::Tensor& fake) {
  state.opt_d->zero_grad(true);
  const auto d_real = state.discriminator->forward(photo, drawing);
  const auto d_fake = state.discriminator->forward(photo, fake.detach());
  const auto loss = state.config.train.weights.lambda1 * ra_d_loss(d_real, d_fake);
  const double value = loss.item<double>();
  check_finite(value, "d_loss", state.step);
  loss.backward();
  state.opt_d->step();
  return value;
}

GeneratorLosses generator_update(TrainState& state, const torch::Tensor& photo, const torch::Tensor& drawing,
                                 const torch::Tensor& fake) {
  const auto& w = state.config.train.weights;
  state.opt_g->zero_grad(true);
  torch::Tensor d_real;
  {
    torch::NoGradGuard guard;
    d_real = state.discriminator->forward(photo, drawing);
  }
  const auto d_fake = state.discriminator->forward(photo, fake);
  const auto g_adv = ra_g_loss(d_real, d_fake);
  const auto g_pix = pixel_l1(fake, drawing);
  const auto g_total = w.lambda2 * g_adv + w.lambda3 * g_pix;
  GeneratorLosses out{g_adv.item<double>(), g_pix.item<double>(), g_total.item<double>()};
  check_finite(out.g_adv, "g_adv", state.step);
  check_finite(out.g_pix, "g_pix", state.step);
  check_finite(out.g_total, "g_total", state.step);
  g_total.backward();
  state.opt_g->step();
  // The adversarial backward also filled discriminator gradients; drop them.
  state.opt_d->zero_grad(true);
  return out;
}

LossReport train_step(TrainState& state, const torch::Tensor& photo, const torch::Tensor& drawing) {
  state.generator->train();
  state.discriminator->train();
  const auto p = photo.to(state.device);
  const auto d = drawing.to(state.device);
  const auto fake = state.generator->forward(p);
  LossReport report;
  report.d_loss = discriminator_update(state, p, d, fake);
  const auto g = generator_update(state, p, d, fake);
  report.g_adv = g.g_adv;
  report.g_pix = g.g_pix;
  report.g_total = g.g_total;
  ++state.step;
  return report;
}

LossReport train_step(TrainState& state, const NormalizedPair& pair) {
  return train_step(state, pair.photo.unsqueeze(0), pair.drawing.unsqueeze(0));
}

ManifestPairSource::ManifestPairSource(const DatasetManifest& manifest, int image_size, std::size_t cache_bytes)
    : image_size_(image_size), cache_limit_(cache_bytes) {
  validate_image_size(image_size);
  for (const auto* p : manifest.subset(Split::Train)) pairs_.push_back(*p);
  cache_.resize(pairs_.size());
}

NormalizedPair ManifestPairSource::get(std::size_t index) const {
  if (cache_.at(index)) return *cache_[index];
  auto pair = preprocess(pairs_[index], image_size_);
  const std::size_t bytes = 2u * 3u * image_size_ * image_size_ * sizeof(float);
  if (cached_bytes_ + bytes <= cache_limit_) {
    cache_[index] = pair;
    cached_bytes_ += bytes;
  }
  return pair;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::int64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  shuffle_indices(order, rng);
  return order;
}

std::size_t steps_per_epoch(std::size_t pairs, int batch_size) {
  return (pairs + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
}

std::optional<fs::path> fit(TrainState& state, const PairSource& data, const FitOptions& opts) {
  const auto& cfg = state.config.train;
  const std::size_t n = data.size();
  if (n == 0) throw DataError("training split is empty");
  const auto per_epoch = static_cast<std::int64_t>(steps_per_epoch(n, cfg.batch_size));
  if (opts.out_dir) fs::create_directories(*opts.out_dir);

  std::optional<fs::path> last;
  while (state.epoch < cfg.epochs) {
    const auto order = epoch_order(cfg.seed, state.epoch, n);
    const std::int64_t first = std::max<std::int64_t>(0, state.step - state.epoch * per_epoch);
    LossReport sum;
    std::int64_t count = 0;
    for (std::int64_t s = first; s < per_epoch; ++s) {
      if (opts.stop_after_step >= 0 && state.step >= opts.stop_after_step) return last;
      std::vector<torch::Tensor> photos, drawings;
      const auto begin = static_cast<std::size_t>(s) * cfg.batch_size;
      const auto end = std::min(n, begin + cfg.batch_size);
      for (auto k = begin; k < end; ++k) {
        auto pair = data.get(order[k]);
        photos.push_back(pair.photo);
        drawings.push_back(pair.drawing);
      }
      const auto r = train_step(state, torch::stack(photos), torch::stack(drawings));
      if (opts.on_step) opts.on_step(state.step, r);
      sum.d_loss += r.d_loss;
      sum.g_adv += r.g_adv;
      sum.g_pix += r.g_pix;
      sum.g_total += r.g_total;
      ++count;
    }
    ++state.epoch;
    if (opts.on_epoch && count > 0) {
      const double c = static_cast<double>(count);
      opts.on_epoch(state.epoch, {sum.d_loss / c, sum.g_adv / c, sum.g_pix / c, sum.g_total / c});
    }
    if (opts.out_dir) {
      const bool periodic = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
      if (periodic) {
        std::ostringstream name;
        name << "epoch_" << std::setw(4) << std::setfill('0') << state.epoch << ".pt";
        last = *opts.out_dir / name.str();
        save_checkpoint(state, *last);
      }
      if (state.epoch == cfg.epochs) {
        last = *opts.out_dir / "final.pt";
        save_checkpoint(state, *last);
      }
    }
  }
  return last;
}

namespace {

std::string manifest_json(const nn::Module& m) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : weight_manifest(m)) j.push_back({{"name", e.name}, {"shape", e.shape}});
  return j.dump();
}

// Adam moments by parameter position. The optimizer's own serializer keys state by
// tensor address, which changes on every reload.
void save_adam(const torch::optim::Adam& opt, torch::serialize::OutputArchive& archive) {
  const auto& params = opt.param_groups().at(0).params();
  archive.write("count", c10::IValue(static_cast<std::int64_t>(params.size())));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto it = opt.state().find(params[i].unsafeGetTensorImpl());
    if (it == opt.state().end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    const auto key = std::to_string(i);
    archive.write(key + ".step", c10::IValue(s.step()));
    archive.write(key + ".exp_avg", s.exp_avg(), /*is_buffer=*/true);
    archive.write(key + ".exp_avg_sq", s.exp_avg_sq(), /*is_buffer=*/true);
  }
}

void load_adam(torch::optim::Adam& opt, torch::serialize::InputArchive& archive) {
  const auto& params = opt.param_groups().at(0).params();
  c10::IValue count;
  if (!archive.try_read("count", count) || count.toInt() != static_cast<std::int64_t>(params.size()))
    throw CheckpointError("optimizer state does not match the model's parameter count");
  opt.state().clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto key = std::to_string(i);
    c10::IValue step;
    if (!archive.try_read(key + ".step", step)) continue;
    torch::Tensor m, v;
    archive.read(key + ".exp_avg", m, /*is_buffer=*/true);
    archive.read(key + ".exp_avg_sq", v, /*is_buffer=*/true);
    if (!m.sizes().equals(params[i].sizes()) || !v.sizes().equals(params[i].sizes()))
      throw CheckpointError("optimizer moment " + key + " has the wrong shape");
    auto st = std::make_unique<torch::optim::AdamParamState>();
    st->step(step.toInt());
    st->exp_avg(m.to(params[i].device()));
    st->exp_avg_sq(v.to(params[i].device()));
    opt.state()[params[i].unsafeGetTensorImpl()] = std::move(st);
  }
}

void write_archive(const TrainState& state, const fs::path& path) {
  torch::serialize::OutputArchive archive;
  archive.write("format_version", c10::IValue(kCheckpointFormatVersion));
  archive.write("config", c10::IValue(nlohmann::json(state.config).dump()));
  archive.write("epoch", c10::IValue(state.epoch));
  archive.write("step", c10::IValue(state.step));
  archive.write("seed", c10::IValue(static_cast<std::int64_t>(state.config.train.seed)));
  archive.write("generator_manifest", c10::IValue(manifest_json(*state.generator)));
  archive.write("discriminator_manifest", c10::IValue(manifest_json(*state.discriminator)));

  torch::serialize::OutputArchive g, d, og, od;
  state.generator->save(g);
  state.discriminator->save(d);
  save_adam(*state.opt_g, og);
  save_adam(*state.opt_d, od);
  archive.write("generator", g);
  archive.write("discriminator", d);
  archive.write("opt_g", og);
  archive.write("opt_d", od);

  // Writing through a stream fixes the zip root name, so equal states give equal bytes
  // whatever the file is called.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    archive.save_to(out);
    out.flush();
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

torch::serialize::InputArchive open_archive(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw CheckpointError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string(), torch::kCPU);
  } catch (const std::exception& e) {
    throw CheckpointError("cannot read checkpoint " + path.string() + ": " + e.what());
  }
  c10::IValue version;
  if (!archive.try_read("format_version", version) || !version.isInt())
    throw CheckpointError("checkpoint " + path.string() + " has no format version");
  if (version.toInt() != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint " + path.string() + " has format version " + std::to_string(version.toInt()) +
                          ", this build reads version " + std::to_string(kCheckpointFormatVersion));
  }
  return archive;
}

RunConfig config_from_archive(torch::serialize::InputArchive& archive) {
  c10::IValue value;
  if (!archive.try_read("config", value) || !value.isString()) throw CheckpointError("checkpoint lacks a config snapshot");
  try {
    return nlohmann::json::parse(value.toStringRef()).get<RunConfig>();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint config snapshot is invalid: ") + e.what());
  }
}

std::int64_t read_int(torch::serialize::InputArchive& archive, const char* key) {
  c10::IValue value;
  if (!archive.try_read(key, value) || !value.isInt()) throw CheckpointError(std::string("checkpoint lacks '") + key + "'");
  return value.toInt();
}

}  // namespace

void save_checkpoint(const TrainState& state, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  for (int attempt = 0;; ++attempt) {
    try {
      write_archive(state, path);
      return;
    } catch (const std::exception& e) {
      if (attempt >= 1) throw CheckpointError("cannot write checkpoint " + path.string() + ": " + e.what());
      std::cerr << "warning: checkpoint write failed (" << e.what() << "); retrying\n";
    }
  }
}

RunConfig read_checkpoint_config(const fs::path& path) {
  auto archive = open_archive(path);
  return config_from_archive(archive);
}

Generator load_generator(const fs::path& path, RunConfig* config_out) {
  auto archive = open_archive(path);
  auto cfg = config_from_archive(archive);
  Generator g(nullptr);
  try {
    g = Generator(cfg.generator);
    torch::serialize::InputArchive sub;
    archive.read("generator", sub);
    g->load(sub);
  } catch (const std::exception& e) {
    throw CheckpointError("checkpoint " + path.string() + " has an unreadable generator: " + e.what());
  }
  g->eval();
  if (config_out) *config_out = cfg;
  return g;
}

TrainState load_checkpoint(const fs::path& path, std::optional<std::string> device) {
  auto archive = open_archive(path);
  auto cfg = config_from_archive(archive);
  if (device) cfg.train.device = *device;
  TrainState state(cfg);
  try {
    state.epoch = read_int(archive, "epoch");
    state.step = read_int(archive, "step");
    torch::serialize::InputArchive g, d, og, od;
    archive.read("generator", g);
    archive.read("discriminator", d);
    archive.read("opt_g", og);
    archive.read("opt_d", od);
    state.generator->load(g);
    state.discriminator->load(d);
    load_adam(*state.opt_g, og);
    load_adam(*state.opt_d, od);
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("checkpoint " + path.string() + " is incomplete or does not match its config: " + e.what());
  }
  state.generator->to(state.device);
  state.discriminator->to(state.device);
  return state;
}

}  // namespace p2ld
