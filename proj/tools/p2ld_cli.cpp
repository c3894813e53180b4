#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "p2ld/config.hpp"
#include "p2ld/data.hpp"
#include "p2ld/metrics.hpp"
#include "p2ld/trainer.hpp"
#include "p2ld/util.hpp"

namespace fs = std::filesystem;
using namespace p2ld;

namespace {

enum Exit { kOk = 0, kData = 1, kUsage = 2, kAborted = 3, kCheckpoint = 4, kEvaluation = 5 };

struct PrepareArgs {
  std::string photos, drawings, out;
  std::optional<std::string> categories;
  std::uint64_t seed = 0;
  double train_frac = 0.7;
};

struct TrainArgs {
  std::optional<std::string> manifest, config, resume, device;
  std::string out;
  std::optional<int> epochs, batch_size, size, checkpoint_every;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> fusion, decoder_block;
  bool no_skips = false;
  std::int64_t max_steps = -1;
  bool dry_run = false;
};

struct GenerateArgs {
  std::string ckpt, input, out;
  std::optional<int> size;
};

struct EvaluateArgs {
  std::string generated, ground_truth, extractor = "builtin", out;
};

int cmd_prepare(const PrepareArgs& a) {
  std::optional<fs::path> categories;
  if (a.categories) categories = *a.categories;
  const auto scanned = scan_pairs(a.photos, a.drawings, categories);
  for (const auto& w : scanned.warnings) std::cerr << "warning: " << w.id << ": " << w.message << "\n";
  const auto manifest = split_dataset(scanned, a.train_frac, a.seed);
  save_manifest(manifest, a.out);

  std::cout << "pairs=" << manifest.pairs.size() << "\n";
  for (const auto& [category, count] : manifest.category_histogram()) std::cout << to_string(category) << "=" << count << "\n";
  std::cout << "train=" << manifest.count(Split::Train) << " test=" << manifest.count(Split::Test) << "\n";
  return kOk;
}

void echo_config(const RunConfig& cfg) {
  const auto& t = cfg.train;
  std::cout << "lr=" << t.lr << " betas=(" << t.beta1 << "," << t.beta2 << ") epochs=" << t.epochs
            << " batch=" << t.batch_size << " size=" << t.image_size << "\n";
  std::cout << "weights=(" << t.weights.lambda1 << "," << t.weights.lambda2 << "," << t.weights.lambda3
            << ") fusion=" << to_string(cfg.generator.fusion_mode) << " skips=" << (cfg.generator.skips_enabled ? "on" : "off")
            << " decoder_block=" << to_string(cfg.generator.decoder_block) << " seed=" << t.seed << "\n";
}

void apply_overrides(RunConfig& cfg, const TrainArgs& a) {
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.size) cfg.train.image_size = *a.size;
  if (a.checkpoint_every) cfg.train.checkpoint_every = *a.checkpoint_every;
  if (a.lr) cfg.train.lr = *a.lr;
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.device) cfg.train.device = *a.device;
  if (a.fusion) cfg.generator.fusion_mode = parse_fusion_mode(*a.fusion);
  if (a.decoder_block) cfg.generator.decoder_block = parse_decoder_block(*a.decoder_block);
  if (a.no_skips) cfg.generator.skips_enabled = false;
  cfg.generator.input_size = cfg.train.image_size;
}

int cmd_train(const TrainArgs& a) {
  std::optional<TrainState> state;
  RunConfig cfg;
  if (a.resume) {
    state.emplace(load_checkpoint(*a.resume, a.device));
    // Only the schedule may change on resume; the model and optimiser are fixed.
    if (a.epochs) state->config.train.epochs = *a.epochs;
    if (a.checkpoint_every) state->config.train.checkpoint_every = *a.checkpoint_every;
    cfg = state->config;
  } else {
    if (a.config) cfg = load_run_config(*a.config);
    apply_overrides(cfg, a);
    cfg.generator.validate();
    cfg.discriminator.validate();
    cfg.train.validate();
  }
  echo_config(cfg);
  if (a.dry_run) return kOk;

  if (state && state->epoch >= cfg.train.epochs) {
    std::cout << "training complete (epoch " << state->epoch << " of " << cfg.train.epochs << ")\n";
    return kOk;
  }
  if (!a.manifest) throw CLI::RequiredError("--manifest");
  const auto manifest = load_manifest(*a.manifest);
  ManifestPairSource data(manifest, cfg.train.image_size);
  if (data.size() == 0) throw DataError("manifest has no training pairs");
  if (!state) state.emplace(cfg);

  const fs::path out = a.out;
  fs::create_directories(out);
  save_run_config(cfg, out / "config.json");
  std::ofstream log(out / "log.jsonl", std::ios::app);
  const auto per_epoch = static_cast<std::int64_t>(steps_per_epoch(data.size(), cfg.train.batch_size));

  FitOptions opts;
  opts.out_dir = out;
  opts.stop_after_step = a.max_steps < 0 ? -1 : state->step + a.max_steps;
  opts.on_step = [&](std::int64_t step, const LossReport& r) {
    log << to_json_line(r, step) << "\n";
    log.flush();
    if (step % 50 == 0 || step % per_epoch == 0)
      std::cerr << "step " << step << " d=" << r.d_loss << " g_adv=" << r.g_adv << " g_pix=" << r.g_pix << "\n";
  };
  opts.on_epoch = [&](std::int64_t epoch, const LossReport& m) {
    std::cerr << "epoch " << epoch << "/" << cfg.train.epochs << " mean d=" << m.d_loss << " g_adv=" << m.g_adv
              << " g_pix=" << m.g_pix << " g_total=" << m.g_total << "\n";
  };
  auto last = fit(*state, data, opts);
  if (state->epoch < cfg.train.epochs) {
    // Stopped early by --max-steps; keep a resumable snapshot.
    last = out / "last.pt";
    save_checkpoint(*state, *last);
  }
  std::cout << "steps=" << state->step << " epochs=" << state->epoch;
  if (last) std::cout << " checkpoint=" << last->string();
  std::cout << "\n";
  return kOk;
}

bool is_image(const fs::path& p) {
  static const std::set<std::string> exts = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"};
  auto ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return exts.count(ext) > 0;
}

int cmd_generate(const GenerateArgs& a) {
  RunConfig cfg;
  auto g = load_generator(a.ckpt, &cfg);
  const int size = a.size.value_or(cfg.train.image_size);
  validate_image_size(size);

  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    for (const auto& e : fs::directory_iterator(a.input))
      if (e.is_regular_file() && is_image(e.path())) inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else if (fs::is_regular_file(a.input)) {
    inputs.push_back(a.input);
  } else {
    throw DataError("input not found: " + a.input);
  }

  fs::create_directories(a.out);
  torch::NoGradGuard guard;
  std::size_t written = 0, skipped = 0;
  for (const auto& path : inputs) {
    cv::Mat photo;
    try {
      photo = load_rgb(path);
    } catch (const DataError& e) {
      std::cerr << "warning: " << e.what() << "; skipped\n";
      ++skipped;
      continue;
    }
    const auto x = normalize_image(photo, size).unsqueeze(0);
    const auto y = g->forward(x)[0];
    save_rgb_png(denormalize(y), fs::path(a.out) / (path.stem().string() + ".png"));
    ++written;
  }
  std::cout << "generated=" << written << " skipped=" << skipped << " size=" << size << "\n";
  return kOk;
}

int cmd_evaluate(const EvaluateArgs& a) {
  std::unique_ptr<FeatureExtractor> ex;
  try {
    ex = make_extractor(a.extractor);
  } catch (const std::exception& e) {
    throw MetricError(std::string("cannot load extractor: ") + e.what());
  }
  const auto report = evaluate_set(a.generated, a.ground_truth, *ex);
  write_text_atomic(a.out, to_json(report) + "\n");
  std::cout << "images=" << report.per_image.size() << " fid=" << report.fid << " ssim=" << report.ssim_mean
            << " psnr=" << report.psnr_mean << " extractor=" << report.extractor << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Photo to character line drawing translation"};
  app.require_subcommand(1);

  PrepareArgs pa;
  auto* prepare = app.add_subcommand("prepare", "Pair photos with drawings and write a split manifest");
  prepare->add_option("--photos", pa.photos, "Photo directory")->required();
  prepare->add_option("--drawings", pa.drawings, "Drawing directory")->required();
  prepare->add_option("--categories", pa.categories, "CSV of id,category");
  prepare->add_option("--out", pa.out, "Manifest JSON to write")->required();
  prepare->add_option("--seed", pa.seed, "Split seed")->capture_default_str();
  prepare->add_option("--train-frac", pa.train_frac, "Fraction of pairs used for training")->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the generator and discriminator");
  train->add_option("--manifest", ta.manifest, "Manifest from 'prepare'");
  train->add_option("--config", ta.config, "Run configuration JSON");
  train->add_option("--out", ta.out, "Output directory for checkpoints and logs");
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--device", ta.device, "cpu or cuda[:N]; P2LD_DEVICE overrides");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--batch-size", ta.batch_size);
  train->add_option("--size", ta.size, "Training resolution S");
  train->add_option("--lr", ta.lr);
  train->add_option("--seed", ta.seed);
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Epochs between checkpoints; 0 keeps only the final one");
  train->add_option("--fusion", ta.fusion, "sum or concat");
  train->add_option("--decoder-block", ta.decoder_block, "conv_up or convtranspose_up");
  train->add_flag("--no-skips", ta.no_skips, "Disable cross-scale skip connections");
  train->add_option("--max-steps", ta.max_steps, "Stop after this many steps in this invocation");
  train->add_flag("--dry-run", ta.dry_run, "Print the resolved configuration and exit");

  GenerateArgs ga;
  auto* generate = app.add_subcommand("generate", "Translate photos into line drawings");
  generate->add_option("--ckpt", ga.ckpt, "Checkpoint")->required();
  generate->add_option("--input", ga.input, "Image file or directory")->required();
  generate->add_option("--out", ga.out, "Output directory")->required();
  generate->add_option("--size", ga.size, "Output resolution; defaults to the training size");

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Score generated drawings against ground truth");
  evaluate->add_option("--generated", ea.generated, "Generated drawings")->required();
  evaluate->add_option("--ground-truth", ea.ground_truth, "Reference drawings")->required();
  evaluate->add_option("--extractor", ea.extractor, "'builtin' or a TorchScript embedding model")->capture_default_str();
  evaluate->add_option("--out", ea.out, "Report JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*prepare) return cmd_prepare(pa);
    if (*train) {
      if (!ta.resume && !ta.dry_run && ta.out.empty()) throw CLI::RequiredError("--out");
      if (ta.resume && ta.out.empty()) ta.out = fs::path(*ta.resume).parent_path().string();
      return cmd_train(ta);
    }
    if (*generate) return cmd_generate(ga);
    if (*evaluate) return cmd_evaluate(ea);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kAborted;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const MetricError& e) {
    std::cerr << "evaluation error: " << e.what() << "\n";
    return kEvaluation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
