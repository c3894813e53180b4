#pragma once

// Gradient checks shared by the unit suite and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "p2ld/objectives.hpp"
#include "p2ld/trainer.hpp"
#include "support/oracles.hpp"

namespace p2ld::testing {

inline DiscriminatorConfig miniature_discriminator() {
  DiscriminatorConfig d;
  d.widths = {4, 8, 12, 16};
  return d;
}

struct GradcheckResult {
  int samples = 0;
  double max_relative_error = 0.0;
};

/// Miniature generator (S=32) in float64: compares autograd against central
/// differences on `count` parameter elements drawn uniformly over all parameters.
/// Loss is λ2·ra_g_loss + λ3·pixel_l1 against a fixed miniature discriminator.
inline GradcheckResult generator_gradcheck(int count, std::uint32_t seed) {
  torch::manual_seed(seed);
  Generator g(GeneratorConfig::miniature());
  Discriminator d(miniature_discriminator());
  g->to(torch::kFloat64);
  d->to(torch::kFloat64);
  const auto photo = torch::rand({1, 3, 32, 32}, torch::kFloat64) * 2 - 1;
  const auto target = torch::rand({1, 3, 32, 32}, torch::kFloat64) * 2 - 1;
  const LossWeights w;

  auto loss_tensor = [&] {
    const auto fake = g->forward(photo);
    const auto real_scores = d->forward(photo, target);
    return w.lambda2 * ra_g_loss(real_scores, d->forward(photo, fake)) + w.lambda3 * pixel_l1(fake, target);
  };

  g->zero_grad();
  loss_tensor().backward();

  std::vector<torch::Tensor> params = g->parameters();
  std::vector<int64_t> offsets;
  int64_t total = 0;
  for (const auto& p : params) {
    offsets.push_back(total);
    total += p.numel();
  }

  std::mt19937_64 rng(seed);
  GradcheckResult out;
  auto scalar_loss = [&] {
    torch::NoGradGuard guard;
    return loss_tensor().item<double>();
  };
  for (int k = 0; k < count; ++k) {
    const auto flat = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(total));
    const auto idx = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    const auto local = flat - offsets[idx];
    const double analytic = params[idx].grad().view(-1)[local].item<double>();
    const double numeric = central_difference(params[idx], local, 1e-6, scalar_loss);
    // Absolute floor so exactly-zero gradients (e.g. dead ReLUs) compare cleanly.
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    out.max_relative_error = std::max(out.max_relative_error, rel);
    ++out.samples;
  }
  return out;
}

struct CompletenessResult {
  int generator_params = 0;
  int discriminator_params = 0;
  std::vector<std::string> generator_missing;
  std::vector<std::string> discriminator_missing;
};

/// One backward of each objective on random data; lists parameters whose gradient
/// is undefined or non-finite.
inline CompletenessResult gradient_completeness() {
  RunConfig cfg;
  cfg.generator = GeneratorConfig::miniature();
  cfg.discriminator = miniature_discriminator();
  cfg.train.image_size = 32;
  cfg.train.seed = 5;
  TrainState st(cfg);
  const auto photo = torch::rand({1, 3, 32, 32}) * 2 - 1;
  const auto target = torch::rand({1, 3, 32, 32}) * 2 - 1;
  const auto& w = cfg.train.weights;

  CompletenessResult r;
  const auto fake = st.generator->forward(photo);
  const auto d_real = st.discriminator->forward(photo, target);
  const auto d_fake = st.discriminator->forward(photo, fake.detach());
  (w.lambda1 * ra_d_loss(d_real, d_fake)).backward();
  for (const auto& p : st.discriminator->named_parameters()) {
    ++r.discriminator_params;
    if (!p.value().grad().defined() || !torch::isfinite(p.value().grad()).all().item<bool>())
      r.discriminator_missing.push_back(p.key());
  }

  st.discriminator->zero_grad();
  const auto real_nograd = st.discriminator->forward(photo, target).detach();
  const auto g_total = w.lambda2 * ra_g_loss(real_nograd, st.discriminator->forward(photo, fake)) +
                       w.lambda3 * pixel_l1(fake, target);
  g_total.backward();
  for (const auto& p : st.generator->named_parameters()) {
    ++r.generator_params;
    if (!p.value().grad().defined() || !torch::isfinite(p.value().grad()).all().item<bool>())
      r.generator_missing.push_back(p.key());
  }
  return r;
}

/// Counts decoder stages through which the stem (stage-1) parameters receive a
/// nonzero gradient. Each stage's copy of F1 is a separate autograd node, so the
/// vector–Jacobian product through one copy isolates that single path.
inline int stem_gradient_paths() {
  torch::manual_seed(11);
  auto cfg = GeneratorConfig::miniature();
  cfg.input_size = 64;  // keeps the deepest decoder stage at 2×2 so instance norm is not degenerate
  Generator g(cfg);
  const auto photo = torch::rand({1, 3, 64, 64}) * 2 - 1;
  const auto target = torch::rand({1, 3, 64, 64}) * 2 - 1;
  GeneratorTrace trace;
  const auto loss = pixel_l1(g->forward(photo, full_skip_mask(), &trace), target);

  const auto stem_weight = g->encoder->stem[0]->as<nn::Conv2dImpl>()->weight;
  int paths = 0;
  for (int stage = 0; stage < kStages; ++stage) {
    const auto contributors = g->contributors(stage);
    const auto it = std::find(contributors.begin(), contributors.end(), 0);
    if (it == contributors.end()) continue;
    const auto tap = trace.skip_inputs[stage][static_cast<std::size_t>(it - contributors.begin())];
    const auto tap_grad = torch::autograd::grad({loss}, {tap}, {}, /*retain_graph=*/true)[0];
    const auto stem_grad = torch::autograd::grad({tap}, {stem_weight}, {tap_grad}, /*retain_graph=*/true)[0];
    if (stem_grad.abs().sum().item<double>() > 0.0) ++paths;
  }
  return paths;
}

/// True when a discriminator update leaves any generator gradient defined.
inline bool discriminator_step_touches_generator() {
  RunConfig cfg;
  cfg.generator = GeneratorConfig::miniature();
  cfg.discriminator = miniature_discriminator();
  cfg.train.image_size = 32;
  TrainState st(cfg);
  const auto photo = torch::rand({1, 3, 32, 32}) * 2 - 1;
  const auto target = torch::rand({1, 3, 32, 32}) * 2 - 1;
  const auto fake = st.generator->forward(photo);
  if (!fake.requires_grad()) return true;  // the check would be vacuous
  st.generator->zero_grad(true);
  discriminator_update(st, photo, target, fake);
  for (const auto& p : st.generator->parameters())
    if (p.grad().defined()) return true;
  return false;
}

}  // namespace p2ld::testing
