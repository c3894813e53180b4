#pragma once

#include <cstdint>
#include <ostream>
#include <string>

#include <torch/torch.h>

namespace p2ld {

struct LossWeights {
  double lambda1 = 1.0;    ///< discriminator adversarial term
  double lambda2 = 0.5;    ///< generator adversarial term
  double lambda3 = 100.0;  ///< generator L1 pixel term

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct LossReport {
  double d_loss = 0.0;
  double g_adv = 0.0;
  double g_pix = 0.0;
  double g_total = 0.0;

  bool operator==(const LossReport&) const = default;
};

std::ostream& operator<<(std::ostream& os, const LossReport& r);

/// One JSON line {step, d_loss, g_adv, g_pix, g_total} without trailing newline.
std::string to_json_line(const LossReport& r, std::int64_t step);

/// Relativistic-average least-squares critic loss:
///   mse(real − mean(fake), 1) + mse(fake − mean(real), 0).
torch::Tensor ra_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);

/// Generator side of the pair, real and fake roles swapped:
///   mse(fake − mean(real), 1) + mse(real − mean(fake), 0).
torch::Tensor ra_g_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);

/// Mean absolute difference over all elements.
torch::Tensor pixel_l1(const torch::Tensor& generated, const torch::Tensor& ground_truth);

/// Differentiable loss terms plus their scalar report.
struct Losses {
  torch::Tensor d_loss;   ///< λ1 · ra_d_loss(d_real, d_fake_for_d)
  torch::Tensor g_adv;    ///< ra_g_loss(d_real, d_fake_for_g)
  torch::Tensor g_pix;
  torch::Tensor g_total;  ///< λ2 · g_adv + λ3 · g_pix
  LossReport report() const;
};

Losses total_losses(const torch::Tensor& d_real, const torch::Tensor& d_fake_for_d, const torch::Tensor& d_fake_for_g,
                    const torch::Tensor& generated, const torch::Tensor& ground_truth, const LossWeights& w);

}  // namespace p2ld
