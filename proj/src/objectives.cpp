#include "p2ld/objectives.hpp"

#include <sstream>

#include <json.hpp>

namespace p2ld {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream msg;
    msg << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(msg.str());
  }
}

// f1 against a constant-filled target of the score map's shape.
torch::Tensor mse_to(const torch::Tensor& x, double fill) {
  return torch::mse_loss(x, torch::full_like(x, fill));
}

torch::Tensor relativistic(const torch::Tensor& pushed_up, const torch::Tensor& pushed_down) {
  return mse_to(pushed_up - pushed_down.mean(), 1.0) + mse_to(pushed_down - pushed_up.mean(), 0.0);
}

}  // namespace

void LossWeights::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0)
    throw std::invalid_argument("loss weights must be non-negative");
}

std::ostream& operator<<(std::ostream& os, const LossReport& r) {
  return os << "{d_loss=" << r.d_loss << " g_adv=" << r.g_adv << " g_pix=" << r.g_pix << " g_total=" << r.g_total << "}";
}

std::string to_json_line(const LossReport& r, std::int64_t step) {
  nlohmann::json j = {{"step", step}, {"d_loss", r.d_loss}, {"g_adv", r.g_adv}, {"g_pix", r.g_pix}, {"g_total", r.g_total}};
  return j.dump();
}

torch::Tensor ra_d_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  require_same_shape(d_real, d_fake, "ra_d_loss");
  return relativistic(d_real, d_fake);
}

torch::Tensor ra_g_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  require_same_shape(d_real, d_fake, "ra_g_loss");
  return relativistic(d_fake, d_real);
}

torch::Tensor pixel_l1(const torch::Tensor& generated, const torch::Tensor& ground_truth) {
  require_same_shape(generated, ground_truth, "pixel_l1");
  return torch::l1_loss(generated, ground_truth);
}

LossReport Losses::report() const {
  return {d_loss.item<double>(), g_adv.item<double>(), g_pix.item<double>(), g_total.item<double>()};
}

Losses total_losses(const torch::Tensor& d_real, const torch::Tensor& d_fake_for_d, const torch::Tensor& d_fake_for_g,
                    const torch::Tensor& generated, const torch::Tensor& ground_truth, const LossWeights& w) {
  w.validate();
  Losses out;
  out.d_loss = w.lambda1 * ra_d_loss(d_real, d_fake_for_d);
  out.g_adv = ra_g_loss(d_real, d_fake_for_g);
  out.g_pix = pixel_l1(generated, ground_truth);
  out.g_total = w.lambda2 * out.g_adv + w.lambda3 * out.g_pix;
  return out;
}

}  // namespace p2ld
