#pragma once

#include <stdexcept>
#include <utility>

#include "tally/rng.hpp"
#include "tally/tensor.hpp"

namespace tally {

// Instance-normalisation split of a hidden representation [C,H,W] into a
// semantic factor z (zero mean, unit std per channel over the spatial
// positions) and per-channel nuisance statistics (mu, sigma). sigma is
// stabilised as sqrt(var + eps) so constant channels stay finite; the
// reconstruction sigma*z + mu reproduces the input.
struct Decomposition {
  Tensor z;      // [C,H,W]
  Tensor mu;     // [C]
  Tensor sigma;  // [C], > 0
};

inline constexpr double kInstanceNormEps = 1e-5;

inline Decomposition disentangle(const Tensor& s,
                                 double eps = kInstanceNormEps) {
  if (s.rank() != 3) {
    throw std::invalid_argument("disentangle: want [C,H,W], got " +
                                shape_str(s.shape()));
  }
  if (s.shape()[1] * s.shape()[2] < 2) {
    throw std::invalid_argument(
        "disentangle: need at least 2 spatial positions, got " +
        shape_str(s.shape()));
  }
  Decomposition dec;
  dec.mu = channel_mean(s);
  Tensor centered = shift_channels(s, mul_scalar(dec.mu, -1.0));
  Tensor var = channel_mean(mul(centered, centered));
  dec.sigma = tally::sqrt(add_scalar(var, eps));
  dec.z = scale_channels(centered, recip(dec.sigma));
  return dec;
}

// Style transplant: semantic factor of one example carried into the
// nuisance statistics of another. The caller keeps the semantic donor's
// label.
inline Tensor reassemble(const Decomposition& dec_i, const Tensor& mu_j,
                         const Tensor& sigma_j) {
  if (mu_j.shape() != sigma_j.shape() ||
      mu_j.shape()[0] != dec_i.z.shape()[0]) {
    throw std::invalid_argument("reassemble: channel mismatch, z " +
                                shape_str(dec_i.z.shape()) + " vs stats " +
                                shape_str(mu_j.shape()));
  }
  return shift_channels(scale_channels(dec_i.z, sigma_j), mu_j);
}

// lambda * z_i + (1 - lambda) * r_c. The prototype is a plain constant; no
// gradient flows into it.
inline Tensor enhance_semantic(const Tensor& z_i, const Tensor& r_c,
                               double lambda_c) {
  if (z_i.shape() != r_c.shape()) {
    throw std::invalid_argument("enhance_semantic: shape mismatch " +
                                shape_str(z_i.shape()) + " vs " +
                                shape_str(r_c.shape()));
  }
  if (lambda_c < 0.0 || lambda_c > 1.0) {
    throw std::invalid_argument("enhance_semantic: lambda_c outside [0,1]");
  }
  return add(mul_scalar(z_i, lambda_c), mul_scalar(r_c, 1.0 - lambda_c));
}

// Interpolates instance nuisances with class-agnostic per-domain statistics.
// Both sigma operands are positive, so the interpolated sigma stays positive.
inline std::pair<Tensor, Tensor> enhance_nuisance(const Tensor& mu_j,
                                                  const Tensor& sigma_j,
                                                  const Tensor& u_d,
                                                  const Tensor& v_d,
                                                  double lambda_d) {
  if (mu_j.shape() != u_d.shape() || sigma_j.shape() != v_d.shape() ||
      mu_j.shape() != sigma_j.shape()) {
    throw std::invalid_argument("enhance_nuisance: shape mismatch");
  }
  if (lambda_d < 0.0 || lambda_d > 1.0) {
    throw std::invalid_argument("enhance_nuisance: lambda_d outside [0,1]");
  }
  for (double v : v_d.data()) {
    if (!(v > 0.0)) {
      throw std::invalid_argument("enhance_nuisance: nonpositive v_d entry");
    }
  }
  Tensor mu = add(mul_scalar(mu_j, lambda_d), mul_scalar(u_d, 1.0 - lambda_d));
  Tensor sigma =
      add(mul_scalar(sigma_j, lambda_d), mul_scalar(v_d, 1.0 - lambda_d));
  return {mu, sigma};
}

// Per-example interpolation coefficients, one fresh draw per example per
// step: lambda ~ Beta(alpha, alpha).
struct MixCoefficients {
  double lambda_c = 1.0;
  double lambda_d = 1.0;
  double alpha_c = 0.5;
  double alpha_d = 0.5;
};

inline double sample_beta(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) {
    throw std::invalid_argument("sample_beta: alpha must be positive");
  }
  return rng.beta(alpha, alpha);
}

// Core augmented-representation build from explicit prototype tensors:
// semantic factor of s_i (enhanced toward r_c) dressed in the nuisances of
// s_j (enhanced toward (u_d, v_d)); the result carries y_i. Differentiable
// through both s_i and s_j unless detach_nuisance cuts the mu/sigma path of
// s_j.
inline Tensor augment_pair_with(const Tensor& s_i, const Tensor& s_j,
                                const Tensor& r_c, const Tensor& u_d,
                                const Tensor& v_d,
                                const MixCoefficients& coeffs,
                                bool detach_nuisance = false,
                                double eps = kInstanceNormEps) {
  const Decomposition dec_i = disentangle(s_i, eps);
  const Decomposition dec_j = disentangle(s_j, eps);
  Tensor mu_j = detach_nuisance ? dec_j.mu.detach() : dec_j.mu;
  Tensor sigma_j = detach_nuisance ? dec_j.sigma.detach() : dec_j.sigma;
  Tensor z_prime = enhance_semantic(dec_i.z, r_c, coeffs.lambda_c);
  auto [mu_prime, sigma_prime] =
      enhance_nuisance(mu_j, sigma_j, u_d, v_d, coeffs.lambda_d);
  return shift_channels(scale_channels(z_prime, sigma_prime), mu_prime);
}

}  // namespace tally
