#include "mdlab/hazard.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace mdlab {

RatioHazard::RatioHazard(double c, double p_cap) : c_(c), p_cap_(p_cap) {
  if (c <= 0.0 || p_cap <= 0.0 || p_cap >= 1.0)
    throw std::invalid_argument("RatioHazard: need c > 0 and p_cap in (0,1)");
}

double RatioHazard::p(double r, double W) const { return std::min(p_cap_, c_ * r / W); }

std::string RatioHazard::params() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "c=%.17g;p_cap=%.17g", c_, p_cap_);
  return buf;
}

double ZeroHazard::p(double, double) const { return 0.0; }

double q_value(const HazardFamily& family, double r, double W) {
  if (W < 1.0 || r < 1.0) throw std::invalid_argument("q_value: need W >= 1 and r >= 1");
  const double p = family.p(r, W);
  if (p >= 1.0) return -std::numeric_limits<double>::infinity();
  return std::log1p(-p);
}

double Q_default(int L, int S, const HazardFamily& family) {
  if (L < 1 || S < 1 || L % S != 0) throw std::invalid_argument("Q_default: S must divide L");
  const double r = static_cast<double>(L) / S;
  double q = 0.0;
  for (int t = 1; t <= S; ++t) q += q_value(family, r, t * r);
  return q;
}

double Q_semi_ar(int L, int S, int b, const HazardFamily& family) {
  if (b < 1 || L % b != 0 || S % b != 0)
    throw std::invalid_argument("Q_semi_ar: b must divide both L and S");
  if (L % S != 0) throw std::invalid_argument("Q_semi_ar: S must divide L");
  const double r = static_cast<double>(L) / S;
  const int steps_per_block = S / b;
  double q = 0.0;
  for (int t = 1; t <= steps_per_block; ++t) q += q_value(family, r, t * r);
  return b * q;
}

double Q_conv(int L, int S, int K, const HazardFamily& family, ConvHazardMode mode) {
  if (K < 1 || K > L) throw std::invalid_argument("Q_conv: need 1 <= K <= L");
  if (L % S != 0) throw std::invalid_argument("Q_conv: S must divide L");
  const double r = static_cast<double>(L) / S;
  const int ramp_steps = static_cast<int>(static_cast<double>(K) / r);
  if (ramp_steps * static_cast<int>(r) != K) throw std::invalid_argument("Q_conv: r must divide K");
  double ramp = 0.0;
  for (int t = 1; t <= ramp_steps; ++t) ramp += q_value(family, r, t * r);
  const double steady_steps = mode == ConvHazardMode::per_step
                                  ? static_cast<double>(L - K) / r
                                  : static_cast<double>(L - K);
  return steady_steps * q_value(family, r, K) + ramp;
}

OrderingReport verify_ordering(int L, int S, int b, const HazardFamily& family) {
  OrderingReport rep;
  rep.q_default = Q_default(L, S, family);
  rep.q_semi_ar = Q_semi_ar(L, S, b, family);
  rep.q_conv = Q_conv(L, S, L / b, family, ConvHazardMode::per_step);
  rep.sa_le_conv = rep.q_semi_ar <= rep.q_conv;
  rep.conv_le_default = rep.q_conv <= rep.q_default;
  rep.ordering_ok = rep.sa_le_conv && rep.conv_le_default;
  return rep;
}

}  // namespace mdlab
