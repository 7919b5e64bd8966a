#pragma once

#include <memory>
#include <string>

namespace mdlab {

// Per-step corruption hazard p_r(W): probability that decoding at a step with
// sample rate r and active mask pool W structurally harms the final text.
// Families must be nonincreasing in W at fixed r.
class HazardFamily {
 public:
  virtual ~HazardFamily() = default;
  virtual double p(double r, double W) const = 0;
  virtual std::string name() const = 0;
  virtual std::string params() const = 0;
};

// p = min(p_cap, c * r / W).
class RatioHazard : public HazardFamily {
 public:
  RatioHazard(double c, double p_cap);
  double p(double r, double W) const override;
  std::string name() const override { return "ratio"; }
  std::string params() const override;

 private:
  double c_, p_cap_;
};

// p identically zero; the no-risk limit used by the trivial cases.
class ZeroHazard : public HazardFamily {
 public:
  double p(double r, double W) const override;
  std::string name() const override { return "zero"; }
  std::string params() const override { return ""; }
};

// q = log(1 - p); -inf when p >= 1.
double q_value(const HazardFamily& family, double r, double W);

// Q_0 = sum over t=1..S of q_r(t*r), W_t = t*r <= L. Requires S | L.
double Q_default(int L, int S, const HazardFamily& family);

// Q_sa = b * sum over t=1..S_b of q_r(t*r), W_t = t*r <= L_b.
double Q_semi_ar(int L, int S, int b, const HazardFamily& family);

enum class ConvHazardMode {
  per_step,   // steady term ((L-K)/r) * q_r(K); unit-consistent, default
  per_token,  // steady term (L-K) * q_r(K): one factor per position
};

// Q_c = steady-state term at W=K plus the shared ramp sum over t=1..K/r.
double Q_conv(int L, int S, int K, const HazardFamily& family,
              ConvHazardMode mode = ConvHazardMode::per_step);

struct OrderingReport {
  double q_default = 0.0;
  double q_semi_ar = 0.0;
  double q_conv = 0.0;
  bool sa_le_conv = false;
  bool conv_le_default = false;
  bool ordering_ok = false;
};

// Computes all three at matched narrowing (K = L/b, per-step mode) and checks
// Q_sa <= Q_c <= Q_0.
OrderingReport verify_ordering(int L, int S, int b, const HazardFamily& family);

}  // namespace mdlab
