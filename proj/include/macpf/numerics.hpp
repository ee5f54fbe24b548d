#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace macpf {

/// Counter-based deterministic random stream. Identical seeds produce
/// identical draw sequences on every platform; split() derives an
/// independent stream so adding a consumer never perturbs the others.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed) {}

  /// Derive an independent stream keyed by `stream_id`.
  RngStream split(std::uint64_t stream_id) const;

  std::uint64_t next_u64();

  /// Uniform draw in [0, 1) with 53 bits of resolution.
  double next_double();

  double uniform(double lo, double hi);

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// alpha * log(sum_a exp(values[a] / alpha)), stabilized by max subtraction.
double log_sum_exp(std::span<const double> values, double temperature);

/// Boltzmann distribution of `logits` at `temperature`:
/// out[a] = exp((logits[a] - log_sum_exp(logits, t)) / t). Sums to 1.
std::vector<double> softmax(std::span<const double> logits, double temperature);

/// Elementwise log of softmax(logits, temperature), computed without
/// underflowing small probabilities to exact zero.
std::vector<double> log_softmax(std::span<const double> logits,
                                double temperature);

/// Draw an index distributed according to `dist` (must sum to 1 within 1e-9).
int sample_categorical(std::span<const double> dist, RngStream& rng);

/// Index of the largest entry; ties break toward the lowest index.
int argmax(std::span<const double> values);

}  // namespace macpf
