#include "macpf/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace macpf {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("temperature must be positive and finite");
  }
}

void check_values(std::span<const double> values, const char* what) {
  if (values.empty()) {
    throw std::invalid_argument(std::string(what) + ": empty input");
  }
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(what) + ": non-finite entry");
    }
  }
}

}  // namespace

RngStream RngStream::split(std::uint64_t stream_id) const {
  return RngStream(mix64(seed_ ^ mix64(stream_id + kGolden)));
}

std::uint64_t RngStream::next_u64() {
  return mix64(seed_ + kGolden * ++counter_);
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * next_double();
}

double log_sum_exp(std::span<const double> values, double temperature) {
  check_values(values, "log_sum_exp");
  check_temperature(temperature);
  const double m = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += std::exp((v - m) / temperature);
  return m + temperature * std::log(sum);
}

std::vector<double> softmax(std::span<const double> logits,
                            double temperature) {
  check_values(logits, "softmax");
  check_temperature(temperature);
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - m) / temperature);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits,
                                double temperature) {
  check_values(logits, "log_softmax");
  check_temperature(temperature);
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp((v - m) / temperature);
  const double log_norm = std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = (logits[i] - m) / temperature - log_norm;
  }
  return out;
}

int sample_categorical(std::span<const double> dist, RngStream& rng) {
  check_values(dist, "sample_categorical");
  double sum = 0.0;
  for (double p : dist) {
    if (p < -1e-12) {
      throw std::invalid_argument("sample_categorical: negative probability");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("sample_categorical: does not sum to 1");
  }
  const double u = rng.next_double();
  double cum = 0.0;
  int last_positive = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] > 0.0) last_positive = static_cast<int>(i);
    cum += dist[i];
    if (u < cum) return static_cast<int>(i);
  }
  // u landed in the rounding slack past the final cumulative value.
  return last_positive;
}

int argmax(std::span<const double> values) {
  check_values(values, "argmax");
  return static_cast<int>(
      std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace macpf
