#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "macpf/numerics.hpp"

namespace macpf {

/// Fully-connected feedforward map: ReLU on hidden layers, identity output.
struct MLPSpec {
  std::vector<int> widths;  // [input, hidden..., output], at least 2 entries

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  int layer_count() const { return static_cast<int>(widths.size()) - 1; }
  int param_count() const;
  void validate() const;
};

/// Activations recorded by a forward pass, sufficient for exact backprop.
struct MLPCache {
  std::vector<std::vector<double>> inputs;  // input fed to each layer
  std::vector<std::vector<double>> pre;     // pre-activation of each layer
};

void mlp_forward(const MLPSpec& spec, std::span<const double> params,
                 std::span<const double> input, std::vector<double>& output,
                 MLPCache* cache = nullptr);

/// Reverse-mode gradients of the forward map. `param_grad` is accumulated
/// (+=) so batched losses can share one buffer; `input_grad`, when non-empty,
/// is accumulated too.
void mlp_backward(const MLPSpec& spec, std::span<const double> params,
                  const MLPCache& cache, std::span<const double> upstream,
                  std::span<double> param_grad,
                  std::span<double> input_grad = {});

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and biases.
void mlp_init(const MLPSpec& spec, std::span<double> params, RngStream& rng);

struct AdamState {
  std::vector<double> m;  // first moments
  std::vector<double> v;  // second moments
  std::int64_t step = 0;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  explicit AdamState(std::size_t size, double lr = 3e-4)
      : m(size, 0.0), v(size, 0.0), learning_rate(lr) {}
};

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state);

/// Flat parameter vector with named, non-overlapping slices.
class ParameterArray {
 public:
  struct Slice {
    std::string name;
    int offset = 0;
    int size = 0;
  };

  /// Appends a slice and returns its offset. Names must be unique.
  int add_slice(const std::string& name, int size);

  std::span<double> slice(std::string_view name);
  std::span<const double> slice(std::string_view name) const;
  bool has_slice(std::string_view name) const;
  const std::vector<Slice>& slices() const { return slices_; }

  std::vector<double> values;

 private:
  std::vector<Slice> slices_;
};

/// Versioned checkpoint: text header (metadata + slice table) followed by the
/// flat parameter vector as little-endian 64-bit reals.
void save_checkpoint(
    std::ostream& out, const ParameterArray& params,
    const std::vector<std::pair<std::string, std::string>>& metadata);

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> metadata;
  ParameterArray params;

  /// First value stored under `key`, or empty string.
  std::string meta(std::string_view key) const;
};

/// Throws std::runtime_error on version, header, or shape inconsistencies.
Checkpoint load_checkpoint(std::istream& in);

struct GradCheckReport {
  double worst_rel_error = 0.0;
  int worst_coordinate = -1;
  int checked_coordinates = 0;
  bool pass = false;
};

/// Compares `analytic_grad` against central finite differences of `loss` on
/// `coordinates`. Error per coordinate is |analytic - numeric| normalized by
/// max(1, |analytic|, |numeric|).
GradCheckReport finite_difference_check(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> params, std::span<const double> analytic_grad,
    std::span<const int> coordinates, double step_size, double tolerance);

/// Convenience overload: checks `sample_size` coordinates drawn without
/// replacement from the full parameter vector.
GradCheckReport finite_difference_check(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> params, std::span<const double> analytic_grad,
    int sample_size, double step_size, double tolerance, RngStream& rng);

}  // namespace macpf
