#include "macpf/neural.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace macpf {

int MLPSpec::param_count() const {
  int total = 0;
  for (int l = 0; l + 1 < static_cast<int>(widths.size()); ++l) {
    total += (widths[l] + 1) * widths[l + 1];
  }
  return total;
}

void MLPSpec::validate() const {
  if (widths.size() < 2) {
    throw std::invalid_argument("MLPSpec: need at least input and output");
  }
  for (int w : widths) {
    if (w <= 0) throw std::invalid_argument("MLPSpec: widths must be positive");
  }
}

void mlp_forward(const MLPSpec& spec, std::span<const double> params,
                 std::span<const double> input, std::vector<double>& output,
                 MLPCache* cache) {
  spec.validate();
  if (static_cast<int>(input.size()) != spec.input_dim()) {
    throw std::invalid_argument("mlp_forward: input width mismatch");
  }
  if (static_cast<int>(params.size()) != spec.param_count()) {
    throw std::invalid_argument("mlp_forward: parameter count mismatch");
  }
  const int layers = spec.layer_count();
  if (cache) {
    cache->inputs.assign(layers, {});
    cache->pre.assign(layers, {});
  }
  std::vector<double> h(input.begin(), input.end());
  std::size_t p = 0;
  for (int l = 0; l < layers; ++l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    if (cache) cache->inputs[l] = h;
    std::vector<double> pre(out);
    for (int o = 0; o < out; ++o) {
      double acc = 0.0;
      const double* w = params.data() + p + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) acc += w[i] * h[i];
      pre[o] = acc;
    }
    p += static_cast<std::size_t>(out) * in;
    for (int o = 0; o < out; ++o) pre[o] += params[p + o];
    p += out;
    if (cache) cache->pre[l] = pre;
    if (l + 1 < layers) {
      for (double& x : pre) x = x > 0.0 ? x : 0.0;  // ReLU
    }
    h = std::move(pre);
  }
  output = std::move(h);
}

void mlp_backward(const MLPSpec& spec, std::span<const double> params,
                  const MLPCache& cache, std::span<const double> upstream,
                  std::span<double> param_grad, std::span<double> input_grad) {
  const int layers = spec.layer_count();
  if (static_cast<int>(cache.inputs.size()) != layers ||
      static_cast<int>(cache.pre.size()) != layers) {
    throw std::invalid_argument("mlp_backward: cache mismatch");
  }
  if (static_cast<int>(upstream.size()) != spec.output_dim()) {
    throw std::invalid_argument("mlp_backward: upstream width mismatch");
  }
  if (param_grad.size() != params.size() ||
      static_cast<int>(params.size()) != spec.param_count()) {
    throw std::invalid_argument("mlp_backward: gradient buffer mismatch");
  }

  // Offsets of each layer's weight block.
  std::vector<std::size_t> offsets(layers);
  std::size_t p = 0;
  for (int l = 0; l < layers; ++l) {
    offsets[l] = p;
    p += static_cast<std::size_t>(spec.widths[l] + 1) * spec.widths[l + 1];
  }

  std::vector<double> delta(upstream.begin(), upstream.end());
  for (int l = layers - 1; l >= 0; --l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    const std::size_t w_off = offsets[l];
    const std::size_t b_off = w_off + static_cast<std::size_t>(out) * in;
    const std::vector<double>& x = cache.inputs[l];
    for (int o = 0; o < out; ++o) {
      double* wg = param_grad.data() + w_off + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) wg[i] += delta[o] * x[i];
      param_grad[b_off + o] += delta[o];
    }
    std::vector<double> prev(in, 0.0);
    for (int o = 0; o < out; ++o) {
      const double* w = params.data() + w_off + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) prev[i] += w[i] * delta[o];
    }
    if (l > 0) {
      const std::vector<double>& pre = cache.pre[l - 1];
      for (int i = 0; i < in; ++i) {
        prev[i] = pre[i] > 0.0 ? prev[i] : 0.0;  // ReLU mask
      }
    }
    delta = std::move(prev);
  }
  if (!input_grad.empty()) {
    if (input_grad.size() != delta.size()) {
      throw std::invalid_argument("mlp_backward: input gradient size mismatch");
    }
    for (std::size_t i = 0; i < delta.size(); ++i) input_grad[i] += delta[i];
  }
}

void mlp_init(const MLPSpec& spec, std::span<double> params, RngStream& rng) {
  spec.validate();
  if (static_cast<int>(params.size()) != spec.param_count()) {
    throw std::invalid_argument("mlp_init: parameter count mismatch");
  }
  std::size_t p = 0;
  for (int l = 0; l + 1 < static_cast<int>(spec.widths.size()); ++l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (int k = 0; k < (in + 1) * out; ++k) {
      params[p++] = rng.uniform(-bound, bound);
    }
  }
}

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: size mismatch");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

int ParameterArray::add_slice(const std::string& name, int size) {
  if (size <= 0) throw std::invalid_argument("add_slice: size must be positive");
  if (has_slice(name)) {
    throw std::invalid_argument("add_slice: duplicate slice " + name);
  }
  const int offset = static_cast<int>(values.size());
  slices_.push_back({name, offset, size});
  values.resize(values.size() + static_cast<std::size_t>(size), 0.0);
  return offset;
}

std::span<double> ParameterArray::slice(std::string_view name) {
  for (const Slice& s : slices_) {
    if (s.name == name) return {values.data() + s.offset, static_cast<std::size_t>(s.size)};
  }
  throw std::out_of_range("ParameterArray: no slice named " + std::string(name));
}

std::span<const double> ParameterArray::slice(std::string_view name) const {
  for (const Slice& s : slices_) {
    if (s.name == name) return {values.data() + s.offset, static_cast<std::size_t>(s.size)};
  }
  throw std::out_of_range("ParameterArray: no slice named " + std::string(name));
}

bool ParameterArray::has_slice(std::string_view name) const {
  for (const Slice& s : slices_) {
    if (s.name == name) return true;
  }
  return false;
}

namespace {

constexpr const char* kCheckpointMagic = "macpf-checkpoint v1";

void write_le_doubles(std::ostream& out, std::span<const double> values) {
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    char buf[8];
    std::memcpy(buf, &bits, 8);
    out.write(buf, 8);
  }
}

void read_le_doubles(std::istream& in, std::span<double> values) {
  for (double& v : values) {
    char buf[8];
    in.read(buf, 8);
    if (!in) throw std::runtime_error("checkpoint: truncated data section");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    std::memcpy(&v, &bits, sizeof(v));
  }
}

}  // namespace

void save_checkpoint(
    std::ostream& out, const ParameterArray& params,
    const std::vector<std::pair<std::string, std::string>>& metadata) {
  out << kCheckpointMagic << "\n";
  for (const auto& [key, value] : metadata) {
    out << "meta " << key << " " << value << "\n";
  }
  out << "slices " << params.slices().size() << "\n";
  for (const auto& s : params.slices()) {
    out << s.name << " " << s.size << "\n";
  }
  out << "data " << params.values.size() << "\n";
  write_le_doubles(out, params.values);
}

std::string Checkpoint::meta(std::string_view key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  return {};
}

Checkpoint load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw std::runtime_error("checkpoint: bad magic or unsupported version");
  }
  Checkpoint ckpt;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string key, value;
      ls >> key;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ckpt.metadata.emplace_back(key, value);
    } else if (tag == "slices") {
      std::size_t count = 0;
      ls >> count;
      for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) {
          throw std::runtime_error("checkpoint: truncated slice table");
        }
        std::istringstream ss(line);
        std::string name;
        int size = 0;
        ss >> name >> size;
        if (name.empty() || size <= 0) {
          throw std::runtime_error("checkpoint: malformed slice entry");
        }
        ckpt.params.add_slice(name, size);
      }
    } else if (tag == "data") {
      std::size_t count = 0;
      ls >> count;
      if (count != ckpt.params.values.size()) {
        throw std::runtime_error("checkpoint: data count does not match slices");
      }
      read_le_doubles(in, ckpt.params.values);
      return ckpt;
    } else {
      throw std::runtime_error("checkpoint: unknown header line: " + line);
    }
  }
  throw std::runtime_error("checkpoint: missing data section");
}

GradCheckReport finite_difference_check(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> params, std::span<const double> analytic_grad,
    std::span<const int> coordinates, double step_size, double tolerance) {
  std::vector<double> work(params.begin(), params.end());
  GradCheckReport report;
  report.checked_coordinates = static_cast<int>(coordinates.size());
  for (int c : coordinates) {
    if (c < 0 || c >= static_cast<int>(work.size())) {
      throw std::invalid_argument("finite_difference_check: coordinate out of range");
    }
    const double saved = work[c];
    work[c] = saved + step_size;
    const double up = loss(work);
    work[c] = saved - step_size;
    const double down = loss(work);
    work[c] = saved;
    const double numeric = (up - down) / (2.0 * step_size);
    const double analytic = analytic_grad[c];
    const double denom =
        std::max({1.0, std::abs(analytic), std::abs(numeric)});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > report.worst_rel_error) {
      report.worst_rel_error = rel;
      report.worst_coordinate = c;
    }
  }
  report.pass = report.worst_rel_error <= tolerance;
  return report;
}

GradCheckReport finite_difference_check(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> params, std::span<const double> analytic_grad,
    int sample_size, double step_size, double tolerance, RngStream& rng) {
  std::vector<int> all(params.size());
  std::iota(all.begin(), all.end(), 0);
  // Partial Fisher-Yates for a without-replacement sample.
  const int n = std::min<int>(sample_size, static_cast<int>(all.size()));
  for (int i = 0; i < n; ++i) {
    const int j = i + static_cast<int>(rng.next_u64() % (all.size() - i));
    std::swap(all[i], all[j]);
  }
  all.resize(n);
  return finite_difference_check(loss, params, analytic_grad, all, step_size,
                                 tolerance);
}

}  // namespace macpf
