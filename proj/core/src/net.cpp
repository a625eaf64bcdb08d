#include "mergerl/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "mergerl/error.hpp"

namespace mergerl::net {

NetParams::NetParams(const Dims& dims) : dims_(dims) {
  require(dims.input > 0 && dims.output > 0, "net dims must be positive");
  std::size_t in = dims.input;
  auto add = [&](std::size_t out) {
    require(out > 0, "hidden width must be positive");
    Layer layer;
    layer.in = in;
    layer.out = out;
    layer.weights.assign(in * out, 0.0);
    layer.bias.assign(out, 0.0);
    layers_.push_back(std::move(layer));
    in = out;
  };
  for (std::size_t h : dims.hidden) add(h);
  add(dims.output);
}

NetParams NetParams::zeros(const Dims& dims) { return NetParams(dims); }

NetParams NetParams::random(const Dims& dims, Rng& rng) {
  NetParams p(dims);
  for (Layer& layer : p.layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
    for (double& w : layer.weights) w = rng.uniform(-bound, bound);
    for (double& b : layer.bias) b = rng.uniform(-bound, bound);
  }
  return p;
}

std::size_t NetParams::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers_) n += l.weights.size() + l.bias.size();
  return n;
}

std::vector<double> NetParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const Layer& l : layers_) {
    flat.insert(flat.end(), l.weights.begin(), l.weights.end());
    flat.insert(flat.end(), l.bias.begin(), l.bias.end());
  }
  return flat;
}

NetParams NetParams::unflatten(const Dims& dims, std::span<const double> flat) {
  NetParams p(dims);
  require(flat.size() == p.parameter_count(),
          "flat parameter vector length does not match dims");
  std::size_t k = 0;
  for (Layer& l : p.layers_) {
    for (double& w : l.weights) w = flat[k++];
    for (double& b : l.bias) b = flat[k++];
  }
  return p;
}

bool NetParams::all_finite() const {
  for (const Layer& l : layers_) {
    for (double w : l.weights)
      if (!std::isfinite(w)) return false;
    for (double b : l.bias)
      if (!std::isfinite(b)) return false;
  }
  return true;
}

GradVector& GradVector::operator+=(const GradVector& other) {
  require(other.size() == size(), "gradient length mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) values[i] += other.values[i];
  return *this;
}

GradVector& GradVector::operator*=(double s) {
  for (double& v : values) v *= s;
  return *this;
}

bool GradVector::all_finite() const {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

namespace {

void affine(const Layer& layer, std::span<const double> x,
            std::vector<double>& z) {
  z.resize(layer.out);
  const double* w = layer.weights.data();
  for (std::size_t o = 0; o < layer.out; ++o) {
    double acc = layer.bias[o];
    const double* row = w + o * layer.in;
    for (std::size_t i = 0; i < layer.in; ++i) acc += row[i] * x[i];
    z[o] = acc;
  }
}

}  // namespace

Forward forward(const NetParams& params, std::span<const double> input) {
  require(input.size() == params.dims().input,
          "net input length " + std::to_string(input.size()) +
              " does not match dims.input " +
              std::to_string(params.dims().input));
  Forward f;
  ForwardTape& tape = f.tape;
  const auto& layers = params.layers();
  tape.pre_activations.resize(layers.size());
  tape.activations.resize(layers.size());
  tape.activations[0].assign(input.begin(), input.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    affine(layers[l], tape.activations[l], tape.pre_activations[l]);
    if (l + 1 < layers.size()) {
      auto& a = tape.activations[l + 1];
      a.resize(tape.pre_activations[l].size());
      for (std::size_t i = 0; i < a.size(); ++i)
        a[i] = std::tanh(tape.pre_activations[l][i]);
    }
  }
  tape.logits = tape.pre_activations.back();
  tape.log_probs = log_softmax(tape.logits);
  f.probs.resize(tape.log_probs.size());
  for (std::size_t i = 0; i < f.probs.size(); ++i)
    f.probs[i] = std::exp(tape.log_probs[i]);
  return f;
}

std::vector<double> policy(const NetParams& params,
                           std::span<const double> input) {
  return forward(params, input).probs;
}

namespace {

// Backpropagates an upstream gradient on the logits into out (flattened).
void backprop(const NetParams& params, const ForwardTape& tape,
              std::vector<double> delta, double scale, std::span<double> out) {
  const auto& layers = params.layers();
  require(tape.layer_count() == layers.size(), "tape does not match network");
  require(out.size() == params.parameter_count(),
          "gradient buffer length mismatch");
  // Offsets of each layer's block in the flat vector.
  std::vector<std::size_t> offset(layers.size());
  std::size_t k = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    offset[l] = k;
    k += layers[l].weights.size() + layers[l].bias.size();
  }
  std::vector<double> prev;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Layer& layer = layers[l];
    const auto& a = tape.activations[l];
    double* gw = out.data() + offset[l];
    double* gb = gw + layer.weights.size();
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double d = scale * delta[o];
      if (d == 0.0) continue;
      double* row = gw + o * layer.in;
      for (std::size_t i = 0; i < layer.in; ++i) row[i] += d * a[i];
      gb[o] += d;
    }
    if (l == 0) break;
    prev.assign(layer.in, 0.0);
    for (std::size_t o = 0; o < layer.out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* row = layer.weights.data() + o * layer.in;
      for (std::size_t i = 0; i < layer.in; ++i) prev[i] += row[i] * d;
    }
    for (std::size_t i = 0; i < layer.in; ++i) prev[i] *= 1.0 - a[i] * a[i];
    delta.swap(prev);
  }
}

}  // namespace

void accumulate_logprob_grad(const NetParams& params, const ForwardTape& tape,
                             std::size_t action, double scale,
                             std::span<double> out) {
  const std::size_t n = tape.log_probs.size();
  require(action < n && n == params.dims().output,
          "action index " + std::to_string(action) + " out of range");
  // d log pi(a) / d logits = onehot(a) - pi
  std::vector<double> delta(n);
  for (std::size_t i = 0; i < n; ++i) delta[i] = -std::exp(tape.log_probs[i]);
  delta[action] += 1.0;
  backprop(params, tape, std::move(delta), scale, out);
}

void accumulate_soft_target_grad(const NetParams& params,
                                 const ForwardTape& tape,
                                 std::span<const double> target, double scale,
                                 std::span<double> out) {
  const std::size_t n = tape.log_probs.size();
  require(target.size() == n, "soft target length mismatch");
  double mass = 0.0;
  for (double t : target) mass += t;
  std::vector<double> delta(n);
  for (std::size_t i = 0; i < n; ++i)
    delta[i] = target[i] - mass * std::exp(tape.log_probs[i]);
  backprop(params, tape, std::move(delta), scale, out);
}

GradVector logprob_grad(const NetParams& params, const ForwardTape& tape,
                        std::size_t action) {
  GradVector g(params.parameter_count());
  accumulate_logprob_grad(params, tape, action, 1.0, g.values);
  return g;
}

NetParams sgd_step(const NetParams& params, const GradVector& grad,
                   double learning_rate, Direction direction) {
  require(grad.size() == params.parameter_count(),
          "gradient length does not match parameter count");
  require(learning_rate >= 0.0 && std::isfinite(learning_rate),
          "learning rate must be finite and non-negative");
  require(grad.all_finite(), "gradient has non-finite entries");
  const double sign = direction == Direction::Ascent ? 1.0 : -1.0;
  NetParams next = params;
  std::size_t k = 0;
  for (Layer& l : next.layers()) {
    for (double& w : l.weights) w += sign * learning_rate * grad[k++];
    for (double& b : l.bias) b += sign * learning_rate * grad[k++];
  }
  return next;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'R', 'G', 'L', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw ContractError("checkpoint truncated");
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) |
         (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
}

void put_f32(std::ostream& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

double get_f32(std::istream& in) {
  return static_cast<double>(std::bit_cast<float>(get_u32(in)));
}

}  // namespace

void write_checkpoint(std::ostream& out, const std::vector<NamedParams>& sets) {
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(sets.size()));
  for (const NamedParams& set : sets) {
    const Dims& d = set.params.dims();
    put_u32(out, static_cast<std::uint32_t>(set.name.size()));
    out.write(set.name.data(), static_cast<std::streamsize>(set.name.size()));
    put_u32(out, static_cast<std::uint32_t>(d.input));
    put_u32(out, static_cast<std::uint32_t>(d.hidden.size()));
    for (std::size_t h : d.hidden) put_u32(out, static_cast<std::uint32_t>(h));
    put_u32(out, static_cast<std::uint32_t>(d.output));
    const auto flat = set.params.flatten();
    put_u32(out, static_cast<std::uint32_t>(flat.size()));
    for (double v : flat) put_f32(out, v);
  }
}

std::vector<NamedParams> read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw ContractError("not a checkpoint file (bad magic)");
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion)
    throw ContractError("unsupported checkpoint version " +
                        std::to_string(version));
  const std::uint32_t count = get_u32(in);
  std::vector<NamedParams> sets;
  for (std::uint32_t s = 0; s < count; ++s) {
    NamedParams set;
    const std::uint32_t len = get_u32(in);
    set.name.resize(len);
    if (!in.read(set.name.data(), len))
      throw ContractError("checkpoint truncated");
    Dims d;
    d.input = get_u32(in);
    d.hidden.resize(get_u32(in));
    for (auto& h : d.hidden) h = get_u32(in);
    d.output = get_u32(in);
    const std::uint32_t n = get_u32(in);
    std::vector<double> flat(n);
    for (auto& v : flat) v = get_f32(in);
    set.params = NetParams::unflatten(d, flat);
    sets.push_back(std::move(set));
  }
  return sets;
}

void save_checkpoint(const std::string& path,
                     const std::vector<NamedParams>& sets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot open " + path + " for writing");
  write_checkpoint(out, sets);
}

std::vector<NamedParams> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace mergerl::net
