#pragma once

// Tiny fully connected softmax policy networks with exact manual backprop.
//
// Parameter flattening order (stable, used by GradVector and checkpoints):
// layer by layer from input to output; within a layer the weight matrix comes
// first in row-major order (rows = output units, columns = input units),
// followed by the bias vector.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mergerl/rng.hpp"

namespace mergerl::net {

struct Dims {
  std::size_t input = 0;
  std::vector<std::size_t> hidden{32, 32, 32};
  std::size_t output = 0;

  friend bool operator==(const Dims&, const Dims&) = default;
};

struct Layer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weights;  // out x in, row-major
  std::vector<double> bias;     // out

  friend bool operator==(const Layer&, const Layer&) = default;
};

class NetParams {
 public:
  NetParams() = default;

  static NetParams zeros(const Dims& dims);
  // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  static NetParams random(const Dims& dims, Rng& rng);

  const Dims& dims() const { return dims_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  static NetParams unflatten(const Dims& dims, std::span<const double> flat);

  bool all_finite() const;

  friend bool operator==(const NetParams&, const NetParams&) = default;

 private:
  explicit NetParams(const Dims& dims);

  Dims dims_;
  std::vector<Layer> layers_;
};

// Flat gradient aligned with NetParams::flatten().
struct GradVector {
  std::vector<double> values;

  GradVector() = default;
  explicit GradVector(std::size_t n) : values(n, 0.0) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  GradVector& operator+=(const GradVector& other);
  GradVector& operator*=(double s);
  bool all_finite() const;
};

// Activations recorded during a forward pass. activations[0] is the input,
// activations[l] the tanh output of hidden layer l, and logits the final
// affine output. pre_activations[l] holds the affine output of layer l.
struct ForwardTape {
  std::vector<std::vector<double>> pre_activations;
  std::vector<std::vector<double>> activations;
  std::vector<double> logits;
  std::vector<double> log_probs;

  std::size_t layer_count() const { return pre_activations.size(); }
};

struct Forward {
  std::vector<double> probs;
  ForwardTape tape;
};

Forward forward(const NetParams& params, std::span<const double> input);

// Probability vector only, no tape.
std::vector<double> policy(const NetParams& params, std::span<const double> input);

// Exact gradient of log pi(action | input) w.r.t. every parameter.
GradVector logprob_grad(const NetParams& params, const ForwardTape& tape,
                        std::size_t action);

// out += scale * grad log pi(action | input), without allocating a GradVector.
void accumulate_logprob_grad(const NetParams& params, const ForwardTape& tape,
                             std::size_t action, double scale,
                             std::span<double> out);

// out += scale * grad of sum_a target[a] log pi(a | input) (cross-entropy with
// a soft target, negated).
void accumulate_soft_target_grad(const NetParams& params,
                                 const ForwardTape& tape,
                                 std::span<const double> target, double scale,
                                 std::span<double> out);

enum class Direction { Ascent, Descent };

NetParams sgd_step(const NetParams& params, const GradVector& grad,
                   double learning_rate, Direction direction);

// Numerically stable log-softmax.
std::vector<double> log_softmax(std::span<const double> logits);

// ---- checkpoints ----------------------------------------------------------
//
// Layout (all integers little-endian uint32):
//   magic "MRGLCKPT" (8 bytes), format version, parameter-set count
//   per set: name length, name bytes, input dim, hidden count, hidden dims...,
//            output dim, parameter count, then float32 LE parameters in the
//            flattening order above.

struct NamedParams {
  std::string name;
  NetParams params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& out, const std::vector<NamedParams>& sets);
std::vector<NamedParams> read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path,
                     const std::vector<NamedParams>& sets);
std::vector<NamedParams> load_checkpoint(const std::string& path);

}  // namespace mergerl::net
