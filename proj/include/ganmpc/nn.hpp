#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ganmpc/util.hpp"

namespace ganmpc::nn {

enum class Activation { kRelu, kTanh, kIdentity };
enum class OutputActivation { kIdentity, kSoftplus };

// Immutable description of a dense network: sizes per layer plus the
// activation of each hidden layer and of the output.
class NetworkSpec {
 public:
  NetworkSpec(std::vector<int> layer_sizes, Activation hidden_activation,
              OutputActivation output_activation = OutputActivation::kIdentity);
  NetworkSpec(std::vector<int> layer_sizes, std::vector<Activation> hidden_activations,
              OutputActivation output_activation = OutputActivation::kIdentity);

  const std::vector<int>& layer_sizes() const { return layer_sizes_; }
  const std::vector<Activation>& hidden_activations() const { return hidden_; }
  OutputActivation output_activation() const { return output_; }

  int input_dim() const { return layer_sizes_.front(); }
  int output_dim() const { return layer_sizes_.back(); }
  // number of weight layers
  int num_layers() const { return static_cast<int>(layer_sizes_.size()) - 1; }

  bool operator==(const NetworkSpec& other) const = default;

 private:
  std::vector<int> layer_sizes_;
  std::vector<Activation> hidden_;
  OutputActivation output_;
};

// Weight matrices and bias vectors conforming to a NetworkSpec. Also used to
// carry gradients, which share the same shapes.
struct NetworkParams {
  std::vector<MatrixXd> w;  // w[l] is layer_sizes[l+1] x layer_sizes[l]
  std::vector<VectorXd> b;

  static NetworkParams zeros(const NetworkSpec& spec);

  bool shapes_match(const NetworkSpec& spec) const;
  bool all_finite() const;
  long num_entries() const;

  VectorXd flatten() const;
  void unflatten(const VectorXd& flat);
};

// Glorot-uniform weights, zero biases. Deterministic per seed.
NetworkParams glorot_init(const NetworkSpec& spec, std::uint64_t seed);

// Numerically stable scalar helpers shared by every gradient path.
inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}
inline double sigmoid(double z) {
  if (z >= 0.0) {
    double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(z);
  return e / (1.0 + e);
}

VectorXd forward(const NetworkSpec& spec, const NetworkParams& params, const VectorXd& input);

// Batched evaluation; every column of `inputs` is one sample.
MatrixXd forward_batch(const NetworkSpec& spec, const NetworkParams& params,
                       const MatrixXd& inputs);

// Intermediate layer values kept for the backward pass.
struct ForwardCache {
  std::vector<MatrixXd> activations;      // activations[0] = inputs, then per layer
  std::vector<MatrixXd> pre_activations;  // pre_activations[l] = w[l]*a[l] + b[l]
};

MatrixXd forward_cached(const NetworkSpec& spec, const NetworkParams& params,
                        const MatrixXd& inputs, ForwardCache& cache);

struct BackwardResult {
  NetworkParams param_grad;
  MatrixXd input_grad;
};

// Reverse-mode gradients of the forward map contracted with `upstream`
// (same shape as the output). Exact for the architectures above.
BackwardResult backward(const NetworkSpec& spec, const NetworkParams& params,
                        const MatrixXd& inputs, const MatrixXd& upstream);

BackwardResult backward_from_cache(const NetworkSpec& spec, const NetworkParams& params,
                                   const ForwardCache& cache, const MatrixXd& upstream);

// ---------------------------------------------------------------------------
// Recurrent trajectory encoder: single gated recurrent cell plus an affine
// read-out to one scalar logit.

struct RecurrentEncoderParams {
  MatrixXd wz, uz, wr, ur, wc, uc;  // gate weights: input-to-hidden, hidden-to-hidden
  VectorXd bz, br, bc;
  VectorXd readout_w;
  double readout_b = 0.0;

  static RecurrentEncoderParams zeros(int input_dim, int hidden_dim);
  static RecurrentEncoderParams glorot_init(int input_dim, int hidden_dim, std::uint64_t seed);

  int input_dim() const { return static_cast<int>(wz.cols()); }
  int hidden_dim() const { return static_cast<int>(wz.rows()); }
  bool all_finite() const;
  long num_entries() const;
  VectorXd flatten() const;
  void unflatten(const VectorXd& flat);
};

// Scans the sequence and applies the read-out to the final hidden state.
double encode_trajectory(const RecurrentEncoderParams& params,
                         std::span<const VectorXd> states);

struct EncoderBackwardResult {
  double logit = 0.0;
  RecurrentEncoderParams param_grad;
  std::vector<VectorXd> input_grad;  // one per state in the sequence
};

// Gradients of (upstream * logit) with respect to parameters and every input
// state, via backpropagation through time.
EncoderBackwardResult encode_backward(const RecurrentEncoderParams& params,
                                      std::span<const VectorXd> states,
                                      double upstream = 1.0);

// ---------------------------------------------------------------------------
// Adam with optional global gradient-norm clipping.

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::optional<double> global_clip_norm;  // l2 norm over all entries
};

struct AdamState {
  VectorXd m;  // first moment
  VectorXd v;  // second moment
  long step = 0;
  AdamConfig config;

  AdamState() = default;
  AdamState(long dim, const AdamConfig& cfg)
      : m(VectorXd::Zero(dim)), v(VectorXd::Zero(dim)), config(cfg) {}
};

// One Adam update on flattened parameters. Returns false (state and params
// untouched) if the gradient contains non-finite entries.
bool adam_step(AdamState& state, VectorXd& params, VectorXd gradient);

}  // namespace ganmpc::nn
