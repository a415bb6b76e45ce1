#pragma once

// Minimal reverse-mode differentiation over dense double tensors. Every op
// records a node only when grad mode is on and at least one input requires a
// gradient, so evaluation runs allocate no tape.

#include <functional>
#include <memory>
#include <vector>

#include "resq/tensor.hpp"

namespace resq::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient storage, zero-allocated on first use.
  Tensor& grad_buffer();
  const Shape& shape() const { return value.shape; }
};

Var constant(Tensor value);
Var leaf(Tensor value);

/// Builds a result node; parents and the backward closure are kept only when
/// a gradient can flow through them.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Seeds d(root)/d(root) = 1 (root must hold one element) and propagates.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);

/// Sum of all elements, shape [1].
Var sum(const Var& x);
/// Mean of all elements, shape [1].
Var mean(const Var& x);

Var reshape(const Var& x, Shape shape);

/// x [M, in], w [out, in], b [out] or null -> [M, out].
Var linear(const Var& x, const Var& w, const Var& b);

/// x [B, Ci, H, W], w [Co, Ci, k, k], b [Co] or null.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization over (B, H, W). Training mode uses batch
/// statistics and updates the running estimates; evaluation mode uses them.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               bool training);

/// Per-sample, per-channel normalization over (H, W), no affine part.
Var instance_norm(const Var& x, double eps = 1e-5);

Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, int start, int count);

/// x [B, C, H, W] * gamma [B, C] + beta [B, C], broadcast over space.
Var film(const Var& x, const Var& gamma, const Var& beta);

/// [B, C, H, W] -> [B, C].
Var spatial_mean(const Var& x);

/// Row gather: table [V, E], ids -> [ids.size(), E].
Var embedding(const Var& table, const std::vector<int>& ids);

/// Per-sample choice along the batch axis: take_a[b] ? a[b] : b[b].
Var select_batch(const std::vector<char>& take_a, const Var& a, const Var& b);

}  // namespace resq::ag
