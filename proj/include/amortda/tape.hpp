#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "amortda/tensor.hpp"

namespace amortda {

/// Handle to a node on a Tape. Only valid for the tape that produced it.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

/// Reverse-mode autodiff over dense tensors, define-by-run. Each operation
/// records forward values on the tape in topological order; gradient() walks
/// the nodes once in reverse. A Tape is confined to a single thread.
///
/// Batched data uses the layout [channels][batch][space]; circular convolution
/// acts on the trailing (space) dimension of every (channel, batch) row.
class Tape {
 public:
  enum class Op : uint8_t {
    Input,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    AddBias,
    MatMul,
    Conv1d,
    Sigmoid,
    Tanh,
    Relu,
    Sin,
    Roll,
    Sum,
    Mean,
    SqNorm,
    MeanBatch,
    BroadcastBatch,
    Concat,
    Slice,
    EnsCov,
    Transpose2,
    Reshape,
  };

  Var input(Tensor value, bool requires_grad = false);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scalar_mul(Var a, double c);
  Var add_scalar(Var a, double c);
  /// x [C][B][D] + bias [C], broadcast over batch and space.
  Var add_bias(Var x, Var bias);
  /// a [M][K] * b [K][N].
  Var matmul(Var a, Var b);
  /// Circular same-length convolution. x [Cin][B][D], kernel [Cout][Cin][W]
  /// with W odd; output [Cout][B][D].
  Var conv1d(Var x, Var kernel);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var relu(Var a);
  Var sin(Var a);
  /// Elementwise product with a constant (non-differentiated) mask, values
  /// pre-scaled by 1/(1-rate) for inverted dropout.
  Var dropout_apply(Var x, Var mask);
  /// Circular shift along the trailing dimension: out[..., d] = in[..., d-shift].
  Var roll(Var a, int shift);
  Var sum(Var a);
  Var mean(Var a);
  Var squared_norm(Var a);
  /// [C][B][D] -> [C][D], mean over the batch dimension.
  Var mean_batch(Var a);
  /// [C][D] -> [C][B][D], replicate over a batch dimension.
  Var broadcast_batch(Var a, int batch);
  /// Concatenate along the leading (channel) dimension; trailing dims must match.
  Var concat(std::span<const Var> parts);
  Var concat(std::initializer_list<Var> parts);
  /// Slice [count] channels starting at [begin] along the leading dimension.
  Var slice(Var a, int begin, int count);
  /// members [C][B][D] -> [C*width][D]: for channel c and offset o in
  /// [-(w-1)/2, (w-1)/2], the sample covariance (divisor m-1) between
  /// coordinate d and coordinate d+o across the batch. Center row of each
  /// channel block is the per-coordinate variance.
  Var ens_cov_channels(Var members, int width);
  Var transpose2(Var a);
  Var reshape(Var a, std::vector<int> shape);

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.idx)].value; }
  size_t size() const { return nodes_.size(); }
  /// Release all nodes; previously returned Vars become invalid.
  void clear() { nodes_.clear(); }

  /// Gradients of a scalar output with respect to the given inputs.
  /// Inputs that do not influence the output get exact zeros.
  std::vector<Tensor> gradient(Var output, std::span<const Var> inputs) const;
  std::vector<Tensor> gradient(Var output, std::initializer_list<Var> inputs) const;

 private:
  struct Node {
    Node() = default;
    Node(Op o, int pa, int pb) : op(o), a(pa), b(pb) {}
    Op op = Op::Input;
    int a = -1;
    int b = -1;
    int i0 = 0;  // op parameter: roll shift, slice begin, ens_cov width, batch
    int i1 = 0;  // op parameter: slice count
    double c = 0.0;
    std::vector<int> parents;  // for Concat
    Tensor value;
    bool needs_grad = false;
  };

  Var push(Node node, const char* what);
  const Node& node(Var v) const { return nodes_[static_cast<size_t>(v.idx)]; }
  void check(Var v) const;

  std::vector<Node> nodes_;
};

/// 0/1 mask scaled by 1/(1-rate); rate in [0,1).
class Rng;
Tensor make_dropout_mask(const std::vector<int>& shape, double rate, Rng& rng);

}  // namespace amortda
