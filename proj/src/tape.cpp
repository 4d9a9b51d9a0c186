#include "amortda/tape.hpp"

#include <cmath>
#include <cstring>

#include "amortda/conv_kernels.hpp"
#include "amortda/rng.hpp"

namespace amortda {

namespace {

const char* op_name(Tape::Op op) {
  switch (op) {
    case Tape::Op::Input: return "input";
    case Tape::Op::Add: return "add";
    case Tape::Op::Sub: return "sub";
    case Tape::Op::Mul: return "mul";
    case Tape::Op::ScalarMul: return "scalar_mul";
    case Tape::Op::AddScalar: return "add_scalar";
    case Tape::Op::AddBias: return "add_bias";
    case Tape::Op::MatMul: return "matmul";
    case Tape::Op::Conv1d: return "conv1d";
    case Tape::Op::Sigmoid: return "sigmoid";
    case Tape::Op::Tanh: return "tanh";
    case Tape::Op::Relu: return "relu";
    case Tape::Op::Sin: return "sin";
    case Tape::Op::Roll: return "roll";
    case Tape::Op::Sum: return "sum";
    case Tape::Op::Mean: return "mean";
    case Tape::Op::SqNorm: return "squared_norm";
    case Tape::Op::MeanBatch: return "mean_batch";
    case Tape::Op::BroadcastBatch: return "broadcast_batch";
    case Tape::Op::Concat: return "concat";
    case Tape::Op::Slice: return "slice";
    case Tape::Op::EnsCov: return "ens_cov_channels";
    case Tape::Op::Transpose2: return "transpose2";
    case Tape::Op::Reshape: return "reshape";
  }
  return "?";
}

int trailing_dim(const Tensor& t) { return t.dim(t.rank() - 1); }

bool all_finite(const Tensor& t) {
  for (int i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

}  // namespace

void Tape::check(Var v) const {
  if (!v.valid() || static_cast<size_t>(v.idx) >= nodes_.size())
    throw Error("Tape: invalid Var");
}

Var Tape::push(Node node, const char* what) {
  if (!all_finite(node.value))
    throw Error(std::string("Tape: non-finite value produced by ") + what + " at node " +
                std::to_string(nodes_.size()));
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::Input;
  n.needs_grad = requires_grad || value.requires_grad;
  n.value = std::move(value);
  return push(std::move(n), "input");
}

Var Tape::add(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw Error("add: shape mismatch");
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = ta[i] + tb[i];
  Node n{Op::Add, a.idx, b.idx};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "add");
}

Var Tape::sub(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw Error("sub: shape mismatch");
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = ta[i] - tb[i];
  Node n{Op::Sub, a.idx, b.idx};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "sub");
}

Var Tape::mul(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw Error("mul: shape mismatch");
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = ta[i] * tb[i];
  Node n{Op::Mul, a.idx, b.idx};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "mul");
}

Var Tape::scalar_mul(Var a, double c) {
  check(a);
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = c * ta[i];
  Node n{Op::ScalarMul, a.idx, -1};
  n.c = c;
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "scalar_mul");
}

Var Tape::add_scalar(Var a, double c) {
  check(a);
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = ta[i] + c;
  Node n{Op::AddScalar, a.idx, -1};
  n.c = c;
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "add_scalar");
}

Var Tape::add_bias(Var x, Var bias) {
  check(x);
  check(bias);
  const Tensor& tx = val(x);
  const Tensor& tb = val(bias);
  if (tx.rank() != 3 || tb.rank() != 1 || tb.dim(0) != tx.dim(0))
    throw Error("add_bias: expected x [C][B][D] and bias [C]");
  const int C = tx.dim(0), B = tx.dim(1), D = tx.dim(2);
  Tensor out(tx.shape());
  for (int c = 0; c < C; ++c) {
    const double bc = tb[c];
    const double* src = tx.data() + (size_t)c * B * D;
    double* dst = out.data() + (size_t)c * B * D;
    for (int i = 0; i < B * D; ++i) dst[i] = src[i] + bc;
  }
  Node n{Op::AddBias, x.idx, bias.idx};
  n.needs_grad = node(x).needs_grad || node(bias).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "add_bias");
}

Var Tape::matmul(Var a, Var b) {
  check(a);
  check(b);
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
    throw Error("matmul: shape mismatch");
  const int M = ta.dim(0), K = ta.dim(1), N = tb.dim(1);
  Tensor out({M, N});
  kern::gemm_nn(M, K, N, ta.data(), K, tb.data(), N, out.data(), N, false);
  Node n{Op::MatMul, a.idx, b.idx};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "matmul");
}

Var Tape::conv1d(Var x, Var kernel) {
  check(x);
  check(kernel);
  const Tensor& tx = val(x);
  const Tensor& tk = val(kernel);
  if (tx.rank() != 3 || tk.rank() != 3) throw Error("conv1d: expected x [Cin][B][D], k [Cout][Cin][W]");
  const int Cin = tx.dim(0), B = tx.dim(1), D = tx.dim(2);
  const int Cout = tk.dim(0), W = tk.dim(2);
  if (tk.dim(1) != Cin) throw Error("conv1d: kernel input-channel mismatch");
  if (W % 2 == 0) throw Error("conv1d: kernel width must be odd for same-length circular conv");
  const size_t bd = (size_t)B * D;
  std::vector<double>& xcol = kern::scratch((size_t)Cin * W * bd);
  kern::im2col_circ(tx.data(), Cin, B, D, W, xcol.data());
  Tensor out({Cout, B, D});
  kern::gemm_nn(Cout, Cin * W, (int)bd, tk.data(), Cin * W, xcol.data(), (int)bd, out.data(),
                (int)bd, false);
  Node n{Op::Conv1d, x.idx, kernel.idx};
  n.needs_grad = node(x).needs_grad || node(kernel).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "conv1d");
}

Var Tape::sigmoid(Var a) {
  check(a);
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-ta[i]));
  Node n{Op::Sigmoid, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "sigmoid");
}

Var Tape::tanh(Var a) {
  check(a);
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = std::tanh(ta[i]);
  Node n{Op::Tanh, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "tanh");
}

Var Tape::relu(Var a) {
  check(a);
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = ta[i] > 0.0 ? ta[i] : 0.0;
  Node n{Op::Relu, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "relu");
}

Var Tape::sin(Var a) {
  check(a);
  const Tensor& ta = val(a);
  Tensor out(ta.shape());
  for (int i = 0; i < ta.size(); ++i) out[i] = std::sin(ta[i]);
  Node n{Op::Sin, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "sin");
}

Var Tape::dropout_apply(Var x, Var mask) {
  check(mask);
  if (node(mask).needs_grad) throw Error("dropout_apply: mask must not require gradients");
  return mul(x, mask);
}

Var Tape::roll(Var a, int shift) {
  check(a);
  const Tensor& ta = val(a);
  const int D = trailing_dim(ta);
  const int rows = ta.size() / D;
  int s = shift % D;
  if (s < 0) s += D;
  Tensor out(ta.shape());
  for (int r = 0; r < rows; ++r) {
    const double* src = ta.data() + (size_t)r * D;
    double* dst = out.data() + (size_t)r * D;
    // out[d] = in[d - s]
    std::memcpy(dst + s, src, sizeof(double) * (size_t)(D - s));
    std::memcpy(dst, src + (D - s), sizeof(double) * (size_t)s);
  }
  Node n{Op::Roll, a.idx, -1};
  n.i0 = s;
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "roll");
}

Var Tape::sum(Var a) {
  check(a);
  const Tensor& ta = val(a);
  double acc = 0.0;
  for (int i = 0; i < ta.size(); ++i) acc += ta[i];
  Node n{Op::Sum, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = Tensor::scalar(acc);
  return push(std::move(n), "sum");
}

Var Tape::mean(Var a) {
  check(a);
  const Tensor& ta = val(a);
  double acc = 0.0;
  for (int i = 0; i < ta.size(); ++i) acc += ta[i];
  Node n{Op::Mean, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = Tensor::scalar(acc / ta.size());
  return push(std::move(n), "mean");
}

Var Tape::squared_norm(Var a) {
  check(a);
  const Tensor& ta = val(a);
  double acc = 0.0;
  for (int i = 0; i < ta.size(); ++i) acc += ta[i] * ta[i];
  Node n{Op::SqNorm, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = Tensor::scalar(acc);
  return push(std::move(n), "squared_norm");
}

Var Tape::mean_batch(Var a) {
  check(a);
  const Tensor& ta = val(a);
  if (ta.rank() != 3) throw Error("mean_batch: expected [C][B][D]");
  const int C = ta.dim(0), B = ta.dim(1), D = ta.dim(2);
  Tensor out({C, D});
  for (int c = 0; c < C; ++c)
    for (int b = 0; b < B; ++b) {
      const double* src = ta.data() + ((size_t)c * B + b) * D;
      double* dst = out.data() + (size_t)c * D;
      for (int d = 0; d < D; ++d) dst[d] += src[d];
    }
  const double inv = 1.0 / B;
  for (int i = 0; i < out.size(); ++i) out[i] *= inv;
  Node n{Op::MeanBatch, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "mean_batch");
}

Var Tape::broadcast_batch(Var a, int batch) {
  check(a);
  const Tensor& ta = val(a);
  if (ta.rank() != 2) throw Error("broadcast_batch: expected [C][D]");
  const int C = ta.dim(0), D = ta.dim(1);
  Tensor out({C, batch, D});
  for (int c = 0; c < C; ++c)
    for (int b = 0; b < batch; ++b)
      std::memcpy(out.data() + ((size_t)c * batch + b) * D, ta.data() + (size_t)c * D,
                  sizeof(double) * (size_t)D);
  Node n{Op::BroadcastBatch, a.idx, -1};
  n.i0 = batch;
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "broadcast_batch");
}

Var Tape::concat(std::span<const Var> parts) {
  if (parts.empty()) throw Error("concat: no parts");
  for (Var p : parts) check(p);
  const Tensor& first = val(parts[0]);
  const int rank = first.rank();
  std::vector<int> shape = first.shape();
  int total_c = 0;
  for (Var p : parts) {
    const Tensor& t = val(p);
    if (t.rank() != rank) throw Error("concat: rank mismatch");
    for (int i = 1; i < rank; ++i)
      if (t.dim(i) != first.dim(i)) throw Error("concat: trailing dims mismatch");
    total_c += t.dim(0);
  }
  shape[0] = total_c;
  Tensor out(shape);
  size_t off = 0;
  Node n{Op::Concat, -1, -1};
  for (Var p : parts) {
    const Tensor& t = val(p);
    std::memcpy(out.data() + off, t.data(), sizeof(double) * (size_t)t.size());
    off += (size_t)t.size();
    n.parents.push_back(p.idx);
    n.needs_grad = n.needs_grad || node(p).needs_grad;
  }
  n.value = std::move(out);
  return push(std::move(n), "concat");
}

Var Tape::concat(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return concat(std::span<const Var>(v));
}

Var Tape::slice(Var a, int begin, int count) {
  check(a);
  const Tensor& ta = val(a);
  if (begin < 0 || count <= 0 || begin + count > ta.dim(0)) throw Error("slice: range out of bounds");
  std::vector<int> shape = ta.shape();
  shape[0] = count;
  size_t row = 1;
  for (int i = 1; i < ta.rank(); ++i) row *= (size_t)ta.dim(i);
  Tensor out(shape);
  std::memcpy(out.data(), ta.data() + (size_t)begin * row, sizeof(double) * (size_t)count * row);
  Node n{Op::Slice, a.idx, -1};
  n.i0 = begin;
  n.i1 = count;
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "slice");
}

namespace {
// Shared by forward and backward: per-channel batch means.
void batch_means(const double* x, int C, int B, int D, std::vector<double>& mu) {
  mu.assign((size_t)C * D, 0.0);
  for (int c = 0; c < C; ++c) {
    for (int b = 0; b < B; ++b) {
      const double* src = x + ((size_t)c * B + b) * D;
      double* m = mu.data() + (size_t)c * D;
      for (int d = 0; d < D; ++d) m[d] += src[d];
    }
  }
  const double inv = 1.0 / B;
  for (auto& v : mu) v *= inv;
}
}  // namespace

Var Tape::ens_cov_channels(Var members, int width) {
  check(members);
  const Tensor& tm = val(members);
  if (tm.rank() != 3) throw Error("ens_cov_channels: expected [C][B][D]");
  if (width % 2 == 0 || width <= 0) throw Error("ens_cov_channels: width must be odd");
  const int C = tm.dim(0), B = tm.dim(1), D = tm.dim(2);
  if (B < 2) throw Error("ens_cov_channels: need at least 2 members");
  const int half = (width - 1) / 2;
  std::vector<double> mu;
  batch_means(tm.data(), C, B, D, mu);
  Tensor out({C * width, D});
  for (int c = 0; c < C; ++c) {
    const double* mc = mu.data() + (size_t)c * D;
    for (int j = 0; j < width; ++j) {
      const int o = j - half;
      double* dst = out.data() + ((size_t)c * width + j) * D;
      for (int b = 0; b < B; ++b) {
        const double* src = tm.data() + ((size_t)c * B + b) * D;
        for (int d = 0; d < D; ++d) {
          int d2 = d + o;
          if (d2 < 0) d2 += D;
          else if (d2 >= D) d2 -= D;
          dst[d] += (src[d] - mc[d]) * (src[d2] - mc[d2]);
        }
      }
      const double inv = 1.0 / (B - 1);
      for (int d = 0; d < D; ++d) dst[d] *= inv;
    }
  }
  Node n{Op::EnsCov, members.idx, -1};
  n.i0 = width;
  n.needs_grad = node(members).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "ens_cov_channels");
}

Var Tape::transpose2(Var a) {
  check(a);
  const Tensor& ta = val(a);
  if (ta.rank() != 2) throw Error("transpose2: expected rank-2");
  const int M = ta.dim(0), N = ta.dim(1);
  Tensor out({N, M});
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out[(size_t)j * M + i] = ta[(size_t)i * N + j];
  Node n{Op::Transpose2, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "transpose2");
}

Var Tape::reshape(Var a, std::vector<int> shape) {
  check(a);
  const Tensor& ta = val(a);
  Tensor out(std::move(shape), ta.vec());
  if (out.size() != ta.size()) throw Error("reshape: size mismatch");
  Node n{Op::Reshape, a.idx, -1};
  n.needs_grad = node(a).needs_grad;
  n.value = std::move(out);
  return push(std::move(n), "reshape");
}

std::vector<Tensor> Tape::gradient(Var output, std::initializer_list<Var> inputs) const {
  std::vector<Var> v(inputs);
  return gradient(output, std::span<const Var>(v));
}

std::vector<Tensor> Tape::gradient(Var output, std::span<const Var> inputs) const {
  check(output);
  if (val(output).size() != 1) throw Error("gradient: output must be a scalar");
  for (Var v : inputs) {
    check(v);
    if (node(v).op != Op::Input) throw Error("gradient: wrt targets must be input nodes");
  }

  std::vector<Tensor> adj(nodes_.size());
  std::vector<bool> seeded(nodes_.size(), false);
  auto touch = [&](int idx) -> Tensor& {
    if (!seeded[(size_t)idx]) {
      adj[(size_t)idx] = Tensor(nodes_[(size_t)idx].value.shape());
      seeded[(size_t)idx] = true;
    }
    return adj[(size_t)idx];
  };

  touch(output.idx)[0] = 1.0;

  for (int i = output.idx; i >= 0; --i) {
    const Node& n = nodes_[(size_t)i];
    if (!seeded[(size_t)i] || !n.needs_grad || n.op == Op::Input) continue;
    const Tensor& g = adj[(size_t)i];
    if (!all_finite(g))
      throw Error(std::string("gradient: non-finite adjoint at node ") + std::to_string(i) +
                  " (" + op_name(n.op) + ")");
    const bool ga = n.a >= 0 && nodes_[(size_t)n.a].needs_grad;
    const bool gb = n.b >= 0 && nodes_[(size_t)n.b].needs_grad;

    switch (n.op) {
      case Tape::Op::Input:
        break;
      case Op::Add: {
        if (ga) {
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += g[k];
        }
        if (gb) {
          Tensor& db = touch(n.b);
          for (int k = 0; k < g.size(); ++k) db[k] += g[k];
        }
        break;
      }
      case Op::Sub: {
        if (ga) {
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += g[k];
        }
        if (gb) {
          Tensor& db = touch(n.b);
          for (int k = 0; k < g.size(); ++k) db[k] -= g[k];
        }
        break;
      }
      case Op::Mul: {
        const Tensor& tva = nodes_[(size_t)n.a].value;
        const Tensor& tvb = nodes_[(size_t)n.b].value;
        if (ga) {
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += g[k] * tvb[k];
        }
        if (gb) {
          Tensor& db = touch(n.b);
          for (int k = 0; k < g.size(); ++k) db[k] += g[k] * tva[k];
        }
        break;
      }
      case Op::ScalarMul: {
        if (ga) {
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += n.c * g[k];
        }
        break;
      }
      case Op::AddScalar: {
        if (ga) {
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += g[k];
        }
        break;
      }
      case Op::AddBias: {
        const Tensor& tx = nodes_[(size_t)n.a].value;
        const int C = tx.dim(0), B = tx.dim(1), D = tx.dim(2);
        if (ga) {
          Tensor& dx = touch(n.a);
          for (int k = 0; k < g.size(); ++k) dx[k] += g[k];
        }
        if (gb) {
          Tensor& db = touch(n.b);
          for (int c = 0; c < C; ++c) {
            const double* gr = g.data() + (size_t)c * B * D;
            double acc = 0.0;
            for (int k = 0; k < B * D; ++k) acc += gr[k];
            db[c] += acc;
          }
        }
        break;
      }
      case Op::MatMul: {
        const Tensor& ta = nodes_[(size_t)n.a].value;
        const Tensor& tb = nodes_[(size_t)n.b].value;
        const int M = ta.dim(0), K = ta.dim(1), N = tb.dim(1);
        if (ga) {  // dA += g * B^T
          Tensor& da = touch(n.a);
          kern::gemm_nt(M, N, K, g.data(), N, tb.data(), N, da.data(), K, true);
        }
        if (gb) {  // dB += A^T * g
          Tensor& db = touch(n.b);
          kern::gemm_tn(K, M, N, ta.data(), K, g.data(), N, db.data(), N, true);
        }
        break;
      }
      case Op::Conv1d: {
        const Tensor& tx = nodes_[(size_t)n.a].value;
        const Tensor& tk = nodes_[(size_t)n.b].value;
        const int Cin = tx.dim(0), B = tx.dim(1), D = tx.dim(2);
        const int Cout = tk.dim(0), W = tk.dim(2);
        const size_t bd = (size_t)B * D;
        if (gb) {  // dK += g * xcol^T  (xcol rebuilt from the saved input)
          std::vector<double>& xcol = kern::scratch((size_t)Cin * W * bd);
          kern::im2col_circ(tx.data(), Cin, B, D, W, xcol.data());
          Tensor& dk = touch(n.b);
          kern::gemm_nt(Cout, (int)bd, Cin * W, g.data(), (int)bd, xcol.data(), (int)bd,
                        dk.data(), Cin * W, true);
        }
        if (ga) {  // dxcol = K^T * g, then fold back circularly
          std::vector<double>& dxcol = kern::scratch2((size_t)Cin * W * bd);
          kern::gemm_tn(Cin * W, Cout, (int)bd, tk.data(), Cin * W, g.data(), (int)bd,
                        dxcol.data(), (int)bd, false);
          Tensor& dx = touch(n.a);
          kern::col2im_circ_acc(dxcol.data(), Cin, B, D, W, dx.data());
        }
        break;
      }
      case Op::Sigmoid: {
        if (ga) {
          const Tensor& y = n.value;
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += g[k] * y[k] * (1.0 - y[k]);
        }
        break;
      }
      case Op::Tanh: {
        if (ga) {
          const Tensor& y = n.value;
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += g[k] * (1.0 - y[k] * y[k]);
        }
        break;
      }
      case Op::Relu: {
        if (ga) {
          const Tensor& x = nodes_[(size_t)n.a].value;
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += x[k] > 0.0 ? g[k] : 0.0;
        }
        break;
      }
      case Op::Sin: {
        if (ga) {
          const Tensor& x = nodes_[(size_t)n.a].value;
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += g[k] * std::cos(x[k]);
        }
        break;
      }
      case Op::Roll: {
        if (ga) {
          Tensor& da = touch(n.a);
          const int D = trailing_dim(n.value);
          const int rows = n.value.size() / D;
          const int s = n.i0;  // out[d] = in[d-s]  =>  din[d] += g[d+s]
          for (int r = 0; r < rows; ++r) {
            const double* gr = g.data() + (size_t)r * D;
            double* dr = da.data() + (size_t)r * D;
            for (int d = 0; d < D; ++d) {
              int d2 = d + s;
              if (d2 >= D) d2 -= D;
              dr[d] += gr[d2];
            }
          }
        }
        break;
      }
      case Op::Sum: {
        if (ga) {
          Tensor& da = touch(n.a);
          const double gv = g[0];
          for (int k = 0; k < da.size(); ++k) da[k] += gv;
        }
        break;
      }
      case Op::Mean: {
        if (ga) {
          Tensor& da = touch(n.a);
          const double gv = g[0] / da.size();
          for (int k = 0; k < da.size(); ++k) da[k] += gv;
        }
        break;
      }
      case Op::SqNorm: {
        if (ga) {
          const Tensor& x = nodes_[(size_t)n.a].value;
          Tensor& da = touch(n.a);
          const double gv = 2.0 * g[0];
          for (int k = 0; k < da.size(); ++k) da[k] += gv * x[k];
        }
        break;
      }
      case Op::MeanBatch: {
        if (ga) {
          Tensor& da = touch(n.a);
          const int C = da.dim(0), B = da.dim(1), D = da.dim(2);
          const double inv = 1.0 / B;
          for (int c = 0; c < C; ++c)
            for (int b = 0; b < B; ++b) {
              double* dr = da.data() + ((size_t)c * B + b) * D;
              const double* gr = g.data() + (size_t)c * D;
              for (int d = 0; d < D; ++d) dr[d] += gr[d] * inv;
            }
        }
        break;
      }
      case Op::BroadcastBatch: {
        if (ga) {
          Tensor& da = touch(n.a);
          const int C = n.value.dim(0), B = n.value.dim(1), D = n.value.dim(2);
          for (int c = 0; c < C; ++c)
            for (int b = 0; b < B; ++b) {
              const double* gr = g.data() + ((size_t)c * B + b) * D;
              double* dr = da.data() + (size_t)c * D;
              for (int d = 0; d < D; ++d) dr[d] += gr[d];
            }
        }
        break;
      }
      case Op::Concat: {
        size_t off = 0;
        for (int pidx : n.parents) {
          const Tensor& pv = nodes_[(size_t)pidx].value;
          if (nodes_[(size_t)pidx].needs_grad) {
            Tensor& dp = touch(pidx);
            for (int k = 0; k < pv.size(); ++k) dp[k] += g[(int)off + k];
          }
          off += (size_t)pv.size();
        }
        break;
      }
      case Op::Slice: {
        if (ga) {
          Tensor& da = touch(n.a);
          const Tensor& ta = nodes_[(size_t)n.a].value;
          size_t row = 1;
          for (int r = 1; r < ta.rank(); ++r) row *= (size_t)ta.dim(r);
          double* base = da.data() + (size_t)n.i0 * row;
          for (int k = 0; k < g.size(); ++k) base[k] += g[k];
        }
        break;
      }
      case Op::EnsCov: {
        if (ga) {
          const Tensor& tm = nodes_[(size_t)n.a].value;
          const int C = tm.dim(0), B = tm.dim(1), D = tm.dim(2);
          const int width = n.i0;
          const int half = (width - 1) / 2;
          std::vector<double> mu;
          batch_means(tm.data(), C, B, D, mu);
          Tensor& da = touch(n.a);
          const double inv = 1.0 / (B - 1);
          for (int c = 0; c < C; ++c) {
            const double* mc = mu.data() + (size_t)c * D;
            for (int j = 0; j < width; ++j) {
              const int o = j - half;
              const double* gr = g.data() + ((size_t)c * width + j) * D;
              for (int b = 0; b < B; ++b) {
                const double* src = tm.data() + ((size_t)c * B + b) * D;
                double* dr = da.data() + ((size_t)c * B + b) * D;
                for (int d = 0; d < D; ++d) {
                  int d2 = d + o;
                  if (d2 < 0) d2 += D;
                  else if (d2 >= D) d2 -= D;
                  const double gv = gr[d] * inv;
                  dr[d] += gv * (src[d2] - mc[d2]);
                  dr[d2] += gv * (src[d] - mc[d]);
                }
              }
            }
          }
        }
        break;
      }
      case Op::Transpose2: {
        if (ga) {
          Tensor& da = touch(n.a);
          const int N = n.value.dim(0), M = n.value.dim(1);  // value is [N][M]
          for (int j = 0; j < N; ++j)
            for (int i2 = 0; i2 < M; ++i2) da[(size_t)i2 * N + j] += g[(size_t)j * M + i2];
        }
        break;
      }
      case Op::Reshape: {
        if (ga) {
          Tensor& da = touch(n.a);
          for (int k = 0; k < g.size(); ++k) da[k] += g[k];
        }
        break;
      }
    }
  }

  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (Var v : inputs) {
    if (seeded[(size_t)v.idx])
      out.push_back(adj[(size_t)v.idx]);
    else
      out.push_back(Tensor(val(v).shape()));  // exact zeros: input never touched
  }
  return out;
}

Tensor make_dropout_mask(const std::vector<int>& shape, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout rate must be in [0,1)");
  Tensor mask(shape);
  const double keep = 1.0 - rate;
  const double scale = 1.0 / keep;
  for (int i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < keep ? scale : 0.0;
  return mask;
}

}  // namespace amortda
