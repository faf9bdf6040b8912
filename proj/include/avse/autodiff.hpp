#pragma once

#include <functional>
#include <string>
#include <vector>

#include "avse/tensor.hpp"

namespace avse {

// A trainable tensor. Gradients accumulate across backward() calls and are
// cleared by the optimizer step.
struct Parameter {
  Tensor value;
  Tensor grad;
  std::string name;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : value(std::move(v)), grad(Tensor::zeros_like(value)), name(std::move(n)) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; invalidated by Tape::clear().
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  double scalar() const { return value().data[0]; }
};

// Recorded computation for reverse-mode differentiation. Single-threaded:
// one tape per forward/backward pass.
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int self)>;

  Var constant(Tensor v);
  // a differentiable leaf not bound to a Parameter (for gradient-flow tests)
  Var input(Tensor v);
  // leases a Parameter onto the tape; backward() accumulates into p.grad
  Var param(Parameter& p);

  // Seeds d(loss)=1 and propagates to all reachable leaves. Rejects
  // non-scalar losses; reports non-finite gradients with the op name.
  void backward(Var loss);

  void clear();

  int push(Tensor value, std::vector<int> parents, const char* op, BackFn back);

  const Tensor& val(int id) const { return nodes_[id].value; }
  Tensor& grad(int id);
  bool requires(int id) const { return nodes_[id].requires; }
  const char* op_name(int id) const { return nodes_[id].op; }
  size_t size() const { return nodes_.size(); }

  // gradient of a node after backward(); nullptr when never reached
  const Tensor* grad_of(Var v) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    BackFn back;
    const char* op = "";
    bool requires = false;
    Parameter* bound = nullptr;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divv(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var vexp(Var a);
Var vsqrt(Var a);
Var clamp_min(Var a, double floor);
Var silu(Var a);

// ---- reductions ----
Var sum_all(Var a);
Var mean_all(Var a);
Var sum_rows(Var a);  // (m,n) -> (m)
Var sum_cols(Var a);  // (m,n) -> (n)

// ---- matrix ----
Var matmul(Var a, Var b);
Var transpose2d(Var a);
Var softmax_rows(Var a);
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);
Var slice_cols(Var a, size_t j0, size_t j1);
Var concat_cols(const std::vector<Var>& parts);
Var add_rowvec(Var a, Var b);  // (m,n) + (n)
Var mul_colvec(Var a, Var v);  // row i scaled by v[i]
Var div_colvec(Var a, Var v);
Var mul_rowvec(Var a, Var v);  // column j scaled by v[j]
Var div_rowvec(Var a, Var v);

// ---- structure ----
Var reshape(Var a, std::vector<size_t> shape);
Var detach(Var a);
Var concat_channels(Var a, Var b);            // (c1,h,w)+(c2,h,w)
Var chw_to_tokens(Var a);                     // (c,h,w) -> (h*w, c)
Var tokens_to_chw(Var a, size_t c, size_t h, size_t w);
Var upsample2x(Var a);                        // nearest neighbor
Var add_chan_bias(Var x, Var b);              // (c,h,w) + per-channel b (c)
Var embedding_rows(Var table, const std::vector<int>& ids);

// 3x3 convolution, zero padding 1, stride 1 or 2. x: (Cin,H,W),
// w: (Cout,Cin,3,3), b: (Cout).
Var conv2d(Var x, Var w, Var b, int stride = 1);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace avse
