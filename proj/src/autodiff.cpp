#include "avse/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace avse {

const Tensor& Var::value() const {
  if (!valid()) throw std::logic_error("use of empty Var");
  return tape->val(id);
}

Var Tape::constant(Tensor v) {
  int id = push(std::move(v), {}, "constant", nullptr);
  return {this, id};
}

Var Tape::input(Tensor v) {
  int id = push(std::move(v), {}, "input", nullptr);
  nodes_[id].requires = true;
  return {this, id};
}

Var Tape::param(Parameter& p) {
  int id = push(p.value, {}, "param", nullptr);
  nodes_[id].requires = true;
  nodes_[id].bound = &p;
  return {this, id};
}

int Tape::push(Tensor value, std::vector<int> parents, const char* op, BackFn back) {
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.back = std::move(back);
  n.op = op;
  for (int p : n.parents)
    if (nodes_[p].requires) n.requires = true;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

const Tensor* Tape::grad_of(Var v) const {
  if (!v.valid()) return nullptr;
  const Node& n = nodes_[v.id];
  return n.grad.data.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
  if (!loss.valid() || loss.tape != this)
    throw std::invalid_argument("backward: loss not on this tape");
  if (nodes_[loss.id].value.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(nodes_[loss.id].value.shape));
  grad(loss.id).data[0] += 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires || n.grad.data.empty()) continue;
    double acc = 0.0;
    for (double g : n.grad.data) acc += g;
    if (!std::isfinite(acc)) {
      // a NaN/inf anywhere poisons the sum
      bool bad = false;
      for (double g : n.grad.data)
        if (!std::isfinite(g)) { bad = true; break; }
      if (bad)
        throw std::runtime_error(std::string("non-finite gradient at op '") +
                                 n.op + "'");
    }
    if (n.back) n.back(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.bound && !n.grad.data.empty()) {
      for (size_t i = 0; i < n.grad.size(); ++i)
        n.bound->grad.data[i] += n.grad.data[i];
    }
  }
}

void Tape::clear() { nodes_.clear(); }

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.value().shape) + " vs " +
                                shape_str(b.value().shape));
}

void check_same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape != b.tape)
    throw std::invalid_argument(std::string(op) + ": vars on different tapes");
}

}  // namespace

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  check_same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  int pa = a.id, pb = b.id;
  int id = a.tape->push(std::move(out), {pa, pb}, "add", [pa, pb](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires(pa)) {
      Tensor& ga = t.grad(pa);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);
      for (size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
    }
  });
  return {a.tape, id};
}

Var sub(Var a, Var b) {
  check_same_tape(a, b, "sub");
  check_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
  int pa = a.id, pb = b.id;
  int id = a.tape->push(std::move(out), {pa, pb}, "sub", [pa, pb](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires(pa)) {
      Tensor& ga = t.grad(pa);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);
      for (size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
    }
  });
  return {a.tape, id};
}

Var mul(Var a, Var b) {
  check_same_tape(a, b, "mul");
  check_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
  int pa = a.id, pb = b.id;
  int id = a.tape->push(std::move(out), {pa, pb}, "mul", [pa, pb](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.val(pa);
    const Tensor& bv2 = t.val(pb);
    if (t.requires(pa)) {
      Tensor& ga = t.grad(pa);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
    }
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);
      for (size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
    }
  });
  return {a.tape, id};
}

Var divv(Var a, Var b) {
  check_same_tape(a, b, "div");
  check_same_shape(a, b, "div");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out.data[i] /= bv.data[i];
  int pa = a.id, pb = b.id;
  int id = a.tape->push(std::move(out), {pa, pb}, "div", [pa, pb](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.val(pa);
    const Tensor& bv2 = t.val(pb);
    if (t.requires(pa)) {
      Tensor& ga = t.grad(pa);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] / bv2.data[i];
    }
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);
      for (size_t i = 0; i < g.size(); ++i)
        gb.data[i] -= g.data[i] * av.data[i] / (bv2.data[i] * bv2.data[i]);
    }
  });
  return {a.tape, id};
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v *= c;
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "scale", [pa, c](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
  });
  return {a.tape, id};
}

Var add_const(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v += c;
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "add_const", [pa](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
  });
  return {a.tape, id};
}

Var vexp(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = std::exp(v);
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "exp", [pa](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.val(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * y.data[i];
  });
  return {a.tape, id};
}

Var vsqrt(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = std::sqrt(v);
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "sqrt", [pa](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.val(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < g.size(); ++i)
      ga.data[i] += g.data[i] * 0.5 / y.data[i];
  });
  return {a.tape, id};
}

Var clamp_min(Var a, double floor) {
  Tensor out = a.value();
  for (double& v : out.data) v = std::max(v, floor);
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "clamp_min", [pa, floor](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    const Tensor& x = t.val(pa);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < g.size(); ++i)
      if (x.data[i] > floor) ga.data[i] += g.data[i];
  });
  return {a.tape, id};
}

Var silu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = v / (1.0 + std::exp(-v));
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "silu", [pa](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    const Tensor& x = t.val(pa);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < g.size(); ++i) {
      double s = 1.0 / (1.0 + std::exp(-x.data[i]));
      ga.data[i] += g.data[i] * s * (1.0 + x.data[i] * (1.0 - s));
    }
  });
  return {a.tape, id};
}

Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  int pa = a.id;
  int id = a.tape->push(Tensor::scalar(s), {pa}, "sum_all", [pa](Tape& t, int self) {
    if (!t.requires(pa)) return;
    double g = t.grad(self).data[0];
    Tensor& ga = t.grad(pa);
    for (double& v : ga.data) v += g;
  });
  return {a.tape, id};
}

Var mean_all(Var a) {
  size_t n = a.value().size();
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw std::invalid_argument("sum_rows: expects 2-D");
  size_t m = x.shape[0], n = x.shape[1];
  Tensor out({m});
  for (size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (size_t j = 0; j < n; ++j) s += x.at(i, j);
    out.data[i] = s;
  }
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "sum_rows", [pa, m, n](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[i];
  });
  return {a.tape, id};
}

Var sum_cols(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw std::invalid_argument("sum_cols: expects 2-D");
  size_t m = x.shape[0], n = x.shape[1];
  Tensor out({n});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.data[j] += x.at(i, j);
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "sum_cols", [pa, m, n](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[j];
  });
  return {a.tape, id};
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(A.shape) + " x " + shape_str(B.shape));
  size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    const double* arow = &A.data[i * k];
    double* orow = &out.data[i * n];
    for (size_t kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = &B.data[kk * n];
      for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  int pa = a.id, pb = b.id;
  int id = a.tape->push(std::move(out), {pa, pb}, "matmul",
                        [pa, pb, m, k, n](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& A2 = t.val(pa);
    const Tensor& B2 = t.val(pb);
    if (t.requires(pa)) {
      Tensor& ga = t.grad(pa);  // dA = g . B^T
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
          double gv = g.data[i * n + j];
          const double* brow = &B2.data[0] + j;  // B[kk][j] strided
          double* garow = &ga.data[i * k];
          for (size_t kk = 0; kk < k; ++kk) garow[kk] += gv * brow[kk * n];
        }
    }
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);  // dB = A^T . g
      for (size_t kk = 0; kk < k; ++kk)
        for (size_t i = 0; i < m; ++i) {
          double av = A2.data[i * k + kk];
          const double* grow = &g.data[i * n];
          double* gbrow = &gb.data[kk * n];
          for (size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
  return {a.tape, id};
}

Var transpose2d(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw std::invalid_argument("transpose2d: expects 2-D");
  size_t m = x.shape[0], n = x.shape[1];
  Tensor out({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.data[j * m + i] = x.data[i * n + j];
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "transpose", [pa, m, n](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) ga.data[i * n + j] += g.data[j * m + i];
  });
  return {a.tape, id};
}

Var softmax_rows(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw std::invalid_argument("softmax_rows: expects 2-D");
  size_t m = x.shape[0], n = x.shape[1];
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    double mx = x.at(i, 0);
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (size_t j = 0; j < n; ++j) {
      double e = std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      z += e;
    }
    for (size_t j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "softmax", [pa, m, n](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    const Tensor& s = t.val(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (size_t j = 0; j < n; ++j) dot += g.data[i * n + j] * s.data[i * n + j];
      for (size_t j = 0; j < n; ++j)
        ga.data[i * n + j] += s.data[i * n + j] * (g.data[i * n + j] - dot);
    }
  });
  return {a.tape, id};
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  check_same_tape(x, gain, "layer_norm");
  check_same_tape(x, bias, "layer_norm");
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw std::invalid_argument("layer_norm: expects 2-D");
  size_t m = xv.shape[0], n = xv.shape[1];
  if (gain.value().size() != n || bias.value().size() != n)
    throw std::invalid_argument("layer_norm: gain/bias must have width " +
                                std::to_string(n));
  Tensor out({m, n});
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (size_t j = 0; j < n; ++j) mu += xv.at(i, j);
    mu /= n;
    double var = 0.0;
    for (size_t j = 0; j < n; ++j) {
      double d = xv.at(i, j) - mu;
      var += d * d;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + eps);
    for (size_t j = 0; j < n; ++j)
      out.at(i, j) = (xv.at(i, j) - mu) * inv * gv.data[j] + bv.data[j];
  }
  int px = x.id, pg = gain.id, pb = bias.id;
  int id = x.tape->push(std::move(out), {px, pg, pb}, "layer_norm",
                        [px, pg, pb, m, n, eps](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv2 = t.val(px);
    const Tensor& gv2 = t.val(pg);
    for (size_t i = 0; i < m; ++i) {
      double mu = 0.0;
      for (size_t j = 0; j < n; ++j) mu += xv2.data[i * n + j];
      mu /= n;
      double var = 0.0;
      for (size_t j = 0; j < n; ++j) {
        double d = xv2.data[i * n + j] - mu;
        var += d * d;
      }
      var /= n;
      double inv = 1.0 / std::sqrt(var + eps);
      if (t.requires(pg)) {
        Tensor& gg = t.grad(pg);
        for (size_t j = 0; j < n; ++j)
          gg.data[j] += g.data[i * n + j] * (xv2.data[i * n + j] - mu) * inv;
      }
      if (t.requires(pb)) {
        Tensor& gb = t.grad(pb);
        for (size_t j = 0; j < n; ++j) gb.data[j] += g.data[i * n + j];
      }
      if (t.requires(px)) {
        Tensor& gx = t.grad(px);
        // dxhat_j = g_j * gain_j; standard two-moment layer-norm backward
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (size_t j = 0; j < n; ++j) {
          double xhat = (xv2.data[i * n + j] - mu) * inv;
          double dxh = g.data[i * n + j] * gv2.data[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xhat;
        }
        for (size_t j = 0; j < n; ++j) {
          double xhat = (xv2.data[i * n + j] - mu) * inv;
          double dxh = g.data[i * n + j] * gv2.data[j];
          gx.data[i * n + j] +=
              inv * (dxh - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
        }
      }
    }
  });
  return {x.tape, id};
}

Var slice_cols(Var a, size_t j0, size_t j1) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || j1 > x.shape[1] || j0 >= j1)
    throw std::invalid_argument("slice_cols: bad range");
  size_t m = x.shape[0], n = x.shape[1], w = j1 - j0;
  Tensor out({m, w});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < w; ++j) out.data[i * w + j] = x.data[i * n + j0 + j];
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "slice_cols",
                        [pa, m, n, w, j0](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < w; ++j) ga.data[i * n + j0 + j] += g.data[i * w + j];
  });
  return {a.tape, id};
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  size_t m = parts[0].value().shape[0];
  size_t n = 0;
  std::vector<int> ids;
  std::vector<size_t> widths;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() != 2 || v.shape[0] != m)
      throw std::invalid_argument("concat_cols: row mismatch");
    n += v.shape[1];
    ids.push_back(p.id);
    widths.push_back(v.shape[1]);
  }
  Tensor out({m, n});
  size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    size_t w = v.shape[1];
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < w; ++j) out.data[i * n + off + j] = v.data[i * w + j];
    off += w;
  }
  Tape* tp = parts[0].tape;
  int id = tp->push(std::move(out), ids, "concat_cols",
                    [ids, widths, m, n](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    size_t off2 = 0;
    for (size_t pi = 0; pi < ids.size(); ++pi) {
      size_t w = widths[pi];
      if (t.requires(ids[pi])) {
        Tensor& gp = t.grad(ids[pi]);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < w; ++j)
            gp.data[i * w + j] += g.data[i * n + off2 + j];
      }
      off2 += w;
    }
  });
  return {tp, id};
}

Var add_rowvec(Var a, Var b) {
  check_same_tape(a, b, "add_rowvec");
  const Tensor& x = a.value();
  const Tensor& v = b.value();
  if (x.rank() != 2 || v.size() != x.shape[1])
    throw std::invalid_argument("add_rowvec: width mismatch");
  size_t m = x.shape[0], n = x.shape[1];
  Tensor out = x;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.data[i * n + j] += v.data[j];
  int pa = a.id, pb = b.id;
  int id = a.tape->push(std::move(out), {pa, pb}, "add_rowvec",
                        [pa, pb, m, n](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires(pa)) {
      Tensor& ga = t.grad(pa);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) gb.data[j] += g.data[i * n + j];
    }
  });
  return {a.tape, id};
}

namespace {

// shared implementation for the four row/col broadcast scalings
Var broadcast_vec(Var a, Var v, bool per_row, bool is_div, const char* name) {
  check_same_tape(a, v, name);
  const Tensor& x = a.value();
  const Tensor& w = v.value();
  if (x.rank() != 2) throw std::invalid_argument(std::string(name) + ": expects 2-D");
  size_t m = x.shape[0], n = x.shape[1];
  if (w.size() != (per_row ? m : n))
    throw std::invalid_argument(std::string(name) + ": vector length mismatch");
  Tensor out = x;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      double s = w.data[per_row ? i : j];
      out.data[i * n + j] = is_div ? out.data[i * n + j] / s : out.data[i * n + j] * s;
    }
  int pa = a.id, pv = v.id;
  int id = a.tape->push(std::move(out), {pa, pv}, name,
                        [pa, pv, m, n, per_row, is_div](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& x2 = t.val(pa);
    const Tensor& w2 = t.val(pv);
    if (t.requires(pa)) {
      Tensor& ga = t.grad(pa);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
          double s = w2.data[per_row ? i : j];
          ga.data[i * n + j] += is_div ? g.data[i * n + j] / s : g.data[i * n + j] * s;
        }
    }
    if (t.requires(pv)) {
      Tensor& gv = t.grad(pv);
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
          size_t k = per_row ? i : j;
          double s = w2.data[k];
          if (is_div)
            gv.data[k] -= g.data[i * n + j] * x2.data[i * n + j] / (s * s);
          else
            gv.data[k] += g.data[i * n + j] * x2.data[i * n + j];
        }
    }
  });
  return {a.tape, id};
}

}  // namespace

Var mul_colvec(Var a, Var v) { return broadcast_vec(a, v, true, false, "mul_colvec"); }
Var div_colvec(Var a, Var v) { return broadcast_vec(a, v, true, true, "div_colvec"); }
Var mul_rowvec(Var a, Var v) { return broadcast_vec(a, v, false, false, "mul_rowvec"); }
Var div_rowvec(Var a, Var v) { return broadcast_vec(a, v, false, true, "div_rowvec"); }

Var reshape(Var a, std::vector<size_t> shape) {
  const Tensor& x = a.value();
  if (Tensor::numel(shape) != x.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out;
  out.shape = shape;
  out.data = x.data;
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "reshape", [pa](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
  });
  return {a.tape, id};
}

Var detach(Var a) {
  Tensor out = a.value();
  int id = a.tape->push(std::move(out), {}, "detach", nullptr);
  return {a.tape, id};
}

Var concat_channels(Var a, Var b) {
  check_same_tape(a, b, "concat_channels");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 3 || y.rank() != 3 || x.shape[1] != y.shape[1] ||
      x.shape[2] != y.shape[2])
    throw std::invalid_argument("concat_channels: spatial mismatch");
  size_t c1 = x.shape[0], c2 = y.shape[0], h = x.shape[1], w = x.shape[2];
  Tensor out({c1 + c2, h, w});
  std::copy(x.data.begin(), x.data.end(), out.data.begin());
  std::copy(y.data.begin(), y.data.end(), out.data.begin() + x.size());
  int pa = a.id, pb = b.id;
  size_t na = x.size();
  int id = a.tape->push(std::move(out), {pa, pb}, "concat_channels",
                        [pa, pb, na](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires(pa)) {
      Tensor& ga = t.grad(pa);
      for (size_t i = 0; i < na; ++i) ga.data[i] += g.data[i];
    }
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);
      for (size_t i = 0; i < gb.size(); ++i) gb.data[i] += g.data[na + i];
    }
  });
  return {a.tape, id};
}

Var chw_to_tokens(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 3) throw std::invalid_argument("chw_to_tokens: expects 3-D");
  size_t c = x.shape[0], h = x.shape[1], w = x.shape[2], hw = h * w;
  Tensor out({hw, c});
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t p = 0; p < hw; ++p) out.data[p * c + ch] = x.data[ch * hw + p];
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "chw_to_tokens",
                        [pa, c, hw](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t p = 0; p < hw; ++p) ga.data[ch * hw + p] += g.data[p * c + ch];
  });
  return {a.tape, id};
}

Var tokens_to_chw(Var a, size_t c, size_t h, size_t w) {
  const Tensor& x = a.value();
  if (x.rank() != 2 || x.shape[0] != h * w || x.shape[1] != c)
    throw std::invalid_argument("tokens_to_chw: shape mismatch");
  size_t hw = h * w;
  Tensor out({c, h, w});
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t p = 0; p < hw; ++p) out.data[ch * hw + p] = x.data[p * c + ch];
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "tokens_to_chw",
                        [pa, c, hw](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t p = 0; p < hw; ++p) ga.data[p * c + ch] += g.data[ch * hw + p];
  });
  return {a.tape, id};
}

Var upsample2x(Var a) {
  const Tensor& x = a.value();
  if (x.rank() != 3) throw std::invalid_argument("upsample2x: expects 3-D");
  size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
  Tensor out({c, 2 * h, 2 * w});
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < h; ++i)
      for (size_t j = 0; j < w; ++j) {
        double v = x.data[(ch * h + i) * w + j];
        size_t base = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
        out.data[base] = v;
        out.data[base + 1] = v;
        out.data[base + 2 * w] = v;
        out.data[base + 2 * w + 1] = v;
      }
  int pa = a.id;
  int id = a.tape->push(std::move(out), {pa}, "upsample2x",
                        [pa, c, h, w](Tape& t, int self) {
    if (!t.requires(pa)) return;
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(pa);
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t i = 0; i < h; ++i)
        for (size_t j = 0; j < w; ++j) {
          size_t base = (ch * 2 * h + 2 * i) * 2 * w + 2 * j;
          ga.data[(ch * h + i) * w + j] += g.data[base] + g.data[base + 1] +
                                           g.data[base + 2 * w] +
                                           g.data[base + 2 * w + 1];
        }
  });
  return {a.tape, id};
}

Var add_chan_bias(Var x, Var b) {
  check_same_tape(x, b, "add_chan_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 3 || bv.size() != xv.shape[0])
    throw std::invalid_argument("add_chan_bias: channel mismatch");
  size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
  Tensor out = xv;
  for (size_t ch = 0; ch < c; ++ch)
    for (size_t p = 0; p < hw; ++p) out.data[ch * hw + p] += bv.data[ch];
  int px = x.id, pb = b.id;
  int id = x.tape->push(std::move(out), {px, pb}, "add_chan_bias",
                        [px, pb, c, hw](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (t.requires(px)) {
      Tensor& gx = t.grad(px);
      for (size_t i = 0; i < g.size(); ++i) gx.data[i] += g.data[i];
    }
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);
      for (size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (size_t p = 0; p < hw; ++p) s += g.data[ch * hw + p];
        gb.data[ch] += s;
      }
    }
  });
  return {x.tape, id};
}

Var embedding_rows(Var table, const std::vector<int>& ids) {
  const Tensor& tb = table.value();
  if (tb.rank() != 2) throw std::invalid_argument("embedding_rows: table must be 2-D");
  size_t v = tb.shape[0], d = tb.shape[1];
  for (int idx : ids)
    if (idx < 0 || static_cast<size_t>(idx) >= v)
      throw std::invalid_argument("embedding_rows: id " + std::to_string(idx) +
                                  " outside table of " + std::to_string(v));
  Tensor out({ids.size(), d});
  for (size_t i = 0; i < ids.size(); ++i)
    for (size_t j = 0; j < d; ++j) out.data[i * d + j] = tb.data[ids[i] * d + j];
  int pt = table.id;
  std::vector<int> ids_copy = ids;
  int id = table.tape->push(std::move(out), {pt}, "embedding_rows",
                            [pt, ids_copy, d](Tape& t, int self) {
    if (!t.requires(pt)) return;
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad(pt);
    for (size_t i = 0; i < ids_copy.size(); ++i)
      for (size_t j = 0; j < d; ++j)
        gt.data[ids_copy[i] * d + j] += g.data[i * d + j];
  });
  return {table.tape, id};
}

Var conv2d(Var x, Var w, Var b, int stride) {
  check_same_tape(x, w, "conv2d");
  check_same_tape(x, b, "conv2d");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.shape[2] != 3 || wv.shape[3] != 3)
    throw std::invalid_argument("conv2d: expects (C,H,W) input and (Co,Ci,3,3) kernel");
  if (wv.shape[1] != xv.shape[0])
    throw std::invalid_argument("conv2d: input channel mismatch");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  size_t ci = xv.shape[0], h = xv.shape[1], wd = xv.shape[2];
  size_t co = wv.shape[0];
  if (bv.size() != co) throw std::invalid_argument("conv2d: bias size mismatch");
  size_t oh = (h + stride - 1) / stride, ow = (wd + stride - 1) / stride;
  Tensor out({co, oh, ow});
  for (size_t oc = 0; oc < co; ++oc) {
    double* oplane = &out.data[oc * oh * ow];
    for (size_t p = 0; p < oh * ow; ++p) oplane[p] = bv.data[oc];
    for (size_t ic = 0; ic < ci; ++ic) {
      const double* xplane = &xv.data[ic * h * wd];
      const double* kern = &wv.data[(oc * ci + ic) * 9];
      for (size_t oi = 0; oi < oh; ++oi) {
        long ih0 = static_cast<long>(oi) * stride - 1;
        for (int kh = 0; kh < 3; ++kh) {
          long ih = ih0 + kh;
          if (ih < 0 || ih >= static_cast<long>(h)) continue;
          const double* xrow = xplane + ih * wd;
          double* orow = oplane + oi * ow;
          for (int kw = 0; kw < 3; ++kw) {
            double kv = kern[kh * 3 + kw];
            if (kv == 0.0) continue;
            long off = kw - 1;
            if (stride == 1) {
              size_t j0 = off < 0 ? 1 : 0;
              size_t j1 = off > 0 ? ow - 1 : ow;
              const double* xr = xrow + off;
              for (size_t oj = j0; oj < j1; ++oj) orow[oj] += kv * xr[oj];
            } else {
              for (size_t oj = 0; oj < ow; ++oj) {
                long iw = static_cast<long>(oj) * 2 + off;
                if (iw >= 0 && iw < static_cast<long>(wd)) orow[oj] += kv * xrow[iw];
              }
            }
          }
        }
      }
    }
  }
  int px = x.id, pw = w.id, pb = b.id;
  int id = x.tape->push(std::move(out), {px, pw, pb}, "conv2d",
                        [px, pw, pb, ci, co, h, wd, oh, ow, stride](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv2 = t.val(px);
    const Tensor& wv2 = t.val(pw);
    if (t.requires(pb)) {
      Tensor& gb = t.grad(pb);
      for (size_t oc = 0; oc < co; ++oc) {
        double s = 0.0;
        const double* gp = &g.data[oc * oh * ow];
        for (size_t p = 0; p < oh * ow; ++p) s += gp[p];
        gb.data[oc] += s;
      }
    }
    if (t.requires(pw)) {
      Tensor& gw = t.grad(pw);
      for (size_t oc = 0; oc < co; ++oc)
        for (size_t ic = 0; ic < ci; ++ic) {
          const double* xplane = &xv2.data[ic * h * wd];
          double* gk = &gw.data[(oc * ci + ic) * 9];
          const double* gplane = &g.data[oc * oh * ow];
          for (int kh = 0; kh < 3; ++kh)
            for (int kw = 0; kw < 3; ++kw) {
              double acc = 0.0;
              for (size_t oi = 0; oi < oh; ++oi) {
                long ih = static_cast<long>(oi) * stride - 1 + kh;
                if (ih < 0 || ih >= static_cast<long>(h)) continue;
                const double* xrow = xplane + ih * wd;
                const double* grow = gplane + oi * ow;
                for (size_t oj = 0; oj < ow; ++oj) {
                  long iw = static_cast<long>(oj) * stride - 1 + kw;
                  if (iw >= 0 && iw < static_cast<long>(wd))
                    acc += grow[oj] * xrow[iw];
                }
              }
              gk[kh * 3 + kw] += acc;
            }
        }
    }
    if (t.requires(px)) {
      Tensor& gx = t.grad(px);
      for (size_t oc = 0; oc < co; ++oc) {
        const double* gplane = &g.data[oc * oh * ow];
        for (size_t ic = 0; ic < ci; ++ic) {
          double* gxp = &gx.data[ic * h * wd];
          const double* kern = &wv2.data[(oc * ci + ic) * 9];
          for (size_t oi = 0; oi < oh; ++oi) {
            const double* grow = gplane + oi * ow;
            for (int kh = 0; kh < 3; ++kh) {
              long ih = static_cast<long>(oi) * stride - 1 + kh;
              if (ih < 0 || ih >= static_cast<long>(h)) continue;
              double* gxrow = gxp + ih * wd;
              for (int kw = 0; kw < 3; ++kw) {
                double kv = kern[kh * 3 + kw];
                if (kv == 0.0) continue;
                for (size_t oj = 0; oj < ow; ++oj) {
                  long iw = static_cast<long>(oj) * stride - 1 + kw;
                  if (iw >= 0 && iw < static_cast<long>(wd)) gxrow[iw] += kv * grow[oj];
                }
              }
            }
          }
        }
      }
    }
  });
  return {x.tape, id};
}

}  // namespace avse
