#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "privpart/kernels.hpp"
#include "privpart/rng.hpp"
#include "privpart/tensor.hpp"

namespace privpart {

// Handle into a Tape. Only valid for the tape that produced it.
struct Var {
  uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

// Reverse-mode tape. The graph is built forward, so node ids are already a
// topological order; backward() walks ids from the loss down to zero and
// fires each node's rule exactly once. Ops never mutate an existing node's
// value, every result is a fresh node.
template <typename T>
class Tape {
 public:
  Var leaf(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }

  T scalar_value(Var v) const {
    const Tensor<T>& t = value(v);
    if (t.size() != 1) throw ShapeError("scalar_value: node is not scalar");
    return t[0];
  }

  // Accumulated gradient, or zeros if the node was never reached.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    return binary_map(
        a, b, "add", [](T x, T y) { return x + y; },
        [this](Tape&, const Tensor<T>& g, Var a, Var b) {
          accumulate(a, g);
          accumulate(b, g);
        });
  }

  Var sub(Var a, Var b) {
    return binary_map(
        a, b, "sub", [](T x, T y) { return x - y; },
        [this](Tape&, const Tensor<T>& g, Var a, Var b) {
          accumulate(a, g);
          Tensor<T> neg(g.shape());
          for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
          accumulate(b, neg);
        });
  }

  Var mul(Var a, Var b) {
    Tensor<T> av = value(a), bv = value(b);
    return binary_map(
        a, b, "mul", [](T x, T y) { return x * y; },
        [this, av, bv](Tape&, const Tensor<T>& g, Var a, Var b) {
          Tensor<T> ga(g.shape()), gb(g.shape());
          for (size_t i = 0; i < g.size(); ++i) {
            ga[i] = g[i] * bv[i];
            gb[i] = g[i] * av[i];
          }
          accumulate(a, ga);
          accumulate(b, gb);
        });
  }

  Var div(Var a, Var b) {
    Tensor<T> av = value(a), bv = value(b);
    return binary_map(
        a, b, "div", [](T x, T y) { return x / y; },
        [this, av, bv](Tape&, const Tensor<T>& g, Var a, Var b) {
          Tensor<T> ga(g.shape()), gb(g.shape());
          for (size_t i = 0; i < g.size(); ++i) {
            ga[i] = g[i] / bv[i];
            gb[i] = -g[i] * av[i] / (bv[i] * bv[i]);
          }
          accumulate(a, ga);
          accumulate(b, gb);
        });
  }

  Var scale(Var a, T c) {
    return unary_map(
        a, [c](T x) { return x * c; },
        [this, c](Tape&, const Tensor<T>& g, Var a) {
          Tensor<T> ga(g.shape());
          for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
          accumulate(a, ga);
        });
  }

  Var add_scalar(Var a, T c) {
    return unary_map(
        a, [c](T x) { return x + c; },
        [this](Tape&, const Tensor<T>& g, Var a) { accumulate(a, g); });
  }

  Var relu(Var a) {
    Tensor<T> av = value(a);
    return unary_map(
        a, [](T x) { return x > T{} ? x : T{}; },
        [this, av](Tape&, const Tensor<T>& g, Var a) {
          Tensor<T> ga(g.shape());
          for (size_t i = 0; i < g.size(); ++i)
            ga[i] = av[i] > T{} ? g[i] : T{};
          accumulate(a, ga);
        });
  }

  Var sigmoid(Var a) {
    Tensor<T> out(value(a).shape());
    const Tensor<T>& av = value(a);
    for (size_t i = 0; i < av.size(); ++i)
      out[i] = T(1) / (T(1) + std::exp(-av[i]));
    Tensor<T> saved = out;
    return push_op(
        std::move(out), {a},
        [this, saved](Tape&, const Tensor<T>& g, const std::vector<Var>& in) {
          Tensor<T> ga(g.shape());
          for (size_t i = 0; i < g.size(); ++i)
            ga[i] = g[i] * saved[i] * (T(1) - saved[i]);
          accumulate(in[0], ga);
        });
  }

  Var tanh_(Var a) {
    Tensor<T> out(value(a).shape());
    const Tensor<T>& av = value(a);
    for (size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
    Tensor<T> saved = out;
    return push_op(
        std::move(out), {a},
        [this, saved](Tape&, const Tensor<T>& g, const std::vector<Var>& in) {
          Tensor<T> ga(g.shape());
          for (size_t i = 0; i < g.size(); ++i)
            ga[i] = g[i] * (T(1) - saved[i] * saved[i]);
          accumulate(in[0], ga);
        });
  }

  // Inverted dropout; the mask already carries the 1/(1-p) scale.
  Var dropout(Var a, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0)
      throw Error("dropout: p must be in [0,1), got " + std::to_string(p));
    const Tensor<T>& av = value(a);
    Tensor<T> mask(av.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    for (size_t i = 0; i < mask.size(); ++i)
      mask[i] = (rng.uniform() < p) ? T{} : keep_scale;
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * mask[i];
    return push_op(
        std::move(out), {a},
        [this, mask](Tape&, const Tensor<T>& g, const std::vector<Var>& in) {
          Tensor<T> ga(g.shape());
          for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * mask[i];
          accumulate(in[0], ga);
        });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    Tensor<T> av = value(a), bv = value(b);
    Tensor<T> out = kernels::matmul(av, bv);
    return push_op(
        std::move(out), {a, b},
        [this, av, bv](Tape&, const Tensor<T>& g, const std::vector<Var>& in) {
          accumulate(in[0], kernels::matmul_grad_a(g, bv));
          accumulate(in[1], kernels::matmul_grad_b(av, g));
        });
  }

  // x[m x n] + row vector b[n].
  Var add_rowvec(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 1 || av.dim(1) != bv.dim(0))
      throw ShapeError("add_rowvec: " + shape_str(av.shape()) + " vs " +
                       shape_str(bv.shape()));
    const size_t m = av.dim(0), n = av.dim(1);
    Tensor<T> out({m, n});
    for (size_t r = 0; r < m; ++r)
      for (size_t c = 0; c < n; ++c) out[r * n + c] = av[r * n + c] + bv[c];
    return push_op(
        std::move(out), {a, b},
        [this, m, n](Tape&, const Tensor<T>& g, const std::vector<Var>& in) {
          accumulate(in[0], g);
          Tensor<T> gb({n});
          for (size_t r = 0; r < m; ++r)
            for (size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
          accumulate(in[1], gb);
        });
  }

  // x[N,C,H,W] + per-channel bias b[C].
  Var add_chanbias(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (av.rank() != 4 || bv.rank() != 1 || av.dim(1) != bv.dim(0))
      throw ShapeError("add_chanbias: " + shape_str(av.shape()) + " vs " +
                       shape_str(bv.shape()));
    const size_t batch = av.dim(0), ch = av.dim(1),
                 hw = av.dim(2) * av.dim(3);
    Tensor<T> out(av.shape());
    for (size_t nth = 0; nth < batch; ++nth)
      for (size_t c = 0; c < ch; ++c)
        for (size_t i = 0; i < hw; ++i)
          out[(nth * ch + c) * hw + i] = av[(nth * ch + c) * hw + i] + bv[c];
    return push_op(
        std::move(out), {a, b},
        [this, batch, ch, hw](Tape&, const Tensor<T>& g,
                              const std::vector<Var>& in) {
          accumulate(in[0], g);
          Tensor<T> gb({ch});
          for (size_t nth = 0; nth < batch; ++nth)
            for (size_t c = 0; c < ch; ++c)
              for (size_t i = 0; i < hw; ++i)
                gb[c] += g[(nth * ch + c) * hw + i];
          accumulate(in[1], gb);
        });
  }

  // Scalar-parameter bias b[1] broadcast over all elements.
  Var add_scalar_param(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (bv.size() != 1) throw ShapeError("add_scalar_param: bias must be [1]");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[0];
    return push_op(
        std::move(out), {a, b},
        [this](Tape&, const Tensor<T>& g, const std::vector<Var>& in) {
          accumulate(in[0], g);
          Tensor<T> gb({1});
          for (size_t i = 0; i < g.size(); ++i) gb[0] += g[i];
          accumulate(in[1], gb);
        });
  }

  // ---- convolution / pooling ----

  Var conv2d(Var x, Var w, size_t stride, size_t pad) {
    Tensor<T> xv = value(x), wv = value(w);
    Tensor<T> out = kernels::conv2d(xv, wv, stride, pad);
    const size_t in_h = xv.dim(2), in_w = xv.dim(3), kernel = wv.dim(2);
    return push_op(
        std::move(out), {x, w},
        [this, xv, wv, stride, pad, in_h, in_w, kernel](
            Tape&, const Tensor<T>& g, const std::vector<Var>& in) {
          if (requires_grad(in[0]))
            accumulate(in[0], kernels::conv2d_grad_input(g, wv, stride, pad,
                                                         in_h, in_w));
          if (requires_grad(in[1]))
            accumulate(in[1],
                       kernels::conv2d_grad_weight(xv, g, stride, pad, kernel));
        });
  }

  // Transposed convolution: the adjoint of conv2d with the same geometry.
  // Weight layout [Cin, Cout, K, K]; output dim = (in-1)*stride + k - 2*pad.
  Var deconv2d(Var x, Var w, size_t stride, size_t pad) {
    Tensor<T> xv = value(x), wv = value(w);
    if (xv.rank() != 4 || wv.rank() != 4)
      throw ShapeError("deconv2d: expected NCHW input and IOKK weight");
    if (xv.dim(1) != wv.dim(0))
      throw ShapeError("deconv2d: input channels " + std::to_string(xv.dim(1)) +
                       " != weight in-channels " + std::to_string(wv.dim(0)));
    const size_t kernel = wv.dim(2);
    const size_t out_h = deconv_out_dim(xv.dim(2), kernel, stride, pad);
    const size_t out_w = deconv_out_dim(xv.dim(3), kernel, stride, pad);
    Tensor<T> out = kernels::conv2d_grad_input(xv, wv, stride, pad, out_h, out_w);
    return push_op(
        std::move(out), {x, w},
        [this, xv, wv, stride, pad, kernel](Tape&, const Tensor<T>& g,
                                            const std::vector<Var>& in) {
          if (requires_grad(in[0]))
            accumulate(in[0], kernels::conv2d(g, wv, stride, pad));
          if (requires_grad(in[1]))
            accumulate(in[1],
                       kernels::conv2d_grad_weight(g, xv, stride, pad, kernel));
        });
  }

  Var conv1d(Var x, Var w, size_t stride, size_t pad) {
    Tensor<T> xv = value(x), wv = value(w);
    Tensor<T> out = kernels::conv1d(xv, wv, stride, pad);
    const size_t len = xv.dim(1), kernel = wv.dim(0);
    return push_op(
        std::move(out), {x, w},
        [this, xv, wv, stride, pad, len, kernel](Tape&, const Tensor<T>& g,
                                                 const std::vector<Var>& in) {
          if (requires_grad(in[0]))
            accumulate(in[0],
                       kernels::conv1d_grad_input(g, wv, stride, pad, len));
          if (requires_grad(in[1]))
            accumulate(in[1],
                       kernels::conv1d_grad_weight(xv, g, stride, pad, kernel));
        });
  }

  Var maxpool2d(Var x, size_t kernel, size_t stride) {
    std::vector<uint32_t> argmax;
    Tensor<T> out = kernels::maxpool2d(value(x), kernel, stride, &argmax);
    const Shape in_shape = value(x).shape();
    return push_op(
        std::move(out), {x},
        [this, argmax = std::move(argmax), in_shape](
            Tape&, const Tensor<T>& g, const std::vector<Var>& in) {
          Tensor<T> gx(in_shape);
          for (size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
          accumulate(in[0], gx);
        });
  }

  // ---- shape / reduction ----

  Var reshape(Var a, Shape shape) {
    const Shape from = value(a).shape();
    Tensor<T> out = value(a).reshaped(std::move(shape));
    return push_op(std::move(out), {a},
                   [this, from](Tape&, const Tensor<T>& g,
                                const std::vector<Var>& in) {
                     accumulate(in[0], g.reshaped(from));
                   });
  }

  Var sum(Var a) {
    const Tensor<T>& av = value(a);
    T acc{};
    for (size_t i = 0; i < av.size(); ++i) acc += av[i];
    const Shape from = av.shape();
    return push_op(Tensor<T>::scalar(acc), {a},
                   [this, from](Tape&, const Tensor<T>& g,
                                const std::vector<Var>& in) {
                     accumulate(in[0], Tensor<T>::full(from, g[0]));
                   });
  }

  Var mean(Var a) {
    const Tensor<T>& av = value(a);
    if (av.size() == 0) throw ShapeError("mean: empty tensor");
    T acc{};
    for (size_t i = 0; i < av.size(); ++i) acc += av[i];
    const Shape from = av.shape();
    const T inv_n = T(1) / static_cast<T>(av.size());
    return push_op(Tensor<T>::scalar(acc * inv_n), {a},
                   [this, from, inv_n](Tape&, const Tensor<T>& g,
                                       const std::vector<Var>& in) {
                     accumulate(in[0], Tensor<T>::full(from, g[0] * inv_n));
                   });
  }

  // Mean softmax cross-entropy over the batch, stabilized by row-max
  // subtraction. Fused so the backward rule is (softmax - onehot)/m.
  Var cross_entropy(Var logits, const std::vector<int32_t>& labels) {
    const Tensor<T>& lv = value(logits);
    if (lv.rank() != 2) throw ShapeError("cross_entropy: logits must be 2-D");
    const size_t m = lv.dim(0), classes = lv.dim(1);
    if (labels.size() != m)
      throw ShapeError("cross_entropy: batch " + std::to_string(m) + " vs " +
                       std::to_string(labels.size()) + " labels");
    Tensor<T> softmax({m, classes});
    T loss{};
    for (size_t r = 0; r < m; ++r) {
      if (labels[r] < 0 || static_cast<size_t>(labels[r]) >= classes)
        throw Error("cross_entropy: label " + std::to_string(labels[r]) +
                    " out of range [0," + std::to_string(classes) + ")");
      T mx = lv[r * classes];
      for (size_t c = 1; c < classes; ++c) mx = std::max(mx, lv[r * classes + c]);
      T denom{};
      for (size_t c = 0; c < classes; ++c) {
        const T e = std::exp(lv[r * classes + c] - mx);
        softmax[r * classes + c] = e;
        denom += e;
      }
      for (size_t c = 0; c < classes; ++c) softmax[r * classes + c] /= denom;
      loss -= std::log(softmax[r * classes + labels[r]]);
    }
    loss /= static_cast<T>(m);
    return push_op(
        Tensor<T>::scalar(loss), {logits},
        [this, softmax, labels, m, classes](Tape&, const Tensor<T>& g,
                                            const std::vector<Var>& in) {
          Tensor<T> gl({m, classes});
          const T s = g[0] / static_cast<T>(m);
          for (size_t r = 0; r < m; ++r)
            for (size_t c = 0; c < classes; ++c) {
              T v = softmax[r * classes + c];
              if (static_cast<size_t>(labels[r]) == c) v -= T(1);
              gl[r * classes + c] = v * s;
            }
          accumulate(in[0], gl);
        });
  }

  // ---- backward ----

  void backward(Var loss) {
    if (!loss.valid() || loss.id >= nodes_.size())
      throw Error("backward: invalid loss var");
    if (nodes_[loss.id].value.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(nodes_[loss.id].value.shape()));
    nodes_[loss.id].grad = Tensor<T>::scalar(T(1));
    for (uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad, n.inputs);
    }
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  void accumulate(Var v, const Tensor<T>& g) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g.clone();
      return;
    }
    for (size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

 private:
  using BackwardFn =
      std::function<void(Tape&, const Tensor<T>&, const std::vector<Var>&)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<Var> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  static size_t deconv_out_dim(size_t in, size_t kernel, size_t stride,
                               size_t pad) {
    const size_t grown = (in - 1) * stride + kernel;
    if (grown < 2 * pad)
      throw ShapeError("deconv2d: padding too large for geometry");
    return grown - 2 * pad;
  }

  Var push(Tensor<T> value, bool requires_grad, BackwardFn fn,
           std::vector<Var> inputs = {}) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return Var{static_cast<uint32_t>(nodes_.size() - 1)};
  }

  Var push_op(Tensor<T> value, std::vector<Var> inputs, BackwardFn fn) {
    bool req = false;
    for (Var v : inputs) req = req || nodes_.at(v.id).requires_grad;
    return push(std::move(value), req, req ? std::move(fn) : BackwardFn{},
                std::move(inputs));
  }

  template <typename FwdFn>
  Var unary_map(Var a, FwdFn fwd,
                std::function<void(Tape&, const Tensor<T>&, Var)> bwd) {
    const Tensor<T>& av = value(a);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return push_op(std::move(out), {a},
                   [bwd = std::move(bwd)](Tape& t, const Tensor<T>& g,
                                          const std::vector<Var>& in) {
                     bwd(t, g, in[0]);
                   });
  }

  template <typename FwdFn>
  Var binary_map(Var a, Var b, const char* what, FwdFn fwd,
                 std::function<void(Tape&, const Tensor<T>&, Var, Var)> bwd) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    require_same_shape(av, bv, what);
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return push_op(std::move(out), {a, b},
                   [bwd = std::move(bwd)](Tape& t, const Tensor<T>& g,
                                          const std::vector<Var>& in) {
                     bwd(t, g, in[0], in[1]);
                   });
  }

  std::vector<Node> nodes_;
};

}  // namespace privpart
