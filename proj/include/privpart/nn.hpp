#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "privpart/autodiff.hpp"
#include "privpart/rng.hpp"
#include "privpart/tensor.hpp"

namespace privpart {

enum class Activation { none, relu, sigmoid, tanh };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

enum class Mode { train, eval };

// One layer of a feed-forward stack. Shapes below are per sample; the batch
// dimension is prepended at forward time.
struct LayerSpec {
  enum class Kind { dense, conv2d, deconv2d, maxpool2d, conv1d, dropout, flatten };

  Kind kind = Kind::dense;
  size_t units = 0;     // dense output width
  size_t channels = 0;  // conv2d / deconv2d output channels
  size_t kernel = 0;
  size_t stride = 1;
  size_t pad = 0;
  double rate = 0.0;  // dropout probability
  Activation act = Activation::none;

  static LayerSpec dense(size_t units, Activation act) {
    LayerSpec l;
    l.kind = Kind::dense;
    l.units = units;
    l.act = act;
    return l;
  }
  static LayerSpec conv2d(size_t channels, size_t kernel, size_t stride,
                          size_t pad, Activation act) {
    LayerSpec l;
    l.kind = Kind::conv2d;
    l.channels = channels;
    l.kernel = kernel;
    l.stride = stride;
    l.pad = pad;
    l.act = act;
    return l;
  }
  static LayerSpec deconv2d(size_t channels, size_t kernel, size_t stride,
                            size_t pad, Activation act) {
    LayerSpec l = conv2d(channels, kernel, stride, pad, act);
    l.kind = Kind::deconv2d;
    return l;
  }
  static LayerSpec maxpool2d(size_t kernel, size_t stride) {
    LayerSpec l;
    l.kind = Kind::maxpool2d;
    l.kernel = kernel;
    l.stride = stride;
    return l;
  }
  static LayerSpec conv1d(size_t kernel, size_t stride, size_t pad,
                          Activation act) {
    LayerSpec l;
    l.kind = Kind::conv1d;
    l.kernel = kernel;
    l.stride = stride;
    l.pad = pad;
    l.act = act;
    return l;
  }
  static LayerSpec dropout(double rate) {
    LayerSpec l;
    l.kind = Kind::dropout;
    l.rate = rate;
    return l;
  }
  static LayerSpec flatten() {
    LayerSpec l;
    l.kind = Kind::flatten;
    return l;
  }

  const char* kind_name() const {
    switch (kind) {
      case Kind::dense: return "dense";
      case Kind::conv2d: return "conv2d";
      case Kind::deconv2d: return "deconv2d";
      case Kind::maxpool2d: return "maxpool2d";
      case Kind::conv1d: return "conv1d";
      case Kind::dropout: return "dropout";
      case Kind::flatten: return "flatten";
    }
    return "?";
  }
};

// Named parameter tensors in a stable (layer) order.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name); }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return tensors_[it->second];
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  const std::vector<std::string>& names() const { return names_; }
  size_t count() const { return names_.size(); }
  bool empty() const { return names_.empty(); }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  void clear() {
    names_.clear();
    tensors_.clear();
    index_.clear();
  }

  // Copies of ParamStore share tensor buffers (Tensor is a shared handle);
  // snapshots for checkpointing must deep-clone so in-place optimizer writes
  // cannot reach them.
  ParamStore deep_clone() const {
    ParamStore out;
    for (size_t i = 0; i < names_.size(); ++i)
      out.add(names_[i], tensors_[i].clone());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, size_t> index_;
};

// Feed-forward network: an input shape plus a layer stack. Construction
// propagates per-sample shapes through every layer and rejects geometry that
// does not compose, naming the offending layer.
template <typename T>
class Network {
 public:
  struct TapeForward {
    Var output;
    std::vector<std::pair<std::string, Var>> params;
  };

  Network() = default;

  Network(Shape input_shape, std::vector<LayerSpec> specs)
      : input_shape_(std::move(input_shape)), specs_(std::move(specs)) {
    Shape cur = input_shape_;
    for (size_t i = 0; i < specs_.size(); ++i) {
      cur = propagate(cur, specs_[i], i);
      shapes_.push_back(cur);
    }
  }

  const Shape& input_shape() const { return input_shape_; }
  Shape output_shape() const {
    return shapes_.empty() ? input_shape_ : shapes_.back();
  }
  // Per-sample shape after layer i.
  const std::vector<Shape>& layer_shapes() const { return shapes_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }
  size_t layer_count() const { return specs_.size(); }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Walks (name, shape, fan_in) for every parameter the spec defines, in
  // layer order; biases report fan_in 0.
  template <typename Fn>
  void for_each_param_shape(Fn&& fn) const {
    Shape cur = input_shape_;
    for (size_t i = 0; i < specs_.size(); ++i) {
      const LayerSpec& l = specs_[i];
      switch (l.kind) {
        case LayerSpec::Kind::dense: {
          const size_t fan_in = shape_numel(cur);
          fn(weight_name(i), Shape{fan_in, l.units}, fan_in);
          fn(bias_name(i), Shape{l.units}, size_t{0});
          break;
        }
        case LayerSpec::Kind::conv2d:
          fn(weight_name(i), Shape{l.channels, cur[0], l.kernel, l.kernel},
             cur[0] * l.kernel * l.kernel);
          fn(bias_name(i), Shape{l.channels}, size_t{0});
          break;
        case LayerSpec::Kind::deconv2d:
          fn(weight_name(i), Shape{cur[0], l.channels, l.kernel, l.kernel},
             l.channels * l.kernel * l.kernel);
          fn(bias_name(i), Shape{l.channels}, size_t{0});
          break;
        case LayerSpec::Kind::conv1d:
          fn(weight_name(i), Shape{l.kernel}, l.kernel);
          fn(bias_name(i), Shape{1}, size_t{0});
          break;
        default: break;
      }
      cur = propagate(cur, l, i);
    }
  }

  // Kaiming-uniform weights, zero biases. Weight draws consume the rng in
  // layer order so a seed pins the whole initialization.
  void init_params(Rng& rng) {
    params_.clear();
    for_each_param_shape([&](const std::string& name, Shape shape,
                             size_t fan_in) {
      params_.add(name, fan_in ? kaiming(std::move(shape), fan_in, rng)
                               : Tensor<T>(shape));
    });
  }

  // Checks that the store holds exactly the parameters the spec defines.
  void validate_params() const {
    size_t expected = 0;
    for_each_param_shape([&](const std::string& name, Shape shape, size_t) {
      ++expected;
      if (!params_.contains(name))
        throw Error("missing parameter " + name);
      if (params_.at(name).shape() != shape)
        throw ShapeError("parameter " + name + " has shape " +
                         shape_str(params_.at(name).shape()) + ", expected " +
                         shape_str(shape));
    });
    if (expected != params_.count())
      throw Error("parameter store holds " + std::to_string(params_.count()) +
                  " tensors, spec defines " + std::to_string(expected));
  }

  // Forward through a caller-owned tape. with_grad marks parameters as
  // differentiable; dropout fires only in train mode and draws from rng.
  TapeForward forward_tape(Tape<T>& tape, Var x, Mode mode, Rng* rng,
                           bool with_grad) const {
    require_params();
    TapeForward out;
    Var cur = x;
    for (size_t i = 0; i < specs_.size(); ++i)
      cur = apply_layer(tape, cur, i, mode, rng, with_grad, &out.params);
    out.output = cur;
    return out;
  }

  // Plain evaluation reuses the tape ops with gradients off, so a value is
  // bitwise identical however it is computed.
  Tensor<T> forward(const Tensor<T>& x, Mode mode = Mode::eval,
                    Rng* rng = nullptr) const {
    Tape<T> tape;
    Var in = tape.constant(x);
    TapeForward f = forward_tape(tape, in, mode, rng, false);
    return tape.value(f.output).clone();
  }

  // Evaluation-mode activations after every layer.
  std::vector<Tensor<T>> forward_all(const Tensor<T>& x) const {
    require_params();
    Tape<T> tape;
    Var cur = tape.constant(x);
    std::vector<Tensor<T>> acts;
    for (size_t i = 0; i < specs_.size(); ++i) {
      cur = apply_layer(tape, cur, i, Mode::eval, nullptr, false, nullptr);
      acts.push_back(tape.value(cur).clone());
    }
    return acts;
  }

  static std::string weight_name(size_t layer) {
    return "L" + std::to_string(layer) + ".W";
  }
  static std::string bias_name(size_t layer) {
    return "L" + std::to_string(layer) + ".b";
  }

 private:
  static std::string layer_tag(size_t i, const LayerSpec& l) {
    return "layer " + std::to_string(i) + " (" + l.kind_name() + ")";
  }

  static size_t out_dim_checked(size_t in, const LayerSpec& l, size_t i) {
    try {
      return kernels::conv_out_dim(in, l.kernel, l.stride, l.pad);
    } catch (const ShapeError& e) {
      throw ShapeError(layer_tag(i, l) + ": " + e.what());
    }
  }

  static Shape propagate(const Shape& in, const LayerSpec& l, size_t i) {
    switch (l.kind) {
      case LayerSpec::Kind::dense:
        if (in.size() != 1)
          throw ShapeError(layer_tag(i, l) + ": needs a flat input, got " +
                           shape_str(in) + " (insert flatten)");
        if (l.units == 0) throw ShapeError(layer_tag(i, l) + ": zero units");
        return {l.units};
      case LayerSpec::Kind::conv2d: {
        if (in.size() != 3)
          throw ShapeError(layer_tag(i, l) + ": needs [C,H,W], got " +
                           shape_str(in));
        return {l.channels, out_dim_checked(in[1], l, i),
                out_dim_checked(in[2], l, i)};
      }
      case LayerSpec::Kind::deconv2d: {
        if (in.size() != 3)
          throw ShapeError(layer_tag(i, l) + ": needs [C,H,W], got " +
                           shape_str(in));
        const size_t gh = (in[1] - 1) * l.stride + l.kernel;
        const size_t gw = (in[2] - 1) * l.stride + l.kernel;
        if (gh <= 2 * l.pad || gw <= 2 * l.pad)
          throw ShapeError(layer_tag(i, l) + ": padding swallows the output");
        return {l.channels, gh - 2 * l.pad, gw - 2 * l.pad};
      }
      case LayerSpec::Kind::maxpool2d: {
        if (in.size() != 3)
          throw ShapeError(layer_tag(i, l) + ": needs [C,H,W], got " +
                           shape_str(in));
        if (in[1] < l.kernel || in[2] < l.kernel)
          throw ShapeError(layer_tag(i, l) + ": kernel exceeds input " +
                           shape_str(in));
        return {in[0], (in[1] - l.kernel) / l.stride + 1,
                (in[2] - l.kernel) / l.stride + 1};
      }
      case LayerSpec::Kind::conv1d:
        if (in.size() != 1)
          throw ShapeError(layer_tag(i, l) + ": needs a flat input, got " +
                           shape_str(in));
        return {out_dim_checked(in[0], l, i)};
      case LayerSpec::Kind::dropout:
        if (l.rate < 0.0 || l.rate >= 1.0)
          throw ShapeError(layer_tag(i, l) + ": rate must be in [0,1)");
        return in;
      case LayerSpec::Kind::flatten:
        return {shape_numel(in)};
    }
    throw Error("unreachable layer kind");
  }

  static Tensor<T> kaiming(Shape shape, size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (size_t i = 0; i < t.size(); ++i)
      t[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    return t;
  }

  void require_params() const {
    for (const LayerSpec& l : specs_)
      if (l.kind == LayerSpec::Kind::dense ||
          l.kind == LayerSpec::Kind::conv2d ||
          l.kind == LayerSpec::Kind::deconv2d ||
          l.kind == LayerSpec::Kind::conv1d) {
        if (params_.empty())
          throw Error("network has no parameters; call init_params or load");
        return;
      }
  }

  Var param_var(Tape<T>& tape, const std::string& name, bool with_grad,
                std::vector<std::pair<std::string, Var>>* pvars) const {
    Var v = tape.leaf(params_.at(name), with_grad);
    if (pvars) pvars->emplace_back(name, v);
    return v;
  }

  Var apply_layer(Tape<T>& tape, Var x, size_t i, Mode mode, Rng* rng,
                  bool with_grad,
                  std::vector<std::pair<std::string, Var>>* pvars) const {
    const LayerSpec& l = specs_[i];
    Var cur = x;
    switch (l.kind) {
      case LayerSpec::Kind::dense: {
        Var w = param_var(tape, weight_name(i), with_grad, pvars);
        Var b = param_var(tape, bias_name(i), with_grad, pvars);
        cur = tape.add_rowvec(tape.matmul(cur, w), b);
        break;
      }
      case LayerSpec::Kind::conv2d: {
        Var w = param_var(tape, weight_name(i), with_grad, pvars);
        Var b = param_var(tape, bias_name(i), with_grad, pvars);
        cur = tape.add_chanbias(tape.conv2d(cur, w, l.stride, l.pad), b);
        break;
      }
      case LayerSpec::Kind::deconv2d: {
        Var w = param_var(tape, weight_name(i), with_grad, pvars);
        Var b = param_var(tape, bias_name(i), with_grad, pvars);
        cur = tape.add_chanbias(tape.deconv2d(cur, w, l.stride, l.pad), b);
        break;
      }
      case LayerSpec::Kind::conv1d: {
        Var w = param_var(tape, weight_name(i), with_grad, pvars);
        Var b = param_var(tape, bias_name(i), with_grad, pvars);
        cur = tape.add_scalar_param(tape.conv1d(cur, w, l.stride, l.pad), b);
        break;
      }
      case LayerSpec::Kind::maxpool2d:
        cur = tape.maxpool2d(cur, l.kernel, l.stride);
        break;
      case LayerSpec::Kind::dropout:
        if (mode == Mode::train && l.rate > 0.0) {
          if (!rng) throw Error("dropout in train mode needs an rng");
          cur = tape.dropout(cur, l.rate, *rng);
        }
        break;
      case LayerSpec::Kind::flatten: {
        const Tensor<T>& v = tape.value(cur);
        cur = tape.reshape(cur, {v.dim(0), v.size() / v.dim(0)});
        break;
      }
    }
    switch (l.act) {
      case Activation::none: break;
      case Activation::relu: cur = tape.relu(cur); break;
      case Activation::sigmoid: cur = tape.sigmoid(cur); break;
      case Activation::tanh: cur = tape.tanh_(cur); break;
    }
    return cur;
  }

  Shape input_shape_;
  std::vector<LayerSpec> specs_;
  std::vector<Shape> shapes_;
  ParamStore<T> params_;
};

}  // namespace privpart
