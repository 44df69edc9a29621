#pragma once

// Parameter-owning layer wrappers over the functional ops, plus the LayerSpec
// shape algebra used to pin every declared stage output size in tests.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "convmpn/ops.hpp"
#include "convmpn/rng.hpp"
#include "convmpn/tensor.hpp"

namespace convmpn {

// Registry of named tensors for checkpointing and SGD. Buffers (batch-norm
// running stats) persist but are not touched by the optimizer.
template <class T>
struct ParamRegistry {
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
  };
  struct BufferEntry {
    std::string name;
    std::vector<T>* data = nullptr;
  };
  std::vector<Entry> params;
  std::vector<BufferEntry> buffers;

  void add(std::string name, Tensor<T> t) { params.push_back({std::move(name), std::move(t), true}); }
  void add_buffer(std::string name, std::vector<T>* v) { buffers.push_back({std::move(name), v}); }
};

// Kaiming fan-in normal init for conv/linear weights.
template <class T>
Tensor<T> kaiming_normal(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> data(static_cast<size_t>(numel_of(shape)));
  for (auto& v : data) v = static_cast<T>(rng.normal() * std);
  auto t = Tensor<T>::from(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

template <class T>
struct Conv2dLayer {
  Tensor<T> weight, bias;
  int stride = 1, padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int cin, int cout, int kernel, int stride_, int padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    weight = kaiming_normal<T>({cout, cin, kernel, kernel},
                               static_cast<std::int64_t>(cin) * kernel * kernel, rng);
    bias = Tensor<T>::zeros({cout});
    bias.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) {
    reg.add(prefix + ".weight", weight);
    reg.add(prefix + ".bias", bias);
  }
};

template <class T>
struct BatchNormLayer {
  Tensor<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormLayer() = default;
  explicit BatchNormLayer(int channels) {
    gamma = Tensor<T>::full({channels}, T(1));
    gamma.set_requires_grad(true);
    beta = Tensor<T>::zeros({channels});
    beta.set_requires_grad(true);
    running_mean.assign(static_cast<size_t>(channels), T(0));
    running_var.assign(static_cast<size_t>(channels), T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
    reg.add_buffer(prefix + ".running_mean", &running_mean);
    reg.add_buffer(prefix + ".running_var", &running_var);
  }
};

template <class T>
struct LinearLayer {
  Tensor<T> weight, bias;

  LinearLayer() = default;
  LinearLayer(int din, int dout, Rng& rng) {
    weight = kaiming_normal<T>({dout, din}, din, rng);
    bias = Tensor<T>::zeros({dout});
    bias.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) {
    reg.add(prefix + ".weight", weight);
    reg.add(prefix + ".bias", bias);
  }
};

// conv -> relu -> bn block, the repeated unit of both architecture tables.
template <class T>
struct ConvReluBn {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;

  ConvReluBn() = default;
  ConvReluBn(int cin, int cout, int kernel, int stride, int padding, Rng& rng)
      : conv(cin, cout, kernel, stride, padding, rng), bn(cout) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return bn.forward(relu(conv.forward(x)), training);
  }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) {
    conv.collect(prefix + ".conv", reg);
    bn.collect(prefix + ".bn", reg);
  }
};

template <class T>
struct FcReluBn {
  LinearLayer<T> fc;
  BatchNormLayer<T> bn;

  FcReluBn() = default;
  FcReluBn(int din, int dout, Rng& rng) : fc(din, dout, rng), bn(dout) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return bn.forward(relu(fc.forward(x)), training);
  }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) {
    fc.collect(prefix + ".fc", reg);
    bn.collect(prefix + ".bn", reg);
  }
};

// Two conv-relu-bn blocks with a skip connection; the skip is identity, or a
// 1x1 strided projection when the channel count or stride changes.
template <class T>
struct ResidualBlock {
  ConvReluBn<T> a, b;
  std::optional<Conv2dLayer<T>> proj;

  ResidualBlock() = default;
  ResidualBlock(int cin, int cout, int stride, Rng& rng)
      : a(cin, cout, 3, stride, 1, rng), b(cout, cout, 3, 1, 1, rng) {
    if (cin != cout || stride != 1) proj.emplace(cin, cout, 1, stride, 0, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    Tensor<T> h = b.forward(a.forward(x, training), training);
    Tensor<T> skip = proj ? proj->forward(x) : x;
    return add(h, skip);
  }

  void collect(const std::string& prefix, ParamRegistry<T>& reg) {
    a.collect(prefix + ".a", reg);
    b.collect(prefix + ".b", reg);
    if (proj) proj->collect(prefix + ".proj", reg);
  }
};

// ---------------------------------------------------------------------------
// LayerSpec: declarative shape algebra for architecture chains. Paddings are
// floor(kernel/2) throughout, the only assignment that meets every declared
// stage output size.

struct LayerSpec {
  enum class Kind { conv2d, batch_norm, relu, max_pool2d, linear, residual_block, concat_channels };
  Kind kind;
  int in_channels = 0, out_channels = 0;
  int kernel = 0, stride = 1, padding = 0;
  int window = 0;              // max_pool2d
  int d_in = 0, d_out = 0;     // linear
  int other_channels = 0;      // concat_channels

  static LayerSpec conv(int cin, int cout, int kernel, int stride) {
    LayerSpec s{Kind::conv2d};
    s.in_channels = cin;
    s.out_channels = cout;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = kernel / 2;
    return s;
  }
  static LayerSpec bn(int c) {
    LayerSpec s{Kind::batch_norm};
    s.in_channels = s.out_channels = c;
    return s;
  }
  static LayerSpec act() { return LayerSpec{Kind::relu}; }
  static LayerSpec pool(int window, int stride) {
    LayerSpec s{Kind::max_pool2d};
    s.window = window;
    s.stride = stride;
    return s;
  }
  static LayerSpec fc(int din, int dout) {
    LayerSpec s{Kind::linear};
    s.d_in = din;
    s.d_out = dout;
    return s;
  }
  static LayerSpec residual(int cin, int cout, int stride) {
    LayerSpec s{Kind::residual_block};
    s.in_channels = cin;
    s.out_channels = cout;
    s.kernel = 3;
    s.stride = stride;
    s.padding = 1;
    return s;
  }
  static LayerSpec concat(int other_channels) {
    LayerSpec s{Kind::concat_channels};
    s.other_channels = other_channels;
    return s;
  }

  // Shape excludes the batch axis: (C,H,W) for spatial stages, (D) after fc.
  Shape output_shape(const Shape& in) const {
    auto conv_dim = [](std::int64_t x, int k, int s, int p) {
      return (x + 2 * p - k) / s + 1;
    };
    switch (kind) {
      case Kind::conv2d:
        if (in.size() != 3 || in[0] != in_channels)
          op_error("LayerSpec", "conv2d expects (" + std::to_string(in_channels) +
                                    ",H,W), got " + shape_str(in));
        return {out_channels, conv_dim(in[1], kernel, stride, padding),
                conv_dim(in[2], kernel, stride, padding)};
      case Kind::batch_norm:
      case Kind::relu:
        return in;
      case Kind::max_pool2d:
        return {in[0], (in[1] - window) / stride + 1, (in[2] - window) / stride + 1};
      case Kind::linear: {
        if (numel_of(in) != d_in)
          op_error("LayerSpec", "linear expects " + std::to_string(d_in) +
                                    " inputs, got " + shape_str(in));
        return {d_out};
      }
      case Kind::residual_block: {
        Shape mid = conv(in_channels, out_channels, kernel, stride).output_shape(in);
        return conv(out_channels, out_channels, kernel, 1).output_shape(mid);
      }
      case Kind::concat_channels:
        return {in[0] + other_channels, in[1], in[2]};
    }
    return in;
  }
};

inline Shape compose_shapes(const std::vector<LayerSpec>& chain, Shape in) {
  for (const auto& s : chain) in = s.output_shape(in);
  return in;
}

}  // namespace convmpn
