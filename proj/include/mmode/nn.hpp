#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "mmode/rng.hpp"
#include "mmode/tensor.hpp"

namespace mmode::nn {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
std::size_t count_params(const ParamList<T>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.tensor.numel();
  return n;
}

/// Deep copy of parameter values, in list order.
template <class T>
std::vector<std::vector<T>> snapshot(const ParamList<T>& ps) {
  std::vector<std::vector<T>> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

template <class T>
void restore(ParamList<T>& ps, const std::vector<std::vector<T>>& values) {
  if (values.size() != ps.size()) throw ShapeError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto d = ps[i].tensor.data();
    if (d.size() != values[i].size()) throw ShapeError("restore: size mismatch for " + ps[i].name);
    std::copy(values[i].begin(), values[i].end(), d.begin());
  }
}

template <class T>
Tensor<T> make_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <class T>
void init_uniform(Tensor<T>& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
}

template <class T>
void fill(Tensor<T>& t, T value) {
  for (auto& v : t.data()) v = value;
}

// ---------------------------------------------------------------- layers

template <class T>
struct Conv2d {
  Tensor<T> weight;  // [Cout, Cin, k, k]
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride_, std::size_t pad_,
         Rng& rng)
      : weight(make_param<T>({cout, cin, k, k})), stride(stride_), pad(pad_) {
    init_uniform(weight, std::sqrt(6.0 / static_cast<double>(cin * k * k)), rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, stride, pad); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
  }
};

template <class T>
struct Norm {
  Tensor<T> gamma, beta;

  Norm() = default;
  explicit Norm(std::size_t channels)
      : gamma(make_param<T>({channels})), beta(make_param<T>({channels})) {
    fill(gamma, T(1));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return instance_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

template <class T>
struct Dense {
  Tensor<T> weight;  // [Out, In]
  Tensor<T> bias;    // [Out]

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Rng& rng)
      : weight(make_param<T>({out, in})), bias(make_param<T>({out})) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    init_uniform(weight, bound, rng);
    init_uniform(bias, bound, rng);
  }

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return dense(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// Standard LSTM cell with gate order (input, forget, cell, output) and a
/// single weight matrix over the concatenation [x, h_prev].
template <class T>
struct LstmCell {
  Tensor<T> weight;  // [4H, In + H]
  Tensor<T> bias;    // [4H]
  std::size_t in = 0, hidden = 0;

  LstmCell() = default;
  LstmCell(std::size_t in_, std::size_t hidden_, Rng& rng)
      : weight(make_param<T>({4 * hidden_, in_ + hidden_})),
        bias(make_param<T>({4 * hidden_})), in(in_), hidden(hidden_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_));
    init_uniform(weight, bound, rng);
    init_uniform(bias, bound, rng);
  }

  struct State {
    Tensor<T> h, c;
  };

  State zero_state(std::size_t batch) const {
    return {Tensor<T>::zeros({batch, hidden}), Tensor<T>::zeros({batch, hidden})};
  }

  State operator()(const Tensor<T>& x, const State& prev) const {
    if (x.rank() != 2 || x.dim(1) != in)
      throw ShapeError("lstm_cell: input " + shape_str(x.shape()) + ", expected [B, " +
                       std::to_string(in) + "]");
    if (prev.h.rank() != 2 || prev.h.dim(0) != x.dim(0) || prev.h.dim(1) != hidden ||
        prev.c.shape() != prev.h.shape())
      throw ShapeError("lstm_cell: state shape mismatch");
    const auto gates = dense(concat_cols<T>({x, prev.h}), weight, bias);
    const auto i = sigmoid(slice_cols(gates, 0, hidden));
    const auto f = sigmoid(slice_cols(gates, hidden, hidden));
    const auto g = tanh(slice_cols(gates, 2 * hidden, hidden));
    const auto o = sigmoid(slice_cols(gates, 3 * hidden, hidden));
    auto c = add(mul(f, prev.c), mul(i, g));
    auto h = mul(o, tanh(c));
    return {std::move(h), std::move(c)};
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// ---------------------------------------------------------------- encoder

struct EncoderConfig {
  std::size_t in_channels = 1;
  std::size_t stem_width = 32;
  std::size_t stem_kernel = 7;
  std::size_t stem_stride = 2;
  bool stem_pool = true;  // 2x2 max pool after the stem
  std::vector<std::size_t> stage_widths{32, 64, 128, 256};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2, 2};
  std::size_t out_dim = 512;

  void validate() const {
    if (in_channels == 0 || stem_width == 0 || stem_kernel == 0 || stem_stride == 0 ||
        out_dim == 0)
      throw ArgumentError("encoder config: sizes must be positive");
    if (stage_widths.empty() || stage_widths.size() != blocks_per_stage.size())
      throw ArgumentError("encoder config: stage_widths and blocks_per_stage differ in length");
    for (auto b : blocks_per_stage)
      if (b == 0) throw ArgumentError("encoder config: every stage needs a block");
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// ResNet basic block: conv-norm-relu-conv-norm plus (projected) shortcut, relu.
template <class T>
struct BasicBlock {
  Conv2d<T> conv1, conv2;
  Norm<T> norm1, norm2;
  bool project = false;
  Conv2d<T> proj;
  Norm<T> proj_norm;

  BasicBlock() = default;
  BasicBlock(std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng)
      : conv1(cin, cout, 3, stride, 1, rng), conv2(cout, cout, 3, 1, 1, rng),
        norm1(cout), norm2(cout), project(stride != 1 || cin != cout) {
    if (project) {
      proj = Conv2d<T>(cin, cout, 1, stride, 0, rng);
      proj_norm = Norm<T>(cout);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = relu(norm1(conv1(x)));
    y = norm2(conv2(y));
    return relu(add(y, project ? proj_norm(proj(x)) : x));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    conv1.collect(prefix + ".conv1", out);
    norm1.collect(prefix + ".norm1", out);
    conv2.collect(prefix + ".conv2", out);
    norm2.collect(prefix + ".norm2", out);
    if (project) {
      proj.collect(prefix + ".proj", out);
      proj_norm.collect(prefix + ".proj_norm", out);
    }
  }
};

/// Small residual CNN: stem, residual stages, global average pool, dense to K.
/// Input [C, N, H, W]; output [N, K].
template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    stem_ = Conv2d<T>(cfg.in_channels, cfg.stem_width, cfg.stem_kernel, cfg.stem_stride,
                      cfg.stem_kernel / 2, rng);
    stem_norm_ = Norm<T>(cfg.stem_width);
    std::size_t cin = cfg.stem_width;
    for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s)
      for (std::size_t b = 0; b < cfg.blocks_per_stage[s]; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        blocks_.emplace_back(cin, cfg.stage_widths[s], stride, rng);
        block_names_.push_back("stage" + std::to_string(s) + ".block" + std::to_string(b));
        cin = cfg.stage_widths[s];
      }
    fc_ = Dense<T>(cin, cfg.out_dim, rng);
  }

  const EncoderConfig& config() const { return cfg_; }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(0) != cfg_.in_channels)
      throw ShapeError("encoder: expected " + std::to_string(cfg_.in_channels) +
                       " input channel(s), got input " + shape_str(x.shape()));
    auto y = relu(stem_norm_(stem_(x)));
    if (cfg_.stem_pool && y.dim(2) >= 2 && y.dim(3) >= 2) y = maxpool2d(y, 2, 2);
    for (const auto& b : blocks_) y = b(y);
    return fc_(global_avg_pool(y));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    stem_.collect(prefix + ".stem", out);
    stem_norm_.collect(prefix + ".stem_norm", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + "." + block_names_[i], out);
    fc_.collect(prefix + ".fc", out);
  }

  ParamList<T> params(const std::string& prefix = "encoder") const {
    ParamList<T> out;
    collect(prefix, out);
    return out;
  }

 private:
  EncoderConfig cfg_;
  Conv2d<T> stem_;
  Norm<T> stem_norm_;
  std::vector<BasicBlock<T>> blocks_;
  std::vector<std::string> block_names_;
  Dense<T> fc_;
};

/// Two dense layers with a ReLU between them.
template <class T>
struct Mlp2 {
  Dense<T> fc1, fc2;

  Mlp2() = default;
  Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
      : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(x))); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

}  // namespace mmode::nn
