#include "xplain/nnet.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>

namespace xplain::nnet {

Tensor to_batch(std::span<const imaging::ImageTensor> images) {
  if (images.empty()) throw Error(Errc::InvalidArgument, "empty batch");
  const int h = images.front().height;
  const int w = images.front().width;
  Tensor out(static_cast<int>(images.size()), 3, h, w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].height != h || images[n].width != w)
      throw Error(Errc::ShapeMismatch, "batch images differ in size");
    std::copy(images[n].data.begin(), images[n].data.end(), out.sample(static_cast<int>(n)).begin());
  }
  return out;
}

std::string_view layer_kind_name(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::Conv2d: return "Conv2d";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool2x2: return "MaxPool2x2";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Dense: return "Dense";
    case LayerKind::Dropout: return "Dropout";
    case LayerKind::Softmax: return "Softmax";
  }
  return "?";
}

LayerSpec LayerSpec::conv2d(std::string name, int out_channels, int kernel, int stride, int pad) {
  LayerSpec s;
  s.kind = LayerKind::Conv2d;
  s.name = std::move(name);
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  return s;
}

LayerSpec LayerSpec::relu(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::ReLU;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::maxpool(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::MaxPool2x2;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::flatten(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::Flatten;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::dense(std::string name, int units) {
  LayerSpec s;
  s.kind = LayerKind::Dense;
  s.name = std::move(name);
  s.units = units;
  return s;
}

LayerSpec LayerSpec::dropout(std::string name, double rate) {
  LayerSpec s;
  s.kind = LayerKind::Dropout;
  s.name = std::move(name);
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::softmax(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::Softmax;
  s.name = std::move(name);
  return s;
}

// -- network ------------------------------------------------------------------

namespace {

Shape3 infer_shape(const LayerSpec& s, const Shape3& in) {
  auto mismatch = [&](const std::string& why) {
    return Error(Errc::ShapeMismatch, "layer '" + s.name + "': " + why);
  };
  switch (s.kind) {
    case LayerKind::Conv2d: {
      if (s.out_channels < 1 || s.kernel < 1 || s.stride < 1 || s.pad < 0)
        throw Error(Errc::InvalidArgument, "layer '" + s.name + "': bad Conv2d parameters");
      const int h = (in.height + 2 * s.pad - s.kernel) / s.stride + 1;
      const int w = (in.width + 2 * s.pad - s.kernel) / s.stride + 1;
      if (in.height + 2 * s.pad < s.kernel || in.width + 2 * s.pad < s.kernel) throw mismatch("kernel exceeds input");
      return {s.out_channels, h, w};
    }
    case LayerKind::ReLU:
      return in;
    case LayerKind::Dropout:
      if (!(s.rate >= 0.0 && s.rate < 1.0))
        throw Error(Errc::InvalidArgument, "layer '" + s.name + "': dropout rate must be in [0,1)");
      return in;
    case LayerKind::MaxPool2x2:
      if (in.height < 2 || in.width < 2) throw mismatch("input smaller than 2x2");
      return {in.channels, in.height / 2, in.width / 2};
    case LayerKind::Flatten:
      return {in.channels * in.height * in.width, 1, 1};
    case LayerKind::Dense:
      if (s.units < 1) throw Error(Errc::InvalidArgument, "layer '" + s.name + "': Dense units must be >= 1");
      if (in.height != 1 || in.width != 1) throw mismatch("Dense expects a flattened input");
      return {s.units, 1, 1};
    case LayerKind::Softmax:
      if (in.height != 1 || in.width != 1) throw mismatch("Softmax expects a flattened input");
      return in;
  }
  throw mismatch("unknown layer kind");
}

}  // namespace

Network::Network(Shape3 input, std::vector<LayerSpec> layers, std::uint64_t seed)
    : input_(input), layers_(std::move(layers)) {
  if (input_.channels < 1 || input_.height < 1 || input_.width < 1)
    throw Error(Errc::InvalidArgument, "network input shape must be positive");
  std::set<std::string> names;
  Rng rng(seed);
  Shape3 cur = input_;
  for (const LayerSpec& s : layers_) {
    if (!names.insert(s.name).second) throw Error(Errc::InvalidArgument, "duplicate layer name '" + s.name + "'");
    LayerParams p;
    if (s.kind == LayerKind::Conv2d) {
      const int fan_in = cur.channels * s.kernel * s.kernel;
      const double limit = std::sqrt(6.0 / fan_in);
      p.weight.resize(static_cast<std::size_t>(s.out_channels) * fan_in);
      for (double& w : p.weight) w = rng.uniform(-limit, limit);
      p.bias.assign(static_cast<std::size_t>(s.out_channels), 0.0);
    }
    const Shape3 next = infer_shape(s, cur);
    if (s.kind == LayerKind::Dense) {
      const int fan_in = cur.channels;
      const double limit = std::sqrt(6.0 / fan_in);
      p.weight.resize(static_cast<std::size_t>(s.units) * fan_in);
      for (double& w : p.weight) w = rng.uniform(-limit, limit);
      p.bias.assign(static_cast<std::size_t>(s.units), 0.0);
    }
    params_.push_back(std::move(p));
    shapes_.push_back(next);
    cur = next;
  }
  frozen_.assign(layers_.size(), false);
}

int Network::num_outputs() const {
  if (shapes_.empty()) throw Error(Errc::InvalidArgument, "empty network");
  return shapes_.back().channels;
}

std::size_t Network::layer_index(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].name == name) return i;
  throw Error(Errc::UnknownLayerName, "no layer named '" + std::string(name) + "'");
}

std::optional<std::size_t> Network::last_conv() const {
  for (std::size_t i = layers_.size(); i-- > 0;)
    if (layers_[i].kind == LayerKind::Conv2d) return i;
  return std::nullopt;
}

std::optional<std::size_t> Network::softmax_index() const {
  if (!layers_.empty() && layers_.back().kind == LayerKind::Softmax) return layers_.size() - 1;
  return std::nullopt;
}

// -- layer kernels ------------------------------------------------------------

namespace {

struct Span1 {
  int lo;
  int hi;
};

// Output positions o in [lo, hi) whose source index o*stride + tap - pad is in [0, in).
Span1 valid_range(int tap, int in, int out, int stride, int pad) {
  int lo = 0;
  while (lo < out && lo * stride + tap - pad < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride + tap - pad > in - 1) --hi;
  return {lo, hi};
}

Tensor conv_forward(const Tensor& in, const LayerSpec& s, const LayerParams& p, const Shape3& os) {
  const int N = in.batch(), C = in.channels(), H = in.height(), W = in.width();
  const int K = s.kernel, S = s.stride, P = s.pad, O = s.out_channels;
  const int Ho = os.height, Wo = os.width;
  Tensor out(N, O, Ho, Wo);
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      double* op = &out(n, o, 0, 0);
      std::fill(op, op + static_cast<std::size_t>(Ho) * Wo, p.bias[o]);
      for (int c = 0; c < C; ++c) {
        const double* ip = &in(n, c, 0, 0);
        for (int ky = 0; ky < K; ++ky) {
          const Span1 ry = valid_range(ky, H, Ho, S, P);
          for (int kx = 0; kx < K; ++kx) {
            const double w = p.weight[((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx];
            const Span1 rx = valid_range(kx, W, Wo, S, P);
            for (int oy = ry.lo; oy < ry.hi; ++oy) {
              const double* irow = ip + static_cast<std::ptrdiff_t>(oy * S + ky - P) * W + (kx - P);
              double* orow = op + static_cast<std::size_t>(oy) * Wo;
              if (S == 1) {
                for (int ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += w * irow[ox];
              } else {
                for (int ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += w * irow[ox * S];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

void conv_backward(const Tensor& in, const Tensor& dout, const LayerSpec& s, const LayerParams& p,
                   LayerParams* dparams, Tensor* din) {
  const int N = in.batch(), C = in.channels(), H = in.height(), W = in.width();
  const int K = s.kernel, S = s.stride, P = s.pad, O = s.out_channels;
  const int Ho = dout.height(), Wo = dout.width();
  if (din) *din = Tensor(N, C, H, W);
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      const double* gp = &dout(n, o, 0, 0);
      if (dparams) {
        double acc = 0.0;
        for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) acc += gp[i];
        dparams->bias[o] += acc;
      }
      for (int c = 0; c < C; ++c) {
        const double* ip = &in(n, c, 0, 0);
        double* dip = din ? &(*din)(n, c, 0, 0) : nullptr;
        for (int ky = 0; ky < K; ++ky) {
          const Span1 ry = valid_range(ky, H, Ho, S, P);
          for (int kx = 0; kx < K; ++kx) {
            const std::size_t widx = ((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx;
            const double w = p.weight[widx];
            const Span1 rx = valid_range(kx, W, Wo, S, P);
            double acc = 0.0;
            for (int oy = ry.lo; oy < ry.hi; ++oy) {
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(oy * S + ky - P) * W + (kx - P);
              const double* grow = gp + static_cast<std::size_t>(oy) * Wo;
              if (dparams) {
                const double* irow = ip + base;
                for (int ox = rx.lo; ox < rx.hi; ++ox) acc += grow[ox] * irow[ox * S];
              }
              if (dip) {
                double* drow = dip + base;
                for (int ox = rx.lo; ox < rx.hi; ++ox) drow[ox * S] += w * grow[ox];
              }
            }
            if (dparams) dparams->weight[widx] += acc;
          }
        }
      }
    }
  }
}

Tensor pool_forward(const Tensor& in, std::vector<std::int32_t>* argmax) {
  const int N = in.batch(), C = in.channels(), H = in.height(), W = in.width();
  const int Ho = H / 2, Wo = W / 2;
  Tensor out(N, C, Ho, Wo);
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t k = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* ip = &in(n, c, 0, 0);
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++k) {
          int best = (2 * oy) * W + 2 * ox;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int idx = (2 * oy + dy) * W + 2 * ox + dx;
              if (ip[idx] > ip[best]) best = idx;
            }
          out.data[k] = ip[best];
          if (argmax) (*argmax)[k] = best;
        }
    }
  return out;
}

Tensor pool_backward(const Tensor& in, const Tensor& dout, const std::vector<std::int32_t>& argmax) {
  Tensor din(in.batch(), in.channels(), in.height(), in.width());
  const std::size_t out_plane = static_cast<std::size_t>(dout.height()) * dout.width();
  const std::size_t in_plane = static_cast<std::size_t>(in.height()) * in.width();
  for (std::size_t k = 0; k < dout.size(); ++k) din.data[(k / out_plane) * in_plane + argmax[k]] += dout.data[k];
  return din;
}

Tensor dense_forward(const Tensor& in, const LayerSpec& s, const LayerParams& p) {
  const int N = in.batch();
  const std::size_t D = in.sample_size();
  Tensor out(N, s.units, 1, 1);
  for (int n = 0; n < N; ++n) {
    const double* x = in.sample(n).data();
    for (int u = 0; u < s.units; ++u) {
      const double* w = p.weight.data() + static_cast<std::size_t>(u) * D;
      double acc = 0.0;
      for (std::size_t d = 0; d < D; ++d) acc += w[d] * x[d];
      out.data[static_cast<std::size_t>(n) * s.units + u] = acc + p.bias[u];
    }
  }
  return out;
}

void dense_backward(const Tensor& in, const Tensor& dout, const LayerSpec& s, const LayerParams& p,
                    LayerParams* dparams, Tensor* din) {
  const int N = in.batch();
  const std::size_t D = in.sample_size();
  if (din) *din = Tensor(in.batch(), in.channels(), in.height(), in.width());
  for (int n = 0; n < N; ++n) {
    const double* x = in.sample(n).data();
    double* dx = din ? din->sample(n).data() : nullptr;
    for (int u = 0; u < s.units; ++u) {
      const double g = dout.data[static_cast<std::size_t>(n) * s.units + u];
      if (g == 0.0) continue;
      if (dparams) {
        double* dw = dparams->weight.data() + static_cast<std::size_t>(u) * D;
        for (std::size_t d = 0; d < D; ++d) dw[d] += g * x[d];
        dparams->bias[u] += g;
      }
      if (dx) {
        const double* w = p.weight.data() + static_cast<std::size_t>(u) * D;
        for (std::size_t d = 0; d < D; ++d) dx[d] += g * w[d];
      }
    }
  }
}

Tensor softmax_backward(const Tensor& probs, const Tensor& dout) {
  Tensor din = dout;
  const int C = probs.channels();
  for (int n = 0; n < probs.batch(); ++n) {
    const double* p = probs.sample(n).data();
    const double* g = dout.sample(n).data();
    double dot = 0.0;
    for (int c = 0; c < C; ++c) dot += g[c] * p[c];
    double* d = din.sample(n).data();
    for (int c = 0; c < C; ++c) d[c] = p[c] * (g[c] - dot);
  }
  return din;
}

Tensor run_layer(const Network& net, std::size_t i, const Tensor& in, bool train, Rng* rng,
                 std::vector<std::int32_t>* argmax, std::vector<double>* scale) {
  const LayerSpec& s = net.layers()[i];
  const Shape3& os = net.output_shape(i);
  switch (s.kind) {
    case LayerKind::Conv2d:
      return conv_forward(in, s, net.params()[i], os);
    case LayerKind::ReLU: {
      Tensor out = in;
      for (double& v : out.data) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case LayerKind::MaxPool2x2:
      return pool_forward(in, argmax);
    case LayerKind::Flatten: {
      Tensor out = in;
      out.shape = {in.batch(), static_cast<int>(in.sample_size()), 1, 1};
      return out;
    }
    case LayerKind::Dense:
      return dense_forward(in, s, net.params()[i]);
    case LayerKind::Dropout: {
      if (!train || s.rate == 0.0) {
        if (scale) scale->clear();
        return in;
      }
      if (!rng) throw Error(Errc::InvalidArgument, "training-mode dropout requires an rng");
      Tensor out = in;
      const double keep = 1.0 / (1.0 - s.rate);
      std::vector<double> local;
      std::vector<double>& sc = scale ? *scale : local;
      sc.resize(in.size());
      for (std::size_t k = 0; k < in.size(); ++k) {
        sc[k] = rng->uniform() < s.rate ? 0.0 : keep;
        out.data[k] *= sc[k];
      }
      return out;
    }
    case LayerKind::Softmax:
      return softmax(in);
  }
  throw Error(Errc::InvalidArgument, "unknown layer kind");
}

void check_input(const Network& net, const Tensor& input, std::size_t begin) {
  const Shape3 want = begin == 0 ? net.input_shape() : net.output_shape(begin - 1);
  if (input.channels() != want.channels || input.height() != want.height || input.width() != want.width) {
    throw Error(Errc::ShapeMismatch, "input shape (" + std::to_string(input.channels()) + "," +
                                         std::to_string(input.height()) + "," + std::to_string(input.width()) +
                                         ") does not match expected (" + std::to_string(want.channels) + "," +
                                         std::to_string(want.height) + "," + std::to_string(want.width) + ")");
  }
  if (input.data.size() != static_cast<std::size_t>(input.batch()) * input.sample_size())
    throw Error(Errc::ShapeMismatch, "tensor data length does not match its shape");
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  Tensor out = logits;
  const int C = logits.channels();
  for (int n = 0; n < logits.batch(); ++n) {
    double* row = out.sample(n).data();
    const double mx = *std::max_element(row, row + C);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (int c = 0; c < C; ++c) row[c] /= sum;
  }
  return out;
}

Tape forward(const Network& net, Tensor input, bool train, Rng* rng, std::size_t begin,
             std::optional<std::size_t> end) {
  const std::size_t stop = end.value_or(net.size());
  if (begin > stop || stop > net.size()) throw Error(Errc::InvalidArgument, "bad layer range");
  check_input(net, input, begin);
  Tape tape;
  tape.begin = begin;
  tape.input = std::move(input);
  const std::size_t count = stop - begin;
  tape.outputs.reserve(count);
  tape.pool_argmax.resize(count);
  tape.dropout_scale.resize(count);
  for (std::size_t i = begin; i < stop; ++i) {
    const Tensor& in = i == begin ? tape.input : tape.outputs.back();
    tape.outputs.push_back(
        run_layer(net, i, in, train, rng, &tape.pool_argmax[i - begin], &tape.dropout_scale[i - begin]));
  }
  return tape;
}

Tensor infer(const Network& net, Tensor input, std::size_t begin, std::optional<std::size_t> end) {
  const std::size_t stop = end.value_or(net.size());
  if (begin > stop || stop > net.size()) throw Error(Errc::InvalidArgument, "bad layer range");
  check_input(net, input, begin);
  Tensor cur = std::move(input);
  for (std::size_t i = begin; i < stop; ++i) cur = run_layer(net, i, cur, false, nullptr, nullptr, nullptr);
  return cur;
}

const Tensor& logits(const Network& net, const Tape& tape) {
  if (const auto sm = net.softmax_index(); sm && *sm >= tape.begin && *sm - tape.begin < tape.outputs.size())
    return tape.input_of(*sm);
  return tape.output();
}

Gradients backward(const Network& net, const Tape& tape, const Tensor& grad, std::span<const std::string> capture,
                   std::optional<std::size_t> from) {
  if (tape.outputs.empty()) throw Error(Errc::InvalidArgument, "empty tape");
  const std::size_t top = from.value_or(tape.begin + tape.outputs.size() - 1);
  if (top < tape.begin || top >= tape.begin + tape.outputs.size())
    throw Error(Errc::InvalidArgument, "backward start layer not on tape");
  if (grad.shape != tape.output_of(top).shape) throw Error(Errc::ShapeMismatch, "gradient shape mismatch");

  std::vector<bool> want_capture(net.size(), false);
  std::size_t lowest = top;
  for (const std::string& name : capture) {
    const std::size_t idx = net.layer_index(name);
    if (idx < tape.begin || idx > top)
      throw Error(Errc::UnknownLayerName, "layer '" + name + "' is outside the recorded pass");
    want_capture[idx] = true;
    lowest = std::min(lowest, idx);
  }
  for (std::size_t i = tape.begin; i <= top; ++i)
    if (net.layers()[i].has_params() && !net.frozen()[i]) {
      lowest = std::min(lowest, i);
      break;
    }

  Gradients out;
  out.params.resize(net.size());
  for (std::size_t i = 0; i < net.size(); ++i) {
    out.params[i].weight.assign(net.params()[i].weight.size(), 0.0);
    out.params[i].bias.assign(net.params()[i].bias.size(), 0.0);
  }

  Tensor dout = grad;
  for (std::size_t i = top + 1; i-- > lowest;) {
    const LayerSpec& s = net.layers()[i];
    if (want_capture[i]) out.activations[s.name] = dout;
    const bool need_params = s.has_params() && !net.frozen()[i];
    const bool need_input = i > lowest;
    if (!need_params && !need_input) break;
    const Tensor& in = tape.input_of(i);
    Tensor din;
    switch (s.kind) {
      case LayerKind::Conv2d:
        conv_backward(in, dout, s, net.params()[i], need_params ? &out.params[i] : nullptr,
                      need_input ? &din : nullptr);
        break;
      case LayerKind::Dense:
        dense_backward(in, dout, s, net.params()[i], need_params ? &out.params[i] : nullptr,
                       need_input ? &din : nullptr);
        break;
      case LayerKind::ReLU:
        din = dout;
        for (std::size_t k = 0; k < din.size(); ++k)
          if (!(in.data[k] > 0.0)) din.data[k] = 0.0;
        break;
      case LayerKind::MaxPool2x2:
        din = pool_backward(in, dout, tape.pool_argmax[i - tape.begin]);
        break;
      case LayerKind::Flatten:
        din = dout;
        din.shape = in.shape;
        break;
      case LayerKind::Dropout: {
        din = dout;
        const auto& sc = tape.dropout_scale[i - tape.begin];
        if (!sc.empty())
          for (std::size_t k = 0; k < din.size(); ++k) din.data[k] *= sc[k];
        break;
      }
      case LayerKind::Softmax:
        din = softmax_backward(tape.output_of(i), dout);
        break;
    }
    if (!need_input) break;
    dout = std::move(din);
  }
  return out;
}

Gradients backward_from_logits(const Network& net, const Tape& tape, const Tensor& logit_grad,
                               std::span<const std::string> capture) {
  const auto sm = net.softmax_index();
  if (!sm) return backward(net, tape, logit_grad, capture);
  if (*sm == tape.begin) throw Error(Errc::InvalidArgument, "tape starts at the softmax layer");
  return backward(net, tape, logit_grad, capture, *sm - 1);
}

double cross_entropy(const Tensor& probs, const Tensor& one_hot) {
  if (probs.shape != one_hot.shape) throw Error(Errc::ShapeMismatch, "cross_entropy shape mismatch");
  double total = 0.0;
  for (int n = 0; n < probs.batch(); ++n) {
    const auto p = probs.sample(n);
    const auto y = one_hot.sample(n);
    for (std::size_t c = 0; c < p.size(); ++c)
      if (y[c] != 0.0) total -= y[c] * std::log(std::max(p[c], 1e-12));
  }
  return total / probs.batch();
}

Tensor cross_entropy_logit_grad(const Tensor& probs, const Tensor& one_hot) {
  if (probs.shape != one_hot.shape) throw Error(Errc::ShapeMismatch, "cross_entropy shape mismatch");
  Tensor g = probs;
  const double inv = 1.0 / probs.batch();
  for (std::size_t k = 0; k < g.size(); ++k) g.data[k] = (probs.data[k] - one_hot.data[k]) * inv;
  return g;
}

Tensor one_hot(std::span<const int> labels, int classes) {
  Tensor out(static_cast<int>(labels.size()), classes, 1, 1);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || labels[n] >= classes) throw Error(Errc::InvalidArgument, "label out of range");
    out.data[n * classes + labels[n]] = 1.0;
  }
  return out;
}

// -- optimization -------------------------------------------------------------

void OptimizerSpec::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw Error(Errc::InvalidArgument, "learning rate must be > 0");
}

std::string_view optimizer_name(OptimizerKind kind) noexcept { return kind == OptimizerKind::SGD ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "sgd") return OptimizerKind::SGD;
  if (lower == "adam") return OptimizerKind::Adam;
  throw Error(Errc::InvalidArgument, "unknown optimizer '" + std::string(name) + "'");
}

Optimizer::Optimizer(OptimizerSpec spec) : spec_(spec) { spec_.validate(); }

void Optimizer::step(std::vector<LayerParams>& params, const std::vector<LayerParams>& grads,
                     const std::vector<bool>& frozen) {
  if (params.size() != grads.size() || params.size() != frozen.size())
    throw Error(Errc::ShapeMismatch, "optimizer: parameter/gradient layer count mismatch");
  ++steps_;
  const double lr = spec_.learning_rate;
  if (spec_.kind == OptimizerKind::SGD) {
    for (std::size_t l = 0; l < params.size(); ++l) {
      if (frozen[l]) continue;
      auto update = [&](std::vector<double>& w, const std::vector<double>& g) {
        if (w.size() != g.size()) throw Error(Errc::ShapeMismatch, "optimizer: gradient size mismatch");
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * g[k];
      };
      update(params[l].weight, grads[l].weight);
      update(params[l].bias, grads[l].bias);
    }
    return;
  }

  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t l = 0; l < params.size(); ++l) {
      if (frozen[l]) continue;
      m_[l].weight.assign(params[l].weight.size(), 0.0);
      m_[l].bias.assign(params[l].bias.size(), 0.0);
      v_[l] = m_[l];
    }
  }
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(spec_.beta1, t);
  const double c2 = 1.0 - std::pow(spec_.beta2, t);
  for (std::size_t l = 0; l < params.size(); ++l) {
    if (frozen[l]) continue;
    auto update = [&](std::vector<double>& w, const std::vector<double>& g, std::vector<double>& m,
                      std::vector<double>& v) {
      if (w.size() != g.size()) throw Error(Errc::ShapeMismatch, "optimizer: gradient size mismatch");
      if (m.size() != w.size()) {
        m.assign(w.size(), 0.0);
        v.assign(w.size(), 0.0);
      }
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = spec_.beta1 * m[k] + (1.0 - spec_.beta1) * g[k];
        v[k] = spec_.beta2 * v[k] + (1.0 - spec_.beta2) * g[k] * g[k];
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        w[k] -= lr * mhat / (std::sqrt(vhat) + spec_.epsilon);
      }
    };
    update(params[l].weight, grads[l].weight, m_[l].weight, v_[l].weight);
    update(params[l].bias, grads[l].bias, m_[l].bias, v_[l].bias);
  }
}

// -- architectures ------------------------------------------------------------

std::vector<LayerSpec> build_head(int version, int num_classes) {
  if (version < 0 || version > kMaxHeadVersion)
    throw Error(Errc::UnknownVersion, "head version " + std::to_string(version) + " (expected 0..8)");
  if (num_classes < 2) throw Error(Errc::InvalidArgument, "num_classes must be >= 2");
  static constexpr int kWidths[] = {256, 128, 64, 32};
  std::vector<LayerSpec> head;
  const int hidden = (version + 1) / 2;
  for (int i = 0; i < hidden; ++i) {
    head.push_back(LayerSpec::dense("head_dense" + std::to_string(i + 1), kWidths[i]));
    head.push_back(LayerSpec::relu("head_relu" + std::to_string(i + 1)));
  }
  if (version > 0 && version % 2 == 0) head.push_back(LayerSpec::dropout("head_dropout", kHeadDropout));
  head.push_back(LayerSpec::dense("head_logits", num_classes));
  head.push_back(LayerSpec::softmax("head_softmax"));
  return head;
}

Network make_desknet(Shape3 input, int head_version, int num_classes, std::uint64_t seed) {
  std::vector<LayerSpec> layers = {
      LayerSpec::conv2d("conv1", 8, 3, 1, 1), LayerSpec::relu("relu1"),   LayerSpec::maxpool("pool1"),
      LayerSpec::conv2d("conv2", 16, 3, 1, 1), LayerSpec::relu("relu2"),  LayerSpec::maxpool("pool2"),
      LayerSpec::flatten("flatten"),
  };
  const std::size_t backbone = layers.size();
  for (LayerSpec& s : build_head(head_version, num_classes)) layers.push_back(std::move(s));
  Network net(input, std::move(layers), seed);
  for (std::size_t i = 0; i < backbone; ++i) net.set_frozen(i, true);
  return net;
}

// -- training -----------------------------------------------------------------

InMemorySource::InMemorySource(std::vector<imaging::ImageTensor> images, std::vector<int> labels)
    : images_(std::move(images)), labels_(std::move(labels)) {
  if (images_.size() != labels_.size()) throw Error(Errc::InvalidArgument, "images/labels length mismatch");
}

void TrainOptions::validate() const {
  optimizer.validate();
  if (epochs < 1) throw Error(Errc::InvalidArgument, "epochs must be >= 1");
  if (batch_size < 1) throw Error(Errc::InvalidArgument, "batch_size must be >= 1");
}

namespace {

// Frozen, dropout-free leading layers: their output is a pure function of the input.
std::size_t frozen_prefix(const Network& net) {
  std::size_t i = 0;
  for (; i < net.size(); ++i) {
    const LayerSpec& s = net.layers()[i];
    if ((s.has_params() && !net.frozen()[i]) || s.kind == LayerKind::Dropout || s.kind == LayerKind::Softmax) break;
  }
  // the tape must still contain the layer producing the logits
  if (const auto sm = net.softmax_index(); sm && i >= *sm) i = *sm > 0 ? *sm - 1 : 0;
  return i;
}

Tensor load_batch(const SampleSource& src, std::span<const std::size_t> idx, std::uint64_t epoch) {
  std::vector<imaging::ImageTensor> images;
  images.reserve(idx.size());
  for (std::size_t i : idx) images.push_back(src.load(i, epoch));
  return to_batch(images);
}

// Per-sample features at the output of the frozen prefix, stored as float.
class FeatureCache {
 public:
  FeatureCache(const Network& net, const SampleSource& src, std::size_t prefix, int chunk) : prefix_(prefix) {
    const Shape3 s = prefix == 0 ? net.input_shape() : net.output_shape(prefix - 1);
    shape_ = s;
    stride_ = static_cast<std::size_t>(s.channels) * s.height * s.width;
    data_.resize(stride_ * src.size());
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < src.size(); start += chunk) {
      idx.clear();
      for (std::size_t i = start; i < std::min(src.size(), start + chunk); ++i) idx.push_back(i);
      const Tensor f = infer(net, load_batch(src, idx, 0), 0, prefix);
      for (std::size_t k = 0; k < f.size(); ++k) data_[start * stride_ + k] = static_cast<float>(f.data[k]);
    }
  }

  Tensor gather(std::span<const std::size_t> idx) const {
    Tensor out(static_cast<int>(idx.size()), shape_.channels, shape_.height, shape_.width);
    for (std::size_t n = 0; n < idx.size(); ++n)
      std::copy_n(&data_[idx[n] * stride_], stride_, out.data.begin() + n * stride_);
    return out;
  }

 private:
  std::size_t prefix_;
  Shape3 shape_;
  std::size_t stride_ = 0;
  std::vector<float> data_;
};

std::pair<double, double> loss_and_accuracy(const Tensor& probs, std::span<const int> labels) {
  double loss = 0.0;
  int correct = 0;
  const int C = probs.channels();
  for (int n = 0; n < probs.batch(); ++n) {
    const auto p = probs.sample(n);
    loss -= std::log(std::max(p[labels[n]], 1e-12));
    const int arg = static_cast<int>(std::max_element(p.begin(), p.begin() + C) - p.begin());
    correct += arg == labels[n];
  }
  return {loss, static_cast<double>(correct)};
}

}  // namespace

TrainResult train(Network net, const SampleSource& train_set, const SampleSource& val_set, const TrainOptions& opts) {
  opts.validate();
  if (!net.softmax_index()) throw Error(Errc::InvalidArgument, "training requires a trailing Softmax layer");
  if (train_set.size() == 0 || val_set.size() == 0) throw Error(Errc::InvalidArgument, "empty training/validation set");
  const int classes = net.num_outputs();
  const std::size_t prefix = frozen_prefix(net);
  constexpr int kChunk = 16;

  std::optional<FeatureCache> train_cache;
  if (prefix > 0 && train_set.epoch_invariant()) train_cache.emplace(net, train_set, prefix, kChunk);
  std::optional<FeatureCache> val_cache;
  if (prefix > 0) val_cache.emplace(net, val_set, prefix, kChunk);

  auto train_inputs = [&](std::span<const std::size_t> idx, std::uint64_t epoch) {
    if (train_cache) return train_cache->gather(idx);
    Tensor raw = load_batch(train_set, idx, epoch);
    return prefix > 0 ? infer(net, std::move(raw), 0, prefix) : raw;
  };

  Optimizer optimizer(opts.optimizer);
  TrainResult result;
  result.best = net;
  double best_val = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_set.size());
  std::vector<std::size_t> val_idx(val_set.size());
  std::iota(val_idx.begin(), val_idx.end(), 0);

  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = Rng::stream(opts.seed, 2 * static_cast<std::uint64_t>(epoch));
    Rng dropout_rng = Rng::stream(opts.seed, 2 * static_cast<std::uint64_t>(epoch) + 1);
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    double correct = 0.0;
    std::vector<int> labels;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min<std::size_t>(opts.batch_size, order.size() - start));
      labels.clear();
      for (std::size_t i : idx) labels.push_back(train_set.label(i));
      const Tape tape = forward(net, train_inputs(idx, static_cast<std::uint64_t>(epoch)), true, &dropout_rng, prefix);
      const Tensor& probs = tape.output();
      const auto [l, c] = loss_and_accuracy(probs, labels);
      loss_sum += l;
      correct += c;
      const Tensor g = cross_entropy_logit_grad(probs, one_hot(labels, classes));
      const Gradients grads = backward_from_logits(net, tape, g);
      optimizer.step(net.params(), grads.params, net.frozen());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = correct / static_cast<double>(order.size());

    double vloss = 0.0;
    double vcorrect = 0.0;
    for (std::size_t start = 0; start < val_idx.size(); start += kChunk) {
      const std::span<const std::size_t> idx(val_idx.data() + start,
                                             std::min<std::size_t>(kChunk, val_idx.size() - start));
      labels.clear();
      for (std::size_t i : idx) labels.push_back(val_set.label(i));
      const Tensor probs = val_cache ? infer(net, val_cache->gather(idx), prefix) : infer(net, load_batch(val_set, idx, 0));
      const auto [l, c] = loss_and_accuracy(probs, labels);
      vloss += l;
      vcorrect += c;
    }
    rec.val_loss = vloss / static_cast<double>(val_idx.size());
    rec.val_accuracy = vcorrect / static_cast<double>(val_idx.size());
    result.history.push_back(rec);

    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      result.best = net;
      result.best_epoch = epoch;
    }
  }
  result.steps = optimizer.steps();
  return result;
}

std::pair<double, double> evaluate_loss(const Network& net, const SampleSource& data, int batch_size) {
  if (data.size() == 0) throw Error(Errc::InvalidArgument, "empty data set");
  double loss = 0.0;
  double correct = 0.0;
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    labels.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) {
      idx.push_back(i);
      labels.push_back(data.label(i));
    }
    const auto [l, c] = loss_and_accuracy(infer(net, load_batch(data, idx, 0)), labels);
    loss += l;
    correct += c;
  }
  return {loss / static_cast<double>(data.size()), correct / static_cast<double>(data.size())};
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,train_acc,val_loss,val_acc\n";
  char line[160];
  for (const EpochRecord& r : history) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.train_accuracy, r.val_loss,
                  r.val_accuracy);
    out += line;
  }
  return out;
}

// -- checkpoints --------------------------------------------------------------

namespace {

// Dropout rates are stored as float32; read them back as the shortest
// decimal that round-trips, so 0.3 comes back as 0.3 and not 0.30000001.
double widen_rate(float f) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, f);
  double d = 0.0;
  std::from_chars(buf, res.ptr, d);
  return d;
}

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v), 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
  void bytes(std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> out;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(static_cast<std::uint32_t>(get(4))); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4))); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + at_), n);
    at_ += n;
    return s;
  }
  bool done() const { return at_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - at_ < n) throw Error(Errc::IoError, "checkpoint truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[at_ + i]) << (8 * i);
    at_ += n;
    return v;
  }
  std::span<const std::uint8_t> b_;
  std::size_t at_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  const Network& net = ckpt.network;
  Writer w;
  w.bytes("XPCK");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(net.input_shape().channels));
  w.u32(static_cast<std::uint32_t>(net.input_shape().height));
  w.u32(static_cast<std::uint32_t>(net.input_shape().width));
  w.u32(static_cast<std::uint32_t>(net.size()));
  for (std::size_t i = 0; i < net.size(); ++i) {
    const LayerSpec& s = net.layers()[i];
    w.u8(static_cast<std::uint8_t>(s.kind));
    w.u8(net.frozen()[i] ? 1 : 0);
    w.u16(static_cast<std::uint16_t>(s.name.size()));
    w.bytes(s.name);
    w.i32(s.out_channels);
    w.i32(s.kernel);
    w.i32(s.stride);
    w.i32(s.pad);
    w.i32(s.units);
    w.f32(static_cast<float>(s.rate));
  }
  w.u64(ckpt.seed);
  w.u64(ckpt.step);
  w.u32(static_cast<std::uint32_t>(ckpt.class_names.size()));
  for (const std::string& c : ckpt.class_names) {
    w.u16(static_cast<std::uint16_t>(c.size()));
    w.bytes(c);
  }
  for (const LayerParams& p : net.params()) {
    w.u32(static_cast<std::uint32_t>(p.weight.size()));
    for (double v : p.weight) w.f32(static_cast<float>(v));
    w.u32(static_cast<std::uint32_t>(p.bias.size()));
    for (double v : p.bias) w.f32(static_cast<float>(v));
  }
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.str(4) != "XPCK") throw Error(Errc::IoError, "not a checkpoint (bad magic)");
  if (const auto version = r.u32(); version != 1)
    throw Error(Errc::IoError, "unsupported checkpoint version " + std::to_string(version));
  Shape3 input;
  input.channels = static_cast<int>(r.u32());
  input.height = static_cast<int>(r.u32());
  input.width = static_cast<int>(r.u32());
  const std::uint32_t count = r.u32();
  std::vector<LayerSpec> layers;
  std::vector<bool> frozen;
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec s;
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::Softmax)) throw Error(Errc::IoError, "bad layer kind");
    s.kind = static_cast<LayerKind>(kind);
    frozen.push_back(r.u8() != 0);
    s.name = r.str(r.u16());
    s.out_channels = r.i32();
    s.kernel = r.i32();
    s.stride = r.i32();
    s.pad = r.i32();
    s.units = r.i32();
    s.rate = widen_rate(r.f32());
    layers.push_back(std::move(s));
  }
  Checkpoint ckpt;
  ckpt.seed = r.u64();
  ckpt.step = r.u64();
  const std::uint32_t classes = r.u32();
  for (std::uint32_t i = 0; i < classes; ++i) ckpt.class_names.push_back(r.str(r.u16()));
  ckpt.network = Network(input, std::move(layers), 0);
  for (std::size_t i = 0; i < frozen.size(); ++i) ckpt.network.set_frozen(i, frozen[i]);
  for (LayerParams& p : ckpt.network.params()) {
    if (r.u32() != p.weight.size()) throw Error(Errc::IoError, "checkpoint weight count mismatch");
    for (double& v : p.weight) v = r.f32();
    if (r.u32() != p.bias.size()) throw Error(Errc::IoError, "checkpoint bias count mismatch");
    for (double& v : p.bias) v = r.f32();
  }
  if (!r.done()) throw Error(Errc::IoError, "trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace xplain::nnet
