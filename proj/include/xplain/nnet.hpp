#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xplain/error.hpp"
#include "xplain/imaging.hpp"
#include "xplain/rng.hpp"

namespace xplain::nnet {

/// Dense NCHW tensor in double precision. Fully connected activations use
/// shape (N, D, 1, 1).
struct Tensor {
  std::array<int, 4> shape{0, 0, 0, 0};
  std::vector<double> data;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, double fill = 0.0)
      : shape{n, c, h, w}, data(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int batch() const { return shape[0]; }
  int channels() const { return shape[1]; }
  int height() const { return shape[2]; }
  int width() const { return shape[3]; }
  std::size_t sample_size() const { return static_cast<std::size_t>(shape[1]) * shape[2] * shape[3]; }
  std::size_t size() const { return data.size(); }

  double& operator()(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const double& operator()(int n, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  std::span<double> sample(int n) { return {data.data() + n * sample_size(), sample_size()}; }
  std::span<const double> sample(int n) const { return {data.data() + n * sample_size(), sample_size()}; }

  bool operator==(const Tensor&) const = default;
};

/// Stacks preprocessed images into an (N, 3, H, W) batch.
Tensor to_batch(std::span<const imaging::ImageTensor> images);

struct Shape3 {
  int channels = 0;
  int height = 0;
  int width = 0;

  bool operator==(const Shape3&) const = default;
};

enum class LayerKind : std::uint8_t { Conv2d, ReLU, MaxPool2x2, Flatten, Dense, Dropout, Softmax };

std::string_view layer_kind_name(LayerKind kind) noexcept;

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  int out_channels = 0;  // Conv2d
  int kernel = 0;        // Conv2d
  int stride = 1;        // Conv2d
  int pad = 0;           // Conv2d
  int units = 0;         // Dense
  double rate = 0.0;     // Dropout

  static LayerSpec conv2d(std::string name, int out_channels, int kernel, int stride = 1, int pad = 0);
  static LayerSpec relu(std::string name);
  static LayerSpec maxpool(std::string name);
  static LayerSpec flatten(std::string name);
  static LayerSpec dense(std::string name, int units);
  static LayerSpec dropout(std::string name, double rate);
  static LayerSpec softmax(std::string name);

  bool has_params() const { return kind == LayerKind::Conv2d || kind == LayerKind::Dense; }
  bool operator==(const LayerSpec&) const = default;
};

/// Weights are [out][in][k][k] for Conv2d and [units][inputs] for Dense.
struct LayerParams {
  std::vector<double> weight;
  std::vector<double> bias;

  std::size_t count() const { return weight.size() + bias.size(); }
  bool operator==(const LayerParams&) const = default;
};

/// Feed-forward network: ordered layers, their parameters and a per-layer
/// frozen flag. Shapes are resolved at construction.
class Network {
 public:
  Network() = default;

  /// Initializes Conv2d and Dense weights uniformly in
  /// [-sqrt(6 / fan_in), +sqrt(6 / fan_in)] from `seed`; biases start at zero.
  Network(Shape3 input, std::vector<LayerSpec> layers, std::uint64_t seed);

  const Shape3& input_shape() const { return input_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }
  const Shape3& output_shape(std::size_t layer) const { return shapes_.at(layer); }
  int num_outputs() const;

  std::vector<LayerParams>& params() { return params_; }
  const std::vector<LayerParams>& params() const { return params_; }

  const std::vector<bool>& frozen() const { return frozen_; }
  void set_frozen(std::size_t layer, bool value) { frozen_.at(layer) = value; }

  /// Throws UnknownLayerName.
  std::size_t layer_index(std::string_view name) const;

  /// Index of the last Conv2d layer, if any.
  std::optional<std::size_t> last_conv() const;

  /// Index of the trailing Softmax, if the network ends in one.
  std::optional<std::size_t> softmax_index() const;

  bool operator==(const Network&) const = default;

 private:
  Shape3 input_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape3> shapes_;
  std::vector<LayerParams> params_;
  std::vector<bool> frozen_;
};

/// Cached forward state for one batch.
struct Tape {
  std::size_t begin = 0;         // first layer run
  Tensor input;                  // input to layer `begin`
  std::vector<Tensor> outputs;   // outputs[i] is the output of layer begin + i
  std::vector<std::vector<std::int32_t>> pool_argmax;
  std::vector<std::vector<double>> dropout_scale;

  const Tensor& output() const { return outputs.back(); }
  const Tensor& output_of(std::size_t layer) const { return outputs.at(layer - begin); }
  const Tensor& input_of(std::size_t layer) const { return layer == begin ? input : outputs.at(layer - begin - 1); }
};

/// Runs layers [begin, end). Dropout is active only when `train` is set and
/// then draws its masks from `rng`, which must be non-null. Throws ShapeMismatch.
Tape forward(const Network& net, Tensor input, bool train, Rng* rng, std::size_t begin = 0,
             std::optional<std::size_t> end = std::nullopt);

/// Inference without a tape; the output of layer end - 1.
Tensor infer(const Network& net, Tensor input, std::size_t begin = 0,
             std::optional<std::size_t> end = std::nullopt);

/// Logits are the input to the trailing Softmax (or the output, without one).
const Tensor& logits(const Network& net, const Tape& tape);

struct Gradients {
  std::vector<LayerParams> params;          // zero-filled for frozen and parameterless layers
  std::map<std::string, Tensor> activations;  // d(objective)/d(output of named layer)
};

/// Reverse pass. `grad` is the gradient of the objective with respect to the
/// output of layer `from` (inclusive upper end of the pass); it defaults to
/// the last layer on the tape. Parameter gradients are computed for unfrozen
/// layers, and activation gradients for every name in `capture`.
/// Throws UnknownLayerName.
Gradients backward(const Network& net, const Tape& tape, const Tensor& grad,
                   std::span<const std::string> capture = {}, std::optional<std::size_t> from = std::nullopt);

/// Reverse pass seeded at the logits (the input of the trailing Softmax).
Gradients backward_from_logits(const Network& net, const Tape& tape, const Tensor& logit_grad,
                               std::span<const std::string> capture = {});

/// Row-wise numerically stable softmax of an (N, C, 1, 1) tensor.
Tensor softmax(const Tensor& logits);

/// Mean over the batch of -log max(p_true, 1e-12).
double cross_entropy(const Tensor& probs, const Tensor& one_hot);

/// d(cross_entropy)/d(logits) for softmax outputs: (p - y) / N.
Tensor cross_entropy_logit_grad(const Tensor& probs, const Tensor& one_hot);

Tensor one_hot(std::span<const int> labels, int classes);

// -- optimization -------------------------------------------------------------

enum class OptimizerKind : std::uint8_t { SGD, Adam };

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::SGD;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;

  void validate() const;
};

std::string_view optimizer_name(OptimizerKind kind) noexcept;
OptimizerKind parse_optimizer(std::string_view name);

class Optimizer {
 public:
  explicit Optimizer(OptimizerSpec spec);

  /// One update. Frozen layers are left untouched.
  void step(std::vector<LayerParams>& params, const std::vector<LayerParams>& grads, const std::vector<bool>& frozen);

  std::uint64_t steps() const { return steps_; }
  const OptimizerSpec& spec() const { return spec_; }

 private:
  OptimizerSpec spec_;
  std::uint64_t steps_ = 0;
  std::vector<LayerParams> m_;
  std::vector<LayerParams> v_;
};

// -- architectures ------------------------------------------------------------

inline constexpr int kMaxHeadVersion = 8;
inline constexpr double kHeadDropout = 0.3;

/// Classifier head. Version 0 is [Dense(C), Softmax]. Versions 1..8 stack
/// ReLU dense layers with widths taken as a prefix of (256, 128, 64, 32), one
/// width per odd/even pair; even versions add Dropout(0.3) after the last
/// hidden layer. Throws UnknownVersion.
std::vector<LayerSpec> build_head(int version, int num_classes);

/// Conv(8,3x3,same) -> ReLU -> MaxPool -> Conv(16,3x3,same) -> ReLU -> MaxPool
/// -> Flatten -> head. Backbone layers are frozen.
Network make_desknet(Shape3 input, int head_version, int num_classes, std::uint64_t seed);

// -- training -----------------------------------------------------------------

/// Random-access labeled image source. `epoch` lets augmenting sources vary
/// their output per epoch.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual int label(std::size_t index) const = 0;
  virtual imaging::ImageTensor load(std::size_t index, std::uint64_t epoch) const = 0;
  /// True when load() ignores `epoch`.
  virtual bool epoch_invariant() const { return true; }
};

class InMemorySource final : public SampleSource {
 public:
  InMemorySource(std::vector<imaging::ImageTensor> images, std::vector<int> labels);
  std::size_t size() const override { return images_.size(); }
  int label(std::size_t i) const override { return labels_.at(i); }
  imaging::ImageTensor load(std::size_t i, std::uint64_t) const override { return images_.at(i); }

 private:
  std::vector<imaging::ImageTensor> images_;
  std::vector<int> labels_;
};

struct TrainOptions {
  OptimizerSpec optimizer;
  int epochs = 1;
  int batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  Network best;          // parameters at the lowest validation loss
  int best_epoch = 0;    // 1-based
  std::uint64_t steps = 0;
};

/// Mini-batch training with per-epoch validation. The frozen, deterministic
/// prefix of the network is evaluated once per sample and cached when the
/// training source is epoch-invariant.
TrainResult train(Network net, const SampleSource& train_set, const SampleSource& val_set, const TrainOptions& opts);

/// Mean loss and accuracy in inference mode.
std::pair<double, double> evaluate_loss(const Network& net, const SampleSource& data, int batch_size = 32);

std::string history_csv(const std::vector<EpochRecord>& history);

// -- checkpoints --------------------------------------------------------------
//
// Little-endian binary layout:
//   "XPCK" u32 format-version(1)
//   u32 input channels, height, width
//   u32 layer count, then per layer:
//     u8 kind, u8 frozen, u16 name length, name bytes,
//     i32 out_channels, kernel, stride, pad, units, f32 dropout rate
//   u64 seed, u64 step counter
//   u32 class count, then per class: u16 length, bytes
//   per layer: u32 weight count, f32 weights, u32 bias count, f32 biases

struct Checkpoint {
  Network network;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::vector<std::string> class_names;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xplain::nnet
