#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xplain/imaging.hpp"
#include "xplain/nnet.hpp"

namespace xplain::gateway {

/// Row-major N x C probability matrix.
struct ProbMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  ProbMatrix() = default;
  ProbMatrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  std::span<double> row(int i) { return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
  }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  void append(const ProbMatrix& other);
  bool operator==(const ProbMatrix&) const = default;
};

inline constexpr double kRowSumTolerance = 1e-5;

/// Argmax with the lowest index winning ties.
int argmax(std::span<const double> row);

struct RetryPolicy {
  int attempts = 3;
  /// Delay before retry k (1-based) is backoff[k - 1]; the last entry repeats.
  std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds(100), std::chrono::milliseconds(400),
                                                 std::chrono::milliseconds(1600)};
};

struct RemoteOptions {
  std::string url;  // http://host:port[/base]
  std::chrono::milliseconds timeout{30000};
  RetryPolicy retry;
  int batch_cap = 64;
  int max_in_flight = 4;
};

struct Capabilities {
  bool has_gradients = false;
  bool has_feature_maps = false;
};

enum class Backend { Native, Remote };

/// Uniform black-box classifier. Copies share the underlying backend.
class ModelHandle {
 public:
  static ModelHandle native(std::shared_ptr<const nnet::Network> net, std::vector<std::string> class_names,
                            std::string model_id = "native");
  /// With empty `class_names`, they are fetched from GET /v1/meta on first use.
  static ModelHandle remote(RemoteOptions options, std::vector<std::string> class_names = {});

  Backend backend() const { return backend_; }
  Capabilities capabilities() const;

  /// Native backend only; null for Remote.
  const nnet::Network* network() const { return net_.get(); }

  const std::vector<std::string>& class_names() const;
  std::string model_id() const;

  /// Throws ShapeMismatch, RemoteUnavailable, ProtocolError.
  ProbMatrix predict_batch(std::span<const imaging::ImageTensor> batch) const;

  /// (class index, probability) with lowest-index tie-break.
  std::pair<int, double> top_class(const imaging::ImageTensor& image) const;

 private:
  struct RemoteState;

  ProbMatrix predict_native(std::span<const imaging::ImageTensor> batch) const;
  ProbMatrix predict_remote(std::span<const imaging::ImageTensor> batch) const;

  Backend backend_ = Backend::Native;
  std::shared_ptr<const nnet::Network> net_;
  std::shared_ptr<RemoteState> remote_;
  std::vector<std::string> class_names_;
  std::string model_id_;
};

/// Accepts "native:<checkpoint>", "remote:<url>", "remote" (uses
/// XPLAIN_MODEL_URL), "http://..." or a bare checkpoint path.
ModelHandle open_model(std::string_view spec, const RemoteOptions& defaults = {});

/// True when `spec` names a remote model, without contacting it.
bool is_remote_spec(std::string_view spec);

// -- wire protocol ------------------------------------------------------------
//
// POST /v1/predict
//   body:     N back-to-back XPB1 records (application/octet-stream)
//   header:   X-Request-Id: <opaque id>; retries reuse the id
//   reply:    200 {"probs": [[...], ...], "model": "<id>"}
// GET /v1/meta
//   reply:    200 {"class_names": [...], "input_shape": [3, 224, 224], "model": "<id>"}

inline constexpr const char* kPredictPath = "/v1/predict";
inline constexpr const char* kMetaPath = "/v1/meta";
inline constexpr const char* kRequestIdHeader = "X-Request-Id";
inline constexpr const char* kModelUrlEnv = "XPLAIN_MODEL_URL";

std::vector<std::uint8_t> encode_predict_request(std::span<const imaging::ImageTensor> batch);
std::vector<imaging::ImageTensor> decode_predict_request(std::span<const std::uint8_t> body);

std::string encode_predict_response(const ProbMatrix& probs, std::string_view model_id);

/// Validates row count, shape, non-negativity and row sums. Throws ProtocolError.
ProbMatrix decode_predict_response(std::string_view body, int expected_rows, std::optional<int> expected_cols,
                                   std::string* model_id = nullptr);

nlohmann::json meta_json(const std::vector<std::string>& class_names, std::string_view model_id,
                         const nnet::Shape3& input_shape = {3, 224, 224});

}  // namespace xplain::gateway
