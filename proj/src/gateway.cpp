#include "xplain/gateway.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <future>
#include <random>
#include <thread>

#include <httplib.h>

namespace xplain::gateway {

void ProbMatrix::append(const ProbMatrix& other) {
  if (rows == 0 && cols == 0) cols = other.cols;
  if (other.cols != cols) throw Error(Errc::ShapeMismatch, "probability matrices differ in width");
  rows += other.rows;
  data.insert(data.end(), other.data.begin(), other.data.end());
}

int argmax(std::span<const double> row) {
  if (row.empty()) throw Error(Errc::InvalidArgument, "argmax of an empty row");
  int best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

// -- protocol -----------------------------------------------------------------

std::vector<std::uint8_t> encode_predict_request(std::span<const imaging::ImageTensor> batch) {
  std::vector<std::uint8_t> body;
  for (const auto& img : batch) imaging::append_xpb1(body, img);
  return body;
}

std::vector<imaging::ImageTensor> decode_predict_request(std::span<const std::uint8_t> body) {
  return imaging::decode_xpb1_batch(body);
}

std::string encode_predict_response(const ProbMatrix& probs, std::string_view model_id) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < probs.rows; ++r) {
    const auto row = probs.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return nlohmann::json{{"probs", std::move(rows)}, {"model", std::string(model_id)}}.dump();
}

ProbMatrix decode_predict_response(std::string_view body, int expected_rows, std::optional<int> expected_cols,
                                   std::string* model_id) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ProtocolError, std::string("response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("probs") || !j["probs"].is_array())
    throw Error(Errc::ProtocolError, "response lacks a 'probs' array");
  const auto& rows = j["probs"];
  if (static_cast<int>(rows.size()) != expected_rows) {
    throw Error(Errc::ProtocolError, "expected " + std::to_string(expected_rows) + " rows, got " +
                                         std::to_string(rows.size()));
  }
  ProbMatrix out;
  for (int r = 0; r < expected_rows; ++r) {
    const auto& row = rows[static_cast<std::size_t>(r)];
    if (!row.is_array() || row.empty()) throw Error(Errc::ProtocolError, "malformed probability row");
    if (r == 0) {
      out = ProbMatrix(expected_rows, static_cast<int>(row.size()));
      if (expected_cols && out.cols != *expected_cols) {
        throw Error(Errc::ProtocolError, "expected " + std::to_string(*expected_cols) + " classes, got " +
                                             std::to_string(out.cols));
      }
    }
    if (static_cast<int>(row.size()) != out.cols) throw Error(Errc::ProtocolError, "ragged probability rows");
    double sum = 0.0;
    for (int c = 0; c < out.cols; ++c) {
      if (!row[static_cast<std::size_t>(c)].is_number()) throw Error(Errc::ProtocolError, "non-numeric probability");
      const double p = row[static_cast<std::size_t>(c)].get<double>();
      if (!std::isfinite(p) || p < 0.0) throw Error(Errc::ProtocolError, "probabilities must be finite and >= 0");
      out.row(r)[static_cast<std::size_t>(c)] = p;
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowSumTolerance)
      throw Error(Errc::ProtocolError, "probability row " + std::to_string(r) + " sums to " + std::to_string(sum));
  }
  if (model_id && j.contains("model") && j["model"].is_string()) *model_id = j["model"].get<std::string>();
  return out;
}

nlohmann::json meta_json(const std::vector<std::string>& class_names, std::string_view model_id,
                         const nnet::Shape3& input_shape) {
  return {{"class_names", class_names},
          {"input_shape", {input_shape.channels, input_shape.height, input_shape.width}},
          {"model", std::string(model_id)}};
}

// -- handle -------------------------------------------------------------------

namespace {

struct ParsedUrl {
  std::string origin;  // scheme://host:port
  std::string base;    // path prefix without trailing slash
};

ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos || url.compare(0, scheme_end, "http") != 0)
    throw Error(Errc::InvalidArgument, "model URL must start with http:// (got '" + url + "')");
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl out;
  out.origin = url.substr(0, path_start);
  if (path_start != std::string::npos) out.base = url.substr(path_start);
  while (!out.base.empty() && out.base.back() == '/') out.base.pop_back();
  return out;
}

std::string new_request_id() {
  static const std::uint64_t prefix = [] {
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }();
  static std::atomic<std::uint64_t> counter{0};
  char buf[40];
  std::snprintf(buf, sizeof buf, "%016llx-%llu", static_cast<unsigned long long>(prefix),
                static_cast<unsigned long long>(counter.fetch_add(1)));
  return buf;
}

}  // namespace

struct ModelHandle::RemoteState {
  RemoteOptions options;
  ParsedUrl url;
  std::once_flag meta_once;
  std::vector<std::string> class_names;
  std::string model_id;

  httplib::Client client() const {
    httplib::Client cli(url.origin);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options.timeout - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());
    return cli;
  }

  std::chrono::milliseconds backoff(int retry) const {
    const auto& b = options.retry.backoff;
    if (b.empty()) return std::chrono::milliseconds(0);
    return b[std::min<std::size_t>(static_cast<std::size_t>(retry - 1), b.size() - 1)];
  }

  // Runs `attempt` until it yields a response that is not a transport failure
  // or a 5xx, sleeping per the retry policy in between.
  template <typename Fn>
  httplib::Result with_retries(Fn&& attempt, const std::string& what) const {
    std::string last_error;
    const int attempts = std::max(1, options.retry.attempts);
    for (int k = 1; k <= attempts; ++k) {
      if (k > 1) std::this_thread::sleep_for(backoff(k - 1));
      httplib::Result res = attempt();
      if (res && res->status < 500) return res;
      last_error = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
    }
    throw Error(Errc::RemoteUnavailable,
                what + " failed after " + std::to_string(attempts) + " attempts: " + last_error);
  }

  void fetch_meta() {
    std::call_once(meta_once, [this] {
      auto res = with_retries([&] { return client().Get(url.base + kMetaPath); }, "GET " + url.base + kMetaPath);
      if (res->status != 200) throw Error(Errc::ProtocolError, "meta endpoint returned HTTP " + std::to_string(res->status));
      try {
        const auto j = nlohmann::json::parse(res->body);
        if (class_names.empty()) class_names = j.at("class_names").get<std::vector<std::string>>();
        if (j.contains("model")) model_id = j["model"].get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ProtocolError, std::string("malformed meta response: ") + e.what());
      }
    });
  }
};

ModelHandle ModelHandle::native(std::shared_ptr<const nnet::Network> net, std::vector<std::string> class_names,
                                std::string model_id) {
  if (!net) throw Error(Errc::InvalidArgument, "null network");
  if (static_cast<int>(class_names.size()) != net->num_outputs()) {
    throw Error(Errc::InvalidArgument, "class_names has " + std::to_string(class_names.size()) +
                                           " entries but the network emits " + std::to_string(net->num_outputs()));
  }
  ModelHandle h;
  h.backend_ = Backend::Native;
  h.net_ = std::move(net);
  h.class_names_ = std::move(class_names);
  h.model_id_ = std::move(model_id);
  return h;
}

ModelHandle ModelHandle::remote(RemoteOptions options, std::vector<std::string> class_names) {
  if (options.batch_cap < 1 || options.max_in_flight < 1)
    throw Error(Errc::InvalidArgument, "batch_cap and max_in_flight must be >= 1");
  ModelHandle h;
  h.backend_ = Backend::Remote;
  h.remote_ = std::make_shared<RemoteState>();
  h.remote_->url = parse_url(options.url);
  h.remote_->options = std::move(options);
  h.remote_->class_names = std::move(class_names);
  h.remote_->model_id = h.remote_->options.url;
  return h;
}

Capabilities ModelHandle::capabilities() const {
  if (backend_ == Backend::Native) return {true, true};
  return {false, false};
}

const std::vector<std::string>& ModelHandle::class_names() const {
  if (backend_ == Backend::Native) return class_names_;
  if (remote_->class_names.empty()) remote_->fetch_meta();
  return remote_->class_names;
}

std::string ModelHandle::model_id() const { return backend_ == Backend::Native ? model_id_ : remote_->model_id; }

ProbMatrix ModelHandle::predict_batch(std::span<const imaging::ImageTensor> batch) const {
  if (batch.empty()) return ProbMatrix(0, static_cast<int>(class_names().size()));
  for (const auto& img : batch) {
    if (img.range != imaging::RangeTag::Normalized)
      throw Error(Errc::RangeTagMismatch, "predict_batch expects Normalized tensors");
    if (img.data.size() != img.size() || img.data.size() != 3 * img.plane())
      throw Error(Errc::ShapeMismatch, "malformed image tensor");
  }
  return backend_ == Backend::Native ? predict_native(batch) : predict_remote(batch);
}

ProbMatrix ModelHandle::predict_native(std::span<const imaging::ImageTensor> batch) const {
  const nnet::Shape3 want = net_->input_shape();
  for (const auto& img : batch)
    if (want.channels != 3 || img.height != want.height || img.width != want.width) {
      throw Error(Errc::ShapeMismatch, "image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                           " does not match model input " + std::to_string(want.height) + "x" +
                                           std::to_string(want.width));
    }
  constexpr std::size_t kChunk = 16;
  ProbMatrix out;
  for (std::size_t start = 0; start < batch.size(); start += kChunk) {
    const auto part = batch.subspan(start, std::min(kChunk, batch.size() - start));
    nnet::Tensor y = nnet::infer(*net_, nnet::to_batch(part));
    if (!net_->softmax_index()) y = nnet::softmax(y);
    ProbMatrix chunk(y.batch(), y.channels());
    chunk.data = std::move(y.data);
    out.append(chunk);
  }
  return out;
}

ProbMatrix ModelHandle::predict_remote(std::span<const imaging::ImageTensor> batch) const {
  RemoteState& st = *remote_;
  const std::optional<int> cols =
      st.class_names.empty() ? std::nullopt : std::optional<int>(static_cast<int>(st.class_names.size()));
  const std::size_t cap = static_cast<std::size_t>(st.options.batch_cap);

  auto run_chunk = [&st, cols](std::span<const imaging::ImageTensor> part) {
    const std::vector<std::uint8_t> body = encode_predict_request(part);
    const std::string id = new_request_id();
    const std::string path = st.url.base + kPredictPath;
    auto res = st.with_retries(
        [&] {
          httplib::Headers headers{{kRequestIdHeader, id}};
          return st.client().Post(path, headers, reinterpret_cast<const char*>(body.data()), body.size(),
                                  "application/octet-stream");
        },
        "POST " + path);
    if (res->status != 200) {
      throw Error(Errc::ProtocolError,
                  "predict returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    }
    return decode_predict_response(res->body, static_cast<int>(part.size()), cols);
  };

  std::vector<std::span<const imaging::ImageTensor>> parts;
  for (std::size_t start = 0; start < batch.size(); start += cap)
    parts.push_back(batch.subspan(start, std::min(cap, batch.size() - start)));

  ProbMatrix out;
  const std::size_t window = static_cast<std::size_t>(st.options.max_in_flight);
  for (std::size_t start = 0; start < parts.size(); start += window) {
    std::vector<std::future<ProbMatrix>> inflight;
    for (std::size_t k = start; k < std::min(parts.size(), start + window); ++k)
      inflight.push_back(std::async(std::launch::async, run_chunk, parts[k]));
    for (auto& f : inflight) out.append(f.get());
  }
  return out;
}

std::pair<int, double> ModelHandle::top_class(const imaging::ImageTensor& image) const {
  const ProbMatrix p = predict_batch(std::span<const imaging::ImageTensor>(&image, 1));
  const int k = argmax(p.row(0));
  return {k, p(0, k)};
}

bool is_remote_spec(std::string_view spec) {
  return spec == "remote" || spec.starts_with("remote:") || spec.starts_with("http://") ||
         spec.starts_with("https://");
}

ModelHandle open_model(std::string_view spec, const RemoteOptions& defaults) {
  if (is_remote_spec(spec)) {
    RemoteOptions opts = defaults;
    if (spec == "remote") {
      const char* env = std::getenv(kModelUrlEnv);
      if (!env || !*env) throw Error(Errc::ConfigError, std::string("no model URL given and ") + kModelUrlEnv + " is unset");
      opts.url = env;
    } else {
      opts.url = std::string(spec.starts_with("remote:") ? spec.substr(7) : spec);
    }
    return ModelHandle::remote(std::move(opts));
  }
  const std::string path(spec.starts_with("native:") ? spec.substr(7) : spec);
  nnet::Checkpoint ckpt = nnet::load_checkpoint(path);
  auto net = std::make_shared<const nnet::Network>(std::move(ckpt.network));
  return ModelHandle::native(std::move(net), std::move(ckpt.class_names), path);
}

}  // namespace xplain::gateway
