#include "xplain/explain.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <numeric>

#include <Eigen/Dense>

#include "xplain/error.hpp"
#include "xplain/rng.hpp"

namespace xplain::explain {

using imaging::ImageTensor;
using imaging::RangeTag;
using imaging::RgbImage;

namespace {

constexpr std::array<int, 4> kDy{-1, 1, 0, 0};
constexpr std::array<int, 4> kDx{0, 0, -1, 1};

ImageTensor as_unit(const ImageTensor& img) {
  switch (img.range) {
    case RangeTag::Unit:
      return img;
    case RangeTag::Raw255:
      return imaging::scale_unit(img);
    case RangeTag::Normalized: {
      ImageTensor u = imaging::denormalize(img);
      for (float& v : u.data) v = std::clamp(v, 0.0f, 1.0f);
      return u;
    }
  }
  return img;
}

std::array<double, 3> rgb_to_lab(double r, double g, double b) {
  auto lin = [](double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); };
  r = lin(r);
  g = lin(g);
  b = lin(b);
  double x = (0.412453 * r + 0.357580 * g + 0.180423 * b) / 0.950456;
  double y = 0.212671 * r + 0.715160 * g + 0.072169 * b;
  double z = (0.019334 * r + 0.119193 * g + 0.950227 * b) / 1.088754;
  auto f = [](double t) { return t > 0.008856 ? std::cbrt(t) : 7.787 * t + 16.0 / 116.0; };
  double fx = f(x), fy = f(y), fz = f(z);
  double l = y > 0.008856 ? 116.0 * fy - 16.0 : 903.3 * y;
  return {l, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

struct Center {
  double l, a, b, y, x;
};

// Union-find over connected components.
struct Components {
  std::vector<int> parent;
  std::vector<std::size_t> size;
  std::vector<std::vector<std::size_t>> members;

  int find(int c) {
    while (parent[c] != c) {
      parent[c] = parent[parent[c]];
      c = parent[c];
    }
    return c;
  }
};

}  // namespace

std::vector<std::size_t> SuperpixelMap::areas() const {
  std::vector<std::size_t> out(static_cast<std::size_t>(std::max(num_segments, 0)), 0);
  for (auto l : labels) {
    if (l >= 0 && l < num_segments) ++out[l];
  }
  return out;
}

void SuperpixelMap::validate() const {
  if (height <= 0 || width <= 0 || labels.size() != static_cast<std::size_t>(height) * width)
    throw Error(Errc::InvalidArgument, "superpixel map size does not match its dimensions");
  if (num_segments <= 0) throw Error(Errc::InvalidArgument, "superpixel map has no segments");
  for (auto l : labels) {
    if (l < 0 || l >= num_segments) throw Error(Errc::InvalidArgument, "superpixel label out of range");
  }
  std::vector<std::uint8_t> seen_label(num_segments, 0);
  std::vector<std::uint8_t> visited(labels.size(), 0);
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (visited[start]) continue;
    auto l = labels[start];
    if (seen_label[l]) throw Error(Errc::InvalidArgument, "superpixel " + std::to_string(l) + " is not 4-connected");
    seen_label[l] = 1;
    std::deque<std::size_t> queue{start};
    visited[start] = 1;
    while (!queue.empty()) {
      std::size_t p = queue.front();
      queue.pop_front();
      int y = static_cast<int>(p / width), x = static_cast<int>(p % width);
      for (int k = 0; k < 4; ++k) {
        int ny = y + kDy[k], nx = x + kDx[k];
        if (ny < 0 || ny >= height || nx < 0 || nx >= width) continue;
        std::size_t q = static_cast<std::size_t>(ny) * width + nx;
        if (!visited[q] && labels[q] == l) {
          visited[q] = 1;
          queue.push_back(q);
        }
      }
    }
  }
  for (int l = 0; l < num_segments; ++l) {
    if (!seen_label[l]) throw Error(Errc::InvalidArgument, "superpixel labels are not dense");
  }
}

SuperpixelMap segment_superpixels(const ImageTensor& input, const SlicOptions& opts) {
  input.validate();
  if (opts.target_segments < 1) throw Error(Errc::InvalidArgument, "target_segments must be positive");
  if (!(opts.compactness > 0.0)) throw Error(Errc::InvalidArgument, "compactness must be positive");
  const ImageTensor unit = as_unit(input);
  const int h = unit.height, w = unit.width;
  const std::size_t n = unit.plane();

  std::vector<std::array<double, 3>> lab(n);
  for (std::size_t p = 0; p < n; ++p)
    lab[p] = rgb_to_lab(unit.data[p], unit.data[n + p], unit.data[2 * n + p]);

  const double step = std::sqrt(static_cast<double>(n) / opts.target_segments);
  const int ny = std::max(1, static_cast<int>(std::lround(h / step)));
  const int nx = std::max(1, static_cast<int>(std::lround(w / step)));

  auto idx = [w](int y, int x) { return static_cast<std::size_t>(y) * w + x; };
  auto gradient = [&](int y, int x) {
    auto d2 = [&](std::size_t p, std::size_t q) {
      double s = 0.0;
      for (int c = 0; c < 3; ++c) s += (lab[p][c] - lab[q][c]) * (lab[p][c] - lab[q][c]);
      return s;
    };
    int x0 = std::max(x - 1, 0), x1 = std::min(x + 1, w - 1);
    int y0 = std::max(y - 1, 0), y1 = std::min(y + 1, h - 1);
    return d2(idx(y, x1), idx(y, x0)) + d2(idx(y1, x), idx(y0, x));
  };

  std::vector<Center> centers;
  centers.reserve(static_cast<std::size_t>(nx) * ny);
  for (int i = 0; i < ny; ++i) {
    for (int j = 0; j < nx; ++j) {
      int cy = std::min(h - 1, static_cast<int>((i + 0.5) * h / ny));
      int cx = std::min(w - 1, static_cast<int>((j + 0.5) * w / nx));
      int by = cy, bx = cx;
      double best = gradient(cy, cx);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          int yy = cy + dy, xx = cx + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          double g = gradient(yy, xx);
          if (g < best) {
            best = g;
            by = yy;
            bx = xx;
          }
        }
      }
      const auto& c = lab[idx(by, bx)];
      centers.push_back({c[0], c[1], c[2], static_cast<double>(by), static_cast<double>(bx)});
    }
  }

  const double spatial = (opts.compactness / step) * (opts.compactness / step);
  auto distance = [&](const Center& c, int y, int x) {
    const auto& v = lab[idx(y, x)];
    double dc = (v[0] - c.l) * (v[0] - c.l) + (v[1] - c.a) * (v[1] - c.a) + (v[2] - c.b) * (v[2] - c.b);
    double ds = (y - c.y) * (y - c.y) + (x - c.x) * (x - c.x);
    return dc + ds * spatial;
  };

  std::vector<int> assign(n, -1);
  std::vector<double> dist(n);
  const int radius = static_cast<int>(std::ceil(step));
  for (int it = 0; it < std::max(1, opts.max_iterations); ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    std::fill(assign.begin(), assign.end(), -1);
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const Center& c = centers[k];
      int y0 = std::max(0, static_cast<int>(c.y) - radius), y1 = std::min(h - 1, static_cast<int>(c.y) + radius);
      int x0 = std::max(0, static_cast<int>(c.x) - radius), x1 = std::min(w - 1, static_cast<int>(c.x) + radius);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          double d = distance(c, y, x);
          std::size_t p = idx(y, x);
          if (d < dist[p]) {
            dist[p] = d;
            assign[p] = static_cast<int>(k);
          }
        }
      }
    }
    for (std::size_t p = 0; p < n; ++p) {
      if (assign[p] >= 0) continue;
      int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
      for (std::size_t k = 0; k < centers.size(); ++k) {
        double d = distance(centers[k], y, x);
        if (d < dist[p]) {
          dist[p] = d;
          assign[p] = static_cast<int>(k);
        }
      }
    }
    std::vector<std::array<double, 6>> acc(centers.size(), {0, 0, 0, 0, 0, 0});
    for (std::size_t p = 0; p < n; ++p) {
      auto& a = acc[assign[p]];
      a[0] += lab[p][0];
      a[1] += lab[p][1];
      a[2] += lab[p][2];
      a[3] += static_cast<double>(p / w);
      a[4] += static_cast<double>(p % w);
      a[5] += 1.0;
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const auto& a = acc[k];
      if (a[5] == 0.0) continue;
      centers[k] = {a[0] / a[5], a[1] / a[5], a[2] / a[5], a[3] / a[5], a[4] / a[5]};
    }
  }

  // Connected components of the clustering.
  std::vector<int> comp(n, -1);
  Components cc;
  for (std::size_t start = 0; start < n; ++start) {
    if (comp[start] >= 0) continue;
    int id = static_cast<int>(cc.parent.size());
    cc.parent.push_back(id);
    cc.members.emplace_back();
    auto& mem = cc.members.back();
    comp[start] = id;
    mem.push_back(start);
    for (std::size_t head = 0; head < mem.size(); ++head) {
      std::size_t p = mem[head];
      int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
      for (int k = 0; k < 4; ++k) {
        int yy = y + kDy[k], xx = x + kDx[k];
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        std::size_t q = idx(yy, xx);
        if (comp[q] < 0 && assign[q] == assign[p]) {
          comp[q] = id;
          mem.push_back(q);
        }
      }
    }
    cc.size.push_back(mem.size());
  }

  const double min_size = static_cast<double>(n) / (4.0 * opts.target_segments);
  std::vector<int> order(cc.parent.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return cc.size[a] < cc.size[b]; });
  bool merged = true;
  while (merged) {
    merged = false;
    for (int c : order) {
      int r = cc.find(c);
      if (static_cast<double>(cc.size[r]) >= min_size) continue;
      std::vector<std::pair<int, std::size_t>> border;
      for (std::size_t p : cc.members[r]) {
        int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
        for (int k = 0; k < 4; ++k) {
          int yy = y + kDy[k], xx = x + kDx[k];
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          int t = cc.find(comp[idx(yy, xx)]);
          if (t == r) continue;
          auto it = std::find_if(border.begin(), border.end(), [t](const auto& e) { return e.first == t; });
          if (it == border.end())
            border.emplace_back(t, 1);
          else
            ++it->second;
        }
      }
      if (border.empty()) continue;
      auto best = border.front();
      for (const auto& e : border) {
        if (e.second > best.second || (e.second == best.second && e.first < best.first)) best = e;
      }
      int t = best.first;
      cc.parent[r] = t;
      cc.size[t] += cc.size[r];
      auto& dst = cc.members[t];
      dst.insert(dst.end(), cc.members[r].begin(), cc.members[r].end());
      cc.members[r].clear();
      cc.members[r].shrink_to_fit();
      merged = true;
    }
  }

  SuperpixelMap out;
  out.height = h;
  out.width = w;
  out.labels.assign(n, -1);
  std::vector<int> relabel(cc.parent.size(), -1);
  for (std::size_t p = 0; p < n; ++p) {
    int r = cc.find(comp[p]);
    if (relabel[r] < 0) relabel[r] = out.num_segments++;
    out.labels[p] = relabel[r];
  }
  return out;
}

// -- perturbation plumbing ------------------------------------------------------

std::string_view filler_name(FillerMode mode) noexcept {
  return mode == FillerMode::MeanColor ? "mean_color" : "gray";
}

FillerMode parse_filler(std::string_view name) {
  if (name == "mean_color" || name == "mean") return FillerMode::MeanColor;
  if (name == "gray" || name == "grey") return FillerMode::Gray;
  throw Error(Errc::InvalidArgument, "unknown filler '" + std::string(name) + "'");
}

namespace {

void check_same_size(const ImageTensor& img, const SuperpixelMap& sp) {
  if (img.height != sp.height || img.width != sp.width)
    throw Error(Errc::ShapeMismatch, "superpixel map does not match the image size");
}

}  // namespace

ImageTensor segment_filler(const ImageTensor& img, const SuperpixelMap& sp, FillerMode mode) {
  check_same_size(img, sp);
  ImageTensor out(img.height, img.width, img.range);
  const std::size_t n = img.plane();
  if (mode == FillerMode::Gray) {
    const auto norm = imaging::NormalizationConstants::imagenet();
    for (int c = 0; c < ImageTensor::kChannels; ++c) {
      float v = 0.5f;
      if (img.range == RangeTag::Raw255) v = 127.5f;
      if (img.range == RangeTag::Normalized) v = static_cast<float>((0.5 - norm.mean[c]) / norm.std[c]);
      auto ch = out.channel(c);
      std::fill(ch.begin(), ch.end(), v);
    }
    return out;
  }
  const auto areas = sp.areas();
  for (int c = 0; c < ImageTensor::kChannels; ++c) {
    std::vector<double> sum(sp.num_segments, 0.0);
    auto src = img.channel(c);
    for (std::size_t p = 0; p < n; ++p) sum[sp.labels[p]] += src[p];
    auto dst = out.channel(c);
    for (std::size_t p = 0; p < n; ++p) {
      auto l = sp.labels[p];
      dst[p] = static_cast<float>(sum[l] / static_cast<double>(areas[l]));
    }
  }
  return out;
}

ImageTensor compose_masked(const ImageTensor& img, const ImageTensor& filler, const SuperpixelMap& sp,
                           const Mask& mask) {
  check_same_size(img, sp);
  check_same_size(filler, sp);
  if (mask.size() != static_cast<std::size_t>(sp.num_segments))
    throw Error(Errc::ShapeMismatch, "mask length does not match the number of superpixels");
  ImageTensor out = img;
  const std::size_t n = img.plane();
  for (std::size_t p = 0; p < n; ++p) {
    if (mask[sp.labels[p]]) continue;
    for (int c = 0; c < ImageTensor::kChannels; ++c) out.data[c * n + p] = filler.data[c * n + p];
  }
  return out;
}

MaskEvaluator image_mask_evaluator(const gateway::ModelHandle& model, const ImageTensor& img,
                                   const SuperpixelMap& sp, FillerMode filler, int chunk) {
  check_same_size(img, sp);
  if (chunk < 1) throw Error(Errc::InvalidArgument, "chunk must be positive");
  auto fill = std::make_shared<const ImageTensor>(segment_filler(img, sp, filler));
  auto base = std::make_shared<const ImageTensor>(img);
  auto map = std::make_shared<const SuperpixelMap>(sp);
  return [model, fill, base, map, chunk](std::span<const Mask> masks) {
    gateway::ProbMatrix out;
    for (std::size_t start = 0; start < masks.size(); start += chunk) {
      std::size_t end = std::min(masks.size(), start + static_cast<std::size_t>(chunk));
      std::vector<ImageTensor> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(compose_masked(*base, *fill, *map, masks[i]));
      out.append(model.predict_batch(batch));
    }
    return out;
  };
}

// -- results --------------------------------------------------------------------

std::string_view method_name(Method m) noexcept {
  switch (m) {
    case Method::Lime:
      return "lime";
    case Method::KernelShap:
      return "kernel_shap";
    case Method::GradCam:
      return "grad_cam";
  }
  return "unknown";
}

nlohmann::json to_json(const AttributionResult& r, const std::vector<std::string>& class_names) {
  nlohmann::json j;
  j["method"] = method_name(r.method);
  j["target_class"] = r.target_class;
  if (r.target_class >= 0 && static_cast<std::size_t>(r.target_class) < class_names.size())
    j["target_class_name"] = class_names[r.target_class];
  j["class_names"] = class_names;
  j["base_value"] = r.base_value;
  if (r.method == Method::GradCam) {
    j["map_shape"] = {r.raw_height, r.raw_width};
    j["scores"] = r.raw_map;
    j["output_shape"] = {r.map_height, r.map_width};
  } else {
    j["scores"] = r.scores;
  }
  if (!r.selected.empty()) j["selected"] = r.selected;
  j["metadata"] = r.metadata;
  return j;
}

std::vector<double> pixel_attribution(const AttributionResult& r, const SuperpixelMap* sp) {
  if (r.method == Method::GradCam) return r.scores;
  if (sp == nullptr) throw Error(Errc::InvalidArgument, "superpixel map required");
  if (r.scores.size() != static_cast<std::size_t>(sp->num_segments))
    throw Error(Errc::ShapeMismatch, "score count does not match the number of superpixels");
  std::vector<double> out(sp->labels.size());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = r.scores[sp->labels[p]];
  return out;
}

double positive_mass_share(std::span<const double> map, int height, int width, int x0, int x1) {
  if (map.size() != static_cast<std::size_t>(height) * width) throw Error(Errc::ShapeMismatch, "map size mismatch");
  double inside = 0.0, total = 0.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v = std::max(map[static_cast<std::size_t>(y) * width + x], 0.0);
      total += v;
      if (x >= x0 && x < x1) inside += v;
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

// -- LIME -----------------------------------------------------------------------

namespace {

struct RidgeFit {
  std::vector<double> coef;  // one per requested column
  double intercept = 0.0;
  double r2 = 0.0;
};

// Weighted ridge on the standardized design; columns are indices into the
// mask vectors. Zero-variance columns get a zero coefficient.
RidgeFit weighted_ridge(std::span<const Mask> x, std::span<const double> y, std::span<const double> w,
                        std::span<const int> cols, double lambda) {
  const std::size_t n = x.size();
  const std::size_t m = cols.size();
  double sw = 0.0, ybar = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sw += w[i];
    ybar += w[i] * y[i];
  }
  ybar /= sw;
  std::vector<double> mean(m, 0.0), sd(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) mean[j] += w[i] * x[i][cols[j]];
    mean[j] /= sw;
    for (std::size_t i = 0; i < n; ++i) {
      double d = x[i][cols[j]] - mean[j];
      sd[j] += w[i] * d * d;
    }
    sd[j] = std::sqrt(sd[j] / sw);
  }
  std::vector<std::size_t> live;
  for (std::size_t j = 0; j < m; ++j) {
    if (sd[j] > 1e-12) live.push_back(j);
  }

  RidgeFit fit;
  fit.coef.assign(m, 0.0);
  if (!live.empty()) {
    const auto k = static_cast<Eigen::Index>(live.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) + k, k);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n) + k);
    for (std::size_t i = 0; i < n; ++i) {
      double s = std::sqrt(w[i]);
      for (Eigen::Index j = 0; j < k; ++j) {
        std::size_t c = live[j];
        a(static_cast<Eigen::Index>(i), j) = s * (x[i][cols[c]] - mean[c]) / sd[c];
      }
      b(static_cast<Eigen::Index>(i)) = s * (y[i] - ybar);
    }
    double root = std::sqrt(lambda);
    for (Eigen::Index j = 0; j < k; ++j) a(static_cast<Eigen::Index>(n) + j, j) = root;
    Eigen::VectorXd beta = a.colPivHouseholderQr().solve(b);
    for (Eigen::Index j = 0; j < k; ++j) fit.coef[live[j]] = beta(j) / sd[live[j]];
  }
  fit.intercept = ybar;
  for (std::size_t j = 0; j < m; ++j) fit.intercept -= fit.coef[j] * mean[j];

  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double pred = fit.intercept;
    for (std::size_t j = 0; j < m; ++j) pred += fit.coef[j] * x[i][cols[j]];
    ss_res += w[i] * (y[i] - pred) * (y[i] - pred);
    ss_tot += w[i] * (y[i] - ybar) * (y[i] - ybar);
  }
  fit.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : 0.0;
  return fit;
}

std::vector<int> forward_selection(std::span<const Mask> x, std::span<const double> y, std::span<const double> w,
                                   int num_segments, int num_features) {
  std::vector<int> chosen;
  std::vector<std::uint8_t> used(num_segments, 0);
  for (int round = 0; round < num_features; ++round) {
    int best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int f = 0; f < num_segments; ++f) {
      if (used[f]) continue;
      std::vector<int> trial = chosen;
      trial.push_back(f);
      double score = weighted_ridge(x, y, w, trial, 0.0).r2;
      if (score > best_score) {
        best_score = score;
        best = f;
      }
    }
    used[best] = 1;
    chosen.push_back(best);
  }
  return chosen;
}

void check_rows(const gateway::ProbMatrix& probs, std::size_t expected) {
  if (probs.rows != static_cast<int>(expected))
    throw Error(Errc::ShapeMismatch, "evaluator returned " + std::to_string(probs.rows) + " rows for " +
                                         std::to_string(expected) + " masks");
}

}  // namespace

AttributionResult lime_explain_masks(int num_segments, const MaskEvaluator& evaluate, const LimeOptions& opts) {
  if (num_segments < 1) throw Error(Errc::InvalidArgument, "LIME needs at least one superpixel");
  if (opts.num_samples < num_segments + 2)
    throw Error(Errc::InvalidArgument, "num_samples must be at least S + 2");
  if (opts.num_features < 1) throw Error(Errc::InvalidArgument, "num_features must be positive");
  if (!(opts.kernel_width > 0.0)) throw Error(Errc::InvalidArgument, "kernel_width must be positive");
  if (!(opts.ridge_lambda >= 0.0)) throw Error(Errc::InvalidArgument, "ridge_lambda must be non-negative");

  const auto n = static_cast<std::size_t>(opts.num_samples);
  std::vector<Mask> masks(n, Mask(num_segments, 1));
  Rng rng(opts.seed);
  for (std::size_t i = 1; i < n; ++i) {
    for (auto& bit : masks[i]) bit = rng.bernoulli(0.5) ? 1 : 0;
  }
  bool varied = false;
  for (std::size_t i = 1; i < n && !varied; ++i) varied = masks[i] != masks[0];
  if (!varied) throw Error(Errc::DegenerateDesign, "all perturbation masks are identical");

  const gateway::ProbMatrix probs = evaluate(masks);
  check_rows(probs, n);
  const int target = opts.target_class.value_or(gateway::argmax(probs.row(0)));
  if (target < 0 || target >= probs.cols) throw Error(Errc::InvalidArgument, "target class out of range");

  std::vector<double> y(n), w(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = probs(static_cast<int>(i), target);
    auto on = std::count(masks[i].begin(), masks[i].end(), std::uint8_t{1});
    double d = on == 0 ? 1.0 : 1.0 - std::sqrt(static_cast<double>(on) / num_segments);
    w[i] = std::exp(-(d * d) / (opts.kernel_width * opts.kernel_width));
  }

  std::vector<int> features;
  const bool select = num_segments > opts.num_features;
  if (select) {
    features = forward_selection(masks, y, w, num_segments, opts.num_features);
  } else {
    features.resize(num_segments);
    std::iota(features.begin(), features.end(), 0);
  }
  const RidgeFit fit = weighted_ridge(masks, y, w, features, opts.ridge_lambda);

  AttributionResult r;
  r.method = Method::Lime;
  r.target_class = target;
  r.base_value = fit.intercept;
  r.scores.assign(num_segments, 0.0);
  std::vector<int> order(features.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return std::abs(fit.coef[a]) > std::abs(fit.coef[b]); });
  const std::size_t keep = std::min(order.size(), static_cast<std::size_t>(opts.num_features));
  for (std::size_t k = 0; k < keep; ++k) {
    int j = order[k];
    r.scores[features[j]] = fit.coef[j];
    r.selected.push_back(features[j]);
  }

  double local = fit.intercept;
  for (std::size_t j = 0; j < features.size(); ++j) local += fit.coef[j];
  r.metadata = {{"num_samples", opts.num_samples},
                {"num_features", opts.num_features},
                {"num_segments", num_segments},
                {"kernel_width", opts.kernel_width},
                {"distance", "cosine"},
                {"ridge_lambda", opts.ridge_lambda},
                {"design", "standardized"},
                {"feature_selection", select ? "forward_selection" : "none"},
                {"seed", opts.seed},
                {"filler", filler_name(opts.filler)},
                {"score", fit.r2},
                {"local_prediction", local},
                {"model_prediction", y[0]}};
  return r;
}

AttributionResult lime_explain(const gateway::ModelHandle& model, const ImageTensor& img, const SuperpixelMap& sp,
                               const LimeOptions& opts) {
  auto eval = image_mask_evaluator(model, img, sp, opts.filler);
  return lime_explain_masks(sp.num_segments, eval, opts);
}

// -- Shapley ----------------------------------------------------------------------

ShapleyValues exact_shapley(int num_features, const std::function<double(std::uint32_t)>& value) {
  if (num_features < 1) throw Error(Errc::InvalidArgument, "exact Shapley needs at least one player");
  if (num_features > kMaxExactShapleyFeatures)
    throw Error(Errc::TooManyFeatures, std::to_string(num_features) + " players exceed the exact limit of " +
                                           std::to_string(kMaxExactShapleyFeatures));
  const std::uint32_t total = 1u << num_features;
  std::vector<double> v(total);
  for (std::uint32_t t = 0; t < total; ++t) v[t] = value(t);

  // weight[s] = s! (S - s - 1)! / S!
  std::vector<double> weight(num_features);
  for (int s = 0; s < num_features; ++s) {
    double lw = std::lgamma(s + 1.0) + std::lgamma(num_features - s + 0.0) - std::lgamma(num_features + 1.0);
    weight[s] = std::exp(lw);
  }

  ShapleyValues out;
  out.base = v[0];
  out.phi.assign(num_features, 0.0);
  for (int i = 0; i < num_features; ++i) {
    const std::uint32_t bit = 1u << i;
    double acc = 0.0;
    for (std::uint32_t t = 0; t < total; ++t) {
      if (t & bit) continue;
      acc += weight[std::popcount(t)] * (v[t | bit] - v[t]);
    }
    out.phi[i] = acc;
  }
  return out;
}

namespace {

double log_choose(int n, int k) { return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0); }

struct Coalitions {
  std::vector<Mask> masks;  // proper coalitions, then empty, then full
  std::vector<double> weights;
  bool enumerated = false;
};

Coalitions make_coalitions(int s, const ShapOptions& opts) {
  Coalitions out;
  const double proper = std::ldexp(1.0, s) - 2.0;
  if (s <= 30 && proper <= opts.num_samples) {
    out.enumerated = true;
    for (std::uint32_t t = 1; t + 1 < (1u << s); ++t) {
      Mask m(s, 0);
      for (int i = 0; i < s; ++i) m[i] = (t >> i) & 1u;
      int k = std::popcount(t);
      out.masks.push_back(std::move(m));
      out.weights.push_back(std::exp(std::log(s - 1.0) - log_choose(s, k) - std::log(double(k)) -
                                     std::log(double(s - k))));
    }
  } else {
    // Paired sampling: draw a size with probability proportional to
    // (S - 1) / (s (S - s)), a uniform coalition of that size, and its
    // complement. Duplicates accumulate weight.
    std::vector<double> cdf(s - 1);
    double sum = 0.0;
    for (int k = 1; k < s; ++k) {
      sum += (s - 1.0) / (static_cast<double>(k) * (s - k));
      cdf[k - 1] = sum;
    }
    Rng rng(opts.seed);
    std::vector<int> perm(s);
    std::vector<std::pair<Mask, double>> drawn;
    auto add = [&](Mask m) {
      auto it = std::find_if(drawn.begin(), drawn.end(), [&](const auto& e) { return e.first == m; });
      if (it == drawn.end())
        drawn.emplace_back(std::move(m), 1.0);
      else
        it->second += 1.0;
    };
    const int draws = std::max(1, opts.num_samples / 2);
    for (int d = 0; d < draws; ++d) {
      double u = rng.uniform() * sum;
      int k = static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin()) + 1;
      k = std::min(k, s - 1);
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(std::span<int>(perm));
      Mask m(s, 0);
      for (int i = 0; i < k; ++i) m[perm[i]] = 1;
      Mask comp(s, 0);
      for (int i = 0; i < s; ++i) comp[i] = m[i] ? 0 : 1;
      add(std::move(m));
      add(std::move(comp));
    }
    std::sort(drawn.begin(), drawn.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [m, c] : drawn) {
      out.masks.push_back(std::move(m));
      out.weights.push_back(c);
    }
  }
  out.masks.emplace_back(s, 0);
  out.masks.emplace_back(s, 1);
  return out;
}

}  // namespace

std::vector<AttributionResult> kernel_shap_masks(int num_segments, const MaskEvaluator& evaluate,
                                                 std::span<const int> classes, const ShapOptions& opts) {
  const int s = num_segments;
  if (s < 2) throw Error(Errc::InvalidArgument, "Kernel SHAP needs at least two superpixels");
  if (opts.num_samples < 1) throw Error(Errc::InvalidArgument, "num_samples must be positive");
  const Coalitions co = make_coalitions(s, opts);
  const std::size_t m = co.weights.size();

  const gateway::ProbMatrix probs = evaluate(co.masks);
  check_rows(probs, co.masks.size());
  const int empty_row = static_cast<int>(m), full_row = static_cast<int>(m + 1);

  // Eliminate phi_{S-1} = delta - sum(others) and solve the reduced weighted
  // least squares for the rest.
  Eigen::MatrixXd a(static_cast<Eigen::Index>(m), s - 1);
  for (std::size_t i = 0; i < m; ++i) {
    double sw = std::sqrt(co.weights[i]);
    double last = co.masks[i][s - 1];
    for (int j = 0; j + 1 < s; ++j) a(static_cast<Eigen::Index>(i), j) = sw * (co.masks[i][j] - last);
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);

  std::vector<AttributionResult> out;
  for (int target : classes) {
    if (target < 0 || target >= probs.cols) throw Error(Errc::InvalidArgument, "target class out of range");
    const double base = probs(empty_row, target);
    const double fx = probs(full_row, target);
    const double delta = fx - base;
    Eigen::VectorXd b(static_cast<Eigen::Index>(m));
    for (std::size_t i = 0; i < m; ++i) {
      double sw = std::sqrt(co.weights[i]);
      b(static_cast<Eigen::Index>(i)) =
          sw * (probs(static_cast<int>(i), target) - base - co.masks[i][s - 1] * delta);
    }
    Eigen::VectorXd phi = qr.solve(b);

    AttributionResult r;
    r.method = Method::KernelShap;
    r.target_class = target;
    r.base_value = base;
    r.scores.assign(s, 0.0);
    double rest = 0.0;
    for (int j = 0; j + 1 < s; ++j) {
      r.scores[j] = phi(j);
      rest += phi(j);
    }
    r.scores[s - 1] = delta - rest;
    r.metadata = {{"num_samples", opts.num_samples},
                  {"num_coalitions", m},
                  {"enumerated", co.enumerated},
                  {"num_segments", s},
                  {"seed", opts.seed},
                  {"background", filler_name(opts.background)},
                  {"model_prediction", fx}};
    out.push_back(std::move(r));
  }
  return out;
}

AttributionResult kernel_shap(const gateway::ModelHandle& model, const ImageTensor& img, const SuperpixelMap& sp,
                              int target_class, const ShapOptions& opts) {
  auto eval = image_mask_evaluator(model, img, sp, opts.background);
  const int cls[] = {target_class};
  return kernel_shap_masks(sp.num_segments, eval, cls, opts).front();
}

std::vector<AttributionResult> kernel_shap_by_probability(const gateway::ModelHandle& model,
                                                          const ImageTensor& img, const SuperpixelMap& sp,
                                                          const ShapOptions& opts) {
  const ImageTensor one[] = {img};
  const gateway::ProbMatrix p = model.predict_batch(one);
  std::vector<int> order(p.cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p(0, a) > p(0, b); });
  auto eval = image_mask_evaluator(model, img, sp, opts.background);
  return kernel_shap_masks(sp.num_segments, eval, order, opts);
}

// -- Grad-CAM ---------------------------------------------------------------------

namespace {

std::vector<double> resize_map(const std::vector<double>& src, int ih, int iw, int oh, int ow) {
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  auto coord = [](int d, int in, int o) {
    double s = (d + 0.5) * in / o - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (int y = 0; y < oh; ++y) {
    double sy = coord(y, ih, oh);
    int y0 = static_cast<int>(std::floor(sy));
    int y1 = std::min(y0 + 1, ih - 1);
    double fy = sy - y0;
    for (int x = 0; x < ow; ++x) {
      double sx = coord(x, iw, ow);
      int x0 = static_cast<int>(std::floor(sx));
      int x1 = std::min(x0 + 1, iw - 1);
      double fx = sx - x0;
      auto v = [&](int yy, int xx) { return src[static_cast<std::size_t>(yy) * iw + xx]; };
      double top = v(y0, x0) + (v(y0, x1) - v(y0, x0)) * fx;
      double bot = v(y1, x0) + (v(y1, x1) - v(y1, x0)) * fx;
      out[static_cast<std::size_t>(y) * ow + x] = top + (bot - top) * fy;
    }
  }
  return out;
}

}  // namespace

AttributionResult grad_cam(const nnet::Network& net, const ImageTensor& img, int target_class,
                           std::string_view layer) {
  std::size_t li = 0;
  if (layer == kLastConv) {
    auto last = net.last_conv();
    if (!last) throw Error(Errc::UnknownLayerName, "network has no convolution layer");
    li = *last;
  } else {
    li = net.layer_index(layer);
  }
  if (target_class < 0 || target_class >= net.num_outputs())
    throw Error(Errc::InvalidArgument, "target class out of range");

  const ImageTensor one[] = {img};
  const nnet::Tape tape = nnet::forward(net, nnet::to_batch(one), false, nullptr);
  const nnet::Tensor& z = nnet::logits(net, tape);
  nnet::Tensor seed(1, z.channels(), 1, 1);
  seed(0, target_class, 0, 0) = 1.0;
  const std::string name = net.layers()[li].name;
  const std::string capture[] = {name};
  const nnet::Gradients g = nnet::backward_from_logits(net, tape, seed, capture);
  const nnet::Tensor& act = tape.output_of(li);
  const nnet::Tensor& grad = g.activations.at(name);

  const int k = act.channels(), h = act.height(), w = act.width();
  std::vector<double> alpha(k, 0.0);
  for (int c = 0; c < k; ++c) {
    double s = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) s += grad(0, c, y, x);
    alpha[c] = s / (static_cast<double>(h) * w);
  }
  std::vector<double> map(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int c = 0; c < k; ++c) s += alpha[c] * act(0, c, y, x);
      map[static_cast<std::size_t>(y) * w + x] = std::max(s, 0.0);
    }
  }
  auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double mn = *lo, mx = *hi;
  const bool flat = !(mx > mn);
  for (double& v : map) v = flat ? 0.0 : (v - mn) / (mx - mn);

  AttributionResult r;
  r.method = Method::GradCam;
  r.target_class = target_class;
  r.raw_height = h;
  r.raw_width = w;
  r.raw_map = map;
  r.map_height = img.height;
  r.map_width = img.width;
  r.scores = resize_map(map, h, w, img.height, img.width);
  for (double& v : r.scores) v = std::clamp(v, 0.0, 1.0);
  r.metadata = {{"layer", name}, {"alpha", alpha}, {"flat_map", flat}, {"objective", "logit"}};
  return r;
}

AttributionResult grad_cam(const gateway::ModelHandle& model, const ImageTensor& img, int target_class,
                           std::string_view layer) {
  const auto caps = model.capabilities();
  if (!caps.has_gradients || !caps.has_feature_maps || model.network() == nullptr)
    throw Error(Errc::GradientsUnavailable, "Grad-CAM needs a native backend with gradients");
  return grad_cam(*model.network(), img, target_class, layer);
}

// -- rendering --------------------------------------------------------------------

std::string_view style_name(RenderStyle s) noexcept {
  switch (s) {
    case RenderStyle::LimeSuperpixelOnly:
      return "lime_superpixel";
    case RenderStyle::LimePosNeg:
      return "lime_posneg";
    case RenderStyle::ShapRedBlue:
      return "shap_red_blue";
    case RenderStyle::CamOverlay:
      return "cam_overlay";
  }
  return "unknown";
}

std::array<std::uint8_t, 3> jet(double m) {
  m = std::clamp(m, 0.0, 1.0);
  auto ch = [m](double off) {
    double v = std::clamp(1.5 - std::abs(4.0 * m - off), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
  };
  return {ch(3.0), ch(2.0), ch(1.0)};
}

std::array<std::uint8_t, 3> red_blue(double v) {
  v = std::clamp(v, -1.0, 1.0);
  auto fade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::abs(v))));
  if (v > 0.0) return {255, fade, fade};
  if (v < 0.0) return {fade, fade, 255};
  return {255, 255, 255};
}

namespace {

bool style_fits(Method m, RenderStyle s) {
  switch (s) {
    case RenderStyle::LimeSuperpixelOnly:
    case RenderStyle::LimePosNeg:
      return m == Method::Lime;
    case RenderStyle::ShapRedBlue:
      return m == Method::KernelShap;
    case RenderStyle::CamOverlay:
      return m == Method::GradCam;
  }
  return false;
}

bool on_boundary(const SuperpixelMap& sp, int y, int x) {
  auto l = sp.at(y, x);
  for (int k = 0; k < 4; ++k) {
    int yy = y + kDy[k], xx = x + kDx[k];
    if (yy < 0 || yy >= sp.height || xx < 0 || xx >= sp.width) continue;
    if (sp.at(yy, xx) != l) return true;
  }
  return false;
}

}  // namespace

RgbImage render(const AttributionResult& result, const ImageTensor& original, const SuperpixelMap* sp,
                RenderStyle style, const RenderOptions& opts) {
  if (!style_fits(result.method, style))
    throw Error(Errc::StyleMismatch, "style " + std::string(style_name(style)) + " cannot render " +
                                         std::string(method_name(result.method)));
  RgbImage base = original.range == RangeTag::Raw255 ? imaging::to_rgb(original) : imaging::to_display(original);
  const int h = base.height, w = base.width;

  if (style == RenderStyle::CamOverlay) {
    if (result.map_height != h || result.map_width != w ||
        result.scores.size() != static_cast<std::size_t>(h) * w)
      throw Error(Errc::ShapeMismatch, "Grad-CAM map does not match the image size");
    RgbImage out(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        auto heat = jet(result.scores[static_cast<std::size_t>(y) * w + x]);
        const std::uint8_t* src = base.px(y, x);
        std::uint8_t* dst = out.px(y, x);
        for (int c = 0; c < 3; ++c) dst[c] = static_cast<std::uint8_t>(std::lround(0.5 * src[c] + 0.5 * heat[c]));
      }
    }
    return out;
  }

  if (sp == nullptr) throw Error(Errc::InvalidArgument, "superpixel map required for this style");
  if (sp->height != h || sp->width != w) throw Error(Errc::ShapeMismatch, "superpixel map does not match the image");
  if (result.scores.size() != static_cast<std::size_t>(sp->num_segments))
    throw Error(Errc::ShapeMismatch, "score count does not match the number of superpixels");

  if (style == RenderStyle::ShapRedBlue) {
    double scale = opts.shap_scale;
    if (!(scale > 0.0)) {
      scale = 0.0;
      for (double v : result.scores) scale = std::max(scale, std::abs(v));
    }
    RgbImage out(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = scale > 0.0 ? result.scores[sp->at(y, x)] / scale : 0.0;
        auto col = red_blue(v);
        std::copy(col.begin(), col.end(), out.px(y, x));
      }
    }
    return out;
  }

  std::vector<std::uint8_t> shown(sp->num_segments, 0);
  for (int s : result.selected) {
    if (s >= 0 && s < sp->num_segments) shown[s] = 1;
  }

  if (style == RenderStyle::LimeSuperpixelOnly) {
    RgbImage out(h, w, 255);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (shown[sp->at(y, x)]) std::copy_n(base.px(y, x), 3, out.px(y, x));
      }
    }
    return out;
  }

  static constexpr std::array<std::uint8_t, 3> kGreen{0, 255, 0};
  static constexpr std::array<std::uint8_t, 3> kRed{255, 0, 0};
  RgbImage out = base;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto l = sp->at(y, x);
      if (!shown[l] || result.scores[l] == 0.0) continue;
      const auto& tint = result.scores[l] > 0.0 ? kGreen : kRed;
      std::uint8_t* dst = out.px(y, x);
      if (on_boundary(*sp, y, x)) {
        std::copy(tint.begin(), tint.end(), dst);
      } else {
        for (int c = 0; c < 3; ++c) dst[c] = static_cast<std::uint8_t>(std::lround(0.5 * dst[c] + 0.5 * tint[c]));
      }
    }
  }
  return out;
}

RgbImage compose_sheet(const std::vector<std::vector<const RgbImage*>>& rows, int gutter) {
  int ph = 0, pw = 0;
  std::size_t cols = 0;
  for (const auto& row : rows) {
    cols = std::max(cols, row.size());
    for (const RgbImage* p : row) {
      if (!p) continue;
      if (ph == 0) {
        ph = p->height;
        pw = p->width;
      } else if (p->height != ph || p->width != pw) {
        throw Error(Errc::ShapeMismatch, "sheet panels must share one size");
      }
    }
  }
  if (ph == 0 || cols == 0) throw Error(Errc::InvalidArgument, "sheet has no panels");
  gutter = std::max(gutter, 0);
  const int nrows = static_cast<int>(rows.size()), ncols = static_cast<int>(cols);
  RgbImage sheet(nrows * ph + (nrows + 1) * gutter, ncols * pw + (ncols + 1) * gutter, 255);
  for (int r = 0; r < nrows; ++r) {
    for (int c = 0; c < static_cast<int>(rows[r].size()); ++c) {
      const RgbImage* p = rows[r][c];
      if (!p) continue;
      int oy = gutter + r * (ph + gutter), ox = gutter + c * (pw + gutter);
      for (int y = 0; y < ph; ++y) std::copy_n(p->px(y, 0), static_cast<std::size_t>(pw) * 3, sheet.px(oy + y, ox));
    }
  }
  return sheet;
}

}  // namespace xplain::explain
