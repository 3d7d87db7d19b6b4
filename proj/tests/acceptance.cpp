// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <sys/wait.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "xplain/dataset.hpp"
#include "xplain/evalbench.hpp"
#include "xplain/explain.hpp"
#include "xplain/imaging.hpp"
#include "xplain/nnet.hpp"
#include "xplain/synthetic.hpp"

namespace fs = std::filesystem;
using namespace xplain;
using xplain::testing::TempDir;

namespace {

// tolerances
constexpr double kFdRelErr = 1e-4;
constexpr double kFdSeconds = 10.0;
constexpr double kShapTol = 1e-6;
constexpr double kShapSeconds = 30.0;
constexpr double kLimeRelTol = 1e-3;
constexpr double kLimeConstTol = 1e-9;
constexpr double kCamTol = 1e-6;
constexpr double kPreprocessTol = 1e-6;
constexpr double kResizeTol = 1e-6;
constexpr double kBlobAccuracy = 0.90;
constexpr double kBaselineAccuracy = 0.85;
constexpr double kTrainSeconds = 120.0;
constexpr double kRightHalfShare = 0.70;
constexpr double kMetricsTol = 1e-12;

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, double v) {
  char b[64];
  std::snprintf(b, sizeof b, f, v);
  return b;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

int run_cli(const TempDir& d, const std::string& args) {
  const std::string cmd = std::string("'") + XPLAIN_CLI_PATH + "' " + args + " >>" + q(d / "cli.log") + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// -- 1. gradients -------------------------------------------------------------------

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-7); }

nnet::Tensor random_tensor(int n, int c, int h, int w, Rng& rng) {
  nnet::Tensor t(n, c, h, w);
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

nnet::Tensor cycling_labels(int n, int classes) {
  std::vector<int> l(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) l[static_cast<std::size_t>(i)] = i % classes;
  return nnet::one_hot(l, classes);
}

// Worst relative error over every parameter and the first layer's output.
double worst_fd_error(nnet::Network net, const nnet::Tensor& x, const nnet::Tensor& y, std::size_t& checked) {
  const double h = 1e-5;
  auto objective = [&](const nnet::Network& n, const nnet::Tensor& in, std::size_t from) {
    Rng r(99);
    return nnet::cross_entropy(nnet::forward(n, in, true, &r, from).output(), y);
  };
  Rng rng(99);
  const nnet::Tape tape = nnet::forward(net, x, true, &rng);
  const std::string first = net.layers().front().name;
  const std::vector<std::string> capture{first};
  const nnet::Gradients g = nnet::backward_from_logits(net, tape, nnet::cross_entropy_logit_grad(tape.output(), y), capture);
  double worst = 0.0;
  for (std::size_t l = 0; l < net.size(); ++l)
    for (int which = 0; which < 2; ++which) {
      auto& vec = which == 0 ? net.params()[l].weight : net.params()[l].bias;
      const auto& an = which == 0 ? g.params[l].weight : g.params[l].bias;
      for (std::size_t i = 0; i < vec.size(); ++i) {
        const double saved = vec[i];
        vec[i] = saved + h;
        const double up = objective(net, x, 0);
        vec[i] = saved - h;
        const double down = objective(net, x, 0);
        vec[i] = saved;
        worst = std::max(worst, rel_err(an[i], (up - down) / (2 * h)));
        ++checked;
      }
    }
  const nnet::Tensor& a0 = tape.output_of(0);
  const nnet::Tensor& ga = g.activations.at(first);
  for (std::size_t i = 0; i < a0.size(); ++i) {
    nnet::Tensor p = a0, m = a0;
    p.data[i] += h;
    m.data[i] -= h;
    worst = std::max(worst, rel_err(ga.data[i], (objective(net, p, 1) - objective(net, m, 1)) / (2 * h)));
    ++checked;
  }
  return worst;
}

Outcome gradients() {
  using nnet::LayerSpec;
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(20240601);
  double worst = 0.0;
  std::size_t checked = 0;
  std::set<nnet::LayerKind> kinds;
  for (int trial = 0; trial < 3; ++trial) {
    const int c = 1 + static_cast<int>(rng.below(3));
    const int classes = 2 + static_cast<int>(rng.below(3));
    const nnet::Network a({c, 8, 8},
                          {LayerSpec::conv2d("c1", 3, 3, 1, 1), LayerSpec::relu("r1"), LayerSpec::maxpool("p1"),
                           LayerSpec::conv2d("c2", 2 + trial, 3, 2, 1), LayerSpec::relu("r2"), LayerSpec::flatten("f"),
                           LayerSpec::dense("d1", 6), LayerSpec::relu("r3"), LayerSpec::dropout("drop", 0.3),
                           LayerSpec::dense("d2", classes), LayerSpec::softmax("sm")},
                          rng.next());
    const nnet::Network b({c, 7, 9},
                          {LayerSpec::conv2d("c1", 2, 3, 2, 0), LayerSpec::relu("r1"), LayerSpec::conv2d("c2", 2, 1),
                           LayerSpec::flatten("f"), LayerSpec::dense("d", classes), LayerSpec::softmax("sm")},
                          rng.next());
    for (const auto* net : {&a, &b}) {
      for (const auto& l : net->layers()) kinds.insert(l.kind);
      const auto s = net->input_shape();
      const nnet::Tensor x = random_tensor(2, s.channels, s.height, s.width, rng);
      worst = std::max(worst, worst_fd_error(*net, x, cycling_labels(2, classes), checked));
    }
  }
  const double secs = seconds_since(t0);
  o.check(kinds.size() == 7, "every layer kind covered");
  o.check(worst < kFdRelErr, "relative error " + fmt("%.2e", worst));
  o.check(secs < kFdSeconds, "runtime " + fmt("%.1f s", secs));
  o.note(std::to_string(checked) + " derivatives, worst rel. err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", secs));
  return o;
}

// -- 2. Shapley ---------------------------------------------------------------------------

std::uint32_t mask_bits(const explain::Mask& m) {
  std::uint32_t t = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) t |= 1u << i;
  return t;
}

explain::MaskEvaluator single_game(std::function<double(std::uint32_t)> v) {
  return [v](std::span<const explain::Mask> masks) {
    gateway::ProbMatrix p(static_cast<int>(masks.size()), 1);
    for (std::size_t i = 0; i < masks.size(); ++i) p.row(static_cast<int>(i))[0] = v(mask_bits(masks[i]));
    return p;
  };
}

// Average marginal contribution over every ordering.
std::vector<double> permutation_shapley(int n, const std::function<double(std::uint32_t)>& v) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> phi(static_cast<std::size_t>(n), 0.0);
  double count = 0;
  do {
    std::uint32_t t = 0;
    for (int p : perm) {
      const double before = v(t);
      t |= 1u << p;
      phi[static_cast<std::size_t>(p)] += v(t) - before;
    }
    ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  for (double& x : phi) x /= count;
  return phi;
}

Outcome shapley() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(77);
  double worst_kernel = 0.0, worst_eff = 0.0, worst_dummy = 0.0, worst_perm = 0.0;
  bool enumerated = true;
  for (int trial = 0; trial < 20; ++trial) {
    const int S = 2 + trial % 9;
    const int dummy = static_cast<int>(rng.below(static_cast<std::uint64_t>(S)));
    std::vector<double> table(std::size_t{1} << S);
    for (double& v : table) v = rng.uniform(-1.0, 1.0);
    const std::uint32_t keep = ~(1u << dummy);
    auto game = [table, keep](std::uint32_t t) { return table[t & keep]; };

    const auto exact = explain::exact_shapley(S, game);
    const int cls[] = {0};
    const auto r = explain::kernel_shap_masks(S, single_game(game), cls, {(1 << S) - 2, rng.next()}).front();
    enumerated = enumerated && r.metadata.value("enumerated", false);
    double sum = r.base_value;
    for (int i = 0; i < S; ++i) {
      worst_kernel = std::max(worst_kernel, std::abs(r.scores[static_cast<std::size_t>(i)] - exact.phi[static_cast<std::size_t>(i)]));
      sum += r.scores[static_cast<std::size_t>(i)];
    }
    worst_eff = std::max(worst_eff, std::abs(sum - game((1u << S) - 1)));
    worst_dummy = std::max(worst_dummy, std::abs(r.scores[static_cast<std::size_t>(dummy)]));
    if (S <= 8) {
      const auto perm = permutation_shapley(S, game);
      for (int i = 0; i < S; ++i)
        worst_perm = std::max(worst_perm, std::abs(perm[static_cast<std::size_t>(i)] - exact.phi[static_cast<std::size_t>(i)]));
    }
  }
  const double secs = seconds_since(t0);
  o.check(enumerated, "full enumeration used");
  o.check(worst_kernel < kShapTol, "kernel vs exact " + fmt("%.2e", worst_kernel));
  o.check(worst_eff < kShapTol, "efficiency " + fmt("%.2e", worst_eff));
  o.check(worst_dummy < kShapTol, "dummy " + fmt("%.2e", worst_dummy));
  o.check(worst_perm < kShapTol, "exact vs permutation average " + fmt("%.2e", worst_perm));
  o.check(secs < kShapSeconds, "runtime " + fmt("%.1f s", secs));
  o.note("20 games S=2..10: kernel-exact " + fmt("%.1e", worst_kernel) + ", efficiency " + fmt("%.1e", worst_eff) +
         ", dummy " + fmt("%.1e", worst_dummy) + ", " + fmt("%.2f s", secs));
  return o;
}

// -- 3. LIME --------------------------------------------------------------------------------

explain::MaskEvaluator two_column(std::function<double(std::uint32_t)> f) {
  return [f](std::span<const explain::Mask> masks) {
    gateway::ProbMatrix p(static_cast<int>(masks.size()), 2);
    for (std::size_t i = 0; i < masks.size(); ++i) {
      const double v = f(mask_bits(masks[i]));
      p.row(static_cast<int>(i))[0] = v;
      p.row(static_cast<int>(i))[1] = 1.0 - v;
    }
    return p;
  };
}

Outcome lime() {
  Outcome o;
  Rng rng(5);
  double worst = 0.0;
  for (int S : {4, 8, 12, 16}) {
    std::vector<double> w(static_cast<std::size_t>(S));
    for (double& v : w) v = rng.uniform(-3.0, 3.0);
    const double b = rng.uniform(-0.5, 0.5);
    auto f = [w, b](std::uint32_t t) {
      double s = b;
      for (std::size_t i = 0; i < w.size(); ++i)
        if ((t >> i) & 1u) s += w[i];
      return s;
    };
    explain::LimeOptions opts;
    opts.ridge_lambda = 1e-6;
    opts.num_features = S;
    opts.target_class = 0;
    opts.seed = rng.next();
    const auto r = explain::lime_explain_masks(S, two_column(f), opts);
    const double scale = std::abs(*std::max_element(w.begin(), w.end(), [](double x, double y) { return std::abs(x) < std::abs(y); }));
    for (int i = 0; i < S; ++i)
      worst = std::max(worst, std::abs(r.scores[static_cast<std::size_t>(i)] - w[static_cast<std::size_t>(i)]) / scale);
  }
  // sparse oracle with forward selection
  auto sparse = [](std::uint32_t t) { return 3.0 * ((t >> 2) & 1u) - 2.0 * ((t >> 5) & 1u) + 0.1; };
  explain::LimeOptions sel;
  sel.ridge_lambda = 1e-6;
  sel.num_features = 2;
  sel.target_class = 0;
  const auto s = explain::lime_explain_masks(30, two_column(sparse), sel);
  const bool picked = s.selected == std::vector<int>{2, 5};
  worst = std::max({worst, std::abs(s.scores[2] - 3.0) / 3.0, std::abs(s.scores[5] + 2.0) / 3.0});

  explain::LimeOptions co;
  co.num_samples = 300;
  const auto c = explain::lime_explain_masks(12, single_game([](std::uint32_t) { return 0.7; }), co);
  double worst_const = 0.0;
  for (double v : c.scores) worst_const = std::max(worst_const, std::abs(v));

  explain::LimeOptions so;
  so.num_samples = 500;
  so.seed = 31;
  auto wobbly = [](std::uint32_t t) { return 0.2 * std::popcount(t) + 0.3 * ((t & 5u) == 5u); };
  const auto a1 = explain::lime_explain_masks(9, two_column(wobbly), so);
  const auto a2 = explain::lime_explain_masks(9, two_column(wobbly), so);
  const bool bytes = a1.scores.size() == a2.scores.size() &&
                     std::memcmp(a1.scores.data(), a2.scores.data(), a1.scores.size() * sizeof(double)) == 0 &&
                     explain::to_json(a1, {}).dump() == explain::to_json(a2, {}).dump();

  o.check(worst < kLimeRelTol, "coefficient relative error " + fmt("%.2e", worst));
  o.check(picked, "forward selection picks {2,5}");
  o.check(worst_const < kLimeConstTol, "constant model " + fmt("%.2e", worst_const));
  o.check(bytes, "seeded rerun byte-identical");
  o.note("linear oracle rel. err " + fmt("%.1e", worst) + ", constant model " + fmt("%.1e", worst_const) +
         ", seeded rerun identical");
  return o;
}

// -- 4. Grad-CAM -----------------------------------------------------------------------------

std::vector<double> minmax_relu(std::vector<double> m) {
  for (double& v : m) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(m.begin(), m.end());
  const double a = *lo, b = *hi;
  for (double& v : m) v = b > a ? (v - a) / (b - a) : 0.0;
  return m;
}

Outcome gradcam() {
  using nnet::LayerSpec;
  Outcome o;
  double worst_gap = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    // one conv channel followed by global average pooling into the class-0 logit
    const int H = 10, W = 12;
    nnet::Network net({3, H, W},
                      {LayerSpec::conv2d("conv", 1, 3, 1, 1), LayerSpec::flatten("flat"), LayerSpec::dense("gap", 2),
                       LayerSpec::softmax("sm")},
                      seed);
    auto& fc = net.params()[2];
    std::fill(fc.weight.begin(), fc.weight.end(), 0.0);
    std::fill(fc.weight.begin(), fc.weight.begin() + H * W, 1.0 / (H * W));
    std::fill(fc.bias.begin(), fc.bias.end(), 0.0);
    const auto img = xplain::testing::random_image(H, W, imaging::RangeTag::Normalized, seed + 100);
    const imaging::ImageTensor one[] = {img};
    const nnet::Tensor a1 = nnet::infer(net, nnet::to_batch(one), 0, 1);
    const auto want = minmax_relu(a1.data);
    if (*std::max_element(want.begin(), want.end()) != 1.0) o.check(false, "one-channel map not flat");
    const auto r = explain::grad_cam(net, img, 0);
    if (r.raw_map.size() != want.size()) {
      o.check(false, "map size");
      return o;
    }
    for (std::size_t i = 0; i < want.size(); ++i) worst_gap = std::max(worst_gap, std::abs(r.raw_map[i] - want[i]));
  }

  // deep net: channel weights from finite differences of the logit
  const nnet::Network net({3, 12, 12},
                          {LayerSpec::conv2d("c1", 4, 3, 1, 1), LayerSpec::relu("r1"), LayerSpec::maxpool("p1"),
                           LayerSpec::conv2d("c2", 5, 3, 1, 1), LayerSpec::relu("r2"), LayerSpec::flatten("f"),
                           LayerSpec::dense("d1", 8), LayerSpec::relu("r3"), LayerSpec::dense("d2", 3),
                           LayerSpec::softmax("sm")},
                          21);
  const std::size_t li = net.layer_index("c2");
  const std::size_t logits = net.layer_index("d2");
  const double h = 1e-6;
  double worst_fd = 0.0;
  int informative = 0, compared = 0;
  for (std::uint64_t seed = 5; seed < 15; ++seed) {
    const auto img = xplain::testing::random_image(12, 12, imaging::RangeTag::Normalized, seed);
    const imaging::ImageTensor one[] = {img};
    const nnet::Tensor act = nnet::infer(net, nnet::to_batch(one), 0, li + 1);
    const int K = act.channels(), HW = act.height() * act.width();
    for (int target = 0; target < 3; ++target) {
      auto logit = [&](const nnet::Tensor& a) {
        return nnet::infer(net, a, li + 1, logits + 1).data[static_cast<std::size_t>(target)];
      };
      std::vector<double> map(static_cast<std::size_t>(HW), 0.0);
      for (int k = 0; k < K; ++k) {
        double alpha = 0.0;
        for (int i = 0; i < HW; ++i) {
          nnet::Tensor p = act, m = act;
          p.data[static_cast<std::size_t>(k * HW + i)] += h;
          m.data[static_cast<std::size_t>(k * HW + i)] -= h;
          alpha += (logit(p) - logit(m)) / (2 * h);
        }
        alpha /= HW;
        for (int i = 0; i < HW; ++i) map[static_cast<std::size_t>(i)] += alpha * act.data[static_cast<std::size_t>(k * HW + i)];
      }
      const auto want = minmax_relu(map);
      const auto r = explain::grad_cam(net, img, target);
      if (r.raw_map.size() != want.size()) {
        o.check(false, "deep map size");
        return o;
      }
      ++compared;
      if (*std::max_element(want.begin(), want.end()) == 1.0) ++informative;
      for (std::size_t i = 0; i < want.size(); ++i) worst_fd = std::max(worst_fd, std::abs(r.raw_map[i] - want[i]));
    }
  }

  o.check(informative >= 5, std::to_string(informative) + " non-flat deep maps");
  o.check(worst_gap < kCamTol, "one-channel map " + fmt("%.2e", worst_gap));
  o.check(worst_fd < kCamTol, "finite-difference weights " + fmt("%.2e", worst_fd));
  o.note("minmax(ReLU(A1)) err " + fmt("%.1e", worst_gap) + ", FD channel-weight map err " + fmt("%.1e", worst_fd) + " over " +
         std::to_string(compared) + " maps (" + std::to_string(informative) + " non-flat)");
  return o;
}

// -- 5. preprocessing ------------------------------------------------------------------------

std::vector<std::vector<double>> interp_weights(int in, int out) {
  std::vector<std::vector<double>> w(static_cast<std::size_t>(out), std::vector<double>(static_cast<std::size_t>(in), 0.0));
  for (int d = 0; d < out; ++d) {
    double s = (d + 0.5) * static_cast<double>(in) / out - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(s);
    const double f = s - i0;
    w[static_cast<std::size_t>(d)][static_cast<std::size_t>(i0)] += 1.0 - f;
    if (f > 0) w[static_cast<std::size_t>(d)][static_cast<std::size_t>(i0 + 1)] += f;
  }
  return w;
}

// out = Wy * img * Wx^T per channel
double resize_error(const imaging::ImageTensor& img, int oh, int ow) {
  const auto got = imaging::resize_bilinear(img, {oh, ow});
  const auto wy = interp_weights(img.height, oh);
  const auto wx = interp_weights(img.width, ow);
  double worst = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int i = 0; i < img.height; ++i) {
          const double a = wy[static_cast<std::size_t>(y)][static_cast<std::size_t>(i)];
          if (a == 0.0) continue;
          for (int j = 0; j < img.width; ++j) s += a * wx[static_cast<std::size_t>(x)][static_cast<std::size_t>(j)] * img.at(c, i, j);
        }
        worst = std::max(worst, std::abs(s - got.at(c, y, x)));
      }
  return worst;
}

Outcome preprocessing() {
  Outcome o;
  const double mean[3] = {0.485, 0.456, 0.406};
  const double stdev[3] = {0.229, 0.224, 0.225};
  bool shapes = true;
  double worst_const = 0.0;
  const int colors[][3] = {{255, 0, 128}, {128, 128, 128}, {0, 0, 0}, {17, 201, 99}};
  const std::pair<int, int> sizes[] = {{300, 280}, {100, 100}, {512, 384}, {64, 640}};
  for (std::size_t k = 0; k < 4; ++k) {
    imaging::ImageTensor raw(sizes[k].first, sizes[k].second, imaging::RangeTag::Raw255);
    for (int c = 0; c < 3; ++c)
      for (float& v : raw.channel(c)) v = static_cast<float>(colors[k][c]);
    const auto out = imaging::preprocess(raw);
    shapes = shapes && out.size() == 3u * 224 * 224 && out.height == 224 && out.width == 224 &&
             out.range == imaging::RangeTag::Normalized;
    for (int c = 0; c < 3; ++c) {
      const double want = (colors[k][c] / 255.0 - mean[c]) / stdev[c];
      for (float v : out.channel(c)) worst_const = std::max(worst_const, std::abs(v - want));
    }
  }
  double worst_resize = 0.0;
  std::uint64_t seed = 1;
  for (auto [in, out] : {std::pair{std::pair{17, 23}, std::pair{256, 256}}, std::pair{std::pair{300, 200}, std::pair{256, 256}},
                         std::pair{std::pair{64, 64}, std::pair{31, 97}}}) {
    const auto img = xplain::testing::random_image(in.first, in.second, imaging::RangeTag::Unit, seed++);
    worst_resize = std::max(worst_resize, resize_error(img, out.first, out.second));
  }
  o.check(shapes, "output (3,224,224) Normalized");
  o.check(worst_const < kPreprocessTol, "constant image " + fmt("%.2e", worst_const));
  o.check(worst_resize < kResizeTol, "bilinear vs reference " + fmt("%.2e", worst_resize));
  o.note("(3,224,224); constant-image err " + fmt("%.1e", worst_const) + ", resize err " + fmt("%.1e", worst_resize));
  return o;
}

// -- 6. split ---------------------------------------------------------------------------------

dataset::LabeledCorpus fake_corpus(const std::vector<std::size_t>& sizes) {
  dataset::LabeledCorpus c;
  c.root = "/corpus";
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    c.classes.push_back("class" + std::to_string(k));
    c.counts.push_back(sizes[k]);
    for (std::size_t i = 0; i < sizes[k]; ++i)
      c.items.push_back({c.root / c.classes.back() / ("img" + std::to_string(100000 + i) + ".png"), static_cast<int>(k)});
  }
  std::sort(c.items.begin(), c.items.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return c;
}

std::vector<std::size_t> per_class(const dataset::LabeledCorpus& c, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> n(c.classes.size(), 0);
  for (std::size_t i : idx) ++n[static_cast<std::size_t>(c.items[i].label)];
  return n;
}

Outcome split() {
  Outcome o;
  const auto c = fake_corpus({926, 837, 901, 500});
  const auto p = dataset::make_split(c, 11);
  const auto tr = per_class(c, p.train), va = per_class(c, p.val), te = per_class(c, p.test);
  o.check(tr[0] == 740 && va[0] == 92 && te[0] == 94, "926 -> 740/92/94");
  for (std::size_t k = 0; k < 4; ++k)
    o.check(tr[k] == c.counts[k] * 8 / 10 && va[k] == c.counts[k] / 10 && tr[k] + va[k] + te[k] == c.counts[k],
            "floor rule for class " + std::to_string(k));

  const auto b = dataset::make_split(c, 11, dataset::BalanceMode::Truncate);
  o.check(per_class(c, b.train) == std::vector<std::size_t>(4, 400), "balanced train 400 per class");

  Rng rng(2024);
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> sizes(2 + rng.below(4));
    for (auto& s : sizes) s = 10 + rng.below(400);
    const auto cc = fake_corpus(sizes);
    const auto pp = dataset::make_split(cc, rng.next());
    std::vector<std::size_t> all;
    for (const auto* part : {&pp.train, &pp.val, &pp.test}) all.insert(all.end(), part->begin(), part->end());
    std::sort(all.begin(), all.end());
    bool ok = all.size() == cc.items.size();
    for (std::size_t i = 0; ok && i < all.size(); ++i) ok = all[i] == i;
    if (!ok) ++bad;
  }
  o.check(bad == 0, std::to_string(bad) + " corpora not disjoint/exhaustive");
  o.note("926 -> " + std::to_string(tr[0]) + "/" + std::to_string(va[0]) + "/" + std::to_string(te[0]) +
         ", balanced train 400 each, 100 random corpora disjoint and exhaustive");
  return o;
}

// -- 7. end to end -----------------------------------------------------------------------------

// Softmax regression on 4x4 average-pooled intensity, as an independent
// check that the blob task is learnable at the accuracy threshold.
double logistic_baseline() {
  const int size = 32, cells = 4, F = cells * cells + 1, C = synthetic::kBlobClasses;
  auto features = [&](const imaging::ImageTensor& raw) {
    std::vector<double> f(static_cast<std::size_t>(F), 0.0);
    const int step = size / cells;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) f[static_cast<std::size_t>((y / step) * cells + x / step)] += raw.at(c, y, x) / 255.0;
    for (int i = 0; i < F - 1; ++i) f[static_cast<std::size_t>(i)] /= 3.0 * step * step;
    f.back() = 1.0;
    return f;
  };
  const auto train = synthetic::blob_set(80, size, 1001);
  const auto test = synthetic::blob_set(20, size, 1002);
  std::vector<std::vector<double>> X;
  for (const auto& im : train.images) X.push_back(features(im));
  std::vector<double> W(static_cast<std::size_t>(C * F), 0.0);
  auto scores = [&](const std::vector<double>& x) {
    std::vector<double> s(static_cast<std::size_t>(C), 0.0);
    for (int k = 0; k < C; ++k)
      for (int i = 0; i < F; ++i) s[static_cast<std::size_t>(k)] += W[static_cast<std::size_t>(k * F + i)] * x[static_cast<std::size_t>(i)];
    return s;
  };
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> g(W.size(), 0.0);
    for (std::size_t n = 0; n < X.size(); ++n) {
      auto s = scores(X[n]);
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (double& v : s) z += (v = std::exp(v - mx));
      for (int k = 0; k < C; ++k) {
        const double d = s[static_cast<std::size_t>(k)] / z - (train.labels[n] == k ? 1.0 : 0.0);
        for (int i = 0; i < F; ++i) g[static_cast<std::size_t>(k * F + i)] += d * X[n][static_cast<std::size_t>(i)];
      }
    }
    for (std::size_t i = 0; i < W.size(); ++i) W[i] -= 2.0 * g[i] / static_cast<double>(X.size());
  }
  int right = 0;
  for (std::size_t n = 0; n < test.images.size(); ++n) {
    const auto s = scores(features(test.images[n]));
    right += static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin()) == test.labels[n];
  }
  return static_cast<double>(right) / static_cast<double>(test.images.size());
}

double right_share(const std::vector<double>& map, int h, int w) {
  double right = 0.0, total = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = std::max(map[static_cast<std::size_t>(y * w + x)], 0.0);
      total += v;
      if (x >= w / 2) right += v;
    }
  return total > 0 ? right / total : 0.0;
}

Outcome end_to_end() {
  Outcome o;
  TempDir d;
  synthetic::write_blob_corpus(d / "blobs", 100, 64, 17);
  const auto t0 = std::chrono::steady_clock::now();
  const int train_rc = run_cli(d, "train --data " + q(d / "blobs") +
                                      " --head-version 0 --optimizer sgd --lr 0.01 --epochs 50 --seed 3 --out " + q(d / "run"));
  const double secs = seconds_since(t0);
  double acc = -1.0;
  if (train_rc == 0) acc = nlohmann::json::parse(slurp(d / "run/metrics.json"))["accuracy"].get<double>();
  o.check(train_rc == 0, "train exit " + std::to_string(train_rc));
  o.check(acc >= kBlobAccuracy, "test accuracy " + fmt("%.3f", acc));
  o.check(secs <= kTrainSeconds, "training time " + fmt("%.1f s", secs));
  const double base = logistic_baseline();
  o.check(base >= kBaselineAccuracy, "logistic baseline " + fmt("%.3f", base));
  o.note("400 blob images, 50 epochs: test acc " + fmt("%.3f", acc) + " in " + fmt("%.1f s", secs) +
         " (logistic baseline " + fmt("%.3f", base) + ")");

  if (train_rc == 0) {
    const auto sp = nlohmann::json::parse(slurp(d / "run/split.json"));
    const std::string first = sp["per_class"].begin().value()["test"][0].get<std::string>();
    const int rc = run_cli(d, "explain " + q(d / "blobs" / first) + " --method all --model native:" + q(d / "run/model.xpck") +
                                  " --segments 40 --lime-samples 300 --shap-samples 200 --out " + q(d / "expl"));
    o.check(rc == 0, "explain exit " + std::to_string(rc));
    int images = 0;
    for (const char* f : {"lime_superpixel.png", "lime_posneg.png", "shap.png", "gradcam.png", "comparison_sheet.png"}) {
      try {
        imaging::read_image(d / "expl" / f);
        ++images;
      } catch (const std::exception&) {
        o.check(false, std::string("readable ") + f);
      }
    }
    bool sidecar = false;
    try {
      const auto j = nlohmann::json::parse(slurp(d / "expl/explanation.json"));
      std::set<std::string> m;
      for (const auto& e : j["explanations"]) m.insert(e["method"].get<std::string>());
      sidecar = m == std::set<std::string>{"lime", "kernel_shap", "grad_cam"};
    } catch (const std::exception&) {
    }
    o.check(sidecar, "explanation.json lists all three methods");
    o.note("explain --method all wrote " + std::to_string(images) + " PNGs" + (sidecar ? " + sidecar" : ""));
  }

  const int size = 224;
  auto net = std::make_shared<const nnet::Network>(synthetic::right_half_model(size));
  const auto model = gateway::ModelHandle::native(net, {"texture", "other"});
  const auto img = synthetic::right_half_image(1, size);
  const auto sp = explain::segment_superpixels(img, {50, 10.0, 10, 0});
  explain::LimeOptions lo;
  lo.num_samples = 400;
  lo.target_class = 0;
  const auto l = explain::lime_explain(model, img, sp, lo);
  const auto s = explain::kernel_shap(model, img, sp, 0, {400, 0});
  const auto g = explain::grad_cam(model, img, 0);
  std::string shares;
  for (const auto* r : {&l, &s, &g}) {
    const double share = right_share(explain::pixel_attribution(*r, &sp), size, size);
    o.check(share >= kRightHalfShare, std::string(explain::method_name(r->method)) + " right-half share " + fmt("%.3f", share));
    shares += (shares.empty() ? "" : "/") + fmt("%.2f", share);
  }
  o.note("right-half positive mass lime/shap/gradcam " + shares);
  return o;
}

// -- 8. grids -------------------------------------------------------------------------------------

Outcome grids() {
  Outcome o;
  TempDir d;
  synthetic::write_blob_corpus(d / "data", 10, 16, 9);
  const std::pair<const char*, std::size_t> kinds[] = {{"hyper", 18}, {"heads", 9}, {"aug", 3}};
  std::string rows;
  for (const auto& [kind, want] : kinds) {
    const fs::path a = d / (std::string(kind) + "_a"), b = d / (std::string(kind) + "_b");
    int rc = run_cli(d, std::string("grid --grid ") + kind + " --data " + q(d / "data") + " --epochs 3 --batch-size 8 --out " + q(a));
    o.check(rc == 0, std::string(kind) + " grid exit " + std::to_string(rc));
    if (rc != 0) continue;
    const std::string csv = slurp(a / "grid.csv");
    const auto lines = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
    o.check(lines == want + 1, std::string(kind) + " rows " + std::to_string(lines - 1));
    o.check(csv.find(",failed,") == std::string::npos, std::string(kind) + " has failed cells");
    rc = run_cli(d, "grid --from-manifest " + q(a / "manifest.json") + " --out " + q(b));
    o.check(rc == 0 && slurp(b / "grid.csv") == csv, std::string(kind) + " re-run from manifest byte-identical");
    rows += (rows.empty() ? "" : "/") + std::to_string(lines - 1);
  }
  o.note("hyper/heads/aug rows " + rows + ", manifest re-runs byte-identical");
  return o;
}

// -- 9. metrics -------------------------------------------------------------------------------------

Outcome metrics() {
  Outcome o;
  // 5 class-0 predicted correctly, 5 class-0 predicted as 1, 10 class-1 correct
  evalbench::ConfusionMatrix cm(2);
  cm.add(0, 0, 5);
  cm.add(0, 1, 5);
  cm.add(1, 1, 10);
  const auto m = evalbench::compute_metrics(cm);
  auto near = [](double a, double b) { return std::abs(a - b) <= kMetricsTol; };
  o.check(near(m.per_class[0].precision, 1.0) && near(m.per_class[0].recall, 0.5) && near(m.per_class[0].f1, 2.0 / 3.0),
          "class 0 P/R/F1");
  o.check(near(m.per_class[1].precision, 10.0 / 15.0) && near(m.per_class[1].recall, 1.0) && near(m.per_class[1].f1, 0.8),
          "class 1 P/R/F1");
  o.check(near(m.accuracy, 0.75), "accuracy");
  o.check(near(m.macro_f1, (2.0 / 3.0 + 0.8) / 2.0), "macro F1 " + fmt("%.6f", m.macro_f1));
  o.check(near(m.macro_precision, (1.0 + 10.0 / 15.0) / 2.0) && near(m.macro_recall, 0.75), "macro P/R");

  const auto diag = evalbench::compute_metrics(evalbench::ConfusionMatrix(4, {7, 0, 0, 0, 0, 3, 0, 0, 0, 0, 12, 0, 0, 0, 0, 1}));
  bool ones = diag.accuracy == 1.0 && diag.macro_f1 == 1.0 && diag.macro_precision == 1.0 && diag.macro_recall == 1.0;
  for (const auto& c : diag.per_class) ones = ones && c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0;
  o.check(ones, "diagonal matrix all 1.0");
  o.note("[[5,5],[0,10]] -> acc 0.75, macro F1 " + fmt("%.4f", m.macro_f1) + "; diagonal all 1.0");
  return o;
}

}  // namespace

int main() {
  const std::pair<const char*, Outcome (*)()> criteria[] = {
      {"gradient correctness", gradients},      {"Shapley oracle equivalence", shapley},
      {"LIME linear-oracle recovery", lime},    {"Grad-CAM analytic case", gradcam},
      {"preprocessing exactness", preprocessing}, {"split arithmetic", split},
      {"desk-scale end-to-end", end_to_end},    {"grid shape", grids},
      {"metrics", metrics},
  };
  int failed = 0, n = 0;
  for (const auto& [name, fn] : criteria) {
    ++n;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failed;
    std::printf("%s  %d. %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", n - failed, n);
  return failed == 0 ? 0 : 1;
}
