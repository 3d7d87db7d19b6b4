#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "xplain/nnet.hpp"
#include "xplain/synthetic.hpp"

using namespace xplain;
using namespace xplain::nnet;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
  Tensor t(n, c, h, w);
  Rng rng(seed);
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Cross-entropy of the network output on fixed labels; dropout masks come
// from a freshly seeded rng on every call so they repeat exactly.
double objective(const Network& net, const Tensor& x, const Tensor& y) {
  Rng rng(99);
  const Tape tape = forward(net, x, true, &rng);
  return cross_entropy(tape.output(), y);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-7); }

struct GradCheck {
  double worst_param = 0.0;
  double worst_input = 0.0;
  std::size_t checked = 0;
};

GradCheck check_gradients(Network net, const Tensor& x, const Tensor& y) {
  const double h = 1e-5;
  Rng rng(99);
  const Tape tape = forward(net, x, true, &rng);
  const Tensor g = cross_entropy_logit_grad(tape.output(), y);
  const std::string first = net.layers().front().name;
  const std::vector<std::string> capture{first};
  const Gradients grads = backward_from_logits(net, tape, g, capture);

  GradCheck out;
  for (std::size_t l = 0; l < net.size(); ++l) {
    for (int which = 0; which < 2; ++which) {
      auto& vec = which == 0 ? net.params()[l].weight : net.params()[l].bias;
      const auto& an = which == 0 ? grads.params[l].weight : grads.params[l].bias;
      for (std::size_t i = 0; i < vec.size(); ++i) {
        const double saved = vec[i];
        vec[i] = saved + h;
        const double up = objective(net, x, y);
        vec[i] = saved - h;
        const double down = objective(net, x, y);
        vec[i] = saved;
        out.worst_param = std::max(out.worst_param, rel_err(an[i], (up - down) / (2 * h)));
        ++out.checked;
      }
    }
  }
  // Gradient with respect to the first layer's output, by perturbing the
  // input of the rest of the network.
  const Tensor& a0 = tape.output_of(0);
  const Tensor& ga = grads.activations.at(first);
  for (std::size_t i = 0; i < a0.size(); i += 3) {
    Tensor p = a0, m = a0;
    p.data[i] += h;
    m.data[i] -= h;
    Rng r1(99), r2(99);
    const double up = cross_entropy(forward(net, p, true, &r1, 1).output(), y);
    const double down = cross_entropy(forward(net, m, true, &r2, 1).output(), y);
    out.worst_input = std::max(out.worst_input, rel_err(ga.data[i], (up - down) / (2 * h)));
  }
  return out;
}

Tensor labels_for(int n, int classes) {
  std::vector<int> l(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) l[static_cast<std::size_t>(i)] = i % classes;
  return one_hot(l, classes);
}

}  // namespace

TEST(Gradients, ConvPoolDenseDropoutNetMatchesFiniteDifferences) {
  const Network net({2, 8, 8},
                    {LayerSpec::conv2d("c1", 3, 3, 1, 1), LayerSpec::relu("r1"), LayerSpec::maxpool("p1"),
                     LayerSpec::conv2d("c2", 4, 3, 2, 1), LayerSpec::relu("r2"), LayerSpec::flatten("f"),
                     LayerSpec::dense("d1", 6), LayerSpec::relu("r3"), LayerSpec::dropout("drop", 0.3),
                     LayerSpec::dense("d2", 3), LayerSpec::softmax("sm")},
                    5);
  const GradCheck r = check_gradients(net, random_tensor(2, 2, 8, 8, 1), labels_for(2, 3));
  EXPECT_GT(r.checked, 200u);
  EXPECT_LT(r.worst_param, 1e-4);
  EXPECT_LT(r.worst_input, 1e-4);
}

TEST(Gradients, UnpaddedStridedConvMatchesFiniteDifferences) {
  const Network net({3, 7, 9},
                    {LayerSpec::conv2d("c1", 2, 3, 2, 0), LayerSpec::relu("r1"), LayerSpec::conv2d("c2", 2, 1),
                     LayerSpec::flatten("f"), LayerSpec::dense("d", 4), LayerSpec::softmax("sm")},
                    11);
  const GradCheck r = check_gradients(net, random_tensor(3, 3, 7, 9, 2), labels_for(3, 4));
  EXPECT_LT(r.worst_param, 1e-4);
  EXPECT_LT(r.worst_input, 1e-4);
}

TEST(Gradients, FrozenLayersGetZeroGradient) {
  Network net = make_desknet({3, 16, 16}, 1, 3, 4);
  const Tensor x = random_tensor(2, 3, 16, 16, 3);
  const Tape tape = forward(net, x, false, nullptr);
  const Gradients g = backward_from_logits(net, tape, cross_entropy_logit_grad(tape.output(), labels_for(2, 3)));
  for (std::size_t l = 0; l < net.size(); ++l) {
    const bool any = std::any_of(g.params[l].weight.begin(), g.params[l].weight.end(), [](double v) { return v != 0; });
    if (net.frozen()[l] || !net.layers()[l].has_params())
      EXPECT_FALSE(any) << net.layers()[l].name;
    else
      EXPECT_TRUE(any) << net.layers()[l].name;
  }
}

TEST(Gradients, CrossEntropyShortcutEqualsChainedSoftmax) {
  const Network net({1, 4, 4}, {LayerSpec::flatten("f"), LayerSpec::dense("d", 5), LayerSpec::softmax("sm")}, 8);
  const Tensor x = random_tensor(3, 1, 4, 4, 9);
  const Tensor y = labels_for(3, 5);
  const Tape tape = forward(net, x, false, nullptr);
  const Tensor& p = tape.output();
  // dL/dp = -y / (p N)
  Tensor dp(p.batch(), p.channels(), 1, 1);
  for (std::size_t i = 0; i < p.size(); ++i) dp.data[i] = y.data[i] == 0.0 ? 0.0 : -1.0 / (p.data[i] * p.batch());
  const Gradients chained = backward(net, tape, dp);
  const Gradients shortcut = backward_from_logits(net, tape, cross_entropy_logit_grad(p, y));
  for (std::size_t i = 0; i < chained.params[1].weight.size(); ++i)
    EXPECT_NEAR(chained.params[1].weight[i], shortcut.params[1].weight[i], 1e-8);
  for (std::size_t i = 0; i < chained.params[1].bias.size(); ++i)
    EXPECT_NEAR(chained.params[1].bias[i], shortcut.params[1].bias[i], 1e-8);
}

TEST(Gradients, UnknownCaptureName) {
  const Network net({1, 2, 2}, {LayerSpec::flatten("f"), LayerSpec::dense("d", 2), LayerSpec::softmax("sm")}, 1);
  const Tape tape = forward(net, random_tensor(1, 1, 2, 2, 1), false, nullptr);
  const std::vector<std::string> capture{"nope"};
  try {
    backward_from_logits(net, tape, Tensor(1, 2, 1, 1, 0.1), capture);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownLayerName);
  }
}

TEST(Forward, IdentityConvReproducesInput) {
  Network net({3, 5, 6}, {LayerSpec::conv2d("c", 3, 3, 1, 1)}, 0);
  auto& w = net.params()[0].weight;
  std::fill(w.begin(), w.end(), 0.0);
  for (int o = 0; o < 3; ++o) w[((static_cast<std::size_t>(o) * 3 + o) * 3 + 1) * 3 + 1] = 1.0;
  const Tensor x = random_tensor(2, 3, 5, 6, 4);
  EXPECT_EQ(infer(net, x), x);
}

TEST(Forward, ReluOfNegativesIsZero) {
  const Network net({2, 3, 3}, {LayerSpec::relu("r")}, 0);
  Tensor x(1, 2, 3, 3, -0.5);
  for (double v : infer(net, x).data) EXPECT_EQ(v, 0.0);
}

TEST(Forward, SoftmaxRowsSumToOneAndShiftInvariant) {
  Tensor logits = random_tensor(4, 6, 1, 1, 2);
  for (double& v : logits.data) v *= 30.0;
  const Tensor p = softmax(logits);
  for (int n = 0; n < 4; ++n) {
    double s = 0;
    for (int c = 0; c < 6; ++c) s += p(n, c, 0, 0);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  Tensor shifted = logits;
  for (double& v : shifted.data) v += 123.0;
  const Tensor q = softmax(shifted);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p.data[i], q.data[i], 1e-9);
}

TEST(Forward, WrongInputShapeThrows) {
  const Network net({3, 4, 4}, {LayerSpec::flatten("f")}, 0);
  try {
    infer(net, Tensor(1, 3, 5, 4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
}

TEST(Forward, InvertedDropoutPreservesExpectation) {
  const Network net({1, 1, 1}, {LayerSpec::dropout("d", 0.3)}, 0);
  Rng rng(17);
  double sum = 0.0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) sum += forward(net, Tensor(1, 1, 1, 1, 1.0), true, &rng).output().data[0];
  EXPECT_NEAR(sum / draws, 1.0, 0.02);
  // inference mode is the identity
  EXPECT_EQ(infer(net, Tensor(1, 1, 1, 1, 2.5)).data[0], 2.5);
}

TEST(Loss, CrossEntropyExamples) {
  Tensor perfect(1, 3, 1, 1, 0.0);
  perfect.data[1] = 1.0;
  const std::vector<int> one{1};
  EXPECT_NEAR(cross_entropy(perfect, one_hot(one, 3)), 0.0, 1e-12);
  const Tensor uniform(1, 4, 1, 1, 0.25);
  const std::vector<int> zero{0};
  EXPECT_NEAR(cross_entropy(uniform, one_hot(zero, 4)), std::log(4.0), 1e-12);
  Tensor half(1, 2, 1, 1, 0.5);
  EXPECT_NEAR(cross_entropy(half, one_hot(zero, 2)), std::log(2.0), 1e-12);
  Tensor zero_p(1, 2, 1, 1, 0.0);
  zero_p.data[1] = 1.0;
  EXPECT_NEAR(cross_entropy(zero_p, one_hot(zero, 2)), -std::log(1e-12), 1e-9);
}

TEST(Optimizer, SgdStep) {
  std::vector<LayerParams> p(1), g(1);
  p[0].weight = {1.0};
  g[0].weight = {0.5};
  Optimizer opt({OptimizerKind::SGD, 0.001});
  opt.step(p, g, {false});
  EXPECT_DOUBLE_EQ(p[0].weight[0], 0.9995);
  g[0].weight = {0.0};
  opt.step(p, g, {false});
  EXPECT_DOUBLE_EQ(p[0].weight[0], 0.9995);
}

TEST(Optimizer, AdamFirstStepIsLearningRate) {
  for (double grad : {3.0, -0.02, 1e-3}) {
    std::vector<LayerParams> p(1), g(1);
    p[0].weight = {0.7};
    g[0].weight = {grad};
    Optimizer opt({OptimizerKind::Adam, 0.01});
    opt.step(p, g, {false});
    const double expected = 0.01 * std::abs(grad) / (std::abs(grad) + 1e-7);
    EXPECT_NEAR(std::abs(p[0].weight[0] - 0.7), expected, 1e-12);
    EXPECT_EQ(p[0].weight[0] < 0.7, grad > 0);
  }
}

TEST(Optimizer, AdamZeroGradientAfterMomentumStillMoves) {
  std::vector<LayerParams> p(1), g(1);
  p[0].weight = {0.0};
  g[0].weight = {1.0};
  Optimizer opt({OptimizerKind::Adam, 0.1});
  opt.step(p, g, {false});
  const double after_first = p[0].weight[0];
  g[0].weight = {0.0};
  opt.step(p, g, {false});
  EXPECT_LT(p[0].weight[0], after_first);
}

TEST(Optimizer, FrozenUntouchedAndBadSpec) {
  std::vector<LayerParams> p(1), g(1);
  p[0].weight = {1.0};
  g[0].weight = {5.0};
  Optimizer opt({OptimizerKind::Adam, 0.1});
  opt.step(p, g, {true});
  EXPECT_EQ(p[0].weight[0], 1.0);
  OptimizerSpec bad{OptimizerKind::SGD, 0.0};
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_EQ(parse_optimizer("adam"), OptimizerKind::Adam);
  EXPECT_EQ(parse_optimizer(optimizer_name(OptimizerKind::SGD)), OptimizerKind::SGD);
}

TEST(Heads, DocumentedLayouts) {
  auto kinds = [](const std::vector<LayerSpec>& h) {
    std::string s;
    for (const auto& l : h) {
      if (l.kind == LayerKind::Dense) s += "D" + std::to_string(l.units) + " ";
      if (l.kind == LayerKind::Dropout) s += "Drop" + std::to_string(static_cast<int>(l.rate * 10)) + " ";
      if (l.kind == LayerKind::Softmax) s += "S";
    }
    return s;
  };
  EXPECT_EQ(kinds(build_head(0, 4)), "D4 S");
  EXPECT_EQ(kinds(build_head(2, 4)), "D256 Drop3 D4 S");
  EXPECT_EQ(kinds(build_head(7, 4)), "D256 D128 D64 D32 D4 S");
  EXPECT_EQ(kinds(build_head(6, 3)), "D256 D128 D64 Drop3 D3 S");
  for (int v = 1; v <= 8; ++v) {
    const auto h = build_head(v, 4);
    const auto drops = std::count_if(h.begin(), h.end(), [](const LayerSpec& l) { return l.kind == LayerKind::Dropout; });
    EXPECT_EQ(drops, v % 2 == 0 ? 1 : 0);
    for (const auto& l : h)
      if (l.kind == LayerKind::Dense && l.name != "head_logits") EXPECT_NE(l.units, 4);
    for (std::size_t i = 0; i + 1 < h.size(); ++i)
      if (h[i].kind == LayerKind::Dense && h[i].name != "head_logits") EXPECT_EQ(h[i + 1].kind, LayerKind::ReLU);
  }
  try {
    build_head(9, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownVersion);
  }
}

TEST(Network, DeskNetShapesAndLookup) {
  const Network net = make_desknet({3, 224, 224}, 2, 4, 1);
  EXPECT_EQ(net.num_outputs(), 4);
  EXPECT_EQ(net.output_shape(net.layer_index("conv2")), (Shape3{16, 112, 112}));
  EXPECT_EQ(net.output_shape(net.layer_index("flatten")), (Shape3{16 * 56 * 56, 1, 1}));
  ASSERT_TRUE(net.last_conv());
  EXPECT_EQ(net.layers()[*net.last_conv()].name, "conv2");
  EXPECT_TRUE(net.frozen()[0]);
  EXPECT_FALSE(net.frozen()[net.layer_index("head_logits")]);
  EXPECT_THROW(net.layer_index("conv9"), Error);
  EXPECT_EQ(make_desknet({3, 32, 32}, 3, 4, 9), make_desknet({3, 32, 32}, 3, 4, 9));
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  xplain::testing::TempDir dir;
  Network net = make_desknet({3, 16, 16}, 4, 3, 12);
  // float32 storage: start from float-representable values so the trip is exact
  for (auto& p : net.params()) {
    for (double& w : p.weight) w = static_cast<float>(w);
    for (double& b : p.bias) b = 0.125;
  }
  Checkpoint ck{net, 12, 345, {"a", "b", "c"}};
  save_checkpoint(dir / "m.xpck", ck);
  const Checkpoint back = load_checkpoint(dir / "m.xpck");
  EXPECT_EQ(back.network, net);
  EXPECT_EQ(back.seed, 12u);
  EXPECT_EQ(back.step, 345u);
  EXPECT_EQ(back.class_names, ck.class_names);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));

  auto bytes = encode_checkpoint(ck);
  bytes[0] = 'Y';
  EXPECT_THROW(decode_checkpoint(bytes), Error);
  bytes = encode_checkpoint(ck);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), Error);
}

namespace {

InMemorySource blob_source(int per_class, int size, std::uint64_t seed) {
  const auto set = synthetic::blob_set(per_class, size, seed);
  std::vector<imaging::ImageTensor> imgs;
  for (const auto& raw : set.images) imgs.push_back(imaging::normalize(imaging::scale_unit(raw)));
  return InMemorySource(std::move(imgs), set.labels);
}

}  // namespace

TEST(Train, LearnsBlobQuadrants) {
  const InMemorySource tr = blob_source(100, 32, 1);
  const InMemorySource va = blob_source(25, 32, 2);
  TrainOptions opts;
  opts.optimizer = {OptimizerKind::SGD, 0.01};
  opts.epochs = 50;
  opts.seed = 3;
  const TrainResult r = train(make_desknet({3, 32, 32}, 0, 4, 3), tr, va, opts);
  ASSERT_EQ(r.history.size(), 50u);
  EXPECT_GE(r.history[static_cast<std::size_t>(r.best_epoch - 1)].val_accuracy, 0.90);
  double lowest = r.history[0].val_loss;
  for (const auto& e : r.history) lowest = std::min(lowest, e.val_loss);
  EXPECT_EQ(r.history[static_cast<std::size_t>(r.best_epoch - 1)].val_loss, lowest);
  EXPECT_NEAR(evaluate_loss(r.best, va).first, lowest, 1e-9);
}

TEST(Train, SeededRunsAreBitIdentical) {
  const InMemorySource tr = blob_source(6, 16, 4);
  const InMemorySource va = blob_source(2, 16, 5);
  TrainOptions opts;
  opts.optimizer = {OptimizerKind::Adam, 0.005};
  opts.epochs = 3;
  opts.batch_size = 5;
  opts.seed = 8;
  const TrainResult a = train(make_desknet({3, 16, 16}, 2, 4, 8), tr, va, opts);
  const TrainResult b = train(make_desknet({3, 16, 16}, 2, 4, 8), tr, va, opts);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.steps, 3u * 5u);
}

TEST(Train, OneEpochAndFullyFrozen) {
  const InMemorySource tr = blob_source(3, 16, 4);
  const InMemorySource va = blob_source(1, 16, 5);
  TrainOptions opts;
  opts.epochs = 1;
  Network net = make_desknet({3, 16, 16}, 1, 4, 2);
  for (std::size_t i = 0; i < net.size(); ++i) net.set_frozen(i, true);
  const TrainResult r = train(net, tr, va, opts);
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best.params(), net.params());
  opts.epochs = 0;
  EXPECT_THROW(train(net, tr, va, opts), Error);
}

TEST(Train, HistoryCsv) {
  const std::vector<EpochRecord> h{{1, 0.5, 0.25, 0.75, 0.5}};
  const std::string csv = history_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,train_acc,val_loss,val_acc");
}
