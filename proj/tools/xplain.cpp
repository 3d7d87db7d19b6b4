#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xplain/dataset.hpp"
#include "xplain/error.hpp"
#include "xplain/evalbench.hpp"
#include "xplain/explain.hpp"
#include "xplain/gateway.hpp"
#include "xplain/imaging.hpp"
#include "xplain/nnet.hpp"
#include "xplain/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xplain;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4, kNoGradients = 5 };

constexpr const char* kSeedEnv = "XPLAIN_SEED";
constexpr const char* kManifestName = "manifest.json";

int exit_code(Errc c) {
  switch (c) {
    case Errc::ConfigError:
    case Errc::InvalidArgument:
    case Errc::UnknownVersion:
    case Errc::UnknownLayerName:
    case Errc::StyleMismatch:
      return kConfig;
    case Errc::IoError:
    case Errc::DecodeError:
    case Errc::NoClasses:
    case Errc::EmptyClass:
    case Errc::ClassTooSmall:
      return kData;
    case Errc::GradientsUnavailable:
      return kNoGradients;
    default:
      return kRuntime;
  }
}

std::uint64_t env_seed() {
  const char* s = std::getenv(kSeedEnv);
  if (!s || !*s) return 0;
  try {
    std::size_t used = 0;
    unsigned long long v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::ConfigError, std::string(kSeedEnv) + " must be an unsigned integer, got '" + s + "'");
  }
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(Errc::ConfigError, "cannot read " + p.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(Errc::ConfigError, "not valid JSON: " + p.string());
  return j;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + p.string());
  out << text;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

std::string utc_now() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

fs::path prepare_out(const fs::path& out) {
  if (out.empty()) throw Error(Errc::ConfigError, "--out is required");
  fs::create_directories(out);
  return out;
}

void write_manifest(const fs::path& out, const std::string& command, const json& config, const json& seeds,
                    std::vector<std::string> artifacts, const std::string& started) {
  std::sort(artifacts.begin(), artifacts.end());
  json m = {{"tool", "xplain"},
            {"version", kVersion},
            {"command", command},
            {"config", config},
            {"seeds", seeds},
            {"artifacts", artifacts},
            {"started_utc", started},
            {"finished_utc", utc_now()}};
  write_json(out / kManifestName, m);
}

/// Config for `command` from a prior run's manifest.
json config_from_manifest(const fs::path& p, const std::string& command) {
  json m = read_json(p);
  if (m.value("command", "") != command)
    throw Error(Errc::ConfigError, p.string() + " is a manifest for '" + m.value("command", "?") + "', not '" + command + "'");
  if (!m.contains("config")) throw Error(Errc::ConfigError, p.string() + " has no config");
  return m.at("config");
}

std::string absolute_string(const fs::path& p) { return p.empty() ? std::string() : fs::absolute(p).lexically_normal().generic_string(); }

// -- experiment config (train, grid) ---------------------------------------------

struct ExperimentFlags {
  std::optional<std::string> config;
  std::optional<std::string> from_manifest;
  std::optional<std::string> data;
  std::optional<int> head_version;
  std::optional<double> lr;
  std::optional<std::string> optimizer;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> augmentation;
  std::optional<std::uint64_t> split_seed;
  std::optional<std::string> balance;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON config with data/model/train sections");
    app->add_option("--data", data, "Dataset root (one folder per class)");
    app->add_option("--head-version", head_version, "Classifier head version 0..8");
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--optimizer", optimizer, "sgd or adam");
    app->add_option("--epochs", epochs, "Training epochs");
    app->add_option("--batch-size", batch_size, "Mini-batch size");
    app->add_option("--seed", seed, "Training seed (default: $XPLAIN_SEED or 0)");
    app->add_option("--augmentation", augmentation, "none, aug1 or aug2");
    app->add_option("--split-seed", split_seed, "Split seed (default: training seed)");
    app->add_option("--balance", balance, "none, truncate or oversample");
  }

  evalbench::ExperimentConfig resolve(const std::string& command) const {
    evalbench::ExperimentConfig cfg;
    const std::uint64_t env = env_seed();
    cfg.seed = env;
    cfg.split_seed = env;
    if (from_manifest) {
      json c = config_from_manifest(*from_manifest, command);
      cfg = evalbench::ExperimentConfig::from_json(c.contains("experiment") ? c.at("experiment") : c, cfg);
    }
    bool split_given = false;
    if (config) {
      json c = read_json(*config);
      split_given = c.contains("data") && c["data"].contains("split_seed");
      cfg = evalbench::ExperimentConfig::from_json(c, cfg);
      if (!split_given) cfg.split_seed = cfg.seed;
    }
    try {
      if (data) cfg.data_root = *data;
      if (head_version) cfg.head_version = *head_version;
      if (lr) cfg.learning_rate = *lr;
      if (optimizer) cfg.optimizer = nnet::parse_optimizer(*optimizer);
      if (epochs) cfg.epochs = *epochs;
      if (batch_size) cfg.batch_size = *batch_size;
      if (augmentation) cfg.augmentation = evalbench::parse_augmentation(*augmentation);
      if (balance) cfg.balance = dataset::parse_balance(*balance);
    } catch (const Error& e) {
      throw Error(Errc::ConfigError, e.what());
    }
    if (seed) {
      cfg.seed = *seed;
      if (!split_given && !split_seed && !from_manifest) cfg.split_seed = *seed;
    }
    if (split_seed) cfg.split_seed = *split_seed;
    if (cfg.data_root.empty()) throw Error(Errc::ConfigError, "no dataset root (--data or data.root)");
    cfg.data_root = absolute_string(cfg.data_root);
    cfg.validate();
    return cfg;
  }
};

// -- scan / split -------------------------------------------------------------------

int cmd_scan(const std::string& root, const std::optional<std::string>& out) {
  const std::string started = utc_now();
  const auto corpus = dataset::scan_corpus(root);
  json j = {{"root", absolute_string(root)}, {"merged_pools", corpus.merged_pools}, {"classes", json::array()}};
  for (std::size_t c = 0; c < corpus.classes.size(); ++c) {
    std::cout << corpus.classes[c] << '\t' << corpus.counts[c] << '\n';
    j["classes"].push_back({{"name", corpus.classes[c]}, {"count", corpus.counts[c]}});
  }
  std::cout << "total\t" << corpus.items.size() << (corpus.merged_pools ? "\t(pools merged)" : "") << '\n';
  if (out) {
    const fs::path dir = prepare_out(*out);
    write_json(dir / "scan.json", j);
    write_manifest(dir, "scan", {{"root", absolute_string(root)}}, json::object(), {"scan.json"}, started);
  }
  return kOk;
}

int cmd_split(const std::string& root, std::optional<std::uint64_t> seed, const std::string& balance,
              const std::string& out) {
  const std::string started = utc_now();
  const std::uint64_t s = seed.value_or(env_seed());
  dataset::BalanceMode mode;
  try {
    mode = dataset::parse_balance(balance);
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, e.what());
  }
  const auto corpus = dataset::scan_corpus(root);
  const auto plan = dataset::make_split(corpus, s, mode);
  const fs::path dir = prepare_out(out);
  write_json(dir / "split.json", dataset::split_manifest(corpus, plan));
  std::cout << "train " << plan.train.size() << ", val " << plan.val.size() << ", test " << plan.test.size()
            << ", unused " << plan.unused.size() << '\n';
  write_manifest(dir, "split", {{"root", absolute_string(root)}, {"seed", s}, {"balance", balance}}, {{"split", s}},
                 {"split.json"}, started);
  return kOk;
}

// -- train ------------------------------------------------------------------------

int cmd_train(const ExperimentFlags& flags, const std::string& out) {
  const std::string started = utc_now();
  const auto cfg = flags.resolve("train");
  const fs::path dir = prepare_out(out);
  const auto data = evalbench::prepare_data(cfg.data_root, cfg.split_seed, cfg.balance);
  for (const auto& p : data.skipped) std::cerr << "skipped unreadable file " << p.string() << '\n';
  std::cout << "training DeskNet head v" << cfg.head_version << " on " << data.train->size() << " images ("
            << nnet::optimizer_name(cfg.optimizer) << ", lr " << cfg.learning_rate << ", " << cfg.epochs
            << " epochs)\n";
  const auto r = evalbench::run_experiment(cfg, data);
  const auto& best = r.training.history.at(r.training.best_epoch - 1);
  std::cout << "best epoch " << r.training.best_epoch << ": val loss " << best.val_loss << ", val acc "
            << best.val_accuracy << "; test acc " << r.test.metrics.accuracy << '\n';

  nnet::Checkpoint ckpt{r.training.best, cfg.seed, r.training.steps, data.corpus.classes};
  nnet::save_checkpoint(dir / "model.xpck", ckpt);
  write_text(dir / "history.csv", nnet::history_csv(r.training.history));
  write_json(dir / "split.json", dataset::split_manifest(data.corpus, data.plan));
  json metrics = evalbench::to_json(r.test.metrics, data.corpus.classes);
  metrics["confusion"] = evalbench::to_json(r.test.confusion);
  metrics["best_epoch"] = r.training.best_epoch;
  write_json(dir / "metrics.json", metrics);
  write_manifest(dir, "train", cfg.to_json(), {{"train", cfg.seed}, {"split", cfg.split_seed}},
                 {"history.csv", "metrics.json", "model.xpck", "split.json"}, started);
  return kOk;
}

// -- evaluate -----------------------------------------------------------------------

struct EvaluateFlags {
  std::optional<std::string> from_manifest;
  std::optional<std::string> model;
  std::optional<std::string> data;
  std::optional<std::string> split;
  std::optional<std::uint64_t> split_seed;
  std::optional<std::string> balance;
  std::optional<std::string> partition;
};

int cmd_evaluate(const EvaluateFlags& f, const std::string& out) {
  const std::string started = utc_now();
  json cfg = {{"model", ""}, {"data", ""}, {"split", nullptr}, {"split_seed", env_seed()}, {"balance", "none"},
              {"partition", "test"}};
  if (f.from_manifest) cfg.update(config_from_manifest(*f.from_manifest, "evaluate"));
  if (f.model) cfg["model"] = *f.model;
  if (f.data) cfg["data"] = absolute_string(*f.data);
  if (f.split) cfg["split"] = absolute_string(*f.split);
  if (f.split_seed) cfg["split_seed"] = *f.split_seed;
  if (f.balance) cfg["balance"] = *f.balance;
  if (f.partition) cfg["partition"] = *f.partition;
  if (cfg["model"].get<std::string>().empty()) throw Error(Errc::ConfigError, "--model is required");
  if (cfg["data"].get<std::string>().empty()) throw Error(Errc::ConfigError, "--data is required");
  if (!gateway::is_remote_spec(cfg["model"].get<std::string>())) cfg["model"] = absolute_string(cfg["model"].get<std::string>());

  dataset::Partition part;
  dataset::BalanceMode mode;
  try {
    part = dataset::parse_partition(cfg["partition"].get<std::string>());
    mode = dataset::parse_balance(cfg["balance"].get<std::string>());
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, e.what());
  }
  const fs::path dir = prepare_out(out);
  const auto corpus = dataset::scan_corpus(cfg["data"].get<std::string>());
  const auto plan = cfg["split"].is_string() ? dataset::plan_from_manifest(corpus, read_json(cfg["split"].get<std::string>()))
                                             : dataset::make_split(corpus, cfg["split_seed"].get<std::uint64_t>(), mode);
  const auto model = gateway::open_model(cfg["model"].get<std::string>());
  if (model.class_names() != corpus.classes)
    throw Error(Errc::ConfigError, "model classes do not match the dataset's class folders");

  std::vector<imaging::ImageTensor> images;
  std::vector<int> labels;
  json skipped = json::array();
  for (std::size_t item : dataset::partition(plan, part)) {
    const auto& e = corpus.items[item];
    try {
      images.push_back(imaging::preprocess(imaging::read_image(e.path)));
      labels.push_back(e.label);
    } catch (const Error& err) {
      if (err.code() != Errc::DecodeError) throw;
      std::cerr << "skipped unreadable file " << e.path.string() << '\n';
      skipped.push_back(e.path.generic_string());
    }
  }
  const nnet::InMemorySource source(std::move(images), std::move(labels));
  const auto ev = evalbench::evaluate(model, source);

  json metrics = evalbench::to_json(ev.metrics, corpus.classes);
  metrics["confusion"] = evalbench::to_json(ev.confusion);
  metrics["partition"] = cfg["partition"];
  metrics["skipped_files"] = skipped;
  write_json(dir / "metrics.json", metrics);
  std::ostringstream csv;
  csv << "true\\predicted";
  for (const auto& c : corpus.classes) csv << ',' << c;
  csv << '\n';
  for (int t = 0; t < ev.confusion.classes(); ++t) {
    csv << corpus.classes[t];
    for (int p = 0; p < ev.confusion.classes(); ++p) csv << ',' << ev.confusion.at(t, p);
    csv << '\n';
  }
  write_text(dir / "confusion.csv", csv.str());
  std::printf("accuracy %.4f  macro precision %.4f  recall %.4f  F1 %.4f  (%lld images)\n", ev.metrics.accuracy,
              ev.metrics.macro_precision, ev.metrics.macro_recall, ev.metrics.macro_f1,
              static_cast<long long>(ev.metrics.total));
  write_manifest(dir, "evaluate", cfg, {{"split", cfg["split_seed"]}}, {"confusion.csv", "metrics.json"}, started);
  return kOk;
}

// -- grid ---------------------------------------------------------------------------

int cmd_grid(const ExperimentFlags& flags, std::optional<std::string> grid, const std::string& out) {
  const std::string started = utc_now();
  auto cfg = flags.resolve("grid");
  if (!grid && flags.from_manifest) grid = config_from_manifest(*flags.from_manifest, "grid").value("grid", "");
  if (!grid || grid->empty()) throw Error(Errc::ConfigError, "--grid is required (hyper, heads, aug)");
  const auto kind = evalbench::parse_grid(*grid);
  const fs::path dir = prepare_out(out);

  evalbench::GridOptions opts;
  opts.cell_dir = dir;
  opts.progress = [](const evalbench::CellResult& c, std::size_t i, std::size_t n) {
    std::cout << '[' << (i + 1) << '/' << n << "] " << c.id << ": ";
    if (!c.ok)
      std::cout << "failed (" << c.error << ")";
    else
      std::printf("test acc %.4f, macro F1 %.4f%s", c.metrics.accuracy, c.metrics.macro_f1, c.resumed ? " (resumed)" : "");
    std::cout << std::endl;
  };
  const auto report = evalbench::run_grid(cfg, kind, opts);
  write_text(dir / "grid.csv", evalbench::grid_csv(report));
  write_json(dir / "grid.json", evalbench::grid_json(report));
  write_text(dir / "grid.md", evalbench::grid_markdown(report));
  if (report.best) std::cout << "best cell: " << report.cells[*report.best].id << '\n';

  json config = {{"grid", evalbench::grid_name(kind)}, {"experiment", cfg.to_json()}};
  std::vector<std::string> artifacts{"grid.csv", "grid.json", "grid.md"};
  for (const auto& c : report.cells) artifacts.push_back("cells/" + c.id + ".json");
  write_manifest(dir, "grid", config, {{"train", cfg.seed}, {"split", cfg.split_seed}}, artifacts, started);
  return kOk;
}

// -- explain ------------------------------------------------------------------------

struct ExplainFlags {
  std::optional<std::string> from_manifest;
  std::optional<std::string> image;
  std::optional<std::string> method;
  std::optional<std::string> model;
  std::optional<std::string> target;
  std::optional<int> segments;
  std::optional<double> compactness;
  std::optional<int> lime_samples;
  std::optional<int> lime_features;
  std::optional<double> kernel_width;
  std::optional<double> ridge;
  std::optional<std::string> filler;
  std::optional<int> shap_samples;
  std::optional<std::string> layer;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app, bool with_method) {
    if (with_method) app->add_option("--method", method, "lime, shap, gradcam or all (default all)");
    app->add_option("--model", model, "native:<checkpoint>, <checkpoint>, remote:<url> or remote");
    app->add_option("--class", target, "top (default) or a class index");
    app->add_option("--segments", segments, "Target superpixel count (default 50)");
    app->add_option("--compactness", compactness, "SLIC compactness (default 10)");
    app->add_option("--lime-samples", lime_samples, "LIME perturbations (default 1000)");
    app->add_option("--lime-features", lime_features, "LIME reported features (default 10)");
    app->add_option("--kernel-width", kernel_width, "LIME kernel width on cosine distance (default 0.25)");
    app->add_option("--ridge", ridge, "LIME ridge penalty (default 1.0)");
    app->add_option("--filler", filler, "mean_color (default) or gray");
    app->add_option("--shap-samples", shap_samples, "Kernel SHAP coalition budget (default 1000)");
    app->add_option("--layer", layer, "Grad-CAM layer name (default: last convolution)");
    app->add_option("--seed", seed, "Seed (default: $XPLAIN_SEED or 0)");
  }

  json resolve(const std::string& command) const {
    json cfg = {{"method", "all"},
                {"model", ""},
                {"class", "top"},
                {"seed", env_seed()},
                {"superpixels", {{"segments", 50}, {"compactness", 10.0}}},
                {"lime", {{"num_samples", 1000}, {"num_features", 10}, {"kernel_width", 0.25}, {"ridge_lambda", 1.0}, {"filler", "mean_color"}}},
                {"shap", {{"num_samples", 1000}, {"background", "mean_color"}}},
                {"gradcam", {{"layer", std::string(explain::kLastConv)}}}};
    if (from_manifest) cfg.merge_patch(config_from_manifest(*from_manifest, command));
    if (image) cfg["image"] = absolute_string(*image);
    if (method) cfg["method"] = *method;
    if (model) cfg["model"] = *model;
    if (target) cfg["class"] = *target;
    if (seed) cfg["seed"] = *seed;
    if (segments) cfg["superpixels"]["segments"] = *segments;
    if (compactness) cfg["superpixels"]["compactness"] = *compactness;
    if (lime_samples) cfg["lime"]["num_samples"] = *lime_samples;
    if (lime_features) cfg["lime"]["num_features"] = *lime_features;
    if (kernel_width) cfg["lime"]["kernel_width"] = *kernel_width;
    if (ridge) cfg["lime"]["ridge_lambda"] = *ridge;
    if (filler) {
      cfg["lime"]["filler"] = *filler;
      cfg["shap"]["background"] = *filler;
    }
    if (shap_samples) cfg["shap"]["num_samples"] = *shap_samples;
    if (layer) cfg["gradcam"]["layer"] = *layer;

    const std::string m = cfg["method"].get<std::string>();
    if (m != "lime" && m != "shap" && m != "gradcam" && m != "all")
      throw Error(Errc::ConfigError, "unknown method '" + m + "' (lime, shap, gradcam, all)");
    if (cfg["model"].get<std::string>().empty()) throw Error(Errc::ConfigError, "--model is required");
    if (!gateway::is_remote_spec(cfg["model"].get<std::string>())) {
      std::string spec = cfg["model"].get<std::string>();
      if (spec.starts_with("native:")) spec = spec.substr(7);
      cfg["model"] = absolute_string(spec);
    }
    return cfg;
  }
};

const char* kGradientsHelp =
    "Grad-CAM needs gradients and feature maps, which a remote model does not expose.\n"
    "Use a native checkpoint (--model native:<path>) or choose --method lime or --method shap.";

std::optional<int> parse_class(const json& cfg, int classes) {
  const auto& c = cfg.at("class");
  std::string s = c.is_string() ? c.get<std::string>() : std::to_string(c.get<int>());
  if (s == "top") return std::nullopt;
  try {
    std::size_t used = 0;
    int v = std::stoi(s, &used);
    if (used != s.size() || v < 0 || v >= classes) throw std::out_of_range(s);
    return v;
  } catch (const std::exception&) {
    throw Error(Errc::ConfigError, "--class must be 'top' or an index below " + std::to_string(classes));
  }
}

struct Explanation {
  imaging::ImageTensor input;
  std::vector<double> probs;
  int target = 0;
  explain::SuperpixelMap superpixels;
  std::optional<explain::AttributionResult> lime;
  std::vector<explain::AttributionResult> shap;
  std::optional<explain::AttributionResult> cam;
};

struct Methods {
  bool lime = false;
  bool shap = false;
  bool cam = false;
};

Methods methods_for(const std::string& m) {
  return {m == "lime" || m == "all", m == "shap" || m == "all", m == "gradcam" || m == "all"};
}

Explanation run_explanations(const gateway::ModelHandle& model, const fs::path& image, const json& cfg, Methods want,
                             bool shap_all_classes) {
  Explanation ex;
  ex.input = imaging::preprocess(imaging::read_image(image));
  const imaging::ImageTensor one[] = {ex.input};
  const auto p = model.predict_batch(one);
  ex.probs.assign(p.row(0).begin(), p.row(0).end());
  const auto chosen = parse_class(cfg, p.cols);
  ex.target = chosen.value_or(gateway::argmax(p.row(0)));
  const auto seed = cfg.at("seed").get<std::uint64_t>();

  if (want.lime || want.shap) {
    explain::SlicOptions so;
    so.target_segments = cfg["superpixels"]["segments"].get<int>();
    so.compactness = cfg["superpixels"]["compactness"].get<double>();
    so.seed = seed;
    ex.superpixels = explain::segment_superpixels(ex.input, so);
  }
  if (want.lime) {
    const auto& l = cfg.at("lime");
    explain::LimeOptions lo;
    lo.num_samples = l.at("num_samples").get<int>();
    lo.num_features = l.at("num_features").get<int>();
    lo.kernel_width = l.at("kernel_width").get<double>();
    lo.ridge_lambda = l.at("ridge_lambda").get<double>();
    lo.filler = explain::parse_filler(l.at("filler").get<std::string>());
    lo.seed = seed;
    lo.target_class = ex.target;
    ex.lime = explain::lime_explain(model, ex.input, ex.superpixels, lo);
  }
  if (want.shap) {
    const auto& s = cfg.at("shap");
    explain::ShapOptions so;
    so.num_samples = s.at("num_samples").get<int>();
    so.background = explain::parse_filler(s.at("background").get<std::string>());
    so.seed = seed;
    if (shap_all_classes && !chosen)
      ex.shap = explain::kernel_shap_by_probability(model, ex.input, ex.superpixels, so);
    else
      ex.shap.push_back(explain::kernel_shap(model, ex.input, ex.superpixels, ex.target, so));
  }
  if (want.cam) ex.cam = explain::grad_cam(model, ex.input, ex.target, cfg["gradcam"]["layer"].get<std::string>());
  return ex;
}

struct Panels {
  imaging::RgbImage original;
  std::optional<imaging::RgbImage> lime_superpixel;
  std::optional<imaging::RgbImage> lime_posneg;
  std::vector<imaging::RgbImage> shap;
  std::optional<imaging::RgbImage> cam;
};

Panels render_panels(const Explanation& ex) {
  Panels p;
  p.original = imaging::to_display(ex.input);
  const explain::SuperpixelMap* sp = &ex.superpixels;
  if (ex.lime) {
    p.lime_superpixel = explain::render(*ex.lime, ex.input, sp, explain::RenderStyle::LimeSuperpixelOnly);
    p.lime_posneg = explain::render(*ex.lime, ex.input, sp, explain::RenderStyle::LimePosNeg);
  }
  if (!ex.shap.empty()) {
    explain::RenderOptions ro;
    for (const auto& r : ex.shap)
      for (double v : r.scores) ro.shap_scale = std::max(ro.shap_scale, std::abs(v));
    for (const auto& r : ex.shap) p.shap.push_back(explain::render(r, ex.input, sp, explain::RenderStyle::ShapRedBlue, ro));
  }
  if (ex.cam) p.cam = explain::render(*ex.cam, ex.input, nullptr, explain::RenderStyle::CamOverlay);
  return p;
}

void write_png_file(const fs::path& dir, const std::string& name, const imaging::RgbImage& img,
                    std::vector<std::string>& artifacts) {
  imaging::write_png(dir / name, img);
  artifacts.push_back(name);
}

int cmd_explain(const ExplainFlags& flags, const std::string& out) {
  const std::string started = utc_now();
  json cfg = flags.resolve("explain");
  if (!cfg.contains("image") || cfg["image"].get<std::string>().empty())
    throw Error(Errc::ConfigError, "an image path is required");
  const std::string spec = cfg["model"].get<std::string>();
  const Methods want = methods_for(cfg["method"].get<std::string>());
  if (want.cam && gateway::is_remote_spec(spec)) {
    std::cerr << "error: GradientsUnavailable: " << kGradientsHelp << '\n';
    return kNoGradients;
  }
  const fs::path dir = prepare_out(out);
  const auto model = gateway::open_model(spec);
  const Explanation ex = run_explanations(model, cfg["image"].get<std::string>(), cfg, want, true);
  const Panels p = render_panels(ex);
  const auto& names = model.class_names();

  std::vector<std::string> artifacts;
  if (p.lime_superpixel) {
    write_png_file(dir, "lime_superpixel.png", *p.lime_superpixel, artifacts);
    write_png_file(dir, "lime_posneg.png", *p.lime_posneg, artifacts);
  }
  std::vector<const imaging::RgbImage*> shap_row{&p.original};
  for (const auto& s : p.shap) shap_row.push_back(&s);
  if (!p.shap.empty()) write_png_file(dir, "shap.png", explain::compose_sheet({shap_row}), artifacts);
  if (p.cam) write_png_file(dir, "gradcam.png", *p.cam, artifacts);
  if (want.lime && want.shap && want.cam) {
    const std::vector<std::vector<const imaging::RgbImage*>> rows{
        {&p.original, &*p.lime_superpixel, &*p.lime_posneg}, shap_row, {&p.original, &*p.cam}};
    write_png_file(dir, "comparison_sheet.png", explain::compose_sheet(rows), artifacts);
  }

  json j = {{"image", cfg["image"]},
            {"model", model.model_id()},
            {"class_names", names},
            {"probabilities", ex.probs},
            {"predicted_class", gateway::argmax(ex.probs)},
            {"target_class", ex.target},
            {"seed", cfg["seed"]},
            {"explanations", json::array()}};
  if (want.lime || want.shap)
    j["superpixels"] = {{"num_segments", ex.superpixels.num_segments},
                        {"target_segments", cfg["superpixels"]["segments"]},
                        {"compactness", cfg["superpixels"]["compactness"]}};
  if (ex.lime) j["explanations"].push_back(explain::to_json(*ex.lime, names));
  for (const auto& r : ex.shap) j["explanations"].push_back(explain::to_json(r, names));
  if (!ex.shap.empty()) {
    json order = json::array();
    for (const auto& r : ex.shap) order.push_back(r.target_class);
    j["shap_panel_classes"] = order;
  }
  if (ex.cam) j["explanations"].push_back(explain::to_json(*ex.cam, names));
  write_json(dir / "explanation.json", j);
  artifacts.push_back("explanation.json");

  std::printf("%s: predicted %s (%.4f); explained class %s\n", cfg["image"].get<std::string>().c_str(),
              names[gateway::argmax(ex.probs)].c_str(), ex.probs[gateway::argmax(ex.probs)], names[ex.target].c_str());
  write_manifest(dir, "explain", cfg, {{"explain", cfg["seed"]}}, artifacts, started);
  return kOk;
}

// -- compare-xai --------------------------------------------------------------------

double positive_cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double x = std::max(a[i], 0.0), y = std::max(b[i], 0.0);
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  return aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
}

int cmd_compare(const std::vector<std::string>& images, const ExplainFlags& flags, const std::string& out) {
  const std::string started = utc_now();
  json cfg = flags.resolve("compare-xai");
  cfg.erase("method");
  if (!images.empty()) {
    json list = json::array();
    for (const auto& i : images) list.push_back(absolute_string(i));
    cfg["images"] = list;
  }
  if (!cfg.contains("images") || cfg["images"].empty()) throw Error(Errc::ConfigError, "at least one image is required");
  const std::string spec = cfg["model"].get<std::string>();
  if (gateway::is_remote_spec(spec)) {
    std::cerr << "error: GradientsUnavailable: " << kGradientsHelp << '\n';
    return kNoGradients;
  }
  const fs::path dir = prepare_out(out);
  const auto model = gateway::open_model(spec);
  const auto& names = model.class_names();

  std::vector<Panels> panels;
  json results = json::array();
  for (const auto& img : cfg["images"]) {
    const Explanation ex = run_explanations(model, img.get<std::string>(), cfg, {true, true, true}, false);
    const int h = ex.input.height, w = ex.input.width;
    const auto lime = explain::pixel_attribution(*ex.lime, &ex.superpixels);
    const auto shap = explain::pixel_attribution(ex.shap.front(), &ex.superpixels);
    const auto cam = explain::pixel_attribution(*ex.cam, nullptr);
    auto halves = [&](const std::vector<double>& m) {
      return json{{"left", explain::positive_mass_share(m, h, w, 0, w / 2)},
                  {"right", explain::positive_mass_share(m, h, w, w / 2, w)}};
    };
    results.push_back({{"image", img},
                       {"target_class", ex.target},
                       {"target_class_name", names[ex.target]},
                       {"probability", ex.probs[ex.target]},
                       {"positive_mass", {{"lime", halves(lime)}, {"kernel_shap", halves(shap)}, {"grad_cam", halves(cam)}}},
                       {"agreement",
                        {{"lime_vs_kernel_shap", positive_cosine(lime, shap)},
                         {"lime_vs_grad_cam", positive_cosine(lime, cam)},
                         {"kernel_shap_vs_grad_cam", positive_cosine(shap, cam)}}}});
    panels.push_back(render_panels(ex));
  }
  std::vector<std::vector<const imaging::RgbImage*>> rows;
  for (const auto& p : panels) rows.push_back({&p.original, &*p.lime_posneg, &p.shap.front(), &*p.cam});
  imaging::write_png(dir / "compare.png", explain::compose_sheet(rows));
  write_json(dir / "compare.json",
             {{"model", model.model_id()}, {"class_names", names}, {"columns", {"original", "lime_posneg", "kernel_shap", "grad_cam"}},
              {"images", results}});
  std::cout << "compared " << panels.size() << " image(s)\n";
  write_manifest(dir, "compare-xai", cfg, {{"explain", cfg["seed"]}}, {"compare.json", "compare.png"}, started);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xplain: desk-scale image classification and attribution toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::string root;
  std::optional<std::string> out_opt;
  std::string out;

  auto* scan = app.add_subcommand("scan", "List class folders and image counts");
  scan->add_option("root", root, "Dataset root")->required();
  scan->add_option("--out", out_opt, "Write scan.json and a manifest here");

  std::optional<std::uint64_t> split_seed;
  std::string balance = "none";
  auto* split = app.add_subcommand("split", "Write a seeded 80/10/10 split manifest");
  split->add_option("root", root, "Dataset root")->required();
  split->add_option("--seed", split_seed, "Split seed (default: $XPLAIN_SEED or 0)");
  split->add_option("--balance", balance, "none, truncate or oversample");
  split->add_option("--out", out, "Output directory")->required();

  ExperimentFlags train_flags;
  auto* train = app.add_subcommand("train", "Train DeskNet with a chosen head on a class-folder dataset");
  train_flags.attach(train);
  train->add_option("--from-manifest", train_flags.from_manifest, "Re-run the configuration of a previous train run");
  train->add_option("--out", out, "Output directory")->required();

  EvaluateFlags eval_flags;
  auto* evaluate = app.add_subcommand("evaluate", "Confusion matrix and macro metrics on a partition");
  evaluate->add_option("--model", eval_flags.model, "Checkpoint path or remote model");
  evaluate->add_option("--data", eval_flags.data, "Dataset root");
  evaluate->add_option("--split", eval_flags.split, "split.json from `split` or `train`");
  evaluate->add_option("--split-seed", eval_flags.split_seed, "Split seed when no --split is given");
  evaluate->add_option("--balance", eval_flags.balance, "Balance mode when no --split is given");
  evaluate->add_option("--partition", eval_flags.partition, "train, val or test (default test)");
  evaluate->add_option("--from-manifest", eval_flags.from_manifest, "Re-run a previous evaluation");
  evaluate->add_option("--out", out, "Output directory")->required();

  ExperimentFlags grid_flags;
  std::optional<std::string> grid_kind;
  auto* grid = app.add_subcommand("grid", "Run the hyperparameter, head-version or augmentation grid");
  grid_flags.attach(grid);
  grid->add_option("--grid", grid_kind, "hyper (18 cells), heads (9) or aug (3)");
  grid->add_option("--from-manifest", grid_flags.from_manifest, "Re-run the configuration of a previous grid");
  grid->add_option("--out", out, "Output directory; finished cells found here are skipped")->required();

  ExplainFlags explain_flags;
  auto* expl = app.add_subcommand("explain", "LIME, Kernel SHAP and Grad-CAM for one image");
  expl->add_option("image", explain_flags.image, "Image file (JPEG or PNG)");
  explain_flags.attach(expl, true);
  expl->add_option("--from-manifest", explain_flags.from_manifest, "Re-run a previous explanation");
  expl->add_option("--out", out, "Output directory")->required();

  ExplainFlags compare_flags;
  std::vector<std::string> images;
  auto* compare = app.add_subcommand("compare-xai", "Side-by-side methods and their agreement over images");
  compare->add_option("images", images, "Image files");
  compare_flags.attach(compare, false);
  compare->add_option("--from-manifest", compare_flags.from_manifest, "Re-run a previous comparison");
  compare->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*scan) return cmd_scan(root, out_opt);
    if (*split) return cmd_split(root, split_seed, balance, out);
    if (*train) return cmd_train(train_flags, out);
    if (*evaluate) return cmd_evaluate(eval_flags, out);
    if (*grid) return cmd_grid(grid_flags, grid_kind, out);
    if (*expl) return cmd_explain(explain_flags, out);
    if (*compare) return cmd_compare(images, compare_flags, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (e.code() == Errc::GradientsUnavailable) std::cerr << kGradientsHelp << '\n';
    return exit_code(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const json::exception& e) {
    std::cerr << "error: bad configuration value: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
