#include "xplain/evalbench.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "xplain/error.hpp"

namespace xplain::evalbench {

namespace fs = std::filesystem;
using nlohmann::json;

// -- metrics --------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int classes)
    : classes_(classes), counts_(static_cast<std::size_t>(std::max(classes, 0)) * std::max(classes, 0), 0) {
  if (classes < 0) throw Error(Errc::InvalidArgument, "negative class count");
}

ConfusionMatrix::ConfusionMatrix(int classes, std::vector<std::int64_t> counts)
    : classes_(classes), counts_(std::move(counts)) {
  if (classes < 0 || counts_.size() != static_cast<std::size_t>(classes) * classes)
    throw Error(Errc::InvalidArgument, "confusion matrix must be C x C");
  for (auto c : counts_) {
    if (c < 0) throw Error(Errc::InvalidArgument, "confusion matrix counts must be non-negative");
  }
}

void ConfusionMatrix::add(int truth, int predicted, std::int64_t n) {
  if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_)
    throw Error(Errc::InvalidArgument, "class index out of range");
  if (n < 0) throw Error(Errc::InvalidArgument, "negative count");
  counts_[static_cast<std::size_t>(truth) * classes_ + predicted] += n;
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t t = 0;
  for (int i = 0; i < classes_; ++i) t += at(i, i);
  return t;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (cm.classes() == 0 || total == 0) throw Error(Errc::EmptyMatrix, "confusion matrix has no samples");
  const int c = cm.classes();
  MetricsReport r;
  r.total = total;
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  for (int k = 0; k < c; ++k) {
    std::int64_t tp = cm.at(k, k), predicted = 0, actual = 0;
    for (int j = 0; j < c; ++j) {
      predicted += cm.at(j, k);
      actual += cm.at(k, j);
    }
    ClassMetrics m;
    m.support = actual;
    if (predicted > 0)
      m.precision = static_cast<double>(tp) / static_cast<double>(predicted);
    else
      m.degenerate = true;
    if (actual > 0)
      m.recall = static_cast<double>(tp) / static_cast<double>(actual);
    else
      m.degenerate = true;
    if (m.precision + m.recall > 0.0)
      m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    else
      m.degenerate = true;
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
    r.degenerate = r.degenerate || m.degenerate;
    r.per_class.push_back(m);
  }
  r.macro_precision /= c;
  r.macro_recall /= c;
  r.macro_f1 /= c;
  return r;
}

json to_json(const MetricsReport& m, const std::vector<std::string>& class_names) {
  json per = json::array();
  for (std::size_t k = 0; k < m.per_class.size(); ++k) {
    const auto& p = m.per_class[k];
    json e = {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}, {"support", p.support},
              {"degenerate", p.degenerate}};
    if (k < class_names.size()) e["class"] = class_names[k];
    per.push_back(std::move(e));
  }
  return {{"averaging", kAveraging},
          {"accuracy", m.accuracy},
          {"macro_precision", m.macro_precision},
          {"macro_recall", m.macro_recall},
          {"macro_f1", m.macro_f1},
          {"total", m.total},
          {"degenerate", m.degenerate},
          {"per_class", per}};
}

json to_json(const ConfusionMatrix& cm) {
  json rows = json::array();
  for (int t = 0; t < cm.classes(); ++t) {
    json row = json::array();
    for (int p = 0; p < cm.classes(); ++p) row.push_back(cm.at(t, p));
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

MetricsReport metrics_from_json(const json& j) {
  MetricsReport m;
  m.accuracy = j.at("accuracy").get<double>();
  m.macro_precision = j.at("macro_precision").get<double>();
  m.macro_recall = j.at("macro_recall").get<double>();
  m.macro_f1 = j.at("macro_f1").get<double>();
  m.total = j.at("total").get<std::int64_t>();
  m.degenerate = j.at("degenerate").get<bool>();
  for (const auto& e : j.at("per_class")) {
    ClassMetrics c;
    c.precision = e.at("precision").get<double>();
    c.recall = e.at("recall").get<double>();
    c.f1 = e.at("f1").get<double>();
    c.support = e.at("support").get<std::int64_t>();
    c.degenerate = e.at("degenerate").get<bool>();
    m.per_class.push_back(c);
  }
  return m;
}

}  // namespace

Evaluation evaluate(const gateway::ModelHandle& model, const nnet::SampleSource& data, int chunk) {
  if (data.size() == 0) throw Error(Errc::InvalidArgument, "evaluation partition is empty");
  if (chunk < 1) throw Error(Errc::InvalidArgument, "chunk must be positive");
  const int classes = static_cast<int>(model.class_names().size());
  Evaluation ev{ConfusionMatrix(classes), {}};
  std::vector<imaging::ImageTensor> batch;
  std::vector<int> labels;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    batch.clear();
    labels.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) {
      batch.push_back(data.load(i, 0));
      labels.push_back(data.label(i));
    }
    const gateway::ProbMatrix p = model.predict_batch(batch);
    for (int n = 0; n < p.rows; ++n) ev.confusion.add(labels[n], gateway::argmax(p.row(n)));
  }
  ev.metrics = compute_metrics(ev.confusion);
  return ev;
}

// -- experiments ----------------------------------------------------------------

std::string_view augmentation_name(Augmentation a) noexcept {
  switch (a) {
    case Augmentation::None:
      return "none";
    case Augmentation::Aug1:
      return "aug1";
    case Augmentation::Aug2:
      return "aug2";
  }
  return "none";
}

Augmentation parse_augmentation(std::string_view name) {
  if (name == "none") return Augmentation::None;
  if (name == "aug1") return Augmentation::Aug1;
  if (name == "aug2") return Augmentation::Aug2;
  throw Error(Errc::ConfigError, "unknown augmentation '" + std::string(name) + "' (none, aug1, aug2)");
}

std::optional<imaging::AugmentationSpec> augmentation_spec(Augmentation a, std::uint64_t seed) {
  switch (a) {
    case Augmentation::None:
      return std::nullopt;
    case Augmentation::Aug1:
      return imaging::AugmentationSpec::aug1(seed);
    case Augmentation::Aug2:
      return imaging::AugmentationSpec::aug2(seed);
  }
  return std::nullopt;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, m); };
  if (head_version < 0 || head_version > nnet::kMaxHeadVersion)
    fail("head_version must be in 0.." + std::to_string(nnet::kMaxHeadVersion));
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
}

json ExperimentConfig::to_json() const {
  return {{"data", {{"root", data_root.generic_string()}, {"split_seed", split_seed}, {"balance", dataset::balance_name(balance)}}},
          {"model", {{"head_version", head_version}}},
          {"train",
           {{"augmentation", augmentation_name(augmentation)},
            {"learning_rate", learning_rate},
            {"optimizer", nnet::optimizer_name(optimizer)},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"seed", seed}}}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) { return from_json(j, ExperimentConfig{}); }

ExperimentConfig ExperimentConfig::from_json(const json& j, ExperimentConfig cfg) {
  auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, m); };
  if (!j.is_object()) fail("config must be an object");
  auto section = [&](const char* name, std::initializer_list<const char*> keys) -> const json* {
    auto it = j.find(name);
    if (it == j.end()) return nullptr;
    if (!it->is_object()) fail(std::string("section '") + name + "' must be an object");
    for (const auto& [k, v] : it->items()) {
      if (std::find_if(keys.begin(), keys.end(), [&](const char* a) { return k == a; }) == keys.end())
        fail(std::string("unknown key '") + name + "." + k + "'");
    }
    return &*it;
  };
  for (const auto& [k, v] : j.items()) {
    if (k != "data" && k != "model" && k != "train") fail("unknown section '" + k + "'");
  }
  try {
    if (const json* d = section("data", {"root", "split_seed", "balance"})) {
      if (d->contains("root")) cfg.data_root = d->at("root").get<std::string>();
      if (d->contains("split_seed")) cfg.split_seed = d->at("split_seed").get<std::uint64_t>();
      if (d->contains("balance")) cfg.balance = dataset::parse_balance(d->at("balance").get<std::string>());
    }
    if (const json* m = section("model", {"head_version"})) {
      if (m->contains("head_version")) cfg.head_version = m->at("head_version").get<int>();
    }
    if (const json* t = section("train", {"augmentation", "learning_rate", "optimizer", "epochs", "batch_size", "seed"})) {
      if (t->contains("augmentation")) cfg.augmentation = parse_augmentation(t->at("augmentation").get<std::string>());
      if (t->contains("learning_rate")) cfg.learning_rate = t->at("learning_rate").get<double>();
      if (t->contains("optimizer")) cfg.optimizer = nnet::parse_optimizer(t->at("optimizer").get<std::string>());
      if (t->contains("epochs")) cfg.epochs = t->at("epochs").get<int>();
      if (t->contains("batch_size")) cfg.batch_size = t->at("batch_size").get<int>();
      if (t->contains("seed")) cfg.seed = t->at("seed").get<std::uint64_t>();
    }
  } catch (const json::exception& e) {
    fail(std::string("bad config value: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::ConfigError) throw;
    fail(e.what());
  }
  return cfg;
}

PreparedData prepare_data(const fs::path& root, std::uint64_t split_seed, dataset::BalanceMode balance) {
  PreparedData out;
  out.corpus = dataset::scan_corpus(root);
  out.plan = dataset::make_split(out.corpus, split_seed, balance);
  auto load = [&](const std::vector<std::size_t>& items, std::vector<std::size_t>* kept) {
    std::vector<imaging::ImageTensor> images;
    std::vector<int> labels;
    for (std::size_t item : items) {
      const auto& entry = out.corpus.items[item];
      try {
        images.push_back(imaging::preprocess(imaging::read_image(entry.path)));
      } catch (const Error& e) {
        if (e.code() != Errc::DecodeError && e.code() != Errc::IoError) throw;
        out.skipped.push_back(entry.path);
        continue;
      }
      labels.push_back(entry.label);
      if (kept) kept->push_back(item);
    }
    return std::make_shared<const nnet::InMemorySource>(std::move(images), std::move(labels));
  };
  out.train = load(out.plan.train, &out.train_items);
  out.val = load(out.plan.val, nullptr);
  out.test = load(out.plan.test, nullptr);
  return out;
}

nnet::Network build_model(const ExperimentConfig& cfg, int num_classes) {
  const auto& s = imaging::kCropTarget;
  return nnet::make_desknet({3, s.height, s.width}, cfg.head_version, num_classes, cfg.seed);
}

RunResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data) {
  cfg.validate();
  const auto& names = data.corpus.classes;
  nnet::TrainOptions opts;
  opts.optimizer.kind = cfg.optimizer;
  opts.optimizer.learning_rate = cfg.learning_rate;
  opts.epochs = cfg.epochs;
  opts.batch_size = cfg.batch_size;
  opts.seed = cfg.seed;

  nnet::Network net = build_model(cfg, static_cast<int>(names.size()));
  RunResult r;
  if (auto aug = augmentation_spec(cfg.augmentation, cfg.seed)) {
    const dataset::CorpusSource train(data.corpus, data.train_items, *aug);
    r.training = nnet::train(std::move(net), train, *data.val, opts);
  } else {
    r.training = nnet::train(std::move(net), *data.train, *data.val, opts);
  }
  auto best = std::make_shared<const nnet::Network>(r.training.best);
  const auto model = gateway::ModelHandle::native(best, names);
  r.test = evaluate(model, *data.test);
  return r;
}

// -- grids ----------------------------------------------------------------------

std::string_view grid_name(GridKind g) noexcept {
  switch (g) {
    case GridKind::Hyper:
      return "hyper";
    case GridKind::Heads:
      return "heads";
    case GridKind::Aug:
      return "aug";
  }
  return "hyper";
}

GridKind parse_grid(std::string_view name) {
  if (name == "hyper") return GridKind::Hyper;
  if (name == "heads") return GridKind::Heads;
  if (name == "aug") return GridKind::Aug;
  throw Error(Errc::ConfigError, "unknown grid '" + std::string(name) + "' (hyper, heads, aug)");
}

std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, GridKind kind) {
  std::vector<ExperimentConfig> out;
  switch (kind) {
    case GridKind::Hyper:
      for (double lr : kGridLearningRates) {
        for (auto opt : kGridOptimizers) {
          for (int e : kGridEpochs) {
            ExperimentConfig c = base;
            c.learning_rate = lr;
            c.optimizer = opt;
            c.epochs = e;
            out.push_back(std::move(c));
          }
        }
      }
      break;
    case GridKind::Heads:
      for (int v = 0; v <= nnet::kMaxHeadVersion; ++v) {
        ExperimentConfig c = base;
        c.head_version = v;
        out.push_back(std::move(c));
      }
      break;
    case GridKind::Aug:
      for (auto a : {Augmentation::None, Augmentation::Aug1, Augmentation::Aug2}) {
        ExperimentConfig c = base;
        c.augmentation = a;
        out.push_back(std::move(c));
      }
      break;
  }
  return out;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::string cell_id(const ExperimentConfig& cfg, GridKind kind) {
  switch (kind) {
    case GridKind::Hyper:
      return "lr" + fmt("%g", cfg.learning_rate) + "-" + std::string(nnet::optimizer_name(cfg.optimizer)) + "-e" +
             std::to_string(cfg.epochs);
    case GridKind::Heads:
      return "v" + std::to_string(cfg.head_version);
    case GridKind::Aug:
      return std::string(augmentation_name(cfg.augmentation));
  }
  return "cell";
}

json to_json(const CellResult& c) {
  json j = {{"id", c.id}, {"config", c.config.to_json()}, {"ok", c.ok}};
  if (c.ok) {
    j["best_epoch"] = c.best_epoch;
    j["best_val_loss"] = c.best_val_loss;
    j["metrics"] = to_json(c.metrics, {});
  } else {
    j["error"] = c.error;
  }
  return j;
}

CellResult cell_from_json(const json& j) {
  try {
    CellResult c;
    c.id = j.at("id").get<std::string>();
    c.config = ExperimentConfig::from_json(j.at("config"));
    c.ok = j.at("ok").get<bool>();
    if (c.ok) {
      c.best_epoch = j.at("best_epoch").get<int>();
      c.best_val_loss = j.at("best_val_loss").get<double>();
      c.metrics = metrics_from_json(j.at("metrics"));
    } else {
      c.error = j.value("error", "");
    }
    return c;
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, std::string("malformed cell record: ") + e.what());
  }
}

std::optional<std::size_t> select_best(const std::vector<CellResult>& cells) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    if (!c.ok) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = cells[*best];
    if (c.metrics.accuracy > b.metrics.accuracy ||
        (c.metrics.accuracy == b.metrics.accuracy && c.config.learning_rate < b.config.learning_rate))
      best = i;
  }
  return best;
}

GridReport run_grid(const ExperimentConfig& base, GridKind kind, const GridOptions& opts) {
  base.validate();
  const auto configs = expand_grid(base, kind);
  if (configs.empty()) throw Error(Errc::ConfigError, "grid is empty");

  GridReport report;
  report.kind = kind;
  std::optional<PreparedData> data;
  std::optional<fs::path> cells;
  if (opts.cell_dir) {
    cells = *opts.cell_dir / "cells";
    fs::create_directories(*cells);
  }

  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto& cfg = configs[i];
    CellResult cell;
    cell.id = cell_id(cfg, kind);
    cell.config = cfg;

    const fs::path record = cells ? *cells / (cell.id + ".json") : fs::path();
    bool done = false;
    if (cells && fs::exists(record)) {
      std::ifstream in(record);
      json j = json::parse(in, nullptr, false);
      if (!j.is_discarded()) {
        try {
          CellResult prior = cell_from_json(j);
          if (prior.ok && prior.config == cfg) {
            cell = std::move(prior);
            cell.resumed = true;
            done = true;
          }
        } catch (const Error&) {
        }
      }
    }

    if (!done) {
      try {
        if (!data) data = prepare_data(base.data_root, base.split_seed, base.balance);
        const RunResult r = run_experiment(cfg, *data);
        cell.ok = true;
        cell.best_epoch = r.training.best_epoch;
        cell.best_val_loss = r.training.history.at(r.training.best_epoch - 1).val_loss;
        cell.metrics = r.test.metrics;
      } catch (const Error& e) {
        // Data problems affect every cell alike.
        switch (e.code()) {
          case Errc::IoError:
          case Errc::NoClasses:
          case Errc::EmptyClass:
          case Errc::ClassTooSmall:
            throw;
          default:
            break;
        }
        cell.ok = false;
        cell.error = e.what();
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      if (cells) {
        std::ofstream out(record, std::ios::binary);
        out << to_json(cell).dump(2) << '\n';
      }
    }
    report.cells.push_back(std::move(cell));
    if (opts.progress) opts.progress(report.cells.back(), i, configs.size());
  }

  if (data) {
    report.class_names = data->corpus.classes;
  } else {
    try {
      report.class_names = dataset::scan_corpus(base.data_root).classes;
    } catch (const Error&) {
    }
  }
  report.best = select_best(report.cells);
  if (report.best) report.cells[*report.best].best = true;
  return report;
}

std::string grid_csv(const GridReport& report) {
  std::ostringstream os;
  os << "grid,cell,head_version,augmentation,learning_rate,optimizer,epochs,batch_size,seed,split_seed,status,"
        "best_epoch,best_val_loss,accuracy,macro_precision,macro_recall,macro_f1,degenerate,best\n";
  for (const auto& c : report.cells) {
    const auto& k = c.config;
    os << grid_name(report.kind) << ',' << c.id << ',' << k.head_version << ',' << augmentation_name(k.augmentation)
       << ',' << fmt("%g", k.learning_rate) << ',' << nnet::optimizer_name(k.optimizer) << ',' << k.epochs << ','
       << k.batch_size << ',' << k.seed << ',' << k.split_seed << ',' << (c.ok ? "ok" : "failed") << ',';
    if (c.ok) {
      os << c.best_epoch << ',' << fmt("%.9g", c.best_val_loss) << ',' << fmt("%.6f", c.metrics.accuracy) << ','
         << fmt("%.6f", c.metrics.macro_precision) << ',' << fmt("%.6f", c.metrics.macro_recall) << ','
         << fmt("%.6f", c.metrics.macro_f1) << ',' << (c.metrics.degenerate ? 1 : 0);
    } else {
      os << ",,,,,,";
    }
    os << ',' << (c.best ? 1 : 0) << '\n';
  }
  return os.str();
}

json grid_json(const GridReport& report) {
  json cells = json::array();
  for (const auto& c : report.cells) {
    json j = to_json(c);
    if (c.ok) j["metrics"] = to_json(c.metrics, report.class_names);
    j["best"] = c.best;
    cells.push_back(std::move(j));
  }
  json out = {{"grid", grid_name(report.kind)},
              {"averaging", kAveraging},
              {"class_names", report.class_names},
              {"cells", cells}};
  out["best_cell"] = report.best ? json(report.cells[*report.best].id) : json(nullptr);
  return out;
}

std::string grid_markdown(const GridReport& report) {
  std::ostringstream os;
  os << "# Grid `" << grid_name(report.kind) << "`\n\n";
  os << "Metrics are macro-averaged over classes and measured on the test partition. "
        "The best cell is marked in bold.\n\n";
  os << "| Cell | Head | Augmentation | LR | Optimizer | Epochs | Precision | Recall | F1 | Accuracy |\n";
  os << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& c : report.cells) {
    const auto& k = c.config;
    auto num = [&](double v) {
      std::string s = fmt("%.3f", v);
      return c.best ? "**" + s + "**" : s;
    };
    os << "| " << c.id << " | " << (k.head_version == 0 ? std::string("Original") : "Version " + std::to_string(k.head_version))
       << " | " << augmentation_name(k.augmentation) << " | " << fmt("%g", k.learning_rate) << " | "
       << nnet::optimizer_name(k.optimizer) << " | " << k.epochs << " | ";
    if (c.ok) {
      os << num(c.metrics.macro_precision) << " | " << num(c.metrics.macro_recall) << " | " << num(c.metrics.macro_f1)
         << " | " << num(c.metrics.accuracy) << " |\n";
    } else {
      os << "failed | | | |\n";
    }
  }
  return os.str();
}

}  // namespace xplain::evalbench
