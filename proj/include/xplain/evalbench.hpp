#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "xplain/dataset.hpp"
#include "xplain/gateway.hpp"
#include "xplain/nnet.hpp"

namespace xplain::evalbench {

// -- metrics --------------------------------------------------------------------

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes = 0);
  ConfusionMatrix(int classes, std::vector<std::int64_t> counts);

  int classes() const { return classes_; }
  void add(int truth, int predicted, std::int64_t n = 1);
  std::int64_t at(int truth, int predicted) const { return counts_[static_cast<std::size_t>(truth) * classes_ + predicted]; }
  std::int64_t total() const;
  std::int64_t trace() const;
  const std::vector<std::int64_t>& counts() const { return counts_; }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int classes_;
  std::vector<std::int64_t> counts_;
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
  /// Set when a zero denominator forced one of the values to 0.
  bool degenerate = false;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::int64_t total = 0;
  bool degenerate = false;
};

inline constexpr std::string_view kAveraging = "macro";

/// Per-class precision, recall and F1 (0 on zero denominators, flagged),
/// their unweighted means, and accuracy = trace / total. Throws EmptyMatrix.
MetricsReport compute_metrics(const ConfusionMatrix& cm);

nlohmann::json to_json(const MetricsReport& m, const std::vector<std::string>& class_names);
nlohmann::json to_json(const ConfusionMatrix& cm);

struct Evaluation {
  ConfusionMatrix confusion;
  MetricsReport metrics;
};

/// Predicts every sample once (top class, lowest index on ties) and
/// accumulates the confusion matrix. Throws InvalidArgument on an empty set.
Evaluation evaluate(const gateway::ModelHandle& model, const nnet::SampleSource& data, int chunk = 32);

// -- experiments ----------------------------------------------------------------

enum class Augmentation { None, Aug1, Aug2 };

std::string_view augmentation_name(Augmentation a) noexcept;
Augmentation parse_augmentation(std::string_view name);
std::optional<imaging::AugmentationSpec> augmentation_spec(Augmentation a, std::uint64_t seed);

struct ExperimentConfig {
  std::filesystem::path data_root;
  std::uint64_t split_seed = 0;
  dataset::BalanceMode balance = dataset::BalanceMode::None;

  int head_version = 0;

  Augmentation augmentation = Augmentation::None;
  double learning_rate = 0.01;
  nnet::OptimizerKind optimizer = nnet::OptimizerKind::SGD;
  int epochs = 50;
  int batch_size = 32;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;

  /// {"data": {...}, "model": {...}, "train": {...}}
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys raise ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_json(const nlohmann::json& j, ExperimentConfig defaults);

  bool operator==(const ExperimentConfig&) const = default;
};

/// Scanned corpus, split and preprocessed (unaugmented) partitions, shared
/// by every run over the same data.
struct PreparedData {
  dataset::LabeledCorpus corpus;
  dataset::SplitPlan plan;
  std::shared_ptr<const nnet::InMemorySource> train;
  std::shared_ptr<const nnet::InMemorySource> val;
  std::shared_ptr<const nnet::InMemorySource> test;
  /// Corpus indices behind `train`, for augmenting sources.
  std::vector<std::size_t> train_items;
  /// Files that failed to decode and were left out.
  std::vector<std::filesystem::path> skipped;
};

/// Throws IoError, NoClasses, EmptyClass, ClassTooSmall.
PreparedData prepare_data(const std::filesystem::path& root, std::uint64_t split_seed, dataset::BalanceMode balance);

struct RunResult {
  nnet::TrainResult training;
  Evaluation test;
};

/// DeskNet with the configured head, trained on the train partition,
/// best-validation-loss parameters evaluated on the test partition.
RunResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data);

nnet::Network build_model(const ExperimentConfig& cfg, int num_classes);

// -- grids ----------------------------------------------------------------------

enum class GridKind { Hyper, Heads, Aug };

std::string_view grid_name(GridKind g) noexcept;
GridKind parse_grid(std::string_view name);

inline constexpr double kGridLearningRates[] = {0.001, 0.005, 0.01};
inline constexpr nnet::OptimizerKind kGridOptimizers[] = {nnet::OptimizerKind::SGD, nnet::OptimizerKind::Adam};
inline constexpr int kGridEpochs[] = {10, 20, 50};

/// Hyper: learning rate x optimizer x epochs (18 cells). Heads: versions
/// 0..8 (9 cells). Aug: none, aug1, aug2 (3 cells). Other fields come from
/// `base`.
std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, GridKind kind);

std::string cell_id(const ExperimentConfig& cfg, GridKind kind);

struct CellResult {
  std::string id;
  ExperimentConfig config;
  bool ok = false;
  std::string error;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  MetricsReport metrics;
  bool resumed = false;
  bool best = false;
};

struct GridReport {
  GridKind kind = GridKind::Hyper;
  std::vector<std::string> class_names;
  std::vector<CellResult> cells;
  std::optional<std::size_t> best;
};

struct GridOptions {
  /// When set, each finished cell is stored under <dir>/cells/ and cells
  /// already stored with an identical config are not re-run.
  std::optional<std::filesystem::path> cell_dir;
  std::function<void(const CellResult&, std::size_t index, std::size_t count)> progress;
};

/// Runs every cell; a failing cell is recorded and the grid continues. The
/// best cell has the highest test accuracy, ties going to the lower learning
/// rate, then to the earlier cell.
GridReport run_grid(const ExperimentConfig& base, GridKind kind, const GridOptions& opts = {});

/// Best-cell selection over finished cells.
std::optional<std::size_t> select_best(const std::vector<CellResult>& cells);

nlohmann::json to_json(const CellResult& c);
CellResult cell_from_json(const nlohmann::json& j);

std::string grid_csv(const GridReport& report);
nlohmann::json grid_json(const GridReport& report);
std::string grid_markdown(const GridReport& report);

}  // namespace xplain::evalbench
