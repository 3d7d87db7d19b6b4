#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xplain/imaging.hpp"
#include "xplain/nnet.hpp"

namespace xplain::dataset {

struct CorpusItem {
  std::filesystem::path path;
  int label = 0;

  bool operator==(const CorpusItem&) const = default;
};

struct LabeledCorpus {
  std::filesystem::path root;
  std::vector<std::string> classes;  // sorted folder names; index == label
  std::vector<CorpusItem> items;     // sorted by path
  std::vector<std::size_t> counts;   // per class
  bool merged_pools = false;         // root/<pool>/<class>/ layout was merged

  void validate() const;
};

bool is_image_file(const std::filesystem::path& p);

/// Scans root/<class>/<image>. When every top-level folder holds only
/// sub-folders (root/<pool>/<class>/<image>, e.g. Training/ and Testing/),
/// pools are merged by class name. Throws NoClasses, EmptyClass.
LabeledCorpus scan_corpus(const std::filesystem::path& root);

enum class BalanceMode { None, Truncate, Oversample };

std::string_view balance_name(BalanceMode mode) noexcept;
BalanceMode parse_balance(std::string_view name);

inline constexpr std::array<double, 3> kSplitFractions{0.8, 0.1, 0.1};
inline constexpr std::size_t kMinClassSize = 10;

/// Indices refer to LabeledCorpus::items. Per class: train = floor(0.8 n),
/// val = floor(0.1 n), test = the remainder. Truncate balancing moves train
/// items beyond the smallest class's train count into `unused`; Oversample
/// repeats train items (seeded) up to the largest class's train count.
struct SplitPlan {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::vector<std::size_t> unused;
  std::uint64_t seed = 0;
  BalanceMode balance = BalanceMode::None;

  bool operator==(const SplitPlan&) const = default;
};

/// Each class's items are sorted by path, then shuffled with a per-class
/// stream of `seed`, then cut. Throws ClassTooSmall.
SplitPlan make_split(const LabeledCorpus& corpus, std::uint64_t seed, BalanceMode balance = BalanceMode::None);

/// Split manifest: seed, fractions, balance mode, pool handling, and the
/// per-class file lists relative to the corpus root.
nlohmann::json split_manifest(const LabeledCorpus& corpus, const SplitPlan& plan);

/// Rebuilds a plan against a scanned corpus from a manifest. Throws IoError
/// when a listed file is not in the corpus.
SplitPlan plan_from_manifest(const LabeledCorpus& corpus, const nlohmann::json& manifest);

enum class Partition { Train, Val, Test };
std::string_view partition_name(Partition p) noexcept;
Partition parse_partition(std::string_view name);
const std::vector<std::size_t>& partition(const SplitPlan& plan, Partition p);

/// Decoded, optionally augmented, preprocessed images for one partition.
/// Augmentation draws from Rng::stream(spec.seed, epoch * size() + index) so
/// each image and epoch has its own reproducible stream.
class CorpusSource final : public nnet::SampleSource {
 public:
  CorpusSource(const LabeledCorpus& corpus, std::vector<std::size_t> indices,
               std::optional<imaging::AugmentationSpec> augmentation = std::nullopt);

  std::size_t size() const override { return indices_.size(); }
  int label(std::size_t i) const override;
  imaging::ImageTensor load(std::size_t i, std::uint64_t epoch) const override;
  bool epoch_invariant() const override { return !augmentation_.has_value(); }

  const std::filesystem::path& path(std::size_t i) const;

 private:
  const LabeledCorpus* corpus_;
  std::vector<std::size_t> indices_;
  std::optional<imaging::AugmentationSpec> augmentation_;
};

struct Batch {
  std::vector<imaging::ImageTensor> images;
  nnet::Tensor labels;                 // one-hot rows
  std::vector<std::size_t> indices;    // corpus item indices
};

/// Iterates a partition in batches; every index once per epoch, the last
/// batch may be short. Without a shuffle seed the order is the sorted path
/// order. Unreadable files are skipped and counted.
class BatchIterator {
 public:
  BatchIterator(const LabeledCorpus& corpus, std::vector<std::size_t> indices, int batch_size,
                std::optional<std::uint64_t> shuffle_seed = std::nullopt);

  /// Empty optional at the end of the epoch.
  std::optional<Batch> next();

  std::size_t skipped() const { return skipped_; }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const LabeledCorpus* corpus_;
  std::vector<std::size_t> order_;
  int batch_size_;
  std::size_t cursor_ = 0;
  std::size_t skipped_ = 0;
};

}  // namespace xplain::dataset
