#include "xplain/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>

namespace fs = std::filesystem;

namespace xplain::dataset {

void LabeledCorpus::validate() const {
  if (classes.empty()) throw Error(Errc::NoClasses, "corpus has no classes");
  if (counts.size() != classes.size()) throw Error(Errc::InvalidArgument, "counts/classes length mismatch");
  std::vector<std::size_t> seen(classes.size(), 0);
  for (const CorpusItem& it : items) {
    if (it.label < 0 || static_cast<std::size_t>(it.label) >= classes.size())
      throw Error(Errc::InvalidArgument, "item label out of range");
    ++seen[static_cast<std::size_t>(it.label)];
  }
  if (seen != counts) throw Error(Errc::InvalidArgument, "per-class counts do not match items");
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool want_dirs) {
  std::vector<fs::path> out;
  for (const fs::directory_entry& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.empty() || name.front() == '.') continue;
    if (want_dirs ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

LabeledCorpus scan_corpus(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw Error(Errc::IoError, "dataset root not found: " + root.string());
  const std::vector<fs::path> top = sorted_entries(root, true);
  if (top.empty()) throw Error(Errc::NoClasses, "no class folders under " + root.string());

  LabeledCorpus corpus;
  corpus.root = root;
  // class name -> folders contributing to it
  std::map<std::string, std::vector<fs::path>> class_dirs;
  corpus.merged_pools = std::all_of(top.begin(), top.end(), [](const fs::path& d) {
    return sorted_entries(d, false).empty() && !sorted_entries(d, true).empty();
  });
  if (corpus.merged_pools) {
    for (const fs::path& pool : top)
      for (const fs::path& cls : sorted_entries(pool, true)) class_dirs[cls.filename().string()].push_back(cls);
  } else {
    for (const fs::path& cls : top) class_dirs[cls.filename().string()].push_back(cls);
  }

  std::vector<CorpusItem> items;
  for (const auto& [name, dirs] : class_dirs) {
    const int label = static_cast<int>(corpus.classes.size());
    corpus.classes.push_back(name);
    std::size_t count = 0;
    for (const fs::path& d : dirs)
      for (const fs::path& f : sorted_entries(d, false)) {
        items.push_back({f, label});
        ++count;
      }
    if (count == 0) throw Error(Errc::EmptyClass, "class '" + name + "' has no images");
    corpus.counts.push_back(count);
  }
  std::sort(items.begin(), items.end(), [](const CorpusItem& a, const CorpusItem& b) { return a.path < b.path; });
  corpus.items = std::move(items);
  return corpus;
}

std::string_view balance_name(BalanceMode mode) noexcept {
  switch (mode) {
    case BalanceMode::None: return "none";
    case BalanceMode::Truncate: return "truncate";
    case BalanceMode::Oversample: return "oversample";
  }
  return "?";
}

BalanceMode parse_balance(std::string_view name) {
  if (name == "none") return BalanceMode::None;
  if (name == "truncate") return BalanceMode::Truncate;
  if (name == "oversample") return BalanceMode::Oversample;
  throw Error(Errc::InvalidArgument, "unknown balance mode '" + std::string(name) + "'");
}

SplitPlan make_split(const LabeledCorpus& corpus, std::uint64_t seed, BalanceMode balance) {
  corpus.validate();
  const std::size_t C = corpus.classes.size();
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < corpus.items.size(); ++i)
    by_class[static_cast<std::size_t>(corpus.items[i].label)].push_back(i);

  SplitPlan plan;
  plan.seed = seed;
  plan.balance = balance;
  std::vector<std::vector<std::size_t>> train(C);
  for (std::size_t c = 0; c < C; ++c) {
    auto& idx = by_class[c];
    if (idx.size() < kMinClassSize) {
      throw Error(Errc::ClassTooSmall, "class '" + corpus.classes[c] + "' has " + std::to_string(idx.size()) +
                                           " items; at least " + std::to_string(kMinClassSize) + " required");
    }
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return corpus.items[a].path < corpus.items[b].path; });
    Rng rng = Rng::stream(seed, c);
    rng.shuffle(std::span<std::size_t>(idx));
    const std::size_t n = idx.size();
    const auto n_train = static_cast<std::size_t>(std::floor(kSplitFractions[0] * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::floor(kSplitFractions[1] * static_cast<double>(n)));
    train[c].assign(idx.begin(), idx.begin() + n_train);
    plan.val.insert(plan.val.end(), idx.begin() + n_train, idx.begin() + n_train + n_val);
    plan.test.insert(plan.test.end(), idx.begin() + n_train + n_val, idx.end());
  }

  if (balance == BalanceMode::Truncate) {
    std::size_t target = train[0].size();
    for (const auto& t : train) target = std::min(target, t.size());
    for (auto& t : train) {
      plan.unused.insert(plan.unused.end(), t.begin() + target, t.end());
      t.resize(target);
    }
  } else if (balance == BalanceMode::Oversample) {
    std::size_t target = 0;
    for (const auto& t : train) target = std::max(target, t.size());
    for (std::size_t c = 0; c < C; ++c) {
      Rng rng = Rng::stream(seed, C + c);
      const std::size_t base = train[c].size();
      while (train[c].size() < target) train[c].push_back(train[c][rng.below(base)]);
    }
  }
  for (const auto& t : train) plan.train.insert(plan.train.end(), t.begin(), t.end());
  return plan;
}

namespace {

std::string relative_name(const LabeledCorpus& corpus, std::size_t index) {
  return corpus.items[index].path.lexically_relative(corpus.root).generic_string();
}

}  // namespace

nlohmann::json split_manifest(const LabeledCorpus& corpus, const SplitPlan& plan) {
  nlohmann::json j;
  j["format"] = "xplain-split-1";
  j["seed"] = plan.seed;
  j["fractions"] = {kSplitFractions[0], kSplitFractions[1], kSplitFractions[2]};
  j["rounding"] = "floor/floor/remainder";
  j["balance"] = std::string(balance_name(plan.balance));
  j["pool"] = corpus.merged_pools ? "merged" : "single";
  j["classes"] = corpus.classes;
  nlohmann::json per_class = nlohmann::json::object();
  for (const std::string& name : corpus.classes)
    per_class[name] = {{"train", nlohmann::json::array()},
                       {"val", nlohmann::json::array()},
                       {"test", nlohmann::json::array()},
                       {"unused", nlohmann::json::array()}};
  auto emit = [&](const std::vector<std::size_t>& list, const char* key) {
    for (std::size_t i : list)
      per_class[corpus.classes[static_cast<std::size_t>(corpus.items[i].label)]][key].push_back(
          relative_name(corpus, i));
  };
  emit(plan.train, "train");
  emit(plan.val, "val");
  emit(plan.test, "test");
  emit(plan.unused, "unused");
  j["per_class"] = std::move(per_class);
  return j;
}

SplitPlan plan_from_manifest(const LabeledCorpus& corpus, const nlohmann::json& manifest) {
  std::map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < corpus.items.size(); ++i) by_name[relative_name(corpus, i)] = i;
  SplitPlan plan;
  try {
    plan.seed = manifest.at("seed").get<std::uint64_t>();
    plan.balance = parse_balance(manifest.at("balance").get<std::string>());
    if (manifest.at("classes").get<std::vector<std::string>>() != corpus.classes)
      throw Error(Errc::IoError, "split manifest classes do not match the corpus");
    for (const std::string& cls : corpus.classes) {
      const auto& entry = manifest.at("per_class").at(cls);
      auto load = [&](const char* key, std::vector<std::size_t>& out) {
        for (const auto& name : entry.at(key)) {
          const auto it = by_name.find(name.get<std::string>());
          if (it == by_name.end())
            throw Error(Errc::IoError, "split manifest lists missing file " + name.get<std::string>());
          out.push_back(it->second);
        }
      };
      load("train", plan.train);
      load("val", plan.val);
      load("test", plan.test);
      load("unused", plan.unused);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::IoError, std::string("malformed split manifest: ") + e.what());
  }
  return plan;
}

std::string_view partition_name(Partition p) noexcept {
  switch (p) {
    case Partition::Train: return "train";
    case Partition::Val: return "val";
    case Partition::Test: return "test";
  }
  return "?";
}

Partition parse_partition(std::string_view name) {
  if (name == "train") return Partition::Train;
  if (name == "val") return Partition::Val;
  if (name == "test") return Partition::Test;
  throw Error(Errc::InvalidArgument, "unknown partition '" + std::string(name) + "'");
}

const std::vector<std::size_t>& partition(const SplitPlan& plan, Partition p) {
  switch (p) {
    case Partition::Train: return plan.train;
    case Partition::Val: return plan.val;
    case Partition::Test: return plan.test;
  }
  return plan.test;
}

// -- sources ------------------------------------------------------------------

CorpusSource::CorpusSource(const LabeledCorpus& corpus, std::vector<std::size_t> indices,
                           std::optional<imaging::AugmentationSpec> augmentation)
    : corpus_(&corpus), indices_(std::move(indices)), augmentation_(std::move(augmentation)) {
  for (std::size_t i : indices_)
    if (i >= corpus.items.size()) throw Error(Errc::InvalidArgument, "corpus index out of range");
  if (augmentation_) augmentation_->validate();
}

int CorpusSource::label(std::size_t i) const { return corpus_->items[indices_.at(i)].label; }

const fs::path& CorpusSource::path(std::size_t i) const { return corpus_->items[indices_.at(i)].path; }

imaging::ImageTensor CorpusSource::load(std::size_t i, std::uint64_t epoch) const {
  imaging::ImageTensor raw = imaging::read_image(path(i));
  if (augmentation_) {
    Rng rng = Rng::stream(augmentation_->seed, epoch * indices_.size() + i);
    const imaging::AffineTransform t =
        imaging::sample_augmentation(*augmentation_, {raw.height, raw.width}, rng);
    raw = imaging::apply_affine(raw, t, {augmentation_->fill_mode, augmentation_->cval});
  }
  return imaging::preprocess(raw);
}

BatchIterator::BatchIterator(const LabeledCorpus& corpus, std::vector<std::size_t> indices, int batch_size,
                             std::optional<std::uint64_t> shuffle_seed)
    : corpus_(&corpus), order_(std::move(indices)), batch_size_(batch_size) {
  if (batch_size < 1) throw Error(Errc::InvalidArgument, "batch_size must be >= 1");
  std::sort(order_.begin(), order_.end(),
            [&](std::size_t a, std::size_t b) { return corpus.items.at(a).path < corpus.items.at(b).path; });
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(std::span<std::size_t>(order_));
  }
}

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  Batch batch;
  std::vector<int> labels;
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(batch_size_));
  for (; cursor_ < end; ++cursor_) {
    const std::size_t idx = order_[cursor_];
    try {
      batch.images.push_back(imaging::preprocess(imaging::read_image(corpus_->items[idx].path)));
    } catch (const Error&) {
      ++skipped_;
      continue;
    }
    batch.indices.push_back(idx);
    labels.push_back(corpus_->items[idx].label);
  }
  batch.labels = nnet::one_hot(labels, static_cast<int>(corpus_->classes.size()));
  return batch;
}

}  // namespace xplain::dataset
