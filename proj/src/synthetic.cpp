#include "xplain/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace xplain::synthetic {

imaging::ImageTensor blob_image(int label, int size, Rng& rng) {
  if (label < 0 || label >= kBlobClasses) throw Error(Errc::InvalidArgument, "blob label out of range");
  if (size < 8) throw Error(Errc::InvalidArgument, "blob image size must be >= 8");
  const double quarter = size / 4.0;
  const double cx = (label % 2 == 0 ? quarter : 3.0 * quarter) + rng.uniform(-size / 16.0, size / 16.0);
  const double cy = (label / 2 == 0 ? quarter : 3.0 * quarter) + rng.uniform(-size / 16.0, size / 16.0);
  const double sigma = size / 8.0;
  const double amplitude = 130.0 + rng.uniform(-20.0, 20.0);
  const double tint[3] = {1.0, 0.8 + rng.uniform(-0.1, 0.1), 0.6 + rng.uniform(-0.1, 0.1)};

  imaging::ImageTensor img(size, size, imaging::RangeTag::Raw255);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      const double blob = amplitude * std::exp(-d2 / (2.0 * sigma * sigma));
      const double noise = 12.0 * rng.normal();
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(std::clamp(std::round(90.0 + noise + tint[c] * blob), 0.0, 255.0));
    }
  }
  return img;
}

BlobSet blob_set(int per_class, int size, std::uint64_t seed) {
  BlobSet set;
  Rng rng(seed);
  for (int i = 0; i < per_class; ++i) {
    for (int k = 0; k < kBlobClasses; ++k) {
      set.images.push_back(blob_image(k, size, rng));
      set.labels.push_back(k);
    }
  }
  return set;
}

std::vector<std::string> blob_class_names() { return {"blob_bl", "blob_br", "blob_tl", "blob_tr"}; }

void write_blob_corpus(const std::filesystem::path& root, int per_class, int size, std::uint64_t seed) {
  // Folder names sort into label order 2, 3, 0, 1 deliberately, so the scanner's
  // sorted class order (not generation order) defines label indices.
  static constexpr int kLabelOf[] = {2, 3, 0, 1};
  const auto names = blob_class_names();
  Rng rng(seed);
  for (int k = 0; k < kBlobClasses; ++k) std::filesystem::create_directories(root / names[k]);
  for (int i = 0; i < per_class; ++i) {
    for (int k = 0; k < kBlobClasses; ++k) {
      const imaging::ImageTensor img = blob_image(kLabelOf[k], size, rng);
      char file[64];
      std::snprintf(file, sizeof file, "%s_%03d.png", names[k].c_str(), i);
      imaging::write_png(root / names[k] / file, imaging::to_rgb(img));
    }
  }
}

nnet::Network right_half_model(int size) {
  using nnet::LayerSpec;
  nnet::Network net({3, size, size},
                    {LayerSpec::conv2d("conv", 1, 1, 1, 0), LayerSpec::relu("relu"), LayerSpec::flatten("flatten"),
                     LayerSpec::dense("logits", 2), LayerSpec::softmax("softmax")},
                    0);
  auto& p = net.params();
  p[0].weight = {1.0, 0.0, 0.0};
  p[0].bias = {0.0};
  constexpr double kGain = 4.0;
  const double per_pixel = kGain / (static_cast<double>(size) * (size - size / 2));
  std::fill(p[3].weight.begin(), p[3].weight.end(), 0.0);
  for (int y = 0; y < size; ++y)
    for (int x = size / 2; x < size; ++x) p[3].weight[static_cast<std::size_t>(y) * size + x] = per_pixel;
  p[3].bias = {0.0, 2.0};
  return net;
}

imaging::ImageTensor right_half_image(std::uint64_t seed, int size) {
  Rng rng(seed);
  imaging::ImageTensor img(size, size, imaging::RangeTag::Normalized, 0.0f);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) img.at(0, y, x) = x < size / 2 ? -1.0f : (rng.bernoulli(0.5) ? 2.0f : -2.0f);
  return img;
}

}  // namespace xplain::synthetic
