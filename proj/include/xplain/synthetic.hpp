#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xplain/imaging.hpp"
#include "xplain/nnet.hpp"

// Synthetic tasks with known structure, used by tests, demos and the
// acceptance suite.
namespace xplain::synthetic {

inline constexpr int kBlobClasses = 4;

/// Raw255 image: gray noisy background plus one bright Gaussian blob whose
/// center lies in quadrant `label` (0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right), jittered around the quadrant center.
imaging::ImageTensor blob_image(int label, int size, Rng& rng);

struct BlobSet {
  std::vector<imaging::ImageTensor> images;  // Raw255
  std::vector<int> labels;
};

/// `per_class` images of each class, interleaved by class.
BlobSet blob_set(int per_class, int size, std::uint64_t seed);

std::vector<std::string> blob_class_names();

/// Writes a class-folder corpus (root/<class>/<class>_NNN.png).
void write_blob_corpus(const std::filesystem::path& root, int per_class, int size, std::uint64_t seed);

/// Two-class network whose class-0 logit is the mean of ReLU(channel 0) over
/// the right half of a single-channel 1x1 convolution map; class 1 has a
/// constant logit. Layers: conv (1x1, one output channel, weight 1 on input
/// channel 0), relu, flatten, logits, softmax.
nnet::Network right_half_model(int size = 224);

/// Normalized image whose left half is flat dark and whose right half is
/// zero-mean high-variance texture in channel 0.
imaging::ImageTensor right_half_image(std::uint64_t seed, int size = 224);

}  // namespace xplain::synthetic
