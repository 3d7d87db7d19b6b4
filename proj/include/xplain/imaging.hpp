#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xplain/error.hpp"
#include "xplain/rng.hpp"

namespace xplain::imaging {

enum class RangeTag : std::uint8_t { Raw255, Unit, Normalized };

std::string_view range_tag_name(RangeTag tag) noexcept;

/// Three-channel image stored channel-major (CHW).
struct ImageTensor {
  static constexpr int kChannels = 3;

  int height = 0;
  int width = 0;
  RangeTag range = RangeTag::Raw255;
  std::vector<float> data;

  ImageTensor() = default;
  ImageTensor(int h, int w, RangeTag tag, float fill = 0.0f);

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }

  float& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int c, int y, int x) const {
    return data[c * plane() + static_cast<std::size_t>(y) * width + x];
  }

  std::span<float> channel(int c) { return {data.data() + c * plane(), plane()}; }
  std::span<const float> channel(int c) const { return {data.data() + c * plane(), plane()}; }

  // Throws InvalidArgument when the size or the range_tag value bounds are violated.
  void validate() const;

  bool operator==(const ImageTensor&) const = default;
};

struct NormalizationConstants {
  std::array<double, 3> mean;
  std::array<double, 3> std;

  static NormalizationConstants imagenet() {
    return {{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}};
  }
};

struct Size2 {
  int height = 0;
  int width = 0;
};

// Preprocessing chain geometry.
inline constexpr Size2 kResizeTarget{256, 256};
inline constexpr Size2 kCropTarget{224, 224};

// -- codecs -------------------------------------------------------------------

/// Decodes a JPEG or PNG stream. Grayscale is replicated to three channels,
/// alpha is dropped.
ImageTensor decode_image(std::span<const std::uint8_t> bytes);
ImageTensor read_image(const std::filesystem::path& path);

/// 8-bit interleaved RGB raster used for encoding and rendering.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // HWC

  RgbImage() = default;
  RgbImage(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  std::uint8_t* px(int y, int x) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* px(int y, int x) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }

  bool operator==(const RgbImage&) const = default;
};

std::vector<std::uint8_t> encode_png(const RgbImage& img);
std::vector<std::uint8_t> encode_jpeg(const RgbImage& img, int quality = 95, bool grayscale = false);
void write_png(const std::filesystem::path& path, const RgbImage& img);

/// Rounds and clamps a Raw255 tensor to 8 bits.
RgbImage to_rgb(const ImageTensor& raw);
ImageTensor from_rgb(const RgbImage& img);

// -- geometry -----------------------------------------------------------------

/// Bilinear resampling with half-pixel-center alignment:
///   src = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
/// Output values are convex combinations of input values.
ImageTensor resize_bilinear(const ImageTensor& img, Size2 target);

/// Crop offset is floor((H - h) / 2), floor((W - w) / 2).
ImageTensor center_crop(const ImageTensor& img, Size2 size);

// -- value range --------------------------------------------------------------

ImageTensor scale_unit(const ImageTensor& raw);
ImageTensor normalize(const ImageTensor& unit, const NormalizationConstants& c = NormalizationConstants::imagenet());
ImageTensor denormalize(const ImageTensor& normalized,
                        const NormalizationConstants& c = NormalizationConstants::imagenet());

/// resize(256) -> center_crop(224) -> scale_unit -> normalize.
ImageTensor preprocess(const ImageTensor& raw);

/// Normalized or Unit tensor back to 8-bit RGB for display.
RgbImage to_display(const ImageTensor& img);

// -- augmentation -------------------------------------------------------------

enum class FillMode : std::uint8_t { Constant, Nearest };

/// Ranges follow the usual Keras generator conventions: rotation and shear in
/// degrees, zoom as a fraction around 1, shifts as fractions of the dimension.
struct AugmentationSpec {
  double rotation_range = 0.0;
  double shear_range = 0.0;
  double zoom_range = 0.0;
  double width_shift_range = 0.0;
  double height_shift_range = 0.0;
  bool horizontal_flip = false;
  bool vertical_flip = false;
  FillMode fill_mode = FillMode::Nearest;
  float cval = 0.0f;
  std::uint64_t seed = 0;

  void validate() const;

  static AugmentationSpec aug1(std::uint64_t seed = 0);
  static AugmentationSpec aug2(std::uint64_t seed = 0);
};

struct AffineTransform {
  double rotation_deg = 0.0;
  double shear_deg = 0.0;
  double zoom_x = 1.0;
  double zoom_y = 1.0;
  double shift_x = 0.0;  // pixels, positive moves content right
  double shift_y = 0.0;  // pixels, positive moves content down
  bool flip_horizontal = false;
  bool flip_vertical = false;

  bool operator==(const AffineTransform&) const = default;
};

struct Fill {
  FillMode mode = FillMode::Nearest;
  float cval = 0.0f;
};

/// Draws one transform for an image of the given size. Every parameter is
/// drawn on every call, in a fixed order, so streams stay aligned regardless
/// of which ranges are zero.
AffineTransform sample_augmentation(const AugmentationSpec& spec, Size2 image, Rng& rng);

/// Warps around the image center in the order rotate, shear, zoom, shift,
/// samples bilinearly, then applies flips.
ImageTensor apply_affine(const ImageTensor& img, const AffineTransform& t, Fill fill);

// -- XPB1 tensor container ----------------------------------------------------
//
// 16-byte header: magic "XPB1", then u32 channels, height, width (little
// endian), followed by channels*height*width float32 values in C order.

inline constexpr std::size_t kXpb1HeaderSize = 16;

std::vector<std::uint8_t> encode_xpb1(const ImageTensor& img);
void append_xpb1(std::vector<std::uint8_t>& out, const ImageTensor& img);

/// Decodes one record starting at `offset`; advances it past the record.
/// The decoded tensor is tagged Normalized.
ImageTensor decode_xpb1(std::span<const std::uint8_t> bytes, std::size_t& offset);

/// A batch on the wire is N back-to-back XPB1 records.
std::vector<ImageTensor> decode_xpb1_batch(std::span<const std::uint8_t> bytes);

}  // namespace xplain::imaging
