#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"
#include "xplain/error.hpp"
#include "xplain/imaging.hpp"

using namespace xplain;
using namespace xplain::imaging;
using xplain::testing::random_image;
using xplain::testing::TempDir;

namespace {

// Reference resampler: out = Wy * img * Wx^T with explicit interpolation
// weight matrices built from the half-pixel mapping.
std::vector<std::vector<double>> weights(int in, int out) {
  std::vector<std::vector<double>> w(out, std::vector<double>(in, 0.0));
  for (int d = 0; d < out; ++d) {
    double s = (d + 0.5) * static_cast<double>(in) / out - 0.5;
    if (s < 0) s = 0;
    if (s > in - 1) s = in - 1;
    int i0 = static_cast<int>(s);
    double f = s - i0;
    w[d][i0] += 1.0 - f;
    if (f > 0) w[d][i0 + 1] += f;
  }
  return w;
}

std::vector<double> reference_resize(const ImageTensor& img, int oh, int ow) {
  const auto wy = weights(img.height, oh);
  const auto wx = weights(img.width, ow);
  std::vector<double> out(3 * static_cast<std::size_t>(oh) * ow, 0.0);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> tmp(static_cast<std::size_t>(oh) * img.width, 0.0);
    for (int y = 0; y < oh; ++y)
      for (int i = 0; i < img.height; ++i)
        if (wy[y][i] != 0.0)
          for (int x = 0; x < img.width; ++x) tmp[y * img.width + x] += wy[y][i] * img.at(c, i, x);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int j = 0; j < img.width; ++j) s += wx[x][j] * tmp[y * img.width + j];
        out[(static_cast<std::size_t>(c) * oh + y) * ow + x] = s;
      }
  }
  return out;
}

ImageTensor constant_raw(int h, int w, float r, float g, float b) {
  ImageTensor img(h, w, RangeTag::Raw255);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(0, y, x) = r;
      img.at(1, y, x) = g;
      img.at(2, y, x) = b;
    }
  return img;
}

}  // namespace

TEST(Resize, MatchesReferenceResamplerOnUpAndDownScaling) {
  const std::pair<int, int> sizes[][2] = {{{17, 23}, {256, 256}}, {{300, 200}, {256, 256}}, {{64, 64}, {31, 97}}};
  std::uint64_t seed = 1;
  for (const auto& [in, out] : sizes) {
    const ImageTensor img = random_image(in.first, in.second, RangeTag::Unit, seed++);
    const ImageTensor got = resize_bilinear(img, {out.first, out.second});
    ASSERT_EQ(got.height, out.first);
    ASSERT_EQ(got.width, out.second);
    const auto ref = reference_resize(img, out.first, out.second);
    double worst = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - got.data[i]));
    EXPECT_LT(worst, 1e-6) << in.first << "x" << in.second << " -> " << out.first << "x" << out.second;
  }
}

TEST(Resize, IdentitySizeIsExact) {
  const ImageTensor img = random_image(40, 30, RangeTag::Raw255, 5);
  EXPECT_EQ(resize_bilinear(img, {40, 30}).data, img.data);
}

TEST(Resize, OutputIsConvexCombination) {
  const ImageTensor img = random_image(13, 29, RangeTag::Unit, 9);
  const ImageTensor out = resize_bilinear(img, {50, 7});
  for (float v : out.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(CenterCrop, UsesFloorOffset) {
  ImageTensor img(5, 6, RangeTag::Raw255);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 6; ++x) img.at(0, y, x) = static_cast<float>(10 * y + x);
  const ImageTensor c = center_crop(img, {2, 3});
  // offsets floor(3/2)=1, floor(3/2)=1
  EXPECT_EQ(c.at(0, 0, 0), 11.0f);
  EXPECT_EQ(c.at(0, 1, 2), 23.0f);
}

TEST(CenterCrop, TooLargeThrows) {
  const ImageTensor img(10, 10, RangeTag::Raw255);
  try {
    center_crop(img, {11, 5});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::CropTooLarge);
  }
}

TEST(Preprocess, ProducesNormalized224) {
  for (auto [h, w] : {std::pair{512, 512}, std::pair{300, 451}, std::pair{64, 64}}) {
    const ImageTensor out = preprocess(random_image(h, w, RangeTag::Raw255, 3));
    EXPECT_EQ(out.height, 224);
    EXPECT_EQ(out.width, 224);
    EXPECT_EQ(out.size(), 3u * 224 * 224);
    EXPECT_EQ(out.range, RangeTag::Normalized);
  }
}

TEST(Preprocess, ConstantImageMatchesHandComputedValues) {
  // (v / 255 - mean) / std, computed independently.
  const double expect_a[3] = {2.2489082969, -2.0357142857, 0.4264923747};
  const double expect_b[3] = {0.0740645603, 0.2051820728, 0.4264923747};
  const ImageTensor a = preprocess(constant_raw(300, 280, 255, 0, 128));
  const ImageTensor b = preprocess(constant_raw(100, 100, 128, 128, 128));
  for (int c = 0; c < 3; ++c) {
    for (float v : a.channel(c)) ASSERT_NEAR(v, expect_a[c], 1e-6);
    for (float v : b.channel(c)) ASSERT_NEAR(v, expect_b[c], 1e-6);
  }
}

TEST(Normalize, RoundTripsThroughDenormalize) {
  const ImageTensor u = random_image(8, 9, RangeTag::Unit, 11);
  const ImageTensor back = denormalize(normalize(u));
  EXPECT_EQ(back.range, RangeTag::Unit);
  for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(back.data[i], u.data[i], 1e-6);
}

TEST(Normalize, WrongRangeTagThrows) {
  const ImageTensor raw = random_image(4, 4, RangeTag::Raw255, 1);
  EXPECT_THROW(normalize(raw), Error);
  try {
    normalize(raw);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::RangeTagMismatch);
  }
  try {
    scale_unit(scale_unit(raw));
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::RangeTagMismatch);
  }
}

TEST(Codec, PngRoundTripIsLossless) {
  RgbImage img(7, 5);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 37);
  const auto bytes = encode_png(img);
  const ImageTensor back = decode_image(bytes);
  EXPECT_EQ(to_rgb(back), img);
}

TEST(Codec, GrayscaleJpegIsReplicatedToThreeChannels) {
  RgbImage img(16, 16, 90);
  const auto bytes = encode_jpeg(img, 95, true);
  const ImageTensor t = decode_image(bytes);
  ASSERT_EQ(t.height, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      EXPECT_EQ(t.at(0, y, x), t.at(1, y, x));
      EXPECT_EQ(t.at(0, y, x), t.at(2, y, x));
    }
}

TEST(Codec, TruncatedJpegIsDecodeError) {
  RgbImage img(64, 64, 120);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>((i * 7) % 251);
  auto bytes = encode_jpeg(img, 90);
  bytes.resize(bytes.size() / 2);
  try {
    decode_image(bytes);
    FAIL() << "truncated JPEG decoded";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DecodeError);
  }
}

TEST(Codec, GarbageIsDecodeError) {
  const std::vector<std::uint8_t> junk{1, 2, 3, 4, 5, 6, 7, 8};
  try {
    decode_image(junk);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DecodeError);
  }
}

TEST(Codec, MissingFileIsIoError) {
  try {
    read_image("/nonexistent/definitely/not/here.png");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::IoError);
  }
}

TEST(Codec, WritePngThenReadImage) {
  TempDir dir;
  RgbImage img(3, 4, 200);
  img.px(1, 2)[0] = 7;
  write_png(dir / "x.png", img);
  EXPECT_EQ(to_rgb(read_image(dir / "x.png")), img);
}

TEST(Xpb1, RoundTripIsBitExact) {
  const ImageTensor img = preprocess(random_image(50, 60, RangeTag::Raw255, 2));
  const auto bytes = encode_xpb1(img);
  ASSERT_EQ(bytes.size(), kXpb1HeaderSize + img.size() * 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "XPB1");
  std::size_t offset = 0;
  const ImageTensor back = decode_xpb1(bytes, offset);
  EXPECT_EQ(offset, bytes.size());
  EXPECT_EQ(back, img);
}

TEST(Xpb1, HeaderIsLittleEndian) {
  ImageTensor img(2, 5, RangeTag::Normalized, 1.0f);
  const auto b = encode_xpb1(img);
  EXPECT_EQ(b[4], 3);
  EXPECT_EQ(b[8], 2);
  EXPECT_EQ(b[12], 5);
  // 1.0f = 0x3f800000
  EXPECT_EQ(b[16], 0x00);
  EXPECT_EQ(b[19], 0x3f);
}

TEST(Xpb1, BatchAndBadMagic) {
  const ImageTensor a = preprocess(random_image(30, 30, RangeTag::Raw255, 4));
  const ImageTensor b = preprocess(random_image(30, 30, RangeTag::Raw255, 5));
  std::vector<std::uint8_t> bytes;
  append_xpb1(bytes, a);
  append_xpb1(bytes, b);
  const auto batch = decode_xpb1_batch(bytes);
  ASSERT_EQ(batch.size(), 2u);
  EXPECT_EQ(batch[1], b);

  bytes[0] = 'Q';
  try {
    decode_xpb1_batch(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ProtocolError);
  }
  auto truncated = encode_xpb1(a);
  truncated.pop_back();
  EXPECT_THROW(decode_xpb1_batch(truncated), Error);
}

TEST(Augmentation, PresetsMatchDocumentedRanges) {
  const auto a1 = AugmentationSpec::aug1();
  EXPECT_DOUBLE_EQ(a1.rotation_range, 0.05);
  EXPECT_DOUBLE_EQ(a1.shear_range, 0.05);
  EXPECT_DOUBLE_EQ(a1.zoom_range, 0.05);
  EXPECT_TRUE(a1.horizontal_flip);
  EXPECT_TRUE(a1.vertical_flip);
  EXPECT_EQ(a1.fill_mode, FillMode::Nearest);
  const auto a2 = AugmentationSpec::aug2();
  EXPECT_DOUBLE_EQ(a2.rotation_range, 3.0);
  EXPECT_DOUBLE_EQ(a2.width_shift_range, 0.05);
  EXPECT_DOUBLE_EQ(a2.height_shift_range, 0.05);
  EXPECT_EQ(a2.fill_mode, FillMode::Constant);
  EXPECT_EQ(a2.cval, 0.0f);
}

TEST(Augmentation, SameSeedSameTransform) {
  const auto spec = AugmentationSpec::aug2(42);
  Rng r1(7), r2(7);
  const auto t1 = sample_augmentation(spec, {224, 224}, r1);
  const auto t2 = sample_augmentation(spec, {224, 224}, r2);
  EXPECT_EQ(t1, t2);
  EXPECT_LE(std::abs(t1.rotation_deg), 3.0);
  EXPECT_LE(std::abs(t1.shift_x), 0.05 * 224 + 1e-9);
}

TEST(Augmentation, IdentityTransformIsExact) {
  const ImageTensor img = random_image(20, 24, RangeTag::Raw255, 8);
  EXPECT_EQ(apply_affine(img, AffineTransform{}, Fill{}), img);
}

TEST(Augmentation, FlipsMirrorPixels) {
  const ImageTensor img = random_image(6, 9, RangeTag::Raw255, 12);
  AffineTransform h;
  h.flip_horizontal = true;
  const ImageTensor f = apply_affine(img, h, Fill{});
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 9; ++x) EXPECT_EQ(f.at(1, y, x), img.at(1, y, 8 - x));
  AffineTransform v;
  v.flip_vertical = true;
  const ImageTensor g = apply_affine(img, v, Fill{});
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 9; ++x) EXPECT_EQ(g.at(2, y, x), img.at(2, 5 - y, x));
}

TEST(Augmentation, ConstantFillUsesCvalOutsideImage) {
  ImageTensor img(10, 10, RangeTag::Raw255, 100.0f);
  AffineTransform t;
  t.shift_x = 4.0;
  const ImageTensor c = apply_affine(img, t, Fill{FillMode::Constant, 0.0f});
  EXPECT_EQ(c.at(0, 5, 0), 0.0f);
  EXPECT_EQ(c.at(0, 5, 9), 100.0f);
  const ImageTensor n = apply_affine(img, t, Fill{FillMode::Nearest, 0.0f});
  EXPECT_EQ(n.at(0, 5, 0), 100.0f);
}

TEST(ImageTensor, ValidateRejectsOutOfRangeUnit) {
  ImageTensor u(2, 2, RangeTag::Unit, 0.5f);
  EXPECT_NO_THROW(u.validate());
  u.data[3] = 1.5f;
  EXPECT_THROW(u.validate(), Error);
}
