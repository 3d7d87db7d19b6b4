#include "xplain/imaging.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include <jpeglib.h>
#include <png.h>

namespace xplain::imaging {

std::string_view range_tag_name(RangeTag tag) noexcept {
  switch (tag) {
    case RangeTag::Raw255: return "Raw255";
    case RangeTag::Unit: return "Unit";
    case RangeTag::Normalized: return "Normalized";
  }
  return "?";
}

ImageTensor::ImageTensor(int h, int w, RangeTag tag, float fill)
    : height(h), width(w), range(tag), data(static_cast<std::size_t>(kChannels) * h * w, fill) {
  if (h < 0 || w < 0) throw Error(Errc::InvalidArgument, "negative image dimensions");
}

void ImageTensor::validate() const {
  if (data.size() != static_cast<std::size_t>(kChannels) * height * width)
    throw Error(Errc::InvalidArgument, "data length does not match 3*height*width");
  for (float v : data) {
    if (!std::isfinite(v)) throw Error(Errc::InvalidArgument, "non-finite pixel value");
    if (range == RangeTag::Raw255 && (v < 0.0f || v > 255.0f))
      throw Error(Errc::InvalidArgument, "Raw255 value outside [0,255]");
    if (range == RangeTag::Unit && (v < 0.0f || v > 1.0f))
      throw Error(Errc::InvalidArgument, "Unit value outside [0,1]");
  }
}

namespace {

void require_range(const ImageTensor& img, RangeTag expected, std::string_view op) {
  if (img.range != expected) {
    throw Error(Errc::RangeTagMismatch, std::string(op) + " expects " + std::string(range_tag_name(expected)) +
                                            " input, got " + std::string(range_tag_name(img.range)));
  }
}

// -- JPEG ---------------------------------------------------------------------

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Warnings (level -1) are counted but not printed.
void jpeg_silent(j_common_ptr cinfo, int level) {
  if (level < 0) cinfo->err->num_warnings++;
}

struct JpegRaster {
  std::vector<std::uint8_t> pixels;
  int height = 0;
  int width = 0;
  int components = 0;
  bool truncated = false;
};

// Holds the setjmp frame; everything it writes lives in the caller's raster.
bool decode_jpeg_into(std::span<const std::uint8_t> bytes, JpegRaster& out, JpegErrorManager& jerr) {
  jpeg_decompress_struct cinfo{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  jerr.base.emit_message = jpeg_silent;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.height = static_cast<int>(cinfo.output_height);
  out.width = static_cast<int>(cinfo.output_width);
  out.components = cinfo.output_components;
  out.pixels.resize(static_cast<std::size_t>(out.height) * out.width * out.components);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * out.components;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  out.truncated = jerr.base.num_warnings > 0;
  jpeg_destroy_decompress(&cinfo);
  return true;
}

ImageTensor decode_jpeg(std::span<const std::uint8_t> bytes) {
  JpegRaster raster;
  JpegErrorManager jerr{};
  if (!decode_jpeg_into(bytes, raster, jerr)) throw Error(Errc::DecodeError, std::string("jpeg: ") + jerr.message);
  if (raster.truncated) throw Error(Errc::DecodeError, "jpeg: truncated or corrupt stream");

  ImageTensor out(raster.height, raster.width, RangeTag::Raw255);
  for (int y = 0; y < raster.height; ++y) {
    for (int x = 0; x < raster.width; ++x) {
      const std::uint8_t* p =
          raster.pixels.data() + (static_cast<std::size_t>(y) * raster.width + x) * raster.components;
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = p[raster.components == 1 ? 0 : c];
    }
  }
  return out;
}

// -- PNG ----------------------------------------------------------------------

ImageTensor decode_png(std::span<const std::uint8_t> bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(Errc::DecodeError, std::string("png: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(Errc::DecodeError, "png: " + msg);
  }
  const int height = static_cast<int>(image.height);
  const int width = static_cast<int>(image.width);
  ImageTensor out(height, width, RangeTag::Raw255);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = buffer[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  return out;
}

}  // namespace

ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPngMagic[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::equal(std::begin(kPngMagic), std::end(kPngMagic), bytes.begin()))
    return decode_png(bytes);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return decode_jpeg(bytes);
  throw Error(Errc::DecodeError, "unsupported image stream (expected JPEG or PNG)");
}

ImageTensor read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_image(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr))
    throw Error(Errc::IoError, std::string("png encode: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr))
    throw Error(Errc::IoError, std::string("png encode: ") + image.message);
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_jpeg(const RgbImage& img, int quality, bool grayscale) {
  jpeg_compress_struct cinfo{};
  jpeg_error_mgr jerr{};
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = grayscale ? 1 : 3;
  cinfo.in_color_space = grayscale ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * cinfo.input_components);
  while (cinfo.next_scanline < cinfo.image_height) {
    const int y = static_cast<int>(cinfo.next_scanline);
    for (int x = 0; x < img.width; ++x) {
      if (grayscale) {
        row[x] = img.px(y, x)[0];
      } else {
        std::memcpy(&row[static_cast<std::size_t>(x) * 3], img.px(y, x), 3);
      }
    }
    JSAMPROW ptr = row.data();
    jpeg_write_scanlines(&cinfo, &ptr, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<std::uint8_t> out(buffer, buffer + size);
  std::free(buffer);
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& img) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

RgbImage to_rgb(const ImageTensor& raw) {
  require_range(raw, RangeTag::Raw255, "to_rgb");
  RgbImage out(raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.px(y, x)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(raw.at(c, y, x)), 0L, 255L));
  return out;
}

ImageTensor from_rgb(const RgbImage& img) {
  ImageTensor out(img.height, img.width, RangeTag::Raw255);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = img.px(y, x)[c];
  return out;
}

// -- geometry -----------------------------------------------------------------

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;
};

std::vector<Tap> half_pixel_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    taps[d] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

ImageTensor resize_bilinear(const ImageTensor& img, Size2 target) {
  if (target.height < 1 || target.width < 1) throw Error(Errc::InvalidArgument, "resize target must be >= 1");
  if (img.height < 1 || img.width < 1) throw Error(Errc::InvalidArgument, "cannot resize an empty image");
  const auto ty = half_pixel_taps(img.height, target.height);
  const auto tx = half_pixel_taps(img.width, target.width);
  ImageTensor out(target.height, target.width, img.range);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < target.height; ++y) {
      const Tap& vy = ty[y];
      for (int x = 0; x < target.width; ++x) {
        const Tap& vx = tx[x];
        const double top = (1.0 - vx.frac) * img.at(c, vy.lo, vx.lo) + vx.frac * img.at(c, vy.lo, vx.hi);
        const double bottom = (1.0 - vx.frac) * img.at(c, vy.hi, vx.lo) + vx.frac * img.at(c, vy.hi, vx.hi);
        out.at(c, y, x) = static_cast<float>((1.0 - vy.frac) * top + vy.frac * bottom);
      }
    }
  }
  return out;
}

ImageTensor center_crop(const ImageTensor& img, Size2 size) {
  if (size.height < 1 || size.width < 1) throw Error(Errc::InvalidArgument, "crop size must be >= 1");
  if (size.height > img.height || size.width > img.width) {
    throw Error(Errc::CropTooLarge, "crop " + std::to_string(size.height) + "x" + std::to_string(size.width) +
                                        " exceeds image " + std::to_string(img.height) + "x" +
                                        std::to_string(img.width));
  }
  const int oy = (img.height - size.height) / 2;
  const int ox = (img.width - size.width) / 2;
  ImageTensor out(size.height, size.width, img.range);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size.height; ++y)
      std::copy_n(&img.data[c * img.plane() + static_cast<std::size_t>(y + oy) * img.width + ox], size.width,
                  &out.data[c * out.plane() + static_cast<std::size_t>(y) * size.width]);
  return out;
}

// -- value range --------------------------------------------------------------

ImageTensor scale_unit(const ImageTensor& raw) {
  require_range(raw, RangeTag::Raw255, "scale_unit");
  ImageTensor out = raw;
  out.range = RangeTag::Unit;
  for (float& v : out.data) v = static_cast<float>(static_cast<double>(v) / 255.0);
  return out;
}

ImageTensor normalize(const ImageTensor& unit, const NormalizationConstants& k) {
  require_range(unit, RangeTag::Unit, "normalize");
  for (double s : k.std)
    if (!(s > 0.0)) throw Error(Errc::InvalidArgument, "normalization std must be positive");
  ImageTensor out = unit;
  out.range = RangeTag::Normalized;
  for (int c = 0; c < 3; ++c)
    for (float& v : out.channel(c)) v = static_cast<float>((static_cast<double>(v) - k.mean[c]) / k.std[c]);
  return out;
}

ImageTensor denormalize(const ImageTensor& normalized, const NormalizationConstants& k) {
  require_range(normalized, RangeTag::Normalized, "denormalize");
  ImageTensor out = normalized;
  out.range = RangeTag::Unit;
  for (int c = 0; c < 3; ++c)
    for (float& v : out.channel(c))
      v = std::clamp(static_cast<float>(static_cast<double>(v) * k.std[c] + k.mean[c]), 0.0f, 1.0f);
  return out;
}

ImageTensor preprocess(const ImageTensor& raw) {
  require_range(raw, RangeTag::Raw255, "preprocess");
  return normalize(scale_unit(center_crop(resize_bilinear(raw, kResizeTarget), kCropTarget)));
}

RgbImage to_display(const ImageTensor& img) {
  const ImageTensor unit = img.range == RangeTag::Normalized ? denormalize(img) : img;
  if (unit.range == RangeTag::Raw255) return to_rgb(unit);
  RgbImage out(unit.height, unit.width);
  for (int y = 0; y < unit.height; ++y)
    for (int x = 0; x < unit.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.px(y, x)[c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(unit.at(c, y, x) * 255.0), 0L, 255L));
  return out;
}

// -- augmentation -------------------------------------------------------------

void AugmentationSpec::validate() const {
  for (double r : {rotation_range, shear_range, zoom_range, width_shift_range, height_shift_range})
    if (!(r >= 0.0) || !std::isfinite(r)) throw Error(Errc::InvalidArgument, "augmentation ranges must be >= 0");
  if (zoom_range >= 1.0) throw Error(Errc::InvalidArgument, "zoom_range must be < 1");
  if (!std::isfinite(cval)) throw Error(Errc::InvalidArgument, "cval must be finite");
}

AugmentationSpec AugmentationSpec::aug1(std::uint64_t seed) {
  AugmentationSpec s;
  s.rotation_range = 0.05;
  s.shear_range = 0.05;
  s.zoom_range = 0.05;
  s.horizontal_flip = true;
  s.vertical_flip = true;
  s.fill_mode = FillMode::Nearest;
  s.seed = seed;
  return s;
}

AugmentationSpec AugmentationSpec::aug2(std::uint64_t seed) {
  AugmentationSpec s;
  s.rotation_range = 3.0;
  s.width_shift_range = 0.05;
  s.height_shift_range = 0.05;
  s.shear_range = 0.05;
  s.zoom_range = 0.05;
  s.fill_mode = FillMode::Constant;
  s.cval = 0.0f;
  s.horizontal_flip = true;
  s.vertical_flip = true;
  s.seed = seed;
  return s;
}

AffineTransform sample_augmentation(const AugmentationSpec& spec, Size2 image, Rng& rng) {
  spec.validate();
  AffineTransform t;
  t.rotation_deg = rng.uniform(-spec.rotation_range, spec.rotation_range);
  t.shear_deg = rng.uniform(-spec.shear_range, spec.shear_range);
  t.zoom_x = rng.uniform(1.0 - spec.zoom_range, 1.0 + spec.zoom_range);
  t.zoom_y = rng.uniform(1.0 - spec.zoom_range, 1.0 + spec.zoom_range);
  t.shift_x = rng.uniform(-spec.width_shift_range, spec.width_shift_range) * image.width;
  t.shift_y = rng.uniform(-spec.height_shift_range, spec.height_shift_range) * image.height;
  const bool fh = rng.bernoulli(0.5);
  const bool fv = rng.bernoulli(0.5);
  t.flip_horizontal = spec.horizontal_flip && fh;
  t.flip_vertical = spec.vertical_flip && fv;
  return t;
}

ImageTensor apply_affine(const ImageTensor& img, const AffineTransform& t, Fill fill) {
  constexpr double kDeg = std::numbers::pi / 180.0;
  const double th = t.rotation_deg * kDeg;
  const double sh = t.shear_deg * kDeg;
  // Forward linear part A = Zoom * Shear * Rotation, in (x, y) pixel coords.
  const double r00 = std::cos(th), r01 = std::sin(th), r10 = -std::sin(th), r11 = std::cos(th);
  const double s00 = 1.0, s01 = -std::sin(sh), s10 = 0.0, s11 = std::cos(sh);
  const double m00 = s00 * r00 + s01 * r10, m01 = s00 * r01 + s01 * r11;
  const double m10 = s10 * r00 + s11 * r10, m11 = s10 * r01 + s11 * r11;
  const double a00 = t.zoom_x * m00, a01 = t.zoom_x * m01;
  const double a10 = t.zoom_y * m10, a11 = t.zoom_y * m11;
  const double det = a00 * a11 - a01 * a10;
  if (std::abs(det) < 1e-12) throw Error(Errc::InvalidArgument, "singular affine transform");
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;

  const double cx = (img.width - 1) / 2.0;
  const double cy = (img.height - 1) / 2.0;
  const double max_x = img.width - 1;
  const double max_y = img.height - 1;
  constexpr double kEps = 1e-9;

  ImageTensor out(img.height, img.width, img.range);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx - t.shift_x;
      const double dy = y - cy - t.shift_y;
      double sx = i00 * dx + i01 * dy + cx;
      double sy = i10 * dx + i11 * dy + cy;
      const bool outside = sx < -kEps || sy < -kEps || sx > max_x + kEps || sy > max_y + kEps;
      if (outside && fill.mode == FillMode::Constant) {
        for (int c = 0; c < 3; ++c) out.at(c, y, x) = fill.cval;
        continue;
      }
      sx = std::clamp(sx, 0.0, max_x);
      sy = std::clamp(sy, 0.0, max_y);
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, img.width - 1);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const double fx = sx - x0;
      const double fy = sy - y0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1.0 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1);
        const double bottom = (1.0 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1.0 - fy) * top + fy * bottom);
      }
    }
  }

  if (t.flip_horizontal) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < out.height; ++y) {
        float* row = &out.data[c * out.plane() + static_cast<std::size_t>(y) * out.width];
        std::reverse(row, row + out.width);
      }
  }
  if (t.flip_vertical) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < out.height / 2; ++y) {
        float* a = &out.data[c * out.plane() + static_cast<std::size_t>(y) * out.width];
        float* b = &out.data[c * out.plane() + static_cast<std::size_t>(out.height - 1 - y) * out.width];
        std::swap_ranges(a, a + out.width, b);
      }
  }
  return out;
}

// -- XPB1 ---------------------------------------------------------------------

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

}  // namespace

void append_xpb1(std::vector<std::uint8_t>& out, const ImageTensor& img) {
  out.reserve(out.size() + kXpb1HeaderSize + img.data.size() * 4);
  out.insert(out.end(), {'X', 'P', 'B', '1'});
  put_u32(out, 3);
  put_u32(out, static_cast<std::uint32_t>(img.height));
  put_u32(out, static_cast<std::uint32_t>(img.width));
  for (float v : img.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

std::vector<std::uint8_t> encode_xpb1(const ImageTensor& img) {
  std::vector<std::uint8_t> out;
  append_xpb1(out, img);
  return out;
}

ImageTensor decode_xpb1(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (bytes.size() < offset + kXpb1HeaderSize) throw Error(Errc::ProtocolError, "XPB1 header truncated");
  if (std::memcmp(bytes.data() + offset, "XPB1", 4) != 0) throw Error(Errc::ProtocolError, "bad XPB1 magic");
  const std::uint32_t c = get_u32(bytes, offset + 4);
  const std::uint32_t h = get_u32(bytes, offset + 8);
  const std::uint32_t w = get_u32(bytes, offset + 12);
  if (c != 3) throw Error(Errc::ShapeMismatch, "XPB1 tensor must have 3 channels");
  const std::size_t count = static_cast<std::size_t>(c) * h * w;
  if ((bytes.size() - offset - kXpb1HeaderSize) / 4 < count) throw Error(Errc::ProtocolError, "XPB1 body truncated");
  ImageTensor img(static_cast<int>(h), static_cast<int>(w), RangeTag::Normalized);
  std::size_t at = offset + kXpb1HeaderSize;
  for (std::size_t i = 0; i < count; ++i, at += 4) img.data[i] = std::bit_cast<float>(get_u32(bytes, at));
  offset = at;
  return img;
}

std::vector<ImageTensor> decode_xpb1_batch(std::span<const std::uint8_t> bytes) {
  std::vector<ImageTensor> out;
  std::size_t offset = 0;
  while (offset < bytes.size()) out.push_back(decode_xpb1(bytes, offset));
  return out;
}

}  // namespace xplain::imaging
