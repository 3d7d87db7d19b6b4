#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "xplain/gateway.hpp"
#include "xplain/imaging.hpp"
#include "xplain/nnet.hpp"

namespace xplain::explain {

// -- superpixels --------------------------------------------------------------

struct SuperpixelMap {
  int height = 0;
  int width = 0;
  int num_segments = 0;
  std::vector<std::int32_t> labels;  // row-major, dense in [0, num_segments)

  std::int32_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  /// Checks density, coverage and 4-connectivity of every segment.
  void validate() const;

  std::vector<std::size_t> areas() const;

  bool operator==(const SuperpixelMap&) const = default;
};

struct SlicOptions {
  int target_segments = 50;
  double compactness = 10.0;
  int max_iterations = 10;
  /// SLIC itself is deterministic; the seed is recorded for provenance only.
  std::uint64_t seed = 0;
};

/// SLIC clustering in (L, a, b, x, y) on a Unit image, followed by
/// connectivity enforcement: fragments smaller than area / (4 * target) merge
/// into the neighbor sharing the longest boundary, then labels are renumbered
/// in raster order.
SuperpixelMap segment_superpixels(const imaging::ImageTensor& unit, const SlicOptions& opts = {});

// -- perturbation plumbing ------------------------------------------------------

/// One byte per superpixel; 1 keeps the segment, 0 replaces it with filler.
using Mask = std::vector<std::uint8_t>;

/// Maps a batch of masks to model probability rows.
using MaskEvaluator = std::function<gateway::ProbMatrix(std::span<const Mask>)>;

enum class FillerMode { MeanColor, Gray };

std::string_view filler_name(FillerMode mode) noexcept;
FillerMode parse_filler(std::string_view name);

/// Per-segment mean color of `img`, or a constant mid-gray in the image's range.
imaging::ImageTensor segment_filler(const imaging::ImageTensor& img, const SuperpixelMap& sp, FillerMode mode);

imaging::ImageTensor compose_masked(const imaging::ImageTensor& img, const imaging::ImageTensor& filler,
                                    const SuperpixelMap& sp, const Mask& mask);

/// Evaluator that renders masked images and queries the model in chunks.
MaskEvaluator image_mask_evaluator(const gateway::ModelHandle& model, const imaging::ImageTensor& img,
                                   const SuperpixelMap& sp, FillerMode filler, int chunk = 32);

// -- results --------------------------------------------------------------------

enum class Method { Lime, KernelShap, GradCam };

std::string_view method_name(Method m) noexcept;

struct AttributionResult {
  Method method = Method::Lime;
  int target_class = 0;
  /// LIME: surrogate intercept. SHAP: f(background). Grad-CAM: 0.
  double base_value = 0.0;
  /// LIME/SHAP: one score per superpixel. Grad-CAM: map of map_height x map_width in [0, 1].
  std::vector<double> scores;
  int map_height = 0;
  int map_width = 0;
  /// LIME: reported features ordered by |coefficient|, descending.
  std::vector<int> selected;
  /// Grad-CAM: the normalized map at feature-map resolution.
  std::vector<double> raw_map;
  int raw_height = 0;
  int raw_width = 0;
  nlohmann::json metadata = nlohmann::json::object();
};

nlohmann::json to_json(const AttributionResult& r, const std::vector<std::string>& class_names);

/// Per-pixel attribution: superpixel scores painted onto their pixels, or the
/// Grad-CAM map. Throws InvalidArgument when a needed map is missing.
std::vector<double> pixel_attribution(const AttributionResult& r, const SuperpixelMap* sp);

/// Share of the positive attribution mass that lies in columns [x0, x1);
/// 0 when the map has no positive mass.
double positive_mass_share(std::span<const double> map, int height, int width, int x0, int x1);

// -- LIME -----------------------------------------------------------------------

struct LimeOptions {
  int num_samples = 1000;
  int num_features = 10;
  double kernel_width = 0.25;
  double ridge_lambda = 1.0;
  std::uint64_t seed = 0;
  std::optional<int> target_class;  // default: top class of the unperturbed input
  FillerMode filler = FillerMode::MeanColor;
};

/// Masks are uniform over {0,1}^S with the first sample all ones. Weights are
/// exp(-d^2 / width^2) for the cosine distance d to the all-ones mask. The
/// surrogate is a weighted ridge regression on the standardized design;
/// when S > num_features, features are chosen by greedy forward selection on
/// weighted R^2 and all others report zero.
/// Throws DegenerateDesign, InvalidArgument.
AttributionResult lime_explain_masks(int num_segments, const MaskEvaluator& evaluate, const LimeOptions& opts = {});

AttributionResult lime_explain(const gateway::ModelHandle& model, const imaging::ImageTensor& img,
                               const SuperpixelMap& sp, const LimeOptions& opts = {});

// -- Shapley ----------------------------------------------------------------------

struct ShapleyValues {
  std::vector<double> phi;
  double base = 0.0;  // v(empty set)
};

inline constexpr int kMaxExactShapleyFeatures = 12;

/// Exact Shapley values by enumerating all 2^S coalitions; bit i of the
/// coalition word marks player i. Throws TooManyFeatures when S > 12.
ShapleyValues exact_shapley(int num_features, const std::function<double(std::uint32_t)>& value);

struct ShapOptions {
  /// Coalition budget, excluding the empty and full coalitions. When it
  /// covers all 2^S - 2 proper coalitions they are enumerated exactly.
  int num_samples = 1000;
  std::uint64_t seed = 0;
  FillerMode background = FillerMode::MeanColor;
};

/// Kernel SHAP with the Shapley kernel and the efficiency constraint
/// sum(phi) = f(x) - f(background) enforced exactly. Returns one result per
/// requested class, sharing the same coalition evaluations.
std::vector<AttributionResult> kernel_shap_masks(int num_segments, const MaskEvaluator& evaluate,
                                                 std::span<const int> classes, const ShapOptions& opts = {});

AttributionResult kernel_shap(const gateway::ModelHandle& model, const imaging::ImageTensor& img,
                              const SuperpixelMap& sp, int target_class, const ShapOptions& opts = {});

/// One result per class, ordered by the unperturbed predicted probability
/// (highest first).
std::vector<AttributionResult> kernel_shap_by_probability(const gateway::ModelHandle& model,
                                                          const imaging::ImageTensor& img, const SuperpixelMap& sp,
                                                          const ShapOptions& opts = {});

// -- Grad-CAM ---------------------------------------------------------------------

inline constexpr std::string_view kLastConv = "last";

/// Gradients of the pre-softmax logit `target_class` with respect to the
/// chosen layer's output A, spatially averaged into channel weights; the map
/// ReLU(sum_k alpha_k A_k) is min-max normalized (a flat map stays zero) and
/// bilinearly resized to the input size. Throws UnknownLayerName.
AttributionResult grad_cam(const nnet::Network& net, const imaging::ImageTensor& img, int target_class,
                           std::string_view layer = kLastConv);

/// Throws GradientsUnavailable for backends without gradients.
AttributionResult grad_cam(const gateway::ModelHandle& model, const imaging::ImageTensor& img, int target_class,
                           std::string_view layer = kLastConv);

// -- rendering --------------------------------------------------------------------

enum class RenderStyle { LimeSuperpixelOnly, LimePosNeg, ShapRedBlue, CamOverlay };

std::string_view style_name(RenderStyle s) noexcept;

struct RenderOptions {
  /// ShapRedBlue color scale; 0 means max |phi| of the result itself.
  double shap_scale = 0.0;
};

/// LimeSuperpixelOnly: reported segments of the original on white.
/// LimePosNeg: reported segments tinted green (positive) or red (negative),
///   with their boundaries drawn in the same color.
/// ShapRedBlue: diverging map, red positive, blue negative, white at zero,
///   symmetric scale +-max|phi|.
/// CamOverlay: 0.5 * original + 0.5 * jet(map).
/// Throws StyleMismatch, InvalidArgument (missing superpixels).
imaging::RgbImage render(const AttributionResult& result, const imaging::ImageTensor& original,
                         const SuperpixelMap* sp, RenderStyle style, const RenderOptions& opts = {});

/// Jet colormap for m in [0, 1].
std::array<std::uint8_t, 3> jet(double m);

/// Diverging red/white/blue color for v in [-1, 1].
std::array<std::uint8_t, 3> red_blue(double v);

/// Grid of equally sized panels separated by a white gutter. Null entries
/// leave a blank cell; rows may differ in length.
imaging::RgbImage compose_sheet(const std::vector<std::vector<const imaging::RgbImage*>>& rows, int gutter = 4);

}  // namespace xplain::explain
