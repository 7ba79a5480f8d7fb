// SPDX-License-Identifier: Apache-2.0
//
// Synthetic two-domain segmentation benchmark.
//
// A scene is a background (class 0) with 3-8 painted shapes. Geometry and
// labels depend only on the seed, so source and target renderings of one
// seed share labels exactly; the target additionally goes through a color
// mixing matrix, a per-channel gamma and stronger noise.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rtda/tensor.hpp"

namespace rtda {

enum class Domain : std::uint8_t { Source, Target };

std::string_view domain_name(Domain d);
Domain parse_domain(std::string_view text);

using Rgb = std::array<double, 3>;

struct ShiftConfig {
  std::array<Rgb, 3> mixing{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Rgb gamma{1, 1, 1};
  double noise_source = 0.05;
  double noise_target = 0.10;
  std::vector<Rgb> palette;

  /// Benchmark default for `num_classes` classes.
  static ShiftConfig defaults(int num_classes = 5);
  /// No appearance change between domains; both use `noise`.
  static ShiftConfig identity(int num_classes = 5, double noise = 0.05);

  /// Rows of `mixing` must sum to 1 (within 1e-6) and gammas be positive.
  void validate() const;
};

struct SceneSample {
  Tensor<float> image;  // [3,H,W], values in [0,1]
  LabelMask labels;     // [H,W]
  Domain domain = Domain::Source;
  std::uint64_t seed = 0;
};

inline constexpr int kDefaultClasses = 5;
inline constexpr int kDefaultSize = 64;

/// Deterministic in (seed, domain, config, size, num_classes). When every
/// foreground class fits in the shape budget (num_classes <= 9), draws are
/// retried until each class covers at least 1% of the image.
SceneSample generate_scene(std::uint64_t seed, Domain domain, const ShiftConfig& config, int height = kDefaultSize,
                           int width = kDefaultSize, int num_classes = kDefaultClasses);

// ---------------------------------------------------------------------------
// SDR1 raster files: "SDR1", then little-endian u32 version=1, channels,
// height, width, dtype (1 = f32, 2 = u8), then the row-major payload.

enum class RasterDtype : std::uint32_t { F32 = 1, U8 = 2 };

struct Raster {
  int channels = 0;
  int height = 0;
  int width = 0;
  RasterDtype dtype = RasterDtype::F32;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;
};

inline constexpr std::size_t kRasterHeaderBytes = 24;

std::vector<std::uint8_t> encode_raster(const Tensor<float>& image);  // [C,H,W]
std::vector<std::uint8_t> encode_raster(const LabelMask& labels);     // [H,W]
/// Throws FormatError: "bad magic", "unsupported version", "unknown dtype",
/// "truncated payload" or "trailing bytes".
Raster decode_raster(std::span<const std::uint8_t> bytes);

struct SampleFiles {
  std::vector<std::uint8_t> image;
  std::vector<std::uint8_t> labels;
};

SampleFiles save_raster(const SceneSample& sample);
SceneSample load_raster(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                        Domain domain, std::uint64_t seed);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Splits and batches

/// Source seeds of the training split start at 0, target seeds at this
/// offset, so the two domains never render the same scene.
inline constexpr std::uint64_t kTargetSeedOffset = 1'000'000;
inline constexpr std::uint64_t kValSeedBase = 2'000'000;

struct DomainBatch {
  Tensor<float> source_images;  // [B,3,H,W]
  LabelMask source_labels;      // [B,H,W]
  Tensor<float> target_images;  // [B,3,H,W]; target labels are never attached
  std::vector<std::size_t> source_indices;
  std::vector<std::size_t> target_indices;
};

/// Labeled source scenes and target scenes of one split. Target labels are
/// held for evaluation only and are reachable solely through
/// evaluation_labels().
class DomainSplit {
 public:
  DomainSplit(std::vector<SceneSample> source, std::vector<SceneSample> target, int num_classes);

  /// Generates `count` scenes per domain. Split "train" uses source seeds
  /// [0,count) and target seeds offset by kTargetSeedOffset; any other split
  /// name uses seeds from kValSeedBase for both domains.
  static DomainSplit generate(const ShiftConfig& config, std::string_view split, std::size_t count, int size,
                              int num_classes);

  /// Reads <root>/<split>/<domain>/<seed>.img.sdr / .lbl.sdr, seeds ascending.
  static DomainSplit load(const std::filesystem::path& root, std::string_view split, int num_classes);
  /// Writes the same layout.
  void save(const std::filesystem::path& root, std::string_view split) const;

  std::size_t size() const noexcept { return source_.size(); }
  int num_classes() const noexcept { return num_classes_; }
  int height() const;
  int width() const;

  const Tensor<float>& source_image(std::size_t i) const { return source_.at(i).image; }
  const LabelMask& source_labels(std::size_t i) const { return source_.at(i).labels; }
  const Tensor<float>& target_image(std::size_t i) const { return target_.at(i).image; }
  std::uint64_t seed(Domain d, std::size_t i) const;

  /// Images of one domain together with their ground truth, for scoring.
  const Tensor<float>& evaluation_image(Domain d, std::size_t i) const;
  const LabelMask& evaluation_labels(Domain d, std::size_t i) const;

 private:
  std::vector<SceneSample> source_;
  std::vector<SceneSample> target_;
  int num_classes_;
};

/// Epoch permutation of [0,n) derived from (seed, epoch, stream).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch,
                                           std::uint64_t stream);

/// One shuffled pass over a split. Source and target orders are independent
/// permutations; the last batch may be short.
class BatchIterator {
 public:
  BatchIterator(const DomainSplit& split, int batch, std::uint64_t seed, std::uint64_t epoch = 0);

  std::optional<DomainBatch> next();
  std::size_t num_batches() const noexcept;

  const std::vector<std::size_t>& source_order() const noexcept { return source_order_; }
  const std::vector<std::size_t>& target_order() const noexcept { return target_order_; }

 private:
  const DomainSplit* split_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> source_order_, target_order_;
};

/// <root>/meta.cfg, written next to the split directories so readers know
/// the class count and scene size.
struct DatasetMeta {
  int num_classes = kDefaultClasses;
  int size = kDefaultSize;
};

void write_dataset_meta(const std::filesystem::path& root, const DatasetMeta& meta);
DatasetMeta read_dataset_meta(const std::filesystem::path& root);

DomainBatch make_batch(const DomainSplit& split, std::span<const std::size_t> source_indices,
                       std::span<const std::size_t> target_indices);

}  // namespace rtda
