// SPDX-License-Identifier: Apache-2.0
//
// Alternating adversarial training: one segmentation step on
// l_seg + lambda * l_adv with the discriminator frozen, then one
// discriminator step on detached probability maps.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rtda/data.hpp"
#include "rtda/metrics.hpp"
#include "rtda/models.hpp"
#include "rtda/objectives.hpp"

namespace rtda {

struct TrainConfig {
  std::uint64_t seed = 0;
  std::int64_t max_iter = 2000;
  int batch = 4;
  double lambda_adv = 0.01;
  double lr_seg = 2.5e-4;
  double lr_disc = 1e-5;
  double poly_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  DiscriminatorVariant disc_variant = DiscriminatorVariant::FCDLightThin;
  int num_classes = kDefaultClasses;
  int image_size = kDefaultSize;
  double width = 1.0;
  std::size_t train_samples = 200;
  std::size_t eval_samples = 50;
  std::string data_root;  // empty: generate the benchmark in memory
  std::string out_dir = "run";
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  Reduction loss_reduction = Reduction::Mean;
  bool disc_final_zero_init = true;

  /// `key = value` lines; '#' starts a comment. Unknown keys, malformed
  /// values and out-of-range settings throw ConfigError.
  static TrainConfig parse(std::string_view text);
  static TrainConfig from_file(const std::filesystem::path& path);
  /// Inverse of parse.
  std::string to_text() const;
  void validate() const;
};

struct LossRecord {
  std::int64_t iter = 0;
  double l_seg = 0;
  double l_adv = 0;
  double l_d = 0;
  double lr_seg = 0;
  double lr_disc = 0;
};

std::string loss_log_header();
std::string loss_log_row(const LossRecord& r);

// ---------------------------------------------------------------------------
// Checkpoint file: "RTDA", u32 version, u64 iteration, u32 count, then per
// tensor u16 name length, name, u8 rank, u32 dims, f32 payload; all little
// endian. Trailer: u64 sum of all payload bytes (each byte as 0..255).

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t iteration = 0;
  std::vector<NamedTensor> tensors;

  std::vector<std::uint8_t> encode() const;
  /// Throws FormatError on a bad magic, version, truncation, trailing
  /// bytes or checksum mismatch.
  static Checkpoint decode(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  const Tensor<float>* find(std::string_view name) const;
  const Tensor<float>& get(std::string_view name) const;
};

/// Architecture facts recorded in a checkpoint's meta.* tensors.
struct CheckpointMeta {
  int num_classes = 0;
  double width = 1.0;
  DiscriminatorVariant disc_variant = DiscriminatorVariant::FCDLightThin;
  std::uint64_t seed = 0;
  std::int64_t max_iter = 0;
};

CheckpointMeta read_meta(const Checkpoint& ckpt);

/// Copies "<prefix><name>" tensors into a graph's parameters and buffers.
void load_graph(ModelGraph& graph, const Checkpoint& ckpt, std::string_view prefix);

// ---------------------------------------------------------------------------

class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// One adversarial iteration at the current iteration index. Throws
  /// NumericError naming the iteration and loss on a non-finite value.
  LossRecord train_iteration(const DomainBatch& batch);
  /// Source-only supervised step with the same schedule, for ablations.
  LossRecord supervised_iteration(const DomainBatch& batch);

  /// Batch for the current iteration: epoch e = iter / batches_per_epoch
  /// uses epoch_permutation(n, seed, e, ...) for each domain.
  DomainBatch batch_for_iteration(const DomainSplit& split) const;

  Checkpoint checkpoint() const;
  /// Restores parameters, buffers, optimizer state and the iteration.
  /// Throws ConfigError when the checkpoint architecture differs.
  void restore(const Checkpoint& ckpt);

  const TrainConfig& config() const noexcept { return config_; }
  std::int64_t iteration() const noexcept { return iteration_; }
  ModelGraph& seg() noexcept { return seg_; }
  ModelGraph& disc() noexcept { return disc_; }
  Sgd& sgd() noexcept { return sgd_; }
  Adam& adam() noexcept { return adam_; }

 private:
  double lr_seg_now() const;
  double lr_disc_now() const;
  LossRecord disc_step(const Var<float>& p_src, const Var<float>& p_tgt, LossRecord record);

  TrainConfig config_;
  ModelGraph seg_;
  ModelGraph disc_;
  Sgd sgd_;
  Adam adam_;
  std::int64_t iteration_ = 0;
};

struct TrainResult {
  Checkpoint final_checkpoint;
  std::vector<LossRecord> log;
};

/// Trains from iteration 0, or from `resume` when given, up to max_iter.
/// With a non-empty out_dir, writes out_dir/log.csv (rows of a resumed run
/// follow the checkpoint's rows), out_dir/ckpt_<iter>.rtda every
/// checkpoint_every iterations, and out_dir/final.rtda.
TrainResult run_training(const TrainConfig& config, const DomainSplit& train,
                         const std::optional<Checkpoint>& resume = std::nullopt);

/// Eval-mode forward, argmax, confusion matrix over one domain of a split.
IouReport evaluate(ModelGraph& seg, const DomainSplit& split, Domain domain,
                   std::optional<std::span<const int>> class_subset = std::nullopt, int batch = 8);
/// Rebuilds the segmentation network from a checkpoint. Throws ConfigError
/// when the checkpoint and the split disagree on the class count.
IouReport evaluate(const Checkpoint& ckpt, const DomainSplit& split, Domain domain,
                   std::optional<std::span<const int>> class_subset = std::nullopt);

ModelGraph segmentation_from_checkpoint(const Checkpoint& ckpt);

/// Benchmark splits described by a config: loaded from data_root when set,
/// generated with ShiftConfig::defaults otherwise.
DomainSplit training_split(const TrainConfig& config);
DomainSplit evaluation_split(const TrainConfig& config);

struct VariantResult {
  DiscriminatorVariant variant;
  std::uint64_t disc_params = 0;
  std::uint64_t disc_flops = 0;  // at image_size x image_size
  double source_miou = 0;
  double target_miou = 0;
};

/// Trains once per discriminator variant (everything else from `config`)
/// and scores the target domain of the evaluation split.
std::vector<VariantResult> compare_variants(const TrainConfig& config);
std::string comparison_table(std::span<const VariantResult> rows);

}  // namespace rtda
