#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "shike/nn.hpp"
#include "shike/tensor.hpp"

namespace shike {

/// Per-class training-set sizes. Class ids are 0-based; class 0 is the head.
struct LongTailSpec {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;
  double imbalance_factor = 1.0;

  /// Builds a spec from explicit counts; IF is n_0 / n_{C-1}.
  static LongTailSpec from_counts(std::vector<std::size_t> counts);
  std::size_t total() const;
  /// Throws InvalidArgument unless counts are non-increasing and all >= 1.
  void validate() const;
};

struct ClassDivision {
  std::vector<std::size_t> many;
  std::vector<std::size_t> medium;
  std::vector<std::size_t> few;
};

enum class Split { train, test };

const char* split_name(Split split);

/// Immutable once built. Inputs are stacked along the leading dimension;
/// `spec` always describes the training distribution, also on test sets.
struct LabeledDataset {
  Tensor inputs;
  std::vector<std::size_t> labels;
  LongTailSpec spec;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return inputs.sample_shape(); }
  std::vector<std::size_t> class_counts() const;
};

/// n_c = round(n_max * IF^(-c/(C-1))) for c = 0..C-1, half rounded up.
std::vector<std::size_t> make_longtail_counts(std::size_t num_classes, std::size_t n_max, double imbalance_factor);

/// Many: n > 100, few: n < 20, medium otherwise.
ClassDivision split_divisions(const LongTailSpec& spec);

/// Draws counts[c] samples of class c (without replacement) from a balanced
/// dataset. Deterministic per seed.
LabeledDataset subsample_longtail(const LabeledDataset& balanced, std::span<const std::size_t> counts,
                                  std::uint64_t seed);

struct SynthOptions {
  std::size_t test_per_class = 100;
  double noise_std = 1.0;
  /// Each class is a mixture of this many isotropic Gaussians.
  std::size_t modes_per_class = 1;
};

/// Gaussian classes with means at random directions of norm `class_separation`.
/// Returns (long-tailed train, balanced test).
std::pair<LabeledDataset, LabeledDataset> synth_gaussian_lt(std::size_t num_classes, std::size_t dims,
                                                            std::span<const std::size_t> counts,
                                                            double class_separation, std::uint64_t seed,
                                                            const SynthOptions& options = {});

/// Byte layout of a raw record archive: `label_bytes` label bytes followed
/// by shape_numel(sample_shape) pixel bytes. The class label is the byte at
/// `label_index`; pixels are scaled by `scale`. CIFAR-10 uses
/// {1, 0, {3,32,32}}, CIFAR-100 fine labels use {2, 1, {3,32,32}}.
struct ArchiveLayout {
  std::size_t label_bytes = 1;
  std::size_t label_index = 0;
  Shape sample_shape{3, 32, 32};
  double scale = 1.0 / 255.0;
};

/// Reads a balanced archive; `spec` of the result is all-equal counts.
LabeledDataset read_record_archive(const std::filesystem::path& path, const ArchiveLayout& layout,
                                   std::size_t num_classes, Split split);

void write_record_archive(const std::filesystem::path& path, const ArchiveLayout& layout,
                          std::span<const std::uint8_t> labels, std::span<const std::uint8_t> pixels);

/// Training-time batch transform. An empty function is the pass-through.
using Augmentation = std::function<Tensor(const Tensor& batch, Rng& rng)>;

nlohmann::json dataset_manifest(const LongTailSpec& spec, std::uint64_t seed);

void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& path);

}  // namespace shike
