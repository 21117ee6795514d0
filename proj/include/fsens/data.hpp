#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fsens/rng.hpp"
#include "fsens/tensor.hpp"

namespace fsens {

/// One image-label pair. Pixels are stored h x w x c, 8 bits per channel.
struct ImageSample {
  std::vector<std::uint8_t> pixels;
  std::uint32_t label = 0;
  std::uint64_t source_id = 0;
};

/// Immutable-after-construction image corpus with a shared geometry.
struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::size_t n_classes = 0;
  std::vector<ImageSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t pixel_count() const { return height * width * channels; }
  // Throws FormatError if any sample violates the geometry or label bound.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline bool operator==(const ImageSample& a, const ImageSample& b) {
  return a.pixels == b.pixels && a.label == b.label && a.source_id == b.source_id;
}

/// Class-disjoint train / validation / test partition.
struct ClassSplit {
  std::vector<std::uint32_t> train_classes;
  std::vector<std::uint32_t> val_classes;
  std::vector<std::uint32_t> test_classes;

  // Throws ParameterError on overlap, empty splits, out-of-range ids, or a
  // test split smaller than `min_test_classes`.
  void validate(std::size_t n_classes, std::size_t min_test_classes = 1) const;
};

// Contiguous 60/20/20 split of [0, n_classes) (24/8/8 for 40 classes).
ClassSplit default_split(std::size_t n_classes);

struct AugmentPolicy {
  double crop_lo = 0.8;
  double crop_hi = 1.0;
  double color_jitter = 0.2;
  double noise_std = 0.05;
  bool enabled = true;

  void validate() const;
  static AugmentPolicy disabled() {
    AugmentPolicy p;
    p.enabled = false;
    return p;
  }
};

// Procedural stand-in corpus: each class is a shape/texture family with its
// own scale, stroke, grating frequency and orientation; samples add pose,
// contrast and pixel noise. Pure function of its arguments.
// Requires n_classes >= 10, per_class >= 30, image_size in [16, 64].
Dataset synth_generate(std::uint64_t seed, std::size_t n_classes, std::size_t per_class,
                       std::size_t image_size);

// Shifted generator for domain-shift evaluation: same class families drawn
// with a different stroke/texture/noise regime.
Dataset synth_generate_shifted(std::uint64_t seed, std::size_t n_classes, std::size_t per_class,
                               std::size_t image_size);

// IDX-style files: images are u8 rank 3 (N, H, W) for c == 1 or rank 4
// (N, H, W, C); labels are u8 rank 1. Dimensions are big-endian u32.
void write_idx(const Dataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// Plain key=value manifest naming the IDX files and the split.
struct Manifest {
  std::string images = "images.idx";
  std::string labels = "labels.idx";
  std::size_t n_classes = 0;
  std::size_t image_size = 0;
  std::uint64_t seed = 0;
  ClassSplit split;
};
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

// Loads <dir>/manifest.txt plus its IDX files and validates the split.
struct CorpusOnDisk {
  Dataset dataset;
  ClassSplit split;
};
CorpusOnDisk load_corpus(const std::filesystem::path& dir);
void save_corpus(const Dataset& dataset, const ClassSplit& split, std::uint64_t seed,
                 const std::filesystem::path& dir);

// Normalised [c x h x w] tensor for one sample. Disabled policy: the full
// image mapped to [-1, 1]. Enabled: random crop resized back, brightness /
// contrast jitter, Gaussian noise; values clamped to [-3, 3].
Tensor augment(const ImageSample& sample, const Dataset& geometry, const AugmentPolicy& policy,
               Rng& rng);

// Subset of sample indices restricted to `classes`, with labels remapped to
// positions in `classes`.
struct LabeledSubset {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
  std::size_t n_classes = 0;
};
LabeledSubset select_classes(const Dataset& dataset, const std::vector<std::uint32_t>& classes);

/// One mini-batch: positions into a LabeledSubset.
struct BatchPlan {
  std::vector<std::size_t> positions;
};

// One epoch: seeded permutation of [0, n) partitioned into batches of
// `batch_size`; the last short batch is kept. Throws StateError if n == 0.
std::vector<BatchPlan> make_batches(std::size_t n, std::size_t batch_size, Rng& rng);

struct Batch {
  Tensor images;                    // [b x c x h x w]
  std::vector<std::size_t> labels;  // remapped labels
  std::vector<std::uint64_t> source_ids;
};

Batch materialize_batch(const Dataset& dataset, const LabeledSubset& subset, const BatchPlan& plan,
                        const AugmentPolicy& policy, Rng& rng);

// All images of `indices` without augmentation, as one [n x c x h x w] tensor.
Tensor stack_plain(const Dataset& dataset, const std::vector<std::size_t>& indices);

}  // namespace fsens
