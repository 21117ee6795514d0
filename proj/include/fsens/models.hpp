#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fsens/autodiff.hpp"
#include "fsens/rng.hpp"
#include "fsens/tensor.hpp"

namespace fsens {

/// Architecture of the toy backbone:
/// conv3x3(16w) -> relu -> maxpool -> conv3x3(32w) -> relu -> maxpool -> gap -> dropout -> dense.
struct BackboneArch {
  std::size_t in_channels = 1;
  std::size_t n_classes = 0;
  std::size_t width = 1;  // channel multiplier
  double dropout = 0.1;   // probability before the head

  std::size_t conv1_channels() const { return 16 * width; }
  std::size_t feature_dim() const { return 32 * width; }
  void validate() const;

  friend bool operator==(const BackboneArch&, const BackboneArch&) = default;
};

struct BackboneParams {
  static constexpr std::size_t kTensorCount = 6;

  BackboneArch arch;
  Tensor conv1_w;  // [16w x c_in x 3 x 3]
  Tensor conv1_b;  // [16w]
  Tensor conv2_w;  // [32w x 16w x 3 x 3]
  Tensor conv2_b;  // [32w]
  Tensor head_w;   // [32w x n_classes]
  Tensor head_b;   // [n_classes]

  std::array<Tensor*, kTensorCount> tensors();
  std::array<const Tensor*, kTensorCount> tensors() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  // Throws DimensionError if a tensor does not match `arch`.
  void validate() const;

  friend bool operator==(const BackboneParams&, const BackboneParams&) = default;
};

// Biases zero, weights uniform in +-sqrt(3 / fan_in). Deterministic in `seed`.
BackboneParams init_backbone(std::uint64_t seed, const BackboneArch& arch);
BackboneParams init_backbone(std::uint64_t seed, std::size_t n_classes);

enum class Mode { kTrain, kEval };

// Parameter leaves of one backbone on a tape.
struct BackboneVars {
  std::array<Var, BackboneParams::kTensorCount> params;
  BackboneArch arch;
};

BackboneVars bind_params(Tape& tape, const BackboneParams& params, bool requires_grad = true);

struct ForwardVars {
  Var logits;    // [b x n_classes]
  Var features;  // [b x feature_dim], the input of the dropout + head
};

// `images` is [b x c x h x w] with h, w divisible by 4. Train mode applies the
// dropout before the head using `rng`, which may be null in eval mode.
ForwardVars forward(const BackboneVars& vars, Var images, Mode mode, Rng* rng);

struct ForwardOutput {
  Tensor logits;
  Tensor features;
};

ForwardOutput forward(const BackboneParams& params, const Tensor& images, Mode mode = Mode::kEval,
                      Rng* rng = nullptr);

// Features only, eval mode, processed in chunks of `chunk` images.
Tensor extract_features(const BackboneParams& params, const Tensor& images, std::size_t chunk = 64);

struct EnsembleParams {
  std::vector<BackboneParams> members;
  std::vector<std::uint64_t> member_seeds;
  std::string strategy = "independent";

  std::size_t size() const { return members.size(); }
  const BackboneArch& arch() const;
  // Text block describing the shared architecture.
  std::string arch_descriptor() const;
  std::uint64_t arch_fingerprint() const;
  // Throws ParameterError if empty, seeds mismatch, or members disagree on arch.
  void validate() const;

  friend bool operator==(const EnsembleParams&, const EnsembleParams&) = default;
};

EnsembleParams init_ensemble(const std::vector<std::uint64_t>& member_seeds, const BackboneArch& arch,
                             std::string strategy = "independent");

// Binary checkpoint: "FSEN", u16 version, u32 K, u32 descriptor length and
// UTF-8 descriptor, then per member six tensors as (u8 rank, u32 dims, f64
// payload). All integers and reals little-endian.
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::string encode_checkpoint(const EnsembleParams& ensemble);
EnsembleParams decode_checkpoint(const std::string& bytes);
void save_checkpoint(const EnsembleParams& ensemble, const std::filesystem::path& path);
EnsembleParams load_checkpoint(const std::filesystem::path& path);

// 16 hex digits of the FNV-1a hash of the encoded checkpoint.
std::string checkpoint_hash(const EnsembleParams& ensemble);

}  // namespace fsens
