#pragma once

// K-hot gating: K sequential Gumbel-softmax draws over log softmax(w²), each
// draw masking out the index it selected, summed into one gate vector.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "ngsll/autodiff.hpp"

namespace ngsll::gate {

using Rng = std::mt19937_64;

/// Binary exclusion vector: entry 1 means the feature can never be gated open.
class MaskVector {
 public:
  MaskVector() = default;
  explicit MaskVector(std::size_t d) : bits_(d, 0) {}
  explicit MaskVector(std::vector<std::uint8_t> bits);

  /// m_j = 1 exactly when z_j == 0 (bag-of-words convention).
  static MaskVector from_features(std::span<const double> z);

  std::size_t size() const noexcept { return bits_.size(); }
  bool masked(std::size_t j) const { return bits_.at(j) != 0; }
  std::uint8_t operator[](std::size_t j) const { return bits_[j]; }
  void set(std::size_t j) { bits_.at(j) = 1; }
  std::size_t masked_count() const noexcept;
  std::size_t unmasked_count() const noexcept { return size() - masked_count(); }
  std::span<const std::uint8_t> bits() const noexcept { return bits_; }

  friend bool operator==(const MaskVector&, const MaskVector&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

enum class GateMode { kSoft, kHard };

const char* to_string(GateMode mode);
GateMode parse_gate_mode(std::string_view text);

struct GateOptions {
  std::size_t k = 1;
  double tau = 1.0;
  GateMode mode = GateMode::kSoft;
  /// When set, rows with fewer than K unmasked features take min(K, available)
  /// draws instead of raising GateExhaustedError. Rows with none still raise.
  bool clamp_to_available = false;
};

struct GateResult {
  /// One tensor per draw, shaped like the weights.
  std::vector<ad::Tensor> steps;
  /// Σ steps. Differentiable w.r.t. the weights in soft mode, constant in hard mode.
  ad::Tensor gate;
  /// Input masks plus every selected index, one per row.
  std::vector<MaskVector> final_masks;
  /// Selected indices per row in draw order.
  std::vector<std::vector<std::size_t>> selected;
  GateMode mode = GateMode::kSoft;
};

/// Uniform draw in [0, 1) with 53 random bits; identical on every platform.
double uniform01(Rng& rng);
/// −log(−log(u)) with u clamped to [1e-12, 1 − 1e-12].
double gumbel_from_uniform(double u);
std::vector<double> sample_gumbel(std::size_t d, Rng& rng);

/// Frozen noise: entry t holds λ for draw t, laid out like the weights.
using GateNoise = std::vector<std::vector<double>>;
GateNoise sample_gate_noise(std::size_t k, std::size_t count, Rng& rng);

/// log π over the unmasked entries of each row of `w` ([d] or [n×d]); masked
/// entries hold -inf, which later stages treat as "excluded".
ad::Tensor masked_log_prob(const ad::Tensor& w, std::span<const MaskVector> masks);
ad::Tensor masked_log_prob(const ad::Tensor& w, const MaskVector& mask);

/// softmax((log π + λ) / τ) along the last axis. -inf entries come out exactly 0.
ad::Tensor gate_step(const ad::Tensor& log_pi, const ad::Tensor& noise, double tau);

/// m + onehot(argmax g), ties to the lowest index.
MaskVector update_mask(const MaskVector& mask, std::span<const double> g);

/// Index of the largest entry, lowest index on ties.
std::size_t argmax(std::span<const double> values);

GateResult k_hot_gate(const ad::Tensor& w, std::span<const MaskVector> masks,
                      const GateOptions& options, const GateNoise& noise);
GateResult k_hot_gate(const ad::Tensor& w, std::span<const MaskVector> masks,
                      const GateOptions& options, Rng& rng);
GateResult k_hot_gate(const ad::Tensor& w, const MaskVector& mask, const GateOptions& options,
                      Rng& rng);

}  // namespace ngsll::gate
