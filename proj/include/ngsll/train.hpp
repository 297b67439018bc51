#pragma once

// Optimizers and the two-phase training schedule: Adam on a wide, warm gate,
// then momentum SGD on the target K at low temperature.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ngsll/autodiff.hpp"
#include "ngsll/data.hpp"
#include "ngsll/gate.hpp"
#include "ngsll/model.hpp"

namespace ngsll::train {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update in place. `state` is sized on first use.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config);

/// v ← p·v + g; θ ← θ − lr·v.
void momentum_sgd_step(std::span<double> params, std::span<const double> grads,
                       std::span<double> velocity, double lr, double momentum);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::vector<ad::Parameter>& params) = 0;
  virtual double learning_rate() const = 0;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  void step(std::vector<ad::Parameter>& params) override;
  double learning_rate() const override { return config_.lr; }

 private:
  AdamConfig config_;
  std::vector<AdamState> states_;
};

class MomentumSgd final : public Optimizer {
 public:
  MomentumSgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(std::vector<ad::Parameter>& params) override;
  double learning_rate() const override { return lr_; }
  const std::vector<std::vector<double>>& velocity() const noexcept { return velocity_; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;  // starts at zero
};

struct TrainSchedule {
  std::size_t k_coarse = 10;
  std::size_t k_target = 1;
  double tau_coarse = 1.0;
  double tau_fine = 0.1;
  AdamConfig adam;
  /// Fine-phase learning rate is this fraction of the coarse rate.
  double fine_lr_factor = 0.1;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t max_epochs_coarse = 50;
  std::size_t max_epochs_fine = 50;
  /// Epochs without validation-loss improvement before a phase ends.
  std::size_t patience = 5;
  bool clamp_k = false;
  /// Skip the coarse phase: one Adam phase at K_target and τ_fine lasting
  /// both phases' epoch budgets. The reference point for the two-phase schedule.
  bool fine_only = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
void from_json(const nlohmann::json& j, TrainSchedule& s);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string phase;  // "coarse", "fine" or "fine-only"
  std::size_t k = 0;
  double tau = 0.0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  /// First fine-phase epoch, when a fine phase ran.
  std::optional<std::size_t> switch_epoch;
  double coarse_lr = 0.0;
  double fine_lr = 0.0;
  double best_val_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Each phase keeps the parameters from its best validation epoch.
TrainResult coarse_to_fine_train(model::Model& model, const data::Dataset& train,
                                 const data::Dataset& validation, const TrainSchedule& schedule,
                                 gate::Rng& rng, const EpochCallback& on_epoch = {});

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

/// Hard-gate (λ = 0) accuracy and loss. The dense variant is scored with
/// per-sample top-K truncation of its generated weights.
Evaluation evaluate(const model::Model& model, const data::Dataset& dataset, std::size_t k,
                    bool clamp_k = false, std::size_t batch_size = 256);

/// Predicted labels (±1 or class index) under hard gating.
std::vector<int> predict_labels(const model::Model& model, const data::Dataset& dataset,
                                std::size_t k, bool clamp_k = false,
                                std::size_t batch_size = 256);

}  // namespace ngsll::train
