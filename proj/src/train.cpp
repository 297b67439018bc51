#include "ngsll/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace ngsll::train {

namespace {

using model::Variant;

std::vector<const data::Sample*> pointers(const data::Dataset& ds) {
  std::vector<const data::Sample*> out;
  out.reserve(ds.size());
  for (const auto& s : ds.samples) out.push_back(&s);
  return out;
}

std::size_t uniform_index(std::size_t n, gate::Rng& rng) {
  // Rejection sampling keeps the shuffle unbiased and library-independent.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return static_cast<std::size_t>(r % n);
}

void shuffle(std::vector<const data::Sample*>& v, gate::Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(i, rng)]);
}

// Per-sample top-K truncation of generated weights, for the ungated variant.
ad::Tensor truncated_gate(const ad::Tensor& w, model::Batch batch, std::size_t heads,
                          std::size_t k) {
  const std::size_t d = w.extent(1);
  std::vector<double> g(w.size(), 0.0);
  for (std::size_t r = 0; r < w.extent(0); ++r) {
    const gate::MaskVector& mask = batch[r / heads]->mask;
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < d; ++j) {
      if (!mask.masked(j)) idx.push_back(j);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(w[r * d + a]) > std::abs(w[r * d + b]);
    });
    for (std::size_t i = 0; i < std::min(k, idx.size()); ++i) g[r * d + idx[i]] = 1.0;
  }
  return ad::Tensor(w.shape(), std::move(g));
}

model::Forward hard_forward(const model::Model& m, model::Batch batch, std::size_t k,
                            bool clamp_k) {
  const auto& c = m.config();
  switch (c.variant) {
    case Variant::kNgsll: {
      gate::Rng unused(0);
      return m.forward_loss(nullptr, batch, gate::GateOptions{k, c.tau_fine, gate::GateMode::kHard,
                                                              clamp_k},
                            unused);
    }
    case Variant::kDense: {
      if (k >= c.d) return m.dense_forward(nullptr, batch);
      model::Forward f;
      f.weights = m.generate_weights(nullptr, batch);
      f.gate.gate = truncated_gate(f.weights, batch, c.heads(), k);
      f.gate.mode = gate::GateMode::kHard;
      const ad::Tensor s =
          model::predict(model::stack_features(batch, c.heads()), f.weights, f.gate.gate);
      std::vector<int> labels;
      for (const auto* smp : batch) labels.push_back(smp->label);
      if (c.heads() == 1) {
        f.scores = s;
        f.loss = model::binary_loss(s, labels);
      } else {
        f.scores = ad::reshape(s, {batch.size(), c.heads()});
        f.loss = model::multiclass_loss(f.scores, labels);
      }
      return f;
    }
    case Variant::kDnn:
      return m.dnn_forward(nullptr, batch);
  }
  throw ContractError("unknown variant");
}

std::vector<int> labels_from_scores(const model::Model& m, const ad::Tensor& scores) {
  const auto& c = m.config();
  std::vector<int> out;
  if (scores.dim() == 1) {
    for (double s : scores.data()) out.push_back(s > 0.0 ? 1 : -1);
    return out;
  }
  const std::size_t n = scores.extent(0), classes = scores.extent(1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t best = gate::argmax(scores.data().subspan(i * classes, classes));
    // The dnn variant emits two logits for binary tasks; map back to ±1.
    if (c.num_classes == 2) {
      out.push_back(best == 1 ? 1 : -1);
    } else {
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

std::vector<std::vector<double>> snapshot(const model::Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

void restore(model::Model& m, const std::vector<std::vector<double>>& saved) {
  auto& params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(saved[i].begin(), saved[i].end(), params[i].value.mutable_data().begin());
  }
}

}  // namespace

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradient(s) for " +
                         std::to_string(params.size()) + " parameter(s)");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grads[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

void momentum_sgd_step(std::span<double> params, std::span<const double> grads,
                       std::span<double> velocity, double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw DimensionError("momentum_sgd_step: parameter, gradient and velocity lengths differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

void Adam::step(std::vector<ad::Parameter>& params) {
  if (states_.size() != params.size()) states_.assign(params.size(), AdamState{});
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_step(params[i].value.mutable_data(), params[i].grad, states_[i], config_);
  }
}

void MomentumSgd::step(std::vector<ad::Parameter>& params) {
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const auto& p : params) velocity_.emplace_back(p.value.size(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    momentum_sgd_step(params[i].value.mutable_data(), params[i].grad, velocity_[i], lr_,
                      momentum_);
  }
}

void TrainSchedule::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("train schedule: " + msg); };
  if (k_coarse == 0 || k_target == 0) fail("K must be at least 1");
  if (!(tau_coarse > 0.0) || !(tau_fine > 0.0)) fail("temperatures must be positive");
  if (!fine_only) {
    if (k_coarse < k_target) fail("k_coarse must be at least k_target");
    if (!(tau_coarse > tau_fine)) fail("tau_coarse must exceed tau_fine");
  }
  if (!(adam.lr > 0.0)) fail("learning rate must be positive");
  if (!(fine_lr_factor > 0.0)) fail("fine_lr_factor must be positive");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum must lie in [0, 1)");
  if (batch_size == 0) fail("batch_size must be positive");
  if (patience == 0) fail("patience must be positive");
  if (max_epochs_coarse == 0 && max_epochs_fine == 0) fail("no epochs scheduled");
}

void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"k_coarse", s.k_coarse},
                     {"k_target", s.k_target},
                     {"tau_coarse", s.tau_coarse},
                     {"tau_fine", s.tau_fine},
                     {"lr", s.adam.lr},
                     {"beta1", s.adam.beta1},
                     {"beta2", s.adam.beta2},
                     {"eps", s.adam.eps},
                     {"fine_lr_factor", s.fine_lr_factor},
                     {"momentum", s.momentum},
                     {"batch_size", s.batch_size},
                     {"max_epochs_coarse", s.max_epochs_coarse},
                     {"max_epochs_fine", s.max_epochs_fine},
                     {"patience", s.patience},
                     {"clamp_k", s.clamp_k},
                     {"fine_only", s.fine_only}};
}

void from_json(const nlohmann::json& j, TrainSchedule& s) {
  static const std::set<std::string> known{
      "k_coarse", "k_target",       "tau_coarse", "tau_fine",   "lr",
      "beta1",    "beta2",          "eps",        "fine_lr_factor", "momentum",
      "batch_size", "max_epochs_coarse", "max_epochs_fine", "patience", "clamp_k", "fine_only"};
  if (!j.is_object()) throw ContractError("train schedule must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ContractError("train schedule: unknown key '" + key + "'");
  }
  TrainSchedule out;
  out.k_coarse = j.value("k_coarse", out.k_coarse);
  out.k_target = j.value("k_target", out.k_target);
  out.tau_coarse = j.value("tau_coarse", out.tau_coarse);
  out.tau_fine = j.value("tau_fine", out.tau_fine);
  out.adam.lr = j.value("lr", out.adam.lr);
  out.adam.beta1 = j.value("beta1", out.adam.beta1);
  out.adam.beta2 = j.value("beta2", out.adam.beta2);
  out.adam.eps = j.value("eps", out.adam.eps);
  out.fine_lr_factor = j.value("fine_lr_factor", out.fine_lr_factor);
  out.momentum = j.value("momentum", out.momentum);
  out.batch_size = j.value("batch_size", out.batch_size);
  out.max_epochs_coarse = j.value("max_epochs_coarse", out.max_epochs_coarse);
  out.max_epochs_fine = j.value("max_epochs_fine", out.max_epochs_fine);
  out.patience = j.value("patience", out.patience);
  out.clamp_k = j.value("clamp_k", out.clamp_k);
  out.fine_only = j.value("fine_only", out.fine_only);
  s = out;
}

Evaluation evaluate(const model::Model& m, const data::Dataset& dataset, std::size_t k,
                    bool clamp_k, std::size_t batch_size) {
  if (dataset.empty()) throw ContractError("evaluate: empty dataset");
  if (batch_size == 0) throw ContractError("evaluate: batch_size must be positive");
  const auto all = pointers(dataset);
  Evaluation ev;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < all.size(); start += batch_size) {
    const std::size_t end = std::min(all.size(), start + batch_size);
    const model::Batch batch(all.data() + start, end - start);
    const model::Forward f = hard_forward(m, batch, k, clamp_k);
    loss += f.loss.item() * static_cast<double>(batch.size());
    const auto predicted = labels_from_scores(m, f.scores);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (predicted[i] == batch[i]->label) ++correct;
    }
  }
  ev.count = all.size();
  ev.loss = loss / static_cast<double>(ev.count);
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(ev.count);
  return ev;
}

std::vector<int> predict_labels(const model::Model& m, const data::Dataset& dataset, std::size_t k,
                                bool clamp_k, std::size_t batch_size) {
  const auto all = pointers(dataset);
  std::vector<int> out;
  out.reserve(all.size());
  for (std::size_t start = 0; start < all.size(); start += batch_size) {
    const std::size_t end = std::min(all.size(), start + batch_size);
    const model::Batch batch(all.data() + start, end - start);
    const auto predicted = labels_from_scores(m, hard_forward(m, batch, k, clamp_k).scores);
    out.insert(out.end(), predicted.begin(), predicted.end());
  }
  return out;
}

TrainResult coarse_to_fine_train(model::Model& m, const data::Dataset& train,
                                 const data::Dataset& validation, const TrainSchedule& schedule,
                                 gate::Rng& rng, const EpochCallback& on_epoch) {
  schedule.validate();
  if (train.empty()) throw ContractError("train: empty training set");
  if (validation.empty()) throw ContractError("train: empty validation set");
  const auto& c = m.config();
  const bool gated = c.variant == Variant::kNgsll;

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<const data::Sample*> order = pointers(train);
  std::size_t epoch = 0;

  auto run_phase = [&](const std::string& phase, std::size_t k, double tau, Optimizer& opt,
                       std::size_t max_epochs) {
    // Ungated variants validate with every weight in play.
    const std::size_t eval_k = gated ? k : c.d;
    double best = std::numeric_limits<double>::infinity();
    auto best_params = snapshot(m);
    std::size_t stale = 0;
    const gate::GateOptions options{k, tau, gate::GateMode::kSoft, schedule.clamp_k};
    for (std::size_t e = 0; e < max_epochs; ++e) {
      shuffle(order, rng);
      double total = 0.0;
      for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
        const std::size_t end = std::min(order.size(), start + schedule.batch_size);
        const model::Batch batch(order.data() + start, end - start);
        m.zero_grad();
        ad::Graph graph;
        const auto diverged = [&](const std::string& why) {
          return TrainingError("training diverged in " + phase + " phase at epoch " +
                               std::to_string(epoch) + ": " + why);
        };
        model::Forward f;
        try {
          f = m.forward(&graph, batch, options, rng);
        } catch (const DomainError& e) {
          // Overflowing weights surface as -inf/NaN inside the gate.
          throw diverged(e.what());
        }
        const double value = f.loss.item();
        if (!std::isfinite(value)) throw diverged("non-finite loss");
        graph.backward(f.loss);
        opt.step(m.parameters());
        total += value * static_cast<double>(batch.size());
      }
      const Evaluation ev = evaluate(m, validation, eval_k, schedule.clamp_k);
      EpochRecord rec{epoch, phase, k, tau, opt.learning_rate(),
                      total / static_cast<double>(order.size()), ev.loss, ev.accuracy};
      result.log.push_back(rec);
      if (on_epoch) on_epoch(rec);
      ++epoch;
      if (ev.loss < best) {
        best = ev.loss;
        best_params = snapshot(m);
        stale = 0;
      } else if (++stale >= schedule.patience) {
        break;
      }
    }
    restore(m, best_params);
    result.best_val_loss = best;
  };

  TrainSchedule s = schedule;
  if (gated) {
    s.k_coarse = std::min(s.k_coarse, c.d);
    s.k_target = std::min(s.k_target, c.d);
  }
  Adam adam(s.adam);
  result.coarse_lr = s.adam.lr;
  if (s.fine_only) {
    run_phase("fine-only", s.k_target, s.tau_fine, adam, s.max_epochs_coarse + s.max_epochs_fine);
    return result;
  }
  if (s.max_epochs_coarse > 0) run_phase("coarse", s.k_coarse, s.tau_coarse, adam, s.max_epochs_coarse);
  if (gated && s.max_epochs_fine > 0) {
    // Fresh optimizer: velocity starts at zero and no Adam moments carry over.
    MomentumSgd sgd(s.adam.lr * s.fine_lr_factor, s.momentum);
    result.fine_lr = sgd.learning_rate();
    result.switch_epoch = epoch;
    run_phase("fine", s.k_target, s.tau_fine, sgd, s.max_epochs_fine);
  }
  return result;
}

}  // namespace ngsll::train
