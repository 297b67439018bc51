#include "ngsll/gate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ngsll::gate {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct RowLayout {
  std::size_t rows;
  std::size_t width;
};

RowLayout row_layout(const ad::Tensor& w, std::string_view op) {
  if (w.dim() == 1) return {1, w.extent(0)};
  if (w.dim() == 2) return {w.extent(0), w.extent(1)};
  throw DimensionError(std::string(op) + ": weights must be [d] or [n×d], got " +
                       ad::to_string(w.shape()));
}

std::vector<std::uint8_t> flatten(std::span<const MaskVector> masks, const RowLayout& layout,
                                  std::string_view op) {
  if (masks.size() != layout.rows) {
    throw DimensionError(std::string(op) + ": " + std::to_string(masks.size()) +
                         " mask(s) for " + std::to_string(layout.rows) + " row(s)");
  }
  std::vector<std::uint8_t> flat;
  flat.reserve(layout.rows * layout.width);
  for (const MaskVector& m : masks) {
    if (m.size() != layout.width) {
      throw DimensionError(std::string(op) + ": mask length " + std::to_string(m.size()) +
                           " does not match weight length " + std::to_string(layout.width));
    }
    if (m.unmasked_count() == 0) throw GateExhaustedError(1, 0);
    flat.insert(flat.end(), m.bits().begin(), m.bits().end());
  }
  return flat;
}

ad::Tensor detach(const ad::Tensor& t) {
  return ad::Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

}  // namespace

MaskVector::MaskVector(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (std::uint8_t b : bits_) {
    if (b > 1) throw ContractError("mask entries must be 0 or 1");
  }
}

MaskVector MaskVector::from_features(std::span<const double> z) {
  MaskVector m(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) m.bits_[j] = z[j] == 0.0 ? 1 : 0;
  return m;
}

std::size_t MaskVector::masked_count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

const char* to_string(GateMode mode) { return mode == GateMode::kSoft ? "soft" : "hard"; }

GateMode parse_gate_mode(std::string_view text) {
  if (text == "soft") return GateMode::kSoft;
  if (text == "hard") return GateMode::kHard;
  throw ContractError("unknown gate mode '" + std::string(text) + "' (expected soft or hard)");
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double gumbel_from_uniform(double u) {
  u = std::clamp(u, 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

std::vector<double> sample_gumbel(std::size_t d, Rng& rng) {
  std::vector<double> out(d);
  for (double& v : out) v = gumbel_from_uniform(uniform01(rng));
  return out;
}

GateNoise sample_gate_noise(std::size_t k, std::size_t count, Rng& rng) {
  GateNoise noise;
  noise.reserve(k);
  for (std::size_t t = 0; t < k; ++t) noise.push_back(sample_gumbel(count, rng));
  return noise;
}

ad::Tensor masked_log_prob(const ad::Tensor& w, std::span<const MaskVector> masks) {
  const RowLayout layout = row_layout(w, "masked_log_prob");
  const auto flat = flatten(masks, layout, "masked_log_prob");
  // Filling before the normalizer makes log π a proper log-distribution over
  // the live entries; the Gumbel-softmax output is unchanged either way.
  return ad::log_softmax(ad::masked_fill(ad::square(w), flat, kNegInf), w.dim() - 1);
}

ad::Tensor masked_log_prob(const ad::Tensor& w, const MaskVector& mask) {
  return masked_log_prob(w, std::span<const MaskVector>(&mask, 1));
}

ad::Tensor gate_step(const ad::Tensor& log_pi, const ad::Tensor& noise, double tau) {
  if (!(tau > 0.0)) throw ContractError("gate_step: temperature must be positive, got " +
                                        std::to_string(tau));
  if (log_pi.shape() != noise.shape()) {
    throw DimensionError("gate_step: noise " + ad::to_string(noise.shape()) +
                         " does not match log-probabilities " + ad::to_string(log_pi.shape()));
  }
  const RowLayout layout = row_layout(log_pi, "gate_step");
  for (std::size_t r = 0; r < layout.rows; ++r) {
    auto row = log_pi.data().subspan(r * layout.width, layout.width);
    if (std::all_of(row.begin(), row.end(), [](double v) { return v == kNegInf; })) {
      throw GateExhaustedError(1, 0);
    }
  }
  return ad::softmax(ad::scale(ad::add(log_pi, noise), 1.0 / tau), log_pi.dim() - 1);
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw DimensionError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t j = 1; j < values.size(); ++j) {
    if (values[j] > values[best]) best = j;
  }
  return best;
}

MaskVector update_mask(const MaskVector& mask, std::span<const double> g) {
  if (g.size() != mask.size()) {
    throw DimensionError("update_mask: gate length " + std::to_string(g.size()) +
                         " does not match mask length " + std::to_string(mask.size()));
  }
  const std::size_t j = argmax(g);
  if (mask.masked(j)) {
    throw ContractError("update_mask: argmax index " + std::to_string(j) +
                        " is already masked; masked entries must carry zero gate value");
  }
  MaskVector next = mask;
  next.set(j);
  return next;
}

GateResult k_hot_gate(const ad::Tensor& w, std::span<const MaskVector> masks,
                      const GateOptions& options, const GateNoise& noise) {
  const RowLayout layout = row_layout(w, "k_hot_gate");
  if (options.k == 0) throw ContractError("k_hot_gate: K must be at least 1");
  if (!(options.tau > 0.0)) throw ContractError("k_hot_gate: temperature must be positive");
  if (masks.size() != layout.rows) {
    throw DimensionError("k_hot_gate: " + std::to_string(masks.size()) + " mask(s) for " +
                         std::to_string(layout.rows) + " row(s)");
  }
  std::vector<std::size_t> draws(layout.rows, options.k);
  for (std::size_t r = 0; r < layout.rows; ++r) {
    const MaskVector& m = masks[r];
    if (m.size() != layout.width) {
      throw DimensionError("k_hot_gate: mask length " + std::to_string(m.size()) +
                           " does not match weight length " + std::to_string(layout.width));
    }
    const std::size_t available = m.unmasked_count();
    if (available < options.k) {
      if (!options.clamp_to_available || available == 0) {
        throw GateExhaustedError(options.k, available);
      }
      draws[r] = available;
    }
  }
  const bool hard = options.mode == GateMode::kHard;
  if (!hard && noise.size() < options.k) {
    throw ContractError("k_hot_gate: " + std::to_string(noise.size()) +
                        " noise vector(s) for K=" + std::to_string(options.k));
  }

  GateResult result;
  result.mode = options.mode;
  result.final_masks.assign(masks.begin(), masks.end());
  result.selected.assign(layout.rows, {});
  // Hard gates are constants: selection never feeds gradients back into w.
  const ad::Tensor source = hard ? detach(w) : w;
  const ad::Tensor zero_noise = ad::Tensor::zeros(w.shape());

  for (std::size_t t = 0; t < options.k; ++t) {
    // Rows that already took all their draws run on an open mask and are
    // zeroed afterwards, so the batch stays rectangular.
    std::vector<MaskVector> step_masks = result.final_masks;
    std::vector<double> live(w.size(), 1.0);
    bool any_retired = false;
    for (std::size_t r = 0; r < layout.rows; ++r) {
      if (t < draws[r]) continue;
      any_retired = true;
      step_masks[r] = MaskVector(layout.width);
      std::fill_n(live.begin() + static_cast<std::ptrdiff_t>(r * layout.width), layout.width,
                  0.0);
    }
    const ad::Tensor log_pi = masked_log_prob(source, step_masks);
    ad::Tensor step;
    if (hard) {
      const ad::Tensor soft = gate_step(log_pi, zero_noise, options.tau);
      std::vector<double> onehot(soft.size(), 0.0);
      for (std::size_t r = 0; r < layout.rows; ++r) {
        if (t >= draws[r]) continue;
        onehot[r * layout.width + argmax(soft.data().subspan(r * layout.width, layout.width))] =
            1.0;
      }
      step = ad::Tensor(w.shape(), std::move(onehot));
    } else {
      if (noise[t].size() != w.size()) {
        throw DimensionError("k_hot_gate: noise length " + std::to_string(noise[t].size()) +
                             " does not match weights " + ad::to_string(w.shape()));
      }
      step = gate_step(log_pi, ad::Tensor(w.shape(), noise[t]), options.tau);
      if (any_retired) step = ad::mul(step, ad::Tensor(w.shape(), std::move(live)));
    }
    for (std::size_t r = 0; r < layout.rows; ++r) {
      if (t >= draws[r]) continue;
      auto row = step.data().subspan(r * layout.width, layout.width);
      result.final_masks[r] = update_mask(result.final_masks[r], row);
      result.selected[r].push_back(argmax(row));
    }
    result.gate = t == 0 ? step : ad::add(result.gate, step);
    result.steps.push_back(std::move(step));
  }
  return result;
}

GateResult k_hot_gate(const ad::Tensor& w, std::span<const MaskVector> masks,
                      const GateOptions& options, Rng& rng) {
  if (options.mode == GateMode::kHard) return k_hot_gate(w, masks, options, GateNoise{});
  return k_hot_gate(w, masks, options, sample_gate_noise(options.k, w.size(), rng));
}

GateResult k_hot_gate(const ad::Tensor& w, const MaskVector& mask, const GateOptions& options,
                      Rng& rng) {
  return k_hot_gate(w, std::span<const MaskVector>(&mask, 1), options, rng);
}

}  // namespace ngsll::gate
