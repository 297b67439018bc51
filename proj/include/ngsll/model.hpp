#pragma once

// Weight generator network + K-hot gate + linear head, and the two reference
// variants (dense weights without gating; plain classifier).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ngsll/autodiff.hpp"
#include "ngsll/data.hpp"
#include "ngsll/gate.hpp"

namespace ngsll::model {

enum class Variant {
  kNgsll,  // gated sparse local linear model
  kDense,  // generated weights used without gating
  kDnn,    // extractor + FC stack emitting class logits directly
};

const char* to_string(Variant variant);
Variant parse_variant(std::string_view text);

struct ImageExtractor {
  std::vector<std::size_t> channels{16, 32, 64};
  std::size_t kernel = 3;
};

struct TextExtractor {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 64;
  std::vector<std::size_t> widths{3, 4, 5};
  std::size_t filters = 32;
};

struct ModelConfig {
  data::Modality modality = data::Modality::kDense;
  Variant variant = Variant::kNgsll;
  ad::Shape input_shape;  // image [c×h×w]; dense [p]; unused for text
  std::size_t d = 0;
  std::size_t k = 10;
  std::size_t layers = 1;
  std::size_t units = 128;
  std::size_t num_classes = 2;
  ImageExtractor image;
  TextExtractor text;
  double tau_coarse = 1.0;
  double tau_fine = 0.1;

  /// Weight vectors generated per sample: one for binary tasks, one per class otherwise.
  std::size_t heads() const noexcept { return num_classes == 2 ? 1 : num_classes; }
  void validate() const;
  /// Config matching a dataset's modality, d, class count and input shape.
  static ModelConfig for_dataset(const data::Dataset& dataset);
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Explanation {
  struct Entry {
    std::size_t index = 0;
    std::string name;
    double weight = 0.0;
  };
  /// ŷ for binary tasks; the winning logit otherwise.
  double prediction = 0.0;
  /// ±1 for binary tasks, class index otherwise.
  int predicted_label = 0;
  /// Head whose weights are reported (always 0 for binary tasks).
  std::size_t head = 0;
  std::vector<Entry> entries;  // sorted by |weight| descending
  gate::GateMode mode = gate::GateMode::kHard;
};

using Batch = std::span<const data::Sample* const>;

/// Output of one forward pass over a batch.
struct Forward {
  ad::Tensor loss;     // scalar mean loss
  ad::Tensor scores;   // binary: ŷ [n]; multiclass: logits [n×C]
  ad::Tensor weights;  // [n·heads × d] generated weights (empty for the DNN variant)
  gate::GateResult gate;
};

/// ŷ = zᵀ(g ⊙ w) along the last axis: scalar for vectors, [n] for [n×d] rows.
ad::Tensor predict(const ad::Tensor& z, const ad::Tensor& w, const ad::Tensor& g);

/// mean log(1 + exp(−y·ŷ)) with y ∈ {+1, −1}.
ad::Tensor binary_loss(const ad::Tensor& scores, std::span<const int> labels);
/// mean −log softmax(logits)[y] with y a class index.
ad::Tensor multiclass_loss(const ad::Tensor& logits, std::span<const int> labels);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<ad::Parameter>& parameters() noexcept { return params_; }
  const std::vector<ad::Parameter>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const noexcept;
  void zero_grad();
  /// Rounds every parameter to the nearest 32-bit float (checkpoint precision).
  void round_to_float();

  /// [n·heads × d] weights; row r·heads + c belongs to sample r, head c.
  ad::Tensor generate_weights(ad::Graph* graph, Batch batch) const;
  std::vector<double> generate_weights(const data::Sample& sample) const;

  Forward forward_loss(ad::Graph* graph, Batch batch, const gate::GateOptions& options,
                       gate::Rng& rng) const;
  Forward forward_loss(ad::Graph* graph, Batch batch, const gate::GateOptions& options,
                       const gate::GateNoise& noise) const;
  /// Ablation without gating: g = 1.
  Forward dense_forward(ad::Graph* graph, Batch batch) const;
  /// Reference classifier: logits [n×num_classes].
  Forward dnn_forward(ad::Graph* graph, Batch batch) const;
  /// Dispatches on the configured variant.
  Forward forward(ad::Graph* graph, Batch batch, const gate::GateOptions& options,
                  gate::Rng& rng) const;

  /// Hard-gated (or soft, with `rng`) K-feature explanation of one sample.
  Explanation explain(const data::Sample& sample, std::size_t k,
                      std::span<const std::string> feature_names,
                      gate::GateMode mode = gate::GateMode::kHard, gate::Rng* rng = nullptr,
                      bool clamp_to_available = false) const;

 private:
  struct Bound;
  Bound bind(ad::Graph* graph) const;
  ad::Tensor features(const Bound& bound, Batch batch) const;
  ad::Tensor head_output(const Bound& bound, Batch batch) const;
  Forward gated(ad::Graph* graph, Batch batch, const gate::GateOptions& options,
                const gate::GateNoise* noise, gate::Rng* rng) const;
  std::size_t output_width() const noexcept;
  void add_parameter(std::string name, ad::Shape shape, double stddev, gate::Rng& rng);

  ModelConfig config_;
  // Graph binding records a pointer for gradient accumulation; values are
  // only written by optimizers.
  mutable std::vector<ad::Parameter> params_;
};

/// Per-sample z rows (repeated once per head) as a constant tensor.
ad::Tensor stack_features(Batch batch, std::size_t heads);

}  // namespace ngsll::model
