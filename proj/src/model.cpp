#include "ngsll/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

namespace ngsll::model {

namespace {

double standard_normal(gate::Rng& rng) {
  // Box–Muller over the portable uniform draw, so initialization is identical
  // across standard libraries.
  double u1 = gate::uniform01(rng);
  while (u1 <= 0.0) u1 = gate::uniform01(rng);
  const double u2 = gate::uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::size_t image_feature_count(const ModelConfig& c) {
  std::size_t h = c.input_shape.at(1), w = c.input_shape.at(2);
  const std::size_t pad = c.image.kernel / 2;
  for (std::size_t i = 0; i < c.image.channels.size(); ++i) {
    h = (h + 2 * pad - c.image.kernel + 1) / 2;
    w = (w + 2 * pad - c.image.kernel + 1) / 2;
  }
  return c.image.channels.back() * h * w;
}

std::size_t extractor_width(const ModelConfig& c) {
  switch (c.modality) {
    case data::Modality::kImage:
      return image_feature_count(c);
    case data::Modality::kText:
      return c.text.widths.size() * c.text.filters;
    case data::Modality::kDense:
      return c.input_shape.at(0);
  }
  return 0;
}

int class_index(const data::Sample& s, std::size_t num_classes) {
  if (num_classes == 2) return s.label > 0 ? 1 : 0;
  return s.label;
}

std::vector<const data::Sample*> single(const data::Sample& s) { return {&s}; }

}  // namespace

const char* to_string(Variant variant) {
  switch (variant) {
    case Variant::kNgsll:
      return "ngsll";
    case Variant::kDense:
      return "dense";
    case Variant::kDnn:
      return "dnn";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  if (text == "ngsll") return Variant::kNgsll;
  if (text == "dense") return Variant::kDense;
  if (text == "dnn") return Variant::kDnn;
  throw ContractError("unknown model variant '" + std::string(text) +
                      "' (expected ngsll, dense or dnn)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("model config: " + msg); };
  if (d == 0) fail("d must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (variant != Variant::kDnn && (k == 0 || k > d)) {
    fail("K must lie in [1, d], got K=" + std::to_string(k) + " with d=" + std::to_string(d));
  }
  if (layers > 0 && units == 0) fail("units must be positive when layers > 0");
  if (!(tau_coarse > 0.0) || !(tau_fine > 0.0)) fail("temperatures must be positive");
  switch (modality) {
    case data::Modality::kImage: {
      if (input_shape.size() != 3) fail("image input_shape must be [c, h, w]");
      if (image.channels.empty()) fail("image extractor needs at least one conv block");
      if (image.kernel == 0 || image.kernel % 2 == 0) fail("image kernel must be odd");
      std::size_t h = input_shape[1], w = input_shape[2];
      for (std::size_t i = 0; i < image.channels.size(); ++i) {
        if (image.channels[i] == 0) fail("conv channels must be positive");
        h /= 2;
        w /= 2;
        if (h == 0 || w == 0) fail("input too small for " + std::to_string(image.channels.size()) +
                                   " pooling stages");
      }
      break;
    }
    case data::Modality::kText:
      if (text.vocab_size == 0) fail("text vocab_size must be positive");
      if (text.embed_dim == 0 || text.filters == 0 || text.widths.empty()) {
        fail("text extractor needs embed_dim, filters and widths");
      }
      for (std::size_t w : text.widths) {
        if (w == 0) fail("filter widths must be positive");
      }
      break;
    case data::Modality::kDense:
      if (input_shape.size() != 1 || input_shape[0] == 0) fail("dense input_shape must be [p]");
      break;
  }
}

ModelConfig ModelConfig::for_dataset(const data::Dataset& dataset) {
  ModelConfig c;
  c.modality = dataset.modality;
  c.input_shape = dataset.x_shape;
  c.d = dataset.d;
  c.num_classes = dataset.num_classes;
  if (dataset.vocabulary) c.text.vocab_size = dataset.vocabulary->size();
  c.k = std::min<std::size_t>(c.k, c.d);
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"modality", data::to_string(c.modality)},
      {"variant", to_string(c.variant)},
      {"input_shape", c.input_shape},
      {"d", c.d},
      {"k", c.k},
      {"layers", c.layers},
      {"units", c.units},
      {"num_classes", c.num_classes},
      {"image", {{"channels", c.image.channels}, {"kernel", c.image.kernel}}},
      {"text",
       {{"vocab_size", c.text.vocab_size},
        {"embed_dim", c.text.embed_dim},
        {"widths", c.text.widths},
        {"filters", c.text.filters}}},
      {"tau_coarse", c.tau_coarse},
      {"tau_fine", c.tau_fine},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known{"modality", "variant", "input_shape", "d",
                                           "k",        "layers",  "units",       "num_classes",
                                           "image",    "text",    "tau_coarse",  "tau_fine"};
  if (!j.is_object()) throw ContractError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ContractError("model config: unknown key '" + key + "'");
  }
  ModelConfig out;
  if (j.contains("modality")) out.modality = data::parse_modality(j.at("modality").get<std::string>());
  if (j.contains("variant")) out.variant = parse_variant(j.at("variant").get<std::string>());
  out.input_shape = j.value("input_shape", out.input_shape);
  out.d = j.value("d", out.d);
  out.k = j.value("k", out.k);
  out.layers = j.value("layers", out.layers);
  out.units = j.value("units", out.units);
  out.num_classes = j.value("num_classes", out.num_classes);
  if (j.contains("image")) {
    const auto& im = j.at("image");
    out.image.channels = im.value("channels", out.image.channels);
    out.image.kernel = im.value("kernel", out.image.kernel);
  }
  if (j.contains("text")) {
    const auto& tx = j.at("text");
    out.text.vocab_size = tx.value("vocab_size", out.text.vocab_size);
    out.text.embed_dim = tx.value("embed_dim", out.text.embed_dim);
    out.text.widths = tx.value("widths", out.text.widths);
    out.text.filters = tx.value("filters", out.text.filters);
  }
  out.tau_coarse = j.value("tau_coarse", out.tau_coarse);
  out.tau_fine = j.value("tau_fine", out.tau_fine);
  c = std::move(out);
}

ad::Tensor predict(const ad::Tensor& z, const ad::Tensor& w, const ad::Tensor& g) {
  if (z.shape() != w.shape() || g.shape() != w.shape()) {
    throw DimensionError("predict: z " + ad::to_string(z.shape()) + ", w " +
                         ad::to_string(w.shape()) + " and g " + ad::to_string(g.shape()) +
                         " must share a shape");
  }
  const ad::Tensor terms = ad::mul(z, ad::mul(g, w));
  if (w.dim() == 1) return ad::sum(terms);
  if (w.dim() == 2) return ad::sum(terms, 1);
  throw DimensionError("predict: expected [d] or [n×d], got " + ad::to_string(w.shape()));
}

ad::Tensor binary_loss(const ad::Tensor& scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("binary_loss: " + std::to_string(scores.size()) + " score(s) for " +
                         std::to_string(labels.size()) + " label(s)");
  }
  std::vector<double> neg_y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1 && labels[i] != -1) {
      throw ContractError("binary_loss: labels must be +1 or -1, got " + std::to_string(labels[i]));
    }
    neg_y[i] = -static_cast<double>(labels[i]);
  }
  return ad::mean(ad::softplus(ad::mul(scores, ad::Tensor(scores.shape(), std::move(neg_y)))));
}

ad::Tensor multiclass_loss(const ad::Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2 || logits.extent(0) != labels.size()) {
    throw DimensionError("multiclass_loss: logits " + ad::to_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " label(s)");
  }
  const std::size_t n = logits.extent(0), c = logits.extent(1);
  std::vector<double> onehot(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ContractError("multiclass_loss: label " + std::to_string(labels[i]) +
                          " outside [0, " + std::to_string(c) + ")");
    }
    onehot[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  const ad::Tensor picked =
      ad::mul(ad::log_softmax(logits, 1), ad::Tensor(logits.shape(), std::move(onehot)));
  return ad::scale(ad::sum(picked), -1.0 / static_cast<double>(n));
}

ad::Tensor stack_features(Batch batch, std::size_t heads) {
  if (batch.empty()) throw DimensionError("stack_features: empty batch");
  const std::size_t d = batch.front()->z.size();
  std::vector<double> out;
  out.reserve(batch.size() * heads * d);
  for (const data::Sample* s : batch) {
    if (s->z.size() != d) throw DimensionError("stack_features: ragged z in batch");
    for (std::size_t c = 0; c < heads; ++c) out.insert(out.end(), s->z.begin(), s->z.end());
  }
  return ad::Tensor({batch.size() * heads, d}, std::move(out));
}

// ---- Model -----------------------------------------------------------------

struct Model::Bound {
  std::vector<ad::Tensor> p;
};

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  gate::Rng rng(seed);
  const ModelConfig& c = config_;
  switch (c.modality) {
    case data::Modality::kImage: {
      std::size_t in = c.input_shape[0];
      for (std::size_t i = 0; i < c.image.channels.size(); ++i) {
        const std::size_t out = c.image.channels[i];
        const std::size_t fan_in = in * c.image.kernel * c.image.kernel;
        add_parameter("conv" + std::to_string(i) + ".weight",
                      {out, in, c.image.kernel, c.image.kernel}, std::sqrt(2.0 / fan_in), rng);
        add_parameter("conv" + std::to_string(i) + ".bias", {out}, 0.0, rng);
        in = out;
      }
      break;
    }
    case data::Modality::kText:
      add_parameter("embedding", {c.text.vocab_size, c.text.embed_dim}, 0.1, rng);
      for (std::size_t w : c.text.widths) {
        const std::size_t fan_in = c.text.embed_dim * w;
        add_parameter("textconv" + std::to_string(w) + ".weight",
                      {c.text.filters, c.text.embed_dim, 1, w}, std::sqrt(2.0 / fan_in), rng);
        add_parameter("textconv" + std::to_string(w) + ".bias", {c.text.filters}, 0.0, rng);
      }
      break;
    case data::Modality::kDense:
      break;
  }
  std::size_t in = extractor_width(c);
  for (std::size_t l = 0; l < c.layers; ++l) {
    add_parameter("fc" + std::to_string(l) + ".weight", {in, c.units}, std::sqrt(2.0 / in), rng);
    add_parameter("fc" + std::to_string(l) + ".bias", {1, c.units}, 0.0, rng);
    in = c.units;
  }
  add_parameter("head.weight", {in, output_width()}, std::sqrt(1.0 / in), rng);
  add_parameter("head.bias", {1, output_width()}, 0.0, rng);
}

void Model::add_parameter(std::string name, ad::Shape shape, double stddev, gate::Rng& rng) {
  std::vector<double> values(ad::numel(shape), 0.0);
  if (stddev > 0.0) {
    for (double& v : values) v = stddev * standard_normal(rng);
  }
  ad::Parameter p{std::move(name), ad::Tensor(std::move(shape), std::move(values)), {}};
  p.zero_grad();
  params_.push_back(std::move(p));
}

std::size_t Model::output_width() const noexcept {
  return config_.variant == Variant::kDnn ? config_.num_classes : config_.heads() * config_.d;
}

std::size_t Model::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Model::round_to_float() {
  for (auto& p : params_) {
    for (double& v : p.value.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
}

Model::Bound Model::bind(ad::Graph* graph) const {
  Bound b;
  b.p.reserve(params_.size());
  for (auto& p : params_) b.p.push_back(graph != nullptr ? graph->parameter(p) : p.value);
  return b;
}

ad::Tensor Model::features(const Bound& bound, Batch batch) const {
  if (batch.empty()) throw DimensionError("model: empty batch");
  const ModelConfig& c = config_;
  const std::size_t n = batch.size();
  switch (c.modality) {
    case data::Modality::kImage: {
      const std::size_t per = ad::numel(c.input_shape);
      std::vector<double> x;
      x.reserve(n * per);
      for (const data::Sample* s : batch) {
        if (s->x.size() != per) {
          throw DimensionError("model: image sample has " + std::to_string(s->x.size()) +
                               " values, expected " + std::to_string(per));
        }
        x.insert(x.end(), s->x.begin(), s->x.end());
      }
      ad::Shape shape{n};
      shape.insert(shape.end(), c.input_shape.begin(), c.input_shape.end());
      ad::Tensor h(std::move(shape), std::move(x));
      const ad::Conv2dOptions conv{1, c.image.kernel / 2};
      for (std::size_t i = 0; i < c.image.channels.size(); ++i) {
        h = ad::conv2d(h, bound.p[2 * i], bound.p[2 * i + 1], conv);
        h = ad::max_pool2d(ad::relu(h), 2, 2);
      }
      return ad::reshape(h, {n, h.size() / n});
    }
    case data::Modality::kText: {
      const ad::Tensor& table = bound.p[0];
      const std::size_t max_width = *std::max_element(c.text.widths.begin(), c.text.widths.end());
      std::vector<ad::Tensor> rows;
      rows.reserve(n);
      for (const data::Sample* s : batch) {
        std::vector<std::size_t> ids = s->tokens;
        // Short documents are padded with the OOV symbol up to the widest filter.
        if (ids.size() < max_width) ids.resize(max_width, 0);
        const std::size_t len = ids.size();
        const ad::Tensor seq =
            ad::reshape(ad::transpose(ad::gather_rows(table, ids)), {c.text.embed_dim, 1, len});
        std::vector<ad::Tensor> pooled;
        for (std::size_t f = 0; f < c.text.widths.size(); ++f) {
          const std::size_t w = c.text.widths[f];
          const ad::Tensor act = ad::relu(ad::conv2d(seq, bound.p[1 + 2 * f], bound.p[2 + 2 * f]));
          const ad::Tensor peak = ad::max_pool2d(act, ad::PoolOptions{1, len - w + 1, 1, 1});
          pooled.push_back(ad::reshape(peak, {c.text.filters}));
        }
        rows.push_back(ad::concat(pooled));
      }
      return ad::stack(rows);
    }
    case data::Modality::kDense: {
      const std::size_t p = c.input_shape[0];
      std::vector<double> x;
      x.reserve(n * p);
      for (const data::Sample* s : batch) {
        if (s->x.size() != p) {
          throw DimensionError("model: dense sample has " + std::to_string(s->x.size()) +
                               " values, expected " + std::to_string(p));
        }
        x.insert(x.end(), s->x.begin(), s->x.end());
      }
      return ad::Tensor({n, p}, std::move(x));
    }
  }
  throw ContractError("model: unknown modality");
}

ad::Tensor Model::head_output(const Bound& bound, Batch batch) const {
  const std::size_t n = batch.size();
  const ad::Tensor ones = ad::Tensor::full({n, 1}, 1.0);
  std::size_t first_fc = 0;
  switch (config_.modality) {
    case data::Modality::kImage:
      first_fc = 2 * config_.image.channels.size();
      break;
    case data::Modality::kText:
      first_fc = 1 + 2 * config_.text.widths.size();
      break;
    case data::Modality::kDense:
      break;
  }
  ad::Tensor h = features(bound, batch);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const ad::Tensor& w = bound.p[first_fc + 2 * l];
    const ad::Tensor& b = bound.p[first_fc + 2 * l + 1];
    h = ad::relu(ad::add(ad::matmul(h, w), ad::matmul(ones, b)));
  }
  const std::size_t head = first_fc + 2 * config_.layers;
  return ad::add(ad::matmul(h, bound.p[head]), ad::matmul(ones, bound.p[head + 1]));
}

ad::Tensor Model::generate_weights(ad::Graph* graph, Batch batch) const {
  if (config_.variant == Variant::kDnn) {
    throw ContractError("the dnn variant does not generate feature weights");
  }
  const ad::Tensor out = head_output(bind(graph), batch);
  return ad::reshape(out, {batch.size() * config_.heads(), config_.d});
}

std::vector<double> Model::generate_weights(const data::Sample& sample) const {
  const auto batch = single(sample);
  const ad::Tensor w = generate_weights(nullptr, batch);
  return {w.data().begin(), w.data().end()};
}

Forward Model::gated(ad::Graph* graph, Batch batch, const gate::GateOptions& options,
                     const gate::GateNoise* noise, gate::Rng* rng) const {
  const std::size_t heads = config_.heads();
  Forward f;
  f.weights = generate_weights(graph, batch);
  std::vector<gate::MaskVector> masks;
  masks.reserve(batch.size() * heads);
  for (const data::Sample* s : batch) {
    for (std::size_t c = 0; c < heads; ++c) masks.push_back(s->mask);
  }
  f.gate = noise != nullptr ? gate::k_hot_gate(f.weights, masks, options, *noise)
                            : gate::k_hot_gate(f.weights, masks, options, *rng);
  const ad::Tensor s = predict(stack_features(batch, heads), f.weights, f.gate.gate);
  std::vector<int> labels;
  labels.reserve(batch.size());
  for (const data::Sample* smp : batch) labels.push_back(smp->label);
  if (heads == 1) {
    f.scores = s;
    f.loss = binary_loss(s, labels);
  } else {
    f.scores = ad::reshape(s, {batch.size(), heads});
    f.loss = multiclass_loss(f.scores, labels);
  }
  return f;
}

Forward Model::forward_loss(ad::Graph* graph, Batch batch, const gate::GateOptions& options,
                            gate::Rng& rng) const {
  return gated(graph, batch, options, nullptr, &rng);
}

Forward Model::forward_loss(ad::Graph* graph, Batch batch, const gate::GateOptions& options,
                            const gate::GateNoise& noise) const {
  return gated(graph, batch, options, &noise, nullptr);
}

Forward Model::dense_forward(ad::Graph* graph, Batch batch) const {
  const std::size_t heads = config_.heads();
  Forward f;
  f.weights = generate_weights(graph, batch);
  const ad::Tensor ones = ad::Tensor::full(f.weights.shape(), 1.0);
  f.gate.gate = ones;
  f.gate.mode = gate::GateMode::kHard;
  const ad::Tensor s = predict(stack_features(batch, heads), f.weights, ones);
  std::vector<int> labels;
  for (const data::Sample* smp : batch) labels.push_back(smp->label);
  if (heads == 1) {
    f.scores = s;
    f.loss = binary_loss(s, labels);
  } else {
    f.scores = ad::reshape(s, {batch.size(), heads});
    f.loss = multiclass_loss(f.scores, labels);
  }
  return f;
}

Forward Model::dnn_forward(ad::Graph* graph, Batch batch) const {
  if (config_.variant != Variant::kDnn) {
    throw ContractError("dnn_forward requires the dnn variant, model is " +
                        std::string(to_string(config_.variant)));
  }
  Forward f;
  f.scores = head_output(bind(graph), batch);
  std::vector<int> labels;
  for (const data::Sample* s : batch) labels.push_back(class_index(*s, config_.num_classes));
  f.loss = multiclass_loss(f.scores, labels);
  return f;
}

Forward Model::forward(ad::Graph* graph, Batch batch, const gate::GateOptions& options,
                       gate::Rng& rng) const {
  switch (config_.variant) {
    case Variant::kNgsll:
      return forward_loss(graph, batch, options, rng);
    case Variant::kDense:
      return dense_forward(graph, batch);
    case Variant::kDnn:
      return dnn_forward(graph, batch);
  }
  throw ContractError("unknown variant");
}

Explanation Model::explain(const data::Sample& sample, std::size_t k,
                           std::span<const std::string> feature_names, gate::GateMode mode,
                           gate::Rng* rng, bool clamp_to_available) const {
  if (config_.variant == Variant::kDnn) {
    throw ContractError("the dnn variant has no per-feature weights to explain");
  }
  if (k == 0) throw ContractError("explain: K must be at least 1");
  const std::size_t heads = config_.heads(), d = config_.d;
  const auto batch = single(sample);
  const ad::Tensor w = generate_weights(nullptr, batch);
  const std::vector<gate::MaskVector> masks(heads, sample.mask);

  Explanation ex;
  ex.mode = mode;
  std::vector<std::vector<std::size_t>> chosen(heads);
  ad::Tensor g;
  if (config_.variant == Variant::kDense) {
    // No gate: report the K largest-magnitude unmasked weights.
    g = ad::Tensor::full(w.shape(), 1.0);
    for (std::size_t c = 0; c < heads; ++c) {
      std::vector<std::size_t> idx;
      for (std::size_t j = 0; j < d; ++j) {
        if (!sample.mask.masked(j)) idx.push_back(j);
      }
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(w[c * d + a]) > std::abs(w[c * d + b]);
      });
      if (idx.size() > k) idx.resize(k);
      chosen[c] = std::move(idx);
    }
  } else {
    gate::GateOptions options{k, config_.tau_fine, mode, clamp_to_available};
    gate::GateResult gr;
    if (mode == gate::GateMode::kHard) {
      gr = gate::k_hot_gate(w, masks, options, gate::GateNoise{});
    } else {
      if (rng == nullptr) throw ContractError("explain: soft mode needs a random generator");
      gr = gate::k_hot_gate(w, masks, options, *rng);
    }
    g = gr.gate;
    chosen = gr.selected;
  }
  const ad::Tensor s = predict(stack_features(batch, heads), w, g);
  if (heads == 1) {
    ex.prediction = s.item();
    ex.predicted_label = ex.prediction > 0.0 ? 1 : -1;
    ex.head = 0;
  } else {
    ex.head = gate::argmax(s.data());
    ex.prediction = s[ex.head];
    ex.predicted_label = static_cast<int>(ex.head);
  }
  for (std::size_t j : chosen[ex.head]) {
    Explanation::Entry e;
    e.index = j;
    e.name = j < feature_names.size() ? feature_names[j] : "f" + std::to_string(j);
    e.weight = w[ex.head * d + j];
    ex.entries.push_back(std::move(e));
  }
  std::stable_sort(ex.entries.begin(), ex.entries.end(),
                   [](const Explanation::Entry& a, const Explanation::Entry& b) {
                     const double ma = std::abs(a.weight), mb = std::abs(b.weight);
                     if (ma != mb) return ma > mb;
                     return a.index < b.index;
                   });
  return ex;
}

}  // namespace ngsll::model
