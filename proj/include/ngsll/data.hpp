#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ngsll/autodiff.hpp"
#include "ngsll/gate.hpp"

namespace ngsll::data {

enum class Modality { kImage, kText, kDense };

const char* to_string(Modality modality);
Modality parse_modality(std::string_view text);

struct Sample {
  std::size_t id = 0;
  /// Image pixels (row-major, channel-first) or dense feature vector. Empty for text.
  std::vector<double> x;
  /// Token ids for text samples.
  std::vector<std::size_t> tokens;
  /// Simplified representation; its dimensions are the units of explanation.
  std::vector<double> z;
  /// ±1 for binary tasks, class index otherwise.
  int label = 0;
  gate::MaskVector mask;
  /// Planted ground-truth feature (synthetic data only).
  std::optional<std::size_t> relevant_feature;
  /// Raw text line, kept for rendering.
  std::string text;
};

class Vocabulary {
 public:
  static constexpr std::string_view kOovSymbol = "<oov>";

  Vocabulary();  // holds only the OOV symbol, at index 0

  std::size_t add(std::string_view token);
  /// Index of `token`, or the OOV index when unknown.
  std::size_t lookup(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::size_t index) const { return tokens_.at(index); }
  std::size_t oov() const noexcept { return 0; }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> tokens_;
};

struct Dataset {
  Modality modality = Modality::kDense;
  ad::Shape x_shape;  // per-sample shape of x (empty for text)
  std::size_t d = 0;
  std::size_t num_classes = 2;
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;
  std::optional<Vocabulary> vocabulary;

  bool binary() const noexcept { return num_classes == 2; }
  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
  /// Same metadata, no samples.
  Dataset header() const;
};

// ---- IDX (MNIST container) --------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count × rows × cols
};

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes);
IdxImages read_idx_images(const std::filesystem::path& path);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_idx_images(const IdxImages& images);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

/// Digits 0–4 → −1, 5–9 → +1.
int binarize_label(int digit);
std::vector<int> binarize_labels(std::span<const std::uint8_t> digits);

/// Non-overlapping 4×4 average pooling of a 28×28 image, row-major → 49 values.
std::vector<double> downsample_7x7(std::span<const double> image);

/// Binary-class image dataset: x = pixels/255 as [1×28×28], z = 7×7 block means, m = 0.
Dataset make_binary_mnist(const IdxImages& images, std::span<const std::uint8_t> digits);

// ---- text -------------------------------------------------------------------

const std::vector<std::string>& default_stopwords();
std::vector<std::string> read_word_list(const std::filesystem::path& path);

/// Lowercased alphanumeric runs; apostrophes inside a word are kept.
std::vector<std::string> tokenize(std::string_view text);

struct TextOptions {
  std::size_t min_freq = 2;
  std::vector<std::string> stopwords = default_stopwords();
  bool counts = false;  // bag-of-words counts instead of presence
};

/// Corpus lines are `label<TAB>text`. Stopwords are dropped from token
/// sequences; tokens outside the vocabulary become the OOV symbol, whose
/// bag-of-words dimension is always zero (and therefore always masked).
Dataset build_text_dataset(std::istream& corpus, const TextOptions& options = {});
Dataset build_text_dataset(const std::filesystem::path& path, const TextOptions& options = {});

// ---- synthetic --------------------------------------------------------------

struct SyntheticInfo {
  std::size_t feature_a;
  std::size_t feature_b;
};

/// Context-dependent polarity: x = [z, onehot(context)], z ~ N(0, I_d).
/// Context A: y = sign(z[a]); context B: y = sign(−z[b]).
Dataset make_synthetic(std::size_t n, std::size_t d, std::uint64_t seed,
                       SyntheticInfo* info = nullptr);

// ---- splitting and manifests ------------------------------------------------

/// Deterministic shuffle by `seed`, then consecutive slices sized by `fractions`
/// (the last slice takes any rounding remainder).
std::vector<Dataset> split_dataset(const Dataset& dataset, std::span<const double> fractions,
                                   std::uint64_t seed);

struct Splits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Reads a JSON dataset manifest and materializes its three splits. Relative
/// paths resolve against the manifest's directory.
Splits load_manifest(const std::filesystem::path& path);

/// FNV-1a 64 of a file's bytes.
std::uint64_t file_digest(const std::filesystem::path& path);

}  // namespace ngsll::data
