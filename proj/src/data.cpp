#include "ngsll/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace ngsll::data {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) {
    throw FormatError("IDX header truncated", bytes.size());
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::string hex_magic(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

// Uniform index in [0, n) without modulo bias; portable across standard libraries.
std::size_t uniform_index(gate::Rng& rng, std::size_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

double standard_normal(gate::Rng& rng) {
  // Box–Muller; u1 is kept away from 0.
  const double u1 = 1.0 - gate::uniform01(rng);
  const double u2 = gate::uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace

const char* to_string(Modality modality) {
  switch (modality) {
    case Modality::kImage:
      return "image";
    case Modality::kText:
      return "text";
    case Modality::kDense:
      return "dense";
  }
  return "dense";
}

Modality parse_modality(std::string_view text) {
  if (text == "image") return Modality::kImage;
  if (text == "text") return Modality::kText;
  if (text == "dense") return Modality::kDense;
  throw ContractError("unknown modality '" + std::string(text) + "'");
}

// ---- Vocabulary ---------------------------------------------------------------

Vocabulary::Vocabulary() { add(kOovSymbol); }

std::size_t Vocabulary::add(std::string_view token) {
  auto [it, inserted] = index_.emplace(std::string(token), tokens_.size());
  if (inserted) tokens_.emplace_back(token);
  return it->second;
}

std::size_t Vocabulary::lookup(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? oov() : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) != 0;
}

Dataset Dataset::header() const {
  Dataset h;
  h.modality = modality;
  h.x_shape = x_shape;
  h.d = d;
  h.num_classes = num_classes;
  h.feature_names = feature_names;
  h.class_names = class_names;
  h.vocabulary = vocabulary;
  return h;
}

// ---- IDX ----------------------------------------------------------------------

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxImageMagic) {
    throw FormatError("IDX image file has magic " + hex_magic(magic) + ", expected " +
                      hex_magic(kIdxImageMagic), 0);
  }
  IdxImages images;
  images.count = read_be32(bytes, 4);
  images.rows = read_be32(bytes, 8);
  images.cols = read_be32(bytes, 12);
  const std::size_t payload = images.count * images.rows * images.cols;
  if (bytes.size() < 16 + payload) {
    throw FormatError("IDX image payload truncated: need " + std::to_string(16 + payload) +
                      " bytes, have " + std::to_string(bytes.size()), bytes.size());
  }
  images.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(payload));
  return images;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxLabelMagic) {
    throw FormatError("IDX label file has magic " + hex_magic(magic) + ", expected " +
                      hex_magic(kIdxLabelMagic), 0);
  }
  const std::size_t count = read_be32(bytes, 4);
  if (bytes.size() < 8 + count) {
    throw FormatError("IDX label payload truncated: need " + std::to_string(8 + count) +
                      " bytes, have " + std::to_string(bytes.size()), bytes.size());
  }
  return std::vector<std::uint8_t>(bytes.begin() + 8,
                                   bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count));
}

IdxImages read_idx_images(const std::filesystem::path& path) {
  return parse_idx_images(read_file(path));
}

std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  return parse_idx_labels(read_file(path));
}

std::vector<std::uint8_t> encode_idx_images(const IdxImages& images) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.pixels.size());
  write_be32(out, kIdxImageMagic);
  write_be32(out, static_cast<std::uint32_t>(images.count));
  write_be32(out, static_cast<std::uint32_t>(images.rows));
  write_be32(out, static_cast<std::uint32_t>(images.cols));
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  write_be32(out, kIdxLabelMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

int binarize_label(int digit) {
  if (digit < 0 || digit > 9) throw ContractError("digit out of range: " + std::to_string(digit));
  return digit <= 4 ? -1 : 1;
}

std::vector<int> binarize_labels(std::span<const std::uint8_t> digits) {
  std::vector<int> out;
  out.reserve(digits.size());
  for (std::uint8_t d : digits) out.push_back(binarize_label(d));
  return out;
}

std::vector<double> downsample_7x7(std::span<const double> image) {
  if (image.size() != 28 * 28) {
    throw DimensionError("downsample_7x7: expected 784 pixels, got " +
                         std::to_string(image.size()));
  }
  std::vector<double> z(49, 0.0);
  for (std::size_t by = 0; by < 7; ++by) {
    for (std::size_t bx = 0; bx < 7; ++bx) {
      double acc = 0.0;
      for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) acc += image[(by * 4 + y) * 28 + bx * 4 + x];
      }
      z[by * 7 + bx] = acc / 16.0;
    }
  }
  return z;
}

Dataset make_binary_mnist(const IdxImages& images, std::span<const std::uint8_t> digits) {
  if (images.rows != 28 || images.cols != 28) {
    throw DimensionError("binary MNIST expects 28x28 images, got " + std::to_string(images.rows) +
                         "x" + std::to_string(images.cols));
  }
  if (digits.size() != images.count) {
    throw DimensionError("image count " + std::to_string(images.count) +
                         " does not match label count " + std::to_string(digits.size()));
  }
  Dataset ds;
  ds.modality = Modality::kImage;
  ds.x_shape = {1, 28, 28};
  ds.d = 49;
  ds.num_classes = 2;
  ds.class_names = {"0-4", "5-9"};
  for (std::size_t r = 0; r < 7; ++r) {
    for (std::size_t c = 0; c < 7; ++c) {
      ds.feature_names.push_back("r" + std::to_string(r) + "c" + std::to_string(c));
    }
  }
  ds.samples.reserve(images.count);
  constexpr std::size_t kPixels = 28 * 28;
  for (std::size_t i = 0; i < images.count; ++i) {
    Sample s;
    s.id = i;
    s.x.resize(kPixels);
    for (std::size_t p = 0; p < kPixels; ++p) {
      s.x[p] = images.pixels[i * kPixels + p] / 255.0;
    }
    s.z = downsample_7x7(s.x);
    s.label = binarize_label(digits[i]);
    s.mask = gate::MaskVector(49);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---- text ---------------------------------------------------------------------

const std::vector<std::string>& default_stopwords() {
  static const std::vector<std::string> words = {
      "a",       "about",   "above",  "after",  "again",   "against", "all",     "am",
      "an",      "and",     "any",    "are",    "as",      "at",      "be",      "because",
      "been",    "before",  "being",  "below",  "between", "both",    "but",     "by",
      "can",     "could",   "did",    "do",     "does",    "doing",   "down",    "during",
      "each",    "few",     "for",    "from",   "further", "had",     "has",     "have",
      "having",  "he",      "her",    "here",   "hers",    "herself", "him",     "himself",
      "his",     "i",       "if",     "in",     "into",    "is",      "it",      "its",
      "itself",  "just",    "me",     "more",   "most",    "my",      "myself",  "of",
      "off",     "on",      "once",   "only",   "or",      "other",   "our",     "ours",
      "ourselves", "out",   "over",   "own",    "s",       "same",    "she",     "should",
      "so",      "some",    "such",   "t",      "than",    "that",    "the",     "their",
      "theirs",  "them",    "themselves", "then", "there",  "these",   "they",    "this",
      "those",   "through", "to",     "too",    "under",   "until",   "up",      "very",
      "was",     "we",      "were",   "what",   "when",    "where",   "which",   "while",
      "who",     "whom",    "why",    "will",   "with",    "would",   "you",     "your",
      "yours",   "yourself", "yourselves"};
  return words;
}

std::vector<std::string> read_word_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open word list " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    for (auto& w : tokenize(line)) words.push_back(std::move(w));
  }
  return words;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto word_char = [](unsigned char c) { return std::isalnum(c) || c >= 0x80; };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (word_char(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '\'' && !current.empty() && i + 1 < text.size() &&
               word_char(static_cast<unsigned char>(text[i + 1]))) {
      current.push_back('\'');
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

Dataset build_text_dataset(std::istream& corpus, const TextOptions& options) {
  struct Record {
    std::string label;
    std::string text;
    std::vector<std::string> words;  // stopwords removed
  };
  const std::set<std::string> stop(options.stopwords.begin(), options.stopwords.end());
  std::vector<Record> records;
  std::map<std::string, std::size_t> freq;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(corpus, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw FormatError("corpus line " + std::to_string(line_no) +
                        " is not 'label<TAB>text'", line_no);
    }
    Record r;
    r.label = line.substr(0, tab);
    r.text = line.substr(tab + 1);
    for (auto& tok : tokenize(r.text)) {
      if (stop.count(tok)) continue;
      ++freq[tok];
      r.words.push_back(std::move(tok));
    }
    records.push_back(std::move(r));
  }
  if (records.empty()) throw ContractError("text corpus has no records");

  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : freq) {
    if (n >= options.min_freq && tok != Vocabulary::kOovSymbol) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary vocab;
  for (const auto& [tok, n] : kept) vocab.add(tok);
  if (vocab.size() <= 1) {
    throw ContractError("text vocabulary is empty after removing stopwords and words seen fewer "
                        "than " + std::to_string(options.min_freq) + " times");
  }

  std::set<std::string> labels;
  for (const auto& r : records) labels.insert(r.label);
  if (labels.size() < 2) throw ContractError("text corpus needs at least two distinct labels");

  Dataset ds;
  ds.modality = Modality::kText;
  ds.d = vocab.size();
  ds.num_classes = labels.size();
  ds.class_names.assign(labels.begin(), labels.end());
  ds.feature_names = vocab.tokens();
  std::map<std::string, int> class_index;
  for (std::size_t i = 0; i < ds.class_names.size(); ++i) {
    class_index[ds.class_names[i]] = static_cast<int>(i);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Record& r = records[i];
    Sample s;
    s.id = i;
    s.text = r.text;
    s.z.assign(ds.d, 0.0);
    for (const auto& w : r.words) {
      const std::size_t idx = vocab.lookup(w);
      s.tokens.push_back(idx);
      if (idx == vocab.oov()) continue;
      s.z[idx] = options.counts ? s.z[idx] + 1.0 : 1.0;
    }
    if (s.tokens.empty()) s.tokens.push_back(vocab.oov());
    s.mask = gate::MaskVector::from_features(s.z);
    const int cls = class_index.at(r.label);
    s.label = ds.binary() ? (cls == 0 ? -1 : 1) : cls;
    ds.samples.push_back(std::move(s));
  }
  ds.vocabulary = std::move(vocab);
  return ds;
}

Dataset build_text_dataset(const std::filesystem::path& path, const TextOptions& options) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  return build_text_dataset(in, options);
}

// ---- synthetic ----------------------------------------------------------------

Dataset make_synthetic(std::size_t n, std::size_t d, std::uint64_t seed, SyntheticInfo* info) {
  if (d < 4) throw ContractError("make_synthetic: d must be at least 4");
  gate::Rng rng(seed);
  const std::size_t a = uniform_index(rng, d);
  std::size_t b = uniform_index(rng, d - 1);
  if (b >= a) ++b;
  if (info != nullptr) *info = {a, b};

  Dataset ds;
  ds.modality = Modality::kDense;
  ds.x_shape = {d + 2};
  ds.d = d;
  ds.num_classes = 2;
  ds.class_names = {"negative", "positive"};
  for (std::size_t j = 0; j < d; ++j) ds.feature_names.push_back("f" + std::to_string(j));
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = i;
    const bool context_a = gate::uniform01(rng) < 0.5;
    s.z.resize(d);
    for (double& v : s.z) {
      do {
        v = standard_normal(rng);
      } while (v == 0.0);
    }
    s.x = s.z;
    s.x.push_back(context_a ? 1.0 : 0.0);
    s.x.push_back(context_a ? 0.0 : 1.0);
    const std::size_t j = context_a ? a : b;
    const double signal = context_a ? s.z[j] : -s.z[j];
    s.label = signal > 0.0 ? 1 : -1;
    s.relevant_feature = j;
    s.mask = gate::MaskVector(d);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---- splitting ------------------------------------------------------------------

std::vector<Dataset> split_dataset(const Dataset& dataset, std::span<const double> fractions,
                                   std::uint64_t seed) {
  if (fractions.empty()) throw ContractError("split_dataset: no fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ContractError("split_dataset: negative fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ContractError("split_dataset: fractions sum to " + std::to_string(total) +
                        ", expected 1");
  }
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  gate::Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }
  std::vector<Dataset> parts;
  std::size_t begin = 0;
  for (std::size_t p = 0; p < fractions.size(); ++p) {
    const std::size_t end =
        p + 1 == fractions.size()
            ? order.size()
            : std::min(order.size(),
                       begin + static_cast<std::size_t>(std::llround(
                                   fractions[p] * static_cast<double>(dataset.size()))));
    Dataset part = dataset.header();
    part.samples.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) part.samples.push_back(dataset.samples[order[i]]);
    parts.push_back(std::move(part));
    begin = end;
  }
  return parts;
}

std::uint64_t file_digest(const std::filesystem::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : read_file(path)) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Splits load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("dataset manifest is not valid JSON: " + std::string(e.what()),
                      e.byte);
  }
  const auto base = path.parent_path();
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) {
      throw ContractError("dataset manifest " + path.string() + " is missing field '" + key + "'");
    }
    return j.at(key);
  };
  auto resolve = [&](const char* key) {
    std::filesystem::path p = field(key).get<std::string>();
    return p.is_absolute() ? p : base / p;
  };
  const std::string kind = field("kind").get<std::string>();
  const std::uint64_t split_seed = j.value("split_seed", std::uint64_t{0});

  auto three_way = [&](const Dataset& all) {
    std::vector<double> fractions = j.value("fractions", std::vector<double>{0.8, 0.1, 0.1});
    if (fractions.size() != 3) throw ContractError("manifest 'fractions' must have 3 entries");
    auto parts = split_dataset(all, fractions, split_seed);
    return Splits{std::move(parts[0]), std::move(parts[1]), std::move(parts[2])};
  };

  if (kind == "mnist") {
    const auto train_images = read_idx_images(resolve("train_images"));
    const auto train_labels = read_idx_labels(resolve("train_labels"));
    const auto test_images = read_idx_images(resolve("test_images"));
    const auto test_labels = read_idx_labels(resolve("test_labels"));
    Dataset train_pool = make_binary_mnist(train_images, train_labels);
    Dataset test_pool = make_binary_mnist(test_images, test_labels);
    const std::size_t n_train = j.value("train_count", train_pool.size());
    const std::size_t n_val = j.value("validation_count", std::size_t{0});
    const std::size_t n_test = j.value("test_count", test_pool.size());
    if (n_train + n_val > train_pool.size() || n_test > test_pool.size()) {
      throw ContractError("manifest requests more MNIST samples than the IDX files hold");
    }
    const double pool = static_cast<double>(train_pool.size());
    const double f_train = static_cast<double>(n_train) / pool;
    const double f_val = static_cast<double>(n_val) / pool;
    const std::vector<double> fr{f_train, f_val, std::max(0.0, 1.0 - f_train - f_val)};
    auto parts = split_dataset(train_pool, fr, split_seed);
    parts[0].samples.resize(std::min(parts[0].size(), n_train));
    parts[1].samples.resize(std::min(parts[1].size(), n_val));
    Dataset test = test_pool.header();
    test.samples.assign(test_pool.samples.begin(),
                        test_pool.samples.begin() + static_cast<std::ptrdiff_t>(n_test));
    return Splits{std::move(parts[0]), std::move(parts[1]), std::move(test)};
  }
  if (kind == "text") {
    TextOptions opts;
    opts.min_freq = j.value("min_freq", std::size_t{2});
    opts.counts = j.value("counts", false);
    if (j.contains("stopwords")) opts.stopwords = read_word_list(resolve("stopwords"));
    return three_way(build_text_dataset(resolve("corpus"), opts));
  }
  if (kind == "synthetic") {
    const std::size_t n = field("n").get<std::size_t>();
    const std::size_t d = field("d").get<std::size_t>();
    return three_way(make_synthetic(n, d, j.value("seed", std::uint64_t{0})));
  }
  throw ContractError("dataset manifest has unknown kind '" + kind + "'");
}

}  // namespace ngsll::data
