#include "ngsll/render.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_map>

namespace ngsll::render {

namespace {

std::string fixed(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

const char* polarity_color(double w) { return w >= 0.0 ? "#d62728" : "#1f77b4"; }

}  // namespace

std::string escape_xml(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string svg_heatmap(std::span<const double> z, const model::Explanation& explanation,
                        const SvgOptions& options) {
  if (z.size() != options.rows * options.cols) {
    throw DimensionError("svg_heatmap: " + std::to_string(z.size()) + " values for a " +
                         std::to_string(options.rows) + "x" + std::to_string(options.cols) +
                         " grid");
  }
  double zmax = 0.0;
  for (double v : z) zmax = std::max(zmax, std::abs(v));
  double wmax = 0.0;
  for (const auto& e : explanation.entries) wmax = std::max(wmax, std::abs(e.weight));

  const std::size_t width = options.cols * options.cell, height = options.rows * options.cell;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  for (std::size_t r = 0; r < options.rows; ++r) {
    for (std::size_t c = 0; c < options.cols; ++c) {
      const double v = z[r * options.cols + c];
      const int grey = 255 - static_cast<int>(std::lround(zmax > 0 ? 255.0 * std::abs(v) / zmax : 0));
      svg << "  <rect x=\"" << c * options.cell << "\" y=\"" << r * options.cell << "\" width=\""
          << options.cell << "\" height=\"" << options.cell << "\" fill=\"rgb(" << grey << ','
          << grey << ',' << grey << ")\"/>\n";
    }
  }
  for (const auto& e : explanation.entries) {
    if (e.index >= z.size()) continue;
    const std::size_t r = e.index / options.cols, c = e.index % options.cols;
    const double opacity = wmax > 0 ? 0.25 + 0.6 * std::abs(e.weight) / wmax : 0.5;
    svg << "  <rect class=\"selected\" x=\"" << c * options.cell << "\" y=\"" << r * options.cell
        << "\" width=\"" << options.cell << "\" height=\"" << options.cell << "\" fill=\""
        << polarity_color(e.weight) << "\" fill-opacity=\"" << fixed(opacity, 2)
        << "\"><title>" << escape_xml(e.name) << " w=" << fixed(e.weight, 4)
        << "</title></rect>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string html_highlight(const data::Sample& sample, const data::Vocabulary& vocabulary,
                           const model::Explanation& explanation) {
  std::unordered_map<std::size_t, double> selected;
  double wmax = 0.0;
  for (const auto& e : explanation.entries) {
    selected[e.index] = e.weight;
    wmax = std::max(wmax, std::abs(e.weight));
  }
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><style>"
          ".oov{color:#999}.pos{background:rgba(214,39,40,var(--a))}"
          ".neg{background:rgba(31,119,180,var(--a))}</style></head><body>\n<p>";
  // Walk the raw text so punctuation and spacing survive; each word-like run
  // is looked up the same way the tokenizer would see it.
  const std::string& text = sample.text;
  std::size_t i = 0;
  auto word_char = [](unsigned char ch) { return std::isalnum(ch) != 0; };
  while (i < text.size()) {
    if (!word_char(static_cast<unsigned char>(text[i]))) {
      html << escape_xml(std::string_view(&text[i], 1));
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() &&
           (word_char(static_cast<unsigned char>(text[j])) ||
            (text[j] == '\'' && j + 1 < text.size() &&
             word_char(static_cast<unsigned char>(text[j + 1]))))) {
      ++j;
    }
    const std::string_view word(&text[i], j - i);
    const auto tokens = data::tokenize(word);
    const std::size_t id = tokens.empty() ? vocabulary.oov() : vocabulary.lookup(tokens.front());
    const auto hit = selected.find(id);
    if (id == vocabulary.oov()) {
      html << "<span class=\"oov\">" << escape_xml(word) << "</span>";
    } else if (hit != selected.end()) {
      const double a = wmax > 0 ? 0.25 + 0.6 * std::abs(hit->second) / wmax : 0.5;
      html << "<span class=\"" << (hit->second >= 0 ? "pos" : "neg") << "\" style=\"--a:"
           << fixed(a, 2) << "\" title=\"w=" << fixed(hit->second, 4) << "\">" << escape_xml(word)
           << "</span>";
    } else {
      html << escape_xml(word);
    }
    i = j;
  }
  html << "</p>\n</body></html>\n";
  return html.str();
}

}  // namespace ngsll::render
