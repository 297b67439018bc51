#pragma once

// Static renderings of an explanation: an SVG heatmap for grid-shaped z
// (images) and highlighted HTML for text.

#include <cstddef>
#include <span>
#include <string>

#include "ngsll/data.hpp"
#include "ngsll/model.hpp"

namespace ngsll::render {

struct SvgOptions {
  std::size_t rows = 7;
  std::size_t cols = 7;
  std::size_t cell = 24;  // pixels per cell
};

/// Grey cells show z; selected cells are overlaid red (positive weight) or
/// blue (negative), opacity scaled by |w| relative to the largest selected weight.
std::string svg_heatmap(std::span<const double> z, const model::Explanation& explanation,
                        const SvgOptions& options = {});

/// The sample's text with selected tokens highlighted red/blue and
/// out-of-vocabulary tokens greyed out.
std::string html_highlight(const data::Sample& sample, const data::Vocabulary& vocabulary,
                           const model::Explanation& explanation);

std::string escape_xml(std::string_view text);

}  // namespace ngsll::render
