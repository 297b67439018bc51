#include <sstream>

#include "doctest.h"
#include "ngsll/errors.hpp"
#include "ngsll/render.hpp"

using namespace ngsll;

namespace {

model::Explanation explanation(std::vector<model::Explanation::Entry> entries) {
  model::Explanation e;
  e.entries = std::move(entries);
  return e;
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto at = text.find(needle); at != std::string::npos; at = text.find(needle, at + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("heatmap marks positive weights red and negative blue") {
  std::vector<double> z(49, 0.5);
  const auto e = explanation({{3, "(0,3)", 2.0}, {10, "(1,3)", -1.0}});
  const auto svg = render::svg_heatmap(z, e);
  CHECK(svg.find("<svg") == 0);
  CHECK(count(svg, "<rect") == 51);
  CHECK(count(svg, "class=\"selected\"") == 2);
  const auto red = svg.find("fill=\"#d62728\"");
  const auto blue = svg.find("fill=\"#1f77b4\"");
  REQUIRE(red != std::string::npos);
  REQUIRE(blue != std::string::npos);
  CHECK(svg.find("x=\"72\" y=\"0\"", svg.rfind("<rect", red)) < red);
  CHECK(svg.find("x=\"72\" y=\"24\"", svg.rfind("<rect", blue)) < blue);
  CHECK_THROWS_AS(render::svg_heatmap(std::vector<double>(48), e), DimensionError);
}

TEST_CASE("text highlighting greys out-of-vocabulary words") {
  std::istringstream corpus("p\tfunny film\nn\tdull film\np\tfunny\nn\tdull\n");
  const auto ds = data::build_text_dataset(corpus);
  const auto& v = *ds.vocabulary;
  data::Sample s;
  s.text = "A funny, dull & strange film";
  const auto e = explanation({{v.lookup("funny"), "funny", 0.8}, {v.lookup("dull"), "dull", -0.4}});
  const auto html = render::html_highlight(s, v, e);
  CHECK(html.find("<span class=\"pos\"") != std::string::npos);
  CHECK(html.find(">funny</span>") != std::string::npos);
  CHECK(html.find("<span class=\"neg\"") != std::string::npos);
  CHECK(html.find("<span class=\"oov\">strange</span>") != std::string::npos);
  CHECK(html.find(".oov{color:#999}") != std::string::npos);
  CHECK(html.find(">film<") == std::string::npos);  // in vocabulary, not selected
  CHECK(html.find("film</p>") != std::string::npos);
  CHECK(html.find("&amp;") != std::string::npos);
}

TEST_CASE("xml escaping") {
  CHECK(render::escape_xml("<a href='x'>&\"") == "&lt;a href=&#39;x&#39;&gt;&amp;&quot;");
}
