#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include <json.hpp>

#include "diffris/errors.hpp"
#include "diffris/png_io.hpp"
#include "diffris/synthdata.hpp"
#include "support.hpp"

using namespace diffris;
using namespace diffris::synthdata;

namespace {

bool has_color(const Image& img, int index, const std::array<double, 3>& color) {
  for (int c = 0; c < 3; ++c) {
    if (img.pixels(index, c) != color[c]) return false;
  }
  return true;
}

SceneSpec lone(Object o, int size) {
  SceneSpec s;
  s.height = size;
  s.width = size;
  s.objects = {o};
  s.expression.color = o.color;
  s.expression.shape = o.shape;
  return s;
}

}  // namespace

TEST_CASE("scenes are deterministic in the seed") {
  Config cfg;
  for (std::uint64_t seed : {0u, 1u, 77u}) CHECK(generate_scene(seed, cfg) == generate_scene(seed, cfg));
  CHECK_FALSE(generate_scene(1, cfg) == generate_scene(2, cfg));
}

TEST_CASE("a lone object is described by color and shape only") {
  Config cfg;
  cfg.min_objects = 1;
  cfg.max_objects = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_scene(seed, cfg);
    REQUIRE(s.objects.size() == 1);
    const Object& o = s.objects[0];
    CHECK(expression_text(s.expression) == "the " + to_string(o.color) + " " + to_string(o.shape));
  }
}

TEST_CASE("every generated expression resolves to exactly its referent") {
  Config cfg;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto s = generate_scene(seed, cfg);
    REQUIRE(s.objects.size() >= 1);
    REQUIRE(s.objects.size() <= 4);
    std::set<int> cells;
    for (const auto& o : s.objects) cells.insert(o.cell);
    CHECK(cells.size() == s.objects.size());
    const auto hits = resolve(s, s.expression);
    REQUIRE(hits.size() == 1);
    CHECK(hits[0] == s.referent);
  }
}

TEST_CASE("expressions tokenize within the vocabulary") {
  CHECK(vocabulary().size() == 64);
  Config cfg;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = generate_scene(seed, cfg);
    const auto tokens = tokenize(s.expression, cfg.max_tokens);
    CHECK(tokens.ids.size() == expression_words(s.expression).size());
    for (int id : tokens.ids) {
      CHECK(id > 1);
      CHECK(id < 64);
    }
  }
  CHECK(word_id("zebra") == word_id("<unk>"));
}

TEST_CASE("an empty scene is the background color") {
  Config cfg;
  SceneSpec s;
  const auto t = render(s, cfg);
  const auto bg = background_color();
  for (int i = 0; i < s.height * s.width; ++i) CHECK(has_color(t.image, i, bg));
  CHECK(t.mask.count() == 0);
}

TEST_CASE("rendered areas match the analytic shape areas") {
  Config cfg;
  cfg.height = 513;
  cfg.width = 513;
  cfg.raster_block = 1;
  const double r_large = 0.45 * 171.0;
  const double r_small = 0.3 * 171.0;
  struct Case {
    Shape shape;
    Size size;
    double area;
    double perimeter;
  };
  const Case cases[] = {
      {Shape::circle, Size::large, std::numbers::pi * r_large * r_large, 2 * std::numbers::pi * r_large},
      {Shape::square, Size::small, 4 * r_small * r_small, 8 * r_small},
      {Shape::triangle, Size::large, 2 * r_large * r_large, (2 + 2 * std::sqrt(5.0)) * r_large},
  };
  for (const auto& c : cases) {
    const auto t = render(lone({c.shape, Color::blue, c.size, 4}, 513), cfg);
    CHECK(std::abs(static_cast<double>(t.mask.count()) - c.area) <= c.perimeter + 4.0);
  }
}

TEST_CASE("mask pixels carry the referent color and match a distractor-free render") {
  Config cfg;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = generate_scene(seed, cfg);
    const auto t = render(s, cfg);
    const auto color = fill_color(s.objects[s.referent].color);
    SceneSpec alone = s;
    alone.objects = {s.objects[s.referent]};
    alone.referent = 0;
    const auto solo = render(alone, cfg);
    for (int i = 0; i < s.height * s.width; ++i) {
      CHECK(solo.mask.values[i] == (has_color(solo.image, i, color) ? 1 : 0));
      if (t.mask.values[i]) CHECK(has_color(t.image, i, color));
    }
    CHECK(t.mask == solo.mask);
    CHECK(t.mask.count() > 0);
  }
}

TEST_CASE("block rasterization keeps shapes on the block lattice") {
  Config cfg;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto t = render(generate_scene(seed, cfg), cfg);
    for (int y = 0; y < t.mask.height; ++y) {
      for (int x = 0; x < t.mask.width; ++x) {
        CHECK(t.mask.at(y, x) == t.mask.at(y - y % 4, x - x % 4));
      }
    }
  }
}

TEST_CASE("invalid generator settings are parameter errors") {
  Config cfg;
  cfg.shapes.clear();
  CHECK_THROWS_AS(generate_scene(1, cfg), ParameterError);
  cfg = Config{};
  cfg.colors.clear();
  CHECK_THROWS_AS(validate(cfg), ParameterError);
  cfg = Config{};
  cfg.raster_block = 3;
  CHECK_THROWS_AS(validate(cfg), ParameterError);
  CHECK_THROWS_AS(generate_samples(0, 1, Config{}), ParameterError);
}

TEST_CASE("dataset directories are byte-identical and splits disjoint") {
  Config cfg;
  test::TempDir a("split_a");
  test::TempDir b("split_b");
  const auto ma = generate_split(32, 7, cfg, a.path());
  const auto mb = generate_split(32, 7, cfg, b.path());
  const std::string manifest = test::read_file(ma);
  CHECK(manifest == test::read_file(mb));

  std::size_t rows = 0;
  std::set<std::string> train;
  std::set<std::string> held_out;
  std::istringstream lines(manifest);
  for (std::string line; std::getline(lines, line);) {
    ++rows;
    const auto j = nlohmann::json::parse(line);
    const std::string id = j.at("id");
    (j.at("split") == "train" ? train : held_out).insert(id);
    for (const char* sub : {"images", "masks"}) {
      const auto rel = std::filesystem::path(sub) / (id + ".png");
      CHECK(test::read_file(a.path() / rel) == test::read_file(b.path() / rel));
    }
  }
  CHECK(rows == 32);
  for (const auto& id : train) CHECK(held_out.count(id) == 0);

  const auto loaded = load_split(a.path(), "", cfg.max_tokens);
  REQUIRE(loaded.size() == 32);
  const auto fresh = generate_samples(32, 7, cfg);
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].triplet.mask == fresh[i].triplet.mask);
    CHECK(loaded[i].triplet.expression.ids == fresh[i].triplet.expression.ids);
    CHECK(loaded[i].scene == fresh[i].scene);
    CHECK((loaded[i].triplet.image.pixels - fresh[i].triplet.image.pixels).cwiseAbs().maxCoeff() < 0.5 / 255.0);
  }
}

TEST_CASE("unwritable output is an I/O error") {
  test::TempDir dir("unwritable");
  const auto blocker = dir.path() / "file";
  std::ofstream(blocker) << "x";
  CHECK_THROWS_AS(generate_split(2, 1, Config{}, blocker / "out"), IoError);
}

TEST_CASE("scene JSON round trip and PNG mask round trip") {
  Config cfg;
  const auto s = generate_scene(42, cfg);
  CHECK(scene_from_json(scene_to_json(s)) == s);

  test::TempDir dir("png");
  const auto t = render(s, cfg);
  png::write_mask(dir.path() / "m.png", t.mask);
  CHECK(png::read_mask(dir.path() / "m.png") == t.mask);
  png::write_image(dir.path() / "i.png", t.image);
  const Image back = png::read_image(dir.path() / "i.png");
  CHECK((back.pixels - t.image.pixels).cwiseAbs().maxCoeff() < 0.5 / 255.0 + 1e-12);
}
