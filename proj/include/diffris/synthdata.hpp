#pragma once

// Synthetic referring-segmentation triplets: flat-colored shapes on a 3x3
// grid, an expression that singles out one of them, and its exact mask.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffris/backbones.hpp"
#include "diffris/types.hpp"

namespace diffris::synthdata {

enum class Shape { circle, square, triangle };
enum class Color { red, green, blue, yellow };
enum class Size { small, large };
enum class Relation { left_of, right_of, above, below };

struct Object {
  Shape shape = Shape::circle;
  Color color = Color::red;
  Size size = Size::large;
  int cell = 0;  // row-major index into the 3x3 grid

  [[nodiscard]] int row() const { return cell / 3; }
  [[nodiscard]] int col() const { return cell % 3; }
  friend bool operator==(const Object&, const Object&) = default;
};

struct Expression {
  std::optional<Size> size;
  Color color = Color::red;
  Shape shape = Shape::circle;
  std::optional<Relation> relation;
  Color anchor_color = Color::red;
  Shape anchor_shape = Shape::circle;
  friend bool operator==(const Expression&, const Expression&) = default;
};

struct SceneSpec {
  int height = 64;
  int width = 64;
  std::vector<Object> objects;
  int referent = 0;
  Expression expression;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Triplet {
  Image image;
  backbones::TokenSequence expression;
  BinaryMask mask;
};

struct Config {
  int height = 64;
  int width = 64;
  int min_objects = 1;
  int max_objects = 4;
  double hard_negative_prob = 0.5;
  std::vector<Shape> shapes{Shape::circle, Shape::square, Shape::triangle};
  std::vector<Color> colors{Color::red, Color::green, Color::blue, Color::yellow};
  double val_fraction = 0.2;
  double test_fraction = 0.1;
  int max_tokens = 20;
  int max_attempts = 1000;
  // Shapes are rasterized on a lattice of raster_block x raster_block pixel
  // blocks; 4 matches the decoder's output stride. 1 rasterizes per pixel.
  int raster_block = 4;
};

void validate(const Config& cfg);

// Fixed 64-entry word list; index 0 is the padding word.
const std::vector<std::string>& vocabulary();
int word_id(const std::string& word);

std::vector<std::string> expression_words(const Expression& expr);
std::string expression_text(const Expression& expr);
backbones::TokenSequence tokenize(const Expression& expr, int max_tokens);

bool attributes_match(const Object& obj, std::optional<Size> size, Color color, Shape shape);
bool relation_holds(Relation rel, const Object& subject, const Object& anchor);
// Indices of every object the expression describes.
std::vector<int> resolve(const SceneSpec& scene, const Expression& expr);

SceneSpec generate_scene(std::uint64_t seed, const Config& cfg);

// 8-bit sRGB fill color as [0, 1] doubles.
std::array<double, 3> fill_color(Color c);
std::array<double, 3> background_color();

// Coverage test for pixel (y, x) of an H x W canvas: the center of the
// block containing the pixel must lie inside the shape.
bool covers(const Object& obj, int height, int width, int y, int x, int block = 1);
Triplet render(const SceneSpec& scene, const Config& cfg);

struct Sample {
  std::string id;
  std::string split;
  Triplet triplet;
  SceneSpec scene;
};

// Same split assignment generate_split uses.
std::string split_for(std::uint64_t seed, std::uint64_t index, const Config& cfg);

// In-memory dataset, sample i seeded from (seed, i).
std::vector<Sample> generate_samples(int n, std::uint64_t seed, const Config& cfg);

// Writes images/, masks/ and manifest.jsonl under `out`; returns the
// manifest path.
std::filesystem::path generate_split(int n, std::uint64_t seed, const Config& cfg,
                                     const std::filesystem::path& out);

// Loads the samples of one split ("" for all) from a dataset directory.
std::vector<Sample> load_split(const std::filesystem::path& dir, const std::string& split, int max_tokens);

nlohmann::json scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const nlohmann::json& j);

std::string to_string(Shape s);
std::string to_string(Color c);
std::string to_string(Size s);
Shape parse_shape(const std::string& s);
Color parse_color(const std::string& s);

}  // namespace diffris::synthdata
