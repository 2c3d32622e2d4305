#include "diffris/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "diffris/errors.hpp"
#include "diffris/params.hpp"
#include "diffris/png_io.hpp"

namespace diffris::synthdata {

namespace {

constexpr std::uint64_t kSplitSalt = 0x73706c6974ULL;

const std::vector<std::string> kWords = {
    "<pad>", "<unk>",  "the",     "small",   "large",    "red",      "green",  "blue",
    "yellow", "circle", "square",  "triangle", "left",   "right",    "of",     "above",
    "below",  "a",      "object",  "shape",   "big",      "little",   "tiny",   "huge",
    "orange", "purple", "white",   "black",   "gray",     "pink",     "brown",  "cyan",
    "star",   "hexagon", "diamond", "ring",   "cross",    "top",      "bottom", "middle",
    "center", "corner", "near",    "next",    "to",       "beside",   "between", "and",
    "on",     "in",     "under",   "over",    "far",      "one",      "two",    "three",
    "that",   "is",     "with",    "which",   "leftmost", "rightmost", "upper", "lower"};

Object random_object(Rng& rng, const Config& cfg) {
  Object o;
  o.shape = cfg.shapes[rng.below(cfg.shapes.size())];
  o.color = cfg.colors[rng.below(cfg.colors.size())];
  o.size = rng.below(2) == 0 ? Size::small : Size::large;
  return o;
}

// Copies the referent and changes exactly one attribute that has an
// alternative value.
Object hard_negative(Rng& rng, const Config& cfg, const Object& ref) {
  Object o = ref;
  std::vector<int> options;
  if (cfg.shapes.size() > 1) options.push_back(0);
  if (cfg.colors.size() > 1) options.push_back(1);
  options.push_back(2);
  switch (options[rng.below(options.size())]) {
    case 0: {
      std::vector<Shape> others;
      for (Shape s : cfg.shapes) if (s != ref.shape) others.push_back(s);
      o.shape = others[rng.below(others.size())];
      break;
    }
    case 1: {
      std::vector<Color> others;
      for (Color c : cfg.colors) if (c != ref.color) others.push_back(c);
      o.color = others[rng.below(others.size())];
      break;
    }
    default:
      o.size = ref.size == Size::small ? Size::large : Size::small;
  }
  return o;
}

// Simplest expression that singles out the referent, or nullopt.
std::optional<Expression> describe(const SceneSpec& scene) {
  const Object& ref = scene.objects[scene.referent];
  auto unique = [&](const Expression& e) {
    const auto hits = resolve(scene, e);
    return hits.size() == 1 && hits[0] == scene.referent;
  };
  Expression e;
  e.color = ref.color;
  e.shape = ref.shape;
  if (unique(e)) return e;
  e.size = ref.size;
  if (unique(e)) return e;
  constexpr std::array kRelations{Relation::left_of, Relation::right_of, Relation::above, Relation::below};
  for (std::size_t j = 0; j < scene.objects.size(); ++j) {
    if (static_cast<int>(j) == scene.referent) continue;
    const Object& anchor = scene.objects[j];
    for (Relation rel : kRelations) {
      if (!relation_holds(rel, ref, anchor)) continue;
      Expression r;
      r.color = ref.color;
      r.shape = ref.shape;
      r.relation = rel;
      r.anchor_color = anchor.color;
      r.anchor_shape = anchor.shape;
      if (unique(r)) return r;
      r.size = ref.size;
      if (unique(r)) return r;
    }
  }
  return std::nullopt;
}

nlohmann::json object_to_json(const Object& o) {
  return {{"shape", to_string(o.shape)}, {"color", to_string(o.color)}, {"size", to_string(o.size)}, {"cell", o.cell}};
}

Size parse_size(const std::string& s) {
  if (s == "small") return Size::small;
  if (s == "large") return Size::large;
  throw ParameterError("unknown size '" + s + "'");
}

std::string relation_name(Relation r) {
  switch (r) {
    case Relation::left_of: return "left of";
    case Relation::right_of: return "right of";
    case Relation::above: return "above";
    case Relation::below: return "below";
  }
  return {};
}

Relation parse_relation(const std::string& s) {
  if (s == "left of") return Relation::left_of;
  if (s == "right of") return Relation::right_of;
  if (s == "above") return Relation::above;
  if (s == "below") return Relation::below;
  throw ParameterError("unknown relation '" + s + "'");
}

std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

}  // namespace

std::string to_string(Shape s) {
  switch (s) {
    case Shape::circle: return "circle";
    case Shape::square: return "square";
    case Shape::triangle: return "triangle";
  }
  return {};
}

std::string to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
  }
  return {};
}

std::string to_string(Size s) { return s == Size::small ? "small" : "large"; }

Shape parse_shape(const std::string& s) {
  if (s == "circle") return Shape::circle;
  if (s == "square") return Shape::square;
  if (s == "triangle") return Shape::triangle;
  throw ParameterError("unknown shape '" + s + "'");
}

Color parse_color(const std::string& s) {
  if (s == "red") return Color::red;
  if (s == "green") return Color::green;
  if (s == "blue") return Color::blue;
  if (s == "yellow") return Color::yellow;
  throw ParameterError("unknown color '" + s + "'");
}

void validate(const Config& cfg) {
  if (cfg.shapes.empty()) throw ParameterError("synthdata: at least one shape is required");
  if (cfg.colors.empty()) throw ParameterError("synthdata: at least one color is required");
  if (cfg.min_objects < 1 || cfg.max_objects > 4 || cfg.min_objects > cfg.max_objects) {
    throw ParameterError("synthdata: object count range must lie within [1, 4]");
  }
  if (cfg.height < 3 || cfg.width < 3 || cfg.height > 512 || cfg.width > 512) {
    throw ParameterError("synthdata: canvas must be between 3 and 512 pixels per side");
  }
  if (!(cfg.hard_negative_prob >= 0.0 && cfg.hard_negative_prob <= 1.0)) {
    throw ParameterError("synthdata: hard_negative_prob must lie in [0, 1]");
  }
  if (cfg.val_fraction < 0.0 || cfg.test_fraction < 0.0 || cfg.val_fraction + cfg.test_fraction > 1.0) {
    throw ParameterError("synthdata: split fractions must be non-negative and sum to at most 1");
  }
  if (cfg.max_tokens < 9) throw ParameterError("synthdata: max_tokens must allow 9-word expressions");
  if (cfg.max_attempts < 1) throw ParameterError("synthdata: max_attempts must be positive");
  if (cfg.raster_block < 1 || cfg.height % cfg.raster_block != 0 || cfg.width % cfg.raster_block != 0) {
    throw ParameterError("synthdata: raster_block must be positive and divide the canvas size");
  }
}

const std::vector<std::string>& vocabulary() { return kWords; }

int word_id(const std::string& word) {
  const auto it = std::find(kWords.begin(), kWords.end(), word);
  return it == kWords.end() ? 1 : static_cast<int>(it - kWords.begin());
}

std::vector<std::string> expression_words(const Expression& expr) {
  std::vector<std::string> words{"the"};
  if (expr.size) words.push_back(to_string(*expr.size));
  words.push_back(to_string(expr.color));
  words.push_back(to_string(expr.shape));
  if (expr.relation) {
    switch (*expr.relation) {
      case Relation::left_of: words.insert(words.end(), {"left", "of"}); break;
      case Relation::right_of: words.insert(words.end(), {"right", "of"}); break;
      case Relation::above: words.push_back("above"); break;
      case Relation::below: words.push_back("below"); break;
    }
    words.insert(words.end(), {"the", to_string(expr.anchor_color), to_string(expr.anchor_shape)});
  }
  return words;
}

std::string expression_text(const Expression& expr) {
  std::string out;
  for (const auto& w : expression_words(expr)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

backbones::TokenSequence tokenize(const Expression& expr, int max_tokens) {
  std::vector<int> ids;
  for (const auto& w : expression_words(expr)) ids.push_back(word_id(w));
  return backbones::TokenSequence::make(std::move(ids), max_tokens);
}

bool attributes_match(const Object& obj, std::optional<Size> size, Color color, Shape shape) {
  return obj.color == color && obj.shape == shape && (!size || obj.size == *size);
}

bool relation_holds(Relation rel, const Object& subject, const Object& anchor) {
  switch (rel) {
    case Relation::left_of: return subject.col() < anchor.col();
    case Relation::right_of: return subject.col() > anchor.col();
    case Relation::above: return subject.row() < anchor.row();
    case Relation::below: return subject.row() > anchor.row();
  }
  return false;
}

std::vector<int> resolve(const SceneSpec& scene, const Expression& expr) {
  std::vector<int> hits;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const Object& o = scene.objects[i];
    if (!attributes_match(o, expr.size, expr.color, expr.shape)) continue;
    bool ok = true;
    if (expr.relation) {
      ok = false;
      for (std::size_t j = 0; j < scene.objects.size() && !ok; ++j) {
        if (j == i) continue;
        const Object& a = scene.objects[j];
        ok = attributes_match(a, std::nullopt, expr.anchor_color, expr.anchor_shape) &&
             relation_holds(*expr.relation, o, a);
      }
    }
    if (ok) hits.push_back(static_cast<int>(i));
  }
  return hits;
}

SceneSpec generate_scene(std::uint64_t seed, const Config& cfg) {
  validate(cfg);
  Rng rng(seed);
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    SceneSpec scene;
    scene.height = cfg.height;
    scene.width = cfg.width;
    const int n = cfg.min_objects + static_cast<int>(rng.below(cfg.max_objects - cfg.min_objects + 1));
    std::array<int, 9> cells{};
    std::iota(cells.begin(), cells.end(), 0);
    for (int i = 8; i > 0; --i) std::swap(cells[i], cells[rng.below(i + 1)]);
    const Object ref = random_object(rng, cfg);
    scene.objects.push_back(ref);
    for (int k = 1; k < n; ++k) {
      scene.objects.push_back(rng.uniform() < cfg.hard_negative_prob ? hard_negative(rng, cfg, ref)
                                                                      : random_object(rng, cfg));
    }
    for (int k = 0; k < n; ++k) scene.objects[k].cell = cells[k];
    scene.referent = static_cast<int>(rng.below(n));
    std::swap(scene.objects[0], scene.objects[scene.referent]);
    if (auto expr = describe(scene)) {
      scene.expression = *expr;
      return scene;
    }
  }
  throw ContractViolation("generate_scene: no uniquely describable scene after " +
                          std::to_string(cfg.max_attempts) + " attempts");
}

std::array<double, 3> fill_color(Color c) {
  switch (c) {
    case Color::red: return {230 / 255.0, 25 / 255.0, 25 / 255.0};
    case Color::green: return {30 / 255.0, 200 / 255.0, 60 / 255.0};
    case Color::blue: return {40 / 255.0, 70 / 255.0, 230 / 255.0};
    case Color::yellow: return {240 / 255.0, 220 / 255.0, 30 / 255.0};
  }
  return {0.0, 0.0, 0.0};
}

std::array<double, 3> background_color() { return {128 / 255.0, 128 / 255.0, 128 / 255.0}; }

bool covers(const Object& obj, int height, int width, int y, int x, int block) {
  const double ch = height / 3.0;
  const double cw = width / 3.0;
  const double cy = (obj.row() + 0.5) * ch;
  const double cx = (obj.col() + 0.5) * cw;
  const double r = (obj.size == Size::large ? 0.45 : 0.3) * std::min(ch, cw);
  // Sample at the center of the pixel's block.
  const double py = (y / block) * block + 0.5 * block;
  const double px = (x / block) * block + 0.5 * block;
  const double dy = py - cy;
  const double dx = px - cx;
  switch (obj.shape) {
    case Shape::circle: return dx * dx + dy * dy <= r * r;
    case Shape::square: return std::abs(dx) <= r && std::abs(dy) <= r;
    case Shape::triangle: {
      // Apex up, base 2r wide at cy + r.
      const double t = py - (cy - r);
      return t >= 0.0 && t <= 2.0 * r && std::abs(dx) <= 0.5 * t;
    }
  }
  return false;
}

Triplet render(const SceneSpec& scene, const Config& cfg) {
  Triplet t;
  t.image.height = scene.height;
  t.image.width = scene.width;
  t.image.pixels.resize(static_cast<Eigen::Index>(scene.height) * scene.width, 3);
  const auto bg = background_color();
  for (Eigen::Index i = 0; i < t.image.pixels.rows(); ++i) {
    for (int c = 0; c < 3; ++c) t.image.pixels(i, c) = bg[c];
  }
  t.mask = BinaryMask(scene.height, scene.width);
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const Object& o = scene.objects[k];
    const auto color = fill_color(o.color);
    for (int y = 0; y < scene.height; ++y) {
      for (int x = 0; x < scene.width; ++x) {
        if (!covers(o, scene.height, scene.width, y, x, cfg.raster_block)) continue;
        for (int c = 0; c < 3; ++c) t.image.pixels(y * scene.width + x, c) = color[c];
        if (static_cast<int>(k) == scene.referent) t.mask.set(y, x, true);
      }
    }
  }
  if (!scene.objects.empty()) t.expression = tokenize(scene.expression, cfg.max_tokens);
  return t;
}

std::string split_for(std::uint64_t seed, std::uint64_t index, const Config& cfg) {
  const double u = Rng::derive(seed ^ kSplitSalt, index).uniform();
  if (u < cfg.val_fraction) return "val";
  if (u < cfg.val_fraction + cfg.test_fraction) return "test";
  return "train";
}

std::vector<Sample> generate_samples(int n, std::uint64_t seed, const Config& cfg) {
  if (n < 1) throw ParameterError("synthdata: sample count must be at least 1");
  validate(cfg);
  std::vector<Sample> samples;
  samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.id = sample_id(i);
    s.split = split_for(seed, i, cfg);
    s.scene = generate_scene(Rng::derive(seed, i).next(), cfg);
    s.triplet = render(s.scene, cfg);
    samples.push_back(std::move(s));
  }
  return samples;
}

std::filesystem::path generate_split(int n, std::uint64_t seed, const Config& cfg,
                                     const std::filesystem::path& out) {
  const auto samples = generate_samples(n, seed, cfg);
  std::error_code ec;
  std::filesystem::create_directories(out / "images", ec);
  if (!ec) std::filesystem::create_directories(out / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + out.string() + ": " + ec.message());
  const auto manifest_path = out / "manifest.jsonl";
  std::ofstream manifest(manifest_path, std::ios::binary | std::ios::trunc);
  if (!manifest) throw IoError("cannot write " + manifest_path.string());
  for (const auto& s : samples) {
    const std::string image_rel = "images/" + s.id + ".png";
    const std::string mask_rel = "masks/" + s.id + ".png";
    png::write_image(out / image_rel, s.triplet.image);
    png::write_mask(out / mask_rel, s.triplet.mask);
    nlohmann::json row;
    row["id"] = s.id;
    row["split"] = s.split;
    row["text"] = expression_text(s.scene.expression);
    row["tokens"] = s.triplet.expression.ids;
    row["image"] = image_rel;
    row["mask"] = mask_rel;
    row["scene"] = scene_to_json(s.scene);
    manifest << row.dump() << '\n';
  }
  manifest.flush();
  if (!manifest) throw IoError("failed writing " + manifest_path.string());
  return manifest_path;
}

std::vector<Sample> load_split(const std::filesystem::path& dir, const std::string& split, int max_tokens) {
  const auto manifest_path = dir / "manifest.jsonl";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  std::vector<Sample> samples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
      Sample s;
      s.id = row.at("id").get<std::string>();
      s.split = row.at("split").get<std::string>();
      if (!split.empty() && s.split != split) continue;
      s.scene = scene_from_json(row.at("scene"));
      s.triplet.image = png::read_image(dir / row.at("image").get<std::string>());
      s.triplet.mask = png::read_mask(dir / row.at("mask").get<std::string>());
      s.triplet.expression =
          backbones::TokenSequence::make(row.at("tokens").get<std::vector<int>>(), max_tokens);
      samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(manifest_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

nlohmann::json scene_to_json(const SceneSpec& scene) {
  nlohmann::json j;
  j["height"] = scene.height;
  j["width"] = scene.width;
  j["referent"] = scene.referent;
  j["objects"] = nlohmann::json::array();
  for (const auto& o : scene.objects) j["objects"].push_back(object_to_json(o));
  nlohmann::json e;
  e["size"] = scene.expression.size ? nlohmann::json(to_string(*scene.expression.size)) : nlohmann::json();
  e["color"] = to_string(scene.expression.color);
  e["shape"] = to_string(scene.expression.shape);
  if (scene.expression.relation) {
    e["relation"] = relation_name(*scene.expression.relation);
    e["anchor_color"] = to_string(scene.expression.anchor_color);
    e["anchor_shape"] = to_string(scene.expression.anchor_shape);
  } else {
    e["relation"] = nullptr;
  }
  j["expression"] = e;
  return j;
}

SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.referent = j.at("referent").get<int>();
  for (const auto& o : j.at("objects")) {
    Object obj;
    obj.shape = parse_shape(o.at("shape").get<std::string>());
    obj.color = parse_color(o.at("color").get<std::string>());
    obj.size = parse_size(o.at("size").get<std::string>());
    obj.cell = o.at("cell").get<int>();
    s.objects.push_back(obj);
  }
  const auto& e = j.at("expression");
  if (!e.at("size").is_null()) s.expression.size = parse_size(e.at("size").get<std::string>());
  s.expression.color = parse_color(e.at("color").get<std::string>());
  s.expression.shape = parse_shape(e.at("shape").get<std::string>());
  if (!e.at("relation").is_null()) {
    s.expression.relation = parse_relation(e.at("relation").get<std::string>());
    s.expression.anchor_color = parse_color(e.at("anchor_color").get<std::string>());
    s.expression.anchor_shape = parse_shape(e.at("anchor_shape").get<std::string>());
  }
  return s;
}

}  // namespace diffris::synthdata
