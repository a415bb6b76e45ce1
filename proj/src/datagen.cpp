#include "resq/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "resq/errors.hpp"
#include "resq/rng.hpp"

namespace resq::data {

namespace {

constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
constexpr std::array<Color, 5> kColors{Color::red, Color::green, Color::blue, Color::yellow,
                                       Color::gray};

std::array<double, 3> rgb255(int r, int g, int b) { return {r / 255.0, g / 255.0, b / 255.0}; }

}  // namespace

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

std::string to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
    case Color::gray: return "gray";
  }
  return "?";
}

std::string to_string(SizeClass s) { return s == SizeClass::small ? "small" : "large"; }

std::array<double, 3> palette(Color c) {
  switch (c) {
    case Color::red: return rgb255(230, 25, 25);
    case Color::green: return rgb255(30, 200, 30);
    case Color::blue: return rgb255(30, 60, 230);
    case Color::yellow: return rgb255(240, 220, 30);
    case Color::gray: return rgb255(140, 140, 140);
  }
  return rgb255(0, 0, 0);
}

std::array<double, 3> background_color() { return rgb255(20, 20, 20); }

Box SceneObject::bbox() const {
  return {static_cast<double>(cx - extent), static_cast<double>(cy - extent), 2.0 * extent,
          2.0 * extent};
}

// ---------------------------------------------------------------- scenes

std::vector<std::string> check_scene(const ShapeWorldScene& scene, const GenerationConfig& cfg) {
  std::vector<std::string> problems;
  const int n = static_cast<int>(scene.objects.size());
  if (n < 1) problems.push_back("scene has no objects");
  for (int i = 0; i < n; ++i) {
    const auto& o = scene.objects[i];
    if (o.extent <= 0) problems.push_back("object " + std::to_string(i) + " has no extent");
    if (o.cx - o.extent < 0 || o.cy - o.extent < 0 || o.cx + o.extent > scene.image_size ||
        o.cy + o.extent > scene.image_size) {
      problems.push_back("object " + std::to_string(i) + " leaves the image");
    }
    for (int j = 0; j < i; ++j) {
      const auto& p = scene.objects[j];
      const double d = std::hypot(o.cx - p.cx, o.cy - p.cy);
      if (d < cfg.min_separation * (o.extent + p.extent)) {
        problems.push_back("objects " + std::to_string(j) + " and " + std::to_string(i) +
                           " are too close");
      }
    }
  }
  return problems;
}

ShapeWorldScene generate_scene(std::uint64_t rng_seed, const GenerationConfig& cfg) {
  Rng rng(rng_seed);
  ShapeWorldScene scene;
  scene.image_size = cfg.image_size;
  scene.rng_seed = rng_seed;
  const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  for (int i = 0; i < count; ++i) {
    SceneObject o;
    if (i > 0 && rng.uniform() < cfg.duplicate_prob) {
      const auto& src = scene.objects[rng.uniform_int(0, i - 1)];
      o.shape = src.shape;
      o.color = src.color;
      o.size = src.size;
      if (rng.uniform() < 2.0 / 3.0) {
        switch (rng.uniform_int(0, 2)) {
          case 0: o.shape = kShapes[rng.uniform_int(0, 2)]; break;
          case 1: o.color = kColors[rng.uniform_int(0, 4)]; break;
          default: o.size = rng.uniform_int(0, 1) ? SizeClass::large : SizeClass::small; break;
        }
      }
    } else {
      o.shape = kShapes[rng.uniform_int(0, 2)];
      o.color = kColors[rng.uniform_int(0, 4)];
      o.size = rng.uniform_int(0, 1) ? SizeClass::large : SizeClass::small;
    }
    o.extent = o.size == SizeClass::small ? rng.uniform_int(cfg.small_min, cfg.small_max)
                                          : rng.uniform_int(cfg.large_min, cfg.large_max);
    bool placed = false;
    for (int attempt = 0; attempt < cfg.placement_attempts && !placed; ++attempt) {
      o.cx = rng.uniform_int(o.extent, cfg.image_size - o.extent);
      o.cy = rng.uniform_int(o.extent, cfg.image_size - o.extent);
      placed = std::all_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& p) {
        return std::hypot(o.cx - p.cx, o.cy - p.cy) >= cfg.min_separation * (o.extent + p.extent);
      });
    }
    if (!placed) {
      throw GenerationError("could not place object " + std::to_string(i) + " after " +
                            std::to_string(cfg.placement_attempts) + " attempts (seed " +
                            std::to_string(rng_seed) + ")");
    }
    scene.objects.push_back(o);
  }
  return scene;
}

bool covers(const SceneObject& o, int px, int py) {
  const double x = px + 0.5, y = py + 0.5;
  const double r = o.extent;
  switch (o.shape) {
    case ShapeKind::circle: {
      const double dx = x - o.cx, dy = y - o.cy;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::square:
      return x >= o.cx - r && x <= o.cx + r && y >= o.cy - r && y <= o.cy + r;
    case ShapeKind::triangle:
      // apex at (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r)
      return y >= o.cy - r && y <= o.cy + r && std::abs(x - o.cx) <= (y - o.cy + r) / 2.0;
  }
  return false;
}

Image render_scene(const ShapeWorldScene& scene) {
  const int s = scene.image_size;
  Image img(s, s);
  const auto bg = background_color();
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = bg[c];
  for (const auto& o : scene.objects) {
    const auto col = palette(o.color);
    const int y0 = std::max(0, o.cy - o.extent - 1), y1 = std::min(s - 1, o.cy + o.extent + 1);
    const int x0 = std::max(0, o.cx - o.extent - 1), x1 = std::min(s - 1, o.cx + o.extent + 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (covers(o, x, y))
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
  }
  return img;
}

Box pixel_bbox(const SceneObject& o, int image_size) {
  int minx = image_size, miny = image_size, maxx = -1, maxy = -1;
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x)
      if (covers(o, x, y)) {
        minx = std::min(minx, x);
        maxx = std::max(maxx, x);
        miny = std::min(miny, y);
        maxy = std::max(maxy, y);
      }
  if (maxx < 0) return {};
  return {static_cast<double>(minx), static_cast<double>(miny), static_cast<double>(maxx + 1 - minx),
          static_cast<double>(maxy + 1 - miny)};
}

// ---------------------------------------------------------------- language

const std::vector<std::string>& vocabulary_words() {
  static const std::vector<std::string> words{
      "circle", "square", "triangle", "shape",                 // nouns
      "red",    "green",  "blue",     "yellow", "gray",        // colors
      "small",  "large",                                       // sizes
      "left",   "right",  "top",      "bottom",                // locations
      "above",  "below",  "of",       "on",     "the"};        // relations / function words
  return words;
}

namespace {

enum class Relation { left_of, right_of, above, below };

struct NounPhrase {
  std::optional<ShapeKind> shape;  // nullopt for the generic "shape"
  std::optional<Color> color;
  std::optional<SizeClass> size;
  std::vector<std::string> locations;
};

std::optional<ShapeKind> shape_word(const std::string& w) {
  for (auto s : kShapes)
    if (to_string(s) == w) return s;
  return std::nullopt;
}

std::optional<Color> color_word(const std::string& w) {
  for (auto c : kColors)
    if (to_string(c) == w) return c;
  return std::nullopt;
}

std::optional<SizeClass> size_word(const std::string& w) {
  if (w == "small") return SizeClass::small;
  if (w == "large") return SizeClass::large;
  return std::nullopt;
}

bool is_location(const std::string& w) {
  return w == "left" || w == "right" || w == "top" || w == "bottom";
}

class Parser {
 public:
  explicit Parser(const std::vector<std::string>& t) : tokens_(t) {}

  NounPhrase noun_phrase() {
    NounPhrase np;
    if (peek() == "the") ++pos_;
    while (true) {
      const std::string w = peek();
      if (w.empty()) fail("expected a noun");
      if (auto c = color_word(w)) {
        np.color = c;
      } else if (auto z = size_word(w)) {
        np.size = z;
      } else if (is_location(w)) {
        np.locations.push_back(w);
      } else if (auto s = shape_word(w)) {
        np.shape = s;
        ++pos_;
        break;
      } else if (w == "shape") {
        ++pos_;
        break;
      } else {
        fail("unexpected '" + w + "' before the noun");
      }
      ++pos_;
    }
    if (peek() == "on") {
      ++pos_;
      expect("the");
      const std::string w = peek();
      if (!is_location(w)) fail("expected a location after 'on the'");
      np.locations.push_back(w);
      ++pos_;
    }
    return np;
  }

  std::optional<Relation> relation() {
    const std::string w = peek();
    if (w.empty()) return std::nullopt;
    ++pos_;
    if (w == "above") return Relation::above;
    if (w == "below") return Relation::below;
    if (w == "left" || w == "right") {
      expect("of");
      return w == "left" ? Relation::left_of : Relation::right_of;
    }
    fail("expected a relation, got '" + w + "'");
  }

  bool done() const { return pos_ >= tokens_.size(); }

  [[noreturn]] void fail(const std::string& why) const {
    throw ResolverError("cannot parse query at token " + std::to_string(pos_) + ": " + why);
  }

 private:
  std::string peek() const { return pos_ < tokens_.size() ? tokens_[pos_] : std::string(); }
  void expect(const std::string& w) {
    if (peek() != w) fail("expected '" + w + "'");
    ++pos_;
  }

  const std::vector<std::string>& tokens_;
  std::size_t pos_ = 0;
};

bool location_holds(const SceneObject& o, const std::string& loc, int image_size) {
  const double mid = image_size / 2.0;
  if (loc == "left") return o.cx < mid;
  if (loc == "right") return o.cx >= mid;
  if (loc == "top") return o.cy < mid;
  return o.cy >= mid;  // bottom
}

bool matches(const SceneObject& o, const NounPhrase& np, int image_size) {
  if (np.shape && *np.shape != o.shape) return false;
  if (np.color && *np.color != o.color) return false;
  if (np.size && *np.size != o.size) return false;
  for (const auto& loc : np.locations)
    if (!location_holds(o, loc, image_size)) return false;
  return true;
}

bool relation_holds(const SceneObject& o, const SceneObject& ref, Relation r) {
  switch (r) {
    case Relation::left_of: return o.cx < ref.cx;
    case Relation::right_of: return o.cx > ref.cx;
    case Relation::above: return o.cy < ref.cy;
    case Relation::below: return o.cy > ref.cy;
  }
  return false;
}

}  // namespace

std::set<int> resolve_query(const ShapeWorldScene& scene, const std::vector<std::string>& tokens) {
  const auto& vocab = vocabulary_words();
  for (const auto& t : tokens) {
    if (std::find(vocab.begin(), vocab.end(), t) == vocab.end()) {
      throw ResolverError("unknown token '" + t + "'");
    }
  }
  if (tokens.empty()) throw ResolverError("empty query");
  Parser parser(tokens);
  const NounPhrase head = parser.noun_phrase();
  std::optional<Relation> rel;
  NounPhrase ref;
  if (!parser.done()) {
    rel = parser.relation();
    ref = parser.noun_phrase();
    if (!parser.done()) parser.fail("trailing tokens");
  }

  const int n = static_cast<int>(scene.objects.size());
  std::set<int> out;
  for (int i = 0; i < n; ++i) {
    const auto& o = scene.objects[i];
    if (!matches(o, head, scene.image_size)) continue;
    if (rel) {
      bool any = false;
      for (int j = 0; j < n && !any; ++j) {
        any = j != i && matches(scene.objects[j], ref, scene.image_size) &&
              relation_holds(o, scene.objects[j], *rel);
      }
      if (!any) continue;
    }
    out.insert(i);
  }
  return out;
}

int tier_of_length(int n, const GenerationConfig& cfg) {
  for (int t = 0; t < 4; ++t) {
    if (n >= cfg.tier_bins[t].first && n <= cfg.tier_bins[t].second) return t + 1;
  }
  return 0;
}

namespace {

using Tokens = std::vector<std::string>;

// Descriptions of an object from its own attributes, without relations.
std::vector<Tokens> head_phrases(const SceneObject& o, bool with_generic) {
  const std::string s = to_string(o.shape), c = to_string(o.color), z = to_string(o.size);
  std::vector<Tokens> out{{s}, {c, s}, {z, s}, {z, c, s}};
  if (with_generic) {
    out.push_back({c, "shape"});
    out.push_back({z, "shape"});
  }
  return out;
}

std::vector<std::string> location_words(const SceneObject& o, const GenerationConfig& cfg) {
  std::vector<std::string> out;
  const double mid = cfg.image_size / 2.0;
  if (std::abs(o.cx - mid) >= cfg.location_margin) out.push_back(o.cx < mid ? "left" : "right");
  if (std::abs(o.cy - mid) >= cfg.location_margin) out.push_back(o.cy < mid ? "top" : "bottom");
  return out;
}

std::vector<Tokens> candidate_queries(const ShapeWorldScene& scene, int target,
                                      const GenerationConfig& cfg) {
  const auto& t = scene.objects.at(static_cast<std::size_t>(target));
  const std::string s = to_string(t.shape), c = to_string(t.color), z = to_string(t.size);
  std::vector<Tokens> out = head_phrases(t, true);
  for (const auto& loc : location_words(t, cfg)) {
    out.push_back({loc, s});
    out.push_back({loc, c, s});
    out.push_back({loc, z, s});
    out.push_back({s, "on", "the", loc});
    out.push_back({c, s, "on", "the", loc});
    out.push_back({z, s, "on", "the", loc});
    out.push_back({z, c, s, "on", "the", loc});
  }
  const int m = cfg.location_margin;
  for (int r = 0; r < static_cast<int>(scene.objects.size()); ++r) {
    if (r == target) continue;
    const auto& ref = scene.objects[r];
    std::vector<Tokens> rels;
    if (t.cx + m <= ref.cx) rels.push_back({"left", "of"});
    if (t.cx >= ref.cx + m) rels.push_back({"right", "of"});
    if (t.cy + m <= ref.cy) rels.push_back({"above"});
    if (t.cy >= ref.cy + m) rels.push_back({"below"});
    if (rels.empty()) continue;
    std::vector<Tokens> refs;
    for (auto& p : head_phrases(ref, false)) {
      if (resolve_query(scene, p) == std::set<int>{r}) refs.push_back(std::move(p));
    }
    for (const auto& head : head_phrases(t, false))
      for (const auto& rel : rels)
        for (const auto& rp : refs) {
          Tokens q = head;
          q.insert(q.end(), rel.begin(), rel.end());
          q.push_back("the");
          q.insert(q.end(), rp.begin(), rp.end());
          out.push_back(std::move(q));
        }
  }
  std::erase_if(out, [&](const Tokens& q) {
    return static_cast<int>(q.size()) > cfg.max_query_len;
  });
  return out;
}

constexpr int kUniquenessAttempts = 50;

}  // namespace

GeneratedQuery generate_query(const ShapeWorldScene& scene, int target_index, int tier,
                              std::uint64_t rng_seed, const GenerationConfig& cfg) {
  if (target_index < 0 || target_index >= static_cast<int>(scene.objects.size())) {
    throw ContractError("target index out of range");
  }
  if (tier < 1 || tier > 4) throw ContractError("tier must be in 1..4");
  Rng rng(rng_seed);
  const auto all = candidate_queries(scene, target_index, cfg);
  const std::set<int> want{target_index};
  for (int t = tier; t <= 4; ++t) {
    std::vector<Tokens> pool;
    for (const auto& q : all)
      if (tier_of_length(static_cast<int>(q.size()), cfg) == t) pool.push_back(q);
    rng.shuffle(pool);
    const int attempts = std::min<int>(kUniquenessAttempts, static_cast<int>(pool.size()));
    for (int a = 0; a < attempts; ++a) {
      if (resolve_query(scene, pool[a]) == want) return {pool[a], t};
    }
  }
  throw SampleSkipError("no unique description for object " + std::to_string(target_index));
}

std::optional<int> minimal_tier(const ShapeWorldScene& scene, int target_index,
                                const GenerationConfig& cfg) {
  const std::set<int> want{target_index};
  int best = 5;
  for (const auto& q : candidate_queries(scene, target_index, cfg)) {
    const int t = tier_of_length(static_cast<int>(q.size()), cfg);
    if (t > 0 && t < best && resolve_query(scene, q) == want) best = t;
  }
  if (best == 5) return std::nullopt;
  return best;
}

std::vector<std::string> attribute_tags(const std::vector<std::string>& tokens) {
  static const std::set<std::string> color{"red", "green", "blue", "yellow", "gray"};
  static const std::set<std::string> location{"left", "right", "top", "bottom", "above", "below"};
  static const std::set<std::string> size{"small", "large"};
  auto any_in = [&](const std::set<std::string>& words) {
    return std::any_of(tokens.begin(), tokens.end(), [&](const auto& t) { return words.count(t); });
  };
  std::vector<std::string> tags;
  if (any_in(color)) tags.push_back("color");
  if (any_in(location)) tags.push_back("location");
  if (any_in(size)) tags.push_back("size");
  return tags;
}

std::vector<GroundingSample> generate_split(const std::string& split, int count, std::uint64_t seed,
                                            const GenerationConfig& cfg) {
  std::uint64_t split_key = 0;
  for (char ch : split) split_key = split_key * 131 + static_cast<unsigned char>(ch);
  // Past this many attempts a sample is accepted at any tier up to the requested one.
  constexpr int kStrictAttempts = 400;
  constexpr int kMaxAttempts = 2000;

  std::vector<GroundingSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int want_tier = i % 4 + 1;
    const std::uint64_t sample_seed = mix_seed(mix_seed(seed, split_key), static_cast<std::uint64_t>(i));
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      const std::uint64_t s = mix_seed(sample_seed, static_cast<std::uint64_t>(attempt));
      ShapeWorldScene scene;
      try {
        scene = generate_scene(s, cfg);
      } catch (const GenerationError&) {
        continue;
      }
      Rng pick(mix_seed(s, 1));
      const int target = pick.uniform_int(0, static_cast<int>(scene.objects.size()) - 1);
      const auto min_t = minimal_tier(scene, target, cfg);
      if (!min_t) continue;
      const bool strict = attempt < kStrictAttempts;
      if (strict ? *min_t != want_tier : *min_t > want_tier) continue;
      GeneratedQuery q;
      try {
        q = generate_query(scene, target, want_tier, mix_seed(s, 2), cfg);
      } catch (const SampleSkipError&) {
        continue;
      }
      if (strict && q.tier != want_tier) continue;

      GroundingSample sample;
      char id[32];
      std::snprintf(id, sizeof id, "%s_%06d", split.c_str(), i);
      sample.id = id;
      sample.image = render_scene(scene);
      sample.tokens = q.tokens;
      sample.bbox = scene.objects[target].bbox();
      sample.meta.query_length = static_cast<int>(q.tokens.size());
      sample.meta.attribute_tags = attribute_tags(q.tokens);
      sample.meta.complexity_tier = q.tier;
      out.push_back(std::move(sample));
      accepted = true;
    }
    if (!accepted) {
      throw GenerationError("could not generate sample " + std::to_string(i) + " of split " + split);
    }
  }
  return out;
}

}  // namespace resq::data
