#pragma once

// Synthetic shape-world benchmark: scene sampling, flat rasterization,
// referring-expression generation with a brute-force uniqueness resolver,
// and the JSON-lines dataset interchange format.

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "resq/image.hpp"

namespace resq::data {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow, gray };
enum class SizeClass { small, large };

std::string to_string(ShapeKind s);
std::string to_string(Color c);
std::string to_string(SizeClass s);

/// Palette value of each color as exact multiples of 1/255.
std::array<double, 3> palette(Color c);
std::array<double, 3> background_color();

/// (x_min, y_min, width, height) in pixels.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  bool operator==(const Box&) const = default;
};

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  SizeClass size = SizeClass::small;
  int cx = 0;
  int cy = 0;
  int extent = 1;  // radius or half-width

  Box bbox() const;
  bool operator==(const SceneObject&) const = default;
};

struct ShapeWorldScene {
  std::vector<SceneObject> objects;
  int image_size = 64;
  std::uint64_t rng_seed = 0;
  bool operator==(const ShapeWorldScene&) const = default;
};

struct GenerationConfig {
  int image_size = 64;
  int min_objects = 2;
  int max_objects = 6;
  int small_min = 4, small_max = 6;
  int large_min = 8, large_max = 11;
  /// Probability that a new object copies shape/color/size attributes from an
  /// earlier one, producing confusable distractors.
  double duplicate_prob = 0.5;
  double min_separation = 0.6;  // times the sum of extents
  int placement_attempts = 1000;
  int max_query_len = 16;
  /// Token-count bins per tier (inclusive); tier 4 is open-ended up to max_query_len.
  std::array<std::pair<int, int>, 4> tier_bins{{{1, 2}, {3, 3}, {4, 5}, {6, 16}}};
  /// Location words are only emitted for objects at least this far from the midline.
  int location_margin = 3;
};

/// Describes every violated scene invariant; empty when valid.
std::vector<std::string> check_scene(const ShapeWorldScene& scene, const GenerationConfig& cfg);

ShapeWorldScene generate_scene(std::uint64_t rng_seed, const GenerationConfig& cfg);

Image render_scene(const ShapeWorldScene& scene);
/// True where the pixel center lies inside the object.
bool covers(const SceneObject& obj, int px, int py);
/// Tight pixel-scan bounding box of one object rendered alone.
Box pixel_bbox(const SceneObject& obj, int image_size);

/// The closed vocabulary, in canonical order.
const std::vector<std::string>& vocabulary_words();

/// Objects satisfying every predicate of the query. Throws ResolverError on
/// unknown tokens or ungrammatical queries.
std::set<int> resolve_query(const ShapeWorldScene& scene, const std::vector<std::string>& tokens);

int tier_of_length(int n, const GenerationConfig& cfg);

struct GeneratedQuery {
  std::vector<std::string> tokens;
  int tier = 1;
};

/// Unique description of the target at the requested tier, escalating to
/// higher tiers when none exists. Throws SampleSkipError when even tier 4 fails.
GeneratedQuery generate_query(const ShapeWorldScene& scene, int target_index, int tier,
                              std::uint64_t rng_seed, const GenerationConfig& cfg = {});

/// Lowest tier at which some candidate description is unique.
std::optional<int> minimal_tier(const ShapeWorldScene& scene, int target_index,
                                const GenerationConfig& cfg = {});

struct SampleMeta {
  int query_length = 0;
  std::vector<std::string> attribute_tags;  // subset of {color, location, size}
  int complexity_tier = 1;
  bool operator==(const SampleMeta&) const = default;
};

struct GroundingSample {
  std::string id;
  Image image;
  std::vector<std::string> tokens;
  Box bbox;
  SampleMeta meta;
  bool operator==(const GroundingSample&) const = default;
};

/// Attribute keyword lists restricted to the synthetic vocabulary.
std::vector<std::string> attribute_tags(const std::vector<std::string>& tokens);

struct SplitSizes {
  int train = 2000;
  int val = 500;
  int test = 1000;
};

/// Deterministic samples for one split; tiers cycle 1..4 so they are evenly mixed.
std::vector<GroundingSample> generate_split(const std::string& split, int count, std::uint64_t seed,
                                            const GenerationConfig& cfg);

/// Writes <dir>/<split>.jsonl and image files under <dir>/images/.
void write_dataset(const std::vector<GroundingSample>& samples, const std::string& dir,
                   const std::string& split);
/// Reads a manifest; image paths resolve relative to the manifest directory.
std::vector<GroundingSample> read_dataset(const std::string& manifest_path);

/// Generates all three splits into `dir`.
void generate_dataset(const std::string& dir, const SplitSizes& sizes, std::uint64_t seed,
                      const GenerationConfig& cfg);

}  // namespace resq::data
