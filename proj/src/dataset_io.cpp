#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "resq/datagen.hpp"
#include "resq/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace resq::data {

void write_dataset(const std::vector<GroundingSample>& samples, const std::string& dir,
                   const std::string& split) {
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream out(fs::path(dir) / (split + ".jsonl"), std::ios::binary);
  if (!out) throw Error("cannot write manifest in " + dir);
  for (const auto& s : samples) {
    const std::string rel = "images/" + s.id + ".ppm";
    write_ppm((fs::path(dir) / rel).string(), s.image);
    json rec;
    rec["id"] = s.id;
    rec["image"] = rel;
    rec["tokens"] = s.tokens;
    rec["bbox"] = {s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h};
    rec["meta"] = {{"query_length", s.meta.query_length},
                   {"attribute_tags", s.meta.attribute_tags},
                   {"complexity_tier", s.meta.complexity_tier}};
    out << rec.dump() << '\n';
  }
}

namespace {

const json& field(const json& obj, const char* name, std::size_t line) {
  auto it = obj.find(name);
  if (it == obj.end()) throw ParseError(line, std::string("missing field '") + name + "'");
  return *it;
}

}  // namespace

std::vector<GroundingSample> read_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw Error("cannot open manifest " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<GroundingSample> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(line, std::string("malformed JSON: ") + e.what());
    }
    if (!rec.is_object()) throw ParseError(line, "record is not an object");
    try {
      GroundingSample s;
      s.id = field(rec, "id", line).get<std::string>();
      s.tokens = field(rec, "tokens", line).get<std::vector<std::string>>();
      const auto& bb = field(rec, "bbox", line);
      if (!bb.is_array() || bb.size() != 4) throw ParseError(line, "field 'bbox' must hold 4 numbers");
      s.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
      const auto& meta = field(rec, "meta", line);
      s.meta.query_length = field(meta, "query_length", line).get<int>();
      s.meta.attribute_tags = field(meta, "attribute_tags", line).get<std::vector<std::string>>();
      s.meta.complexity_tier = field(meta, "complexity_tier", line).get<int>();
      const auto image_rel = field(rec, "image", line).get<std::string>();
      s.image = read_ppm((base / image_rel).string());
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw ParseError(line, std::string("bad field type: ") + e.what());
    }
  }
  return out;
}

void generate_dataset(const std::string& dir, const SplitSizes& sizes, std::uint64_t seed,
                      const GenerationConfig& cfg) {
  write_dataset(generate_split("train", sizes.train, seed, cfg), dir, "train");
  write_dataset(generate_split("val", sizes.val, seed, cfg), dir, "val");
  write_dataset(generate_split("test", sizes.test, seed, cfg), dir, "test");
}

}  // namespace resq::data
