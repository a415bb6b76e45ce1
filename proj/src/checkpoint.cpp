#include <cstring>
#include <fstream>
#include <sstream>

#include "resq/errors.hpp"
#include "resq/harness.hpp"

namespace resq {

using json = nlohmann::json;

namespace {

constexpr char kMagic[8] = {'R', 'E', 'S', 'Q', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& buf, const T& v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_tensor(std::string& buf, const Tensor& t) {
  buf.append(reinterpret_cast<const char*>(t.data.data()), t.size() * sizeof(double));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  void read(void* dst, std::size_t n, const char* what) {
    if (pos_ + n > end_) throw IntegrityError(std::string("checkpoint truncated while reading ") + what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T get(const char* what) {
    T v;
    read(&v, sizeof(T), what);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json shapes_of(const ParamRegistry& reg) {
  json params = json::array(), buffers = json::array();
  for (const auto& p : reg.params()) params.push_back({{"name", p.name}, {"shape", p.var->value.shape}});
  for (const auto& b : reg.buffers()) buffers.push_back({{"name", b.name}, {"shape", b.tensor->shape}});
  return {{"params", params}, {"buffers", buffers}};
}

struct Parsed {
  Checkpoint meta;
  json header;
  std::string bytes;
  std::size_t payload = 0;  // offset of the first tensor
  std::size_t payload_end = 0;
};

Parsed parse(const std::string& path) {
  Parsed p;
  p.bytes = read_file(path);
  const std::size_t min_size = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (p.bytes.size() < min_size + sizeof(std::uint64_t)) throw IntegrityError("checkpoint truncated: " + path);
  if (std::memcmp(p.bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IntegrityError("not a checkpoint file: " + path);
  }
  const std::size_t end = p.bytes.size() - sizeof(std::uint64_t);
  Reader r(p.bytes, end);
  char magic[8];
  r.read(magic, sizeof(magic), "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  std::uint64_t stored;
  std::memcpy(&stored, p.bytes.data() + end, sizeof(stored));
  if (fnv1a(p.bytes.data(), end) != stored) throw IntegrityError("checkpoint checksum mismatch: " + path);

  const auto header_len = r.get<std::uint64_t>("header length");
  std::string header(header_len, '\0');
  r.read(header.data(), header_len, "header");
  try {
    p.header = json::parse(header);
    p.meta.config = train_config_from_json(p.header.at("config"));
    p.meta.vocab = enc::TokenVocabulary(
        std::vector<std::string>(p.header.at("vocab").begin() + 1, p.header.at("vocab").end()));
    for (const auto& a : p.header.at("anchors")) p.meta.anchors.push_back({a.at(0), a.at(1)});
    p.meta.model_seed = p.header.at("model_seed");
    p.meta.epoch = p.header.at("epoch");
    p.meta.step = p.header.at("step");
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("corrupt checkpoint header: ") + e.what());
  }
  p.payload = r.pos();
  p.payload_end = end;
  return p;
}

void check_config(const ModelConfig& stored, const ModelConfig& current) {
  const json a = to_json(stored), b = to_json(current);
  for (auto it = a.begin(); it != a.end(); ++it) {
    if (!b.contains(it.key()) || b.at(it.key()) != it.value()) {
      throw ShapeMismatchError("checkpoint field '" + it.key() + "' is " + it.value().dump() +
                               " but the model has " + (b.contains(it.key()) ? b.at(it.key()).dump() : "none"));
    }
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& meta, const GroundingModel& model,
                     const RmsProp* optimizer) {
  const ParamRegistry& reg = model.registry();
  json header;
  header["config"] = to_json(meta.config);
  header["vocab"] = meta.vocab.words();
  json anchors = json::array();
  for (const auto& a : meta.anchors) anchors.push_back({a.w, a.h});
  header["anchors"] = anchors;
  header["model_seed"] = meta.model_seed;
  header["epoch"] = meta.epoch;
  header["step"] = meta.step;
  header["tensors"] = shapes_of(reg);
  header["optimizer"] = optimizer != nullptr;
  const std::string hdr = header.dump();

  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  put(buf, kCheckpointVersion);
  put(buf, static_cast<std::uint64_t>(hdr.size()));
  buf += hdr;
  for (const auto& p : reg.params()) put_tensor(buf, p.var->value);
  for (const auto& b : reg.buffers()) put_tensor(buf, *b.tensor);
  if (optimizer)
    for (const auto& s : optimizer->state()) put_tensor(buf, s);
  put(buf, fnv1a(buf.data(), buf.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("cannot write checkpoint " + path);
  }
  std::rename(tmp.c_str(), path.c_str());
}

Checkpoint read_checkpoint_header(const std::string& path) { return parse(path).meta; }

Checkpoint load_checkpoint(const std::string& path, GroundingModel& model, RmsProp* optimizer) {
  Parsed p = parse(path);
  check_config(p.meta.config.model, model.config());
  ParamRegistry& reg = model.registry();
  const json& tensors = p.header.at("tensors");
  const json expected = shapes_of(reg);
  for (const char* group : {"params", "buffers"}) {
    const json& have = tensors.at(group);
    const json& want = expected.at(group);
    if (have.size() != want.size()) {
      throw ShapeMismatchError(std::string("checkpoint holds ") + std::to_string(have.size()) + " " + group +
                               ", model expects " + std::to_string(want.size()));
    }
    for (std::size_t i = 0; i < have.size(); ++i) {
      if (have[i].at("name") != want[i].at("name") || have[i].at("shape") != want[i].at("shape")) {
        throw ShapeMismatchError("tensor '" + want[i].at("name").get<std::string>() + "': checkpoint has " +
                                 have[i].at("name").get<std::string>() + " " + have[i].at("shape").dump() +
                                 ", model expects " + want[i].at("shape").dump());
      }
    }
  }
  Reader r(p.bytes, p.payload_end);
  std::vector<char> skip(p.payload);
  r.read(skip.data(), p.payload, "header");
  for (const auto& prm : reg.params())
    r.read(prm.var->value.data.data(), prm.var->value.size() * sizeof(double), prm.name.c_str());
  for (const auto& b : reg.buffers())
    r.read(b.tensor->data.data(), b.tensor->size() * sizeof(double), b.name.c_str());
  const bool has_opt = p.header.value("optimizer", false);
  if (optimizer && has_opt)
    for (auto& s : optimizer->state()) r.read(s.data.data(), s.size() * sizeof(double), "optimizer state");
  else if (has_opt)
    for (const auto& prm : reg.params()) {
      std::vector<double> sink(prm.var->value.size());
      r.read(sink.data(), sink.size() * sizeof(double), "optimizer state");
    }
  if (r.pos() != p.payload_end) throw IntegrityError("checkpoint has trailing data");
  return p.meta;
}

std::unique_ptr<GroundingModel> load_model(const std::string& path, Checkpoint* meta) {
  const Checkpoint m = read_checkpoint_header(path);
  auto model = std::make_unique<GroundingModel>(m.config.model, m.vocab, m.anchors, m.model_seed);
  load_checkpoint(path, *model, nullptr);
  if (meta) *meta = m;
  return model;
}

}  // namespace resq
