#include "resq/encoders.hpp"

#include <fstream>

#include "resq/datagen.hpp"
#include "resq/errors.hpp"

namespace resq::enc {

TokenVocabulary::TokenVocabulary() : TokenVocabulary(std::vector<std::string>{}) {}

TokenVocabulary::TokenVocabulary(const std::vector<std::string>& words) {
  words_.push_back(kPadToken);
  index_[kPadToken] = kPadIndex;
  for (const auto& w : words) {
    if (index_.count(w)) throw EncodingError("duplicate vocabulary word '" + w + "'");
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }
}

TokenVocabulary TokenVocabulary::synthetic() { return TokenVocabulary(data::vocabulary_words()); }

int TokenVocabulary::index(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end() || it->second == kPadIndex) {
    throw EncodingError("out-of-vocabulary token '" + word + "'");
  }
  return it->second;
}

std::vector<int> TokenVocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(index(t));
  return ids;
}

void TokenVocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary " + path);
  for (const auto& w : words_) out << w << '\n';
}

TokenVocabulary TokenVocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open vocabulary " + path);
  std::string line;
  std::vector<std::string> words;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      if (line != kPadToken) throw EncodingError("vocabulary must start with " + std::string(kPadToken));
      first = false;
      continue;
    }
    words.push_back(line);
  }
  return TokenVocabulary(words);
}

QueryBatch make_query_batch(const TokenVocabulary& vocab,
                            const std::vector<std::vector<std::string>>& queries) {
  QueryBatch b;
  for (const auto& q : queries) {
    if (q.empty()) throw EncodingError("empty query");
    b.max_len = std::max<int>(b.max_len, static_cast<int>(q.size()));
  }
  b.ids.assign(queries.size() * static_cast<std::size_t>(b.max_len), TokenVocabulary::kPadIndex);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto ids = vocab.encode(queries[i]);
    std::copy(ids.begin(), ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.max_len));
    b.lengths.push_back(static_cast<int>(ids.size()));
  }
  return b;
}

TextEncoder::TextEncoder(ParamRegistry& reg, int vocab_size, int embed_dim, int dim, Rng& rng) {
  Tensor init({vocab_size, embed_dim});
  for (auto& v : init.data) v = rng.normal();
  table = reg.create("text.embedding", std::move(init));
  fc1 = Linear(reg, "text.fc1", embed_dim, dim, rng);
  fc2 = Linear(reg, "text.fc2", dim, dim, rng);
}

ag::Var TextEncoder::forward(const QueryBatch& batch) const {
  auto e = ag::embedding(table, batch.ids);
  auto s = fc2(ag::relu(fc1(e)));
  return ag::reshape(s, {batch.batch(), batch.max_len, fc2.out_features()});
}

Tensor coordinate_features(int height, int width) {
  Tensor t({kCoordChannels, height, width});
  const std::size_t P = static_cast<std::size_t>(height) * width;
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const double left = 2.0 * j / width - 1.0, right = 2.0 * (j + 1) / width - 1.0;
      const double top = 2.0 * i / height - 1.0, bottom = 2.0 * (i + 1) / height - 1.0;
      const std::size_t p = static_cast<std::size_t>(i) * width + j;
      t[0 * P + p] = 0.5 * (left + right);
      t[1 * P + p] = 0.5 * (top + bottom);
      t[2 * P + p] = left;
      t[3 * P + p] = top;
      t[4 * P + p] = right;
      t[5 * P + p] = bottom;
      t[6 * P + p] = 1.0 / width;
      t[7 * P + p] = 1.0 / height;
    }
  }
  return t;
}

ImageEncoder::ImageEncoder(ParamRegistry& reg, const ModelConfig& cfg, Rng& rng)
    : stride_(cfg.stride()), image_size_(cfg.image_size) {
  cfg.validate();
  int in = 3;
  for (std::size_t b = 0; b < cfg.backbone_channels.size(); ++b) {
    const std::string name = "image.block" + std::to_string(b);
    Block blk;
    blk.conv = Conv2d(reg, name + ".conv", in, cfg.backbone_channels[b], 3, cfg.backbone_strides[b],
                      1, false, rng);
    blk.bn = std::make_unique<BatchNorm2d>(reg, name + ".bn", cfg.backbone_channels[b]);
    blocks_.push_back(std::move(blk));
    in = cfg.backbone_channels[b];
  }
  project_ = Conv2d(reg, "image.project", in + kCoordChannels, cfg.dim, 1, 1, 0, false, rng);
  project_bn_ = std::make_unique<BatchNorm2d>(reg, "image.project_bn", cfg.dim);
}

ag::Var ImageEncoder::forward(const ag::Var& images, bool training) {
  const auto& shp = images->shape();
  if (shp.size() != 4 || shp[1] != 3) {
    throw ConfigError("image batch must be [B, 3, H, W], got " + shape_str(shp));
  }
  if (shp[2] % stride_ != 0 || shp[3] % stride_ != 0) {
    throw ConfigError("image size " + std::to_string(shp[2]) + "x" + std::to_string(shp[3]) +
                      " is not divisible by the total stride " + std::to_string(stride_));
  }
  ag::Var x = images;
  for (auto& blk : blocks_) x = ag::relu(blk.bn->forward(blk.conv(x), training));
  const int B = shp[0], H = x->value.dim(2), W = x->value.dim(3);
  const Tensor coord = coordinate_features(H, W);
  Tensor tiled({B, kCoordChannels, H, W});
  for (int b = 0; b < B; ++b) std::copy(coord.data.begin(), coord.data.end(), tiled.ptr() + b * coord.size());
  x = ag::concat_channels(x, ag::constant(std::move(tiled)));
  return ag::relu(project_bn_->forward(project_(x), training));
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("empty image batch");
  const int H = images[0]->height, W = images[0]->width;
  Tensor t({static_cast<int>(images.size()), 3, H, W});
  const std::size_t P = static_cast<std::size_t>(H) * W;
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.height != H || img.width != W) throw ContractError("images in a batch must share a size");
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < P; ++p) t[(b * 3 + c) * P + p] = img.rgb[p * 3 + c];
  }
  return t;
}

WordFeatures embed_query(const TextEncoder& enc, const TokenVocabulary& vocab,
                         const std::vector<std::string>& tokens) {
  ag::NoGradGuard guard;
  const auto batch = make_query_batch(vocab, {tokens});
  auto s = enc.forward(batch);
  return {s->value.reshaped({batch.max_len, s->value.dim(2)})};
}

Tensor encode_image(ImageEncoder& enc, const Image& image) {
  ag::NoGradGuard guard;
  auto v = enc.forward(ag::constant(images_to_tensor({&image})), false);
  return v->value;
}

}  // namespace resq::enc
