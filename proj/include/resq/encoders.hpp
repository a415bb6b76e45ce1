#pragma once

// Text and image encoders producing the per-word features S and the initial
// visual map v(0).

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "resq/config.hpp"
#include "resq/image.hpp"
#include "resq/layers.hpp"

namespace resq::enc {

/// Word <-> index map. Index 0 is reserved for padding and never produced
/// by encode().
class TokenVocabulary {
 public:
  static constexpr int kPadIndex = 0;
  static constexpr const char* kPadToken = "<pad>";

  TokenVocabulary();
  /// `words` excludes the padding token.
  explicit TokenVocabulary(const std::vector<std::string>& words);
  static TokenVocabulary synthetic();

  int size() const { return static_cast<int>(words_.size()); }
  /// Throws EncodingError for out-of-vocabulary words.
  int index(const std::string& word) const;
  const std::string& word(int index) const { return words_.at(static_cast<std::size_t>(index)); }
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  const std::vector<std::string>& words() const { return words_; }

  /// One word per line; line number (0-based) is the index.
  void save(const std::string& path) const;
  static TokenVocabulary load(const std::string& path);

  bool operator==(const TokenVocabulary& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Padded batch of encoded queries; ids is [batch, max_len] row-major.
struct QueryBatch {
  std::vector<int> ids;
  std::vector<int> lengths;
  int max_len = 0;

  int batch() const { return static_cast<int>(lengths.size()); }
};

QueryBatch make_query_batch(const TokenVocabulary& vocab,
                            const std::vector<std::vector<std::string>>& queries);

/// Per-word query representation: S [N, C].
struct WordFeatures {
  Tensor S;
  int length() const { return S.dim(0); }
  int dim() const { return S.dim(1); }
};

/// Embedding table followed by two affine maps with a rectifier in between.
class TextEncoder {
 public:
  TextEncoder(ParamRegistry& reg, int vocab_size, int embed_dim, int dim, Rng& rng);

  /// [B, max_len, C]; padded rows are computed but must be masked downstream.
  ag::Var forward(const QueryBatch& batch) const;

  ag::Var table;
  Linear fc1;
  Linear fc2;
};

/// Coordinate channels for an H x W grid: x center, y center, left, top,
/// right, bottom (all normalized to [-1, 1]), 1/W, 1/H. Shape [8, H, W].
Tensor coordinate_features(int height, int width);
constexpr int kCoordChannels = 8;

/// Strided conv backbone, coordinate channels, then 1x1 conv + BN + ReLU.
class ImageEncoder {
 public:
  ImageEncoder(ParamRegistry& reg, const ModelConfig& cfg, Rng& rng);

  /// images [B, 3, H, W] -> v(0) [B, C, H/stride, W/stride].
  ag::Var forward(const ag::Var& images, bool training);

  int stride() const { return stride_; }

 private:
  struct Block {
    Conv2d conv;
    std::unique_ptr<BatchNorm2d> bn;
  };
  std::vector<Block> blocks_;
  Conv2d project_;
  std::unique_ptr<BatchNorm2d> project_bn_;
  int stride_ = 1;
  int image_size_ = 0;
};

/// Stacks HxWx3 images into an NCHW tensor.
Tensor images_to_tensor(const std::vector<const Image*>& images);

/// Evaluation-mode helpers on a single input.
WordFeatures embed_query(const TextEncoder& enc, const TokenVocabulary& vocab,
                         const std::vector<std::string>& tokens);
Tensor encode_image(ImageEncoder& enc, const Image& image);

}  // namespace resq::enc
