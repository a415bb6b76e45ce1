#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "reference.hpp"
#include "resq/encoders.hpp"
#include "resq/errors.hpp"
#include "resq/harness.hpp"

using namespace resq;
using namespace resq::enc;

TEST(TokenVocabulary, PaddingIsReservedAndUnknownWordsThrow) {
  const auto v = TokenVocabulary::synthetic();
  EXPECT_EQ(v.word(TokenVocabulary::kPadIndex), TokenVocabulary::kPadToken);
  for (int i : v.encode(data::vocabulary_words())) EXPECT_NE(i, TokenVocabulary::kPadIndex);
  EXPECT_THROW(v.index("hexagon"), EncodingError);
}

TEST(TokenVocabulary, SaveLoadRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "resq_vocab_test.txt").string();
  const TokenVocabulary v({"ä", "circle", "left"});
  v.save(path);
  EXPECT_EQ(TokenVocabulary::load(path), v);
  std::filesystem::remove(path);
}

TEST(QueryBatch, PadsToLongestQuery) {
  const auto v = TokenVocabulary::synthetic();
  const auto b = make_query_batch(v, {{"red", "circle"}, {"circle"}});
  EXPECT_EQ(b.max_len, 2);
  EXPECT_EQ(b.lengths, (std::vector<int>{2, 1}));
  EXPECT_EQ(b.ids[3], TokenVocabulary::kPadIndex);
}

namespace {

struct TextFixture {
  ParamRegistry reg;
  Rng rng{3};
  TokenVocabulary vocab = TokenVocabulary::synthetic();
  TextEncoder enc{reg, vocab.size(), 6, 5, rng};
};

}  // namespace

TEST(EmbedQuery, RepeatedTokenGivesIdenticalRows) {
  TextFixture f;
  const auto w = embed_query(f.enc, f.vocab, {"the", "red", "circle", "the"});
  for (int c = 0; c < w.dim(); ++c) EXPECT_EQ(w.S[c], w.S[3 * w.dim() + c]);
}

TEST(EmbedQuery, PermutingTokensPermutesRowsExactly) {
  TextFixture f;
  const std::vector<std::string> q{"small", "blue", "square", "on", "the", "left"};
  std::vector<int> perm{5, 2, 0, 4, 1, 3};
  std::vector<std::string> shuffled;
  for (int p : perm) shuffled.push_back(q[p]);
  const auto a = embed_query(f.enc, f.vocab, q), b = embed_query(f.enc, f.vocab, shuffled);
  for (int n = 0; n < 6; ++n)
    for (int c = 0; c < a.dim(); ++c) EXPECT_EQ(b.S[n * a.dim() + c], a.S[perm[n] * a.dim() + c]);
}

TEST(EmbedQuery, SingleTokenMatchesHandAppliedLayers) {
  TextFixture f;
  const int id = f.vocab.index("triangle");
  ref::Vec e;
  for (int c = 0; c < 6; ++c) e.push_back(f.enc.table->value[id * 6 + c]);
  auto hid = ref::affine(f.enc.fc1, e);
  for (auto& x : hid) x = std::max<long double>(x, 0);
  const auto want = ref::affine(f.enc.fc2, hid);
  const auto got = embed_query(f.enc, f.vocab, {"triangle"});
  for (int c = 0; c < 5; ++c) EXPECT_NEAR(got.S[c], static_cast<double>(want[c]), 1e-14);
}

TEST(CoordinateFeatures, MatchClosedForm) {
  const Tensor t = coordinate_features(4, 8);
  const int P = 32;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j) {
      const int p = i * 8 + j;
      EXPECT_DOUBLE_EQ(t[0 * P + p], (j + 0.5) / 8 * 2 - 1);
      EXPECT_DOUBLE_EQ(t[1 * P + p], (i + 0.5) / 4 * 2 - 1);
      EXPECT_DOUBLE_EQ(t[2 * P + p], 2.0 * j / 8 - 1);
      EXPECT_DOUBLE_EQ(t[3 * P + p], 2.0 * i / 4 - 1);
      EXPECT_DOUBLE_EQ(t[4 * P + p], 2.0 * (j + 1) / 8 - 1);
      EXPECT_DOUBLE_EQ(t[5 * P + p], 2.0 * (i + 1) / 4 - 1);
      EXPECT_DOUBLE_EQ(t[6 * P + p], 1.0 / 8);
      EXPECT_DOUBLE_EQ(t[7 * P + p], 1.0 / 4);
    }
}

namespace {

Image random_image(int size, Rng& rng) {
  Image img(size, size);
  for (auto& v : img.rgb) v = rng.uniform();
  return img;
}

}  // namespace

TEST(EncodeImage, DefaultShapeDeterminismAndRange) {
  ModelConfig cfg;
  ParamRegistry reg;
  Rng rng(5);
  ImageEncoder enc(reg, cfg, rng);
  EXPECT_EQ(enc.stride(), 8);
  const Image img = random_image(64, rng);
  const Tensor a = encode_image(enc, img), b = encode_image(enc, img);
  EXPECT_EQ(a.shape, (Shape{1, cfg.dim, 8, 8}));
  EXPECT_EQ(a.data, b.data);
  for (double v : a.data) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
}

TEST(EncodeImage, IndivisibleSizeIsAConfigError) {
  ModelConfig cfg;
  ParamRegistry reg;
  Rng rng(6);
  ImageEncoder enc(reg, cfg, rng);
  EXPECT_THROW(encode_image(enc, Image(60, 60)), ConfigError);
}

TEST(EncoderGradients, MatchFiniteDifferences) {
  GradcheckOptions opt;
  opt.include = {"text.", "image."};
  const auto r = gradcheck(tiny_config(), opt);
  EXPECT_TRUE(r.pass);
  EXPECT_FALSE(r.entries.empty());
  for (const auto& e : r.entries) EXPECT_TRUE(e.pass) << e.name << " " << e.max_rel_error;
}
