#include <gtest/gtest.h>

#include <random>

#include "msmo/encoders.hpp"
#include "oracles.hpp"

namespace msmo::encoders {
namespace {

Vocabulary toy_vocab() { return Vocabulary({"<unk>", "a", "b", "c", "d", "e"}); }

TEST(SentenceEncoder, ShapeDeterminismAndIdenticalRows) {
  SentenceEncoder enc(toy_vocab(), {16, 3});
  const std::vector<Tokens> s{{"a", "b"}, {"c"}, {"a", "b"}, {"d", "e", "a"}, {"zzz"}};
  const Mat g = enc.encode(s);
  EXPECT_EQ(g.rows(), 5);
  EXPECT_EQ(g.cols(), 16);
  EXPECT_TRUE(g.allFinite());
  EXPECT_EQ(g.row(0), g.row(2));
  EXPECT_EQ(g, enc.encode(s));
  SentenceEncoder twin(toy_vocab(), {16, 3});
  EXPECT_EQ(g, twin.encode(s));
}

TEST(SentenceEncoder, RejectsEmptyInput) {
  SentenceEncoder enc(toy_vocab(), {8, 1});
  EXPECT_THROW(enc.encode(std::vector<Tokens>{}), EncoderError);
  EXPECT_THROW(enc.encode(std::vector<Tokens>{{}}), EncoderError);
}

TEST(ImageEncoder, ShapeAndWidthCheck) {
  ImageEncoder enc({8, 16, 2, 2, 32, 0.1, true, 5});
  std::mt19937_64 rng(1);
  const Mat out = enc.encode(nn::gaussian(4, 8, rng, 1.0));
  EXPECT_EQ(out.rows(), 4);
  EXPECT_EQ(out.cols(), 16);
  EXPECT_TRUE(out.allFinite());
  EXPECT_THROW(enc.encode(nn::gaussian(4, 7, rng, 1.0)), EncoderError);
  EXPECT_THROW(enc.encode(Mat(0, 8)), EncoderError);
  ImageEncoderConfig bad;
  bad.layers = 0;
  EXPECT_THROW(ImageEncoder{bad}, EncoderError);
}

TEST(ImageEncoder, PermutationEquivariant) {
  ImageEncoder enc({8, 16, 2, 4, 32, 1.0, true, 9});
  std::mt19937_64 rng(2);
  const Mat x = nn::gaussian(5, 8, rng, 1.0);
  std::vector<int> perm{3, 0, 4, 1, 2};
  Mat px(5, 8);
  for (int k = 0; k < 5; ++k) px.row(k) = x.row(perm[static_cast<std::size_t>(k)]);
  const Mat y = enc.encode(x), py = enc.encode(px);
  double worst = 0.0;
  for (int k = 0; k < 5; ++k) worst = std::max(worst, (py.row(k) - y.row(perm[static_cast<std::size_t>(k)])).cwiseAbs().maxCoeff());
  EXPECT_LE(worst, 1e-5);
}

TEST(Encoders, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  SentenceEncoder sent(toy_vocab(), {8, 4});
  ImageEncoder img({6, 8, 2, 2, 12, 1.0, true, 4});
  const std::vector<Tokens> s{{"a", "b"}, {"c", "d"}, {"e"}};
  const Mat x = nn::gaussian(3, 6, rng, 1.0);
  nn::ParamList params;
  sent.collect(params, "sent");
  img.collect(params, "img");
  auto forward = [&](ad::Tape& t) { return ad::sum_all(ad::tanh(ad::matmul_nt(sent.encode(t, s), img.encode(t, x)))); };
  std::vector<ad::Parameter*> ps;
  for (auto& [n, p] : params) ps.push_back(p);
  const double err = oracle::grad_check(
      ps,
      [&] {
        ad::Tape t;
        return forward(t).scalar();
      },
      [&] {
        ad::Tape t;
        t.backward(forward(t));
      });
  EXPECT_LE(err, 1e-3);
}

}  // namespace
}  // namespace msmo::encoders
