#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "msmo/checkpoint.hpp"

namespace msmo::checkpoint {
namespace {

namespace fs = std::filesystem;

TEST(Checkpoint, RoundTripAndHashCheck) {
  std::mt19937_64 rng(1);
  nn::Linear a(3, 4, rng), b(3, 4, rng);
  nn::ParamList pa, pb;
  a.collect(pa, "lin");
  b.collect(pb, "lin");
  const auto stem = fs::temp_directory_path() / "msmo_ckpt_test" / "model";
  save(stem, "toy", pa, {{"dim", 4}});
  const auto manifest = load(stem, "toy", pb);
  EXPECT_EQ(a.weight.value, b.weight.value);
  EXPECT_EQ(manifest["dim"], 4);
  EXPECT_THROW(load(stem, "other", pb), CheckpointError);

  nn::Linear c(3, 5, rng);
  nn::ParamList pc;
  c.collect(pc, "lin");
  EXPECT_THROW(load(stem, "toy", pc), CheckpointError);

  auto blob = read_file(blob_path(stem));
  blob[blob.size() - 1] ^= 1;
  write_file(blob_path(stem), blob);
  EXPECT_THROW(load(stem, "toy", pb), CheckpointError);
}

TEST(Checkpoint, IdenticalParametersGiveIdenticalFiles) {
  std::mt19937_64 r1(5), r2(5);
  nn::Linear a(2, 2, r1), b(2, 2, r2);
  nn::ParamList pa, pb;
  a.collect(pa, "x");
  b.collect(pb, "x");
  const auto dir = fs::temp_directory_path() / "msmo_ckpt_test";
  save(dir / "a", "toy", pa, {});
  save(dir / "b", "toy", pb, {});
  EXPECT_EQ(read_file(blob_path(dir / "a")), read_file(blob_path(dir / "b")));
}

}  // namespace
}  // namespace msmo::checkpoint
