#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "cscde/data.hpp"

using namespace cscde;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("cscde_data_" + name);
  fs::remove_all(p);
  return p;
}

GeneratorConfig small(std::size_t cases = 10) {
  GeneratorConfig g;
  g.n_cases = cases;
  g.size = 32;
  return g;
}

}  // namespace

TEST(Pgm, RoundTripAndComments) {
  GrayImage img{3, 2, {0, 1, 2, 253, 254, 255}};
  std::ostringstream os;
  write_pgm(os, img);
  const GrayImage back = parse_pgm(os.str());
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, img.pixels);
  const std::string commented = std::string("P5\n# made by hand\n2 1\n255\n") + "\x07\x09";
  EXPECT_EQ(parse_pgm(commented).pixels, (std::vector<std::uint8_t>{7, 9}));
}

TEST(Pgm, MalformedInputsAreFormatErrors) {
  EXPECT_THROW(parse_pgm(""), FormatError);
  EXPECT_THROW(parse_pgm("P2\n1 1\n255\n0"), FormatError);
  EXPECT_THROW(parse_pgm("P5\n4 4\n255\n" + std::string(15, '\0')), FormatError);
  EXPECT_THROW(parse_pgm("P5\n0 4\n255\n"), FormatError);
  EXPECT_THROW(parse_pgm("P5\n1 1\n65535\n\0\0"), FormatError);
}

TEST(Generator, FixedSeedIsDeterministic) {
  const auto a = generate(small()), b = generate(small());
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].image, b.train[i].image);
    EXPECT_EQ(a.train[i].mask, b.train[i].mask);
  }
  auto other = small();
  other.seed = 43;
  EXPECT_NE(generate(other).train[0].image, a.train[0].image);
}

TEST(Generator, SplitIsEightyTwenty) {
  const auto ds = generate(small(10));
  EXPECT_EQ(ds.train.size(), 8u);
  EXPECT_EQ(ds.val.size(), 2u);
  EXPECT_EQ(ds.manifest.train.size(), 8u);
  EXPECT_EQ(ds.manifest.val.size(), 2u);
  std::set<std::string> ids(ds.manifest.train.begin(), ds.manifest.train.end());
  for (const auto& id : ds.manifest.val) EXPECT_FALSE(ids.count(id));
}

TEST(Generator, NoiselessImagesHaveOneLevelPerClass) {
  auto g = small(6);
  g.noise_sigma = 0;
  for (const auto& c : generate(g).train) {
    std::map<std::uint8_t, std::set<float>> levels;
    for (std::size_t i = 0; i < c.image.size(); ++i) levels[c.mask[i]].insert(c.image[i]);
    EXPECT_TRUE(levels.count(0));
    for (const auto& [cls, vals] : levels) EXPECT_EQ(vals.size(), 1u) << int(cls);
    std::set<float> all;
    for (const auto& [cls, vals] : levels) all.insert(*vals.begin());
    EXPECT_EQ(all.size(), levels.size());
  }
}

TEST(Generator, LabelsInRangeAndEveryClassTrained) {
  const auto ds = generate(small(20));
  std::set<int> seen;
  for (const auto& c : ds.train)
    for (auto v : c.mask.vec()) {
      EXPECT_LT(v, 4);
      seen.insert(v);
    }
  EXPECT_EQ(seen, (std::set<int>{0, 1, 2, 3}));
}

TEST(Generator, RejectsBadConfigs) {
  auto g = small();
  g.size = 97;
  EXPECT_THROW(generate(g), ConfigError);
  g = small();
  g.n_classes = 1;
  EXPECT_THROW(generate(g), ConfigError);
  g = small();
  g.noise_sigma = -1;
  EXPECT_THROW(generate(g), ConfigError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const fs::path dir = scratch("roundtrip");
  const auto ds = generate(small());
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.manifest.n_classes, 4u);
  EXPECT_EQ(back.manifest.image_size, 32u);
  ASSERT_EQ(back.train.size(), ds.train.size());
  ASSERT_EQ(back.val.size(), ds.val.size());
  // Stored images are already 8-bit, so the round trip is exact.
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    EXPECT_EQ(back.train[i].image, ds.train[i].image);
    EXPECT_EQ(back.train[i].mask, ds.train[i].mask);
  }
  fs::remove_all(dir);
}

TEST(Dataset, TruncatedImageIsFormatError) {
  const fs::path dir = scratch("truncated");
  save_dataset(generate(small()), dir);
  const fs::path img = dir / "images" / "case_0000.pgm";
  ASSERT_TRUE(fs::exists(img));
  fs::resize_file(img, fs::file_size(img) - 10);
  EXPECT_THROW(load_dataset(dir), FormatError);
  fs::remove_all(dir);
}

TEST(Dataset, OutOfRangeLabelIsDataError) {
  const fs::path dir = scratch("badlabel");
  const auto ds = generate(small());
  save_dataset(ds, dir);
  LabelMap m = ds.train[0].mask;
  m[0] = 4;
  write_pgm(dir / "masks" / (ds.train[0].id + ".pgm"), GrayImage{m.w(), m.h(), m.vec()});
  EXPECT_THROW(load_dataset(dir), DataError);
  fs::remove_all(dir);
}

TEST(Dataset, MissingManifestIsDataError) {
  EXPECT_THROW(load_dataset(scratch("missing")), DataError);
}
