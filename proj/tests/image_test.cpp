#include <doctest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "xmodal/errors.hpp"
#include "xmodal/image.hpp"

using namespace xmodal;

namespace {

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

}  // namespace

TEST_CASE("PNG round trip quantizes to 1/255") {
  testing::TempDir dir("png");
  Image img = random_image(5, 7, 1);
  img.at(0, 0, 0) = 1.5f;   // clamped on write
  img.at(0, 0, 1) = -0.2f;
  save_png(img, dir / "a.png");
  const Image back = load_png(dir / "a.png");
  REQUIRE(back.height == 5);
  REQUIRE(back.width == 7);
  CHECK(back.at(0, 0, 0) == 1.0f);
  CHECK(back.at(0, 0, 1) == 0.0f);
  for (std::size_t i = 3; i < img.pixels.size(); ++i) {
    CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= 0.5f / 255.0f + 1e-6f);
  }
  save_png(back, dir / "b.png");
  CHECK(load_png(dir / "b.png") == back);
  CHECK_THROWS_AS(load_png(dir / "missing.png"), DataError);
}

TEST_CASE("resize keeps constants and identity size") {
  Image c(9, 13, 0.25f);
  const Image r = resize_bilinear(c, 4, 6);
  CHECK(r.height == 4);
  CHECK(r.width == 6);
  for (float p : r.pixels) CHECK(p == doctest::Approx(0.25f));
  const Image img = random_image(6, 6, 2);
  const Image same = resize_bilinear(img, 6, 6);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(same.pixels[i] == doctest::Approx(img.pixels[i]));
}

TEST_CASE("flip is an involution and crop picks the right window") {
  const Image img = random_image(4, 5, 3);
  CHECK(flip_horizontal(flip_horizontal(img)) == img);
  CHECK(flip_horizontal(img).at(1, 0, 2) == img.at(1, 4, 2));

  const Image c = crop(img, 1, 2, 2, 3);
  CHECK(c.height == 2);
  CHECK(c.width == 3);
  CHECK(c.at(0, 0, 0) == img.at(1, 2, 0));
  CHECK(c.at(1, 2, 1) == img.at(2, 4, 1));
  CHECK_THROWS(crop(img, 3, 0, 2, 2));

  const Image cc = center_crop(random_image(6, 6, 4), 4);
  CHECK(cc.height == 4);
}

TEST_CASE("rotation by zero is the identity; padding squares the image") {
  const Image img = random_image(6, 6, 5);
  const Image r = rotate(img, 0.0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(r.pixels[i] == doctest::Approx(img.pixels[i]));

  const Image wide = random_image(3, 7, 6);
  for (PadMode mode : {PadMode::zeros, PadMode::edge, PadMode::reflect}) {
    const Image sq = pad_to_square(wide, mode);
    CHECK(sq.height == 7);
    CHECK(sq.width == 7);
  }
  const Image zero = pad_to_square(wide, PadMode::zeros);
  CHECK(zero.at(0, 0, 0) == 0.0f);
  const Image edge = pad_to_square(wide, PadMode::edge);
  CHECK(edge.at(0, 3, 1) == wide.at(0, 3, 1));
}

TEST_CASE("planar conversion round trips") {
  const Image img = random_image(3, 4, 7);
  const auto chw = to_planar(img);
  CHECK(chw[1 * 12 + 2 * 4 + 3] == img.at(2, 3, 1));
  CHECK(from_planar(chw, 3, 4) == img);
}
