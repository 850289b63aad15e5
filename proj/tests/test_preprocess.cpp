#include <gtest/gtest.h>

#include <random>

#include "p2s/png_io.hpp"
#include "p2s/preprocess.hpp"

using namespace p2s;

namespace {

Gray8 block_mask(std::size_t w, std::size_t h, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    Gray8 m(w, h);
    for (std::size_t y = r0; y <= r1; ++y)
        for (std::size_t x = c0; x <= c1; ++x) m.at(x, y) = 1;
    return m;
}

Gray8 random_gray(std::size_t w, std::size_t h, std::mt19937_64& rng, int lo = 0, int hi = 255) {
    std::uniform_int_distribution<int> u(lo, hi);
    Gray8 g(w, h);
    for (auto& v : g.pixels) v = static_cast<std::uint8_t>(u(rng));
    return g;
}

}  // namespace

TEST(Crop, PadsAndSquaresTheBoundingBox) {
    auto mask = block_mask(10, 10, 2, 4, 3, 5);
    EXPECT_EQ(crop_box(mask, 1), (Box{1, 2, 5, 6}));
    std::mt19937_64 rng(1);
    Triple t{random_gray(10, 10, rng), random_gray(10, 10, rng), mask};
    auto c = crop_to_mask(t, 1);
    EXPECT_EQ(c.image.width, 5u);
    EXPECT_EQ(c.image.height, 5u);
    EXPECT_EQ(c.image.at(0, 0), t.image.at(2, 1));
    EXPECT_EQ(c.doodle.at(4, 4), t.doodle.at(6, 5));
}

TEST(Crop, ShorterSideGrowsTowardsASquare) {
    auto mask = block_mask(20, 20, 8, 9, 4, 13);  // 2 x 10 box
    auto b = crop_box(mask, 1);
    EXPECT_EQ(b.cols(), 12u);
    EXPECT_EQ(b.rows(), 12u);
    EXPECT_LE(b.row0, 7u);
    EXPECT_GE(b.row1, 10u);
}

TEST(Crop, LargeBoxSkipsCropping) {
    auto mask = block_mask(10, 10, 1, 8, 1, 8);  // 64 >= 50
    std::mt19937_64 rng(2);
    Triple t{random_gray(10, 10, rng), random_gray(10, 10, rng), mask};
    auto c = crop_to_mask(t, 1);
    EXPECT_EQ(c.image, t.image);
    EXPECT_EQ(c.mask, t.mask);
}

TEST(Crop, DefaultPaddingCoversSmallImages) {
    // Any pixel of an image up to 101 px is within 100 px of every border.
    std::mt19937_64 rng(3);
    for (std::size_t side : {16u, 64u, 101u}) {
        for (int trial = 0; trial < 20; ++trial) {
            Gray8 mask(side, side);
            mask.at(rng() % side, rng() % side) = 1;
            auto b = crop_box(mask);
            EXPECT_EQ(b, (Box{0, 0, side - 1, side - 1})) << side;
        }
    }
}

TEST(Crop, NeverDropsMaskPixels) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t w = 20 + rng() % 300, h = 20 + rng() % 300;
        const std::size_t r0 = rng() % h, c0 = rng() % w;
        const std::size_t r1 = std::min(h - 1, r0 + rng() % 40), c1 = std::min(w - 1, c0 + rng() % 40);
        auto mask = block_mask(w, h, r0, r1, c0, c1);
        std::size_t before = 0, after = 0;
        for (auto v : mask.pixels) before += v;
        Triple t{mask, mask, mask};
        auto c = crop_to_mask(t, 5 + rng() % 100);
        for (auto v : c.mask.pixels) after += v;
        EXPECT_EQ(before, after);
        EXPECT_TRUE(c.mask.width == c.mask.height || c.mask.width == w || c.mask.height == h);
    }
}

TEST(Crop, EmptyMaskAndMismatchedRastersAreErrors) {
    EXPECT_THROW(crop_box(Gray8(5, 5)), std::invalid_argument);
    Triple t{Gray8(5, 5), Gray8(4, 5), block_mask(5, 5, 0, 0, 0, 0)};
    EXPECT_THROW(crop_to_mask(t), std::invalid_argument);
}

TEST(Resize, ConstantImageStaysConstant) {
    Gray8 g(512, 512, 77);
    auto r = resize(g, 256, Interp::bilinear);
    EXPECT_EQ(r.width, 256u);
    for (auto v : r.pixels) EXPECT_EQ(v, 77);
}

TEST(Resize, NearestKeepsMasksBinary) {
    std::mt19937_64 rng(5);
    auto m = random_gray(37, 53, rng, 0, 1);
    for (std::size_t side : {16u, 64u, 256u}) {
        auto r = resize(m, side, Interp::nearest);
        for (auto v : r.pixels) EXPECT_TRUE(v == 0 || v == 1);
    }
}

TEST(Resize, SameSizeIsIdentity) {
    std::mt19937_64 rng(6);
    auto g = random_gray(256, 256, rng);
    EXPECT_EQ(resize(g, 256, Interp::bilinear), g);
    EXPECT_EQ(resize(g, 256, Interp::nearest), g);
}

TEST(Resize, ZeroDimensionIsAnError) {
    EXPECT_THROW(resize(Gray8(0, 4), 16, Interp::bilinear), std::invalid_argument);
    EXPECT_THROW(resize(Gray8(4, 4), 0, Interp::bilinear), std::invalid_argument);
}

TEST(Resize, ColourIsConvertedToLuminance) {
    Image8 rgb{2, 1, 3, {255, 0, 0, 0, 0, 255}};
    auto g = to_gray(rgb);
    EXPECT_EQ(g.pixels[0], 76);  // 0.299 * 255
    EXPECT_EQ(g.pixels[1], 29);  // 0.114 * 255
    EXPECT_EQ(resize_and_gray(rgb, 16, Interp::nearest).width, 16u);
}

TEST(Resize, DoodleMaskCountsAlphaOnlyStrokes) {
    Image8 rgba{2, 1, 4, {0, 0, 0, 255, 0, 0, 0, 0}};
    auto m = nonzero_mask(rgba);
    EXPECT_EQ(m.pixels[0], 255);
    EXPECT_EQ(m.pixels[1], 0);
}

TEST(Equalize, TwoLevelImageIsUnchanged) {
    Gray8 g(8, 8);
    for (std::size_t i = 32; i < 64; ++i) g.pixels[i] = 255;
    EXPECT_EQ(equalize_histogram(g), g);
}

TEST(Equalize, PreservesRankOrder) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto g = random_gray(32, 32, rng, 40, 120);
        auto e = equalize_histogram(g);
        for (int k = 0; k < 500; ++k) {
            auto i = rng() % g.size(), j = rng() % g.size();
            if (g.pixels[i] <= g.pixels[j]) {
                EXPECT_LE(e.pixels[i], e.pixels[j]);
            }
        }
    }
}

TEST(Equalize, HistogramDoesNotGetLessUniform) {
    // Equalization moves and merges intensity levels but never splits one, so
    // over all 256 levels the bin-count variance can only grow. Uniformity is
    // therefore measured on 16 bins of 16 levels each.
    std::mt19937_64 rng(8);
    auto bin_variance = [](const Gray8& g) {
        std::array<double, 16> h{};
        for (auto v : g.pixels) h[v / 16] += 1;
        const double mean = static_cast<double>(g.size()) / 16.0;
        double s = 0;
        for (double c : h) s += (c - mean) * (c - mean);
        return s / 16.0;
    };
    for (int trial = 0; trial < 20; ++trial) {
        std::normal_distribution<double> n(100, 15);
        Gray8 g(64, 64);
        for (auto& v : g.pixels) v = static_cast<std::uint8_t>(std::clamp(std::lround(n(rng)), 0L, 255L));
        EXPECT_LE(bin_variance(equalize_histogram(g)), bin_variance(g));
    }
}

TEST(Equalize, SpansTheFullRange) {
    std::mt19937_64 rng(9);
    auto e = equalize_histogram(random_gray(16, 16, rng, 50, 60));
    EXPECT_EQ(*std::min_element(e.pixels.begin(), e.pixels.end()), 0);
    EXPECT_EQ(*std::max_element(e.pixels.begin(), e.pixels.end()), 255);
}

TEST(Encode, DoodleValuesFollowTheClassIndex) {
    EXPECT_NEAR(doodle_class_value(0, 23), 1.0 / 23.0, 1e-7);
    EXPECT_NEAR(doodle_class_value(0, 23), 0.04348, 1e-5);
    EXPECT_EQ(doodle_class_value(22, 23), 1.0f);
    EXPECT_THROW(doodle_class_value(23, 23), std::out_of_range);
    EXPECT_THROW(doodle_class_value(-1, 23), std::out_of_range);
}

TEST(Encode, NormalizesAllThreeRasters) {
    Gray8 img(2, 1), doo(2, 1), mask(2, 1);
    img.pixels = {255, 0};
    doo.pixels = {0, 200};
    mask.pixels = {1, 0};
    auto e = encode_and_normalize(img, doo, &mask, 1, 3);
    EXPECT_EQ(e.image.pixels, (std::vector<float>{1.0f, 0.0f}));
    EXPECT_EQ(e.doodle.pixels, (std::vector<float>{0.0f, 2.0f / 3.0f}));
    EXPECT_EQ(e.mask.pixels, (std::vector<float>{1.0f, 0.0f}));
}

TEST(Pipeline, TripleComesOutSquareAndBinary) {
    std::mt19937_64 rng(10);
    auto mask = block_mask(300, 200, 50, 70, 100, 140);
    for (auto& v : mask.pixels) v *= 255;
    Triple raw{random_gray(300, 200, rng), mask, mask};
    auto t = preprocess_triple(raw, 64);
    EXPECT_EQ(t.image.width, 64u);
    EXPECT_EQ(t.mask.height, 64u);
    for (auto v : t.mask.pixels) EXPECT_TRUE(v == 0 || v == 1);
    EXPECT_THROW(preprocess_inputs(Gray8(4, 4), Gray8(5, 4), 16), std::invalid_argument);
}

TEST(Png, GrayRoundTripIsExact) {
    std::mt19937_64 rng(11);
    auto g = random_gray(33, 17, rng);
    EXPECT_EQ(decode_png_gray(encode_png(g)), g);
}

TEST(Png, GarbageAndOversizeAreRejected) {
    EXPECT_THROW(decode_png({1, 2, 3, 4}), PngError);
    auto bytes = encode_png(Gray8(64, 64));
    EXPECT_THROW(decode_png(bytes, 100), PngError);
    EXPECT_NO_THROW(decode_png(bytes, 64 * 64));
}
