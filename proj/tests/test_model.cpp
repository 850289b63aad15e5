#include <gtest/gtest.h>

#include "p2s/model.hpp"
#include "support/gradcheck.hpp"

using namespace p2s;
using namespace p2s::testing;

namespace {

// Expected counts come from tests/oracles/param_count.py.
ModelConfig variant(ModelConfig c, bool dw, bool se, bool rc) {
    c.use_depthwise = dw;
    c.use_se = se;
    c.use_residual = rc;
    return c;
}

bool has_name(const Prompt2SegModel<float>& m, const std::string& part) {
    for (const auto& p : m.store().params())
        if (p.name.find(part) != std::string::npos) return true;
    return false;
}

Tensor<float> random_image(std::size_t n, std::size_t side, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0, 1);
    std::vector<float> v(n * side * side);
    for (auto& x : v) x = u(rng);
    return Tensor<float>({n, side, side, 1}, std::move(v));
}

}  // namespace

TEST(ModelShapes, StageMapsHalveAndWiden) {
    Prompt2SegModel<float> m(ModelConfig::desk(), 1);
    std::mt19937_64 rng(1);
    auto maps = m.encode(random_image(2, 64, rng), Stream::image, Mode::infer);
    for (std::size_t i = 0; i < 5; ++i)
        EXPECT_EQ(maps[i].shape(), (Shape{2, 64u >> i, 64u >> i, std::size_t{8} << i})) << "stage " << i + 1;
}

TEST(ModelShapes, OutputIsProbabilityMap) {
    Prompt2SegModel<float> m(ModelConfig::desk(), 2);
    std::mt19937_64 rng(2);
    auto y = m.forward(random_image(2, 64, rng), random_image(2, 64, rng), Mode::train);
    EXPECT_EQ(y.shape(), (Shape{2, 64, 64, 1}));
    for (float v : y.data()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(ModelShapes, WrongInputShapeIsRejected) {
    Prompt2SegModel<float> m(ModelConfig::desk(), 3);
    EXPECT_THROW(m.forward(Tensor<float>({1, 32, 32, 1}), Tensor<float>({1, 32, 32, 1}), Mode::infer), ShapeError);
    EXPECT_THROW(m.forward(Tensor<float>({1, 64, 64, 1}), Tensor<float>({1, 64, 64, 2}), Mode::infer), ShapeError);
}

TEST(ModelConfigTest, ValidationRejectsBadConfigs) {
    ModelConfig c;
    c.input_side = 60;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.stage_filters = {8, 16, 24, 64, 128};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.allow_irregular_filters = true;
    EXPECT_NO_THROW(c.validate());
    c = ModelConfig{};
    c.se_reduction = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ParameterCount, DeskVariantsMatchClosedForm) {
    const auto desk = ModelConfig::desk();
    EXPECT_EQ(Prompt2SegModel<float>(desk).parameter_count(), 122095u);
    EXPECT_EQ(Prompt2SegModel<float>(desk).store().buffer_count(), 4164u);
    EXPECT_EQ(Prompt2SegModel<float>(variant(desk, false, false, false)).parameter_count(), 234511u);
    EXPECT_EQ(Prompt2SegModel<float>(variant(desk, true, false, false)).parameter_count(), 62319u);
    auto add = desk;
    add.fusion_mode = FusionMode::add;
    EXPECT_EQ(Prompt2SegModel<float>(add).parameter_count(), 92103u);
    auto shared = desk;
    shared.shared_encoder_weights = true;
    EXPECT_EQ(Prompt2SegModel<float>(shared).parameter_count(), 94996u);
    auto wide = desk;
    wide.stage_filters = {16, 32, 64, 128, 256};
    EXPECT_EQ(Prompt2SegModel<float>(wide).parameter_count(), 463236u);
}

TEST(ParameterCount, FullScaleConfigBreakdown) {
    Prompt2SegModel<float> m(ModelConfig::full_scale());
    auto b = parameter_breakdown(m);
    EXPECT_EQ(b.total, 7111755u);
    EXPECT_EQ(b.buffers, 33284u);
    EXPECT_EQ(b.by_module["decoder"], 3935740u);
    EXPECT_EQ(b.by_module["image_encoder"], 1587975u);
    EXPECT_EQ(b.by_module["doodle_encoder"], 1587975u);
    EXPECT_EQ(b.by_module["head"], 65u);
    EXPECT_EQ(b.by_kind["conv"], 6680530u);
    EXPECT_EQ(b.by_kind["batch_norm"], 33284u);
    EXPECT_EQ(b.by_kind["se_dense"], 397940u);
    EXPECT_EQ(b.by_kind["head_bias"], 1u);
}

TEST(ModelFlags, SwitchesRemoveTheirLayers) {
    const auto desk = ModelConfig::desk();
    Prompt2SegModel<float> full(desk), pwpw(variant(desk, false, false, false));
    EXPECT_TRUE(has_name(full, ".dw.kernel"));
    EXPECT_TRUE(has_name(full, ".se.fc1"));
    EXPECT_TRUE(has_name(full, ".shortcut.kernel"));
    EXPECT_FALSE(has_name(full, ".pw0."));
    EXPECT_FALSE(has_name(pwpw, ".dw."));
    EXPECT_FALSE(has_name(pwpw, ".se."));
    EXPECT_FALSE(has_name(pwpw, ".shortcut"));
    EXPECT_TRUE(has_name(pwpw, ".pw0.kernel"));
}

TEST(ModelFlags, SeHiddenWidthFloorsAtOne) {
    EXPECT_EQ(se_hidden_width(8, 16), 1u);
    EXPECT_EQ(se_hidden_width(64, 16), 4u);
    EXPECT_EQ(se_hidden_width(1024, 16), 64u);
}

TEST(ModelBehaviour, ZeroInputsGiveUniformHalfAtInit) {
    // Fresh BN statistics (0, 1) and zero betas map a zero input to zero at
    // every stage, so only the zero head bias reaches the sigmoid.
    Prompt2SegModel<float> m(ModelConfig::desk(), 4);
    Tensor<float> z({1, 64, 64, 1});
    auto y = m.forward(z, z, Mode::infer);
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(ModelBehaviour, OutputDependsOnTheDoodle) {
    Prompt2SegModel<float> m(ModelConfig::desk(), 5);
    std::mt19937_64 rng(5);
    auto img = random_image(1, 64, rng);
    Tensor<float> d1({1, 64, 64, 1}), d2({1, 64, 64, 1});
    for (std::size_t y = 10; y < 20; ++y)
        for (std::size_t x = 10; x < 20; ++x) d2.mutable_data()[y * 64 + x] = 1.0f;
    auto a = m.forward(img, d1, Mode::infer), b = m.forward(img, d2, Mode::infer);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, double(std::abs(a.data()[i] - b.data()[i])));
    EXPECT_GT(diff, 1e-4);
}

TEST(ModelBehaviour, EncodersDoNotShareWeightsByDefault) {
    Prompt2SegModel<float> m(ModelConfig::desk(), 6);
    std::mt19937_64 rng(6);
    auto doodle_maps = m.encode(random_image(2, 64, rng), Stream::doodle, Mode::train);
    sum(doodle_maps[4]).backward();
    for (const auto& p : m.store().params()) {
        if (p.name.starts_with("image_encoder")) {
            EXPECT_FALSE(p.tensor.has_grad()) << p.name;
        } else if (p.name.starts_with("doodle_encoder")) {
            EXPECT_TRUE(p.tensor.has_grad()) << p.name;
        }
    }
}

TEST(ModelBehaviour, SharedEncoderGivesIdenticalStreams) {
    auto cfg = ModelConfig::desk();
    cfg.shared_encoder_weights = true;
    Prompt2SegModel<float> m(cfg, 7);
    std::mt19937_64 rng(7);
    auto x = random_image(1, 64, rng);
    auto a = m.encode(x, Stream::image, Mode::infer), b = m.encode(x, Stream::doodle, Mode::infer);
    for (std::size_t i = 0; i < 5; ++i)
        EXPECT_TRUE(std::equal(a[i].data().begin(), a[i].data().end(), b[i].data().begin()));
}

TEST(ModelBehaviour, ConcatFusionKeepsBothStreams) {
    Prompt2SegModel<float> m(ModelConfig::desk(), 8);
    std::mt19937_64 rng(8);
    auto img = random_image(1, 16, rng), doo = random_image(1, 16, rng);
    auto f = m.fuse(img, doo);
    EXPECT_EQ(f.shape(), (Shape{1, 16, 16, 2}));
    auto s0 = slice_channels(f, 0, 1), s1 = slice_channels(f, 1, 2);
    EXPECT_TRUE(std::equal(s0.data().begin(), s0.data().end(), img.data().begin()));
    EXPECT_TRUE(std::equal(s1.data().begin(), s1.data().end(), doo.data().begin()));
}

TEST(ModelBehaviour, AddFusionWithZeroDoodleMapIsTheImageMap) {
    auto cfg = ModelConfig::desk();
    cfg.fusion_mode = FusionMode::add;
    Prompt2SegModel<float> m(cfg, 9);
    std::mt19937_64 rng(9);
    auto img = random_image(1, 16, rng);
    auto f = m.fuse(img, Tensor<float>({1, 16, 16, 1}));
    EXPECT_TRUE(std::equal(f.data().begin(), f.data().end(), img.data().begin()));
    EXPECT_THROW(m.fuse(img, Tensor<float>({1, 8, 8, 1})), ShapeError);
}

TEST(ModelBehaviour, SeedDeterminesInitialisation) {
    Prompt2SegModel<float> a(ModelConfig::desk(), 11), b(ModelConfig::desk(), 11), c(ModelConfig::desk(), 12);
    const auto& pa = a.store().params();
    bool all_same = true, any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        auto x = pa[i].tensor.data(), y = b.store().params()[i].tensor.data(), z = c.store().params()[i].tensor.data();
        all_same &= std::equal(x.begin(), x.end(), y.begin());
        any_diff |= !std::equal(x.begin(), x.end(), z.begin());
    }
    EXPECT_TRUE(all_same);
    EXPECT_TRUE(any_diff);
}

TEST(GradCheck, DprConvSeBlockAllVariants) {
    const std::vector<std::tuple<const char*, bool, bool, bool>> variants = {
        {"full", true, true, true}, {"dw+pw", true, false, false}, {"pw+pw", false, false, false}, {"no-se", true, false, true}};
    for (const auto& [name, dw, se, rc] : variants) {
        for (Mode mode : {Mode::train, Mode::infer}) {
            auto run = gradcheck_cases(
                [&, dw = dw, se = se, rc = rc](std::mt19937_64& rng) {
                    auto cfg = variant(ModelConfig::desk(), dw, se, rc);
                    auto store = std::make_shared<ParamStore<double>>();
                    auto block = std::make_shared<DprConvSeBlock<double>>(*store, "b", 3, 32, cfg, rng);
                    std::vector<TensorD> leaves{random_tensor({2, 4, 4, 3}, rng)};
                    for (auto& p : store->params()) {
                        auto d = p.tensor;
                        if (p.name.ends_with(".beta") || p.name.ends_with(".bias"))
                            for (auto& v : d.mutable_data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
                        leaves.push_back(p.tensor);
                    }
                    auto seed = rng();
                    return std::make_pair(std::function<TensorD(const std::vector<TensorD>&)>(
                                              [store, block, seed, mode](const std::vector<TensorD>& l) {
                                                  return weighted_sum(block->forward(l[0], mode), seed);
                                              }),
                                          leaves);
                },
                5, 21);
            const char* m = mode == Mode::train ? "train" : "infer";
            ASSERT_EQ(run.checks.size(), 5u) << name << "/" << m << " attempts " << run.attempts;
            EXPECT_LT(run.worst_rel(), 1e-4) << name << "/" << m;
            EXPECT_LT(run.worst_abs(), 1e-4) << name << "/" << m;
        }
    }
}
