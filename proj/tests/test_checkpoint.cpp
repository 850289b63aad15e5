#include <gtest/gtest.h>

#include <random>

#include "p2s/checkpoint.hpp"
#include "p2s/inference.hpp"

using namespace p2s;

namespace {

// A desk model whose buffers and betas are non-trivial, so a loader that
// dropped any of them would change the output.
Prompt2SegModel<float> perturbed_model(std::uint64_t seed) {
    Prompt2SegModel<float> m(ModelConfig::desk(), seed);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-0.2f, 0.2f);
    for (const auto& p : m.store().params()) {
        auto t = p.tensor;
        for (auto& v : t.mutable_data()) v += u(rng);
    }
    for (const auto& b : m.store().buffers()) {
        auto t = b.tensor;
        for (auto& v : t.mutable_data()) v = b.name.ends_with("running_var") ? 1.0f + std::abs(u(rng)) : u(rng);
    }
    return m;
}

Tensor<float> random_input(std::mt19937_64& rng, float scale) {
    std::uniform_real_distribution<float> u(0, scale);
    std::vector<float> v(64 * 64);
    for (auto& x : v) x = u(rng);
    return Tensor<float>({1, 64, 64, 1}, std::move(v));
}

struct Parts {
    json header;
    std::vector<std::uint8_t> payload;
};

Parts split(const std::vector<std::uint8_t>& bytes) {
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= std::uint64_t(bytes[8 + i]) << (8 * i);
    Parts p;
    p.header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(hlen));
    p.payload.assign(bytes.begin() + 16 + static_cast<long>(hlen), bytes.end());
    return p;
}

std::vector<std::uint8_t> join(const Parts& p) {
    const std::string h = p.header.dump();
    std::vector<std::uint8_t> out{'P', '2', 'S', 'C', 1, 0, 0, 0};
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(std::uint64_t(h.size()) >> (8 * i)));
    out.insert(out.end(), h.begin(), h.end());
    out.insert(out.end(), p.payload.begin(), p.payload.end());
    return out;
}

void expect_rejected(const std::vector<std::uint8_t>& bytes, const std::string& fragment) {
    try {
        parse_checkpoint(bytes);
        ADD_FAILURE() << "expected CheckpointError containing '" << fragment << "'";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitIdentical) {
    auto m = perturbed_model(3);
    CheckpointProvenance prov{7, 2, 11, 0.875, {"ellipse", "rectangle", "ring"}};
    auto path = std::filesystem::temp_directory_path() / ("p2s_ckpt_" + std::to_string(::getpid()) + ".p2sc");
    save_checkpoint(path, m, prov);
    auto loaded = load_checkpoint(path);
    std::filesystem::remove(path);

    EXPECT_EQ(loaded.model.config(), m.config());
    EXPECT_EQ(loaded.provenance.seed, 7u);
    EXPECT_EQ(loaded.provenance.fold, 2);
    EXPECT_EQ(loaded.provenance.epoch, 11);
    EXPECT_EQ(loaded.provenance.best_val_dice, 0.875);
    EXPECT_EQ(loaded.provenance.class_names, prov.class_names);
    EXPECT_EQ(loaded.model_id, model_id(m));
    EXPECT_EQ(checkpoint_payload(loaded.model), checkpoint_payload(m));

    std::mt19937_64 rng(10);
    for (int i = 0; i < 10; ++i) {
        auto img = random_input(rng, 1.0f), doo = random_input(rng, 1.0f);
        auto a = m.forward(img, doo, Mode::infer), b = loaded.model.forward(img, doo, Mode::infer);
        ASSERT_EQ(a.size(), b.size());
        EXPECT_EQ(0, std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float))) << "input " << i;
    }
}

TEST(Checkpoint, HeaderDescribesEveryTensor) {
    auto m = perturbed_model(4);
    auto p = split(serialize_checkpoint(m, {}));
    EXPECT_EQ(p.header.at("parameter_count").get<std::size_t>(), 122095u);
    EXPECT_EQ(p.header.at("payload_bytes").get<std::size_t>(), p.payload.size());
    EXPECT_EQ(p.payload.size(), 4u * (122095u + 4164u));
    std::size_t params = 0, buffers = 0;
    for (const auto& t : p.header.at("tensors")) {
        std::size_t n = 1;
        for (auto d : t.at("shape")) n *= d.get<std::size_t>();
        (t.at("kind") == "param" ? params : buffers) += n;
    }
    EXPECT_EQ(params, 122095u);
    EXPECT_EQ(buffers, 4164u);
    EXPECT_EQ(p.header.at("config").at("fusion_mode"), "concat");
}

TEST(Checkpoint, ModelIdTracksTheWeights) {
    auto a = perturbed_model(5), b = perturbed_model(5), c = perturbed_model(6);
    EXPECT_EQ(model_id(a), model_id(b));
    EXPECT_NE(model_id(a), model_id(c));
    EXPECT_EQ(model_id(a).size(), 32u);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    auto bytes = serialize_checkpoint(perturbed_model(7), {});
    expect_rejected({'n', 'o', 'p', 'e'}, "bad magic");
    auto v = bytes;
    v[4] = 9;
    expect_rejected(v, "unsupported version");
    v = bytes;
    v[15] = 0x7f;
    expect_rejected(v, "header length");
    v = bytes;
    v.pop_back();
    expect_rejected(v, "payload is");
    v = bytes;
    v[20] = '#';
    expect_rejected(v, "malformed header");
}

TEST(Checkpoint, LayoutErrorsAreRejected) {
    auto base = split(serialize_checkpoint(perturbed_model(8), {}));

    auto gap = base;
    gap.header["tensors"][1]["offset"] = gap.header["tensors"][1]["offset"].get<std::size_t>() + 4;
    expect_rejected(join(gap), "gap or overlap");

    auto renamed = base;
    renamed.header["tensors"][0]["name"] = "bogus.kernel";
    expect_rejected(join(renamed), "unexpected tensor bogus.kernel");

    auto reshaped = base;
    auto& shape = reshaped.header["tensors"][0]["shape"];
    std::swap(shape[0], shape[2]);
    expect_rejected(join(reshaped), "has shape");

    auto other_config = base;
    other_config.header["config"]["use_se"] = false;
    expect_rejected(join(other_config), "unexpected tensor");

    auto bad_config = base;
    bad_config.header["config"]["input_side"] = 50;
    expect_rejected(join(bad_config), "input_side");

    auto missing = base;
    missing.header.erase("provenance");
    expect_rejected(join(missing), "malformed header");
}

TEST(Checkpoint, MissingFileNamesThePath) {
    try {
        load_checkpoint("/nonexistent/model.p2sc");
        FAIL();
    } catch (const std::exception& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/model.p2sc"), std::string::npos);
    }
}

TEST(Inference, PredictionComesBackAtTheRequestSize) {
    auto m = perturbed_model(9);
    std::mt19937_64 rng(9);
    Gray8 img(100, 70), doo(100, 70);
    for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng());
    for (std::size_t y = 30; y < 40; ++y)
        for (std::size_t x = 40; x < 60; ++x) doo.at(x, y) = 255;
    auto p = predict(m, img, doo, 1, 3, 0.5);
    EXPECT_EQ(p.prob.width, 100u);
    EXPECT_EQ(p.mask.height, 70u);
    for (std::size_t i = 0; i < p.mask.size(); ++i) {
        EXPECT_EQ(p.mask.pixels[i] != 0, p.prob.pixels[i] >= 0.5f);
        EXPECT_GE(p.prob.pixels[i], 0.0f);
        EXPECT_LE(p.prob.pixels[i], 1.0f);
    }
    auto again = predict(m, img, doo, 1, 3, 0.5);
    EXPECT_EQ(again.prob.pixels, p.prob.pixels);
    EXPECT_THROW(predict(m, img, Gray8(10, 10), 1, 3, 0.5), std::invalid_argument);
    EXPECT_THROW(predict(m, img, doo, 3, 3, 0.5), std::out_of_range);
}
