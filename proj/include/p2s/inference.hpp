#pragma once

// Single-pair inference at the caller's resolution.

#include "p2s/model.hpp"
#include "p2s/preprocess.hpp"

namespace p2s {

struct Prediction {
    GrayF prob;  // same dimensions as the request image
    Gray8 mask;  // {0,1}
};

/// Resizes and equalizes the pair to the model side (no crop), encodes the
/// doodle with the class value, runs the model in infer mode and maps the
/// probability map back to the input dimensions bilinearly.
inline Prediction predict(const Prompt2SegModel<float>& model, const Gray8& image, const Gray8& doodle, int class_id,
                          int num_classes, double threshold = 0.5) {
    const std::size_t side = model.config().input_side;
    auto [img, doo] = preprocess_inputs(image, doodle, side);
    auto enc = encode_and_normalize(img, doo, nullptr, class_id, num_classes);
    Shape s{1, side, side, 1};
    GrayF prob(side, side);
    {
        NoGradGuard guard;
        auto out = model.forward(Tensor<float>(s, std::move(enc.image.pixels)),
                                 Tensor<float>(s, std::move(enc.doodle.pixels)), Mode::infer);
        auto d = out.data();
        std::copy(d.begin(), d.end(), prob.pixels.begin());
    }
    Prediction p;
    p.prob = resize_to(prob, image.width, image.height, Interp::bilinear);
    p.mask = Gray8(image.width, image.height);
    for (std::size_t i = 0; i < p.mask.size(); ++i) p.mask.pixels[i] = p.prob.pixels[i] >= threshold ? 1 : 0;
    return p;
}

/// 0-255 quantization of a probability map.
inline Gray8 quantize_probability(const GrayF& prob) {
    Gray8 out(prob.width, prob.height);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * prob.pixels[i]), 0L, 255L));
    return out;
}

}  // namespace p2s
