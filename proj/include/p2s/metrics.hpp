#pragma once

// Overlap and ranking metrics on binary masks and probability maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace p2s {

struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::size_t total() const { return tp + fp + fn + tn; }
};

inline Confusion confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    if (pred.size() != truth.size())
        throw std::invalid_argument("metrics: shape mismatch " + std::to_string(pred.size()) + " vs " +
                                    std::to_string(truth.size()) + " pixels");
    Confusion c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, t = truth[i] != 0;
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

/// 2|X n Y| / (|X| + |Y|); 1 when both masks are empty.
inline double dice_coefficient(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    auto c = confusion(pred, truth);
    const std::size_t denom = 2 * c.tp + c.fp + c.fn;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

/// |X n Y| / |X u Y|; 1 when both masks are empty.
inline double jaccard_index(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    auto c = confusion(pred, truth);
    const std::size_t uni = c.tp + c.fp + c.fn;
    return uni == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(uni);
}

inline double binary_accuracy(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    auto c = confusion(pred, truth);
    if (c.total() == 0) throw std::invalid_argument("binary_accuracy: empty masks");
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

class DegenerateLabels : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

/// Mann-Whitney AUC: the probability that a random positive pixel outranks
/// a random negative one, ties counting one half. The numerator is kept as
/// an integer count of half-pairs so the result is a single division.
template <typename F>
double pixel_auc(std::span<const F> probs, std::span<const std::uint8_t> truth) {
    if (probs.size() != truth.size())
        throw std::invalid_argument("pixel_auc: shape mismatch " + std::to_string(probs.size()) + " vs " +
                                    std::to_string(truth.size()) + " pixels");
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
    std::uint64_t neg_below = 0, pos = 0, neg = 0;
    std::uint64_t half_pairs = 0;  // 2 * concordant + ties
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::uint64_t gp = 0, gn = 0;
        while (j < order.size() && probs[order[j]] == probs[order[i]]) {
            (truth[order[j]] ? gp : gn) += 1;
            ++j;
        }
        half_pairs += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        pos += gp;
        neg += gn;
        i = j;
    }
    if (pos == 0 || neg == 0) throw DegenerateLabels("pixel_auc: labels are all positive or all negative");
    return static_cast<double>(half_pairs) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

template <typename F>
std::vector<std::uint8_t> binarize(std::span<const F> probs, double threshold) {
    std::vector<std::uint8_t> out(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) out[i] = static_cast<double>(probs[i]) >= threshold ? 1 : 0;
    return out;
}

/// Per-sample scores, as fractions. auc is empty for degenerate samples.
struct SampleScores {
    double dice = 0, jaccard = 0, accuracy = 0;
    std::optional<double> auc;
};

template <typename F>
SampleScores score_sample(std::span<const F> probs, std::span<const std::uint8_t> truth, double threshold) {
    auto pred = binarize(probs, threshold);
    SampleScores s;
    s.dice = dice_coefficient(pred, truth);
    s.jaccard = jaccard_index(pred, truth);
    s.accuracy = binary_accuracy(pred, truth);
    try {
        s.auc = pixel_auc(probs, truth);
    } catch (const DegenerateLabels&) {
    }
    return s;
}

}  // namespace p2s
