#pragma once

// The dual-input DPRconvSE encoder-decoder.
//
// Parameter naming and canonical order (also the checkpoint order):
//   image_encoder.stage{1..5}, doodle_encoder.stage{1..5}   (or encoder.stage*
//   when the encoders share weights), decoder.stage{4..1}, head.{kernel,bias}.
// Inside a block:
//   dw.kernel [3,3,Cin]            (pw0.kernel [1,1,Cin,Cin] without depthwise)
//   bn1.{gamma,beta}
//   pw.kernel [1,1,Cin,F]  bn2.{gamma,beta}
//   se.fc1.{weight [F,H], bias [H]}  se.fc2.{weight [H,F], bias [F]}
//   shortcut.kernel [1,1,Cin,F]  shortcut_bn.{gamma,beta}
// Batch-norm running statistics are buffers named <bn>.running_{mean,var}.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "p2s/ops.hpp"

namespace p2s {

enum class FusionMode { concat, add };

struct ModelConfig {
    std::size_t input_side = 64;
    std::array<std::size_t, 5> stage_filters{8, 16, 32, 64, 128};
    std::size_t se_reduction = 16;
    bool use_depthwise = true;
    bool use_se = true;
    bool use_residual = true;
    FusionMode fusion_mode = FusionMode::concat;
    bool shared_encoder_weights = false;
    // Permits stage filter lists that do not double from stage to stage.
    bool allow_irregular_filters = false;

    static ModelConfig desk() { return {}; }
    static ModelConfig full_scale() {
        ModelConfig c;
        c.input_side = 256;
        c.stage_filters = {64, 128, 256, 512, 1024};
        return c;
    }

    void validate() const {
        if (input_side == 0 || input_side % 16 != 0)
            throw std::invalid_argument("model config: input_side must be a positive multiple of 16, got " +
                                        std::to_string(input_side));
        if (se_reduction == 0) throw std::invalid_argument("model config: se_reduction must be positive");
        for (std::size_t i = 0; i < stage_filters.size(); ++i) {
            if (stage_filters[i] == 0) throw std::invalid_argument("model config: stage filters must be positive");
            if (i > 0 && !allow_irregular_filters && stage_filters[i] != 2 * stage_filters[i - 1])
                throw std::invalid_argument("model config: stage filters must double from stage to stage");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Width of the squeeze-and-excitation bottleneck.
inline std::size_t se_hidden_width(std::size_t channels, std::size_t reduction) {
    return std::max<std::size_t>(1, channels / reduction);
}

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

/// Ordered registry of trainable parameters and non-trainable buffers.
template <typename T>
class ParamStore {
   public:
    Tensor<T> add_param(const std::string& name, Shape shape) {
        claim(name);
        Tensor<T> t(std::move(shape), T{0}, true);
        params_.push_back({name, t});
        return t;
    }

    Tensor<T> add_buffer(const std::string& name, Shape shape, T fill) {
        claim(name);
        Tensor<T> t(std::move(shape), fill, false);
        buffers_.push_back({name, t});
        return t;
    }

    const std::vector<NamedTensor<T>>& params() const { return params_; }
    const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }

    std::vector<Tensor<T>> param_tensors() const {
        std::vector<Tensor<T>> out;
        for (const auto& p : params_) out.push_back(p.tensor);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    std::size_t buffer_count() const {
        std::size_t n = 0;
        for (const auto& b : buffers_) n += b.tensor.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.clear_grad();
    }

   private:
    void claim(const std::string& name) {
        if (!names_.emplace(name, names_.size()).second)
            throw std::invalid_argument("parameter store: duplicate name " + name);
    }

    std::vector<NamedTensor<T>> params_;
    std::vector<NamedTensor<T>> buffers_;
    std::map<std::string, std::size_t> names_;
};

// He-uniform initialisation: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
void he_uniform(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
class BatchNormLayer {
   public:
    BatchNormLayer() = default;
    BatchNormLayer(ParamStore<T>& store, const std::string& prefix, std::size_t channels)
        : gamma_(store.add_param(prefix + ".gamma", {channels})),
          beta_(store.add_param(prefix + ".beta", {channels})),
          mean_(store.add_buffer(prefix + ".running_mean", {channels}, T{0})),
          var_(store.add_buffer(prefix + ".running_var", {channels}, T{1})) {
        for (auto& g : gamma_.mutable_data()) g = T{1};
    }

    Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
        Tensor<T> mean = mean_, var = var_;
        return batch_norm(x, gamma_, beta_, mean, var, mode);
    }

   private:
    Tensor<T> gamma_, beta_, mean_, var_;
};

template <typename T>
class PointwiseLayer {
   public:
    PointwiseLayer() = default;
    PointwiseLayer(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                   std::mt19937_64& rng)
        : kernel_(store.add_param(name, {1, 1, cin, cout})) {
        he_uniform(kernel_, cin, rng);
    }
    Tensor<T> operator()(const Tensor<T>& x) const { return pointwise_conv(x, kernel_); }

   private:
    Tensor<T> kernel_;
};

template <typename T>
class DenseLayer {
   public:
    DenseLayer() = default;
    DenseLayer(ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout,
               std::mt19937_64& rng)
        : weight_(store.add_param(prefix + ".weight", {cin, cout})), bias_(store.add_param(prefix + ".bias", {cout})) {
        he_uniform(weight_, cin, rng);
    }
    Tensor<T> operator()(const Tensor<T>& x) const { return dense(x, weight_, bias_); }

   private:
    Tensor<T> weight_, bias_;
};

/// Channel attention: gates = sigmoid(fc2(relu(fc1(gap(x))))), out = x * gates.
template <typename T>
class SqueezeExcite {
   public:
    SqueezeExcite() = default;
    SqueezeExcite(ParamStore<T>& store, const std::string& prefix, std::size_t channels, std::size_t reduction,
                  std::mt19937_64& rng)
        : hidden_(se_hidden_width(channels, reduction)),
          fc1_(store, prefix + ".fc1", channels, hidden_, rng),
          fc2_(store, prefix + ".fc2", hidden_, channels, rng) {}

    Tensor<T> gates(const Tensor<T>& x) const { return sigmoid(fc2_(relu(fc1_(global_avg_pool(x))))); }
    Tensor<T> operator()(const Tensor<T>& x) const { return scale_channels(x, gates(x)); }
    std::size_t hidden_width() const { return hidden_; }

   private:
    std::size_t hidden_ = 1;
    DenseLayer<T> fc1_, fc2_;
};

/// Depthwise-pointwise residual block with squeeze-and-excitation.
///
///   main     = SE(ReLU(BN(PW_f(ReLU(BN(DW3x3(x)))))))
///   shortcut = BN(PW_f(x))
///   out      = ReLU(main + shortcut)
///
/// The ablation switches swap DW for a Cin->Cin pointwise conv, drop SE, or
/// drop the shortcut.
template <typename T>
class DprConvSeBlock {
   public:
    DprConvSeBlock() = default;
    DprConvSeBlock(ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t filters,
                   const ModelConfig& cfg, std::mt19937_64& rng)
        : cin_(cin), filters_(filters) {
        if (cfg.use_depthwise) {
            dw_kernel_ = store.add_param(prefix + ".dw.kernel", {3, 3, cin});
            he_uniform(dw_kernel_, 9, rng);
        } else {
            pw0_ = PointwiseLayer<T>(store, prefix + ".pw0.kernel", cin, cin, rng);
        }
        bn1_ = BatchNormLayer<T>(store, prefix + ".bn1", cin);
        pw_ = PointwiseLayer<T>(store, prefix + ".pw.kernel", cin, filters, rng);
        bn2_ = BatchNormLayer<T>(store, prefix + ".bn2", filters);
        if (cfg.use_se) se_.emplace(store, prefix + ".se", filters, cfg.se_reduction, rng);
        if (cfg.use_residual) {
            shortcut_.emplace(store, prefix + ".shortcut.kernel", cin, filters, rng);
            shortcut_bn_.emplace(store, prefix + ".shortcut_bn", filters);
        }
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) const {
        if (x.rank() != 4 || x.dim(3) != cin_) bad_shape("dprconvse_block", x.shape(), "C == " + std::to_string(cin_));
        Tensor<T> spatial = dw_kernel_.defined() ? depthwise_conv(x, dw_kernel_) : (*pw0_)(x);
        Tensor<T> h = relu(bn1_(spatial, mode));
        h = relu(bn2_(pw_(h), mode));
        if (se_) h = (*se_)(h);
        if (!shortcut_) return h;
        return relu(add(h, (*shortcut_bn_)((*shortcut_)(x), mode)));
    }

    std::size_t in_channels() const { return cin_; }
    std::size_t filters() const { return filters_; }

   private:
    std::size_t cin_ = 0, filters_ = 0;
    Tensor<T> dw_kernel_;
    std::optional<PointwiseLayer<T>> pw0_;
    BatchNormLayer<T> bn1_, bn2_;
    PointwiseLayer<T> pw_;
    std::optional<SqueezeExcite<T>> se_;
    std::optional<PointwiseLayer<T>> shortcut_;
    std::optional<BatchNormLayer<T>> shortcut_bn_;
};

enum class Stream { image, doodle };

template <typename T>
using StageMaps = std::array<Tensor<T>, 5>;

template <typename T>
class Prompt2SegModel {
   public:
    explicit Prompt2SegModel(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const auto& f = cfg_.stage_filters;
        auto build_encoder = [&](const std::string& prefix, std::array<DprConvSeBlock<T>, 5>& enc) {
            std::size_t cin = 1;
            for (std::size_t i = 0; i < 5; ++i) {
                enc[i] = DprConvSeBlock<T>(store_, prefix + ".stage" + std::to_string(i + 1), cin, f[i], cfg_, rng);
                cin = f[i];
            }
        };
        if (cfg_.shared_encoder_weights) {
            build_encoder("encoder", image_enc_);
            doodle_enc_ = image_enc_;
        } else {
            build_encoder("image_encoder", image_enc_);
            build_encoder("doodle_encoder", doodle_enc_);
        }
        const std::size_t m = cfg_.fusion_mode == FusionMode::concat ? 2 : 1;
        // decoder_[i] produces the stage-(i+1) decoder map.
        decoder_[3] = DprConvSeBlock<T>(store_, "decoder.stage4", m * f[4] + m * f[3], f[3], cfg_, rng);
        for (int i = 2; i >= 0; --i)
            decoder_[i] = DprConvSeBlock<T>(store_, "decoder.stage" + std::to_string(i + 1), f[i + 1] + m * f[i], f[i],
                                            cfg_, rng);
        head_ = PointwiseLayer<T>(store_, "head.kernel", f[0], 1, rng);
        head_bias_ = store_.add_param("head.bias", {1});
    }

    Prompt2SegModel(const Prompt2SegModel&) = delete;
    Prompt2SegModel& operator=(const Prompt2SegModel&) = delete;
    Prompt2SegModel(Prompt2SegModel&&) noexcept = default;
    Prompt2SegModel& operator=(Prompt2SegModel&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& store() { return store_; }
    const ParamStore<T>& store() const { return store_; }
    std::size_t parameter_count() const { return store_.parameter_count(); }

    /// Five stage maps: S x S x f1, S/2 x S/2 x f2, ..., S/16 x S/16 x f5.
    StageMaps<T> encode(const Tensor<T>& x, Stream which, Mode mode) const {
        const std::size_t s = cfg_.input_side;
        if (x.rank() != 4 || x.dim(1) != s || x.dim(2) != s || x.dim(3) != 1)
            bad_shape("encode", x.shape(), "[N," + std::to_string(s) + "," + std::to_string(s) + ",1]");
        const auto& enc = which == Stream::image ? image_enc_ : doodle_enc_;
        StageMaps<T> maps;
        maps[0] = enc[0].forward(x, mode);
        for (std::size_t i = 1; i < 5; ++i) maps[i] = enc[i].forward(max_pool_2x2(maps[i - 1]), mode);
        return maps;
    }

    Tensor<T> fuse(const Tensor<T>& img, const Tensor<T>& doo) const {
        if (img.shape() != doo.shape()) shape_mismatch("fuse", img.shape(), doo.shape());
        return cfg_.fusion_mode == FusionMode::concat ? concat_channels(img, doo) : add(img, doo);
    }

    /// Probability mask N x S x S x 1 from the five fused maps.
    Tensor<T> decode(const StageMaps<T>& fusions, Mode mode) const {
        for (std::size_t i = 1; i < 5; ++i)
            if (fusions[i].rank() != 4 || fusions[i].dim(1) * 2 != fusions[i - 1].dim(1) ||
                fusions[i].dim(0) != fusions[0].dim(0))
                shape_mismatch("decode", fusions[i - 1].shape(), fusions[i].shape());
        Tensor<T> d = fusions[4];
        for (int i = 3; i >= 0; --i) d = decoder_[i].forward(concat_channels(upsample_2x2(d), fusions[i]), mode);
        return sigmoid(add_channel_bias(head_(d), head_bias_));
    }

    Tensor<T> forward(const Tensor<T>& image, const Tensor<T>& doodle, Mode mode) const {
        auto img = encode(image, Stream::image, mode);
        auto doo = encode(doodle, Stream::doodle, mode);
        StageMaps<T> fused;
        for (std::size_t i = 0; i < 5; ++i) fused[i] = fuse(img[i], doo[i]);
        return decode(fused, mode);
    }

   private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    std::array<DprConvSeBlock<T>, 5> image_enc_, doodle_enc_;
    std::array<DprConvSeBlock<T>, 4> decoder_;
    PointwiseLayer<T> head_;
    Tensor<T> head_bias_;
};

/// Parameter counts grouped by top-level module and by layer kind.
struct ParameterBreakdown {
    std::map<std::string, std::size_t> by_module;
    std::map<std::string, std::size_t> by_kind;  // conv, batch_norm, se_dense, head_bias
    std::size_t total = 0;
    std::size_t buffers = 0;
};

template <typename T>
ParameterBreakdown parameter_breakdown(const Prompt2SegModel<T>& m) {
    ParameterBreakdown b;
    for (const auto& p : m.store().params()) {
        const std::size_t n = p.tensor.size();
        b.by_module[p.name.substr(0, p.name.find('.'))] += n;
        const bool bn = p.name.ends_with(".gamma") || p.name.ends_with(".beta");
        const bool se = p.name.find(".se.") != std::string::npos;
        b.by_kind[bn ? "batch_norm" : se ? "se_dense" : p.name == "head.bias" ? "head_bias" : "conv"] += n;
        b.total += n;
    }
    b.buffers = m.store().buffer_count();
    return b;
}

}  // namespace p2s
