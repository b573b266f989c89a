#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "waterseg/nn.hpp"

namespace waterseg {

struct PatchSpec {
    int kernel = 3;
    int stride = 2;
    int padding = 1;

    bool operator==(const PatchSpec&) const = default;
};

// Four-stage hierarchical encoder plus all-MLP decoder. Stage 1 downsamples
// by 4, stages 2-4 by 2 each, so features sit at 1/4, 1/8, 1/16, 1/32.
struct ModelConfig {
    std::string name = "nano";
    std::array<int, 4> embed_dims{16, 32, 64, 128};
    std::array<int, 4> depths{1, 1, 1, 1};
    std::array<int, 4> num_heads{1, 2, 4, 8};
    std::array<int, 4> sr_ratios{8, 4, 2, 1};
    std::array<PatchSpec, 4> patch_specs{PatchSpec{7, 4, 3}, PatchSpec{3, 2, 1}, PatchSpec{3, 2, 1},
                                         PatchSpec{3, 2, 1}};
    int mlp_ratio = 4;
    int decoder_dim = 64;
    int num_classes = 1;
    int in_channels = 3;

    static ModelConfig nano();
    static ModelConfig b0_like();
    static ModelConfig by_name(const std::string& name);

    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Named configs ("nano", "b0-like") optionally patched by an object of
// overrides; a plain object without "base" is read as a full config on top of nano.
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
struct PatchTokens {
    BasicTensor<T> tokens; // [B, H*W, D]
    int64_t height = 0;
    int64_t width = 0;
};

template <typename T>
class OverlapPatchEmbed {
public:
    OverlapPatchEmbed() = default;
    OverlapPatchEmbed(int in_channels, int embed_dim, PatchSpec spec, std::mt19937_64& rng);

    PatchTokens<T> forward(const BasicTensor<T>& x) const;
    void collect(const std::string& prefix, nn::ParamList<T>& out) const;

    PatchSpec spec;
    nn::Conv2d<T> proj;
    nn::LayerNorm<T> norm;
};

// Multi-head attention whose keys/values come from the token grid reduced by
// an RxR strided convolution, giving N/R^2 key positions.
template <typename T>
class EfficientSelfAttention {
public:
    EfficientSelfAttention() = default;
    EfficientSelfAttention(int dim, int heads, int sr_ratio, std::mt19937_64& rng);

    // attention_weights, when non-null, receives the [B, heads, N, N/R^2] softmax output.
    BasicTensor<T> forward(const BasicTensor<T>& tokens, int64_t height, int64_t width,
                           BasicTensor<T>* attention_weights = nullptr) const;
    void collect(const std::string& prefix, nn::ParamList<T>& out) const;
    void linears(const std::string& prefix, std::vector<std::pair<std::string, nn::Linear<T>*>>& out);

    int dim = 0;
    int heads = 1;
    int sr_ratio = 1;
    nn::Linear<T> q, k, v, proj;
    std::optional<nn::Conv2d<T>> sr;
    std::optional<nn::LayerNorm<T>> sr_norm;
};

// linear expand -> 3x3 depthwise conv on the grid -> GELU -> linear project.
template <typename T>
class MixFfn {
public:
    MixFfn() = default;
    MixFfn(int dim, int mlp_ratio, std::mt19937_64& rng);

    BasicTensor<T> forward(const BasicTensor<T>& tokens, int64_t height, int64_t width) const;
    void collect(const std::string& prefix, nn::ParamList<T>& out) const;
    void linears(const std::string& prefix, std::vector<std::pair<std::string, nn::Linear<T>*>>& out);

    nn::Linear<T> fc1;
    nn::Conv2d<T> dwconv;
    nn::Linear<T> fc2;
};

template <typename T>
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(int dim, int heads, int sr_ratio, int mlp_ratio, std::mt19937_64& rng);

    BasicTensor<T> forward(const BasicTensor<T>& tokens, int64_t height, int64_t width) const;
    void collect(const std::string& prefix, nn::ParamList<T>& out) const;
    void linears(const std::string& prefix, std::vector<std::pair<std::string, nn::Linear<T>*>>& out);

    nn::LayerNorm<T> norm1;
    EfficientSelfAttention<T> attn;
    nn::LayerNorm<T> norm2;
    MixFfn<T> ffn;
};

template <typename T>
class EncoderStage {
public:
    OverlapPatchEmbed<T> patch_embed;
    std::vector<TransformerBlock<T>> blocks;
    nn::LayerNorm<T> norm;
};

template <typename T>
class MlpDecoder {
public:
    MlpDecoder() = default;
    MlpDecoder(const std::array<int, 4>& in_dims, int decoder_dim, int num_classes, std::mt19937_64& rng);

    // Four [B,Di,hi,wi] maps -> [B,num_classes,h0,w0] logits.
    BasicTensor<T> forward(const std::array<BasicTensor<T>, 4>& features) const;
    void collect(const std::string& prefix, nn::ParamList<T>& out) const;
    void linears(const std::string& prefix, std::vector<std::pair<std::string, nn::Linear<T>*>>& out);

    std::array<nn::Linear<T>, 4> proj;
    nn::Linear<T> fuse;
    nn::Linear<T> head;
};

struct SummaryRow {
    std::string name;
    Shape shape;
    int64_t count = 0;
    bool trainable = true;
};

template <typename T>
class SegFormerModel {
public:
    SegFormerModel(const ModelConfig& config, uint64_t seed);

    const ModelConfig& config() const { return config_; }

    std::array<BasicTensor<T>, 4> encoder_forward(const BasicTensor<T>& x) const;
    BasicTensor<T> decoder_forward(const std::array<BasicTensor<T>, 4>& features) const;
    // [B,3,H,W] -> [B,1,H,W] logits.
    BasicTensor<T> forward(const BasicTensor<T>& x) const;

    nn::ParamList<T> parameters() const;
    std::vector<BasicTensor<T>> parameter_tensors() const;
    std::vector<std::pair<std::string, nn::Linear<T>*>> linear_layers();
    std::vector<std::pair<std::string, const nn::Linear<T>*>> linear_layers() const;

    int64_t param_count(bool trainable_only = false) const;
    std::vector<SummaryRow> summary() const;

    std::array<EncoderStage<T>, 4> stages;
    MlpDecoder<T> decoder;

private:
    ModelConfig config_;
};

std::string format_summary(const std::vector<SummaryRow>& rows);

extern template class SegFormerModel<float>;
extern template class SegFormerModel<double>;

} // namespace waterseg
