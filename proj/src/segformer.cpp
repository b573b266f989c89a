#include "waterseg/segformer.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "waterseg/errors.hpp"

namespace waterseg {

ModelConfig ModelConfig::nano() { return ModelConfig{}; }

ModelConfig ModelConfig::b0_like() {
    ModelConfig c;
    c.name = "b0-like";
    c.embed_dims = {32, 64, 160, 256};
    c.depths = {2, 2, 2, 2};
    c.num_heads = {1, 2, 5, 8};
    c.sr_ratios = {8, 4, 2, 1};
    c.decoder_dim = 256;
    return c;
}

ModelConfig ModelConfig::by_name(const std::string& name) {
    if (name == "nano") return nano();
    if (name == "b0-like" || name == "b0_like") return b0_like();
    throw ConfigError("unknown model config '" + name + "' (expected nano or b0-like)");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    for (int i = 0; i < 4; ++i) {
        const std::string stage = "stage " + std::to_string(i + 1);
        if (embed_dims[i] <= 0 || num_heads[i] <= 0 || depths[i] <= 0 || sr_ratios[i] <= 0) {
            fail(stage + " has a non-positive width, head count, depth or reduction ratio");
        }
        if (embed_dims[i] % num_heads[i] != 0) {
            fail(stage + " width " + std::to_string(embed_dims[i]) + " is not divisible by " +
                 std::to_string(num_heads[i]) + " heads");
        }
        const PatchSpec& p = patch_specs[i];
        const int want_stride = i == 0 ? 4 : 2;
        if (p.stride != want_stride) {
            fail(stage + " patch stride must be " + std::to_string(want_stride) + ", got " + std::to_string(p.stride));
        }
        if (p.kernel <= p.stride) {
            fail(stage + " patch spec is non-overlapping (kernel " + std::to_string(p.kernel) + " <= stride " +
                 std::to_string(p.stride) + ")");
        }
        if (2 * p.padding < p.kernel - p.stride || 2 * p.padding > p.kernel - 1) {
            fail(stage + " padding " + std::to_string(p.padding) + " does not preserve side/stride resolution");
        }
    }
    if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
    if (decoder_dim <= 0) fail("decoder_dim must be positive");
    if (num_classes != 1) fail("only binary segmentation (num_classes = 1) is supported");
    if (in_channels <= 0) fail("in_channels must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    nlohmann::json specs = nlohmann::json::array();
    for (const auto& p : c.patch_specs) specs.push_back({p.kernel, p.stride, p.padding});
    j = nlohmann::json{{"name", c.name},           {"embed_dims", c.embed_dims},   {"depths", c.depths},
                       {"num_heads", c.num_heads}, {"sr_ratios", c.sr_ratios},     {"patch_specs", specs},
                       {"mlp_ratio", c.mlp_ratio}, {"decoder_dim", c.decoder_dim}, {"num_classes", c.num_classes},
                       {"in_channels", c.in_channels}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (j.contains("name")) j.at("name").get_to(c.name);
    if (j.contains("embed_dims")) j.at("embed_dims").get_to(c.embed_dims);
    if (j.contains("depths")) j.at("depths").get_to(c.depths);
    if (j.contains("num_heads")) j.at("num_heads").get_to(c.num_heads);
    if (j.contains("sr_ratios")) j.at("sr_ratios").get_to(c.sr_ratios);
    if (j.contains("patch_specs")) {
        const auto& specs = j.at("patch_specs");
        if (!specs.is_array() || specs.size() != 4) throw ConfigError("patch_specs must list 4 [kernel,stride,padding]");
        for (std::size_t i = 0; i < 4; ++i) {
            const auto& s = specs[i];
            if (!s.is_array() || s.size() != 3) throw ConfigError("patch spec must be [kernel,stride,padding]");
            c.patch_specs[i] = PatchSpec{s[0].get<int>(), s[1].get<int>(), s[2].get<int>()};
        }
    }
    if (j.contains("mlp_ratio")) j.at("mlp_ratio").get_to(c.mlp_ratio);
    if (j.contains("decoder_dim")) j.at("decoder_dim").get_to(c.decoder_dim);
    if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
    if (j.contains("in_channels")) j.at("in_channels").get_to(c.in_channels);
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        if (j.is_string()) {
            c = ModelConfig::by_name(j.get<std::string>());
        } else if (j.is_object()) {
            c = ModelConfig::by_name(j.value("base", std::string("nano")));
            from_json(j, c);
        } else if (!j.is_null()) {
            throw ConfigError("model must be a config name or an object");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

template <typename T>
OverlapPatchEmbed<T>::OverlapPatchEmbed(int in_channels, int embed_dim, PatchSpec s, std::mt19937_64& rng)
    : spec(s) {
    if (s.kernel <= s.stride) {
        throw ConfigError("overlapped patch embedding needs kernel > stride, got kernel " + std::to_string(s.kernel) +
                          " stride " + std::to_string(s.stride));
    }
    proj = nn::Conv2d<T>(in_channels, embed_dim, s.kernel, ops::Conv2dParams{s.stride, s.padding, 1}, rng);
    norm = nn::LayerNorm<T>(embed_dim);
}

template <typename T>
PatchTokens<T> OverlapPatchEmbed<T>::forward(const BasicTensor<T>& x) const {
    auto feat = proj.forward(x);
    PatchTokens<T> out;
    out.height = feat.dim(2);
    out.width = feat.dim(3);
    out.tokens = norm.forward(nn::spatial_to_tokens(feat));
    return out;
}

template <typename T>
void OverlapPatchEmbed<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
    proj.collect(prefix + ".proj", out);
    norm.collect(prefix + ".norm", out);
}

template <typename T>
EfficientSelfAttention<T>::EfficientSelfAttention(int dim_, int heads_, int sr_ratio_, std::mt19937_64& rng)
    : dim(dim_), heads(heads_), sr_ratio(sr_ratio_) {
    if (dim % heads != 0) {
        throw ConfigError("attention width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                          " heads");
    }
    q = nn::Linear<T>(dim, dim, rng);
    k = nn::Linear<T>(dim, dim, rng);
    v = nn::Linear<T>(dim, dim, rng);
    proj = nn::Linear<T>(dim, dim, rng);
    if (sr_ratio > 1) {
        sr.emplace(dim, dim, sr_ratio, ops::Conv2dParams{sr_ratio, 0, 1}, rng);
        sr_norm.emplace(dim);
    }
}

template <typename T>
BasicTensor<T> EfficientSelfAttention<T>::forward(const BasicTensor<T>& tokens, int64_t height, int64_t width,
                                                  BasicTensor<T>* attention_weights) const {
    if (tokens.ndim() != 3 || tokens.dim(1) != height * width || tokens.dim(2) != dim) {
        throw ShapeError("attention: tokens " + shape_str(tokens.shape()) + " do not match a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid of width " +
                         std::to_string(dim));
    }
    if (height % sr_ratio != 0 || width % sr_ratio != 0) {
        throw ShapeError("attention: reduction ratio " + std::to_string(sr_ratio) + " does not divide grid " +
                         std::to_string(height) + "x" + std::to_string(width));
    }
    const int64_t batch = tokens.dim(0);
    const int64_t n = tokens.dim(1);
    const int64_t head_dim = dim / heads;

    auto query = ops::reshape(q.forward(tokens), {batch, n, heads, head_dim});
    query = ops::permute(query, {0, 2, 1, 3});

    BasicTensor<T> kv_source = tokens;
    if (sr) {
        auto grid = nn::tokens_to_spatial(tokens, height, width);
        kv_source = sr_norm->forward(nn::spatial_to_tokens(sr->forward(grid)));
    }
    const int64_t m = kv_source.dim(1);
    auto key_t = ops::permute(ops::reshape(k.forward(kv_source), {batch, m, heads, head_dim}), {0, 2, 3, 1});
    auto value = ops::permute(ops::reshape(v.forward(kv_source), {batch, m, heads, head_dim}), {0, 2, 1, 3});

    auto scores = ops::scale(ops::matmul(query, key_t), static_cast<T>(1.0 / std::sqrt(double(head_dim))));
    auto weights = ops::softmax(scores);
    if (attention_weights) *attention_weights = weights;
    auto context = ops::permute(ops::matmul(weights, value), {0, 2, 1, 3});
    return proj.forward(ops::reshape(context, {batch, n, dim}));
}

template <typename T>
void EfficientSelfAttention<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    proj.collect(prefix + ".proj", out);
    if (sr) sr->collect(prefix + ".sr", out);
    if (sr_norm) sr_norm->collect(prefix + ".sr_norm", out);
}

template <typename T>
void EfficientSelfAttention<T>::linears(const std::string& prefix,
                                        std::vector<std::pair<std::string, nn::Linear<T>*>>& out) {
    out.emplace_back(prefix + ".q", &q);
    out.emplace_back(prefix + ".k", &k);
    out.emplace_back(prefix + ".v", &v);
    out.emplace_back(prefix + ".proj", &proj);
}

template <typename T>
MixFfn<T>::MixFfn(int dim, int mlp_ratio, std::mt19937_64& rng) {
    const int hidden = dim * mlp_ratio;
    fc1 = nn::Linear<T>(dim, hidden, rng);
    dwconv = nn::Conv2d<T>(hidden, hidden, 3, ops::Conv2dParams{1, 1, hidden}, rng);
    fc2 = nn::Linear<T>(hidden, dim, rng);
}

template <typename T>
BasicTensor<T> MixFfn<T>::forward(const BasicTensor<T>& tokens, int64_t height, int64_t width) const {
    if (tokens.ndim() != 3 || tokens.dim(1) != height * width) {
        throw ShapeError("mix-ffn: " + std::to_string(tokens.ndim() == 3 ? tokens.dim(1) : -1) +
                         " tokens do not match a " + std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
    auto hidden = fc1.forward(tokens);
    auto grid = dwconv.forward(nn::tokens_to_spatial(hidden, height, width));
    return fc2.forward(ops::gelu(nn::spatial_to_tokens(grid)));
}

template <typename T>
void MixFfn<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
    fc1.collect(prefix + ".fc1", out);
    dwconv.collect(prefix + ".dwconv", out);
    fc2.collect(prefix + ".fc2", out);
}

template <typename T>
void MixFfn<T>::linears(const std::string& prefix, std::vector<std::pair<std::string, nn::Linear<T>*>>& out) {
    out.emplace_back(prefix + ".fc1", &fc1);
    out.emplace_back(prefix + ".fc2", &fc2);
}

template <typename T>
TransformerBlock<T>::TransformerBlock(int dim, int heads, int sr_ratio, int mlp_ratio, std::mt19937_64& rng)
    : norm1(dim), attn(dim, heads, sr_ratio, rng), norm2(dim), ffn(dim, mlp_ratio, rng) {}

template <typename T>
BasicTensor<T> TransformerBlock<T>::forward(const BasicTensor<T>& tokens, int64_t height, int64_t width) const {
    auto x = ops::add(tokens, attn.forward(norm1.forward(tokens), height, width));
    return ops::add(x, ffn.forward(norm2.forward(x), height, width));
}

template <typename T>
void TransformerBlock<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    ffn.collect(prefix + ".ffn", out);
}

template <typename T>
void TransformerBlock<T>::linears(const std::string& prefix,
                                  std::vector<std::pair<std::string, nn::Linear<T>*>>& out) {
    attn.linears(prefix + ".attn", out);
    ffn.linears(prefix + ".ffn", out);
}

template <typename T>
MlpDecoder<T>::MlpDecoder(const std::array<int, 4>& in_dims, int decoder_dim, int num_classes,
                          std::mt19937_64& rng) {
    for (int i = 0; i < 4; ++i) proj[i] = nn::Linear<T>(in_dims[i], decoder_dim, rng);
    fuse = nn::Linear<T>(4 * decoder_dim, decoder_dim, rng);
    head = nn::Linear<T>(decoder_dim, num_classes, rng);
}

template <typename T>
BasicTensor<T> MlpDecoder<T>::forward(const std::array<BasicTensor<T>, 4>& features) const {
    for (int i = 0; i < 4; ++i) {
        if (!features[i].defined() || features[i].ndim() != 4 || features[i].dim(1) != proj[i].in_features()) {
            throw ConfigError("decoder: feature map " + std::to_string(i) + " has shape " +
                              (features[i].defined() ? shape_str(features[i].shape()) : std::string("<none>")) +
                              ", expected width " + std::to_string(proj[i].in_features()));
        }
    }
    const int64_t h0 = features[0].dim(2), w0 = features[0].dim(3);
    std::vector<BasicTensor<T>> upsampled;
    for (int i = 0; i < 4; ++i) {
        const int64_t h = features[i].dim(2), w = features[i].dim(3);
        auto projected = nn::tokens_to_spatial(proj[i].forward(nn::spatial_to_tokens(features[i])), h, w);
        if (h != h0 || w != w0) projected = ops::bilinear_upsample2d(projected, h0, w0);
        upsampled.push_back(std::move(projected));
    }
    auto fused = ops::gelu(fuse.forward(nn::spatial_to_tokens(ops::concat(upsampled, 1))));
    return nn::tokens_to_spatial(head.forward(fused), h0, w0);
}

template <typename T>
void MlpDecoder<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
    for (int i = 0; i < 4; ++i) proj[i].collect(prefix + ".proj." + std::to_string(i), out);
    fuse.collect(prefix + ".fuse", out);
    head.collect(prefix + ".head", out);
}

template <typename T>
void MlpDecoder<T>::linears(const std::string& prefix, std::vector<std::pair<std::string, nn::Linear<T>*>>& out) {
    for (int i = 0; i < 4; ++i) out.emplace_back(prefix + ".proj." + std::to_string(i), &proj[i]);
    out.emplace_back(prefix + ".fuse", &fuse);
    out.emplace_back(prefix + ".head", &head);
}

// ---------------------------------------------------------------------------

namespace {
std::string stage_prefix(int i) { return "encoder.stages." + std::to_string(i); }
} // namespace

template <typename T>
SegFormerModel<T>::SegFormerModel(const ModelConfig& config, uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    int in_channels = config_.in_channels;
    for (int i = 0; i < 4; ++i) {
        auto& stage = stages[i];
        stage.patch_embed = OverlapPatchEmbed<T>(in_channels, config_.embed_dims[i], config_.patch_specs[i], rng);
        for (int b = 0; b < config_.depths[i]; ++b) {
            stage.blocks.emplace_back(config_.embed_dims[i], config_.num_heads[i], config_.sr_ratios[i],
                                      config_.mlp_ratio, rng);
        }
        stage.norm = nn::LayerNorm<T>(config_.embed_dims[i]);
        in_channels = config_.embed_dims[i];
    }
    decoder = MlpDecoder<T>(config_.embed_dims, config_.decoder_dim, config_.num_classes, rng);
}

template <typename T>
std::array<BasicTensor<T>, 4> SegFormerModel<T>::encoder_forward(const BasicTensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != config_.in_channels) {
        throw ShapeError("encoder: expected input [B," + std::to_string(config_.in_channels) + ",H,W], got " +
                         shape_str(x.shape()));
    }
    if (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0) {
        throw ShapeError("encoder: input sides must be multiples of 32, got " + std::to_string(x.dim(2)) + "x" +
                         std::to_string(x.dim(3)));
    }
    std::array<BasicTensor<T>, 4> features;
    BasicTensor<T> current = x;
    for (int i = 0; i < 4; ++i) {
        const auto& stage = stages[i];
        auto patches = stage.patch_embed.forward(current);
        auto tokens = patches.tokens;
        for (const auto& block : stage.blocks) tokens = block.forward(tokens, patches.height, patches.width);
        tokens = stage.norm.forward(tokens);
        features[i] = nn::tokens_to_spatial(tokens, patches.height, patches.width);
        current = features[i];
    }
    return features;
}

template <typename T>
BasicTensor<T> SegFormerModel<T>::decoder_forward(const std::array<BasicTensor<T>, 4>& features) const {
    return decoder.forward(features);
}

template <typename T>
BasicTensor<T> SegFormerModel<T>::forward(const BasicTensor<T>& x) const {
    auto logits = decoder_forward(encoder_forward(x));
    return ops::bilinear_upsample2d(logits, x.dim(2), x.dim(3));
}

template <typename T>
nn::ParamList<T> SegFormerModel<T>::parameters() const {
    nn::ParamList<T> out;
    for (int i = 0; i < 4; ++i) {
        const auto& stage = stages[i];
        const std::string prefix = stage_prefix(i);
        stage.patch_embed.collect(prefix + ".patch_embed", out);
        for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
            stage.blocks[b].collect(prefix + ".blocks." + std::to_string(b), out);
        }
        stage.norm.collect(prefix + ".norm", out);
    }
    decoder.collect("decoder", out);
    return out;
}

template <typename T>
std::vector<BasicTensor<T>> SegFormerModel<T>::parameter_tensors() const {
    std::vector<BasicTensor<T>> out;
    for (auto& p : parameters()) out.push_back(p.tensor);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, nn::Linear<T>*>> SegFormerModel<T>::linear_layers() {
    std::vector<std::pair<std::string, nn::Linear<T>*>> out;
    for (int i = 0; i < 4; ++i) {
        for (std::size_t b = 0; b < stages[i].blocks.size(); ++b) {
            stages[i].blocks[b].linears(stage_prefix(i) + ".blocks." + std::to_string(b), out);
        }
    }
    decoder.linears("decoder", out);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, const nn::Linear<T>*>> SegFormerModel<T>::linear_layers() const {
    std::vector<std::pair<std::string, const nn::Linear<T>*>> out;
    for (auto& [name, layer] : const_cast<SegFormerModel<T>*>(this)->linear_layers()) out.emplace_back(name, layer);
    return out;
}

template <typename T>
int64_t SegFormerModel<T>::param_count(bool trainable_only) const {
    int64_t total = 0;
    for (const auto& p : parameters()) {
        if (!trainable_only || p.tensor.requires_grad()) total += p.tensor.numel();
    }
    return total;
}

template <typename T>
std::vector<SummaryRow> SegFormerModel<T>::summary() const {
    std::vector<SummaryRow> rows;
    for (const auto& p : parameters()) {
        rows.push_back(SummaryRow{p.name, p.tensor.shape(), p.tensor.numel(), p.tensor.requires_grad()});
    }
    return rows;
}

std::string format_summary(const std::vector<SummaryRow>& rows) {
    std::size_t name_width = 4;
    for (const auto& r : rows) name_width = std::max(name_width, r.name.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(name_width)) << "name" << "  " << std::setw(18) << "shape"
       << std::right << std::setw(10) << "params" << "  trainable\n";
    int64_t total = 0, trainable = 0;
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(name_width)) << r.name << "  " << std::setw(18)
           << shape_str(r.shape) << std::right << std::setw(10) << r.count << "  " << (r.trainable ? "yes" : "no")
           << '\n';
        total += r.count;
        if (r.trainable) trainable += r.count;
    }
    os << "total parameters: " << total << " (trainable " << trainable << ")\n";
    return os.str();
}

template class OverlapPatchEmbed<float>;
template class OverlapPatchEmbed<double>;
template class EfficientSelfAttention<float>;
template class EfficientSelfAttention<double>;
template class MixFfn<float>;
template class MixFfn<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;
template class MlpDecoder<float>;
template class MlpDecoder<double>;
template class SegFormerModel<float>;
template class SegFormerModel<double>;

} // namespace waterseg
