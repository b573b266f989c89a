#include "waterseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "waterseg/errors.hpp"
#include "waterseg/lora.hpp"

namespace waterseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "waterseg-checkpoint-v1";

uint32_t to_le(uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) return __builtin_bswap32(v);
    return v;
}

void put_floats(std::string& out, std::span<const float> values) {
    const std::size_t start = out.size();
    out.resize(start + values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const uint32_t bits = to_le(std::bit_cast<uint32_t>(values[i]));
        std::memcpy(out.data() + start + i * 4, &bits, 4);
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string layer_of(const std::string& name, const char* suffix) {
    const std::string s = suffix;
    if (name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0)
        return name.substr(0, name.size() - s.size());
    return {};
}

// Attaches adapters recorded in `entries` ([{layer, rank, alpha}]) using the
// factor tensors stored in the checkpoint, then freezes everything else.
void attach_adapters(SegFormerModel<float>& model, const json& entries, const Checkpoint& ckpt) {
    if (entries.empty()) return;
    auto layers = model.linear_layers();
    std::vector<std::string> problems;
    for (const auto& e : entries) {
        const auto layer_name = e.at("layer").get<std::string>();
        auto it = std::find_if(layers.begin(), layers.end(), [&](const auto& p) { return p.first == layer_name; });
        if (it == layers.end()) {
            problems.push_back(layer_name + ": no such linear layer");
            continue;
        }
        auto& layer = *it->second;
        if (layer.adapter) throw StateError("layer " + layer_name + " already carries a lora adapter");
        const auto a_it = ckpt.tensors.find(layer_name + ".lora_A");
        const auto b_it = ckpt.tensors.find(layer_name + ".lora_B");
        if (a_it == ckpt.tensors.end() || b_it == ckpt.tensors.end()) {
            problems.push_back(layer_name + ": adapter factors missing");
            continue;
        }
        const int rank = e.at("rank").get<int>();
        const Shape want_a{rank, layer.in_features()}, want_b{layer.out_features(), rank};
        if (a_it->second.shape != want_a || b_it->second.shape != want_b) {
            problems.push_back(layer_name + ".lora_A/B: expected " + shape_str(want_a) + "/" + shape_str(want_b) +
                               ", stored " + shape_str(a_it->second.shape) + "/" + shape_str(b_it->second.shape));
            continue;
        }
        layer.adapter.emplace(layer.weight, Tensor::from_data(want_a, a_it->second.data, true),
                              Tensor::from_data(want_b, b_it->second.data, true), e.at("alpha").get<double>());
    }
    if (!problems.empty()) {
        std::string msg = "adapter checkpoint does not fit model:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ShapeError(msg);
    }
    for (auto& p : model.parameters()) {
        const bool is_adapter = !layer_of(p.name, ".lora_A").empty() || !layer_of(p.name, ".lora_B").empty();
        p.tensor.set_requires_grad(is_adapter);
    }
}

} // namespace

fs::path blob_path_for(const fs::path& manifest_path) {
    auto blob = manifest_path;
    blob.replace_extension(".bin");
    return blob;
}

void write_checkpoint(const Checkpoint& ckpt, const fs::path& manifest_path) {
    const auto blob_path = blob_path_for(manifest_path);
    if (blob_path == manifest_path) throw ConfigError("checkpoint manifest must not end in .bin: " + manifest_path.string());
    std::string blob;
    json tensors = json::array();
    for (const auto& name : ckpt.order) {
        const auto& t = ckpt.tensors.at(name);
        if (static_cast<int64_t>(t.data.size()) != shape_numel(t.shape))
            throw ShapeError("checkpoint tensor " + name + " has " + std::to_string(t.data.size()) +
                             " values for shape " + shape_str(t.shape));
        tensors.push_back({{"name", name}, {"shape", t.shape}, {"offset", blob.size()}, {"numel", t.data.size()}});
        put_floats(blob, t.data);
    }
    json manifest{{"format", kFormat},
                  {"kind", ckpt.kind},
                  {"dtype", "float32"},
                  {"byte_order", "little"},
                  {"blob", blob_path.filename().string()},
                  {"blob_bytes", blob.size()},
                  {"tensors", tensors},
                  {"meta", ckpt.meta.is_null() ? json::object() : ckpt.meta}};
    if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());
    {
        std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + blob_path.string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + manifest_path.string());
    out << manifest.dump(2) << '\n';
}

Checkpoint read_checkpoint(const fs::path& manifest_path) {
    json manifest;
    try {
        manifest = json::parse(read_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw ValidationError("checkpoint manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
    }
    if (manifest.value("format", "") != kFormat)
        throw ValidationError(manifest_path.string() + " is not a waterseg checkpoint");
    if (manifest.value("dtype", "") != "float32" || manifest.value("byte_order", "") != "little")
        throw ValidationError("unsupported checkpoint encoding in " + manifest_path.string());
    const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
    const std::string blob = read_file(blob_path);
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>())
        throw ValidationError("checkpoint blob " + blob_path.string() + " has " + std::to_string(blob.size()) +
                              " bytes, manifest says " + std::to_string(manifest.at("blob_bytes").get<std::size_t>()));

    Checkpoint ckpt;
    ckpt.kind = manifest.value("kind", "full");
    ckpt.meta = manifest.value("meta", json::object());
    for (const auto& t : manifest.at("tensors")) {
        StoredTensor st;
        st.shape = t.at("shape").get<Shape>();
        const auto offset = t.at("offset").get<std::size_t>();
        const auto numel = t.at("numel").get<std::size_t>();
        const auto name = t.at("name").get<std::string>();
        if (static_cast<int64_t>(numel) != shape_numel(st.shape) || offset + numel * 4 > blob.size())
            throw ValidationError("checkpoint entry " + name + " is inconsistent with its blob");
        st.data.resize(numel);
        for (std::size_t i = 0; i < numel; ++i) {
            uint32_t bits;
            std::memcpy(&bits, blob.data() + offset + i * 4, 4);
            st.data[i] = std::bit_cast<float>(to_le(bits));
        }
        if (ckpt.tensors.count(name)) throw ValidationError("checkpoint lists " + name + " twice");
        ckpt.order.push_back(name);
        ckpt.tensors.emplace(name, std::move(st));
    }
    return ckpt;
}

json lora_meta(const SegFormerModel<float>& model) {
    json entries = json::array();
    for (const auto& [name, layer] : model.linear_layers()) {
        if (!layer->adapter) continue;
        entries.push_back({{"layer", name}, {"rank", layer->adapter->rank()}, {"alpha", layer->adapter->alpha()}});
    }
    return entries;
}

Checkpoint make_checkpoint(const SegFormerModel<float>& model, const json& extra_meta) {
    for (const auto& [name, layer] : model.linear_layers())
        if (layer->adapter && layer->adapter->merged())
            throw StateError("cannot checkpoint " + name + " while its adapter is merged; unmerge first");
    Checkpoint ckpt;
    ckpt.kind = "full";
    ckpt.meta = extra_meta.is_object() ? extra_meta : json::object();
    ckpt.meta["model"] = model.config();
    ckpt.meta["lora"] = lora_meta(model);
    for (const auto& p : model.parameters()) {
        const auto d = p.tensor.data();
        ckpt.order.push_back(p.name);
        ckpt.tensors.emplace(p.name, StoredTensor{p.tensor.shape(), std::vector<float>(d.begin(), d.end())});
    }
    return ckpt;
}

void save_checkpoint(const SegFormerModel<float>& model, const fs::path& manifest_path, const json& extra_meta) {
    write_checkpoint(make_checkpoint(model, extra_meta), manifest_path);
}

void apply_checkpoint(SegFormerModel<float>& model, const Checkpoint& ckpt) {
    auto params = model.parameters();
    std::vector<std::string> problems;
    std::set<std::string> seen;
    for (const auto& p : params) {
        seen.insert(p.name);
        const auto it = ckpt.tensors.find(p.name);
        if (it == ckpt.tensors.end()) {
            problems.push_back(p.name + ": model " + shape_str(p.tensor.shape()) + ", missing from checkpoint");
        } else if (it->second.shape != p.tensor.shape()) {
            problems.push_back(p.name + ": model " + shape_str(p.tensor.shape()) + ", checkpoint " +
                               shape_str(it->second.shape));
        }
    }
    for (const auto& name : ckpt.order)
        if (!seen.count(name)) problems.push_back(name + ": checkpoint " + shape_str(ckpt.tensors.at(name).shape) +
                                                  ", not in model");
    if (!problems.empty()) {
        std::string msg = "checkpoint does not match model (" + std::to_string(problems.size()) + " differences):";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ShapeError(msg);
    }
    for (auto& p : params) {
        const auto& src = ckpt.tensors.at(p.name).data;
        std::copy(src.begin(), src.end(), p.tensor.data().begin());
    }
}

ModelConfig checkpoint_model_config(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("model")) throw ValidationError("checkpoint carries no model config");
    return model_config_from_json(ckpt.meta.at("model"));
}

SegFormerModel<float> load_model(const fs::path& manifest_path) {
    const auto ckpt = read_checkpoint(manifest_path);
    if (ckpt.kind != "full")
        throw ValidationError(manifest_path.string() + " is an adapter checkpoint; load a base model first");
    SegFormerModel<float> model(checkpoint_model_config(ckpt), 0);
    attach_adapters(model, ckpt.meta.value("lora", json::array()), ckpt);
    apply_checkpoint(model, ckpt);
    return model;
}

Checkpoint make_adapter_checkpoint(const SegFormerModel<float>& model) {
    Checkpoint ckpt;
    ckpt.kind = "adapter";
    ckpt.meta = json{{"model", model.config()}, {"lora", lora_meta(model)}};
    if (ckpt.meta["lora"].empty()) throw StateError("model carries no lora adapters to save");
    for (const auto& [name, layer] : model.linear_layers()) {
        if (!layer->adapter) continue;
        for (const auto& [suffix, t] : {std::pair{".lora_A", &layer->adapter->a()}, {".lora_B", &layer->adapter->b()}}) {
            const auto d = t->data();
            ckpt.order.push_back(name + suffix);
            ckpt.tensors.emplace(name + suffix, StoredTensor{t->shape(), std::vector<float>(d.begin(), d.end())});
        }
    }
    return ckpt;
}

void save_adapters(const SegFormerModel<float>& model, const fs::path& manifest_path) {
    write_checkpoint(make_adapter_checkpoint(model), manifest_path);
}

void load_adapters(SegFormerModel<float>& model, const fs::path& manifest_path) {
    const auto ckpt = read_checkpoint(manifest_path);
    if (ckpt.kind != "adapter") throw ValidationError(manifest_path.string() + " is not an adapter checkpoint");
    if (ckpt.meta.contains("model") && checkpoint_model_config(ckpt) != model.config())
        throw ConfigError("adapter checkpoint was trained on a different model config");
    attach_adapters(model, ckpt.meta.at("lora"), ckpt);
}

} // namespace waterseg
