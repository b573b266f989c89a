#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "waterseg/segformer.hpp"

namespace waterseg {

// On disk a checkpoint is two files: a JSON manifest (<name>.json) listing
// every tensor's name, shape and offset, and a flat little-endian float32
// blob (<name>.bin) holding the tensors back to back in manifest order.

struct StoredTensor {
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    std::string kind; // "full" or "adapter"
    nlohmann::json meta;
    std::vector<std::string> order;
    std::map<std::string, StoredTensor> tensors;
};

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& manifest_path);
Checkpoint read_checkpoint(const std::filesystem::path& manifest_path);

// Per-layer adapter settings as stored in checkpoint metadata.
nlohmann::json lora_meta(const SegFormerModel<float>& model);

// All parameters, including any adapter factors. Merged adapters are refused
// so the stored base weights are always the frozen originals.
Checkpoint make_checkpoint(const SegFormerModel<float>& model, const nlohmann::json& extra_meta = {});
void save_checkpoint(const SegFormerModel<float>& model, const std::filesystem::path& manifest_path,
                     const nlohmann::json& extra_meta = {});

// Copies stored values into the model. Any missing, unexpected or
// differently shaped tensor is reported in a single ShapeError.
void apply_checkpoint(SegFormerModel<float>& model, const Checkpoint& ckpt);

// Rebuilds the model described by the checkpoint's config, re-attaching any
// adapters it records, then loads the weights.
SegFormerModel<float> load_model(const std::filesystem::path& manifest_path);
ModelConfig checkpoint_model_config(const Checkpoint& ckpt);

// Adapter-only files hold A, B, alpha and rank per adapted layer.
Checkpoint make_adapter_checkpoint(const SegFormerModel<float>& model);
void save_adapters(const SegFormerModel<float>& model, const std::filesystem::path& manifest_path);

// Attaches the stored adapters to a base model and freezes everything else.
void load_adapters(SegFormerModel<float>& model, const std::filesystem::path& manifest_path);

} // namespace waterseg
