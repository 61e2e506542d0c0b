#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "metalora/config.hpp"
#include "metalora/lora.hpp"
#include "metalora/vit.hpp"

namespace metalora {

// Binary container: "LRCY" magic, u32 version, length-prefixed metadata
// text, tensor directory, contiguous f32 little-endian payload, CRC-32
// trailer over the payload. Writes go to a temp file then rename.
inline constexpr uint32_t kArtifactVersion = 1;

struct NamedTensor {
    std::string name;
    TensorT<float> tensor;
};

struct Artifact {
    ConfigFile metadata;
    std::vector<NamedTensor> tensors;

    const TensorT<float>* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t.tensor;
        return nullptr;
    }

    const TensorT<float>& require(const std::string& name) const {
        const auto* t = find(name);
        if (!t) throw io_error(io_code::bad_layout, "artifact missing tensor " + name);
        return *t;
    }
};

void save_artifact(const std::string& path, const ConfigFile& metadata,
                   const std::vector<NamedTensor>& tensors);
Artifact load_artifact(const std::string& path);

// ---- kind-specific envelopes ----

void save_adapter_artifact(const std::string& path, const LoRAAdapter& adapter,
                           const ClassificationHead& head);
std::pair<LoRAAdapter, ClassificationHead> load_adapter_artifact(const std::string& path);

void save_meta_adapter_artifact(const std::string& path, const LoRAAdapter& adapter);
LoRAAdapter load_meta_adapter_artifact(const std::string& path);

void save_model_artifact(const std::string& path, const ViTModel& model);
ViTModel load_model_artifact(const std::string& path);

} // namespace metalora
