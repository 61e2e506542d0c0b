#pragma once

#include <string>
#include <vector>

#include "metalora/artifact.hpp"
#include "metalora/lora.hpp"
#include "metalora/statreg.hpp"
#include "metalora/vit.hpp"

namespace metalora {

// Binary patch grid: 1 marks tokens that survived pruning at the last
// layer of the inversion forward.
struct TokenMask {
    int grid = 0;
    std::vector<uint8_t> bits; // grid*grid, row-major

    int ones() const {
        int n = 0;
        for (uint8_t b : bits) n += b;
        return n;
    }
    double sparse_ratio() const {
        return 1.0 - static_cast<double>(ones()) / static_cast<double>(bits.size());
    }
    std::vector<int> kept_positions() const {
        std::vector<int> out;
        for (size_t i = 0; i < bits.size(); ++i)
            if (bits[i]) out.push_back(static_cast<int>(i));
        return out;
    }
    TokenMask inverted() const {
        TokenMask m = *this;
        for (auto& b : m.bits) b = b ? 0 : 1;
        return m;
    }
    TokenMask flipped_horizontal() const {
        TokenMask m = *this;
        for (int r = 0; r < grid; ++r)
            for (int c = 0; c < grid; ++c) m.bits[r * grid + c] = bits[r * grid + (grid - 1 - c)];
        return m;
    }
    static TokenMask from_positions(int grid, const std::vector<int>& positions) {
        TokenMask m;
        m.grid = grid;
        m.bits.assign(static_cast<size_t>(grid) * grid, 0);
        for (int p : positions) {
            if (p < 0 || p >= grid * grid)
                throw index_error("token mask: position " + std::to_string(p));
            m.bits[static_cast<size_t>(p)] = 1;
        }
        return m;
    }
    static TokenMask all_ones(int grid) {
        TokenMask m;
        m.grid = grid;
        m.bits.assign(static_cast<size_t>(grid) * grid, 1);
        return m;
    }
};

// Zeroes the pixels of masked-out patches; everything else is untouched.
template <typename T>
TensorT<T> apply_mask(const TensorT<T>& image, const TokenMask& mask, int patch_size) {
    if (image.ndim() != 3) throw dimension_error("apply_mask: expected [C,H,W] image");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (mask.grid * patch_size != h || mask.grid * patch_size != w)
        throw dimension_error("apply_mask: mask grid " + std::to_string(mask.grid) +
                              " does not cover a " + std::to_string(h) + "x" + std::to_string(w) +
                              " image at patch size " + std::to_string(patch_size));
    auto out = image.detach();
    for (int gy = 0; gy < mask.grid; ++gy)
        for (int gx = 0; gx < mask.grid; ++gx) {
            if (mask.bits[static_cast<size_t>(gy) * mask.grid + gx]) continue;
            for (int ch = 0; ch < c; ++ch)
                for (int py = 0; py < patch_size; ++py)
                    for (int px = 0; px < patch_size; ++px)
                        out.data()[(static_cast<size_t>(ch) * h + gy * patch_size + py) * w +
                                   gx * patch_size + px] = T(0);
        }
    return out;
}

struct InversionConfig {
    int iterations = 2000;
    double lr = 0.25;
    int batch_size = 0; // must be >= number of head classes
    double alpha_r = 0.01;
    PrunePlan plan;     // empty: unpruned inversion
    uint64_t seed = 0;

    void validate(int num_classes) const {
        if (iterations < 1) throw config_error("inversion: iterations must be >= 1");
        if (batch_size < num_classes)
            throw config_error("inversion: batch size " + std::to_string(batch_size) +
                               " below class count " + std::to_string(num_classes));
        if (alpha_r < 0) throw config_error("inversion: alpha_r must be nonnegative");
    }
};

struct InversionResult {
    TensorT<float> images;         // [B,C,H,W], after the last step
    TensorT<float> initial_images; // the Gaussian initialization
    std::vector<TokenMask> masks;  // per image, from the final forward
    std::vector<int> labels;       // round-robin over head classes
    std::vector<double> loss_trace;
    std::vector<double> ce_trace;
    uint64_t flops_per_iteration = 0; // analytic fwd+bwd for the whole batch
};

// Synthesizes surrogate images from a frozen adapter + head by gradient
// descent on the input batch.
InversionResult invert(const ViTModel& model, const LoRAAdapter& adapter,
                       const ClassificationHead& head, const InversionConfig& cfg,
                       const StatRegularizer& reg);

// CE of the head on mask-filtered images; `foreground` keeps the masked-in
// patches, otherwise the complement. The inversion loss-tracking diagnostic.
double masked_region_ce(const ViTModel& model, const LoRAAdapter& adapter,
                        const ClassificationHead& head, const TensorT<float>& images,
                        const std::vector<TokenMask>& masks, const std::vector<int>& labels,
                        bool foreground);

struct ClassRef {
    std::string source_id; // artifact / task id of the teacher
    int slot = 0;          // head output index at the source
    std::string name;
};

struct GeneratedTask {
    int n_way = 0, k_shot = 0, q_query = 0;
    std::vector<TensorT<float>> images; // generation order
    std::vector<TokenMask> masks;
    std::vector<int> labels;            // 0..n_way-1 per image
    std::vector<int> support_idx;       // indices into images
    std::vector<int> query_idx;
    std::vector<ClassRef> classes;      // per task label
    std::vector<std::string> source_ids;
};

// Deterministic split by generation index: per class, first K images form
// the support set, the next Q the query set.
GeneratedTask build_task(const std::vector<TensorT<float>>& images,
                         const std::vector<TokenMask>& masks, const std::vector<int>& labels,
                         const std::vector<ClassRef>& classes, const std::string& source_id,
                         int n, int k, int q);

GeneratedTask build_task(const InversionResult& result, const ClassificationHead& head,
                         const std::string& source_id, int k, int q);

// ---- task directory persistence (manifest + per-index payloads) ----

void save_task_dir(const std::string& dir, const GeneratedTask& task, int image_size,
                   int channels);
GeneratedTask load_task_dir(const std::string& dir);

} // namespace metalora
