#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "metalora/errors.hpp"

namespace metalora {

struct ViTConfig {
    int image_size = 24;
    int patch_size = 4;
    int channels = 3;
    int depth = 2;
    int embed_dim = 64;
    int num_heads = 4;
    int mlp_ratio = 4;

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || channels <= 0 || depth <= 0 ||
            embed_dim <= 0 || num_heads <= 0 || mlp_ratio <= 0)
            throw config_error("vit config: all dimensions must be positive");
        if (image_size % patch_size != 0)
            throw config_error("vit config: image_size " + std::to_string(image_size) +
                               " not divisible by patch_size " + std::to_string(patch_size));
        if (embed_dim % num_heads != 0)
            throw config_error("vit config: embed_dim " + std::to_string(embed_dim) +
                               " not divisible by num_heads " + std::to_string(num_heads));
    }

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int seq_len() const { return num_patches() + 1; }
    int head_dim() const { return embed_dim / num_heads; }
    int patch_dim() const { return patch_size * patch_size * channels; }
};

// keep_fraction per layer, applied after that layer's attention output
// (before its FFN). The CLS token is never pruned.
struct PrunePlan {
    std::map<int, double> keep; // layer index -> keep fraction in (0, 1]

    bool empty() const { return keep.empty(); }

    void validate(int depth) const {
        for (const auto& [layer, frac] : keep) {
            if (layer < 0 || layer >= depth)
                throw config_error("prune plan references layer " + std::to_string(layer) +
                                   " of a depth-" + std::to_string(depth) + " model");
            if (!(frac > 0.0) || frac > 1.0)
                throw config_error("prune plan keep fraction must be in (0, 1]");
        }
    }

    // Parses "layer:pruned_fraction" pairs separated by commas, matching the
    // {x: y} notation where y is the fraction REMOVED at layer x.
    static PrunePlan parse_pruned(const std::string& text);
};

inline PrunePlan PrunePlan::parse_pruned(const std::string& text) {
    PrunePlan plan;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t comma = text.find(',', pos);
        std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos
                                                                       : comma - pos);
        size_t colon = item.find(':');
        if (colon == std::string::npos)
            throw config_error("prune plan item '" + item + "': expected layer:fraction");
        try {
            int layer = std::stoi(item.substr(0, colon));
            double pruned = std::stod(item.substr(colon + 1));
            if (pruned < 0.0 || pruned >= 1.0)
                throw config_error("prune plan pruned fraction must be in [0, 1)");
            if (pruned > 0.0) plan.keep[layer] = 1.0 - pruned;
        } catch (const ml_error&) {
            throw;
        } catch (const std::exception&) {
            throw config_error("prune plan item '" + item + "': malformed number");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return plan;
}

// Number of image tokens kept for a fraction y of m tokens: ceil(y*m).
inline int keep_count(double keep_fraction, int image_tokens) {
    int k = static_cast<int>(std::ceil(keep_fraction * image_tokens - 1e-9));
    if (k < 1) k = 1;
    if (k > image_tokens) k = image_tokens;
    return k;
}

// Sequence lengths seen by one layer: attention runs on attn_len tokens,
// the FFN on ffn_len (smaller when that layer prunes).
struct LayerSeqLens {
    int64_t attn_len;
    int64_t ffn_len;
};

// Per-layer cost 3*N*D^2 + 2*N^2*D + 8*N*D^2 with a single N per layer;
// exact integer arithmetic.
inline uint64_t flops_estimate(const ViTConfig& cfg, const std::vector<int64_t>& seq_lens) {
    if (static_cast<int>(seq_lens.size()) != cfg.depth)
        throw dimension_error("flops_estimate: expected one sequence length per layer");
    const uint64_t d = static_cast<uint64_t>(cfg.embed_dim);
    uint64_t total = 0;
    for (int64_t n : seq_lens) {
        const uint64_t un = static_cast<uint64_t>(n);
        total += 3 * un * d * d + 2 * un * un * d + 8 * un * d * d;
    }
    return total;
}

// Split accounting for mid-layer pruning: the attention term bills the
// pre-prune length, the FFN term the post-prune length.
inline uint64_t flops_estimate_split(const ViTConfig& cfg, const std::vector<LayerSeqLens>& lens) {
    if (static_cast<int>(lens.size()) != cfg.depth)
        throw dimension_error("flops_estimate_split: expected one entry per layer");
    const uint64_t d = static_cast<uint64_t>(cfg.embed_dim);
    uint64_t total = 0;
    for (const auto& l : lens) {
        const uint64_t na = static_cast<uint64_t>(l.attn_len);
        const uint64_t nf = static_cast<uint64_t>(l.ffn_len);
        total += 3 * na * d * d + 2 * na * na * d + 8 * nf * d * d;
    }
    return total;
}

// Realized per-layer lengths for a forward that starts with `image_tokens`
// image tokens (plus CLS) and applies the plan.
inline std::vector<LayerSeqLens> plan_seq_lengths(const ViTConfig& cfg, const PrunePlan& plan,
                                                  int image_tokens) {
    plan.validate(cfg.depth);
    std::vector<LayerSeqLens> lens;
    int m = image_tokens;
    for (int l = 0; l < cfg.depth; ++l) {
        const int64_t attn_len = m + 1;
        auto it = plan.keep.find(l);
        if (it != plan.keep.end()) m = keep_count(it->second, m);
        lens.push_back({attn_len, m + 1});
    }
    return lens;
}

inline std::vector<int64_t> dense_seq_lengths(const ViTConfig& cfg) {
    return std::vector<int64_t>(cfg.depth, cfg.seq_len());
}

// One inversion/training iteration costs a forward plus a backward at the
// usual 2x-forward convention.
inline uint64_t iteration_flops(uint64_t forward_flops) { return 3 * forward_flops; }

} // namespace metalora
