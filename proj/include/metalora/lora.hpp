#pragma once

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "metalora/tensor.hpp"
#include "metalora/util.hpp"
#include "metalora/vit_config.hpp"

namespace metalora {

enum class LoraSite { q, v };

inline const char* lora_site_name(LoraSite s) { return s == LoraSite::q ? "q" : "v"; }

// Low-rank adapter: per attached projection a pair A [d x r], B [r x k]
// added in parallel to the frozen weight. Fresh adapters have B = 0 and are
// exact no-ops.
template <typename T>
struct LoRAAdapterT {
    struct Entry {
        int layer;
        LoraSite site;
        TensorT<T> a; // [d x r]
        TensorT<T> b; // [r x k]
    };

    int rank = 0;
    std::string task_id;
    std::vector<std::string> class_names;
    uint64_t creation_seed = 0;
    std::vector<Entry> entries; // ordered by (layer, site)

    const Entry* find(int layer, LoraSite site) const {
        for (const auto& e : entries)
            if (e.layer == layer && e.site == site) return &e;
        return nullptr;
    }

    std::vector<TensorT<T>> parameters() const {
        std::vector<TensorT<T>> out;
        for (const auto& e : entries) {
            out.push_back(e.a);
            out.push_back(e.b);
        }
        return out;
    }

    std::vector<TensorT<T>> parameters_for_layers(const std::vector<int>& layers) const {
        std::vector<TensorT<T>> out;
        for (const auto& e : entries)
            for (int l : layers)
                if (e.layer == l) {
                    out.push_back(e.a);
                    out.push_back(e.b);
                }
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& e : entries) n += e.a.numel() + e.b.numel();
        return n;
    }

    void set_trainable(bool trainable) {
        for (auto& e : entries) {
            e.a.set_requires_grad(trainable);
            e.b.set_requires_grad(trainable);
        }
    }

    LoRAAdapterT clone(bool trainable) const {
        LoRAAdapterT out = *this;
        out.entries.clear();
        for (const auto& e : entries)
            out.entries.push_back({e.layer, e.site, e.a.clone(trainable), e.b.clone(trainable)});
        return out;
    }

    uint64_t weight_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& e : entries) {
            h = hash_values(e.a.data(), h);
            h = hash_values(e.b.data(), h);
        }
        return h;
    }
};

// Attachment points are the query and value projections of every attention
// block; A is Gaussian (std 0.02), B starts at zero.
template <typename T>
LoRAAdapterT<T> new_adapter(const ViTConfig& cfg, int rank, uint64_t seed,
                            const std::string& task_id = "") {
    cfg.validate();
    if (rank < 1) throw config_error("adapter rank must be >= 1");
    const int d = cfg.embed_dim;
    if (rank > d)
        throw config_error("adapter rank " + std::to_string(rank) + " exceeds min(d,k)=" +
                           std::to_string(d));
    if (rank * 8 > d)
        std::cerr << "warning: adapter rank " << rank << " is not small relative to dim " << d
                  << "\n";
    LoRAAdapterT<T> adapter;
    adapter.rank = rank;
    adapter.task_id = task_id;
    adapter.creation_seed = seed;
    auto rng = make_rng(seed, rng_tag::teacher);
    for (int l = 0; l < cfg.depth; ++l)
        for (LoraSite site : {LoraSite::q, LoraSite::v}) {
            TensorT<T> a = TensorT<T>::randn({d, rank}, rng, T(0), static_cast<T>(0.02));
            TensorT<T> b = TensorT<T>::zeros({rank, d});
            adapter.entries.push_back({l, site, a, b});
        }
    return adapter;
}

// Baseline combination: elementwise mean of all A and all B matrices.
// Requires identical ranks and attachment structure.
template <typename T>
LoRAAdapterT<T> average_adapters(const std::vector<LoRAAdapterT<T>>& adapters) {
    if (adapters.empty()) throw count_error("average_adapters: empty input");
    const auto& first = adapters[0];
    for (const auto& a : adapters) {
        if (a.rank != first.rank)
            throw config_error("average_adapters: mixed ranks " + std::to_string(first.rank) +
                               " vs " + std::to_string(a.rank));
        if (a.entries.size() != first.entries.size())
            throw config_error("average_adapters: mismatched attachment sites");
        for (size_t i = 0; i < a.entries.size(); ++i) {
            if (a.entries[i].layer != first.entries[i].layer ||
                a.entries[i].site != first.entries[i].site ||
                a.entries[i].a.shape() != first.entries[i].a.shape() ||
                a.entries[i].b.shape() != first.entries[i].b.shape())
                throw config_error("average_adapters: mismatched attachment sites");
        }
    }
    LoRAAdapterT<T> out = first.clone(false);
    out.task_id = "average";
    // Accumulate in double so averaging N copies of one adapter returns it
    // bit-exactly.
    const double n = static_cast<double>(adapters.size());
    auto mean_into = [&](std::vector<T>& dst, auto pick) {
        std::vector<double> acc(dst.size(), 0.0);
        for (const auto& ad : adapters) {
            const auto& src = pick(ad);
            for (size_t j = 0; j < acc.size(); ++j) acc[j] += static_cast<double>(src[j]);
        }
        for (size_t j = 0; j < acc.size(); ++j) dst[j] = static_cast<T>(acc[j] / n);
    };
    for (size_t i = 0; i < out.entries.size(); ++i) {
        mean_into(out.entries[i].a.data(),
                  [i](const LoRAAdapterT<T>& ad) -> const std::vector<T>& { return ad.entries[i].a.data(); });
        mean_into(out.entries[i].b.data(),
                  [i](const LoRAAdapterT<T>& ad) -> const std::vector<T>& { return ad.entries[i].b.data(); });
    }
    return out;
}

// Linear classifier over the CLS embedding, always tuned together with its
// adapter.
template <typename T>
struct ClassificationHeadT {
    TensorT<T> weight; // [D x num_classes]
    TensorT<T> bias;   // [num_classes]
    std::vector<std::string> labels;

    int num_classes() const { return weight.valid() ? weight.dim(1) : 0; }

    std::vector<TensorT<T>> parameters() const { return {weight, bias}; }

    void set_trainable(bool trainable) {
        weight.set_requires_grad(trainable);
        bias.set_requires_grad(trainable);
    }

    ClassificationHeadT clone(bool trainable) const {
        ClassificationHeadT out;
        out.weight = weight.clone(trainable);
        out.bias = bias.clone(trainable);
        out.labels = labels;
        return out;
    }

    uint64_t weight_hash() const {
        uint64_t h = hash_values(weight.data());
        return hash_values(bias.data(), h);
    }
};

// Zero-initialized: a fresh head predicts uniformly, so an untuned teacher
// scores exactly at chance under the deterministic argmax tie-break.
template <typename T>
ClassificationHeadT<T> new_head(int embed_dim, std::vector<std::string> labels) {
    if (labels.size() < 2) throw config_error("classification head needs >= 2 classes");
    ClassificationHeadT<T> head;
    head.weight = TensorT<T>::zeros({embed_dim, static_cast<int>(labels.size())});
    head.bias = TensorT<T>::zeros({static_cast<int>(labels.size())});
    head.labels = std::move(labels);
    return head;
}

using LoRAAdapter = LoRAAdapterT<float>;
using ClassificationHead = ClassificationHeadT<float>;

} // namespace metalora
