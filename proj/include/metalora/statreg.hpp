#pragma once

#include <iostream>
#include <vector>

#include "metalora/ops.hpp"
#include "metalora/tensor.hpp"
#include "metalora/util.hpp"

namespace metalora {

// Fixed, seeded convolutional feature extractor. Weights never train;
// gradients pass through it into the input batch only.
template <typename T>
struct StatExtractorT {
    struct Layer {
        TensorT<T> w; // [out, in, k, k]
        TensorT<T> b; // [out]
        int stride;
        bool activation;
    };

    int in_channels = 0;
    std::vector<Layer> layers;

    struct ConvSpec {
        int out_channels;
        int kernel;
        int stride;
        bool activation = true;
    };

    static StatExtractorT create(int in_channels, const std::vector<ConvSpec>& specs,
                                 uint64_t seed) {
        StatExtractorT ex;
        ex.in_channels = in_channels;
        auto rng = make_rng(seed, rng_tag::extractor);
        int cin = in_channels;
        for (const auto& s : specs) {
            const T stddev = static_cast<T>(std::sqrt(2.0 / (cin * s.kernel * s.kernel)));
            Layer l;
            l.w = TensorT<T>::randn({s.out_channels, cin, s.kernel, s.kernel}, rng, T(0), stddev);
            l.b = TensorT<T>::zeros({s.out_channels});
            l.stride = s.stride;
            l.activation = s.activation;
            ex.layers.push_back(std::move(l));
            cin = s.out_channels;
        }
        return ex;
    }

    // Three strided conv layers; the default statistics source.
    static StatExtractorT create_default(int in_channels, uint64_t seed) {
        return create(in_channels,
                      {{8, 3, 2, true}, {16, 3, 2, true}, {16, 3, 1, true}}, seed);
    }

    std::vector<TensorT<T>> forward_activations(const TensorT<T>& batch) const {
        if (batch.ndim() != 4 || batch.dim(1) != in_channels)
            throw dimension_error("stat extractor: expected [B," + std::to_string(in_channels) +
                                  ",H,W] input, got " + shape_str(batch.shape()));
        std::vector<TensorT<T>> acts;
        TensorT<T> x = batch;
        for (const auto& l : layers) {
            x = conv2d(x, l.w, l.b, l.stride);
            if (l.activation) x = gelu(x);
            acts.push_back(x);
        }
        return acts;
    }
};

// Target feature statistics fitted on a probe set of real images, plus the
// frozen extractor that produced them.
template <typename T>
struct StatRegularizerT {
    StatExtractorT<T> extractor;
    std::vector<TensorT<T>> mean_targets; // per layer, [C_l]
    std::vector<TensorT<T>> std_targets;  // per layer, [C_l], clamped >= 1e-3
    double alpha = 0.01;
    int clamped_channels = 0;
};

template <typename T>
StatRegularizerT<T> fit_stat_regularizer_with(const TensorT<T>& probe_images,
                                              StatExtractorT<T> extractor, double alpha = 0.01) {
    if (probe_images.ndim() != 4)
        throw dimension_error("fit_stat_regularizer: expected [B,C,H,W] probe batch");
    if (probe_images.dim(0) < 64)
        throw count_error("fit_stat_regularizer: need >= 64 probe images, got " +
                          std::to_string(probe_images.dim(0)));
    StatRegularizerT<T> reg;
    reg.extractor = std::move(extractor);
    reg.alpha = alpha;
    NoGradGuard ng;
    auto acts = reg.extractor.forward_activations(probe_images);
    constexpr T floor = static_cast<T>(1e-3);
    for (const auto& a : acts) {
        reg.mean_targets.push_back(channel_mean(a).detach());
        auto sd = channel_std(a).detach();
        for (auto& v : sd.data())
            if (v < floor) {
                v = floor;
                ++reg.clamped_channels;
            }
        reg.std_targets.push_back(std::move(sd));
    }
    if (reg.clamped_channels > 0)
        std::cerr << "warning: " << reg.clamped_channels
                  << " zero-variance channels clamped to 1e-3 in stat targets\n";
    return reg;
}

template <typename T>
StatRegularizerT<T> fit_stat_regularizer(const TensorT<T>& probe_images, uint64_t extractor_seed,
                                         double alpha = 0.01) {
    if (probe_images.ndim() != 4)
        throw dimension_error("fit_stat_regularizer: expected [B,C,H,W] probe batch");
    return fit_stat_regularizer_with(
        probe_images, StatExtractorT<T>::create_default(probe_images.dim(1), extractor_seed),
        alpha);
}

// sum_l ||mu_l(X) - mu_target|| + ||sigma_l(X) - sigma_target||, each an
// L2 norm over channels. Nonnegative, zero iff statistics match everywhere.
template <typename T>
TensorT<T> stat_penalty(const TensorT<T>& batch, const StatRegularizerT<T>& reg) {
    auto acts = reg.extractor.forward_activations(batch);
    TensorT<T> total;
    for (size_t l = 0; l < acts.size(); ++l) {
        auto mu_term = l2norm(sub(channel_mean(acts[l]), reg.mean_targets[l]));
        auto sd_term = l2norm(sub(channel_std(acts[l]), reg.std_targets[l]));
        auto term = add(mu_term, sd_term);
        total = total.valid() ? add(total, term) : term;
    }
    return total;
}

using StatExtractor = StatExtractorT<float>;
using StatRegularizer = StatRegularizerT<float>;

} // namespace metalora
