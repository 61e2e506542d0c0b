#pragma once

#include <string>
#include <vector>

#include "metalora/tensor.hpp"

namespace metalora {

// Procedural class-conditional image generator: a colored geometric shape,
// spatially jittered, over a textured background. Classes are
// (shape, color) combinations; meta-train and meta-test splits use
// disjoint combinations drawn from the same shape/color vocabulary.
struct GeneratorSpec {
    int image_size = 24;
    int channels = 3;
    int num_shapes = 6;
    int num_colors = 3;
    double shape_amp = 1.1;    // foreground signal strength
    double texture_amp = 0.55; // background nuisance strength
    double noise_std = 0.35;   // pixel noise
    int position_jitter = 4;
    int num_distractors = 3;   // off-class colored shapes in the background
    int texture_family = 0;    // 1 selects a disjoint background family
};

struct ToyDataset {
    GeneratorSpec spec;
    std::vector<TensorT<float>> images;
    std::vector<int> labels; // global class ids
    std::vector<std::string> class_names;
    std::vector<int> train_class_ids;
    std::vector<int> test_class_ids;

    std::vector<int> images_of_class(int class_id) const {
        std::vector<int> out;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == class_id) out.push_back(static_cast<int>(i));
        return out;
    }

    bool is_test_class(int class_id) const {
        for (int c : test_class_ids)
            if (c == class_id) return true;
        return false;
    }
};

ToyDataset generate_toy_dataset(const GeneratorSpec& spec, int train_classes, int test_classes,
                                int per_class_train, int per_class_test, uint64_t seed);

void save_dataset_dir(const std::string& dir, const ToyDataset& ds);
ToyDataset load_dataset_dir(const std::string& dir);

// N-way K-shot episode from the meta-test split, relabeled 0..N-1.
struct Episode {
    int n_way, k_shot, q_query;
    std::vector<TensorT<float>> support_images;
    std::vector<int> support_labels;
    std::vector<TensorT<float>> query_images;
    std::vector<int> query_labels;
    std::vector<int> class_ids; // global class id per task label
};

Episode sample_episode(const ToyDataset& ds, int n, int k, int q, uint64_t seed);

} // namespace metalora
