#pragma once

#include <random>
#include <string>
#include <vector>

#include "metalora/inversion.hpp"
#include "metalora/lora.hpp"
#include "metalora/optim.hpp"
#include "metalora/vit.hpp"

namespace metalora {

// The adapter being distilled. trainable_layers restricts which attachment
// layers receive gradient updates (empty = all layers).
struct MetaLoRA {
    LoRAAdapter adapter;
    std::vector<int> trainable_layers;

    std::vector<TensorT<float>> trainable_parameters() const {
        if (trainable_layers.empty()) return adapter.parameters();
        return adapter.parameters_for_layers(trainable_layers);
    }
};

struct PrototypeSet {
    TensorT<float> centers;        // [N x D], stays differentiable
    std::vector<int> class_labels; // task-local labels 0..N-1
};

struct MetaTrainConfig {
    int outer_iters = 300;
    double p_interp = 0.3;
    int n_way = 2;
    int k_shot = 1;
    int q_query = 3;
    bool sparse_mode = false;
    bool augment_flip = true;
    bool squared_distance = false; // Euclidean norm by default
    bool train_backbone = false;   // ablation flag, not part of acceptance
    int meta_rank = 4;
    std::vector<int> trainable_layers; // empty = all
    LrSchedule schedule;               // default: 25 warmup + 75 cosine, cyclic
    uint64_t seed = 0;

    void validate() const {
        if (outer_iters < 1) throw config_error("meta train: outer_iters must be >= 1");
        if (p_interp < 0.0 || p_interp > 1.0)
            throw config_error("meta train: p_interp must lie in [0, 1]");
        if (n_way < 2 || k_shot < 1 || q_query < 1)
            throw config_error("meta train: episode shape invalid");
        if (meta_rank < 1) throw config_error("meta train: rank must be >= 1");
    }
};

// Teacher bundle: the pre-tuned adapter + head and its generated task.
struct Teacher {
    LoRAAdapter adapter;
    ClassificationHead head;
    GeneratedTask task;
    std::string id;
};

struct MetaLogRecord {
    int iter;
    std::string branch; // "distill" | "interp"
    double loss;
    double lr;
    uint64_t flops;   // student forward+backward for the step
    double wall_ms;
};

// ---- prototypical inner loop ----

// Class probabilities from distances to centers: softmax over
// -||e - c_i||_2 (or the squared form behind the switch).
TensorT<float> proto_probabilities(const TensorT<float>& embedding, const TensorT<float>& centers,
                                   bool squared_distance = false);

// Embeds each support image through the adapter-equipped model and averages
// per class. In sparse mode only mask-selected tokens are fed, with their
// own position encodings. masks may be null in dense mode.
PrototypeSet embed_support(const ViTModel& model, const LoRAAdapter& adapter,
                           const std::vector<TensorT<float>>& images,
                           const std::vector<int>& labels, int n_way, bool sparse_mode,
                           const std::vector<TokenMask>* masks = nullptr);

TensorT<float> proto_predict(const ViTModel& model, const LoRAAdapter& adapter,
                             const PrototypeSet& protos, const TensorT<float>& query_image,
                             bool sparse_mode = false, const TokenMask* mask = nullptr,
                             bool squared_distance = false);

// ---- outer loop steps ----

// One KL-distillation step against a teacher on its generated task.
// Returns the loss before the update. Teacher forwards run dense and
// detached; only the meta parameters move.
double distill_step(const ViTModel& model, MetaLoRA& meta, const Teacher& teacher,
                    const GeneratedTask& task, OptimizerT<float>& opt,
                    const MetaTrainConfig& cfg, std::mt19937& rng, uint64_t* step_flops = nullptr);

// One CE step on an interpolated task (Alg. 1 else-branch).
double interpolation_step(const ViTModel& model, MetaLoRA& meta, const GeneratedTask& task,
                          OptimizerT<float>& opt, const MetaTrainConfig& cfg, std::mt19937& rng,
                          uint64_t* step_flops = nullptr);

// Assembles a task from classes of >= 2 different source tasks, relabeled
// 0..n-1. Class identity is the class name; support/query are drawn from
// the owning source's generated pool.
GeneratedTask interpolate_task(const std::vector<GeneratedTask>& tasks, int n, int k, int q,
                               std::mt19937& rng, bool allow_same_source = false);

struct MetaTrainResult {
    MetaLoRA meta;
    std::vector<MetaLogRecord> log;
};

MetaTrainResult meta_train(const ViTModel& model, const std::vector<Teacher>& teachers,
                           const MetaTrainConfig& cfg);

void write_meta_log(const std::string& path, const std::vector<MetaLogRecord>& log);

// Horizontal flip of a [C,H,W] image (data-level, new leaf).
TensorT<float> flip_image(const TensorT<float>& image);

} // namespace metalora
