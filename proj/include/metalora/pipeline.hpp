#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "metalora/dataset.hpp"
#include "metalora/eval.hpp"
#include "metalora/meta.hpp"
#include "metalora/statreg.hpp"

namespace metalora {

struct BackboneTrainConfig {
    int steps = 150;
    int batch = 16;
    double lr = 1e-3;
};

// Brief supervised pretraining of the backbone on the meta-train split;
// the returned model is frozen.
ViTModel pretrain_backbone(const ViTConfig& cfg, const ToyDataset& ds,
                           const BackboneTrainConfig& bcfg, uint64_t seed);

struct TeacherTrainConfig {
    int rank = 4;
    int n_way = 2;
    int max_steps = 400;
    int batch = 8;
    double lr = 1e-3;
    double target_acc = 0.95;
    int eval_every = 10;
};

struct PretuneOutcome {
    LoRAAdapter adapter;
    ClassificationHead head;
    double train_accuracy = 0;
    int steps_used = 0;
};

// Tunes an adapter + head on a class subset of the meta-train split until
// the training pool accuracy reaches the target (or the step cap).
PretuneOutcome pretune_teacher(const ViTModel& model, const ToyDataset& ds,
                               const std::vector<int>& class_subset,
                               const TeacherTrainConfig& tcfg, uint64_t seed,
                               const std::string& task_id);

// Training-pool accuracy of an adapter + head over the given classes.
double teacher_train_accuracy(const ViTModel& model, const LoRAAdapter& adapter,
                              const ClassificationHead& head, const ToyDataset& ds,
                              const std::vector<int>& class_subset);

struct PipelineConfig {
    ViTConfig model;
    GeneratorSpec gen;
    int train_classes = 12;
    int test_classes = 6;
    int per_class_train = 32;
    int per_class_test = 24;
    BackboneTrainConfig backbone;
    TeacherTrainConfig teacher;
    int num_teachers = 20;
    int inv_iterations = 200;
    double inv_lr = 0.25;
    double alpha_r = 0.01;
    int gen_k = 1;
    int gen_q = 3;
    int probe_count = 64;
    bool sparse = false;        // final-layer inversion pruning + sparse meta-training
    double sparse_prune = 0.75; // pruned token fraction in sparse mode
    MetaTrainConfig meta;
    EvalOptions eval;
    uint64_t seed = 0;

    static PipelineConfig desk_defaults();
};

struct PipelineResult {
    std::vector<MethodReport> reports; // meta_lora, nn_baseline, loras_avg_nn, random_lora
    std::vector<MetaLogRecord> meta_log;
    std::vector<double> teacher_accuracies;

    double accuracy(const std::string& method) const {
        for (const auto& r : reports)
            if (r.method == method) return r.accuracy_mean;
        throw state_error("pipeline result: no report for " + method);
    }
};

// The `all` workflow: dataset -> backbone -> teachers -> inversion ->
// meta-training -> evaluation. Writes every artifact under out_dir;
// progress notes go to `progress` when non-null.
PipelineResult run_pipeline(const PipelineConfig& cfg, const std::string& out_dir,
                            std::ostream* progress);

} // namespace metalora
