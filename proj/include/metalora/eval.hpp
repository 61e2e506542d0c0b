#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "metalora/dataset.hpp"
#include "metalora/lora.hpp"
#include "metalora/vit.hpp"

namespace metalora {

enum class EvalMethod { meta_lora, nn_baseline, loras_avg_nn, random_lora };

const char* eval_method_name(EvalMethod m);
EvalMethod parse_eval_method(const std::string& name);

struct EvalOptions {
    int episodes = 100;
    int n_way = 2;
    int k_shot = 1;
    int q_query = 15;
    uint64_t seed = 0;
    PrunePlan plan; // optional evaluation-time token pruning
    bool squared_distance = false;
};

struct MethodReport {
    std::string method;
    double accuracy_mean = 0; // percent
    double ci95 = 0;          // 95% half-width, percent
    double throughput = 0;    // tasks per second, wall clock
    uint64_t total_flops = 0; // analytic forward cost of all embeddings
    int episodes = 0;
    std::vector<double> per_episode_accuracy;
};

// Which artifacts back each method; only the relevant field is read.
struct EvalArtifacts {
    const LoRAAdapter* meta = nullptr;
    const LoRAAdapter* averaged = nullptr;
    uint64_t random_seed = 0;
    int random_rank = 4;
};

// Episodic prototype-classifier evaluation; all methods share the
// classifier and differ only in the attached adapter. Never updates any
// parameter.
MethodReport evaluate(const ViTModel& model, EvalMethod method, const EvalArtifacts& artifacts,
                      const ToyDataset& ds, const EvalOptions& opts);

// Test hook: replaces the model embedding with an arbitrary function of
// (image, global class id of the image's episode slot).
using EmbedHook = std::function<TensorT<float>(const TensorT<float>&, int)>;
MethodReport evaluate_with_hook(const EmbedHook& hook, const ToyDataset& ds,
                                const EvalOptions& opts, const std::string& method_name);

// A random-initialized adapter (both factors Gaussian) for the
// random_lora baseline.
LoRAAdapter random_baseline_adapter(const ViTConfig& cfg, int rank, uint64_t seed);

std::string format_report_table(const std::vector<MethodReport>& reports);

// Persisted report: deterministic fields only (timing goes to stdout, not
// to disk, so identical seeds produce identical files).
void save_report(const std::string& path, const std::vector<MethodReport>& reports,
                 const EvalOptions& opts, uint64_t seed);

// ---- complexity tables ----

struct FlopsRow {
    std::string label;
    uint64_t forward_flops = 0;
    uint64_t iteration_flops = 0; // forward + backward
    double delta_pct = 0;         // vs the unpruned row
    double throughput = 0;        // measured forwards/s, 0 when unmeasured
};

// Rows for prune plans (inversion-style mid-layer accounting) and for
// sparse ratios (token subsets from the first layer on). Throughput is
// measured on `measure_model` when provided.
std::vector<FlopsRow> report_flops_table(const ViTConfig& cfg,
                                         const std::vector<std::pair<std::string, PrunePlan>>& plans,
                                         const std::vector<double>& sparse_ratios,
                                         const ViTModel* measure_model);

std::string format_flops_table(const std::vector<FlopsRow>& rows);

} // namespace metalora
