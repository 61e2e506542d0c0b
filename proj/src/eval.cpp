#include "metalora/eval.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "metalora/config.hpp"
#include "metalora/meta.hpp"
#include "metalora/util.hpp"

namespace metalora {

const char* eval_method_name(EvalMethod m) {
    switch (m) {
        case EvalMethod::meta_lora: return "meta_lora";
        case EvalMethod::nn_baseline: return "nn_baseline";
        case EvalMethod::loras_avg_nn: return "loras_avg_nn";
        case EvalMethod::random_lora: return "random_lora";
    }
    return "?";
}

EvalMethod parse_eval_method(const std::string& name) {
    if (name == "meta_lora") return EvalMethod::meta_lora;
    if (name == "nn_baseline") return EvalMethod::nn_baseline;
    if (name == "loras_avg_nn") return EvalMethod::loras_avg_nn;
    if (name == "random_lora") return EvalMethod::random_lora;
    throw config_error("unknown eval method '" + name + "'");
}

LoRAAdapter random_baseline_adapter(const ViTConfig& cfg, int rank, uint64_t seed) {
    auto adapter = new_adapter<float>(cfg, rank, seed, "random");
    auto rng = make_rng(seed, rng_tag::random_adapter);
    std::normal_distribution<float> d(0.f, 0.02f);
    for (auto& e : adapter.entries)
        for (auto& v : e.b.data()) v = d(rng);
    return adapter;
}

namespace {

struct EpisodeOutcome {
    double accuracy;   // percent
    uint64_t flops;
};

// Shared episodic prototype classification given an embedding function.
template <typename EmbedFn>
EpisodeOutcome run_episode(const Episode& ep, EmbedFn&& embed, bool squared) {
    std::vector<std::vector<TensorT<float>>> per_class(ep.n_way);
    uint64_t flops = 0;
    for (size_t i = 0; i < ep.support_images.size(); ++i) {
        auto [emb, f] = embed(ep.support_images[i], ep.class_ids[ep.support_labels[i]]);
        flops += f;
        per_class[ep.support_labels[i]].push_back(
            reshape(emb, Shape{1, static_cast<int>(emb.numel())}));
    }
    std::vector<TensorT<float>> rows;
    for (int c = 0; c < ep.n_way; ++c) {
        if (per_class[c].empty()) throw count_error("evaluate: class without support");
        TensorT<float> acc = per_class[c][0];
        for (size_t i = 1; i < per_class[c].size(); ++i) acc = add(acc, per_class[c][i]);
        rows.push_back(scale(acc, 1.f / static_cast<float>(per_class[c].size())));
    }
    auto centers = concat_rows(rows);

    int correct = 0;
    for (size_t i = 0; i < ep.query_images.size(); ++i) {
        auto [emb, f] = embed(ep.query_images[i], ep.class_ids[ep.query_labels[i]]);
        flops += f;
        auto probs = proto_probabilities(emb, centers, squared);
        int argmax = 0;
        for (int c = 1; c < ep.n_way; ++c)
            if (probs.data()[c] > probs.data()[argmax]) argmax = c;
        if (argmax == ep.query_labels[i]) ++correct;
    }
    return {100.0 * correct / static_cast<double>(ep.query_images.size()), flops};
}

template <typename EmbedFn>
MethodReport evaluate_core(const ToyDataset& ds, const EvalOptions& opts,
                           const std::string& method_name, EmbedFn&& embed) {
    MethodReport rep;
    rep.method = method_name;
    rep.episodes = opts.episodes;
    const auto t0 = std::chrono::steady_clock::now();
    for (int e = 0; e < opts.episodes; ++e) {
        auto ep = sample_episode(ds, opts.n_way, opts.k_shot, opts.q_query,
                                 mix_seed(opts.seed, static_cast<uint64_t>(e)));
        auto out = run_episode(ep, embed, opts.squared_distance);
        rep.per_episode_accuracy.push_back(out.accuracy);
        rep.total_flops += out.flops;
    }
    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    rep.throughput = secs > 0 ? opts.episodes / secs : 0.0;

    double mean = 0;
    for (double a : rep.per_episode_accuracy) mean += a;
    mean /= opts.episodes;
    double var = 0;
    for (double a : rep.per_episode_accuracy) var += (a - mean) * (a - mean);
    var = opts.episodes > 1 ? var / (opts.episodes - 1) : 0.0;
    rep.accuracy_mean = mean;
    rep.ci95 = 1.96 * std::sqrt(var / opts.episodes);
    return rep;
}

} // namespace

MethodReport evaluate(const ViTModel& model, EvalMethod method, const EvalArtifacts& artifacts,
                      const ToyDataset& ds, const EvalOptions& opts) {
    const LoRAAdapter* adapter = nullptr;
    LoRAAdapter random_adapter;
    switch (method) {
        case EvalMethod::meta_lora:
            if (!artifacts.meta) throw state_error("evaluate: meta_lora needs a meta adapter");
            adapter = artifacts.meta;
            break;
        case EvalMethod::loras_avg_nn:
            if (!artifacts.averaged)
                throw state_error("evaluate: loras_avg_nn needs the averaged adapter");
            adapter = artifacts.averaged;
            break;
        case EvalMethod::random_lora:
            random_adapter =
                random_baseline_adapter(model.cfg, artifacts.random_rank, artifacts.random_seed);
            adapter = &random_adapter;
            break;
        case EvalMethod::nn_baseline:
            adapter = nullptr;
            break;
    }
    opts.plan.validate(model.cfg.depth);
    const PrunePlan* plan = opts.plan.empty() ? nullptr : &opts.plan;

    NoGradGuard ng;
    auto embed = [&](const TensorT<float>& image, int /*class_id*/) {
        ForwardOptions fopts;
        fopts.plan = plan;
        auto out = model.forward(image, adapter, fopts);
        return std::pair<TensorT<float>, uint64_t>(
            out.cls_embedding, flops_estimate_split(model.cfg, out.seq_lens));
    };
    return evaluate_core(ds, opts, eval_method_name(method), embed);
}

MethodReport evaluate_with_hook(const EmbedHook& hook, const ToyDataset& ds,
                                const EvalOptions& opts, const std::string& method_name) {
    auto embed = [&](const TensorT<float>& image, int class_id) {
        return std::pair<TensorT<float>, uint64_t>(hook(image, class_id), 0ULL);
    };
    return evaluate_core(ds, opts, method_name, embed);
}

std::string format_report_table(const std::vector<MethodReport>& reports) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-14s %10s %8s %14s %14s %10s\n", "method", "acc(%)",
                  "ci95", "tasks/s", "flops", "episodes");
    os << line;
    for (const auto& r : reports) {
        std::snprintf(line, sizeof(line), "%-14s %10.2f %8.2f %14.2f %14llu %10d\n",
                      r.method.c_str(), r.accuracy_mean, r.ci95, r.throughput,
                      static_cast<unsigned long long>(r.total_flops), r.episodes);
        os << line;
    }
    return os.str();
}

void save_report(const std::string& path, const std::vector<MethodReport>& reports,
                 const EvalOptions& opts, uint64_t seed) {
    ConfigFile m;
    m.set("eval.episodes", std::to_string(opts.episodes));
    m.set("eval.n", std::to_string(opts.n_way));
    m.set("eval.k", std::to_string(opts.k_shot));
    m.set("eval.q", std::to_string(opts.q_query));
    m.set("eval.seed", std::to_string(seed));
    for (const auto& r : reports) {
        const std::string base = "method." + r.method;
        m.set(base + ".accuracy", format_real(r.accuracy_mean));
        m.set(base + ".ci95", format_real(r.ci95));
        m.set(base + ".flops", std::to_string(r.total_flops));
        m.set(base + ".episodes", std::to_string(r.episodes));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error(io_code::write_failed, "cannot write report " + path);
    f << m.to_text();
}

std::vector<FlopsRow> report_flops_table(const ViTConfig& cfg,
                                         const std::vector<std::pair<std::string, PrunePlan>>& plans,
                                         const std::vector<double>& sparse_ratios,
                                         const ViTModel* measure_model) {
    std::vector<FlopsRow> rows;
    const int m = cfg.num_patches();
    const uint64_t dense_fwd = flops_estimate(cfg, dense_seq_lengths(cfg));

    auto measure = [&](const PrunePlan* plan, const std::vector<int>* kept) -> double {
        if (!measure_model) return 0.0;
        NoGradGuard ng;
        auto rng = make_rng(1234, 99);
        auto image = TensorT<float>::randn(
            {cfg.channels, cfg.image_size, cfg.image_size}, rng);
        ForwardOptions opts;
        opts.plan = plan;
        opts.kept_patches = kept;
        // warmup, then a short timed burst
        measure_model->forward(image, nullptr, opts);
        const int reps = 6;
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < reps; ++i) measure_model->forward(image, nullptr, opts);
        const auto t1 = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(t1 - t0).count();
        return secs > 0 ? reps / secs : 0.0;
    };

    FlopsRow base;
    base.label = "dense";
    base.forward_flops = dense_fwd;
    base.iteration_flops = iteration_flops(dense_fwd);
    base.delta_pct = 0.0;
    base.throughput = measure(nullptr, nullptr);
    rows.push_back(base);

    for (const auto& [label, plan] : plans) {
        FlopsRow r;
        r.label = label;
        r.forward_flops = flops_estimate_split(cfg, plan_seq_lengths(cfg, plan, m));
        r.iteration_flops = iteration_flops(r.forward_flops);
        r.delta_pct = 100.0 * (static_cast<double>(r.forward_flops) / dense_fwd - 1.0);
        r.throughput = measure(&plan, nullptr);
        rows.push_back(r);
    }

    for (double s : sparse_ratios) {
        if (s < 0.0 || s >= 1.0) throw config_error("sparse ratio must lie in [0, 1)");
        const int kept = keep_count(1.0 - s, m);
        FlopsRow r;
        char label[48];
        std::snprintf(label, sizeof(label), "sparse_%02d", static_cast<int>(s * 100 + 0.5));
        r.label = label;
        r.forward_flops =
            flops_estimate(cfg, std::vector<int64_t>(cfg.depth, kept + 1));
        r.iteration_flops = iteration_flops(r.forward_flops);
        r.delta_pct = 100.0 * (static_cast<double>(r.forward_flops) / dense_fwd - 1.0);
        if (measure_model) {
            std::vector<int> positions(kept);
            for (int i = 0; i < kept; ++i) positions[i] = i;
            r.throughput = measure(nullptr, &positions);
        }
        rows.push_back(r);
    }
    return rows;
}

std::string format_flops_table(const std::vector<FlopsRow>& rows) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-14s %16s %16s %9s %12s\n", "config", "fwd FLOPs",
                  "iter FLOPs", "delta", "fwd/s");
    os << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%-14s %16llu %16llu %8.1f%% %12.1f\n",
                      r.label.c_str(), static_cast<unsigned long long>(r.forward_flops),
                      static_cast<unsigned long long>(r.iteration_flops), r.delta_pct,
                      r.throughput);
        os << line;
    }
    return os.str();
}

} // namespace metalora
