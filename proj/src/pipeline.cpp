#include "metalora/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <ostream>

#include "metalora/artifact.hpp"
#include "metalora/inversion.hpp"
#include "metalora/optim.hpp"

namespace metalora {

namespace {

// CE training step over a batch of (image, label) drawn from a pool.
double supervised_step(const ViTModel& model, const LoRAAdapter* adapter,
                       const ClassificationHead& head, const ToyDataset& ds,
                       const std::vector<int>& pool, const std::vector<int>& pool_labels,
                       int batch, OptimizerT<float>& opt, std::mt19937& rng) {
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    std::bernoulli_distribution flip(0.5);
    std::vector<TensorT<float>> embeddings;
    std::vector<int> targets;
    for (int i = 0; i < batch; ++i) {
        const size_t j = pick(rng);
        auto img = flip(rng) ? flip_image(ds.images[pool[j]]) : ds.images[pool[j]];
        embeddings.push_back(model.forward(img, adapter).cls_embedding);
        targets.push_back(pool_labels[j]);
    }
    auto loss = cross_entropy(head_logits<float>(head, embeddings), targets);
    const double value = loss.item();
    opt.zero_grad();
    loss.backward();
    opt.step();
    return value;
}

} // namespace

ViTModel pretrain_backbone(const ViTConfig& cfg, const ToyDataset& ds,
                           const BackboneTrainConfig& bcfg, uint64_t seed) {
    auto model = ViTModel::create(cfg, mix_seed(seed, rng_tag::backbone));
    model.set_trainable(true);

    std::vector<int> pool, pool_labels;
    for (size_t slot = 0; slot < ds.train_class_ids.size(); ++slot)
        for (int idx : ds.images_of_class(ds.train_class_ids[slot])) {
            pool.push_back(idx);
            pool_labels.push_back(static_cast<int>(slot));
        }
    if (pool.empty()) throw state_error("pretrain_backbone: empty meta-train split");

    std::vector<std::string> names;
    for (int cid : ds.train_class_ids) names.push_back(ds.class_names[cid]);
    auto head = new_head<float>(cfg.embed_dim, names);
    head.set_trainable(true);

    auto params = model.parameters();
    auto head_params = head.parameters();
    params.insert(params.end(), head_params.begin(), head_params.end());
    OptimizerT<float> opt(OptKind::adam, params, static_cast<float>(bcfg.lr));

    auto rng = make_rng(seed, rng_tag::backbone + 1);
    for (int step = 0; step < bcfg.steps; ++step)
        supervised_step(model, nullptr, head, ds, pool, pool_labels, bcfg.batch, opt, rng);

    model.set_trainable(false);
    return model;
}

double teacher_train_accuracy(const ViTModel& model, const LoRAAdapter& adapter,
                              const ClassificationHead& head, const ToyDataset& ds,
                              const std::vector<int>& class_subset) {
    NoGradGuard ng;
    int correct = 0, total = 0;
    for (size_t slot = 0; slot < class_subset.size(); ++slot)
        for (int idx : ds.images_of_class(class_subset[slot])) {
            auto emb = model.forward(ds.images[idx], &adapter).cls_embedding;
            auto logits = head_logits<float>(head, {emb});
            int argmax = 0;
            for (int c = 1; c < head.num_classes(); ++c)
                if (logits.data()[c] > logits.data()[argmax]) argmax = c;
            correct += argmax == static_cast<int>(slot);
            ++total;
        }
    return total ? static_cast<double>(correct) / total : 0.0;
}

PretuneOutcome pretune_teacher(const ViTModel& model, const ToyDataset& ds,
                               const std::vector<int>& class_subset,
                               const TeacherTrainConfig& tcfg, uint64_t seed,
                               const std::string& task_id) {
    if (class_subset.size() < 2) throw config_error("pretune: need at least 2 classes");
    for (int cid : class_subset)
        if (ds.is_test_class(cid))
            throw config_error("pretune: class " + std::to_string(cid) +
                               " belongs to the meta-test split");

    std::vector<int> pool, pool_labels;
    std::vector<std::string> names;
    for (size_t slot = 0; slot < class_subset.size(); ++slot) {
        names.push_back(ds.class_names[class_subset[slot]]);
        for (int idx : ds.images_of_class(class_subset[slot])) {
            pool.push_back(idx);
            pool_labels.push_back(static_cast<int>(slot));
        }
    }

    PretuneOutcome out;
    out.adapter = new_adapter<float>(model.cfg, tcfg.rank, mix_seed(seed, rng_tag::teacher), task_id);
    out.adapter.class_names = names;
    out.adapter.set_trainable(true);
    out.head = new_head<float>(model.cfg.embed_dim, names);
    out.head.set_trainable(true);

    auto params = out.adapter.parameters();
    auto head_params = out.head.parameters();
    params.insert(params.end(), head_params.begin(), head_params.end());
    OptimizerT<float> opt(OptKind::adam, params, static_cast<float>(tcfg.lr));

    auto rng = make_rng(seed, rng_tag::teacher + 2);
    for (int step = 0; step < tcfg.max_steps; ++step) {
        supervised_step(model, &out.adapter, out.head, ds, pool, pool_labels, tcfg.batch, opt,
                        rng);
        out.steps_used = step + 1;
        if ((step + 1) % tcfg.eval_every == 0) {
            out.train_accuracy =
                teacher_train_accuracy(model, out.adapter, out.head, ds, class_subset);
            if (out.train_accuracy >= tcfg.target_acc) break;
        }
    }
    if (out.train_accuracy < tcfg.target_acc)
        out.train_accuracy = teacher_train_accuracy(model, out.adapter, out.head, ds, class_subset);

    const double chance = 1.0 / static_cast<double>(class_subset.size());
    if (out.train_accuracy <= chance + 0.05)
        throw state_error("pretune: teacher " + task_id + " stayed at chance (" +
                          format_real(out.train_accuracy) + ") after " +
                          std::to_string(out.steps_used) + " steps; toy dataset misconfigured?");

    out.adapter.set_trainable(false);
    out.head.set_trainable(false);
    return out;
}

PipelineConfig PipelineConfig::desk_defaults() {
    PipelineConfig cfg;
    cfg.model.image_size = 24;
    cfg.model.patch_size = 4;
    cfg.model.channels = 3;
    cfg.model.depth = 2;
    cfg.model.embed_dim = 64;
    cfg.model.num_heads = 4;
    cfg.gen.image_size = 24;
    cfg.meta.outer_iters = 300;
    cfg.meta.p_interp = 0.3;
    cfg.meta.n_way = 2;
    cfg.meta.k_shot = 1;
    cfg.meta.q_query = 3;
    cfg.eval.episodes = 100;
    cfg.eval.n_way = 2;
    cfg.eval.k_shot = 1;
    cfg.eval.q_query = 15;
    return cfg;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, const std::string& out_dir,
                            std::ostream* progress) {
    namespace fs = std::filesystem;
    cfg.model.validate();
    cfg.meta.validate();
    fs::create_directories(out_dir);
    auto note = [&](const std::string& msg) {
        if (progress) *progress << msg << "\n" << std::flush;
    };

    // dataset
    auto ds = generate_toy_dataset(cfg.gen, cfg.train_classes, cfg.test_classes,
                                   cfg.per_class_train, cfg.per_class_test, cfg.seed);
    save_dataset_dir((fs::path(out_dir) / "dataset").string(), ds);
    note("dataset: " + std::to_string(ds.images.size()) + " images, " +
         std::to_string(cfg.train_classes) + "+" + std::to_string(cfg.test_classes) + " classes");

    // backbone
    auto model = pretrain_backbone(cfg.model, ds, cfg.backbone, cfg.seed);
    save_model_artifact((fs::path(out_dir) / "backbone.lrcy").string(), model);
    note("backbone: pretrained " + std::to_string(cfg.backbone.steps) + " steps, frozen");

    // statistics regularizer from a probe of meta-train images
    std::vector<int> train_pool;
    for (int cid : ds.train_class_ids)
        for (int idx : ds.images_of_class(cid)) train_pool.push_back(idx);
    auto probe_rng = make_rng(cfg.seed, rng_tag::probe);
    std::shuffle(train_pool.begin(), train_pool.end(), probe_rng);
    const int probe_count = std::min<int>(cfg.probe_count, static_cast<int>(train_pool.size()));
    auto probe = TensorT<float>::zeros(
        {probe_count, cfg.model.channels, cfg.model.image_size, cfg.model.image_size});
    for (int i = 0; i < probe_count; ++i) {
        const auto& img = ds.images[train_pool[i]].data();
        std::copy(img.begin(), img.end(), probe.data().begin() + static_cast<size_t>(i) * img.size());
    }
    auto reg = fit_stat_regularizer(probe, mix_seed(cfg.seed, rng_tag::extractor), cfg.alpha_r);

    // teachers on distinct class pairs
    std::vector<std::vector<int>> subsets;
    {
        std::vector<std::vector<int>> pairs;
        for (size_t i = 0; i < ds.train_class_ids.size(); ++i)
            for (size_t j = i + 1; j < ds.train_class_ids.size(); ++j) {
                if (cfg.teacher.n_way != 2) break;
                pairs.push_back({ds.train_class_ids[i], ds.train_class_ids[j]});
            }
        auto rng = make_rng(cfg.seed, rng_tag::teacher + 500);
        if (cfg.teacher.n_way == 2 && !pairs.empty()) {
            std::shuffle(pairs.begin(), pairs.end(), rng);
            for (int t = 0; t < cfg.num_teachers; ++t)
                subsets.push_back(pairs[t % pairs.size()]);
        } else {
            for (int t = 0; t < cfg.num_teachers; ++t) {
                auto ids = ds.train_class_ids;
                std::shuffle(ids.begin(), ids.end(), rng);
                ids.resize(cfg.teacher.n_way);
                std::sort(ids.begin(), ids.end());
                subsets.push_back(ids);
            }
        }
    }

    PrunePlan inv_plan;
    if (cfg.sparse) inv_plan.keep[cfg.model.depth - 1] = 1.0 - cfg.sparse_prune;

    fs::create_directories(fs::path(out_dir) / "teachers");
    fs::create_directories(fs::path(out_dir) / "tasks");
    PipelineResult res;
    std::vector<Teacher> teachers;
    std::vector<LoRAAdapter> teacher_adapters;
    for (int t = 0; t < cfg.num_teachers; ++t) {
        char id[32];
        std::snprintf(id, sizeof(id), "teacher_%02d", t);
        auto outcome = pretune_teacher(model, ds, subsets[t], cfg.teacher,
                                       mix_seed(cfg.seed, 1000 + t), id);
        res.teacher_accuracies.push_back(outcome.train_accuracy);
        char fname[48];
        std::snprintf(fname, sizeof(fname), "teachers/%s.lrcy", id);
        save_adapter_artifact((fs::path(out_dir) / fname).string(), outcome.adapter, outcome.head);

        InversionConfig icfg;
        icfg.iterations = cfg.inv_iterations;
        icfg.lr = cfg.inv_lr;
        icfg.batch_size = cfg.teacher.n_way * (cfg.gen_k + cfg.gen_q);
        icfg.alpha_r = cfg.alpha_r;
        icfg.plan = inv_plan;
        icfg.seed = mix_seed(cfg.seed, 2000 + t);
        auto inv = invert(model, outcome.adapter, outcome.head, icfg, reg);
        auto task = build_task(inv, outcome.head, id, cfg.gen_k, cfg.gen_q);
        char tdir[48];
        std::snprintf(tdir, sizeof(tdir), "tasks/task_%02d", t);
        save_task_dir((fs::path(out_dir) / tdir).string(), task, cfg.model.image_size,
                      cfg.model.channels);

        teacher_adapters.push_back(outcome.adapter);
        teachers.push_back({std::move(outcome.adapter), std::move(outcome.head), std::move(task),
                            id});
        note(std::string(id) + ": acc " + format_real(outcome.train_accuracy) + " after " +
             std::to_string(outcome.steps_used) + " steps; inversion CE " +
             format_real(inv.ce_trace.front()) + " -> " + format_real(inv.ce_trace.back()));
    }

    // meta-training
    MetaTrainConfig mcfg = cfg.meta;
    mcfg.sparse_mode = cfg.sparse;
    mcfg.seed = mix_seed(cfg.seed, rng_tag::meta);
    auto trained = meta_train(model, teachers, mcfg);
    save_meta_adapter_artifact((fs::path(out_dir) / "meta.lrcy").string(), trained.meta.adapter);
    write_meta_log((fs::path(out_dir) / "train_log.txt").string(), trained.log);
    res.meta_log = trained.log;
    note("meta: " + std::to_string(mcfg.outer_iters) + " steps, final loss " +
         format_real(trained.log.back().loss));

    // evaluation
    auto averaged = average_adapters(teacher_adapters);
    EvalArtifacts arts;
    arts.meta = &trained.meta.adapter;
    arts.averaged = &averaged;
    arts.random_seed = mix_seed(cfg.seed, rng_tag::random_adapter);
    arts.random_rank = cfg.meta.meta_rank;
    EvalOptions eopts = cfg.eval;
    eopts.seed = mix_seed(cfg.seed, rng_tag::episodes);
    for (EvalMethod m : {EvalMethod::meta_lora, EvalMethod::nn_baseline,
                         EvalMethod::loras_avg_nn, EvalMethod::random_lora})
        res.reports.push_back(evaluate(model, m, arts, ds, eopts));
    save_report((fs::path(out_dir) / "report.txt").string(), res.reports, eopts, cfg.seed);
    note(format_report_table(res.reports));
    return res;
}

} // namespace metalora
