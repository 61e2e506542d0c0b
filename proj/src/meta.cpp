#include "metalora/meta.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>

namespace metalora {

namespace {

uint64_t forward_flops(const ViTConfig& cfg, const ForwardOutputT<float>& out) {
    return flops_estimate_split(cfg, out.seq_lens);
}

// Student-side embedding of one image, honoring sparse mode.
ForwardOutputT<float> student_forward(const ViTModel& model, const LoRAAdapter& adapter,
                                      const TensorT<float>& image, bool sparse_mode,
                                      const TokenMask* mask) {
    ForwardOptions opts;
    std::vector<int> kept;
    if (sparse_mode) {
        if (!mask) throw state_error("sparse mode requires a token mask");
        kept = mask->kept_positions();
        opts.kept_patches = &kept;
    }
    return model.forward(image, &adapter, opts);
}

} // namespace

TensorT<float> flip_image(const TensorT<float>& image) {
    if (image.ndim() != 3) throw dimension_error("flip_image: expected [C,H,W]");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    auto out = TensorT<float>::zeros(image.shape());
    const auto& src = image.data();
    auto& dst = out.data();
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                dst[(static_cast<size_t>(ci) * h + y) * w + x] =
                    src[(static_cast<size_t>(ci) * h + y) * w + (w - 1 - x)];
    return out;
}

TensorT<float> proto_probabilities(const TensorT<float>& embedding, const TensorT<float>& centers,
                                   bool squared_distance) {
    auto logits = squared_distance ? neg_sq_distance_logits(embedding, centers)
                                   : neg_distance_logits(embedding, centers);
    return softmax(logits, 0);
}

PrototypeSet embed_support(const ViTModel& model, const LoRAAdapter& adapter,
                           const std::vector<TensorT<float>>& images,
                           const std::vector<int>& labels, int n_way, bool sparse_mode,
                           const std::vector<TokenMask>* masks) {
    if (images.size() != labels.size())
        throw dimension_error("embed_support: images and labels must align");
    if (sparse_mode && (!masks || masks->size() != images.size()))
        throw state_error("embed_support: sparse mode requires one mask per image");

    std::vector<std::vector<TensorT<float>>> per_class(n_way);
    for (size_t i = 0; i < images.size(); ++i) {
        const int label = labels[i];
        if (label < 0 || label >= n_way)
            throw index_error("embed_support: label " + std::to_string(label));
        auto out = student_forward(model, adapter, images[i], sparse_mode,
                                   masks ? &(*masks)[i] : nullptr);
        per_class[label].push_back(
            reshape(out.cls_embedding, Shape{1, model.cfg.embed_dim}));
    }
    std::vector<TensorT<float>> rows;
    for (int c = 0; c < n_way; ++c) {
        if (per_class[c].empty())
            throw count_error("embed_support: class " + std::to_string(c) +
                              " has no support examples");
        TensorT<float> acc = per_class[c][0];
        for (size_t i = 1; i < per_class[c].size(); ++i) acc = add(acc, per_class[c][i]);
        rows.push_back(scale(acc, 1.f / static_cast<float>(per_class[c].size())));
    }
    PrototypeSet protos;
    protos.centers = concat_rows(rows);
    protos.class_labels.resize(n_way);
    for (int c = 0; c < n_way; ++c) protos.class_labels[c] = c;
    return protos;
}

TensorT<float> proto_predict(const ViTModel& model, const LoRAAdapter& adapter,
                             const PrototypeSet& protos, const TensorT<float>& query_image,
                             bool sparse_mode, const TokenMask* mask, bool squared_distance) {
    if (!protos.centers.valid() || protos.centers.dim(0) < 1)
        throw state_error("proto_predict: empty prototype set");
    auto out = student_forward(model, adapter, query_image, sparse_mode, mask);
    return proto_probabilities(out.cls_embedding, protos.centers, squared_distance);
}

namespace {

struct StepInputs {
    std::vector<TensorT<float>> support_images;
    std::vector<int> support_labels;
    std::vector<TensorT<float>> query_images;
    std::vector<int> query_labels;
    std::vector<TokenMask> support_masks;
    std::vector<TokenMask> query_masks;
};

// Materializes the step's images, applying the per-step horizontal flips
// shared by student and teacher views.
StepInputs gather_step_inputs(const GeneratedTask& task, const MetaTrainConfig& cfg,
                              std::mt19937& rng) {
    StepInputs in;
    std::bernoulli_distribution flip(0.5);
    auto push = [&](int idx, bool support) {
        bool do_flip = cfg.augment_flip && flip(rng);
        TensorT<float> img = do_flip ? flip_image(task.images[idx]) : task.images[idx];
        TokenMask mask = do_flip ? task.masks[idx].flipped_horizontal() : task.masks[idx];
        if (support) {
            in.support_images.push_back(std::move(img));
            in.support_labels.push_back(task.labels[idx]);
            in.support_masks.push_back(std::move(mask));
        } else {
            in.query_images.push_back(std::move(img));
            in.query_labels.push_back(task.labels[idx]);
            in.query_masks.push_back(std::move(mask));
        }
    };
    for (int idx : task.support_idx) push(idx, true);
    for (int idx : task.query_idx) push(idx, false);
    return in;
}

// Student probability matrix [Q x N] over the task classes, accumulating
// the analytic forward cost into flops.
TensorT<float> student_probs(const ViTModel& model, const LoRAAdapter& adapter,
                             const StepInputs& in, const MetaTrainConfig& cfg, int n_way,
                             uint64_t& flops) {
    std::vector<std::vector<TensorT<float>>> per_class(n_way);
    for (size_t i = 0; i < in.support_images.size(); ++i) {
        auto out = student_forward(model, adapter, in.support_images[i], cfg.sparse_mode,
                                   &in.support_masks[i]);
        flops += forward_flops(model.cfg, out);
        per_class[in.support_labels[i]].push_back(
            reshape(out.cls_embedding, Shape{1, model.cfg.embed_dim}));
    }
    std::vector<TensorT<float>> rows;
    for (int c = 0; c < n_way; ++c) {
        if (per_class[c].empty())
            throw count_error("student step: class " + std::to_string(c) + " lacks support");
        TensorT<float> acc = per_class[c][0];
        for (size_t i = 1; i < per_class[c].size(); ++i) acc = add(acc, per_class[c][i]);
        rows.push_back(scale(acc, 1.f / static_cast<float>(per_class[c].size())));
    }
    auto centers = concat_rows(rows);

    std::vector<TensorT<float>> prob_rows;
    for (size_t i = 0; i < in.query_images.size(); ++i) {
        auto out = student_forward(model, adapter, in.query_images[i], cfg.sparse_mode,
                                   &in.query_masks[i]);
        flops += forward_flops(model.cfg, out);
        auto probs = proto_probabilities(out.cls_embedding, centers, cfg.squared_distance);
        prob_rows.push_back(reshape(probs, Shape{1, n_way}));
    }
    return concat_rows(prob_rows);
}

} // namespace

double distill_step(const ViTModel& model, MetaLoRA& meta, const Teacher& teacher,
                    const GeneratedTask& task, OptimizerT<float>& opt,
                    const MetaTrainConfig& cfg, std::mt19937& rng, uint64_t* step_flops) {
    if (task.n_way != teacher.head.num_classes())
        throw validation_error("distill step: task label space (" + std::to_string(task.n_way) +
                               " classes) does not match the teacher head (" +
                               std::to_string(teacher.head.num_classes()) + ")");
    auto in = gather_step_inputs(task, cfg, rng);

    uint64_t flops = 0;
    auto student = student_probs(model, meta.adapter, in, cfg, task.n_way, flops);

    // Teacher targets on the unmasked (dense) query images.
    TensorT<float> teacher_probs;
    {
        NoGradGuard ng;
        std::vector<TensorT<float>> embeddings;
        for (const auto& img : in.query_images)
            embeddings.push_back(model.forward(img, &teacher.adapter).cls_embedding);
        teacher_probs = softmax(head_logits<float>(teacher.head, embeddings), 1);
    }

    auto loss = kl_divergence(student, teacher_probs);
    const double value = loss.item();
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (step_flops) *step_flops = iteration_flops(flops);
    return value;
}

double interpolation_step(const ViTModel& model, MetaLoRA& meta, const GeneratedTask& task,
                          OptimizerT<float>& opt, const MetaTrainConfig& cfg, std::mt19937& rng,
                          uint64_t* step_flops) {
    auto in = gather_step_inputs(task, cfg, rng);
    uint64_t flops = 0;
    auto student = student_probs(model, meta.adapter, in, cfg, task.n_way, flops);

    // CE over probabilities: clamp inside the log like the KL path.
    const int q = student.dim(0), n = student.dim(1);
    (void)n;
    TensorT<float> loss;
    {
        // -mean log p[label]
        std::vector<TensorT<float>> picks;
        for (int i = 0; i < q; ++i) {
            auto row = take_rows(student, {i});
            picks.push_back(slice_cols(row, in.query_labels[i], 1));
        }
        auto stacked = concat_rows(picks); // [Q x 1]
        loss = scale(sum(log_clamped(stacked)), -1.f / static_cast<float>(q));
    }
    const double value = loss.item();
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (step_flops) *step_flops = iteration_flops(flops);
    return value;
}

GeneratedTask interpolate_task(const std::vector<GeneratedTask>& tasks, int n, int k, int q,
                               std::mt19937& rng, bool allow_same_source) {
    if (!allow_same_source && tasks.size() < 2)
        throw count_error("interpolate_task: need at least 2 source tasks");
    if (n < 2) throw config_error("interpolate_task: n must be >= 2");

    struct Candidate {
        int task_idx;
        int slot;
        std::string name;
        std::string source;
    };
    std::vector<Candidate> candidates;
    for (size_t t = 0; t < tasks.size(); ++t)
        for (int c = 0; c < tasks[t].n_way; ++c)
            candidates.push_back({static_cast<int>(t), c, tasks[t].classes[c].name,
                                  tasks[t].classes[c].source_id});
    std::set<std::string> distinct;
    for (const auto& c : candidates) distinct.insert(c.name);
    if (static_cast<int>(distinct.size()) < n)
        throw count_error("interpolate_task: only " + std::to_string(distinct.size()) +
                          " distinct classes available, need " + std::to_string(n));

    std::shuffle(candidates.begin(), candidates.end(), rng);

    std::vector<Candidate> picked;
    std::set<std::string> used_names;
    auto try_pick = [&](auto pred) {
        for (const auto& c : candidates) {
            if (used_names.count(c.name)) continue;
            if (!pred(c)) continue;
            picked.push_back(c);
            used_names.insert(c.name);
            return true;
        }
        return false;
    };
    try_pick([](const Candidate&) { return true; });
    if (!allow_same_source) {
        // second pick must come from a different source task
        if (!try_pick([&](const Candidate& c) { return c.source != picked[0].source; }))
            throw count_error("interpolate_task: classes span a single source");
    }
    while (static_cast<int>(picked.size()) < n)
        if (!try_pick([](const Candidate&) { return true; }))
            throw count_error("interpolate_task: exhausted candidate classes");

    GeneratedTask out;
    out.n_way = n;
    out.k_shot = k;
    out.q_query = q;
    std::set<std::string> sources;
    for (int new_label = 0; new_label < n; ++new_label) {
        const auto& pick = picked[new_label];
        const auto& src = tasks[pick.task_idx];
        std::vector<int> pool;
        for (size_t i = 0; i < src.labels.size(); ++i)
            if (src.labels[i] == pick.slot) pool.push_back(static_cast<int>(i));
        if (static_cast<int>(pool.size()) < k + q)
            throw count_error("interpolate_task: class " + pick.name + " pool has " +
                              std::to_string(pool.size()) + " images, needs " +
                              std::to_string(k + q));
        std::shuffle(pool.begin(), pool.end(), rng);
        for (int i = 0; i < k + q; ++i) {
            const int src_idx = pool[i];
            const int new_idx = static_cast<int>(out.images.size());
            out.images.push_back(src.images[src_idx]);
            out.masks.push_back(src.masks[src_idx]);
            out.labels.push_back(new_label);
            if (i < k) out.support_idx.push_back(new_idx);
            else out.query_idx.push_back(new_idx);
        }
        out.classes.push_back(src.classes[pick.slot]);
        sources.insert(pick.source);
    }
    out.source_ids.assign(sources.begin(), sources.end());
    return out;
}

MetaTrainResult meta_train(const ViTModel& model, const std::vector<Teacher>& teachers,
                           const MetaTrainConfig& cfg) {
    cfg.validate();
    if (teachers.empty()) throw state_error("meta_train: no teachers with generated tasks");
    for (const auto& t : teachers)
        if (t.task.images.empty())
            throw state_error("meta_train: teacher " + t.id + " has no generated task");

    MetaTrainResult res;
    res.meta.adapter = new_adapter<float>(model.cfg, cfg.meta_rank, mix_seed(cfg.seed, rng_tag::meta),
                                          "meta");
    res.meta.trainable_layers = cfg.trainable_layers;
    res.meta.adapter.set_trainable(false);
    for (auto p : res.meta.trainable_parameters()) p.set_requires_grad(true);

    std::vector<TensorT<float>> params = res.meta.trainable_parameters();
    if (cfg.train_backbone) {
        auto backbone = model.parameters();
        for (auto p : backbone) p.set_requires_grad(true);
        params.insert(params.end(), backbone.begin(), backbone.end());
    }
    OptimizerT<float> opt(OptKind::adam, params, static_cast<float>(cfg.schedule.at(0)));

    std::vector<GeneratedTask> all_tasks;
    for (const auto& t : teachers) all_tasks.push_back(t.task);

    auto rng = make_rng(cfg.seed, rng_tag::meta);
    std::bernoulli_distribution interp_coin(cfg.p_interp);
    std::uniform_int_distribution<size_t> pick_teacher(0, teachers.size() - 1);

    for (int iter = 0; iter < cfg.outer_iters; ++iter) {
        const double lr = cfg.schedule.at(iter);
        opt.set_lr(static_cast<float>(lr));
        const bool interp = cfg.p_interp >= 1.0 ? true
                            : (cfg.p_interp <= 0.0 ? false : interp_coin(rng));
        const auto t0 = std::chrono::steady_clock::now();
        uint64_t flops = 0;
        double loss;
        std::string branch;
        if (interp) {
            auto task = interpolate_task(all_tasks, cfg.n_way, cfg.k_shot, cfg.q_query, rng,
                                         teachers.size() < 2);
            loss = interpolation_step(model, res.meta, task, opt, cfg, rng, &flops);
            branch = "interp";
        } else {
            const auto& teacher = teachers[pick_teacher(rng)];
            loss = distill_step(model, res.meta, teacher, teacher.task, opt, cfg, rng, &flops);
            branch = "distill";
        }
        const auto t1 = std::chrono::steady_clock::now();
        res.log.push_back({iter, branch, loss, lr, flops,
                           std::chrono::duration<double, std::milli>(t1 - t0).count()});
    }
    return res;
}

void write_meta_log(const std::string& path, const std::vector<MetaLogRecord>& log) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw io_error(io_code::write_failed, "cannot open log " + path);
    for (const auto& r : log)
        f << "iter=" << r.iter << " branch=" << r.branch << " loss=" << format_real(r.loss)
          << " lr=" << format_real(r.lr) << " flops=" << r.flops
          << " wall_ms=" << format_real(r.wall_ms) << "\n";
}

} // namespace metalora
