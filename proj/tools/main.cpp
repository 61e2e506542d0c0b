// Command-line entry: gen-data, pretune, invert, meta-train, eval, flops,
// and the full `all` pipeline. Every subcommand accepts --seed and an
// optional --config file; flags override config values.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "metalora/artifact.hpp"
#include "metalora/config.hpp"
#include "metalora/inversion.hpp"
#include "metalora/pipeline.hpp"

using namespace metalora;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
    uint64_t seed = 0;
    std::string config_path;
};

ConfigFile load_config_or_empty(const std::string& path) {
    if (path.empty()) return ConfigFile{};
    return ConfigFile::load(path);
}

ViTConfig model_from_config(const ConfigFile& cfg) {
    ViTConfig m = PipelineConfig::desk_defaults().model;
    m.image_size = static_cast<int>(cfg.get_int("model.image_size", m.image_size));
    m.patch_size = static_cast<int>(cfg.get_int("model.patch_size", m.patch_size));
    m.channels = static_cast<int>(cfg.get_int("model.channels", m.channels));
    m.depth = static_cast<int>(cfg.get_int("model.depth", m.depth));
    m.embed_dim = static_cast<int>(cfg.get_int("model.embed_dim", m.embed_dim));
    m.num_heads = static_cast<int>(cfg.get_int("model.num_heads", m.num_heads));
    m.mlp_ratio = static_cast<int>(cfg.get_int("model.mlp_ratio", m.mlp_ratio));
    return m;
}

PipelineConfig pipeline_from_config(const ConfigFile& cfg, uint64_t seed) {
    PipelineConfig p = PipelineConfig::desk_defaults();
    p.model = model_from_config(cfg);
    p.gen.image_size = p.model.image_size;
    p.gen.texture_family = static_cast<int>(cfg.get_int("dataset.texture_family", 0));
    p.gen.texture_amp = cfg.get_real("dataset.texture_amp", p.gen.texture_amp);
    p.gen.noise_std = cfg.get_real("dataset.noise_std", p.gen.noise_std);
    p.gen.shape_amp = cfg.get_real("dataset.shape_amp", p.gen.shape_amp);
    p.gen.position_jitter = static_cast<int>(cfg.get_int("dataset.position_jitter", p.gen.position_jitter));
    p.gen.num_distractors = static_cast<int>(cfg.get_int("dataset.num_distractors", p.gen.num_distractors));
    p.train_classes = static_cast<int>(cfg.get_int("dataset.train_classes", p.train_classes));
    p.test_classes = static_cast<int>(cfg.get_int("dataset.test_classes", p.test_classes));
    p.per_class_train = static_cast<int>(cfg.get_int("dataset.per_class_train", p.per_class_train));
    p.per_class_test = static_cast<int>(cfg.get_int("dataset.per_class_test", p.per_class_test));
    p.backbone.steps = static_cast<int>(cfg.get_int("backbone.steps", p.backbone.steps));
    p.teacher.target_acc = cfg.get_real("teachers.target_acc", p.teacher.target_acc);
    p.backbone.batch = static_cast<int>(cfg.get_int("backbone.batch", p.backbone.batch));
    p.backbone.lr = cfg.get_real("backbone.lr", p.backbone.lr);
    p.num_teachers = static_cast<int>(cfg.get_int("teachers.count", p.num_teachers));
    p.teacher.rank = static_cast<int>(cfg.get_int("teachers.rank", p.teacher.rank));
    p.teacher.n_way = static_cast<int>(cfg.get_int("teachers.n_way", p.teacher.n_way));
    p.teacher.max_steps = static_cast<int>(cfg.get_int("teachers.max_steps", p.teacher.max_steps));
    p.teacher.lr = cfg.get_real("teachers.lr", p.teacher.lr);
    p.inv_iterations = static_cast<int>(cfg.get_int("inversion.iterations", p.inv_iterations));
    p.inv_lr = cfg.get_real("inversion.lr", p.inv_lr);
    p.alpha_r = cfg.get_real("inversion.alpha_r", p.alpha_r);
    p.gen_k = static_cast<int>(cfg.get_int("inversion.k", p.gen_k));
    p.gen_q = static_cast<int>(cfg.get_int("inversion.q", p.gen_q));
    p.probe_count = static_cast<int>(cfg.get_int("inversion.probe_count", p.probe_count));
    p.sparse = cfg.get_bool("pipeline.sparse", p.sparse);
    p.sparse_prune = cfg.get_real("pipeline.sparse_prune", p.sparse_prune);
    p.meta.outer_iters = static_cast<int>(cfg.get_int("meta.steps", p.meta.outer_iters));
    p.meta.p_interp = cfg.get_real("meta.p_interp", p.meta.p_interp);
    p.meta.meta_rank = static_cast<int>(cfg.get_int("meta.rank", p.meta.meta_rank));
    p.meta.n_way = static_cast<int>(cfg.get_int("meta.n_way", p.meta.n_way));
    p.meta.k_shot = static_cast<int>(cfg.get_int("meta.k", p.meta.k_shot));
    p.meta.q_query = static_cast<int>(cfg.get_int("meta.q", p.meta.q_query));
    p.meta.squared_distance = cfg.get_bool("meta.squared_distance", p.meta.squared_distance);
    p.meta.train_backbone = cfg.get_bool("meta.train_backbone", p.meta.train_backbone);
    p.meta.schedule.peak = cfg.get_real("meta.peak_lr", p.meta.schedule.peak);
    p.meta.schedule.warmup_start = cfg.get_real("meta.warmup_lr", p.meta.schedule.warmup_start);
    {
        const std::string layers = cfg.get_str("meta.trainable_layers", "");
        if (!layers.empty()) {
            size_t pos = 0;
            while (pos <= layers.size()) {
                size_t comma = layers.find(',', pos);
                p.meta.trainable_layers.push_back(std::stoi(layers.substr(
                    pos, comma == std::string::npos ? std::string::npos : comma - pos)));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
        }
    }
    p.eval.episodes = static_cast<int>(cfg.get_int("eval.episodes", p.eval.episodes));
    p.eval.n_way = static_cast<int>(cfg.get_int("eval.n", p.eval.n_way));
    p.eval.k_shot = static_cast<int>(cfg.get_int("eval.k", p.eval.k_shot));
    p.eval.q_query = static_cast<int>(cfg.get_int("eval.q", p.eval.q_query));
    p.seed = seed;
    return p;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"data-free meta-adapter distillation on toy vision transformers"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate a toy dataset directory");
    CommonArgs gen_args;
    std::string gen_out = "dataset";
    int gen_train = 12, gen_test = 6, gen_per_train = 32, gen_per_test = 24, gen_family = 0;
    int gen_image = 24;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--seed", gen_args.seed, "rng seed");
    gen->add_option("--config", gen_args.config_path, "config file");
    gen->add_option("--train-classes", gen_train);
    gen->add_option("--test-classes", gen_test);
    gen->add_option("--per-class-train", gen_per_train);
    gen->add_option("--per-class-test", gen_per_test);
    gen->add_option("--image-size", gen_image);
    gen->add_option("--texture-family", gen_family, "0 or 1; disjoint background families");
    gen->callback([&] {
        GeneratorSpec spec;
        spec.image_size = gen_image;
        spec.texture_family = gen_family;
        auto ds = generate_toy_dataset(spec, gen_train, gen_test, gen_per_train, gen_per_test,
                                       gen_args.seed);
        save_dataset_dir(gen_out, ds);
        std::cout << "wrote " << ds.images.size() << " images to " << gen_out << "\n";
    });

    // ---- pretune ----
    auto* pre = app.add_subcommand("pretune", "pretrain the backbone and tune teacher adapters");
    CommonArgs pre_args;
    std::string pre_dataset = "dataset", pre_out = "run";
    int pre_count = 20;
    pre->add_option("--dataset", pre_dataset, "dataset directory");
    pre->add_option("--out", pre_out, "run directory (backbone.lrcy, teachers/)");
    pre->add_option("--count", pre_count, "number of teachers");
    pre->add_option("--seed", pre_args.seed);
    pre->add_option("--config", pre_args.config_path);
    pre->callback([&] {
        auto cfgfile = load_config_or_empty(pre_args.config_path);
        auto p = pipeline_from_config(cfgfile, pre_args.seed);
        p.num_teachers = pre_count;
        auto ds = load_dataset_dir(pre_dataset);
        fs::create_directories(fs::path(pre_out) / "teachers");
        auto model = pretrain_backbone(p.model, ds, p.backbone, p.seed);
        save_model_artifact((fs::path(pre_out) / "backbone.lrcy").string(), model);
        auto rng = make_rng(p.seed, rng_tag::teacher + 500);
        std::vector<std::vector<int>> pairs;
        for (size_t i = 0; i < ds.train_class_ids.size(); ++i)
            for (size_t j = i + 1; j < ds.train_class_ids.size(); ++j)
                pairs.push_back({ds.train_class_ids[i], ds.train_class_ids[j]});
        std::shuffle(pairs.begin(), pairs.end(), rng);
        for (int t = 0; t < pre_count; ++t) {
            char id[32];
            std::snprintf(id, sizeof(id), "teacher_%02d", t);
            auto outcome =
                pretune_teacher(model, ds, pairs[t % pairs.size()], p.teacher,
                                mix_seed(p.seed, 1000 + t), id);
            save_adapter_artifact((fs::path(pre_out) / "teachers" / (std::string(id) + ".lrcy")).string(),
                                  outcome.adapter, outcome.head);
            std::cout << id << " train acc " << format_real(outcome.train_accuracy) << " in "
                      << outcome.steps_used << " steps\n";
        }
    });

    // ---- invert ----
    auto* inv = app.add_subcommand("invert", "synthesize surrogate data from a teacher adapter");
    CommonArgs inv_args;
    std::string inv_backbone = "run/backbone.lrcy", inv_teacher, inv_dataset = "dataset",
                inv_out = "task", inv_plan_text;
    int inv_iters = 200, inv_k = 1, inv_q = 3, inv_batch = 0;
    double inv_lr = 0.25, inv_alpha = 0.01;
    inv->add_option("--backbone", inv_backbone);
    inv->add_option("--teacher", inv_teacher, "teacher artifact (.lrcy)")->required();
    inv->add_option("--dataset", inv_dataset, "dataset directory for the statistics probe");
    inv->add_option("--out", inv_out, "output task directory");
    inv->add_option("--iters", inv_iters);
    inv->add_option("--lr", inv_lr);
    inv->add_option("--alpha", inv_alpha, "stat regularizer coefficient");
    inv->add_option("--batch", inv_batch, "batch size (default n * (k + q))");
    inv->add_option("--k", inv_k);
    inv->add_option("--q", inv_q);
    inv->add_option("--plan", inv_plan_text, "prune plan, e.g. \"1:0.75\" (layer:pruned-fraction)");
    inv->add_option("--seed", inv_args.seed);
    inv->add_option("--config", inv_args.config_path);
    inv->callback([&] {
        auto model = load_model_artifact(inv_backbone);
        auto [adapter, head] = load_adapter_artifact(inv_teacher);
        auto ds = load_dataset_dir(inv_dataset);
        std::vector<int> pool;
        for (int cid : ds.train_class_ids)
            for (int idx : ds.images_of_class(cid)) pool.push_back(idx);
        auto prng = make_rng(inv_args.seed, rng_tag::probe);
        std::shuffle(pool.begin(), pool.end(), prng);
        const int probe_count = std::min<int>(64, static_cast<int>(pool.size()));
        auto probe = TensorT<float>::zeros(
            {probe_count, model.cfg.channels, model.cfg.image_size, model.cfg.image_size});
        for (int i = 0; i < probe_count; ++i) {
            const auto& img = ds.images[pool[i]].data();
            std::copy(img.begin(), img.end(),
                      probe.data().begin() + static_cast<size_t>(i) * img.size());
        }
        auto reg = fit_stat_regularizer(probe, mix_seed(inv_args.seed, rng_tag::extractor),
                                        inv_alpha);
        InversionConfig icfg;
        icfg.iterations = inv_iters;
        icfg.lr = inv_lr;
        icfg.alpha_r = inv_alpha;
        icfg.batch_size = inv_batch > 0 ? inv_batch : head.num_classes() * (inv_k + inv_q);
        if (!inv_plan_text.empty()) icfg.plan = PrunePlan::parse_pruned(inv_plan_text);
        icfg.seed = inv_args.seed;
        auto res = invert(model, adapter, head, icfg, reg);
        auto task = build_task(res, head, fs::path(inv_teacher).stem().string(), inv_k, inv_q);
        save_task_dir(inv_out, task, model.cfg.image_size, model.cfg.channels);
        std::cout << "inversion CE " << format_real(res.ce_trace.front()) << " -> "
                  << format_real(res.ce_trace.back()) << ", task in " << inv_out << "\n";
    });

    // ---- meta-train ----
    auto* mt = app.add_subcommand("meta-train", "distill the meta adapter from teachers");
    CommonArgs mt_args;
    std::string mt_backbone = "run/backbone.lrcy", mt_teachers = "run/teachers",
                mt_tasks = "run/tasks", mt_out = "run/meta.lrcy", mt_log = "run/train_log.txt";
    int mt_steps = 300;
    double mt_pinterp = 0.3;
    bool mt_sparse = false;
    mt->add_option("--backbone", mt_backbone);
    mt->add_option("--teachers", mt_teachers, "directory of teacher artifacts");
    mt->add_option("--tasks", mt_tasks, "directory of generated task directories");
    mt->add_option("--out", mt_out);
    mt->add_option("--log", mt_log);
    mt->add_option("--steps", mt_steps);
    mt->add_option("--p-interp", mt_pinterp);
    mt->add_flag("--sparse", mt_sparse, "feed only mask-selected tokens to the student");
    mt->add_option("--seed", mt_args.seed);
    mt->add_option("--config", mt_args.config_path);
    mt->callback([&] {
        auto cfgfile = load_config_or_empty(mt_args.config_path);
        auto p = pipeline_from_config(cfgfile, mt_args.seed);
        auto model = load_model_artifact(mt_backbone);
        std::vector<Teacher> teachers;
        std::vector<fs::path> teacher_files;
        for (const auto& e : fs::directory_iterator(mt_teachers))
            if (e.path().extension() == ".lrcy") teacher_files.push_back(e.path());
        std::sort(teacher_files.begin(), teacher_files.end());
        std::vector<fs::path> task_dirs;
        for (const auto& e : fs::directory_iterator(mt_tasks))
            if (e.is_directory()) task_dirs.push_back(e.path());
        std::sort(task_dirs.begin(), task_dirs.end());
        if (teacher_files.size() != task_dirs.size())
            throw state_error("meta-train: " + std::to_string(teacher_files.size()) +
                              " teachers but " + std::to_string(task_dirs.size()) + " tasks");
        for (size_t i = 0; i < teacher_files.size(); ++i) {
            auto [adapter, head] = load_adapter_artifact(teacher_files[i].string());
            teachers.push_back({std::move(adapter), std::move(head),
                                load_task_dir(task_dirs[i].string()),
                                teacher_files[i].stem().string()});
        }
        MetaTrainConfig mcfg = p.meta;
        mcfg.outer_iters = mt_steps;
        mcfg.p_interp = mt_pinterp;
        mcfg.sparse_mode = mt_sparse;
        mcfg.seed = mix_seed(mt_args.seed, rng_tag::meta);
        auto res = meta_train(model, teachers, mcfg);
        save_meta_adapter_artifact(mt_out, res.meta.adapter);
        write_meta_log(mt_log, res.log);
        std::cout << "meta adapter in " << mt_out << ", final loss "
                  << format_real(res.log.back().loss) << "\n";
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "episodic evaluation against the baselines");
    CommonArgs ev_args;
    std::string ev_backbone = "run/backbone.lrcy", ev_dataset = "dataset", ev_meta,
                ev_teachers, ev_method = "all", ev_report, ev_plan_text;
    int ev_episodes = 100, ev_n = 2, ev_k = 1, ev_q = 15;
    ev->add_option("--backbone", ev_backbone);
    ev->add_option("--dataset", ev_dataset);
    ev->add_option("--meta", ev_meta, "meta adapter artifact");
    ev->add_option("--teachers", ev_teachers, "teacher directory (for loras_avg_nn)");
    ev->add_option("--method", ev_method,
                   "meta_lora | nn_baseline | loras_avg_nn | random_lora | all");
    ev->add_option("--episodes", ev_episodes);
    ev->add_option("--n", ev_n);
    ev->add_option("--k", ev_k);
    ev->add_option("--q", ev_q);
    ev->add_option("--plan", ev_plan_text, "evaluation-time prune plan");
    ev->add_option("--report", ev_report, "write the deterministic report here");
    ev->add_option("--seed", ev_args.seed);
    ev->add_option("--config", ev_args.config_path);
    ev->callback([&] {
        auto model = load_model_artifact(ev_backbone);
        auto ds = load_dataset_dir(ev_dataset);
        EvalOptions opts;
        opts.episodes = ev_episodes;
        opts.n_way = ev_n;
        opts.k_shot = ev_k;
        opts.q_query = ev_q;
        opts.seed = mix_seed(ev_args.seed, rng_tag::episodes);
        if (!ev_plan_text.empty()) opts.plan = PrunePlan::parse_pruned(ev_plan_text);
        LoRAAdapter meta, averaged;
        EvalArtifacts arts;
        arts.random_seed = mix_seed(ev_args.seed, rng_tag::random_adapter);
        if (!ev_meta.empty()) {
            meta = load_meta_adapter_artifact(ev_meta);
            arts.meta = &meta;
        }
        if (!ev_teachers.empty()) {
            std::vector<LoRAAdapter> adapters;
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(ev_teachers))
                if (e.path().extension() == ".lrcy") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) adapters.push_back(load_adapter_artifact(f.string()).first);
            averaged = average_adapters(adapters);
            arts.averaged = &averaged;
        }
        std::vector<MethodReport> reports;
        auto run_one = [&](EvalMethod m) { reports.push_back(evaluate(model, m, arts, ds, opts)); };
        if (ev_method == "all") {
            if (arts.meta) run_one(EvalMethod::meta_lora);
            run_one(EvalMethod::nn_baseline);
            if (arts.averaged) run_one(EvalMethod::loras_avg_nn);
            run_one(EvalMethod::random_lora);
        } else {
            run_one(parse_eval_method(ev_method));
        }
        std::cout << format_report_table(reports);
        if (!ev_report.empty()) save_report(ev_report, reports, opts, ev_args.seed);
    });

    // ---- flops ----
    auto* fl = app.add_subcommand("flops", "analytic complexity table, Tables 4/5 style");
    std::string fl_preset = "vitb", fl_plans, fl_ratios = "0.25,0.5,0.75";
    bool fl_measure = false;
    CommonArgs fl_args;
    fl->add_option("--preset", fl_preset, "vitb | desk");
    fl->add_option("--plan", fl_plans, "semicolon-separated prune plans, e.g. \"11:0.75;6:0.75\"");
    fl->add_option("--sparse-ratios", fl_ratios, "comma-separated sparse ratios");
    fl->add_flag("--measure", fl_measure, "measure forward throughput (desk preset only)");
    fl->add_option("--seed", fl_args.seed);
    fl->add_option("--config", fl_args.config_path);
    fl->callback([&] {
        ViTConfig cfg;
        if (fl_preset == "vitb") {
            cfg.image_size = 224;
            cfg.patch_size = 16;
            cfg.channels = 3;
            cfg.depth = 12;
            cfg.embed_dim = 768;
            cfg.num_heads = 12;
        } else if (fl_preset == "desk") {
            cfg = PipelineConfig::desk_defaults().model;
        } else {
            throw config_error("unknown preset '" + fl_preset + "'");
        }
        std::vector<std::pair<std::string, PrunePlan>> plans;
        if (!fl_plans.empty()) {
            size_t pos = 0;
            while (pos <= fl_plans.size()) {
                size_t semi = fl_plans.find(';', pos);
                std::string item = fl_plans.substr(
                    pos, semi == std::string::npos ? std::string::npos : semi - pos);
                if (!item.empty()) plans.push_back({"{" + item + "}", PrunePlan::parse_pruned(item)});
                if (semi == std::string::npos) break;
                pos = semi + 1;
            }
        }
        std::vector<double> ratios;
        {
            size_t pos = 0;
            while (pos <= fl_ratios.size() && !fl_ratios.empty()) {
                size_t comma = fl_ratios.find(',', pos);
                ratios.push_back(std::stod(fl_ratios.substr(
                    pos, comma == std::string::npos ? std::string::npos : comma - pos)));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
        }
        ViTModel model;
        const ViTModel* measure_model = nullptr;
        if (fl_measure && fl_preset == "desk") {
            model = ViTModel::create(cfg, fl_args.seed);
            measure_model = &model;
        }
        std::cout << format_flops_table(report_flops_table(cfg, plans, ratios, measure_model));
    });

    // ---- all ----
    auto* all = app.add_subcommand("all", "full pipeline: data, teachers, inversion, meta, eval");
    CommonArgs all_args;
    std::string all_out = "run";
    bool all_sparse = false, all_quiet = false;
    int all_teachers = -1, all_inv_iters = -1, all_meta_steps = -1, all_episodes = -1;
    double all_pinterp = -1.0;
    all->add_option("--out", all_out, "run directory");
    all->add_option("--seed", all_args.seed);
    all->add_option("--config", all_args.config_path);
    all->add_flag("--sparse", all_sparse, "sparse-token mode (75% masks)");
    all->add_flag("--quiet", all_quiet);
    all->add_option("--teachers", all_teachers, "override teacher count");
    all->add_option("--inv-iters", all_inv_iters, "override inversion iterations");
    all->add_option("--meta-steps", all_meta_steps, "override meta-training steps");
    all->add_option("--episodes", all_episodes, "override evaluation episodes");
    all->add_option("--p-interp", all_pinterp, "override interpolation probability");
    all->callback([&] {
        auto cfgfile = load_config_or_empty(all_args.config_path);
        auto p = pipeline_from_config(cfgfile, all_args.seed);
        p.sparse = all_sparse || p.sparse;
        if (all_teachers > 0) p.num_teachers = all_teachers;
        if (all_inv_iters > 0) p.inv_iterations = all_inv_iters;
        if (all_meta_steps > 0) p.meta.outer_iters = all_meta_steps;
        if (all_episodes > 0) p.eval.episodes = all_episodes;
        if (all_pinterp >= 0.0) p.meta.p_interp = all_pinterp;
        run_pipeline(p, all_out, all_quiet ? nullptr : &std::cout);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2; // usage error
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ml_error& e) {
        std::cerr << "error: class=" << e.error_class() << " msg=\"" << e.what() << "\"\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: class=internal msg=\"" << e.what() << "\"\n";
        return 1;
    }
}
