#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "metalora/pipeline.hpp"

using namespace metalora;
namespace fs = std::filesystem;

namespace {

GeneratorSpec small_spec() {
    GeneratorSpec spec;
    spec.image_size = 16;
    return spec;
}

ToyDataset small_dataset(uint64_t seed = 1) {
    return generate_toy_dataset(small_spec(), 6, 6, 12, 12, seed);
}

ViTConfig small_model_cfg() {
    ViTConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.channels = 3;
    cfg.depth = 2;
    cfg.embed_dim = 32;
    cfg.num_heads = 4;
    return cfg;
}

} // namespace

TEST_CASE("meta-train and meta-test label spaces are disjoint for every dataset") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        auto ds = generate_toy_dataset(small_spec(), 12, 6, 4, 4, seed);
        std::set<int> train(ds.train_class_ids.begin(), ds.train_class_ids.end());
        for (int c : ds.test_class_ids) CHECK(train.count(c) == 0);
        CHECK(ds.train_class_ids.size() == 12);
        CHECK(ds.test_class_ids.size() == 6);
        // every image label belongs to exactly one split
        for (int l : ds.labels) {
            const bool in_train = train.count(l) > 0;
            const bool in_test = ds.is_test_class(l);
            CHECK(in_train != in_test);
        }
    }
}

TEST_CASE("dataset roundtrip through the manifest+payload directory") {
    auto ds = small_dataset(3);
    auto dir = fs::temp_directory_path() / "metalora_ds_test";
    fs::remove_all(dir);
    save_dataset_dir(dir.string(), ds);
    auto loaded = load_dataset_dir(dir.string());
    CHECK(loaded.labels == ds.labels);
    CHECK(loaded.class_names == ds.class_names);
    CHECK(loaded.train_class_ids == ds.train_class_ids);
    CHECK(loaded.test_class_ids == ds.test_class_ids);
    for (size_t i = 0; i < ds.images.size(); ++i)
        CHECK(loaded.images[i].data() == ds.images[i].data());
    fs::remove_all(dir);
}

TEST_CASE("sample_episode: determinism, forced selection, disjoint splits") {
    auto ds = small_dataset(4);

    auto e1 = sample_episode(ds, 2, 1, 3, 42);
    auto e2 = sample_episode(ds, 2, 1, 3, 42);
    CHECK(e1.class_ids == e2.class_ids);
    for (size_t i = 0; i < e1.support_images.size(); ++i)
        CHECK(e1.support_images[i].data() == e2.support_images[i].data());

    auto e3 = sample_episode(ds, 2, 1, 3, 43);
    CHECK((e3.class_ids != e1.class_ids ||
           e3.support_images[0].data() != e1.support_images[0].data()));

    // N equal to all test classes forces every class into the episode
    auto full = sample_episode(ds, 6, 1, 1, 7);
    std::set<int> seen(full.class_ids.begin(), full.class_ids.end());
    CHECK(seen.size() == 6);

    CHECK_THROWS_AS(sample_episode(ds, 7, 1, 1, 0), count_error);
    CHECK_THROWS_AS(sample_episode(ds, 2, 6, 7, 0), count_error);
}

TEST_CASE("episode class selection is uniform within 3 sigma over 600 seeds") {
    auto ds = small_dataset(5);
    std::vector<int> counts(12 + 6, 0);
    const int episodes = 600, n = 2;
    for (int e = 0; e < episodes; ++e) {
        auto ep = sample_episode(ds, n, 1, 1, 10000 + e);
        for (int cid : ep.class_ids) ++counts[cid];
    }
    const double p = static_cast<double>(n) / 6.0;
    const double mean = episodes * p;
    const double sigma = std::sqrt(episodes * p * (1 - p));
    for (int cid : ds.test_class_ids) {
        CHECK(counts[cid] > mean - 3 * sigma);
        CHECK(counts[cid] < mean + 3 * sigma);
    }
}

TEST_CASE("evaluate with an oracle embedding scores exactly 100%") {
    auto ds = small_dataset(6);
    EvalOptions opts;
    opts.episodes = 50;
    opts.n_way = 2;
    opts.q_query = 5;
    opts.seed = 9;
    auto oracle = [](const TensorT<float>&, int class_id) {
        auto e = TensorT<float>::zeros({18});
        e.data()[class_id] = 1.f;
        return e;
    };
    auto rep = evaluate_with_hook(oracle, ds, opts, "oracle");
    CHECK(rep.accuracy_mean == 100.0);
    CHECK(rep.ci95 == 0.0);
}

TEST_CASE("evaluate with a constant embedding stays at chance over 600 episodes") {
    auto ds = small_dataset(7);
    EvalOptions opts;
    opts.episodes = 600;
    opts.n_way = 2;
    opts.q_query = 5;
    opts.seed = 11;
    auto constant = [](const TensorT<float>&, int) { return TensorT<float>::full({18}, 0.25f); };
    auto rep = evaluate_with_hook(constant, ds, opts, "constant");
    CHECK(rep.accuracy_mean > 50.0 - 4.0);
    CHECK(rep.accuracy_mean < 50.0 + 4.0);
}

TEST_CASE("evaluate never updates weights and 1-shot matches brute-force nearest neighbor") {
    auto ds = small_dataset(8);
    auto cfg = small_model_cfg();
    auto model = ViTModel::create(cfg, 12);
    auto meta = new_adapter<float>(cfg, 4, 13);
    std::mt19937 rng(14);
    std::normal_distribution<float> d(0.f, 0.05f);
    for (auto& e : meta.entries)
        for (auto& v : e.b.data()) v = d(rng);

    EvalArtifacts arts;
    arts.meta = &meta;
    EvalOptions opts;
    opts.episodes = 30;
    opts.n_way = 2;
    opts.k_shot = 1;
    opts.q_query = 4;
    opts.seed = 15;

    const uint64_t mh = model.weight_hash();
    const uint64_t ah = meta.weight_hash();
    auto rep = evaluate(model, EvalMethod::meta_lora, arts, ds, opts);
    CHECK(model.weight_hash() == mh);
    CHECK(meta.weight_hash() == ah);

    // brute force per episode
    NoGradGuard ng;
    for (int e = 0; e < opts.episodes; ++e) {
        auto ep = sample_episode(ds, opts.n_way, 1, opts.q_query,
                                 mix_seed(opts.seed, static_cast<uint64_t>(e)));
        std::vector<TensorT<float>> smb;
        for (const auto& img : ep.support_images)
            smb.push_back(model.forward(img, &meta).cls_embedding);
        int correct = 0;
        for (size_t qi = 0; qi < ep.query_images.size(); ++qi) {
            auto qe = model.forward(ep.query_images[qi], &meta).cls_embedding;
            int nn = 0;
            double best = 1e300;
            for (size_t si = 0; si < smb.size(); ++si) {
                double d2 = 0;
                for (int j = 0; j < cfg.embed_dim; ++j) {
                    double dd = qe.data()[j] - smb[si].data()[j];
                    d2 += dd * dd;
                }
                if (d2 < best) best = d2, nn = ep.support_labels[si];
            }
            correct += nn == ep.query_labels[qi];
        }
        const double acc = 100.0 * correct / ep.query_images.size();
        CHECK(rep.per_episode_accuracy[e] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("evaluate: missing artifacts raise state errors") {
    auto ds = small_dataset(9);
    auto model = ViTModel::create(small_model_cfg(), 20);
    EvalOptions opts;
    opts.episodes = 2;
    opts.n_way = 2;
    CHECK_THROWS_AS(evaluate(model, EvalMethod::meta_lora, {}, ds, opts), state_error);
    CHECK_THROWS_AS(evaluate(model, EvalMethod::loras_avg_nn, {}, ds, opts), state_error);
}

TEST_CASE("flops and throughput move the right way as pruning increases") {
    auto cfg = small_model_cfg();
    auto model = ViTModel::create(cfg, 30);
    PrunePlan quarter;
    quarter.keep[0] = 0.25;
    auto rows = report_flops_table(cfg, {{"keep25_at0", quarter}}, {0.25, 0.5, 0.75}, &model);
    REQUIRE(rows.size() == 5);
    CHECK(rows[0].delta_pct == 0.0);
    CHECK(rows[1].forward_flops < rows[0].forward_flops);
    // sparse rows shrink monotonically
    CHECK(rows[2].forward_flops > rows[3].forward_flops);
    CHECK(rows[3].forward_flops > rows[4].forward_flops);
    // heavier pruning must not run slower: compare dense vs 75% sparse
    CHECK(rows[4].throughput > rows[0].throughput);
}

TEST_CASE("flops table reproduces the published sparse-ratio deltas on the ViT-B shape") {
    ViTConfig vitb;
    vitb.image_size = 224;
    vitb.patch_size = 16;
    vitb.channels = 3;
    vitb.depth = 12;
    vitb.embed_dim = 768;
    vitb.num_heads = 12;
    auto rows = report_flops_table(vitb, {}, {0.25, 0.5, 0.75}, nullptr);
    REQUIRE(rows.size() == 4);
    CHECK(rows[1].delta_pct == doctest::Approx(-25.0).epsilon(0.08));
    CHECK(rows[2].delta_pct == doctest::Approx(-49.0).epsilon(0.05));
    CHECK(rows[3].delta_pct == doctest::Approx(-74.0).epsilon(0.03));

    // deeper-layer pruning saves less than middle-layer pruning
    PrunePlan last, middle;
    last.keep[11] = 0.25;
    middle.keep[6] = 0.25;
    auto prows = report_flops_table(vitb, {{"last", last}, {"middle", middle}}, {}, nullptr);
    CHECK(prows[1].forward_flops > prows[2].forward_flops);
    CHECK(prows[1].delta_pct < 0.0);
    CHECK(prows[1].delta_pct > -10.0); // last-layer row is a small saving, Table-5 style
}

TEST_CASE("pretune: fresh adapter sits at chance, tuned teacher clears 95%") {
    GeneratorSpec spec = small_spec();
    auto ds = generate_toy_dataset(spec, 4, 2, 16, 8, 21);
    auto cfg = small_model_cfg();
    BackboneTrainConfig bcfg;
    bcfg.steps = 40;
    bcfg.batch = 8;
    auto model = pretrain_backbone(cfg, ds, bcfg, 22);

    std::vector<int> subset = {ds.train_class_ids[0], ds.train_class_ids[1]};
    auto fresh_adapter = new_adapter<float>(cfg, 4, 23);
    auto fresh_head = new_head<float>(cfg.embed_dim, {"a", "b"});
    const double fresh_acc = teacher_train_accuracy(model, fresh_adapter, fresh_head, ds, subset);
    CHECK(fresh_acc > 0.5 - 0.101 - 1e-9);
    CHECK(fresh_acc < 0.5 + 0.101 + 1e-9);

    TeacherTrainConfig tcfg;
    tcfg.max_steps = 300;
    auto outcome = pretune_teacher(model, ds, subset, tcfg, 25, "t0");
    CHECK(outcome.train_accuracy >= 0.95);

    // disjoint subsets carry different head label lists
    std::vector<int> other = {ds.train_class_ids[2], ds.train_class_ids[3]};
    auto second = pretune_teacher(model, ds, other, tcfg, 26, "t1");
    CHECK(outcome.head.labels != second.head.labels);

    // meta-test classes are off limits
    CHECK_THROWS_AS(
        pretune_teacher(model, ds, {ds.test_class_ids[0], ds.train_class_ids[0]}, tcfg, 27, "tx"),
        config_error);
}

TEST_CASE("cross-domain drill: disjoint generator families still evaluate structurally") {
    GeneratorSpec fam0 = small_spec();
    GeneratorSpec fam1 = small_spec();
    fam1.texture_family = 1;
    auto source = generate_toy_dataset(fam0, 4, 2, 8, 8, 31);
    auto target = generate_toy_dataset(fam1, 4, 2, 8, 8, 32);
    CHECK(source.spec.texture_family != target.spec.texture_family);

    auto model = ViTModel::create(small_model_cfg(), 33);
    EvalOptions opts;
    opts.episodes = 10;
    opts.n_way = 2;
    opts.q_query = 3;
    auto rep = evaluate(model, EvalMethod::nn_baseline, {}, target, opts);
    CHECK(rep.episodes == 10);
    CHECK(rep.accuracy_mean >= 0.0);
    CHECK(rep.accuracy_mean <= 100.0);
}

TEST_CASE("report persistence is deterministic and excludes timing") {
    auto dir = fs::temp_directory_path() / "metalora_report_test";
    fs::create_directories(dir);
    MethodReport r;
    r.method = "nn_baseline";
    r.accuracy_mean = 61.25;
    r.ci95 = 2.5;
    r.throughput = 123.456; // volatile, must not reach the file
    r.total_flops = 777;
    r.episodes = 100;
    EvalOptions opts;
    const auto p1 = dir / "r1.txt";
    const auto p2 = dir / "r2.txt";
    save_report(p1.string(), {r}, opts, 5);
    r.throughput = 999.0;
    save_report(p2.string(), {r}, opts, 5);
    std::ifstream f1(p1), f2(p2);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
    CHECK(s1.str().find("throughput") == std::string::npos);
    fs::remove_all(dir);
}
