#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "metalora/inversion.hpp"
#include "support/gradcheck.hpp"

using namespace metalora;
using Tensor64 = TensorT<double>;
using mltest::gradcheck;
namespace fs = std::filesystem;

namespace {

ViTConfig inv_cfg() {
    ViTConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.channels = 3;
    cfg.depth = 2;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    return cfg;
}

// Single-channel probe of dyadic values so means and stds are exact.
TensorT<float> dyadic_probe(int count, int hw, uint32_t seed) {
    std::mt19937 rng(seed);
    std::uniform_int_distribution<int> bit(0, 1);
    auto probe = TensorT<float>::zeros({count, 1, hw, hw});
    for (auto& v : probe.data()) v = static_cast<float>(bit(rng));
    return probe;
}

StatExtractor identity_extractor() {
    StatExtractor ex;
    ex.in_channels = 1;
    StatExtractor::Layer l;
    l.w = TensorT<float>::from_data({1, 1, 1, 1}, {1.f});
    l.b = TensorT<float>::zeros({1});
    l.stride = 1;
    l.activation = false;
    ex.layers.push_back(std::move(l));
    return ex;
}

} // namespace

TEST_CASE("fit: identical probe images clamp the std targets") {
    auto probe = TensorT<float>::full({64, 1, 4, 4}, 0.7f);
    auto reg = fit_stat_regularizer_with(probe, identity_extractor());
    REQUIRE(reg.std_targets.size() == 1);
    CHECK(reg.std_targets[0].data()[0] == 1e-3f);
    CHECK(reg.clamped_channels == 1);
}

TEST_CASE("fit requires at least 64 probe images") {
    auto probe = TensorT<float>::zeros({63, 3, 8, 8});
    CHECK_THROWS_AS(fit_stat_regularizer(probe, 1), count_error);
}

TEST_CASE("fit is deterministic given probe set and seed") {
    std::mt19937 rng(5);
    auto probe = TensorT<float>::randn({64, 3, 16, 16}, rng);
    auto r1 = fit_stat_regularizer(probe, 7);
    auto r2 = fit_stat_regularizer(probe, 7);
    for (size_t l = 0; l < r1.mean_targets.size(); ++l) {
        CHECK(r1.mean_targets[l].data() == r2.mean_targets[l].data());
        CHECK(r1.std_targets[l].data() == r2.std_targets[l].data());
    }
}

TEST_CASE("identity extractor: mean target equals the direct pixel mean") {
    auto probe = dyadic_probe(64, 4, 9);
    auto reg = fit_stat_regularizer_with(probe, identity_extractor());
    double acc = 0;
    for (float v : probe.data()) acc += v;
    const float direct = static_cast<float>(acc / probe.numel());
    CHECK(reg.mean_targets[0].data()[0] == direct);
}

TEST_CASE("stat penalty: self-match is zero, constant shift costs exactly |c|") {
    auto probe = dyadic_probe(64, 4, 10);
    auto reg = fit_stat_regularizer_with(probe, identity_extractor());

    auto self_pen = stat_penalty(probe, reg);
    CHECK(self_pen.item() == 0.f);

    auto shifted = probe.detach();
    for (auto& v : shifted.data()) v += 0.5f;
    auto pen = stat_penalty(shifted, reg);
    CHECK(pen.item() == 0.5f);

    // negative shift: still the absolute offset
    auto shifted_neg = probe.detach();
    for (auto& v : shifted_neg.data()) v -= 0.5f;
    CHECK(stat_penalty(shifted_neg, reg).item() == 0.5f);
}

TEST_CASE("stat penalty is nonnegative on random batches") {
    std::mt19937 rng(11);
    auto probe = TensorT<float>::randn({64, 3, 16, 16}, rng);
    auto reg = fit_stat_regularizer(probe, 3);
    for (int t = 0; t < 10; ++t) {
        auto x = TensorT<float>::randn({4, 3, 16, 16}, rng, 0.f, 2.f);
        CHECK(stat_penalty(x, reg).item() >= 0.f);
    }
}

TEST_CASE("stat penalty gradient w.r.t. the batch, 20 seeds") {
    for (uint32_t seed = 0; seed < 20; ++seed) {
        std::mt19937 rng(100 + seed);
        auto probe = Tensor64::randn({64, 2, 8, 8}, rng);
        auto ex = StatExtractorT<double>::create(2, {{4, 3, 2, true}, {4, 3, 1, true}}, seed);
        auto reg = fit_stat_regularizer_with(probe, ex);
        auto x = Tensor64::randn({2, 2, 8, 8}, rng, 0.0, 1.0, true);
        CHECK(gradcheck([&] { return stat_penalty(x, reg); }, {x}, 1e-6) < 1e-3);
    }
}

TEST_CASE("invert: finite trace, frozen weights, masks match plan arithmetic, deterministic") {
    auto cfg = inv_cfg();
    auto model = ViTModel::create(cfg, 20);
    auto adapter = new_adapter<float>(cfg, 2, 21);
    auto head = new_head<float>(cfg.embed_dim, {"a", "b"});
    {
        std::mt19937 hrng(22);
        std::normal_distribution<float> hd(0.f, 0.3f);
        for (auto& v : head.weight.data()) v = hd(hrng);
    }
    std::mt19937 rng(23);
    auto probe = TensorT<float>::randn({64, 3, 16, 16}, rng);
    auto reg = fit_stat_regularizer(probe, 24);

    InversionConfig icfg;
    icfg.iterations = 30;
    icfg.lr = 0.25;
    icfg.batch_size = 4;
    icfg.alpha_r = 0.01;
    icfg.seed = 25;
    icfg.plan.keep[1] = 0.25; // final layer: keep ceil(0.25*16)=4 of 16 tokens

    const uint64_t model_hash = model.weight_hash();
    const uint64_t adapter_hash = adapter.weight_hash();
    const uint64_t head_hash = head.weight_hash();

    auto res = invert(model, adapter, head, icfg, reg);

    CHECK(model.weight_hash() == model_hash);
    CHECK(adapter.weight_hash() == adapter_hash);
    CHECK(head.weight_hash() == head_hash);

    CHECK(res.loss_trace.size() == 30);
    for (double v : res.loss_trace) CHECK(std::isfinite(v));
    CHECK(res.loss_trace.back() < res.loss_trace.front());
    CHECK(res.labels == std::vector<int>{0, 1, 0, 1});

    REQUIRE(res.masks.size() == 4);
    for (const auto& m : res.masks) {
        CHECK(m.ones() == 4);
        CHECK(m.sparse_ratio() == doctest::Approx(0.75));
    }

    // changed images, deterministic reruns
    auto res2 = invert(model, adapter, head, icfg, reg);
    CHECK(res.images.data() == res2.images.data());
    CHECK(res.loss_trace == res2.loss_trace);
    for (size_t i = 0; i < res.masks.size(); ++i) CHECK(res.masks[i].bits == res2.masks[i].bits);
    CHECK(res.images.data() != res.initial_images.data());
}

TEST_CASE("invert: zero-weight head with alpha 0 leaves the batch unchanged") {
    auto cfg = inv_cfg();
    auto model = ViTModel::create(cfg, 30);
    auto adapter = new_adapter<float>(cfg, 2, 31);
    auto head = new_head<float>(cfg.embed_dim, {"a", "b"});
    std::fill(head.weight.data().begin(), head.weight.data().end(), 0.f);
    std::fill(head.bias.data().begin(), head.bias.data().end(), 0.f);
    StatRegularizer reg; // unused at alpha 0
    InversionConfig icfg;
    icfg.iterations = 5;
    icfg.batch_size = 2;
    icfg.alpha_r = 0.0;
    icfg.seed = 33;
    auto res = invert(model, adapter, head, icfg, reg);
    CHECK(res.images.data() == res.initial_images.data());
    for (double v : res.loss_trace)
        CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("invert: pruned iteration flops strictly below unpruned, matching the estimate") {
    auto cfg = inv_cfg();
    auto model = ViTModel::create(cfg, 40);
    auto adapter = new_adapter<float>(cfg, 2, 41);
    auto head = new_head<float>(cfg.embed_dim, {"a", "b"});
    {
        std::mt19937 hrng(42);
        std::normal_distribution<float> hd(0.f, 0.3f);
        for (auto& v : head.weight.data()) v = hd(hrng);
    }
    StatRegularizer reg;
    InversionConfig dense;
    dense.iterations = 1;
    dense.batch_size = 2;
    dense.alpha_r = 0.0;
    InversionConfig pruned = dense;
    pruned.plan.keep[1] = 0.25; // prune at mid depth: layer 1 of 2

    auto rd = invert(model, adapter, head, dense, reg);
    auto rp = invert(model, adapter, head, pruned, reg);
    CHECK(rp.flops_per_iteration < rd.flops_per_iteration);

    const uint64_t expect_dense =
        iteration_flops(2 * flops_estimate_split(cfg, plan_seq_lengths(cfg, dense.plan, 16)));
    const uint64_t expect_pruned =
        iteration_flops(2 * flops_estimate_split(cfg, plan_seq_lengths(cfg, pruned.plan, 16)));
    CHECK(rd.flops_per_iteration == expect_dense);
    CHECK(rp.flops_per_iteration == expect_pruned);
}

TEST_CASE("invert config validation") {
    InversionConfig icfg;
    icfg.batch_size = 1;
    CHECK_THROWS_AS(icfg.validate(2), config_error);
    icfg.batch_size = 4;
    icfg.iterations = 0;
    CHECK_THROWS_AS(icfg.validate(2), config_error);
}

TEST_CASE("build_task: counting and deterministic split") {
    // N=5, K=1, Q=15 needs 5 * 16 = 80 images
    const int n = 5, k = 1, q = 15;
    std::vector<TensorT<float>> images;
    std::vector<TokenMask> masks;
    std::vector<int> labels;
    std::vector<ClassRef> classes;
    for (int c = 0; c < n; ++c) classes.push_back({"src", c, "c" + std::to_string(c)});
    for (int i = 0; i < 80; ++i) {
        images.push_back(TensorT<float>::zeros({1, 4, 4}));
        masks.push_back(TokenMask::all_ones(2));
        labels.push_back(i % n);
    }
    auto task = build_task(images, masks, labels, classes, "src", n, k, q);
    CHECK(task.support_idx.size() == static_cast<size_t>(n * k));
    CHECK(task.query_idx.size() == static_cast<size_t>(n * q));

    // one image short
    images.pop_back();
    masks.pop_back();
    labels.pop_back();
    CHECK_THROWS_AS(build_task(images, masks, labels, classes, "src", n, k, q), count_error);
}

TEST_CASE("build_task: N=2 K=1 Q=1 from four round-robin images") {
    std::vector<TensorT<float>> images;
    std::vector<TokenMask> masks;
    std::vector<int> labels = {0, 1, 0, 1};
    std::vector<ClassRef> classes = {{"src", 0, "a"}, {"src", 1, "b"}};
    for (int i = 0; i < 4; ++i) {
        images.push_back(TensorT<float>::full({1, 2, 2}, static_cast<float>(i)));
        masks.push_back(TokenMask::all_ones(1));
    }
    auto task = build_task(images, masks, labels, classes, "src", 2, 1, 1);
    // per class, the first generated image is support, the next is query
    CHECK(task.support_idx == std::vector<int>{0, 1});
    CHECK(task.query_idx == std::vector<int>{2, 3});
}

TEST_CASE("build_task: support and query stay disjoint across 100 random configurations") {
    std::mt19937 rng(55);
    std::uniform_int_distribution<int> nd(2, 5), kd(1, 3), qd(1, 4), extra(0, 3);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = nd(rng), k = kd(rng), q = qd(rng);
        const int per_class = k + q + extra(rng);
        std::vector<TensorT<float>> images;
        std::vector<TokenMask> masks;
        std::vector<int> labels;
        std::vector<ClassRef> classes;
        for (int c = 0; c < n; ++c) classes.push_back({"src", c, "c"});
        for (int i = 0; i < n * per_class; ++i) {
            images.push_back(TensorT<float>::zeros({1, 2, 2}));
            masks.push_back(TokenMask::all_ones(1));
            labels.push_back(i % n);
        }
        auto task = build_task(images, masks, labels, classes, "src", n, k, q);
        for (int s : task.support_idx)
            CHECK(std::find(task.query_idx.begin(), task.query_idx.end(), s) ==
                  task.query_idx.end());
        // labels cover exactly n classes in both splits
        std::vector<bool> seen(n, false);
        for (int s : task.support_idx) seen[labels[s]] = true;
        for (int c = 0; c < n; ++c) CHECK(seen[c]);
    }
}

TEST_CASE("apply_mask: identity, zero, checkerboard") {
    auto image = TensorT<float>::full({2, 4, 4}, 1.5f);
    auto all = TokenMask::all_ones(2);
    auto out = apply_mask(image, all, 2);
    CHECK(out.data() == image.data());

    auto none = all.inverted();
    auto zero = apply_mask(image, none, 2);
    for (float v : zero.data()) CHECK(v == 0.f);

    TokenMask checker;
    checker.grid = 2;
    checker.bits = {1, 0, 0, 1};
    auto half = apply_mask(image, checker, 2);
    int nonzero = 0;
    for (float v : half.data()) nonzero += v != 0.f;
    CHECK(nonzero == static_cast<int>(image.numel()) / 2);

    TokenMask wrong;
    wrong.grid = 3;
    wrong.bits.assign(9, 1);
    CHECK_THROWS_AS(apply_mask(image, wrong, 2), dimension_error);
}

TEST_CASE("task directory roundtrip") {
    auto dir = fs::temp_directory_path() / "metalora_task_test";
    fs::remove_all(dir);
    std::mt19937 rng(66);
    std::vector<TensorT<float>> images;
    std::vector<TokenMask> masks;
    std::vector<int> labels = {0, 1, 0, 1, 0, 1};
    std::vector<ClassRef> classes = {{"teacher_03", 0, "red_square"}, {"teacher_03", 1, "blue_ring"}};
    for (int i = 0; i < 6; ++i) {
        images.push_back(TensorT<float>::randn({3, 8, 8}, rng));
        masks.push_back(TokenMask::from_positions(2, {0, 3}));
    }
    auto task = build_task(images, masks, labels, classes, "teacher_03", 2, 1, 2);
    save_task_dir(dir.string(), task, 8, 3);
    auto loaded = load_task_dir(dir.string());
    CHECK(loaded.n_way == 2);
    CHECK(loaded.k_shot == 1);
    CHECK(loaded.q_query == 2);
    CHECK(loaded.labels == task.labels);
    CHECK(loaded.support_idx == task.support_idx);
    CHECK(loaded.query_idx == task.query_idx);
    CHECK(loaded.classes[0].name == "red_square");
    CHECK(loaded.source_ids == task.source_ids);
    for (size_t i = 0; i < task.images.size(); ++i) {
        CHECK(loaded.images[i].data() == task.images[i].data());
        CHECK(loaded.masks[i].bits == task.masks[i].bits);
    }
    fs::remove_all(dir);
}
