#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "metalora/artifact.hpp"

using namespace metalora;
namespace fs = std::filesystem;

namespace {

ViTConfig small_cfg() {
    ViTConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.channels = 3;
    cfg.depth = 2;
    cfg.embed_dim = 64;
    cfg.num_heads = 4;
    return cfg;
}

fs::path temp_dir() {
    auto dir = fs::temp_directory_path() / "metalora_store_test";
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& data) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
}

LoRAAdapter random_adapter(const ViTConfig& cfg, int rank, uint64_t seed) {
    auto adapter = new_adapter<float>(cfg, rank, seed);
    auto rng = make_rng(seed, 42);
    std::normal_distribution<float> d(0.f, 0.3f);
    for (auto& e : adapter.entries)
        for (auto& v : e.b.data()) v = d(rng);
    return adapter;
}

} // namespace

TEST_CASE("fresh adapter is a no-op and deterministic per seed") {
    auto cfg = small_cfg();
    auto a1 = new_adapter<float>(cfg, 4, 123);
    auto a2 = new_adapter<float>(cfg, 4, 123);
    REQUIRE(a1.entries.size() == a2.entries.size());
    for (size_t i = 0; i < a1.entries.size(); ++i) {
        CHECK(a1.entries[i].a.data() == a2.entries[i].a.data());
        CHECK(a1.entries[i].b.data() == a2.entries[i].b.data());
        for (float v : a1.entries[i].b.data()) CHECK(v == 0.f);
    }
    auto a3 = new_adapter<float>(cfg, 4, 124);
    CHECK(a1.entries[0].a.data() != a3.entries[0].a.data());
}

TEST_CASE("adapter parameter count matches the rank-4 ViT-B arithmetic") {
    ViTConfig vitb;
    vitb.image_size = 224;
    vitb.patch_size = 16;
    vitb.channels = 3;
    vitb.depth = 12;
    vitb.embed_dim = 768;
    vitb.num_heads = 12;
    auto adapter = new_adapter<float>(vitb, 4, 1);
    CHECK(adapter.param_count() == 12 * 2 * (768 * 4 + 4 * 768));
    CHECK(adapter.param_count() == 147456);
}

TEST_CASE("rank beyond min(d,k) is rejected") {
    auto cfg = small_cfg();
    CHECK_THROWS_AS(new_adapter<float>(cfg, 65, 1), config_error);
    CHECK_THROWS_AS(new_adapter<float>(cfg, 0, 1), config_error);
}

TEST_CASE("average_adapters: idempotence, symmetry, elementwise oracle, permutation invariance") {
    auto cfg = small_cfg();
    auto a = random_adapter(cfg, 4, 10);

    auto avg_same = average_adapters<float>({a, a, a});
    for (size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(avg_same.entries[i].a.data() == a.entries[i].a.data());
        CHECK(avg_same.entries[i].b.data() == a.entries[i].b.data());
    }

    auto neg = a.clone(false);
    for (auto& e : neg.entries) {
        for (auto& v : e.a.data()) v = -v;
        for (auto& v : e.b.data()) v = -v;
    }
    auto zero = average_adapters<float>({a, neg});
    for (const auto& e : zero.entries) {
        for (float v : e.a.data()) CHECK(v == 0.f);
        for (float v : e.b.data()) CHECK(v == 0.f);
    }

    auto b = random_adapter(cfg, 4, 11);
    auto c = random_adapter(cfg, 4, 12);
    auto avg = average_adapters<float>({a, b, c});
    for (size_t i = 0; i < a.entries.size(); ++i)
        for (size_t j = 0; j < avg.entries[i].a.data().size(); ++j) {
            float manual = static_cast<float>((static_cast<double>(a.entries[i].a.data()[j]) +
                                               b.entries[i].a.data()[j] +
                                               c.entries[i].a.data()[j]) / 3.0);
            CHECK(std::abs(avg.entries[i].a.data()[j] - manual) == 0.f);
        }

    auto perm = average_adapters<float>({c, a, b});
    for (size_t i = 0; i < avg.entries.size(); ++i) {
        CHECK(avg.entries[i].a.data() == perm.entries[i].a.data());
        CHECK(avg.entries[i].b.data() == perm.entries[i].b.data());
    }

    auto r8 = random_adapter(cfg, 8, 13);
    CHECK_THROWS_AS(average_adapters<float>({a, r8}), config_error);
}

TEST_CASE("artifact save/load roundtrip is byte-identical") {
    auto dir = temp_dir();
    auto cfg = small_cfg();
    auto adapter = random_adapter(cfg, 4, 20);
    adapter.task_id = "teacher_00";
    adapter.class_names = {"red_square", "blue_ring"};
    auto head = new_head<float>(cfg.embed_dim, {"red_square", "blue_ring"});
    {
        std::mt19937 hrng(21);
        std::normal_distribution<float> hd(0.f, 0.3f);
        for (auto& v : head.weight.data()) v = hd(hrng);
        for (auto& v : head.bias.data()) v = hd(hrng);
    }

    const auto p1 = dir / "roundtrip1.lrcy";
    const auto p2 = dir / "roundtrip2.lrcy";
    save_adapter_artifact(p1.string(), adapter, head);
    auto [loaded, loaded_head] = load_adapter_artifact(p1.string());

    CHECK(loaded.rank == 4);
    CHECK(loaded.task_id == "teacher_00");
    CHECK(loaded.class_names == adapter.class_names);
    REQUIRE(loaded.entries.size() == adapter.entries.size());
    for (size_t i = 0; i < adapter.entries.size(); ++i) {
        CHECK(loaded.entries[i].a.data() == adapter.entries[i].a.data());
        CHECK(loaded.entries[i].b.data() == adapter.entries[i].b.data());
    }
    CHECK(loaded_head.weight.data() == head.weight.data());
    CHECK(loaded_head.bias.data() == head.bias.data());
    CHECK(loaded_head.labels == head.labels);

    save_adapter_artifact(p2.string(), loaded, loaded_head);
    CHECK(read_file(p1) == read_file(p2));
}

TEST_CASE("corruption and malformed files map to distinct error codes") {
    auto dir = temp_dir();
    auto cfg = small_cfg();
    auto adapter = random_adapter(cfg, 4, 30);
    auto head = new_head<float>(cfg.embed_dim, {"a", "b"});
    {
        std::mt19937 hrng(31);
        std::normal_distribution<float> hd(0.f, 0.3f);
        for (auto& v : head.weight.data()) v = hd(hrng);
    }
    const auto path = dir / "corrupt.lrcy";
    save_adapter_artifact(path.string(), adapter, head);
    const std::string good = read_file(path);

    SUBCASE("payload byte flip fails the checksum") {
        std::string bad = good;
        bad[bad.size() - 5] ^= 0x40; // inside the payload, before the trailer
        write_file(path, bad);
        try {
            load_artifact(path.string());
            FAIL("expected checksum failure");
        } catch (const io_error& e) {
            CHECK(e.code == io_code::bad_checksum);
        }
    }

    SUBCASE("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        write_file(path, bad);
        try {
            load_artifact(path.string());
            FAIL("expected magic failure");
        } catch (const io_error& e) {
            CHECK(e.code == io_code::bad_magic);
        }
    }

    SUBCASE("unsupported version") {
        std::string bad = good;
        bad[4] = 9;
        write_file(path, bad);
        try {
            load_artifact(path.string());
            FAIL("expected version failure");
        } catch (const io_error& e) {
            CHECK(e.code == io_code::bad_version);
        }
    }

    SUBCASE("truncated payload") {
        write_file(path, good.substr(0, good.size() - 3));
        try {
            load_artifact(path.string());
            FAIL("expected truncation failure");
        } catch (const io_error& e) {
            CHECK(e.code == io_code::truncated);
        }
    }

    SUBCASE("missing file") {
        try {
            load_artifact((dir / "nope.lrcy").string());
            FAIL("expected not_found");
        } catch (const io_error& e) {
            CHECK(e.code == io_code::not_found);
        }
    }
}

TEST_CASE("mixed-rank recycling: rank-8 artifact attaches beside a rank-4 meta adapter") {
    auto dir = temp_dir();
    auto cfg = small_cfg();
    auto teacher = random_adapter(cfg, 8, 40);
    auto head = new_head<float>(cfg.embed_dim, {"a", "b"});
    const auto path = dir / "rank8.lrcy";
    save_adapter_artifact(path.string(), teacher, head);
    auto [loaded, _] = load_adapter_artifact(path.string());
    CHECK(loaded.rank == 8);

    auto model = ViTModel::create(cfg, 42);
    auto meta = new_adapter<float>(cfg, 4, 43);
    std::mt19937 rng(44);
    auto image = TensorT<float>::randn({cfg.channels, cfg.image_size, cfg.image_size}, rng);
    auto out_teacher = model.forward(image, &loaded);
    auto out_meta = model.forward(image, &meta);
    CHECK(out_teacher.cls_embedding.numel() == cfg.embed_dim);
    CHECK(out_meta.cls_embedding.numel() == cfg.embed_dim);
}

TEST_CASE("backbone artifact roundtrip preserves weights and config") {
    auto dir = temp_dir();
    auto cfg = small_cfg();
    auto model = ViTModel::create(cfg, 50);
    const auto path = dir / "backbone.lrcy";
    save_model_artifact(path.string(), model);
    auto loaded = load_model_artifact(path.string());
    CHECK(loaded.cfg.embed_dim == cfg.embed_dim);
    CHECK(loaded.weight_hash() == model.weight_hash());

    std::mt19937 rng(51);
    auto image = TensorT<float>::randn({cfg.channels, cfg.image_size, cfg.image_size}, rng);
    auto a = model.forward(image);
    auto b = loaded.forward(image);
    CHECK(a.cls_embedding.data() == b.cls_embedding.data());
}

TEST_CASE("meta adapter artifact roundtrip") {
    auto dir = temp_dir();
    auto cfg = small_cfg();
    auto meta = random_adapter(cfg, 4, 60);
    meta.task_id = "meta";
    const auto path = dir / "meta.lrcy";
    save_meta_adapter_artifact(path.string(), meta);
    auto loaded = load_meta_adapter_artifact(path.string());
    CHECK(loaded.rank == meta.rank);
    CHECK(loaded.weight_hash() == meta.weight_hash());
    CHECK_THROWS_AS(load_adapter_artifact(path.string()), io_error);
}
