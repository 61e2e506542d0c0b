#include "metalora/inversion.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "metalora/optim.hpp"

namespace metalora {

InversionResult invert(const ViTModel& model, const LoRAAdapter& adapter,
                       const ClassificationHead& head, const InversionConfig& cfg,
                       const StatRegularizer& reg) {
    const int num_classes = head.num_classes();
    cfg.validate(num_classes);
    cfg.plan.validate(model.cfg.depth);

    InversionResult res;
    auto rng = make_rng(cfg.seed, rng_tag::inversion);
    auto x = TensorT<float>::randn(
        {cfg.batch_size, model.cfg.channels, model.cfg.image_size, model.cfg.image_size}, rng,
        0.f, 1.f, true);
    res.initial_images = x.detach();
    for (int b = 0; b < cfg.batch_size; ++b) res.labels.push_back(b % num_classes);

    res.flops_per_iteration =
        iteration_flops(static_cast<uint64_t>(cfg.batch_size) *
                        flops_estimate_split(model.cfg,
                                             plan_seq_lengths(model.cfg, cfg.plan,
                                                              model.cfg.num_patches())));

    OptimizerT<float> opt(OptKind::adam, {x}, static_cast<float>(cfg.lr));
    std::vector<std::vector<int>> final_positions(cfg.batch_size);
    const PrunePlan* plan = cfg.plan.empty() ? nullptr : &cfg.plan;

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        opt.zero_grad();
        std::vector<TensorT<float>> embeddings;
        embeddings.reserve(cfg.batch_size);
        for (int b = 0; b < cfg.batch_size; ++b) {
            ForwardOptions fopts;
            fopts.plan = plan;
            auto out = model.forward(select_outer(x, b), &adapter, fopts);
            embeddings.push_back(out.cls_embedding);
            if (iter == cfg.iterations - 1) final_positions[b] = out.kept_token_positions;
        }
        auto ce = cross_entropy(head_logits<float>(head, embeddings), res.labels);
        auto loss = ce;
        if (cfg.alpha_r != 0.0)
            loss = add(ce, scale(stat_penalty(x, reg), static_cast<float>(cfg.alpha_r)));
        const double total = loss.item();
        if (!std::isfinite(total))
            throw diverged_error(iter, "inversion loss became non-finite at iteration " +
                                           std::to_string(iter));
        res.loss_trace.push_back(total);
        res.ce_trace.push_back(ce.item());
        loss.backward();
        opt.step();
    }

    res.images = x.detach();
    const int grid = model.cfg.grid();
    for (int b = 0; b < cfg.batch_size; ++b)
        res.masks.push_back(TokenMask::from_positions(grid, final_positions[b]));
    return res;
}

double masked_region_ce(const ViTModel& model, const LoRAAdapter& adapter,
                        const ClassificationHead& head, const TensorT<float>& images,
                        const std::vector<TokenMask>& masks, const std::vector<int>& labels,
                        bool foreground) {
    NoGradGuard ng;
    const int batch = images.dim(0);
    std::vector<TensorT<float>> embeddings;
    for (int b = 0; b < batch; ++b) {
        const TokenMask mask = foreground ? masks[b] : masks[b].inverted();
        auto img = apply_mask(select_outer(images, b), mask, model.cfg.patch_size);
        embeddings.push_back(model.forward(img, &adapter).cls_embedding);
    }
    return cross_entropy(head_logits<float>(head, embeddings), labels).item();
}

GeneratedTask build_task(const std::vector<TensorT<float>>& images,
                         const std::vector<TokenMask>& masks, const std::vector<int>& labels,
                         const std::vector<ClassRef>& classes, const std::string& source_id,
                         int n, int k, int q) {
    if (n < 2) throw config_error("build_task: need at least 2 classes");
    if (k < 1 || q < 1) throw config_error("build_task: k and q must be >= 1");
    if (images.size() != labels.size() || images.size() != masks.size())
        throw dimension_error("build_task: images, masks and labels must align");
    if (static_cast<int>(classes.size()) != n)
        throw dimension_error("build_task: class list must have n entries");

    GeneratedTask task;
    task.n_way = n;
    task.k_shot = k;
    task.q_query = q;
    task.images = images;
    task.masks = masks;
    task.labels = labels;
    task.classes = classes;
    task.source_ids = {source_id};

    for (int c = 0; c < n; ++c) {
        std::vector<int> pool;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) pool.push_back(static_cast<int>(i));
        if (static_cast<int>(pool.size()) < k + q)
            throw count_error("build_task: class " + std::to_string(c) + " has " +
                              std::to_string(pool.size()) + " images, needs " +
                              std::to_string(k + q));
        for (int i = 0; i < k; ++i) task.support_idx.push_back(pool[i]);
        for (int i = 0; i < q; ++i) task.query_idx.push_back(pool[k + i]);
    }
    return task;
}

GeneratedTask build_task(const InversionResult& result, const ClassificationHead& head,
                         const std::string& source_id, int k, int q) {
    const int n = head.num_classes();
    std::vector<TensorT<float>> images;
    for (int b = 0; b < result.images.dim(0); ++b)
        images.push_back(select_outer(result.images, b).detach());
    std::vector<ClassRef> classes;
    for (int c = 0; c < n; ++c) classes.push_back({source_id, c, head.labels[c]});
    return build_task(images, result.masks, result.labels, classes, source_id, n, k, q);
}

// ---- persistence ----

namespace {

void write_f32_file(const std::filesystem::path& path, const std::vector<float>& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error(io_code::write_failed, "cannot write " + path.string());
    std::string bytes;
    bytes.reserve(data.size() * 4);
    for (float v : data) {
        const uint32_t bits = std::bit_cast<uint32_t>(v);
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error(io_code::write_failed, "short write to " + path.string());
}

std::vector<float> read_f32_file(const std::filesystem::path& path, size_t expected) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error(io_code::not_found, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() != expected * 4)
        throw io_error(io_code::truncated, path.string() + " holds " +
                                               std::to_string(bytes.size() / 4) + " values, expected " +
                                               std::to_string(expected));
    std::vector<float> out(expected);
    for (size_t i = 0; i < expected; ++i) {
        uint32_t bits = 0;
        for (int j = 0; j < 4; ++j)
            bits |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[i * 4 + j])) << (8 * j);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

std::string index_name(const char* prefix, size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04zu.bin", prefix, i);
    return buf;
}

} // namespace

void save_task_dir(const std::string& dir, const GeneratedTask& task, int image_size,
                   int channels) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    ConfigFile m;
    m.set("task.n", std::to_string(task.n_way));
    m.set("task.k", std::to_string(task.k_shot));
    m.set("task.q", std::to_string(task.q_query));
    m.set("task.count", std::to_string(task.images.size()));
    m.set("task.image_size", std::to_string(image_size));
    m.set("task.channels", std::to_string(channels));
    m.set("task.grid", std::to_string(task.masks.empty() ? 0 : task.masks[0].grid));
    {
        std::string s;
        for (size_t i = 0; i < task.source_ids.size(); ++i)
            s += (i ? "," : "") + task.source_ids[i];
        m.set("task.sources", s);
    }
    auto join_ints = [](const std::vector<int>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    m.set("task.support", join_ints(task.support_idx));
    m.set("task.query", join_ints(task.query_idx));
    for (int c = 0; c < task.n_way; ++c) {
        const std::string base = "class." + std::to_string(c);
        m.set(base + ".name", task.classes[c].name);
        m.set(base + ".source", task.classes[c].source_id);
        m.set(base + ".slot", std::to_string(task.classes[c].slot));
    }
    for (size_t i = 0; i < task.images.size(); ++i) {
        char key[32];
        std::snprintf(key, sizeof(key), "image.%04zu", i);
        const std::string base = key;
        m.set(base + ".label", std::to_string(task.labels[i]));
        const bool in_support =
            std::find(task.support_idx.begin(), task.support_idx.end(), static_cast<int>(i)) !=
            task.support_idx.end();
        const bool in_query =
            std::find(task.query_idx.begin(), task.query_idx.end(), static_cast<int>(i)) !=
            task.query_idx.end();
        m.set(base + ".split", in_support ? "support" : (in_query ? "query" : "extra"));
        m.set(base + ".sparse_ratio", format_real(task.masks[i].sparse_ratio()));
    }
    std::ofstream mf(fs::path(dir) / "manifest.txt", std::ios::trunc);
    if (!mf) throw io_error(io_code::write_failed, "cannot write manifest in " + dir);
    mf << m.to_text();
    mf.close();

    for (size_t i = 0; i < task.images.size(); ++i) {
        write_f32_file(fs::path(dir) / index_name("img", i), task.images[i].data());
        std::vector<float> mask_f(task.masks[i].bits.begin(), task.masks[i].bits.end());
        write_f32_file(fs::path(dir) / index_name("mask", i), mask_f);
    }
}

GeneratedTask load_task_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest_path = fs::path(dir) / "manifest.txt";
    std::ifstream mf(manifest_path);
    if (!mf) throw io_error(io_code::not_found, "cannot open " + manifest_path.string());
    std::stringstream ss;
    ss << mf.rdbuf();
    ConfigFile m = ConfigFile::parse(ss.str());

    GeneratedTask task;
    task.n_way = static_cast<int>(m.get_int("task.n", 0));
    task.k_shot = static_cast<int>(m.get_int("task.k", 0));
    task.q_query = static_cast<int>(m.get_int("task.q", 0));
    const int count = static_cast<int>(m.get_int("task.count", 0));
    const int image_size = static_cast<int>(m.get_int("task.image_size", 0));
    const int channels = static_cast<int>(m.get_int("task.channels", 0));
    const int grid = static_cast<int>(m.get_int("task.grid", 0));
    {
        const std::string s = m.get_str("task.sources", "");
        size_t pos = 0;
        while (pos <= s.size() && !s.empty()) {
            size_t comma = s.find(',', pos);
            task.source_ids.push_back(
                s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
    }
    for (int c = 0; c < task.n_way; ++c) {
        const std::string base = "class." + std::to_string(c);
        ClassRef ref;
        ref.name = m.get_str(base + ".name", "");
        ref.source_id = m.get_str(base + ".source", "");
        ref.slot = static_cast<int>(m.get_int(base + ".slot", 0));
        task.classes.push_back(std::move(ref));
    }
    auto parse_ints = [](const std::string& s) {
        std::vector<int> out;
        size_t pos = 0;
        while (pos <= s.size() && !s.empty()) {
            size_t comma = s.find(',', pos);
            out.push_back(std::stoi(
                s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos)));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        return out;
    };
    task.support_idx = parse_ints(m.get_str("task.support", ""));
    task.query_idx = parse_ints(m.get_str("task.query", ""));
    for (int i = 0; i < count; ++i) {
        char key[32];
        std::snprintf(key, sizeof(key), "image.%04d", i);
        const std::string base = key;
        const int label = static_cast<int>(m.get_int(base + ".label", -1));
        if (label < 0 || label >= task.n_way)
            throw io_error(io_code::bad_layout, "task manifest: bad label for image " +
                                                    std::to_string(i));
        task.labels.push_back(label);
        auto img = read_f32_file(fs::path(dir) / index_name("img", i),
                                 static_cast<size_t>(channels) * image_size * image_size);
        task.images.push_back(
            TensorT<float>::from_data({channels, image_size, image_size}, std::move(img)));
        auto mk = read_f32_file(fs::path(dir) / index_name("mask", i),
                                static_cast<size_t>(grid) * grid);
        TokenMask mask;
        mask.grid = grid;
        for (float v : mk) mask.bits.push_back(v != 0.f ? 1 : 0);
        task.masks.push_back(std::move(mask));
    }
    return task;
}

} // namespace metalora
