#include "metalora/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "metalora/config.hpp"
#include "metalora/errors.hpp"
#include "metalora/util.hpp"

namespace metalora {

namespace {

const char* kShapeNames[] = {"square", "circle", "ring", "plus", "cross", "triangle"};
const char* kColorNames[] = {"red", "green", "blue", "yellow", "cyan", "magenta"};

// Channel signature of a color id, unit-ish scale before shape_amp.
void color_vector(int color_id, float out[3]) {
    switch (color_id) {
        case 0: out[0] = 1.0f; out[1] = -0.4f; out[2] = -0.4f; break;
        case 1: out[0] = -0.4f; out[1] = 1.0f; out[2] = -0.4f; break;
        case 2: out[0] = -0.4f; out[1] = -0.4f; out[2] = 1.0f; break;
        case 3: out[0] = 0.8f; out[1] = 0.8f; out[2] = -0.6f; break;
        case 4: out[0] = -0.6f; out[1] = 0.8f; out[2] = 0.8f; break;
        default: out[0] = 0.8f; out[1] = -0.6f; out[2] = 0.8f; break;
    }
}

bool inside_shape(int shape_id, double dx, double dy, double h) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    switch (shape_id) {
        case 0: return ax < h && ay < h;                       // square
        case 1: return dx * dx + dy * dy < h * h;              // circle
        case 2: {                                              // ring
            const double r2 = dx * dx + dy * dy;
            return r2 < h * h && r2 > 0.35 * h * h;
        }
        case 3: return (ax < h / 2.5 && ay < h) || (ay < h / 2.5 && ax < h); // plus
        case 4: return std::abs(ax - ay) < h / 2.6 && ax < h && ay < h;      // diagonal cross
        default:                                                // triangle
            return dy > -h && dy < 0.55 * h && ax < (dy + h) * 0.52;
    }
}

TensorT<float> render_image(const GeneratorSpec& spec, int shape_id, int color_id,
                            std::mt19937& rng) {
    const int s = spec.image_size;
    auto img = TensorT<float>::zeros({spec.channels, s, s});
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // background texture
    if (spec.texture_family == 0) {
        // two superposed oriented sinusoids
        double fx1 = 1 + uni(rng) * 2.2, fy1 = 1 + uni(rng) * 2.2, p1 = uni(rng) * 6.283;
        double fx2 = 1 + uni(rng) * 3.0, fy2 = 1 + uni(rng) * 3.0, p2 = uni(rng) * 6.283;
        double chan_mix[3] = {uni(rng) - 0.5, uni(rng) - 0.5, uni(rng) - 0.5};
        for (int c = 0; c < spec.channels; ++c)
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    double v = std::sin(6.283 * (fx1 * x + fy1 * y) / s + p1) +
                               0.7 * std::sin(6.283 * (fx2 * x - fy2 * y) / s + p2);
                    img.data()[(static_cast<size_t>(c) * s + y) * s + x] =
                        static_cast<float>(spec.texture_amp * v * (0.6 + chan_mix[c % 3]));
                }
    } else {
        // blocky checker texture with a random block size and offset
        const int block = 2 + static_cast<int>(uni(rng) * 3);
        const int off = static_cast<int>(uni(rng) * block);
        double level[3] = {uni(rng) - 0.5, uni(rng) - 0.5, uni(rng) - 0.5};
        for (int c = 0; c < spec.channels; ++c)
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    const int parity = (((x + off) / block) + ((y + off) / block)) % 2;
                    img.data()[(static_cast<size_t>(c) * s + y) * s + x] = static_cast<float>(
                        spec.texture_amp * (parity ? 1.0 : -1.0) * (0.7 + level[c % 3]));
                }
    }

    auto draw_shape = [&](int sid, int cid, double cx, double cy, double h, double amp) {
        float color[3];
        color_vector(cid, color);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                if (inside_shape(sid, x - cx, y - cy, h))
                    for (int c = 0; c < spec.channels; ++c)
                        img.data()[(static_cast<size_t>(c) * s + y) * s + x] =
                            static_cast<float>(amp * color[c % 3]);
    };

    // off-class distractor shapes on the rim: random identity and color, and
    // nearly foreground-sized, so only centrality marks the class-bearing
    // shape and global pooling alone cannot identify the class
    std::uniform_int_distribution<int> rand_shape(0, spec.num_shapes - 1);
    std::uniform_int_distribution<int> rand_color(0, spec.num_colors - 1);
    for (int d = 0; d < spec.num_distractors; ++d) {
        const double angle = uni(rng) * 6.283;
        const double radius = s * (0.38 + 0.10 * uni(rng));
        const double dx = s / 2.0 + radius * std::cos(angle);
        const double dy = s / 2.0 + radius * std::sin(angle);
        draw_shape(rand_shape(rng), rand_color(rng), dx, dy, s * (0.16 + uni(rng) * 0.08),
                   spec.shape_amp * (0.8 + 0.3 * uni(rng)));
    }

    // foreground shape, drawn last so it wins overlaps
    const int jitter = spec.position_jitter;
    const double cx = s / 2.0 + (uni(rng) * 2 - 1) * jitter;
    const double cy = s / 2.0 + (uni(rng) * 2 - 1) * jitter;
    const double h = s * (0.22 + uni(rng) * 0.11);
    draw_shape(shape_id, color_id, cx, cy, h, spec.shape_amp * (0.85 + 0.3 * uni(rng)));

    // pixel noise
    for (auto& v : img.data()) v += static_cast<float>(spec.noise_std * gauss(rng));
    return img;
}

} // namespace

ToyDataset generate_toy_dataset(const GeneratorSpec& spec, int train_classes, int test_classes,
                                int per_class_train, int per_class_test, uint64_t seed) {
    if (spec.channels != 3) throw config_error("toy dataset: generator uses 3 channels");
    const int total = train_classes + test_classes;
    const int combos = spec.num_shapes * spec.num_colors;
    if (total > combos)
        throw config_error("toy dataset: " + std::to_string(total) +
                           " classes exceed the " + std::to_string(combos) +
                           " shape/color combinations");
    if (spec.num_shapes > 6 || spec.num_colors > 6)
        throw config_error("toy dataset: at most 6 shapes and 6 colors are defined");

    ToyDataset ds;
    ds.spec = spec;
    auto rng = make_rng(seed, rng_tag::dataset);

    // Prefer a structured meta-test block (a shapes x colors sub-grid) so
    // test episodes often pit classes sharing an attribute against each
    // other; both splits still draw on the same shape/color vocabulary.
    std::vector<std::pair<int, int>> ordered; // train combos first, then test
    bool structured = false;
    for (int ts = 1; ts <= spec.num_shapes && !structured; ++ts)
        if (test_classes % ts == 0) {
            const int tc = test_classes / ts;
            if (ts > 1 && tc > 1 && ts <= spec.num_shapes && tc <= spec.num_colors) {
                std::vector<int> shapes(spec.num_shapes), colors(spec.num_colors);
                std::iota(shapes.begin(), shapes.end(), 0);
                std::iota(colors.begin(), colors.end(), 0);
                std::shuffle(shapes.begin(), shapes.end(), rng);
                std::shuffle(colors.begin(), colors.end(), rng);
                std::vector<std::pair<int, int>> test_block, rest;
                for (int sh = 0; sh < spec.num_shapes; ++sh)
                    for (int co = 0; co < spec.num_colors; ++co) {
                        const bool in_block =
                            std::find(shapes.begin(), shapes.begin() + ts, sh) != shapes.begin() + ts &&
                            std::find(colors.begin(), colors.begin() + tc, co) != colors.begin() + tc;
                        (in_block ? test_block : rest).emplace_back(sh, co);
                    }
                if (static_cast<int>(rest.size()) >= train_classes) {
                    std::shuffle(rest.begin(), rest.end(), rng);
                    rest.resize(train_classes);
                    ordered = rest;
                    ordered.insert(ordered.end(), test_block.begin(), test_block.end());
                    structured = true;
                }
            }
        }
    if (!structured) {
        std::vector<std::pair<int, int>> grid;
        for (int sh = 0; sh < spec.num_shapes; ++sh)
            for (int co = 0; co < spec.num_colors; ++co) grid.emplace_back(sh, co);
        std::shuffle(grid.begin(), grid.end(), rng);
        grid.resize(total);
        ordered = grid;
    }

    std::vector<int> shape_of, color_of;
    for (int cid = 0; cid < total; ++cid) {
        const auto [sh, co] = ordered[cid];
        shape_of.push_back(sh);
        color_of.push_back(co);
        ds.class_names.push_back(std::string(kColorNames[co]) + "_" + kShapeNames[sh]);
        if (cid < train_classes) ds.train_class_ids.push_back(cid);
        else ds.test_class_ids.push_back(cid);
    }

    for (int cid = 0; cid < total; ++cid) {
        const int count = cid < train_classes ? per_class_train : per_class_test;
        for (int i = 0; i < count; ++i) {
            ds.images.push_back(render_image(spec, shape_of[cid], color_of[cid], rng));
            ds.labels.push_back(cid);
        }
    }
    return ds;
}

void save_dataset_dir(const std::string& dir, const ToyDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    ConfigFile m;
    m.set("dataset.count", std::to_string(ds.images.size()));
    m.set("dataset.image_size", std::to_string(ds.spec.image_size));
    m.set("dataset.channels", std::to_string(ds.spec.channels));
    m.set("dataset.texture_family", std::to_string(ds.spec.texture_family));
    auto join = [](const std::vector<int>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    m.set("dataset.train_classes", join(ds.train_class_ids));
    m.set("dataset.test_classes", join(ds.test_class_ids));
    for (size_t c = 0; c < ds.class_names.size(); ++c)
        m.set("class." + std::to_string(c) + ".name", ds.class_names[c]);
    for (size_t i = 0; i < ds.images.size(); ++i) {
        char key[32];
        std::snprintf(key, sizeof(key), "image.%04zu", i);
        m.set(std::string(key) + ".label", std::to_string(ds.labels[i]));
    }
    std::ofstream mf(fs::path(dir) / "manifest.txt", std::ios::trunc);
    if (!mf) throw io_error(io_code::write_failed, "cannot write manifest in " + dir);
    mf << m.to_text();
    mf.close();

    for (size_t i = 0; i < ds.images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04zu.bin", i);
        std::ofstream f(fs::path(dir) / name, std::ios::binary | std::ios::trunc);
        if (!f) throw io_error(io_code::write_failed, "cannot write image payload");
        std::string bytes;
        for (float v : ds.images[i].data()) {
            const uint32_t bits = std::bit_cast<uint32_t>(v);
            for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
}

ToyDataset load_dataset_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) throw io_error(io_code::not_found, "cannot open dataset manifest in " + dir);
    std::stringstream ss;
    ss << mf.rdbuf();
    ConfigFile m = ConfigFile::parse(ss.str());

    ToyDataset ds;
    const int count = static_cast<int>(m.get_int("dataset.count", 0));
    ds.spec.image_size = static_cast<int>(m.get_int("dataset.image_size", 0));
    ds.spec.channels = static_cast<int>(m.get_int("dataset.channels", 0));
    ds.spec.texture_family = static_cast<int>(m.get_int("dataset.texture_family", 0));
    auto parse = [](const std::string& s) {
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
    ds.train_class_ids = parse(m.get_str("dataset.train_classes", ""));
    ds.test_class_ids = parse(m.get_str("dataset.test_classes", ""));
    const int total = static_cast<int>(ds.train_class_ids.size() + ds.test_class_ids.size());
    for (int c = 0; c < total; ++c)
        ds.class_names.push_back(m.get_str("class." + std::to_string(c) + ".name", ""));

    const size_t pixels =
        static_cast<size_t>(ds.spec.channels) * ds.spec.image_size * ds.spec.image_size;
    for (int i = 0; i < count; ++i) {
        char key[32];
        std::snprintf(key, sizeof(key), "image.%04d", i);
        ds.labels.push_back(static_cast<int>(m.get_int(std::string(key) + ".label", -1)));
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04d.bin", i);
        std::ifstream f(fs::path(dir) / name, std::ios::binary);
        if (!f) throw io_error(io_code::not_found, "missing image payload " + std::string(name));
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        if (bytes.size() != pixels * 4)
            throw io_error(io_code::truncated, "image payload " + std::string(name));
        std::vector<float> data(pixels);
        for (size_t j = 0; j < pixels; ++j) {
            uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[j * 4 + b])) << (8 * b);
            data[j] = std::bit_cast<float>(bits);
        }
        ds.images.push_back(TensorT<float>::from_data(
            {ds.spec.channels, ds.spec.image_size, ds.spec.image_size}, std::move(data)));
    }
    return ds;
}

Episode sample_episode(const ToyDataset& ds, int n, int k, int q, uint64_t seed) {
    if (static_cast<int>(ds.test_class_ids.size()) < n)
        throw count_error("sample_episode: meta-test split has " +
                          std::to_string(ds.test_class_ids.size()) + " classes, need " +
                          std::to_string(n));
    auto rng = make_rng(seed, rng_tag::episodes);

    std::vector<int> classes = ds.test_class_ids;
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(n);

    Episode ep;
    ep.n_way = n;
    ep.k_shot = k;
    ep.q_query = q;
    ep.class_ids = classes;
    for (int slot = 0; slot < n; ++slot) {
        auto pool = ds.images_of_class(classes[slot]);
        if (static_cast<int>(pool.size()) < k + q)
            throw count_error("sample_episode: class " + std::to_string(classes[slot]) +
                              " has " + std::to_string(pool.size()) + " images, needs " +
                              std::to_string(k + q));
        std::shuffle(pool.begin(), pool.end(), rng);
        for (int i = 0; i < k; ++i) {
            ep.support_images.push_back(ds.images[pool[i]]);
            ep.support_labels.push_back(slot);
        }
        for (int i = 0; i < q; ++i) {
            ep.query_images.push_back(ds.images[pool[k + i]]);
            ep.query_labels.push_back(slot);
        }
    }
    return ep;
}

} // namespace metalora
