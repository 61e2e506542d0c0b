#include "metalora/artifact.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "metalora/util.hpp"

namespace metalora {

namespace {

constexpr char kMagic[4] = {'L', 'R', 'C', 'Y'};

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size())
            throw io_error(io_code::truncated, "artifact truncated at byte " + std::to_string(pos));
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

std::string join_labels(const std::vector<std::string>& labels) {
    std::string out;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (i) out.push_back(',');
        out += labels[i];
    }
    return out;
}

std::vector<std::string> split_labels(const std::string& s) {
    std::vector<std::string> out;
    if (s.empty()) return out;
    size_t pos = 0;
    while (true) {
        size_t comma = s.find(',', pos);
        out.push_back(s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

} // namespace

void save_artifact(const std::string& path, const ConfigFile& metadata,
                   const std::vector<NamedTensor>& tensors) {
    std::string meta_text = metadata.to_text();

    std::string payload;
    std::string directory;
    put_u32(directory, static_cast<uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        put_u32(directory, static_cast<uint32_t>(nt.name.size()));
        directory += nt.name;
        put_u32(directory, static_cast<uint32_t>(nt.tensor.shape().size()));
        for (int d : nt.tensor.shape()) put_u32(directory, static_cast<uint32_t>(d));
        put_u64(directory, payload.size());
        put_u64(directory, static_cast<uint64_t>(nt.tensor.numel()));
        for (float v : nt.tensor.data()) put_u32(payload, std::bit_cast<uint32_t>(v));
    }

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kArtifactVersion);
    put_u32(out, static_cast<uint32_t>(meta_text.size()));
    out += meta_text;
    out += directory;
    put_u64(out, payload.size());
    out += payload;
    put_u32(out, crc32(payload.data(), payload.size()));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw io_error(io_code::write_failed, "cannot open " + tmp + " for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw io_error(io_code::write_failed, "short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error(io_code::write_failed, "rename to " + path + ": " + ec.message());
}

Artifact load_artifact(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error(io_code::not_found, "cannot open artifact " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();
    Reader r{buf};

    if (r.bytes(4) != std::string(kMagic, 4))
        throw io_error(io_code::bad_magic, "bad magic in " + path);
    const uint32_t version = r.u32();
    if (version != kArtifactVersion)
        throw io_error(io_code::bad_version,
                       "unsupported artifact version " + std::to_string(version));

    const uint32_t meta_len = r.u32();
    Artifact art;
    art.metadata = ConfigFile::parse(r.bytes(meta_len));

    struct Entry {
        std::string name;
        Shape shape;
        uint64_t offset;
        uint64_t count;
    };
    std::vector<Entry> entries;
    const uint32_t tensor_count = r.u32();
    for (uint32_t i = 0; i < tensor_count; ++i) {
        Entry e;
        e.name = r.bytes(r.u32());
        const uint32_t ndim = r.u32();
        for (uint32_t d = 0; d < ndim; ++d) e.shape.push_back(static_cast<int>(r.u32()));
        e.offset = r.u64();
        e.count = r.u64();
        if (static_cast<uint64_t>(shape_numel(e.shape)) != e.count)
            throw io_error(io_code::bad_layout, "tensor " + e.name + " shape/count mismatch");
        entries.push_back(std::move(e));
    }

    const uint64_t payload_bytes = r.u64();
    const std::string payload = r.bytes(payload_bytes);
    r.need(4);
    const uint32_t stored_crc = r.u32();
    if (crc32(payload.data(), payload.size()) != stored_crc)
        throw io_error(io_code::bad_checksum, "payload checksum mismatch in " + path);

    // Directory entries must stay inside the payload and not overlap.
    std::vector<std::pair<uint64_t, uint64_t>> ranges;
    for (const auto& e : entries) {
        const uint64_t begin = e.offset;
        const uint64_t end = begin + e.count * 4;
        if (end > payload_bytes)
            throw io_error(io_code::bad_layout, "tensor " + e.name + " exceeds payload");
        ranges.emplace_back(begin, end);
    }
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].second)
            throw io_error(io_code::bad_layout, "overlapping tensor payload ranges");

    for (const auto& e : entries) {
        std::vector<float> data(e.count);
        for (uint64_t i = 0; i < e.count; ++i) {
            uint32_t bits = 0;
            std::memcpy(&bits, payload.data() + e.offset + i * 4, 4);
            data[i] = std::bit_cast<float>(bits);
        }
        art.tensors.push_back({e.name, TensorT<float>::from_data(e.shape, std::move(data))});
    }
    return art;
}

// ---- adapter + head ----

namespace {

std::vector<NamedTensor> adapter_tensors(const LoRAAdapter& adapter) {
    std::vector<NamedTensor> out;
    for (const auto& e : adapter.entries) {
        const std::string base =
            "lora.l" + std::to_string(e.layer) + "." + lora_site_name(e.site);
        out.push_back({base + ".a", e.a});
        out.push_back({base + ".b", e.b});
    }
    return out;
}

void fill_adapter_metadata(ConfigFile& meta, const LoRAAdapter& adapter) {
    meta.set("lora.rank", std::to_string(adapter.rank));
    meta.set("lora.task_id", adapter.task_id);
    meta.set("lora.seed", std::to_string(adapter.creation_seed));
    meta.set("lora.classes", join_labels(adapter.class_names));
}

LoRAAdapter adapter_from_artifact(const Artifact& art) {
    LoRAAdapter adapter;
    adapter.rank = static_cast<int>(art.metadata.get_int("lora.rank", 0));
    adapter.task_id = art.metadata.get_str("lora.task_id", "");
    adapter.creation_seed = static_cast<uint64_t>(art.metadata.get_int("lora.seed", 0));
    adapter.class_names = split_labels(art.metadata.get_str("lora.classes", ""));
    for (int layer = 0;; ++layer) {
        const std::string lbase = "lora.l" + std::to_string(layer);
        bool found_any = false;
        for (LoraSite site : {LoraSite::q, LoraSite::v}) {
            const std::string base = lbase + "." + lora_site_name(site);
            const auto* a = art.find(base + ".a");
            const auto* b = art.find(base + ".b");
            if (!a && !b) continue;
            if (!a || !b)
                throw io_error(io_code::bad_layout, "adapter site " + base + " missing a pair");
            adapter.entries.push_back({layer, site, a->detach(), b->detach()});
            found_any = true;
        }
        if (!found_any) break;
    }
    if (adapter.entries.empty())
        throw io_error(io_code::bad_layout, "artifact holds no adapter tensors");
    if (adapter.rank != adapter.entries[0].a.dim(1))
        throw io_error(io_code::bad_layout, "adapter rank metadata disagrees with tensors");
    return adapter;
}

} // namespace

void save_adapter_artifact(const std::string& path, const LoRAAdapter& adapter,
                           const ClassificationHead& head) {
    ConfigFile meta;
    meta.set("artifact.kind", "adapter_head");
    fill_adapter_metadata(meta, adapter);
    meta.set("head.labels", join_labels(head.labels));
    auto tensors = adapter_tensors(adapter);
    tensors.push_back({"head.weight", head.weight});
    tensors.push_back({"head.bias", head.bias});
    save_artifact(path, meta, tensors);
}

std::pair<LoRAAdapter, ClassificationHead> load_adapter_artifact(const std::string& path) {
    Artifact art = load_artifact(path);
    if (art.metadata.get_str("artifact.kind", "") != "adapter_head")
        throw io_error(io_code::bad_layout, path + " is not an adapter_head artifact");
    LoRAAdapter adapter = adapter_from_artifact(art);
    ClassificationHead head;
    head.weight = art.require("head.weight").detach();
    head.bias = art.require("head.bias").detach();
    head.labels = split_labels(art.metadata.get_str("head.labels", ""));
    if (static_cast<int>(head.labels.size()) != head.num_classes())
        throw io_error(io_code::bad_layout, "head label list does not match weight shape");
    return {std::move(adapter), std::move(head)};
}

void save_meta_adapter_artifact(const std::string& path, const LoRAAdapter& adapter) {
    ConfigFile meta;
    meta.set("artifact.kind", "meta_adapter");
    fill_adapter_metadata(meta, adapter);
    save_artifact(path, meta, adapter_tensors(adapter));
}

LoRAAdapter load_meta_adapter_artifact(const std::string& path) {
    Artifact art = load_artifact(path);
    if (art.metadata.get_str("artifact.kind", "") != "meta_adapter")
        throw io_error(io_code::bad_layout, path + " is not a meta_adapter artifact");
    return adapter_from_artifact(art);
}

// ---- backbone ----

void save_model_artifact(const std::string& path, const ViTModel& model) {
    ConfigFile meta;
    meta.set("artifact.kind", "backbone");
    meta.set("model.image_size", std::to_string(model.cfg.image_size));
    meta.set("model.patch_size", std::to_string(model.cfg.patch_size));
    meta.set("model.channels", std::to_string(model.cfg.channels));
    meta.set("model.depth", std::to_string(model.cfg.depth));
    meta.set("model.embed_dim", std::to_string(model.cfg.embed_dim));
    meta.set("model.num_heads", std::to_string(model.cfg.num_heads));
    meta.set("model.mlp_ratio", std::to_string(model.cfg.mlp_ratio));

    std::vector<NamedTensor> tensors;
    tensors.push_back({"vit.patch_w", model.patch_w});
    tensors.push_back({"vit.patch_b", model.patch_b});
    tensors.push_back({"vit.cls", model.cls_token});
    tensors.push_back({"vit.pos", model.pos});
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        const std::string base = "vit.l" + std::to_string(l) + ".";
        const std::pair<const char*, const TensorT<float>*> items[] = {
            {"ln1_g", &layer.ln1_g}, {"ln1_b", &layer.ln1_b}, {"wq", &layer.wq},
            {"bq", &layer.bq},       {"wk", &layer.wk},       {"bk", &layer.bk},
            {"wv", &layer.wv},       {"bv", &layer.bv},       {"wo", &layer.wo},
            {"bo", &layer.bo},       {"ln2_g", &layer.ln2_g}, {"ln2_b", &layer.ln2_b},
            {"w1", &layer.w1},       {"b1", &layer.b1},       {"w2", &layer.w2},
            {"b2", &layer.b2},
        };
        for (const auto& [name, t] : items) tensors.push_back({base + name, *t});
    }
    tensors.push_back({"vit.final_ln_g", model.final_ln_g});
    tensors.push_back({"vit.final_ln_b", model.final_ln_b});
    save_artifact(path, meta, tensors);
}

ViTModel load_model_artifact(const std::string& path) {
    Artifact art = load_artifact(path);
    if (art.metadata.get_str("artifact.kind", "") != "backbone")
        throw io_error(io_code::bad_layout, path + " is not a backbone artifact");
    ViTConfig cfg;
    cfg.image_size = static_cast<int>(art.metadata.get_int("model.image_size", 0));
    cfg.patch_size = static_cast<int>(art.metadata.get_int("model.patch_size", 0));
    cfg.channels = static_cast<int>(art.metadata.get_int("model.channels", 0));
    cfg.depth = static_cast<int>(art.metadata.get_int("model.depth", 0));
    cfg.embed_dim = static_cast<int>(art.metadata.get_int("model.embed_dim", 0));
    cfg.num_heads = static_cast<int>(art.metadata.get_int("model.num_heads", 0));
    cfg.mlp_ratio = static_cast<int>(art.metadata.get_int("model.mlp_ratio", 4));
    cfg.validate();
    ViTModel model = ViTModel::create(cfg, 0);

    auto assign = [&](TensorT<float>& dst, const std::string& name) {
        const auto& src = art.require(name);
        if (src.shape() != dst.shape())
            throw io_error(io_code::bad_layout, "tensor " + name + " has shape " +
                                                    shape_str(src.shape()) + ", expected " +
                                                    shape_str(dst.shape()));
        dst.data() = src.data();
    };
    assign(model.patch_w, "vit.patch_w");
    assign(model.patch_b, "vit.patch_b");
    assign(model.cls_token, "vit.cls");
    assign(model.pos, "vit.pos");
    for (size_t l = 0; l < model.layers.size(); ++l) {
        auto& layer = model.layers[l];
        const std::string base = "vit.l" + std::to_string(l) + ".";
        assign(layer.ln1_g, base + "ln1_g");
        assign(layer.ln1_b, base + "ln1_b");
        assign(layer.wq, base + "wq");
        assign(layer.bq, base + "bq");
        assign(layer.wk, base + "wk");
        assign(layer.bk, base + "bk");
        assign(layer.wv, base + "wv");
        assign(layer.bv, base + "bv");
        assign(layer.wo, base + "wo");
        assign(layer.bo, base + "bo");
        assign(layer.ln2_g, base + "ln2_g");
        assign(layer.ln2_b, base + "ln2_b");
        assign(layer.w1, base + "w1");
        assign(layer.b1, base + "b1");
        assign(layer.w2, base + "w2");
        assign(layer.b2, base + "b2");
    }
    assign(model.final_ln_g, "vit.final_ln_g");
    assign(model.final_ln_b, "vit.final_ln_b");
    return model;
}

} // namespace metalora
