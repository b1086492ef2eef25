#pragma once

#include <cstring>

#include "tnx/backbone.hpp"

namespace tnx {

// Weight archive: magic "TNXT", u32 LE version=1, u32 tensor count, then per
// tensor: u16 name length + UTF-8 name, u8 dtype (0=f32, 1=f64), u8 rank,
// rank x u64 extents, raw little-endian row-major payload. Entries are
// stored in sorted-name order; save -> load -> save is byte-identical.
struct ArchiveEntry {
    std::string name;
    std::uint8_t dtype = 0;
    std::vector<std::uint64_t> extents;
    std::vector<unsigned char> payload;

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (auto e : extents) n *= e;
        return n;
    }
};

std::vector<ArchiveEntry> read_archive(const std::string& path);
void write_archive(const std::string& path, std::vector<ArchiveEntry> entries);

template <typename T>
ArchiveEntry make_entry(std::string name, const Tensor<T>& t) {
    ArchiveEntry e;
    e.name = std::move(name);
    e.dtype = dtype_code<T>();
    e.extents.assign(t.dims().begin(), t.dims().end());
    e.payload.resize(t.size() * sizeof(T));
    std::memcpy(e.payload.data(), t.data(), e.payload.size());
    return e;
}

template <typename T>
Tensor<T> entry_to_tensor(const ArchiveEntry& e) {
    if (e.dtype != dtype_code<T>())
        throw IoError("tensor '" + e.name + "' has dtype code " + std::to_string(e.dtype) +
                      ", expected " + std::to_string(dtype_code<T>()));
    std::vector<std::size_t> dims(e.extents.begin(), e.extents.end());
    std::vector<T> data(e.element_count());
    if (e.payload.size() != data.size() * sizeof(T))
        throw IoError("tensor '" + e.name + "' payload size mismatch");
    std::memcpy(data.data(), e.payload.data(), e.payload.size());
    return Tensor<T>(std::move(dims), std::move(data));
}

// --------------------------------------------------------------------------
// Model round trip. The configuration rides along as small f64 pseudo
// tensors under the "config." prefix; the parameter accountant excludes
// that prefix.
// --------------------------------------------------------------------------
namespace detail {

inline ArchiveEntry config_entry(const std::string& name, const std::vector<double>& values) {
    Tensor<double> t({values.size()}, std::vector<double>(values));
    return make_entry("config." + name, t);
}

inline std::vector<double> config_values(const std::map<std::string, ArchiveEntry>& entries,
                                         const std::string& name, std::size_t expect) {
    auto it = entries.find("config." + name);
    if (it == entries.end()) throw IoError("archive is missing tensor 'config." + name + "'");
    Tensor<double> t = entry_to_tensor<double>(it->second);
    if (t.size() != expect)
        throw IoError("tensor 'config." + name + "' has wrong extent");
    return t.vec();
}

}  // namespace detail

inline std::vector<ArchiveEntry> config_entries(const ModelConfig& c) {
    std::vector<double> channels, blocks, ratio, mixers, window, pool;
    for (const auto& s : c.stages) {
        channels.push_back(s.channels);
        blocks.push_back(s.blocks);
        ratio.push_back(s.mlp_ratio);
        mixers.push_back(s.mixer == MixerKind::Mhsa ? 1.0 : 0.0);
        window.push_back(s.window_k);
        pool.push_back(s.pool);
    }
    return {
        detail::config_entry("channels", channels),
        detail::config_entry("blocks", blocks),
        detail::config_entry("mlp_ratio", ratio),
        detail::config_entry("mixers", mixers),
        detail::config_entry("window", window),
        detail::config_entry("pool", pool),
        detail::config_entry("pool_mode", {c.pool_mode == PoolMode::Fixed ? 1.0 : 0.0}),
        detail::config_entry("num_classes", {static_cast<double>(c.num_classes)}),
        detail::config_entry("qlv_lkv", {c.query_embedding_and_tokens ? 1.0 : 0.0}),
    };
}

inline ModelConfig config_from_entries(const std::map<std::string, ArchiveEntry>& entries) {
    ModelConfig c;
    const auto channels = detail::config_values(entries, "channels", 4);
    const auto blocks = detail::config_values(entries, "blocks", 4);
    const auto ratio = detail::config_values(entries, "mlp_ratio", 4);
    const auto mixers = detail::config_values(entries, "mixers", 4);
    const auto window = detail::config_values(entries, "window", 4);
    const auto pool = detail::config_values(entries, "pool", 4);
    for (int s = 0; s < 4; ++s) {
        c.stages[s].channels = static_cast<int>(channels[s]);
        c.stages[s].blocks = static_cast<int>(blocks[s]);
        c.stages[s].mlp_ratio = ratio[s];
        c.stages[s].mixer = mixers[s] != 0.0 ? MixerKind::Mhsa : MixerKind::AggregatedAttention;
        c.stages[s].window_k = static_cast<int>(window[s]);
        c.stages[s].pool = static_cast<int>(pool[s]);
    }
    c.pool_mode = detail::config_values(entries, "pool_mode", 1)[0] != 0.0 ? PoolMode::Fixed
                                                                           : PoolMode::Ratio;
    c.num_classes = static_cast<int>(detail::config_values(entries, "num_classes", 1)[0]);
    c.query_embedding_and_tokens = detail::config_values(entries, "qlv_lkv", 1)[0] != 0.0;
    return c;
}

template <typename T>
void save_weights(const Model<T>& model, const std::string& path) {
    std::vector<ArchiveEntry> entries = config_entries(model.config);
    visit_params(const_cast<Model<T>&>(model),
                 [&](const std::string& name, Tensor<T>& t, InitKind) {
                     entries.push_back(make_entry(name, t));
                 });
    write_archive(path, std::move(entries));
}

template <typename T>
void load_weights_from_entries(Model<T>& model,
                               const std::map<std::string, ArchiveEntry>& entries) {
    std::size_t consumed = 0;
    visit_params(model, [&](const std::string& name, Tensor<T>& t, InitKind) {
        auto it = entries.find(name);
        if (it == entries.end()) throw IoError("archive is missing tensor '" + name + "'");
        Tensor<T> loaded = entry_to_tensor<T>(it->second);
        if (loaded.dims() != t.dims())
            throw IoError("tensor '" + name + "' has shape " + loaded.shape_str() +
                          ", model expects " + t.shape_str());
        t = std::move(loaded);
        ++consumed;
    });
    std::size_t param_entries = 0;
    for (const auto& [name, e] : entries)
        if (name.rfind("config.", 0) != 0) ++param_entries;
    if (param_entries != consumed) {
        for (const auto& [name, e] : entries) {
            if (name.rfind("config.", 0) == 0) continue;
            bool used = false;
            visit_params(model, [&](const std::string& n, Tensor<T>&, InitKind) {
                if (n == name) used = true;
            });
            if (!used) throw IoError("archive holds unexpected tensor '" + name + "'");
        }
    }
}

template <typename T>
void load_weights_into(Model<T>& model, const std::string& path) {
    std::map<std::string, ArchiveEntry> entries;
    for (auto& e : read_archive(path)) entries.emplace(e.name, std::move(e));
    load_weights_from_entries(model, entries);
}

template <typename T>
Model<T> load_model(const std::string& path) {
    std::map<std::string, ArchiveEntry> entries;
    for (auto& e : read_archive(path)) entries.emplace(e.name, std::move(e));
    ModelConfig config = config_from_entries(entries);
    Model<T> model = allocate_model<T>(config);
    load_weights_from_entries(model, entries);
    return model;
}

}  // namespace tnx
