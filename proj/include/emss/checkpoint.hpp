#ifndef EMSS_CHECKPOINT_HPP
#define EMSS_CHECKPOINT_HPP

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>
#include <zlib.h>
#include <json.hpp>

#include "emss/networks.hpp"

namespace emss {

/// Persisted parameter set with provenance. Binary layout:
///   "EMSSCKPT" | u32 version | u64 meta_len | meta json | f32 blobs | u32 crc32
/// The checksum covers everything between the magic and itself.
struct CheckpointRecord {
    static constexpr uint32_t kVersion = 1;

    ModelSpec spec;
    HeadKind head = HeadKind::image;
    Task task = Task::pretext;
    int epoch = 0;
    double best_val_metric = 0;
    std::string provenance = "R";  // "R" or "P(<subset>)"
    std::string metric_kind = "l1";
    std::vector<std::pair<std::string, torch::Tensor>> tensors;
};

inline CheckpointRecord make_checkpoint(const Network& net, Task task, int epoch,
                                        double best_val_metric, const std::string& provenance,
                                        const std::string& metric_kind) {
    CheckpointRecord r;
    r.spec = net.spec;
    r.head = net.head_kind;
    r.task = task;
    r.epoch = epoch;
    r.best_val_metric = best_val_metric;
    r.provenance = provenance;
    r.metric_kind = metric_kind;
    for (auto& kv : net.named_tensors())
        r.tensors.emplace_back(kv.first, kv.second.detach().to(torch::kFloat32).contiguous().clone());
    return r;
}

namespace detail {
constexpr char kCkptMagic[8] = {'E', 'M', 'S', 'S', 'C', 'K', 'P', 'T'};

template <typename T>
void append_pod(std::string& buf, const T& v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}
}  // namespace detail

inline void save_checkpoint(const CheckpointRecord& record, const std::filesystem::path& path) {
    nlohmann::json meta;
    meta["spec"] = record.spec;
    meta["head"] = to_string(record.head);
    meta["task"] = to_string(record.task);
    meta["epoch"] = record.epoch;
    meta["best_val_metric"] = record.best_val_metric;
    meta["provenance"] = record.provenance;
    meta["metric_kind"] = record.metric_kind;
    meta["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : record.tensors)
        meta["tensors"].push_back({{"name", name}, {"shape", t.sizes().vec()}});
    std::string meta_str = meta.dump();

    std::string payload;
    detail::append_pod(payload, CheckpointRecord::kVersion);
    detail::append_pod(payload, static_cast<uint64_t>(meta_str.size()));
    payload += meta_str;
    for (const auto& [name, t] : record.tensors) {
        auto c = t.detach().to(torch::kFloat32).contiguous();
        payload.append(reinterpret_cast<const char*>(c.data_ptr<float>()),
                       static_cast<size_t>(c.numel()) * sizeof(float));
    }
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));

    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open checkpoint file for writing: " + tmp.string());
        out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
        if (!out) throw std::runtime_error("checkpoint write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline CheckpointRecord load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(detail::kCkptMagic) + sizeof(uint32_t) * 2 + sizeof(uint64_t) ||
        std::memcmp(bytes.data(), detail::kCkptMagic, sizeof(detail::kCkptMagic)) != 0)
        throw std::runtime_error("not an EMSS checkpoint: " + path.string());

    size_t payload_len = bytes.size() - sizeof(detail::kCkptMagic) - sizeof(uint32_t);
    const char* payload = bytes.data() + sizeof(detail::kCkptMagic);
    uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - sizeof(uint32_t), sizeof(uint32_t));
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(payload), static_cast<uInt>(payload_len)));
    if (crc != stored_crc)
        throw std::runtime_error("checkpoint checksum mismatch (corrupt or truncated file): " +
                                 path.string());

    size_t off = 0;
    uint32_t version;
    std::memcpy(&version, payload + off, sizeof(version));
    off += sizeof(version);
    if (version != CheckpointRecord::kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 " (this build reads version " +
                                 std::to_string(CheckpointRecord::kVersion) + ")");
    uint64_t meta_len;
    std::memcpy(&meta_len, payload + off, sizeof(meta_len));
    off += sizeof(meta_len);
    nlohmann::json meta = nlohmann::json::parse(std::string(payload + off, meta_len));
    off += meta_len;

    CheckpointRecord r;
    r.spec = meta.at("spec").get<ModelSpec>();
    r.head = head_from_string(meta.at("head").get<std::string>());
    r.task = task_from_string(meta.at("task").get<std::string>());
    r.epoch = meta.at("epoch").get<int>();
    r.best_val_metric = meta.at("best_val_metric").get<double>();
    r.provenance = meta.at("provenance").get<std::string>();
    r.metric_kind = meta.at("metric_kind").get<std::string>();
    for (const auto& tj : meta.at("tensors")) {
        std::string name = tj.at("name").get<std::string>();
        auto shape = tj.at("shape").get<std::vector<int64_t>>();
        int64_t numel = 1;
        for (auto s : shape) numel *= s;
        if (off + static_cast<size_t>(numel) * sizeof(float) > payload_len)
            throw std::runtime_error("checkpoint payload shorter than tensor index claims");
        auto t = torch::from_blob(const_cast<char*>(payload + off), shape, torch::kFloat32).clone();
        off += static_cast<size_t>(numel) * sizeof(float);
        r.tensors.emplace_back(std::move(name), std::move(t));
    }
    return r;
}

/// Rebuilds the network described by a checkpoint and loads every stored
/// tensor into it by name.
inline Network restore_network(const CheckpointRecord& record) {
    Network net = record.spec.family == Family::patchgan_disc
                      ? build_discriminator(record.spec, 0)
                      : build_generator(record.spec, 0, record.head);
    std::map<std::string, torch::Tensor> stored(record.tensors.begin(), record.tensors.end());
    torch::NoGradGuard no_grad;
    for (auto& kv : net.named_tensors()) {
        auto it = stored.find(kv.first);
        if (it == stored.end())
            throw std::runtime_error("checkpoint is missing tensor '" + kv.first + "'");
        if (it->second.sizes() != kv.second.sizes())
            throw std::runtime_error("checkpoint tensor '" + kv.first + "' has wrong shape");
        kv.second.copy_(it->second);
    }
    return net;
}

}  // namespace emss

#endif  // EMSS_CHECKPOINT_HPP
