#pragma once

// Checkpoint container:
//   "P2SC" | u32 LE version | u64 LE header length | JSON header | payload
// The header lists every parameter and buffer as {name, kind, shape, offset,
// nbytes}; offsets are relative to the payload, which is the concatenation
// of little-endian float32 blobs in canonical store order.
// model_id is the hex BLAKE2b-128 digest of the payload.

#include <sodium.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <set>

#include "p2s/png_io.hpp"
#include "p2s/serialize.hpp"

namespace p2s {

inline constexpr char kCheckpointMagic[4] = {'P', '2', 'S', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct CheckpointProvenance {
    std::uint64_t seed = 0;
    int fold = -1;
    int epoch = -1;
    double best_val_dice = 0;
    std::vector<std::string> class_names;
};

inline void to_json(json& j, const CheckpointProvenance& p) {
    j = json{{"seed", p.seed},
             {"fold", p.fold},
             {"epoch", p.epoch},
             {"best_val_dice", p.best_val_dice},
             {"class_names", p.class_names}};
}

inline void from_json(const json& j, CheckpointProvenance& p) {
    detail::read_opt(j, "seed", p.seed);
    detail::read_opt(j, "fold", p.fold);
    detail::read_opt(j, "epoch", p.epoch);
    detail::read_opt(j, "best_val_dice", p.best_val_dice);
    detail::read_opt(j, "class_names", p.class_names);
}

namespace detail {
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint64_t get_le(const std::uint8_t* p, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline std::string blake2b_hex(const std::uint8_t* data, std::size_t n) {
    if (sodium_init() < 0) throw std::runtime_error("libsodium initialisation failed");
    unsigned char digest[16];
    crypto_generichash(digest, sizeof digest, data, n, nullptr, 0);
    char hex[2 * sizeof digest + 1];
    sodium_bin2hex(hex, sizeof hex, digest, sizeof digest);
    return hex;
}

template <typename F>
void for_each_named(const Prompt2SegModel<float>& m, F&& visit) {
    for (const auto& p : m.store().params()) visit(p, "param");
    for (const auto& b : m.store().buffers()) visit(b, "buffer");
}
}  // namespace detail

/// Payload bytes only (little-endian float32, store order).
inline std::vector<std::uint8_t> checkpoint_payload(const Prompt2SegModel<float>& m) {
    std::vector<std::uint8_t> out;
    detail::for_each_named(m, [&](const NamedTensor<float>& t, const char*) {
        for (float v : t.tensor.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    });
    return out;
}

/// Digest of the model's current parameters and buffers.
inline std::string model_id(const Prompt2SegModel<float>& m) {
    auto payload = checkpoint_payload(m);
    return detail::blake2b_hex(payload.data(), payload.size());
}

inline std::vector<std::uint8_t> serialize_checkpoint(const Prompt2SegModel<float>& m,
                                                      const CheckpointProvenance& prov) {
    json tensors = json::array();
    std::size_t offset = 0;
    detail::for_each_named(m, [&](const NamedTensor<float>& t, const char* kind) {
        const std::size_t nbytes = 4 * t.tensor.size();
        tensors.push_back(
            {{"name", t.name}, {"kind", kind}, {"shape", t.tensor.shape()}, {"offset", offset}, {"nbytes", nbytes}});
        offset += nbytes;
    });
    auto payload = checkpoint_payload(m);
    json header{{"config", m.config()},
                {"tensors", tensors},
                {"payload_bytes", payload.size()},
                {"parameter_count", m.parameter_count()},
                {"provenance", prov}};
    const std::string h = header.dump();
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, h.size());
    out.insert(out.end(), h.begin(), h.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

/// Writes to a temporary sibling and renames, so readers never see a torn file.
inline void save_checkpoint(const std::filesystem::path& path, const Prompt2SegModel<float>& m,
                            const CheckpointProvenance& prov) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    write_file(tmp, serialize_checkpoint(m, prov));
    std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
    Prompt2SegModel<float> model;
    CheckpointProvenance provenance;
    std::string model_id;
};

namespace detail {
inline LoadedCheckpoint parse_checkpoint_unchecked(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw CheckpointError("checkpoint: bad magic, not a P2SC file");
    const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    const auto hlen = get_le(bytes.data() + 8, 8);
    if (hlen > bytes.size() - 16) throw CheckpointError("checkpoint: header length exceeds file size");
    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(hlen));
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint: malformed header: " + std::string(e.what()));
    }
    const std::uint8_t* payload = bytes.data() + 16 + hlen;
    const std::size_t payload_size = bytes.size() - 16 - hlen;

    ModelConfig cfg;
    CheckpointProvenance prov;
    std::vector<json> descs;
    std::size_t declared = 0;
    try {
        header.at("config").get_to(cfg);
        header.at("provenance").get_to(prov);
        descs = header.at("tensors").get<std::vector<json>>();
        declared = header.at("payload_bytes").get<std::size_t>();
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint: malformed header: " + std::string(e.what()));
    }
    if (declared != payload_size)
        throw CheckpointError("checkpoint: payload is " + std::to_string(payload_size) + " bytes, header declares " +
                              std::to_string(declared));

    // Offsets must tile the payload exactly.
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& d : descs) spans.emplace_back(d.at("offset").get<std::size_t>(), d.at("nbytes").get<std::size_t>());
    std::sort(spans.begin(), spans.end());
    std::size_t cursor = 0;
    for (auto [off, n] : spans) {
        if (off != cursor) throw CheckpointError("checkpoint: tensor blobs leave a gap or overlap at byte " +
                                                 std::to_string(cursor));
        cursor += n;
    }
    if (cursor != payload_size) throw CheckpointError("checkpoint: tensor blobs do not cover the payload");

    cfg.validate();
    Prompt2SegModel<float> model(cfg, 0);
    std::map<std::string, Tensor<float>> slots;
    for_each_named(model, [&](const NamedTensor<float>& t, const char*) { slots.emplace(t.name, t.tensor); });
    std::set<std::string> seen;
    for (const auto& d : descs) {
        const auto name = d.at("name").get<std::string>();
        auto it = slots.find(name);
        if (it == slots.end()) throw CheckpointError("checkpoint: unexpected tensor " + name);
        if (!seen.insert(name).second) throw CheckpointError("checkpoint: duplicate tensor " + name);
        Tensor<float> dst = it->second;
        const auto shape = d.at("shape").get<Shape>();
        if (shape != dst.shape())
            throw CheckpointError("checkpoint: tensor " + name + " has shape " + to_string(shape) + ", model expects " +
                                  to_string(dst.shape()));
        const auto off = d.at("offset").get<std::size_t>();
        if (d.at("nbytes").get<std::size_t>() != 4 * dst.size())
            throw CheckpointError("checkpoint: tensor " + name + " byte length does not match its shape");
        auto out = dst.mutable_data();
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(payload + off + 4 * i, 4)));
    }
    if (seen.size() != slots.size()) throw CheckpointError("checkpoint: missing tensors for this config");
    return {std::move(model), std::move(prov), blake2b_hex(payload, payload_size)};
}
}  // namespace detail

inline LoadedCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    try {
        return detail::parse_checkpoint_unchecked(bytes);
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint: malformed header: " + std::string(e.what()));
    } catch (const std::invalid_argument& e) {
        throw CheckpointError("checkpoint: " + std::string(e.what()));
    }
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    try {
        return parse_checkpoint(read_file(path));
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace p2s
