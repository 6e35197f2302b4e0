#pragma once

// Checkpoint container, one file:
//
//   "VNCK" | u32 version | u8 dtype (0=f32, 1=f64)
//   arch text (u32 length + bytes)              -- the model.* config subset
//   u32 param count | per param: name, shape, raw little-endian values
//   u8 has_train_state
//     u64 epoch_next | u64 step | rng stream text
//     per-channel normalization stats (count + f64 means + f64 stds)
//     u32 optimizer tensor count | named tensors as above
//   u32 CRC-32 of every preceding byte
//
// Loads verify magic, version, dtype and checksum before touching any state;
// a truncated or edited file is refused whole.

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "vnode/crc32.hpp"
#include "vnode/model.hpp"

namespace vnode {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct TrainState {
    std::int64_t epoch_next = 0; // first epoch index the resumed run executes
    std::int64_t step = 0;       // optimizer steps taken
    std::string rng_state;
    std::vector<double> norm_mean, norm_std;
    std::vector<std::pair<std::string, Tensor<T>>> opt_tensors;
};

namespace ckpt_detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_str(std::string& buf, const std::string& s) {
    put_u32(buf, static_cast<std::uint32_t>(s.size()));
    buf.append(s);
}

template <typename T>
void put_tensor(std::string& buf, const std::string& name, const Tensor<T>& t) {
    put_str(buf, name);
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(buf, static_cast<std::uint64_t>(d));
    const std::size_t bytes = static_cast<std::size_t>(t.size()) * sizeof(T);
    const std::size_t off = buf.size();
    buf.resize(off + bytes);
    std::memcpy(buf.data() + off, t.data(), bytes); // little-endian host assumed
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    template <typename T>
    std::pair<std::string, Tensor<T>> tensor() {
        std::string name = str();
        const std::uint32_t rank = u32();
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(u64()));
        const std::size_t count = static_cast<std::size_t>(shape_numel(shape));
        need(count * sizeof(T));
        std::vector<T> data(count);
        std::memcpy(data.data(), buf.data() + pos, count * sizeof(T));
        pos += count * sizeof(T);
        return {std::move(name), Tensor<T>(std::move(shape), std::move(data))};
    }
};

template <typename T>
constexpr std::uint8_t dtype_tag() {
    return std::is_same_v<T, float> ? 0 : 1;
}

} // namespace ckpt_detail

template <typename T>
void checkpoint_save(const std::string& path, VnodeModel<T>& model, const TrainState<T>* train) {
    using namespace ckpt_detail;
    std::string buf;
    buf.append("VNCK");
    put_u32(buf, kCheckpointVersion);
    buf.push_back(static_cast<char>(dtype_tag<T>()));
    put_str(buf, model.arch_text());
    auto params = model.parameters();
    put_u32(buf, static_cast<std::uint32_t>(params.size()));
    for (auto& p : params) put_tensor(buf, p.name, *p.tensor);
    buf.push_back(train ? 1 : 0);
    if (train) {
        put_u64(buf, static_cast<std::uint64_t>(train->epoch_next));
        put_u64(buf, static_cast<std::uint64_t>(train->step));
        put_str(buf, train->rng_state);
        put_u32(buf, static_cast<std::uint32_t>(train->norm_mean.size()));
        for (double v : train->norm_mean) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u64(buf, bits);
        }
        for (double v : train->norm_std) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_u64(buf, bits);
        }
        put_u32(buf, static_cast<std::uint32_t>(train->opt_tensors.size()));
        for (auto& [name, t] : train->opt_tensors) put_tensor(buf, name, t);
    }
    put_u32(buf, crc32(buf.data(), buf.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open checkpoint for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError("short write to checkpoint: " + path);
}

template <typename T>
struct LoadedCheckpoint {
    VnodeModel<T> model;
    std::optional<TrainState<T>> train;
};

template <typename T>
LoadedCheckpoint<T> checkpoint_load(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 13) throw CheckpointError("checkpoint truncated: " + path);

    const std::uint32_t stored_crc = [&] {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[buf.size() - 4 + i])) << (8 * i);
        return v;
    }();
    if (crc32(buf.data(), buf.size() - 4) != stored_crc)
        throw CheckpointError("checkpoint checksum mismatch: " + path);

    Reader r{buf};
    r.need(4);
    if (buf.compare(0, 4, "VNCK") != 0) throw CheckpointError("not a checkpoint file: " + path);
    r.pos = 4;
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (want " +
                              std::to_string(kCheckpointVersion) + ")");
    const std::uint8_t dtype = r.u8();
    if (dtype != dtype_tag<T>())
        throw CheckpointError(std::string("checkpoint element type is ") + (dtype == 0 ? "f32" : "f64") +
                              "; run with the matching --precision");

    const std::string arch = r.str();
    Config arch_cfg = Config::parse_string(arch, path + "#arch");
    Rng scratch(0);
    LoadedCheckpoint<T> out{VnodeModel<T>::build(arch_cfg, scratch), std::nullopt};

    const std::uint32_t nparams = r.u32();
    auto params = out.model.parameters();
    if (nparams != params.size())
        throw CheckpointError("checkpoint has " + std::to_string(nparams) + " tensors, architecture needs " +
                              std::to_string(params.size()));
    for (std::uint32_t i = 0; i < nparams; ++i) {
        auto [name, tensor] = r.template tensor<T>();
        if (name != params[i].name)
            throw CheckpointError("checkpoint tensor '" + name + "' does not match architecture slot '" +
                                  params[i].name + "'");
        if (tensor.shape() != params[i].tensor->shape())
            throw CheckpointError("checkpoint tensor '" + name + "' has shape " + shape_str(tensor.shape()) +
                                  ", architecture needs " + shape_str(params[i].tensor->shape()));
        *params[i].tensor = std::move(tensor);
    }

    if (r.u8()) {
        TrainState<T> ts;
        ts.epoch_next = static_cast<std::int64_t>(r.u64());
        ts.step = static_cast<std::int64_t>(r.u64());
        ts.rng_state = r.str();
        const std::uint32_t nch = r.u32();
        for (std::uint32_t i = 0; i < nch; ++i) {
            const std::uint64_t bits = r.u64();
            double v;
            std::memcpy(&v, &bits, 8);
            ts.norm_mean.push_back(v);
        }
        for (std::uint32_t i = 0; i < nch; ++i) {
            const std::uint64_t bits = r.u64();
            double v;
            std::memcpy(&v, &bits, 8);
            ts.norm_std.push_back(v);
        }
        const std::uint32_t nopt = r.u32();
        for (std::uint32_t i = 0; i < nopt; ++i) ts.opt_tensors.push_back(r.template tensor<T>());
        out.train = std::move(ts);
    }
    return out;
}

} // namespace vnode
