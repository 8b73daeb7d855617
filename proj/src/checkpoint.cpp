#include "durit/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "durit/config.hpp"

namespace durit {

namespace {

constexpr char kMagic[8] = {'D', 'U', 'R', 'I', 'T', 'C', 'K', 'P'};

template <class T>
void put(std::ostream& out, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(b, b + sizeof(T));
    }
    out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& path) {
    unsigned char b[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) {
        throw CheckpointError("checkpoint " + path + " is truncated");
    }
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(b, b + sizeof(T));
    }
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

void copy_into(const Tensor& src, Tensor& dst, const std::string& name) {
    if (src.shape != dst.shape) {
        throw CheckpointError("checkpoint block " + name + " has shape " + shape_string(src.shape) +
                              ", expected " + shape_string(dst.shape));
    }
    dst.data = src.data;
    dst.grad.clear();
}

}  // namespace

const Tensor& Checkpoint::block(const std::string& name) const {
    for (const auto& [n, t] : blocks) {
        if (n == name) {
            return t;
        }
    }
    throw CheckpointError("checkpoint has no block " + name);
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& b : blocks) {
        if (b.first == name) {
            return true;
        }
    }
    return false;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    // Write beside the target and rename so a crash never leaves a torn file.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw CheckpointError("cannot write checkpoint " + tmp);
        }
        out.write(kMagic, sizeof kMagic);
        put<std::uint32_t>(out, kCheckpointVersion);
        put<std::uint64_t>(out, ckpt.config_hash);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.blocks.size()));
        for (const auto& [name, t] : ckpt.blocks) {
            put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<std::uint64_t>(out, t.rows());
            put<std::uint64_t>(out, t.cols());
            for (double x : t.data) {
                put<double>(out, x);
            }
        }
        if (!out) {
            throw CheckpointError("failed writing checkpoint " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path, std::uint64_t expected_hash,
                           bool allow_mismatch) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint " + path);
    }
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw CheckpointError(path + " is not a checkpoint");
    }
    const auto version = get<std::uint32_t>(in, path);
    if (version != kCheckpointVersion) {
        throw CheckpointError(path + " has format version " + std::to_string(version) +
                              ", expected " + std::to_string(kCheckpointVersion));
    }
    Checkpoint ckpt;
    ckpt.config_hash = get<std::uint64_t>(in, path);
    if (ckpt.config_hash != expected_hash && !allow_mismatch) {
        throw CheckpointError(path + " was written under config " + hash_hex(ckpt.config_hash) +
                              ", current config is " + hash_hex(expected_hash));
    }
    const auto n = get<std::uint32_t>(in, path);
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto len = get<std::uint32_t>(in, path);
        if (len > 4096) {
            throw CheckpointError(path + " has a corrupt block name");
        }
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) {
            throw CheckpointError("checkpoint " + path + " is truncated");
        }
        const auto rows = get<std::uint64_t>(in, path);
        const auto cols = get<std::uint64_t>(in, path);
        if (rows == 0 || cols == 0 || rows * cols > (std::uint64_t{1} << 32)) {
            throw CheckpointError(path + " block " + name + " has a corrupt shape");
        }
        std::vector<double> data(rows * cols);
        for (double& x : data) {
            x = get<double>(in, path);
        }
        ckpt.blocks.emplace_back(std::move(name), Tensor({rows, cols}, std::move(data)));
    }
    return ckpt;
}

void add_model(Checkpoint& ckpt, const std::string& prefix, TransformerLM& model) {
    for (auto& [name, t] : model.named_parameters()) {
        Tensor copy({t->rows(), t->cols()}, t->data);
        ckpt.blocks.emplace_back(prefix + "." + name, std::move(copy));
    }
}

void restore_model(const Checkpoint& ckpt, const std::string& prefix, TransformerLM& model) {
    for (auto& [name, t] : model.named_parameters()) {
        const std::string full = prefix + "." + name;
        const Tensor& src = ckpt.block(full);
        if (src.data.size() != t->data.size()) {
            throw CheckpointError("checkpoint block " + full + " has " +
                                  std::to_string(src.data.size()) + " values, expected " +
                                  std::to_string(t->data.size()));
        }
        t->data = src.data;
        t->grad.clear();
    }
}

void add_codebook(Checkpoint& ckpt, const std::string& prefix, const Codebook& cb) {
    ckpt.blocks.emplace_back(prefix + ".templates", cb.templates);
    ckpt.blocks.emplace_back(prefix + ".keys", cb.keys);
    ckpt.blocks.back().second.grad.clear();
    ckpt.blocks[ckpt.blocks.size() - 2].second.grad.clear();
}

void restore_codebook(const Checkpoint& ckpt, const std::string& prefix, Codebook& cb) {
    copy_into(ckpt.block(prefix + ".templates"), cb.templates, prefix + ".templates");
    copy_into(ckpt.block(prefix + ".keys"), cb.keys, prefix + ".keys");
}

}  // namespace durit
