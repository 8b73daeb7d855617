#pragma once

// Binary checkpoints: magic "DURITCKP", u32 format version, u64 config hash,
// u32 block count, then per block a u32 name length, the name, u64 rows,
// u64 cols and rows*cols little-endian doubles. Blocks keep insertion order.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "durit/autodiff.hpp"
#include "durit/codebook.hpp"
#include "durit/model.hpp"

namespace durit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint64_t config_hash = 0;
    std::vector<std::pair<std::string, Tensor>> blocks;

    const Tensor& block(const std::string& name) const;  // throws if absent
    bool has(const std::string& name) const;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Refuses a file whose hash differs from expected_hash unless allow_mismatch.
Checkpoint load_checkpoint(const std::string& path, std::uint64_t expected_hash,
                           bool allow_mismatch = false);

void add_model(Checkpoint& ckpt, const std::string& prefix, TransformerLM& model);
void restore_model(const Checkpoint& ckpt, const std::string& prefix, TransformerLM& model);
void add_codebook(Checkpoint& ckpt, const std::string& prefix, const Codebook& cb);
void restore_codebook(const Checkpoint& ckpt, const std::string& prefix, Codebook& cb);

}  // namespace durit
