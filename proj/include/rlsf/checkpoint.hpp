#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rlsf/transformer.hpp"
#include "rlsf/vocabulary.hpp"

namespace rlsf {

enum class CheckpointKind : std::uint32_t { Policy = 0, Reward = 1, Critic = 2 };

/// Binary checkpoint container, little-endian, version 1. Field order:
///
///   magic "RLSFCKPT" (8 bytes)
///   u32 version, u32 kind
///   i32 layers, width, heads, context, vocab_size, mlp_width
///   u64 training step
///   str rng state            (str = u32 byte length + bytes)
///   u32 token count, then one str per vocabulary token
///   u64 parameter count, then that many f64
///   u64 head length, then that many f64        (0 for policies)
///   u8 scale present, f64 lo, f64 hi
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    CheckpointKind kind = CheckpointKind::Policy;
    ModelConfig config;
    std::uint64_t step = 0;
    std::string rng_state;
    std::vector<std::string> vocabulary;
    std::vector<double> params;
    std::vector<double> head;
    std::optional<std::pair<double, double>> scale;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws ParseError on bad magic, unknown version, or truncation.
Checkpoint read_checkpoint(const std::filesystem::path& path);

struct Policy;
Checkpoint to_checkpoint(const Policy& policy);
Policy policy_from_checkpoint(const Checkpoint& ckpt);
void save_policy(const std::filesystem::path& path, const Policy& policy);
Policy load_policy(const std::filesystem::path& path);

}  // namespace rlsf
