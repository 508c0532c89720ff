#pragma once

#include "repflow/corpus.hpp"
#include "repflow/model.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>

namespace repflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kActivationVersion = 1;

struct Checkpoint {
    Model model;
    Vocab vocab;
    std::optional<Vocab> target_vocab;
};

/// Little-endian "RFCK" file: u32 version, u32-length-prefixed JSON header
/// ({"model", "vocab", "target_vocab"}), then one record per tensor in
/// Params::for_each order (u32 name length, name, u32 rank, u64 dims, f32 data).
void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                     const Vocab* target_vocab = nullptr);

/// Throws CorruptFile on bad magic, truncation or missing tensors, VersionMismatch
/// on an unknown version, and InvalidArgument when `expected` differs from the
/// stored configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);

namespace binio {

void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_i32(std::ostream& os, std::int32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, const float* data, std::size_t n);

std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::int32_t read_i32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
void read_f32(std::istream& is, float* data, std::size_t n);
void read_bytes(std::istream& is, char* data, std::size_t n);

}  // namespace binio

}  // namespace repflow
