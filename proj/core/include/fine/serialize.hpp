#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fine/diffusion.hpp"
#include "fine/dit.hpp"
#include "fine/factorized.hpp"
#include "fine/tensor.hpp"

namespace fine {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "FINE";
inline constexpr std::string_view kLearngeneMagic = "LGNE";

using MetaList = std::vector<std::pair<std::string, std::string>>;

// Self-describing tensor container shared by checkpoints and learngenes:
//   magic[4] | u32 version | u64 header_len | header text | payload | u32 crc32(payload)
// The header is UTF-8 "key = value" lines; each tensor has a line
//   tensor = <name> f64 <d0,d1,..> <offset> <length>
// and payload buffers are little-endian f64 in index order.
struct Container {
    std::string magic;
    std::uint32_t version = kFormatVersion;
    MetaList meta;
    std::vector<NamedTensor> tensors;

    std::optional<std::string> get(std::string_view key) const;
    const std::string& require(std::string_view key) const;
    const Tensor* find_tensor(std::string_view name) const;
};

std::string encode_container(const Container& c);
// Verifies magic, version and CRC; unknown header keys are kept but ignored by readers.
Container decode_container(std::string_view bytes, std::string_view expected_magic, const std::string& source);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path, std::string_view expected_magic);
// Reads magic only; returns "" when the file is too short.
std::string peek_magic(const std::filesystem::path& path);

MetaList config_meta(const DiTConfig& config);
DiTConfig config_from_meta(const Container& c);

struct Checkpoint {
    DiTModel model;
    std::optional<EmaModel> ema;
    std::uint64_t seed = 0;
    std::size_t step = 0;
    MetaList info;  // free-form provenance (recipe, dataset, ...)
};

void save_checkpoint(const std::filesystem::path& path, const DiTModel& model, const EmaModel* ema,
                     std::uint64_t seed, std::size_t step, const MetaList& info = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_learngene(const std::filesystem::path& path, const Learngene& learngene);
Learngene load_learngene(const std::filesystem::path& path);
Learngene learngene_from_container(const Container& c, const std::string& source);

}  // namespace fine
