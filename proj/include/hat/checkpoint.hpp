#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "hat/model.hpp"

namespace hat {

// Flat binary container: magic "HATC", format version, JSON-serialized
// ModelConfig (+ trained mode), then named records of
// (name length, name bytes, rank, dims, little-endian f64 payload).
// Round-trips are bit-exact.

std::vector<std::uint8_t> checkpoint_bytes(const HatModel& model, Mode trained_mode);
void save_checkpoint(const HatModel& model, Mode trained_mode, const std::filesystem::path& path);

struct LoadedCheckpoint {
    HatModel model;
    Mode trained_mode = Mode::Both;
};

LoadedCheckpoint checkpoint_from_bytes(std::span<const std::uint8_t> bytes);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hat
