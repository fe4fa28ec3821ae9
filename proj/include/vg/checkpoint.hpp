#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vg {

// Flat named-tensor container. The file starts with the magic "VLTVG1";
// each entry is a length-prefixed UTF-8 name, a dtype tag (0 = f32,
// 1 = f64), a rank byte, u32 dims, then the raw little-endian values.
struct CheckpointEntry {
    std::string name;
    std::uint8_t dtype = 0;
    std::vector<int> dims;
    std::vector<float> f32;
    std::vector<double> f64;

    std::size_t numel() const {
        std::size_t n = 1;
        for (int d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }
};

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

}  // namespace vg
