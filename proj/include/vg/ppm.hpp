#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vg {

struct PpmImage {
    int width = 0, height = 0;
    std::vector<std::uint8_t> rgb;  // interleaved, row-major
};

// Binary P6, max value 255.
void write_ppm(const std::string& path, const PpmImage& image);
PpmImage read_ppm(const std::string& path);

}  // namespace vg
