#include "vg/ppm.hpp"

#include <fstream>

#include "vg/error.hpp"

namespace vg {

void write_ppm(const std::string& path, const PpmImage& image) {
    if (image.rgb.size() != static_cast<std::size_t>(3) * image.width * image.height)
        throw ContractError("write_ppm: pixel buffer does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
    if (!out) throw FormatError("write to '" + path + "' failed");
}

PpmImage read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    std::string magic;
    int width, height, maxval;
    in >> magic >> width >> height >> maxval;
    if (!in || magic != "P6" || maxval != 255)
        throw FormatError("'" + path + "' is not a maxval-255 P6 file");
    in.get();  // single whitespace after the header
    PpmImage img;
    img.width = width;
    img.height = height;
    img.rgb.resize(static_cast<std::size_t>(3) * width * height);
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!in) throw FormatError("'" + path + "': truncated pixel data");
    return img;
}

}  // namespace vg
