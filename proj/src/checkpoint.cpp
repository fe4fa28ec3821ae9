#include "vg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "vg/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace vg {

namespace {

constexpr char kMagic[] = "VLTVG1";
constexpr std::size_t kMagicLen = 6;

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path, const char* what) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("'" + path + "': truncated while reading " + what);
    return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out.write(kMagic, kMagicLen);
    for (const auto& e : entries) {
        if (e.dtype > 1) throw FormatError("entry '" + e.name + "': unknown dtype tag");
        const std::size_t n = e.numel();
        if ((e.dtype == 0 && e.f32.size() != n) || (e.dtype == 1 && e.f64.size() != n))
            throw FormatError("entry '" + e.name + "': dims do not match value count");
        put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<std::uint8_t>(out, e.dtype);
        put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dims.size()));
        for (int d : e.dims) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        if (e.dtype == 0)
            out.write(reinterpret_cast<const char*>(e.f32.data()), static_cast<std::streamsize>(n * sizeof(float)));
        else
            out.write(reinterpret_cast<const char*>(e.f64.data()), static_cast<std::streamsize>(n * sizeof(double)));
    }
    if (!out) throw FormatError("write to '" + path + "' failed");
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'");
    char magic[kMagicLen];
    in.read(magic, kMagicLen);
    if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
        throw FormatError("'" + path + "' is not a VLTVG1 checkpoint");

    std::vector<CheckpointEntry> entries;
    while (true) {
        std::uint32_t name_len;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (in.eof()) break;
        if (!in) throw FormatError("'" + path + "': truncated entry header");
        CheckpointEntry e;
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        if (!in) throw FormatError("'" + path + "': truncated name");
        e.dtype = get<std::uint8_t>(in, path, "dtype");
        if (e.dtype > 1) throw FormatError("'" + path + "': unknown dtype tag for '" + e.name + "'");
        const auto rank = get<std::uint8_t>(in, path, "rank");
        e.dims.resize(rank);
        for (int i = 0; i < rank; ++i) e.dims[static_cast<std::size_t>(i)] = static_cast<int>(get<std::uint32_t>(in, path, "dims"));
        const std::size_t n = e.numel();
        if (e.dtype == 0) {
            e.f32.resize(n);
            in.read(reinterpret_cast<char*>(e.f32.data()), static_cast<std::streamsize>(n * sizeof(float)));
        } else {
            e.f64.resize(n);
            in.read(reinterpret_cast<char*>(e.f64.data()), static_cast<std::streamsize>(n * sizeof(double)));
        }
        if (!in) throw FormatError("'" + path + "': truncated values for '" + e.name + "'");
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace vg
