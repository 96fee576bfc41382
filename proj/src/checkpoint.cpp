#include "pointdg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pointdg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as native little-endian doubles");

namespace {

constexpr char kMagic[4] = {'P', 'D', 'G', 'M'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kCheckpointVersion);
    write_pod<std::uint64_t>(os, tensors.size());
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(t.dim(i)));
        write_pod<std::uint64_t>(os, offset);
        offset += static_cast<std::uint64_t>(t.numel()) * sizeof(double);
    }
    for (const auto& [name, t] : tensors)
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.numel()) * static_cast<std::streamsize>(sizeof(double)));
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    const auto version = read_pod<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unknown format version " + std::to_string(version));
    const auto count = read_pod<std::uint64_t>(is);
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Entry e;
        const auto name_len = read_pod<std::uint32_t>(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        const auto ndim = read_pod<std::uint32_t>(is);
        for (std::uint32_t d = 0; d < ndim; ++d)
            e.shape.push_back(static_cast<std::int64_t>(read_pod<std::uint64_t>(is)));
        e.offset = read_pod<std::uint64_t>(is);
        entries.push_back(std::move(e));
    }
    const std::streampos payload_start = is.tellg();
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (const auto& e : entries) {
        const std::int64_t n = shape_numel(e.shape);
        std::vector<double> data(static_cast<std::size_t>(n));
        is.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n) * static_cast<std::streamsize>(sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated payload in '" + path + "'");
        out.emplace_back(e.name, Tensor::from(std::move(data), e.shape));
    }
    return out;
}

}  // namespace pointdg
