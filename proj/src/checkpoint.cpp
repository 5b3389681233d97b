#include "gaitforge/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace gaitforge {
namespace {

constexpr char kMagic[8] = {'G', 'F', 'C', 'K', 'P', 'T', '1', '\0'};

template <typename T>
void write_le(std::ostream& os, T v) {
  // Build runs little-endian only (x86); raw write is the LE layout.
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  check(static_cast<bool>(is), "checkpoint: truncated file");
  return v;
}

}  // namespace

template <typename S>
void save_checkpoint(const std::string& path, const NamedTensors<S>& entries) {
  std::ofstream os(path, std::ios::binary);
  check(static_cast<bool>(os), "checkpoint: cannot open for write: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_le<uint32_t>(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    check(t.defined(), "checkpoint: undefined tensor '" + name + "'");
    check(t.rank() <= 255, "checkpoint: rank too large");
    write_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<uint8_t>(os, static_cast<uint8_t>(dtype_of<S>()));
    write_le<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (int64_t d : t.shape()) write_le<uint64_t>(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(S) * t.numel()));
  }
  check(static_cast<bool>(os), "checkpoint: write failure: " + path);
}

template <typename S>
NamedTensors<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(static_cast<bool>(is), "checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  check(static_cast<bool>(is) && std::memcmp(magic, kMagic, 8) == 0,
        "checkpoint: bad magic in " + path);
  uint32_t count = read_le<uint32_t>(is);
  NamedTensors<S> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_le<uint32_t>(is);
    check(name_len <= 4096, "checkpoint: unreasonable name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    check(static_cast<bool>(is), "checkpoint: truncated name");
    uint8_t dtype = read_le<uint8_t>(is);
    check(dtype == static_cast<uint8_t>(dtype_of<S>()),
          "checkpoint: dtype mismatch for '" + name + "'");
    uint8_t rank = read_le<uint8_t>(is);
    check(rank <= 8, "checkpoint: unreasonable rank");
    Shape shape(rank);
    for (int r = 0; r < rank; ++r)
      shape[r] = static_cast<int64_t>(read_le<uint64_t>(is));
    Tensor<S> t = Tensor<S>::zeros(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(S) * t.numel()));
    check(static_cast<bool>(is), "checkpoint: truncated payload for '" + name + "'");
    entries.emplace_back(std::move(name), std::move(t));
  }
  return entries;
}

template void save_checkpoint<float>(const std::string&,
                                     const NamedTensors<float>&);
template void save_checkpoint<double>(const std::string&,
                                      const NamedTensors<double>&);
template NamedTensors<float> load_checkpoint<float>(const std::string&);
template NamedTensors<double> load_checkpoint<double>(const std::string&);

}  // namespace gaitforge
