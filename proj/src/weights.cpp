#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "vigilnet/errors.hpp"
#include "vigilnet/network.hpp"

namespace vigilnet::net {
namespace {

constexpr char kMagic[4] = {'D', 'S', 'W', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint16_t kMaxNameLen = 4096;
constexpr std::uint8_t kMaxRank = 8;

// All multi-byte fields are little-endian; written on LE hosts as raw bytes.

void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed");
}

template <typename T>
void write_pod(std::ostream& out, T v) {
  write_bytes(out, &v, sizeof(T));
}

void read_bytes(std::istream& in, void* p, std::size_t n,
                const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw TruncatedError(std::string("file ends inside ") + what);
  }
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v;
  read_bytes(in, &v, sizeof(T), what);
  return v;
}

std::vector<ParamRef> stored_tensors(const Model& model) {
  // Parameters first, then BN running statistics; collect_refs order.
  Model& m = const_cast<Model&>(model);
  std::vector<ParamRef> refs = m.parameters();
  for (auto& b : m.buffers()) refs.push_back(b);
  return refs;
}

NetworkConfig read_header(std::istream& in) {
  char magic[4];
  read_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw BadMagicError("not a weight file (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kVersion) {
    throw BadVersionError("unsupported weight format version " +
                          std::to_string(version));
  }
  const auto variant_id = read_pod<std::uint8_t>(in, "variant");
  if (variant_id > 3) {
    throw ManifestMismatchError("unknown variant id " +
                                std::to_string(variant_id));
  }
  NetworkConfig cfg;
  cfg.variant = static_cast<Variant>(variant_id);
  cfg.depth_multiplier = read_pod<double>(in, "multiplier");
  cfg.frames = static_cast<int>(read_pod<std::uint32_t>(in, "frames"));
  cfg.spatial = static_cast<int>(read_pod<std::uint32_t>(in, "spatial"));
  cfg.classes = static_cast<int>(read_pod<std::uint32_t>(in, "classes"));
  return cfg;
}

void read_tensors_into(Model& model, std::istream& in) {
  std::map<std::string, Tensor*> expected;
  for (const auto& r : stored_tensors(model)) expected[r.name] = r.tensor;
  const auto count = read_pod<std::uint32_t>(in, "tensor count");
  if (count != expected.size()) {
    throw ManifestMismatchError(
        "weight file holds " + std::to_string(count) + " tensors, model has " +
        std::to_string(expected.size()));
  }
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint16_t>(in, "tensor name length");
    if (name_len == 0 || name_len > kMaxNameLen) {
      throw CorruptRecordError("implausible tensor name length " +
                               std::to_string(name_len));
    }
    std::string name(name_len, '\0');
    read_bytes(in, name.data(), name_len, "tensor name");
    const auto rank = read_pod<std::uint8_t>(in, "tensor rank");
    if (rank == 0 || rank > kMaxRank) {
      throw CorruptRecordError("implausible tensor rank " +
                               std::to_string(rank));
    }
    std::vector<int> dims(rank);
    std::size_t size = 1;
    for (int d = 0; d < rank; ++d) {
      const auto e = read_pod<std::uint32_t>(in, "tensor extent");
      if (e == 0 || e > (1u << 24)) {
        throw CorruptRecordError("implausible tensor extent " +
                                 std::to_string(e));
      }
      dims[d] = static_cast<int>(e);
      size *= e;
    }
    auto it = expected.find(name);
    if (it == expected.end()) {
      throw ManifestMismatchError("unexpected tensor \"" + name + "\"");
    }
    if (!seen.insert(name).second) {
      throw ManifestMismatchError("duplicate tensor \"" + name + "\"");
    }
    Tensor* dst = it->second;
    if (dst->shape() != dims) {
      throw ManifestMismatchError(
          "tensor \"" + name + "\" has shape " + Tensor::shape_str(dims) +
          ", model expects " + Tensor::shape_str(dst->shape()));
    }
    read_bytes(in, dst->data(), size * sizeof(float), "tensor data");
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CorruptRecordError("trailing bytes after the last tensor");
  }
}

}  // namespace

void save_weights(const Model& model, const std::string& path) {
  if (model.bn_folded) {
    throw UsageError("folded models are not serializable; fold after loading");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_bytes(out, kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint8_t>(model.config.variant));
  write_pod(out, model.config.depth_multiplier);
  write_pod(out, static_cast<std::uint32_t>(model.config.frames));
  write_pod(out, static_cast<std::uint32_t>(model.config.spatial));
  write_pod(out, static_cast<std::uint32_t>(model.config.classes));
  const auto refs = stored_tensors(model);
  write_pod(out, static_cast<std::uint32_t>(refs.size()));
  for (const auto& r : refs) {
    if (r.name.size() > kMaxNameLen) {
      throw UsageError("tensor name too long: " + r.name);
    }
    write_pod(out, static_cast<std::uint16_t>(r.name.size()));
    write_bytes(out, r.name.data(), r.name.size());
    write_pod(out, static_cast<std::uint8_t>(r.tensor->rank()));
    for (int d = 0; d < r.tensor->rank(); ++d) {
      write_pod(out, static_cast<std::uint32_t>(r.tensor->extent(d)));
    }
    write_bytes(out, r.tensor->data(), r.tensor->size() * sizeof(float));
  }
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

Model load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const NetworkConfig cfg = read_header(in);
  Model m = build_model(cfg, 0);
  read_tensors_into(m, in);
  return m;
}

void load_weights_into(Model& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const NetworkConfig cfg = read_header(in);
  const NetworkConfig& mc = model.config;
  if (cfg.variant != mc.variant || cfg.depth_multiplier != mc.depth_multiplier ||
      cfg.frames != mc.frames || cfg.spatial != mc.spatial ||
      cfg.classes != mc.classes) {
    throw ManifestMismatchError("weight file was saved for " +
                                to_string(cfg.variant) +
                                " with a different configuration");
  }
  read_tensors_into(model, in);
}

}  // namespace vigilnet::net
