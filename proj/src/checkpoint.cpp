#include "msl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "msl/digest.hpp"

namespace msl {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'L', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kFormatVersion = 1;

// Fixed little-endian layout so files move between hosts.
void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    }
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    }
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[pos++]);
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

void put_payload(std::string& out, const std::vector<double>& values) {
  for (double v : values) put_f64(out, v);
}

std::vector<double> read_payload(Reader& r, size_t n) {
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = r.f64();
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, kFormatVersion);
  const std::string config_json = ckpt.config.canonical_json();
  put_u64(out, ckpt.config.digest());
  put_u32(out, static_cast<uint32_t>(config_json.size()));
  out += config_json;
  put_u64(out, static_cast<uint64_t>(ckpt.step));
  put_u32(out, static_cast<uint32_t>(ckpt.params.by_name.size()));
  for (const auto& [name, tensor] : ckpt.params.by_name) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    const Shape& shape = tensor.shape();
    put_u32(out, static_cast<uint32_t>(shape.size()));
    for (int64_t e : shape) put_u64(out, static_cast<uint64_t>(e));
    put_payload(out, tensor.values());
  }
  if (ckpt.adam) {
    out.push_back(1);
    put_u64(out, static_cast<uint64_t>(ckpt.adam->step));
    for (const auto& [name, tensor] : ckpt.params.by_name) {
      put_payload(out, ckpt.adam->m.at(name));
      put_payload(out, ckpt.adam->v.at(name));
    }
  } else {
    out.push_back(0);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expect_config) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf};

  const std::string magic = r.bytes(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  }
  const uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  }
  const uint64_t digest = r.u64();
  const uint32_t json_len = r.u32();
  const std::string config_json = r.bytes(json_len);

  Checkpoint ckpt;
  ckpt.config = ModelConfig::from_json(config_json);
  if (ckpt.config.digest() != digest) {
    throw std::runtime_error("checkpoint: config digest mismatch inside '" + path + "'");
  }
  if (expect_config && expect_config->digest() != digest) {
    throw std::runtime_error(
        "checkpoint: model config does not match; expected digest " +
        hex64(expect_config->digest()) + ", file has " + hex64(digest));
  }

  ckpt.step = static_cast<int64_t>(r.u64());
  const uint32_t n_entries = r.u32();
  for (uint32_t i = 0; i < n_entries; ++i) {
    const uint32_t name_len = r.u32();
    const std::string name = r.bytes(name_len);
    const uint32_t rank = r.u32();
    Shape shape;
    size_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<int64_t>(r.u64()));
      if (shape.back() < 1) throw std::runtime_error("checkpoint: bad extent in '" + name + "'");
      numel *= static_cast<size_t>(shape.back());
    }
    ckpt.params.by_name[name] =
        Tensor::from(shape, read_payload(r, numel)).set_requires_grad(true);
  }

  const uint8_t has_adam = r.u8();
  if (has_adam) {
    AdamState adam;
    adam.step = static_cast<int64_t>(r.u64());
    for (const auto& [name, tensor] : ckpt.params.by_name) {
      const size_t numel = static_cast<size_t>(tensor.numel());
      adam.m[name] = read_payload(r, numel);
      adam.v[name] = read_payload(r, numel);
    }
    ckpt.adam = std::move(adam);
  }
  if (r.pos != buf.size()) {
    throw std::runtime_error("checkpoint: trailing bytes in '" + path + "'");
  }
  return ckpt;
}

}  // namespace msl
