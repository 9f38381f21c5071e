#include "spvit/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace spvit {

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  const char* take(std::size_t n) {
    if (remaining() < n) {
      throw FormatError("'" + path_ + "': truncated checkpoint");
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint16_t u16() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(2));
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }

  std::uint64_t u64() {
    std::uint64_t lo = u32();
    std::uint64_t hi = u32();
    return lo | (hi << 32);
  }

  std::uint8_t u8() {
    return static_cast<std::uint8_t>(*take(1));
  }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size())));
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     CheckpointDtype dtype) {
  std::string out;
  out += "SPVT";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor& tensor = params.value(i);
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(tensor.rank()));
    for (auto d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.push_back(static_cast<char>(dtype));
    if (dtype == CheckpointDtype::kF64) {
      for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    } else {
      for (double v : tensor.data()) {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  put_u32(out, crc_of(out));

  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot write '" + path + "'");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("short write to '" + path + "'");
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(file)),
                    std::istreambuf_iterator<char>());

  if (bytes.size() < 12 + 4) {
    throw FormatError("'" + path + "': too short to be a checkpoint");
  }
  const std::string body = bytes.substr(0, bytes.size() - 4);

  Reader in(body, path);
  if (std::memcmp(in.take(4), "SPVT", 4) != 0) {
    throw FormatError("'" + path + "': bad magic, not a checkpoint");
  }
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("'" + path + "': unsupported version " + std::to_string(version));
  }

  // CRC trailer covers everything before it.
  std::uint32_t file_crc = 0;
  {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + bytes.size() - 4);
    file_crc = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) |
               (static_cast<std::uint32_t>(p[3]) << 24);
  }
  if (crc_of(body) != file_crc) {
    throw FormatError("'" + path + "': CRC32 mismatch, refusing to load");
  }

  const std::uint32_t count = in.u32();
  ParamStore params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = in.u16();
    std::string name(in.take(name_len), name_len);
    const std::uint8_t rank = in.u8();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::int64_t>(in.u32());
    const std::uint8_t dtype = in.u8();
    const std::int64_t numel = shape_numel(shape);
    Vec values(static_cast<std::size_t>(numel));
    if (dtype == static_cast<std::uint8_t>(CheckpointDtype::kF64)) {
      for (auto& v : values) v = std::bit_cast<double>(in.u64());
    } else if (dtype == static_cast<std::uint8_t>(CheckpointDtype::kF32)) {
      for (auto& v : values) {
        v = static_cast<double>(std::bit_cast<float>(in.u32()));
      }
    } else {
      throw FormatError("'" + path + "': unknown dtype tag " + std::to_string(dtype));
    }
    params.add(std::move(name), Tensor(std::move(shape), std::move(values),
                                       /*requires_grad=*/true));
  }
  if (in.remaining() != 0) {
    throw FormatError("'" + path + "': trailing bytes after last tensor");
  }
  return params;
}

}  // namespace spvit
