#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "automix/errors.hpp"
#include "automix/models.hpp"

namespace automix {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      value |= static_cast<T>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw LengthError("checkpoint truncated at offset " + std::to_string(pos_) +
                        " (need " + std::to_string(n) + " more bytes)");
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& tensors) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
    for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  std::string magic = r.get_string(sizeof(kCheckpointMagic));
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("checkpoint: bad magic at offset 0");
  }
  auto version = r.get_le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  auto count = r.get_le<std::uint32_t>();
  ParamSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = r.get_le<std::uint32_t>();
    std::string name = r.get_string(name_len);
    auto rank = r.get_le<std::uint32_t>();
    if (rank > 8) {
      throw FormatError("checkpoint: implausible rank " + std::to_string(rank) +
                        " for '" + name + "' at offset " + std::to_string(r.pos()));
    }
    Shape shape(rank);
    for (auto& e : shape) e = r.get_le<std::uint64_t>();
    const std::size_t n = numel(shape);
    if (n > bytes.size()) {
      throw LengthError("checkpoint: record '" + name + "' larger than file");
    }
    std::vector<double> values(n);
    for (auto& v : values) v = std::bit_cast<double>(r.get_le<std::uint64_t>());
    out.set(name, Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) {
    throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.pos()));
  }
  return out;
}

void write_checkpoint(const std::string& path, const ParamSet& tensors) {
  auto bytes = encode_checkpoint(tensors);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing '" + path + "'");
}

ParamSet read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace automix
