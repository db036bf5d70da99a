#include "covnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace covnet {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  const char* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(CheckpointErrorCode::kTruncated,
                            std::string("checkpoint truncated while reading ") + what);
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint64_t uint(std::size_t width, const char* what) {
    const char* p = take(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    }
    return v;
  }

  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorCode::kIo, "cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

template <typename T>
std::string checkpoint_bytes(const ModelGraph<T>& model) {
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string header = model.config.canonical_text();
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_u64(out, fnv1a64(header));
  put_u32(out, static_cast<std::uint32_t>(model.params.size()));
  for (const auto& p : model.params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (auto e : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (T v : p.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

template <typename T>
void save_checkpoint(const ModelGraph<T>& model, const std::string& path) {
  const std::string bytes = checkpoint_bytes(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrorCode::kIo, "cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrorCode::kIo, "write failed for " + path);
}

template <typename T>
ModelGraph<T> parse_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  const char* magic = r.take(4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrorCode::kBadMagic, "not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorCode::kVersionMismatch,
                          "checkpoint format version " + std::to_string(version) +
                              " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t header_len = r.u32("header length");
  const std::string header(r.take(header_len, "header"), header_len);
  const std::uint64_t stored_hash = r.u64("header hash");
  if (stored_hash != fnv1a64(header)) {
    throw CheckpointError(CheckpointErrorCode::kConfigHashMismatch,
                          "checkpoint header does not match its stored hash");
  }
  ArchConfig cfg;
  try {
    cfg = ArchConfig::from_text(header);
  } catch (const DataError& e) {
    throw CheckpointError(CheckpointErrorCode::kLayoutMismatch, e.what());
  }
  if (cfg.hash() != stored_hash) {
    throw CheckpointError(CheckpointErrorCode::kConfigHashMismatch,
                          "checkpoint header is not in canonical form");
  }
  ModelGraph<T> model;
  try {
    model = build_model<T>(cfg, 0);
  } catch (const Error& e) {
    throw CheckpointError(CheckpointErrorCode::kLayoutMismatch,
                          std::string("checkpoint architecture is invalid: ") + e.what());
  }
  const std::uint32_t count = r.u32("tensor count");
  if (count != model.params.size()) {
    throw CheckpointError(CheckpointErrorCode::kLayoutMismatch,
                          "checkpoint holds " + std::to_string(count) + " tensors, architecture has " +
                              std::to_string(model.params.size()));
  }
  for (auto& p : model.params) {
    const std::uint32_t name_len = r.u32("tensor name length");
    const std::string name(r.take(name_len, "tensor name"), name_len);
    if (name != p.name) {
      throw CheckpointError(CheckpointErrorCode::kLayoutMismatch,
                            "expected tensor '" + p.name + "', found '" + name + "'");
    }
    const std::uint32_t rank = r.u32("tensor rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank && i < 8; ++i) shape.push_back(r.u32("tensor extent"));
    if (shape != p.value.shape()) {
      throw CheckpointError(CheckpointErrorCode::kLayoutMismatch,
                            "tensor '" + name + "' has shape " + shape_string(shape) +
                                ", expected " + shape_string(p.value.shape()));
    }
    for (T& v : p.value.data()) v = static_cast<T>(std::bit_cast<float>(r.u32("tensor data")));
  }
  if (!r.done()) {
    throw CheckpointError(CheckpointErrorCode::kLayoutMismatch, "trailing bytes after last tensor");
  }
  return model;
}

template <typename T>
ModelGraph<T> load_checkpoint(const std::string& path) {
  return parse_checkpoint<T>(read_file(path));
}

template <typename T>
ModelGraph<T> load_checkpoint(const std::string& path, const ArchConfig& expected) {
  ModelGraph<T> model = load_checkpoint<T>(path);
  if (model.config.hash() != expected.hash()) {
    throw CheckpointError(CheckpointErrorCode::kConfigHashMismatch,
                          "checkpoint " + path + " was saved for a different architecture config");
  }
  return model;
}

#define COVNET_INSTANTIATE_CKPT(T)                                                  \
  template std::string checkpoint_bytes(const ModelGraph<T>&);                      \
  template void save_checkpoint(const ModelGraph<T>&, const std::string&);          \
  template ModelGraph<T> parse_checkpoint(const std::string&);                      \
  template ModelGraph<T> load_checkpoint(const std::string&);                       \
  template ModelGraph<T> load_checkpoint(const std::string&, const ArchConfig&);

COVNET_INSTANTIATE_CKPT(float)
COVNET_INSTANTIATE_CKPT(double)

#undef COVNET_INSTANTIATE_CKPT

}  // namespace covnet
