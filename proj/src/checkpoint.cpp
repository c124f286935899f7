#include <bit>
#include <cstring>

#include "otface/io.hpp"

namespace otface::io {

namespace {

constexpr char kMagic[8] = {'O', 'T', 'F', 'A', 'C', 'E', 'C', 'K'};
static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_bytes(const std::string& s) { out_ += s; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                       std::to_string(pos_));
    }
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.put_bytes(std::string(kMagic, sizeof kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = ck.config.to_text();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.put_bytes(cfg);
  w.put<std::uint64_t>(ck.epoch);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& [name, t] : ck.params.entries()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.put<std::uint64_t>(e);
    for (double v : t.data()) w.put<double>(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.get_bytes(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
    throw ParseError("not an otface checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) +
                     " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  const auto cfg_len = r.get<std::uint32_t>("config length");
  ck.config = RunConfig::from_text(r.get_bytes(cfg_len, "config"), "<checkpoint config>");
  ck.epoch = r.get<std::uint64_t>("epoch");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    std::string name = r.get_bytes(name_len, "tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 8) throw ParseError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = r.get<std::uint64_t>("tensor extent");
      shape.push_back(static_cast<std::size_t>(e));
      numel *= static_cast<std::size_t>(e);
    }
    if (numel > r.remaining() / sizeof(double)) {
      throw ParseError("checkpoint truncated inside tensor '" + name + "'");
    }
    std::vector<double> data(numel);
    for (double& v : data) v = r.get<double>("tensor data");
    ck.params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint payload");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  atomic_write(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const fs::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace otface::io
