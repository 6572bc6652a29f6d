#include "aquadiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "aquadiff/image.hpp"

namespace aquadiff {

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void pod(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void text(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string where) : is_(is), where_(std::move(where)) {}
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is_) fail("truncated file");
    return v;
  }
  std::string text(std::uint32_t limit = 1u << 24) {
    const auto n = pod<std::uint32_t>();
    if (n > limit) fail("string length " + std::to_string(n) + " out of range");
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (!is_) fail("truncated file");
    return s;
  }
  [[noreturn]] void fail(const std::string& msg) const { throw IoError(where_ + ": " + msg); }

 private:
  std::istream& is_;
  std::string where_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    Writer w(os);
    os.write(kCheckpointMagic, 4);
    w.pod(kCheckpointVersion);
    w.pod(fnv1a64(ckpt.config_text));
    w.text(ckpt.config_text);
    w.pod(ckpt.step);
    w.text(ckpt.rng_state);
    w.pod(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const NamedTensor& t : ckpt.tensors) {
      if (ad::shape_size(t.shape) != t.values.size()) {
        throw DimensionError("checkpoint: tensor " + t.name + " shape does not match its data");
      }
      w.text(t.name);
      w.pod(static_cast<std::uint32_t>(t.shape.size()));
      for (int d : t.shape) w.pod(static_cast<std::uint32_t>(d));
      for (double v : t.values) w.pod(static_cast<float>(v));
    }
    if (!os) throw IoError("write failed for checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  Reader r(is, "checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) r.fail("bad magic");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto digest = r.pod<std::uint64_t>();
  Checkpoint c;
  c.config_text = r.text();
  if (fnv1a64(c.config_text) != digest) r.fail("config digest mismatch");
  c.step = r.pod<std::uint64_t>();
  c.rng_state = r.text();
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.text(4096);
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) r.fail("tensor " + t.name + " has rank " + std::to_string(rank));
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<int>(r.pod<std::uint32_t>()));
    const std::size_t n = ad::shape_size(t.shape);
    if (n > (1u << 28)) r.fail("tensor " + t.name + " too large");
    t.values.resize(n);
    for (double& v : t.values) v = r.pod<float>();
    c.tensors.push_back(std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  return c;
}

}  // namespace aquadiff
