#include "eegvlm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "eegvlm/error.hpp"

namespace eegvlm::checkpoint {

namespace {

constexpr char kMagic[8] = {'E', 'E', 'G', 'V', 'L', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));  // host is little-endian
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error(ErrorCode::IoFailure, "truncated checkpoint");
  }
  const std::uint8_t* here() const { return bytes_.data() + pos_; }
  void skip(std::size_t n) { need(n); pos_ += n; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedArray* Archive::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void Archive::add(const nn::Param& p) {
  NamedArray a;
  a.name = p.name;
  a.shape = p.shape;
  a.data.assign(p.value.begin(), p.value.end());
  arrays.push_back(std::move(a));
}

void Archive::restore(nn::Param& p) const {
  const NamedArray* a = find(p.name);
  if (a == nullptr) throw Error(ErrorCode::MissingUpstream, "checkpoint lacks array " + p.name);
  if (a->shape != p.shape) throw Error(ErrorCode::ShapeMismatch, "checkpoint shape differs for " + p.name);
  p.value.assign(a->data.begin(), a->data.end());
}

std::vector<std::uint8_t> serialize(const Archive& archive) {
  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  const std::string manifest = archive.manifest.dump();
  put<std::uint64_t>(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.arrays.size()));
  for (const auto& a : archive.arrays) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (float f : a.data) put<float>(out, f);
  }
  return out;
}

Archive deserialize(std::span<const std::uint8_t> bytes) {
  Cursor c(bytes);
  if (c.text(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw Error(ErrorCode::IoFailure, "not a checkpoint archive");
  }
  if (c.get<std::uint32_t>() != kVersion) throw Error(ErrorCode::IoFailure, "unsupported checkpoint version");
  Archive archive;
  const auto manifest_len = c.get<std::uint64_t>();
  archive.manifest = nlohmann::json::parse(c.text(manifest_len));
  const auto count = c.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = c.text(c.get<std::uint32_t>());
    const auto ndim = c.get<std::uint32_t>();
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      a.shape.push_back(static_cast<int>(c.get<std::uint64_t>()));
      n *= static_cast<std::size_t>(a.shape.back());
    }
    c.need(n * sizeof(float));
    a.data.resize(n);
    std::memcpy(a.data.data(), c.here(), n * sizeof(float));
    c.skip(n * sizeof(float));
    archive.arrays.push_back(std::move(a));
  }
  return archive;
}

void save(const std::filesystem::path& path, const Archive& archive) {
  const auto bytes = serialize(archive);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

Archive load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingUpstream, "missing checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace eegvlm::checkpoint
