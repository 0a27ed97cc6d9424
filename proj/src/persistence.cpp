#include "flowseg/persistence.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

namespace flowseg {

namespace fs = std::filesystem;

namespace {

constexpr char kVolumeMagic[4] = {'F', 'S', 'V', 'L'};
constexpr char kCheckpointMagic[4] = {'F', 'S', 'G', '1'};

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    const auto v = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }
  std::size_t size() const { return out_.size(); }
  const std::uint8_t* data() const { return out_.data(); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::string what) : b_(b), what_(std::move(what)) {}

  bool at_end() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t pos() const { return pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError(what_ + ": truncated payload");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(v);
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* here() const { return b_.data() + pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

// Multiplies extents, failing on overflow of the float payload size.
std::uint64_t checked_count(const std::vector<std::uint64_t>& dims, const std::string& what) {
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d == 0) throw FormatError(what + ": zero extent");
    if (n > std::numeric_limits<std::uint64_t>::max() / 4 / d) throw FormatError(what + ": dim overflow");
    n *= d;
  }
  return n;
}

}  // namespace

std::uint64_t fnv1a64(const void* bytes, std::size_t len) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* b = static_cast<const std::uint8_t*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> encode_volume(const Volume& v) {
  if (static_cast<std::int64_t>(v.values.size()) != v.size()) throw FormatError("encode_volume: values do not match dims");
  ByteWriter w;
  w.raw(kVolumeMagic, 4);
  for (auto d : v.dims) w.u64(static_cast<std::uint64_t>(d));
  for (auto s : v.spacing) w.f32(s);
  for (float x : v.values) w.f32(x);
  return w.take();
}

Volume decode_volume(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "volume");
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kVolumeMagic, 4) != 0) throw FormatError("volume: bad magic");
  r.str(4);
  std::vector<std::uint64_t> dims = {r.u64(), r.u64(), r.u64()};
  const std::uint64_t n = checked_count(dims, "volume");
  if (n > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) throw FormatError("volume: dim overflow");
  Volume v;
  for (int a = 0; a < 3; ++a) v.dims[a] = static_cast<std::int64_t>(dims[a]);
  for (int a = 0; a < 3; ++a) v.spacing[a] = r.f32();
  if (r.remaining() != n * 4) {
    throw FormatError(r.remaining() < n * 4 ? "volume: truncated payload" : "volume: trailing bytes after payload");
  }
  v.values.resize(static_cast<std::size_t>(n));
  for (auto& x : v.values) x = r.f32();
  return v;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_volume(const fs::path& path, const Volume& v) { write_file(path, encode_volume(v)); }

Volume read_volume(const fs::path& path) { return decode_volume(read_file(path)); }

std::vector<std::uint8_t> encode_checkpoint(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::set<std::string> seen;
  ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  for (const auto& [name, t] : tensors) {
    if (!seen.insert(name).second) throw FormatError("checkpoint: duplicate tensor name " + name);
    w.u64(name.size());
    w.raw(name.data(), name.size());
    w.u64(t.rank());
    for (auto d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    const std::size_t start = w.size();
    for (float x : t.data()) w.f32(x);
    w.u64(fnv1a64(w.data() + start, w.size() - start));
  }
  return w.take();
}

NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  ByteReader r(bytes, "checkpoint");
  r.str(4);
  NamedTensors out;
  while (!r.at_end()) {
    const std::uint64_t name_len = r.u64();
    if (name_len > r.remaining()) throw FormatError("checkpoint: truncated payload");
    std::string name = r.str(static_cast<std::size_t>(name_len));
    const std::uint64_t rank = r.u64();
    if (rank == 0 || rank > 16) throw FormatError("checkpoint: implausible rank for " + name);
    std::vector<std::uint64_t> dims(static_cast<std::size_t>(rank));
    for (auto& d : dims) d = r.u64();
    const std::uint64_t n = checked_count(dims, "checkpoint");
    r.need(static_cast<std::size_t>(n * 4 + 8));
    const std::uint64_t expected = fnv1a64(r.here(), static_cast<std::size_t>(n * 4));
    std::vector<float> data(static_cast<std::size_t>(n));
    for (auto& x : data) x = r.f32();
    if (r.u64() != expected) throw FormatError("checkpoint: checksum mismatch for " + name);
    Shape shape(dims.begin(), dims.end());
    if (!out.emplace(name, Tensor(shape, std::move(data))).second) {
      throw FormatError("checkpoint: duplicate tensor name " + name);
    }
  }
  return out;
}

void write_checkpoint(const fs::path& path, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  write_file(path, encode_checkpoint(tensors));
}

void write_checkpoint(const fs::path& path, const NamedTensors& tensors) {
  write_checkpoint(path, std::vector<std::pair<std::string, Tensor>>(tensors.begin(), tensors.end()));
}

NamedTensors read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

const Tensor& checkpoint_get(const NamedTensors& ckpt, const std::string& key) {
  auto it = ckpt.find(key);
  if (it == ckpt.end()) throw MissingArtifact("checkpoint has no tensor named " + key);
  return it->second;
}

const ManifestEntry& Manifest::entry(std::int64_t id) const {
  for (const auto& e : entries) {
    if (e.id == id) return e;
  }
  throw MissingArtifact("manifest has no volume with id " + std::to_string(id));
}

std::string manifest_to_json(const Manifest& m) {
  nlohmann::ordered_json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["folds"] = m.folds;
  j["volumes"] = nlohmann::ordered_json::array();
  for (const auto& e : m.entries) {
    nlohmann::ordered_json v;
    v["id"] = e.id;
    v["image"] = e.image;
    v["mask"] = e.mask;
    v["seed"] = e.seed;
    v["fold"] = e.fold;
    v["nodules"] = e.nodule_count;
    v["slice_labels"] = e.slice_labels;
    j["volumes"].push_back(std::move(v));
  }
  return j.dump(2) + "\n";
}

Manifest manifest_from_json(const std::string& text) {
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.folds = j.at("folds").get<int>();
    for (const auto& v : j.at("volumes")) {
      ManifestEntry e;
      e.id = v.at("id").get<std::int64_t>();
      e.image = v.at("image").get<std::string>();
      e.mask = v.at("mask").get<std::string>();
      e.seed = v.at("seed").get<std::uint64_t>();
      e.fold = v.at("fold").get<int>();
      e.nodule_count = v.at("nodules").get<int>();
      e.slice_labels = v.at("slice_labels").get<std::vector<int>>();
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("manifest: ") + ex.what());
  }
  std::set<std::int64_t> ids;
  for (const auto& e : m.entries) {
    if (!ids.insert(e.id).second) throw FormatError("manifest: duplicate volume id " + std::to_string(e.id));
  }
  return m;
}

void write_manifest(const fs::path& path, const Manifest& m) { write_text(path, manifest_to_json(m)); }

Manifest read_manifest(const fs::path& path) {
  const auto bytes = read_file(path);
  Manifest m = manifest_from_json(std::string(bytes.begin(), bytes.end()));
  const fs::path dir = path.parent_path();
  for (const auto& e : m.entries) {
    for (const auto& rel : {e.image, e.mask}) {
      if (!fs::exists(dir / rel)) throw MissingArtifact("manifest references missing file " + (dir / rel).string());
    }
  }
  return m;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw std::invalid_argument("csv: row has wrong number of cells");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) text_ += ',';
    text_ += cells[i];
  }
  text_ += '\n';
}

std::string fmt_float(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

void write_pgm(const fs::path& path, std::int64_t width, std::int64_t height, const std::vector<std::uint8_t>& pixels) {
  if (static_cast<std::int64_t>(pixels.size()) != width * height) throw std::invalid_argument("pgm: pixel count mismatch");
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_file(path, bytes);
}

}  // namespace flowseg
