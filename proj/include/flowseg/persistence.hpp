#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowseg/phantom.hpp"
#include "flowseg/tensor.hpp"
#include "flowseg/volume.hpp"

namespace flowseg {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a required input file or checkpoint is absent.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Volume container "FSVL":
//   magic[4] | dims 3 x u64 LE | spacing 3 x f32 LE | voxels f32 LE (row-major)
inline constexpr std::size_t kVolumeHeaderBytes = 4 + 3 * 8 + 3 * 4;

std::vector<std::uint8_t> encode_volume(const Volume& v);
Volume decode_volume(const std::vector<std::uint8_t>& bytes);
void write_volume(const std::filesystem::path& path, const Volume& v);
Volume read_volume(const std::filesystem::path& path);

// Checkpoint container "FSG1": the magic, then zero or more records until EOF:
//   name_len u64 | name bytes (UTF-8) | rank u64 | dims rank x u64 |
//   payload f32 LE | payload checksum u64 (FNV-1a 64 over payload bytes)
using NamedTensors = std::map<std::string, Tensor>;

std::uint64_t fnv1a64(const void* bytes, std::size_t len);

std::vector<std::uint8_t> encode_checkpoint(const std::vector<std::pair<std::string, Tensor>>& tensors);
NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const std::filesystem::path& path, const std::vector<std::pair<std::string, Tensor>>& tensors);
void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::filesystem::path& path);
/// Typed lookup: throws MissingArtifact naming the key.
const Tensor& checkpoint_get(const NamedTensors& ckpt, const std::string& key);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

struct ManifestEntry {
  std::int64_t id = 0;
  std::string image;  ///< relative to the manifest directory
  std::string mask;
  std::uint64_t seed = 0;
  std::vector<int> slice_labels;
  int fold = 0;
  int nodule_count = 0;
};

struct Manifest {
  int version = 1;
  std::uint64_t seed = 0;
  int folds = 3;
  std::vector<ManifestEntry> entries;

  const ManifestEntry& entry(std::int64_t id) const;
};

std::string manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const std::string& text);
void write_manifest(const std::filesystem::path& path, const Manifest& m);
/// Parses and checks that ids are unique and every referenced file exists.
Manifest read_manifest(const std::filesystem::path& path);

/// Minimal CSV builder: header row plus data rows, "\n" line endings.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void row(const std::vector<std::string>& cells);
  std::string str() const { return text_; }
  void save(const std::filesystem::path& path) const { write_text(path, text_); }

 private:
  std::size_t columns_;
  std::string text_;
};

/// Fixed-precision decimal used in every CSV so reruns are byte-identical.
std::string fmt_float(double v, int precision = 6);

/// Binary PGM (P5) with one byte per pixel.
void write_pgm(const std::filesystem::path& path, std::int64_t width, std::int64_t height,
               const std::vector<std::uint8_t>& pixels);

}  // namespace flowseg
