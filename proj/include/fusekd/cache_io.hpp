#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fusekd/kv.hpp"
#include "fusekd/matrix.hpp"

namespace fkd {

// On-disk layout (all integers little-endian):
//
//   offset  size      field
//   0       4         magic "RKDC"
//   4       4         u32 format version (1)
//   8       4         u32 dtype code (1 = f32, 2 = i64)
//   12      4         u32 dimension count (1..8)
//   16      8*ndim    u64 dimensions, each >= 1
//   ...     payload   row-major scalars, little-endian
//
// The role of a tensor is not stored; it is carried by the file name
// (`<role>.rkdc`) inside a bundle.
inline constexpr char kTensorMagic[4] = {'R', 'K', 'D', 'C'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::size_t kMaxRank = 8;
inline constexpr const char* kTensorExtension = ".rkdc";
inline constexpr const char* kManifestName = "manifest.txt";

enum class Role {
  teacher_logits,
  clip_prompt_logits,
  clip_logits,
  teacher_features,
  clip_features,
  images,
  labels,
  fused_logits,
  fused_features,
  other,
};

enum class DType : std::uint32_t { f32 = 1, i64 = 2 };

std::string_view to_string(Role role);
std::optional<Role> role_from_string(std::string_view name);
std::size_t dtype_size(DType dtype);

struct CacheTensor {
  Role role = Role::other;
  std::vector<std::uint64_t> shape;
  std::variant<std::vector<float>, std::vector<std::int64_t>> data;

  static CacheTensor f32(Role role, std::vector<std::uint64_t> shape, std::vector<float> values);
  static CacheTensor i64(Role role, std::vector<std::uint64_t> shape,
                         std::vector<std::int64_t> values);
  template <typename T>
  static CacheTensor from_matrix(Role role, const Matrix<T>& m);
  static CacheTensor from_labels(std::span<const std::int64_t> labels);

  DType dtype() const noexcept {
    return std::holds_alternative<std::vector<float>>(data) ? DType::f32 : DType::i64;
  }
  std::size_t element_count() const noexcept;
  std::size_t rank() const noexcept { return shape.size(); }

  const std::vector<float>& floats() const;
  const std::vector<std::int64_t>& ints() const;

  // Throws InvariantViolation when the tensor cannot be written. When
  // `class_count` is given, label values must also lie below it.
  void validate(std::optional<std::int64_t> class_count = std::nullopt) const;

  // Rank-2 f32 tensor as a matrix; rank-1 tensors become a single column.
  Matrix<double> to_matrix() const;

  friend bool operator==(const CacheTensor&, const CacheTensor&) = default;
};

std::vector<std::uint8_t> encode_tensor(const CacheTensor& t);
CacheTensor decode_tensor(std::span<const std::uint8_t> bytes, Role role = Role::other);

void write_tensor(const CacheTensor& t, const std::filesystem::path& path,
                  std::optional<std::int64_t> class_count = std::nullopt);
// The role is inferred from the file stem when it names a known role.
CacheTensor read_tensor(const std::filesystem::path& path);

// Lowercase hex SHA-256 of a file's bytes.
std::string file_sha256(const std::filesystem::path& path);

struct ImageGeometry {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t size() const noexcept { return channels * height * width; }
  friend bool operator==(const ImageGeometry&, const ImageGeometry&) = default;
};

struct BundleManifest {
  std::size_t sample_count = 0;
  std::size_t class_count = 0;
  std::size_t prompt_count = 0;
  std::size_t teacher_feature_dim = 0;
  std::size_t clip_feature_dim = 0;
  double clip_temperature = 100.0;
  std::vector<std::string> class_names;
  std::optional<ImageGeometry> image;
  // file name -> lowercase hex sha256
  std::map<std::string, std::string> checksums;

  KeyValueFile to_kv() const;
  static BundleManifest from_kv(const KeyValueFile& kv);
};

// Writes a tensor into a bundle directory as `<role>.rkdc` and records its checksum.
void add_to_bundle(BundleManifest& manifest, const std::filesystem::path& dir,
                   const CacheTensor& t, const std::string& name = {});
void write_manifest(const BundleManifest& manifest, const std::filesystem::path& dir);

// Parses the manifest and checks every referenced file: existence, checksum,
// and cross-file shape consistency.
BundleManifest validate_bundle(const std::filesystem::path& dir);

}  // namespace fkd
