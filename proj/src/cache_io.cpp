#include "fusekd/cache_io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include "fusekd/error.hpp"

namespace fkd {

namespace {

constexpr std::array<std::pair<Role, std::string_view>, 10> kRoleNames{{
    {Role::teacher_logits, "teacher_logits"},
    {Role::clip_prompt_logits, "clip_prompt_logits"},
    {Role::clip_logits, "clip_logits"},
    {Role::teacher_features, "teacher_features"},
    {Role::clip_features, "clip_features"},
    {Role::images, "images"},
    {Role::labels, "labels"},
    {Role::fused_logits, "fused_logits"},
    {Role::fused_features, "fused_features"},
    {Role::other, "other"},
}};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[off + i]) << (8 * i);
  return v;
}

std::string shape_string(const std::vector<std::uint64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

}  // namespace

std::string_view to_string(Role role) {
  for (const auto& [r, name] : kRoleNames)
    if (r == role) return name;
  return "other";
}

std::optional<Role> role_from_string(std::string_view name) {
  for (const auto& [r, n] : kRoleNames)
    if (n == name) return r;
  return std::nullopt;
}

std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

CacheTensor CacheTensor::f32(Role role, std::vector<std::uint64_t> shape, std::vector<float> values) {
  return CacheTensor{role, std::move(shape), std::move(values)};
}

CacheTensor CacheTensor::i64(Role role, std::vector<std::uint64_t> shape,
                             std::vector<std::int64_t> values) {
  return CacheTensor{role, std::move(shape), std::move(values)};
}

template <typename T>
CacheTensor CacheTensor::from_matrix(Role role, const Matrix<T>& m) {
  std::vector<float> v(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) v[i] = static_cast<float>(m.flat()[i]);
  return f32(role, {m.rows(), m.cols()}, std::move(v));
}
template CacheTensor CacheTensor::from_matrix<float>(Role, const Matrix<float>&);
template CacheTensor CacheTensor::from_matrix<double>(Role, const Matrix<double>&);

CacheTensor CacheTensor::from_labels(std::span<const std::int64_t> labels) {
  return i64(Role::labels, {labels.size()}, {labels.begin(), labels.end()});
}

std::size_t CacheTensor::element_count() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

const std::vector<float>& CacheTensor::floats() const {
  if (auto* v = std::get_if<std::vector<float>>(&data)) return *v;
  throw Error(ErrorCode::InvariantViolation,
              std::string(to_string(role)) + " holds i64 data where f32 was expected");
}

const std::vector<std::int64_t>& CacheTensor::ints() const {
  if (auto* v = std::get_if<std::vector<std::int64_t>>(&data)) return *v;
  throw Error(ErrorCode::InvariantViolation,
              std::string(to_string(role)) + " holds f32 data where i64 was expected");
}

void CacheTensor::validate(std::optional<std::int64_t> class_count) const {
  const std::string name(to_string(role));
  if (shape.empty() || shape.size() > kMaxRank) {
    throw Error(ErrorCode::InvariantViolation, name + ": rank must be 1.." + std::to_string(kMaxRank));
  }
  std::uint64_t count = 1;
  for (auto d : shape) {
    if (d == 0) throw Error(ErrorCode::InvariantViolation, name + ": zero-sized dimension");
    count *= d;
  }
  if (count != element_count()) {
    throw Error(ErrorCode::InvariantViolation, name + ": shape " + shape_string(shape) +
                                                   " does not match " +
                                                   std::to_string(element_count()) + " elements");
  }
  if (role == Role::labels && dtype() != DType::i64) {
    throw Error(ErrorCode::InvariantViolation, "labels must have dtype i64");
  }
  if (dtype() == DType::f32) {
    for (float v : floats())
      if (!std::isfinite(v)) throw Error(ErrorCode::InvariantViolation, name + ": non-finite value");
    if (role == Role::labels) throw Error(ErrorCode::InvariantViolation, "labels must be i64");
  } else {
    if (role != Role::labels && role != Role::other) {
      throw Error(ErrorCode::InvariantViolation, name + " must have dtype f32");
    }
    for (auto v : ints()) {
      if (v < 0 || (class_count && v >= *class_count)) {
        throw Error(ErrorCode::InvariantViolation,
                    name + ": value " + std::to_string(v) + " outside [0, K)");
      }
    }
  }
}

Matrix<double> CacheTensor::to_matrix() const {
  if (rank() != 1 && rank() != 2) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(to_string(role)) + ": expected rank 1 or 2, got " + shape_string(shape));
  }
  const auto& v = floats();
  const std::size_t rows = shape[0];
  const std::size_t cols = rank() == 2 ? shape[1] : 1;
  Matrix<double> m(rows, cols);
  for (std::size_t i = 0; i < v.size(); ++i) m.flat()[i] = v[i];
  return m;
}

std::vector<std::uint8_t> encode_tensor(const CacheTensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + 8 * t.rank() + t.element_count() * dtype_size(t.dtype()));
  out.insert(out.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
  put_u32(out, kTensorVersion);
  put_u32(out, static_cast<std::uint32_t>(t.dtype()));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape) put_u64(out, d);
  if (t.dtype() == DType::f32) {
    for (float v : t.floats()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  } else {
    for (auto v : t.ints()) put_u64(out, static_cast<std::uint64_t>(v));
  }
  return out;
}

CacheTensor decode_tensor(std::span<const std::uint8_t> bytes, Role role) {
  if (bytes.size() < 4 || !std::equal(std::begin(kTensorMagic), std::end(kTensorMagic), bytes.begin())) {
    throw Error(ErrorCode::BadMagic, "missing RKDC magic");
  }
  if (bytes.size() < 16) throw Error(ErrorCode::TruncatedPayload, "header shorter than 16 bytes");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kTensorVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "format version " + std::to_string(version));
  }
  const std::uint32_t code = get_u32(bytes, 8);
  if (code != static_cast<std::uint32_t>(DType::f32) && code != static_cast<std::uint32_t>(DType::i64)) {
    throw Error(ErrorCode::BadHeader, "unknown dtype code " + std::to_string(code));
  }
  const auto dtype = static_cast<DType>(code);
  const std::uint32_t rank = get_u32(bytes, 12);
  if (rank == 0 || rank > kMaxRank) {
    throw Error(ErrorCode::BadHeader, "dimension count " + std::to_string(rank));
  }
  const std::size_t header = 16 + 8 * static_cast<std::size_t>(rank);
  if (bytes.size() < header) throw Error(ErrorCode::TruncatedPayload, "header cut short");

  std::vector<std::uint64_t> shape(rank);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = get_u64(bytes, 16 + 8 * i);
    if (shape[i] == 0) throw Error(ErrorCode::BadHeader, "zero-sized dimension");
    if (count > UINT64_MAX / shape[i] / dtype_size(dtype)) {
      throw Error(ErrorCode::BadHeader, "dimensions overflow: " + shape_string(shape));
    }
    count *= shape[i];
  }
  const std::uint64_t want = count * dtype_size(dtype);
  const std::uint64_t have = bytes.size() - header;
  if (have < want) {
    throw Error(ErrorCode::TruncatedPayload, "payload " + std::to_string(have) + " bytes, shape " +
                                                 shape_string(shape) + " needs " + std::to_string(want));
  }
  if (have > want) {
    throw Error(ErrorCode::BadHeader, std::to_string(have - want) + " trailing bytes after payload");
  }

  CacheTensor t;
  t.role = role;
  t.shape = std::move(shape);
  if (dtype == DType::f32) {
    std::vector<float> v(count);
    for (std::size_t i = 0; i < count; ++i) {
      v[i] = std::bit_cast<float>(get_u32(bytes, header + 4 * i));
      if (!std::isfinite(v[i])) {
        throw Error(ErrorCode::NaNPayload, "non-finite value at element " + std::to_string(i));
      }
    }
    t.data = std::move(v);
  } else {
    std::vector<std::int64_t> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = static_cast<std::int64_t>(get_u64(bytes, header + 8 * i));
    t.data = std::move(v);
  }
  return t;
}

void write_tensor(const CacheTensor& t, const std::filesystem::path& path,
                  std::optional<std::int64_t> class_count) {
  t.validate(class_count);
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

CacheTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto role = role_from_string(path.stem().string()).value_or(Role::other);
  try {
    return decode_tensor(bytes, role);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::Io, "sha256 init failed");
  }
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

KeyValueFile BundleManifest::to_kv() const {
  KeyValueFile kv;
  kv.set("format", "rkdc-bundle");
  kv.set("version", "1");
  kv.set("sample_count", std::to_string(sample_count));
  kv.set("class_count", std::to_string(class_count));
  kv.set("prompt_count", std::to_string(prompt_count));
  kv.set("teacher_feature_dim", std::to_string(teacher_feature_dim));
  kv.set("clip_feature_dim", std::to_string(clip_feature_dim));
  std::ostringstream tau;
  tau.precision(17);
  tau << clip_temperature;
  kv.set("clip_temperature", tau.str());
  std::string names;
  for (std::size_t i = 0; i < class_names.size(); ++i) names += (i ? "," : "") + class_names[i];
  kv.set("class_names", names);
  if (image) {
    kv.set("image_channels", std::to_string(image->channels));
    kv.set("image_height", std::to_string(image->height));
    kv.set("image_width", std::to_string(image->width));
  }
  for (const auto& [file, sum] : checksums) kv.set("checksum." + file, sum);
  return kv;
}

BundleManifest BundleManifest::from_kv(const KeyValueFile& kv) {
  BundleManifest m;
  auto count = [&](const char* key) {
    const auto v = kv.get_int(key);
    if (v < 0) throw Error(ErrorCode::ParseError, std::string("negative ") + key);
    return static_cast<std::size_t>(v);
  };
  if (kv.get_string("format", "rkdc-bundle") != "rkdc-bundle") {
    throw Error(ErrorCode::ParseError, "manifest format is not rkdc-bundle");
  }
  if (kv.get_int("version", 1) != 1) throw Error(ErrorCode::UnsupportedVersion, "manifest version");
  m.sample_count = count("sample_count");
  m.class_count = count("class_count");
  m.prompt_count = count("prompt_count");
  m.teacher_feature_dim = count("teacher_feature_dim");
  m.clip_feature_dim = count("clip_feature_dim");
  m.clip_temperature = kv.get_double("clip_temperature");
  m.class_names = kv.get_list("class_names");
  if (kv.contains("image_width")) {
    m.image = ImageGeometry{count("image_channels"), count("image_height"), count("image_width")};
  }
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("checksum.", 0) == 0) m.checksums[k.substr(9)] = v;
  }
  return m;
}

void add_to_bundle(BundleManifest& manifest, const std::filesystem::path& dir, const CacheTensor& t,
                   const std::string& name) {
  const std::string file = (name.empty() ? std::string(to_string(t.role)) : name) + kTensorExtension;
  std::optional<std::int64_t> k;
  if (t.role == Role::labels) k = static_cast<std::int64_t>(manifest.class_count);
  write_tensor(t, dir / file, k);
  manifest.checksums[file] = file_sha256(dir / file);
}

void write_manifest(const BundleManifest& manifest, const std::filesystem::path& dir) {
  manifest.to_kv().save(dir / kManifestName);
}

namespace {

void expect_shape(const CacheTensor& t, const std::vector<std::uint64_t>& want, const std::string& what) {
  if (t.shape != want) {
    throw Error(ErrorCode::ShapeMismatch, std::string(to_string(t.role)) + " " + shape_string(t.shape) +
                                              " vs " + what + " " + shape_string(want));
  }
}

}  // namespace

BundleManifest validate_bundle(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestName;
  if (!std::filesystem::exists(manifest_path)) {
    throw Error(ErrorCode::MissingFile, "no " + std::string(kManifestName) + " in " + dir.string());
  }
  BundleManifest m = BundleManifest::from_kv(KeyValueFile::load(manifest_path));
  if (!(m.clip_temperature > 0.0) || !std::isfinite(m.clip_temperature)) {
    throw Error(ErrorCode::InvariantViolation, "clip_temperature must be > 0");
  }
  if (m.sample_count == 0 || m.class_count == 0 || m.prompt_count == 0 ||
      m.teacher_feature_dim == 0 || m.clip_feature_dim == 0) {
    throw Error(ErrorCode::InvariantViolation, "manifest dimensions must be positive");
  }
  if (m.class_names.size() != m.class_count) {
    throw Error(ErrorCode::ShapeMismatch, "class_names lists " + std::to_string(m.class_names.size()) +
                                              " names vs manifest K " + std::to_string(m.class_count));
  }

  for (const char* required :
       {"teacher_logits", "clip_prompt_logits", "teacher_features", "clip_features", "labels"}) {
    const std::string file = std::string(required) + kTensorExtension;
    if (!m.checksums.count(file)) throw Error(ErrorCode::MissingFile, "manifest does not list " + file);
  }

  const std::uint64_t n = m.sample_count, k = m.class_count;
  for (const auto& [file, sum] : m.checksums) {
    const auto path = dir / file;
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
    if (file_sha256(path) != sum) throw Error(ErrorCode::ChecksumMismatch, file);
    const CacheTensor t = read_tensor(path);
    switch (t.role) {
      case Role::teacher_logits:
      case Role::clip_logits:
        expect_shape(t, {n, k}, "manifest N×K");
        break;
      case Role::clip_prompt_logits:
        expect_shape(t, {m.prompt_count, n, k}, "manifest M×N×K");
        break;
      case Role::teacher_features:
        expect_shape(t, {n, m.teacher_feature_dim}, "manifest N×D_T");
        break;
      case Role::clip_features:
        expect_shape(t, {n, m.clip_feature_dim}, "manifest N×D_C");
        break;
      case Role::labels:
        expect_shape(t, {n}, "manifest N");
        if (t.dtype() != DType::i64) throw Error(ErrorCode::InvariantViolation, "labels must be i64");
        for (auto y : t.ints()) {
          if (y < 0 || static_cast<std::uint64_t>(y) >= k) {
            throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(y) + " outside [0, K)");
          }
        }
        break;
      case Role::images: {
        if (!m.image) throw Error(ErrorCode::InvariantViolation, "images present without image geometry");
        expect_shape(t, {n, m.image->size()}, "manifest N×(C·H·W)");
        for (float v : t.floats())
          if (v < 0.0f || v > 1.0f) throw Error(ErrorCode::InvariantViolation, "image pixel outside [0,1]");
        break;
      }
      default:
        break;
    }
  }
  return m;
}

}  // namespace fkd
