#pragma once

// Eigen goes first: the network and crypto headers leak macros that break it.
#include "kpat/error.hpp"
#include "kpat/io.hpp"
#include "kpat/models.hpp"
#include "kpat/numerics.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>
#include <zlib.h>

#include <httplib.h>

namespace kpat {

class BadMagic : public IoError {
 public:
  using IoError::IoError;
};
class Truncated : public IoError {
 public:
  using IoError::IoError;
};
class UnsupportedType : public IoError {
 public:
  using IoError::IoError;
};
class ChecksumMismatch : public IoError {
 public:
  using IoError::IoError;
};
class NetworkError : public IoError {
 public:
  using IoError::IoError;
};
class MissingOffline : public IoError {
 public:
  using IoError::IoError;
};

// ---------------------------------------------------------------------------
// IDX container: 0x00 0x00 <type> <rank>, rank big-endian uint32 dims, payload.

enum class IdxType : std::uint8_t { U8 = 0x08, I8 = 0x09, I16 = 0x0B, I32 = 0x0C, F32 = 0x0D, F64 = 0x0E };

inline std::size_t idx_element_size(std::uint8_t code) {
  switch (code) {
    case 0x08:
    case 0x09: return 1;
    case 0x0B: return 2;
    case 0x0C:
    case 0x0D: return 4;
    case 0x0E: return 8;
  }
  throw UnsupportedType("IDX: unsupported element type 0x" + std::to_string(code));
}

struct IdxTensor {
  std::uint8_t type_code = 0x08;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;  // as stored (big-endian for multi-byte)

  std::size_t elements() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  bool operator==(const IdxTensor&) const = default;
};

inline IdxTensor parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw Truncated("IDX: header shorter than 4 bytes");
  if (bytes[0] != 0 || bytes[1] != 0) throw BadMagic("IDX: magic must start with two zero bytes");
  IdxTensor t;
  t.type_code = bytes[2];
  const std::size_t elem = idx_element_size(t.type_code);
  const std::size_t rank = bytes[3];
  if (bytes.size() < 4 + 4 * rank) throw Truncated("IDX: dimension list truncated");
  for (std::size_t i = 0; i < rank; ++i) {
    const auto* p = bytes.data() + 4 + 4 * i;
    t.dims.push_back((std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3]);
  }
  const std::size_t need = t.elements() * elem;
  const std::size_t offset = 4 + 4 * rank;
  if (bytes.size() - offset < need) throw Truncated("IDX: payload shorter than declared dims");
  if (bytes.size() - offset > need) throw Truncated("IDX: trailing bytes after payload");
  t.payload.assign(bytes.begin() + (std::ptrdiff_t)offset, bytes.end());
  return t;
}

inline IdxTensor parse_idx(const std::string& bytes) {
  return parse_idx(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

inline std::string serialize_idx(const IdxTensor& t) {
  if (t.dims.size() > 255) throw ValidationError("IDX: rank above 255");
  if (t.payload.size() != t.elements() * idx_element_size(t.type_code))
    throw ValidationError("IDX: payload size does not match dims");
  std::string out{'\0', '\0', static_cast<char>(t.type_code), static_cast<char>(t.dims.size())};
  for (auto d : t.dims)
    for (int s = 24; s >= 0; s -= 8) out += static_cast<char>((d >> s) & 0xFF);
  out.append(reinterpret_cast<const char*>(t.payload.data()), t.payload.size());
  return out;
}

inline bool is_gzip(const std::string& bytes) {
  return bytes.size() >= 2 && (unsigned char)bytes[0] == 0x1f && (unsigned char)bytes[1] == 0x8b;
}

inline std::string gunzip(const std::string& bytes) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw IoError("gzip: inflateInit failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(bytes.data()));
  zs.avail_in = static_cast<uInt>(bytes.size());
  std::string out;
  char buf[1 << 16];
  int rc;
  do {
    zs.next_out = reinterpret_cast<Bytef*>(buf);
    zs.avail_out = sizeof buf;
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw Truncated("gzip: corrupt or truncated stream");
    }
    out.append(buf, sizeof buf - zs.avail_out);
  } while (rc != Z_STREAM_END);
  inflateEnd(&zs);
  return out;
}

inline std::string gzip(const std::string& bytes) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_BEST_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 9, Z_DEFAULT_STRATEGY) != Z_OK)
    throw IoError("gzip: deflateInit failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(bytes.data()));
  zs.avail_in = static_cast<uInt>(bytes.size());
  std::string out;
  char buf[1 << 16];
  int rc;
  do {
    zs.next_out = reinterpret_cast<Bytef*>(buf);
    zs.avail_out = sizeof buf;
    rc = deflate(&zs, Z_FINISH);
    out.append(buf, sizeof buf - zs.avail_out);
  } while (rc == Z_OK);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw IoError("gzip: deflate failed");
  return out;
}

/// Reads an IDX file, inflating it first when gzip-compressed.
inline IdxTensor load_idx(const std::filesystem::path& path) {
  std::string bytes = read_file(path);
  if (is_gzip(bytes)) bytes = gunzip(bytes);
  return parse_idx(bytes);
}

// ---------------------------------------------------------------------------
// Checksums: 32 hex digits means MD5, 64 means SHA-256.

inline std::string hex_digest(const std::string& bytes, const EVP_MD* md) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out, &len, md, nullptr) != 1) throw IoError("digest failed");
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < len; ++i) {
    s += hex[out[i] >> 4];
    s += hex[out[i] & 15];
  }
  return s;
}

inline std::string md5_hex(const std::string& bytes) { return hex_digest(bytes, EVP_md5()); }
inline std::string sha256_hex(const std::string& bytes) { return hex_digest(bytes, EVP_sha256()); }

inline bool checksum_matches(const std::string& bytes, const std::string& expected) {
  std::string e;
  for (char c : expected) e += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (e.size() == 32) return md5_hex(bytes) == e;
  if (e.size() == 64) return sha256_hex(bytes) == e;
  throw ValidationError("checksum must be 32 (md5) or 64 (sha256) hex digits: " + expected);
}

// ---------------------------------------------------------------------------
// Download cache.

struct RemoteFile {
  std::string name;      // file name appended to each mirror URL
  std::string checksum;  // md5 or sha256, hex
};

struct FetchConfig {
  std::filesystem::path cache_dir;
  std::vector<std::string> mirrors;  // http://, https:// or file:// prefixes ending in '/'
  std::vector<RemoteFile> files;
  bool offline = false;
  std::chrono::seconds lock_timeout{120};
};

/// Returns the body for a URL, or nullopt when that mirror does not have it.
using Transport = std::function<std::optional<std::string>(const std::string& url)>;

inline std::optional<std::string> default_transport(const std::string& url) {
  if (url.rfind("file://", 0) == 0) {
    const std::filesystem::path p = url.substr(7);
    if (!std::filesystem::exists(p)) return std::nullopt;
    return read_file(p);
  }
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ValidationError("mirror URL without scheme: " + url);
  const auto path_begin = url.find('/', scheme_end + 3);
  const std::string origin = url.substr(0, path_begin);
  const std::string path = path_begin == std::string::npos ? "/" : url.substr(path_begin);
  httplib::Client client(origin);
  client.set_follow_location(true);
  client.set_connection_timeout(10);
  client.set_read_timeout(60);
  auto res = client.Get(path);
  if (!res) throw NetworkError("GET " + url + ": " + httplib::to_string(res.error()));
  if (res->status == 404) return std::nullopt;
  if (res->status != 200) throw NetworkError("GET " + url + ": HTTP " + std::to_string(res->status));
  return res->body;
}

/// Cache directory: $KPAT_MNIST_DIR if set, else the given fallback.
inline std::filesystem::path mnist_cache_dir(const std::filesystem::path& fallback = "data/mnist") {
  if (const char* env = std::getenv("KPAT_MNIST_DIR"); env && *env) return env;
  return fallback;
}

namespace detail {

// Single-writer lock: exclusive creation of <dir>/.lock.
class CacheLock {
 public:
  CacheLock(const std::filesystem::path& dir, std::chrono::seconds timeout) : path_(dir / ".lock") {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto w = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        return;
      }
      if (errno != EEXIST) throw IoError("cannot create lock " + path_.string());
      if (std::chrono::steady_clock::now() > deadline) throw IoError("timed out waiting for " + path_.string());
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  }
  ~CacheLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  CacheLock(const CacheLock&) = delete;
  CacheLock& operator=(const CacheLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace detail

/// Ensures every file is present in the cache with the expected checksum and
/// returns name -> path. Cached files are verified, never re-downloaded.
inline std::map<std::string, std::filesystem::path> fetch_mnist(const FetchConfig& cfg,
                                                                const Transport& transport = default_transport) {
  std::filesystem::create_directories(cfg.cache_dir);
  detail::CacheLock lock(cfg.cache_dir, cfg.lock_timeout);
  std::map<std::string, std::filesystem::path> out;
  for (const auto& f : cfg.files) {
    const auto path = cfg.cache_dir / f.name;
    if (std::filesystem::exists(path)) {
      if (!checksum_matches(read_file(path), f.checksum))
        throw ChecksumMismatch("cached " + path.string() + " does not match " + f.checksum);
      out[f.name] = path;
      continue;
    }
    if (cfg.offline) throw MissingOffline("offline and " + path.string() + " is not cached");
    std::string last_error = "no mirror has " + f.name;
    bool done = false;
    for (const auto& mirror : cfg.mirrors) {
      std::optional<std::string> body;
      try {
        body = transport(mirror + f.name);
      } catch (const NetworkError& e) {
        last_error = e.what();
        continue;
      }
      if (!body) continue;
      if (!checksum_matches(*body, f.checksum)) {
        last_error = "checksum mismatch for " + mirror + f.name;
        continue;
      }
      const auto tmp = path.string() + ".part";
      write_file(tmp, *body);
      std::filesystem::rename(tmp, path);
      out[f.name] = path;
      done = true;
      break;
    }
    if (!done) {
      if (last_error.rfind("checksum", 0) == 0) throw ChecksumMismatch(last_error);
      throw NetworkError(last_error);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Digits and sequences.

inline constexpr std::size_t kPatchRows = 24;
inline constexpr std::size_t kPatchCols = 8;
inline constexpr std::size_t kPatchSize = kPatchRows * kPatchCols;

/// 24x8 patch, row-major, values in [-1, 1].
using DigitPatch = std::array<double, kPatchSize>;

/// Center crop 28x28 to 24x24, average columns in groups of three, map
/// pixel p to p/127.5 - 1.
inline DigitPatch make_digit_patch(std::span<const std::uint8_t> image) {
  if (image.size() != 28 * 28) throw DimensionError("make_digit_patch: expected 28x28 pixels");
  DigitPatch out{};
  for (std::size_t r = 0; r < kPatchRows; ++r)
    for (std::size_t c = 0; c < kPatchCols; ++c) {
      unsigned sum = 0;
      for (std::size_t t = 0; t < 3; ++t) sum += image[(r + 2) * 28 + 2 + 3 * c + t];
      out[r * kPatchCols + c] = static_cast<double>(sum) / 3.0 / 127.5 - 1.0;
    }
  return out;
}

struct DigitSet {
  std::vector<DigitPatch> patches;
  std::vector<int> classes;

  std::size_t size() const { return classes.size(); }
};

/// Builds patches from an image tensor (N x 28 x 28, u8) and label tensor (N, u8).
inline DigitSet make_digit_set(const IdxTensor& images, const IdxTensor& labels) {
  if (images.type_code != 0x08 || images.dims.size() != 3 || images.dims[1] != 28 || images.dims[2] != 28)
    throw DimensionError("MNIST images must be u8 N x 28 x 28");
  if (labels.type_code != 0x08 || labels.dims.size() != 1 || labels.dims[0] != images.dims[0])
    throw DimensionError("MNIST labels must be u8 with one entry per image");
  DigitSet s;
  s.patches.reserve(images.dims[0]);
  for (std::size_t i = 0; i < images.dims[0]; ++i) {
    s.patches.push_back(make_digit_patch(std::span(images.payload).subspan(i * 784, 784)));
    if (labels.payload[i] > 9) throw ValidationError("MNIST label outside 0..9");
    s.classes.push_back(labels.payload[i]);
  }
  return s;
}

enum class SequenceRule { CentralParity, EndsMiddleParity };

inline std::string rule_name(SequenceRule r) {
  return r == SequenceRule::CentralParity ? "central" : "ends-middle";
}

inline SequenceRule parse_rule(const std::string& s) {
  if (s == "central") return SequenceRule::CentralParity;
  if (s == "ends-middle") return SequenceRule::EndsMiddleParity;
  throw ValidationError("unknown sequence rule '" + s + "' (central|ends-middle)");
}

inline void require_sequence_length(std::size_t n) {
  if (n < 3 || n % 2 == 0) throw ValidationError("sequence length n must be odd and >= 3");
}

/// 1-based slots whose digit classes determine the label.
inline std::array<std::size_t, 3> rule_positions(std::size_t n, SequenceRule rule) {
  require_sequence_length(n);
  const std::size_t mid = (n + 1) / 2;
  if (rule == SequenceRule::CentralParity) return {mid - 1, mid, mid + 1};
  return {1, mid, n};
}

/// +1 iff the sum of the selected digit classes is even.
inline int sequence_label(std::span<const int> classes, SequenceRule rule) {
  int sum = 0;
  for (auto p : rule_positions(classes.size(), rule)) sum += classes[p - 1];
  return sum % 2 == 0 ? 1 : -1;
}

struct SeqExample {
  Matrix image;  // 24 x 8n, values in [-1, 1]
  int label = 1;
  std::vector<int> classes;
};

inline std::vector<SeqExample> build_sequences(const DigitSet& digits, std::size_t n, SequenceRule rule,
                                               std::size_t count, Rng& rng) {
  require_sequence_length(n);
  if (count < 1) throw ValidationError("build_sequences: count must be >= 1");
  if (digits.size() == 0) throw ValidationError("build_sequences: empty digit set");
  std::vector<SeqExample> out(count);
  for (auto& ex : out) {
    ex.image.resize(kPatchRows, (Eigen::Index)(kPatchCols * n));
    for (std::size_t s = 0; s < n; ++s) {
      const auto d = rng.below(digits.size());
      ex.classes.push_back(digits.classes[d]);
      const auto& p = digits.patches[d];
      for (std::size_t r = 0; r < kPatchRows; ++r)
        for (std::size_t c = 0; c < kPatchCols; ++c)
          ex.image((Eigen::Index)r, (Eigen::Index)(s * kPatchCols + c)) = p[r * kPatchCols + c];
    }
    ex.label = sequence_label(ex.classes, rule);
  }
  return out;
}

/// Column-major flattening: column c occupies inputs [24c, 24c + 24).
inline Batch sequences_to_batch(const std::vector<SeqExample>& examples) {
  if (examples.empty()) throw ValidationError("sequences_to_batch: no examples");
  const auto cols = examples.front().image.cols();
  Batch b{Matrix((Eigen::Index)examples.size(), cols * (Eigen::Index)kPatchRows), Vector((Eigen::Index)examples.size()),
          Vector::Constant((Eigen::Index)examples.size(), 1.0 / static_cast<double>(examples.size()))};
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& img = examples[i].image;
    if (img.cols() != cols) throw DimensionError("sequences_to_batch: mixed sequence lengths");
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < (Eigen::Index)kPatchRows; ++r)
        b.inputs((Eigen::Index)i, c * (Eigen::Index)kPatchRows + r) = img(r, c);
    b.labels[(Eigen::Index)i] = examples[i].label;
  }
  return b;
}

/// Window geometry over the flattened sequence: width and stride in columns.
inline WindowScheme sequence_scheme(std::size_t n, std::size_t window_cols = 24, std::size_t stride_cols = 8) {
  require_sequence_length(n);
  return WindowScheme{kPatchRows * kPatchCols * n, kPatchRows * window_cols, kPatchRows * stride_cols};
}

inline const std::vector<std::string>& mnist_file_names() {
  static const std::vector<std::string> names{"train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
                                              "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"};
  return names;
}

struct MnistData {
  DigitSet train;
  DigitSet test;
};

inline MnistData load_mnist(const std::filesystem::path& dir) {
  const auto& f = mnist_file_names();
  for (const auto& name : f)
    if (!std::filesystem::exists(dir / name)) throw MissingOffline("MNIST file missing: " + (dir / name).string());
  return {make_digit_set(load_idx(dir / f[0]), load_idx(dir / f[1])),
          make_digit_set(load_idx(dir / f[2]), load_idx(dir / f[3]))};
}

}  // namespace kpat
