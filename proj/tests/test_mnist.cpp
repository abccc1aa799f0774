#include <gtest/gtest.h>

#include <filesystem>

#include "kpat/mnist.hpp"

using namespace kpat;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("kpat_test_mnist_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

IdxTensor u8_tensor(std::vector<std::uint32_t> dims, std::uint8_t fill) {
  IdxTensor t;
  t.dims = std::move(dims);
  t.payload.assign(t.elements(), fill);
  return t;
}

DigitSet toy_digits() {
  DigitSet d;
  for (int c = 0; c < 10; ++c) {
    DigitPatch p{};
    p.fill(c / 4.5 - 1.0);
    d.patches.push_back(p);
    d.classes.push_back(c);
  }
  return d;
}

}  // namespace

TEST(Idx, HeaderOfImageAndLabelFiles) {
  const auto img = serialize_idx(u8_tensor({3, 28, 28}, 0));
  EXPECT_EQ(img.substr(0, 4), std::string("\x00\x00\x08\x03", 4));
  EXPECT_EQ(img.substr(4, 12), std::string("\x00\x00\x00\x03\x00\x00\x00\x1c\x00\x00\x00\x1c", 12));
  const auto lab = serialize_idx(u8_tensor({3}, 7));
  EXPECT_EQ(lab.substr(0, 4), std::string("\x00\x00\x08\x01", 4));
  const auto t = parse_idx(lab);
  EXPECT_EQ(t.dims, std::vector<std::uint32_t>{3});
  EXPECT_EQ(t.payload, std::vector<std::uint8_t>(3, 7));
}

TEST(Idx, MalformedInputs) {
  EXPECT_THROW(parse_idx(std::string("\x00\x00\x08", 3)), Truncated);
  EXPECT_THROW(parse_idx(std::string("\x01\x00\x08\x01\x00\x00\x00\x00", 8)), BadMagic);
  EXPECT_THROW(parse_idx(std::string("\x00\x00\x07\x01\x00\x00\x00\x00", 8)), UnsupportedType);
  EXPECT_THROW(parse_idx(std::string("\x00\x00\x08\x02\x00\x00\x00\x01", 8)), Truncated);
  EXPECT_THROW(parse_idx(std::string("\x00\x00\x08\x01\x00\x00\x00\x02\x05", 9)), Truncated);
  EXPECT_THROW(parse_idx(std::string("\x00\x00\x08\x01\x00\x00\x00\x01\x05\x06", 10)), Truncated);
}

TEST(Idx, RoundTripIsBitExact) {
  Rng rng(1);
  for (std::uint8_t code : {0x08, 0x09, 0x0B, 0x0C, 0x0D, 0x0E}) {
    IdxTensor t;
    t.type_code = code;
    t.dims = {2, 3, static_cast<std::uint32_t>(1 + rng.below(4))};
    t.payload.resize(t.elements() * idx_element_size(code));
    for (auto& b : t.payload) b = static_cast<std::uint8_t>(rng.below(256));
    const auto bytes = serialize_idx(t);
    EXPECT_EQ(parse_idx(bytes), t);
    EXPECT_EQ(serialize_idx(parse_idx(bytes)), bytes);
  }
}

TEST(Idx, GzipRoundTripThroughLoad) {
  const auto dir = scratch_dir("gz");
  const auto t = u8_tensor({4, 2}, 9);
  write_file(dir / "a.gz", gzip(serialize_idx(t)));
  write_file(dir / "b", serialize_idx(t));
  EXPECT_EQ(load_idx(dir / "a.gz"), t);
  EXPECT_EQ(load_idx(dir / "b"), t);
  fs::remove_all(dir);
}

TEST(Checksums, KnownDigests) {
  EXPECT_EQ(md5_hex(""), "d41d8cd98f00b204e9800998ecf8427e");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_TRUE(checksum_matches("abc", "BA7816BF8F01CFEA414140DE5DAE2223B00361A396177A9CB410FF61F20015AD"));
  EXPECT_FALSE(checksum_matches("abd", "d41d8cd98f00b204e9800998ecf8427e"));
  EXPECT_THROW(checksum_matches("abc", "1234"), ValidationError);
}

TEST(Fetch, WarmCacheDoesNoTransport) {
  const auto dir = scratch_dir("warm");
  const std::string body = "payload-1";
  FetchConfig cfg{dir, {"mem://a/", "mem://b/"}, {{"f1", sha256_hex(body)}}};
  int calls = 0;
  const Transport t = [&](const std::string& url) -> std::optional<std::string> {
    ++calls;
    if (url == "mem://a/f1") return std::nullopt;  // first mirror lacks it
    return body;
  };
  const auto paths = fetch_mnist(cfg, t);
  EXPECT_EQ(calls, 2);
  EXPECT_EQ(read_file(paths.at("f1")), body);
  fetch_mnist(cfg, t);
  EXPECT_EQ(calls, 2);
  EXPECT_FALSE(fs::exists(dir / ".lock"));
  fs::remove_all(dir);
}

TEST(Fetch, CorruptedCacheIsAChecksumMismatch) {
  const auto dir = scratch_dir("corrupt");
  write_file(dir / "f1", "tampered");
  FetchConfig cfg{dir, {"mem://a/"}, {{"f1", sha256_hex("original")}}};
  const Transport t = [](const std::string&) -> std::optional<std::string> { return "original"; };
  EXPECT_THROW(fetch_mnist(cfg, t), ChecksumMismatch);
  fs::remove_all(dir);
}

TEST(Fetch, OfflineEmptyCacheAndBadMirrors) {
  const auto dir = scratch_dir("offline");
  FetchConfig cfg{dir, {"mem://a/"}, {{"f1", sha256_hex("x")}}};
  cfg.offline = true;
  const Transport never = [](const std::string&) -> std::optional<std::string> {
    ADD_FAILURE() << "offline fetch touched the transport";
    return std::nullopt;
  };
  EXPECT_THROW(fetch_mnist(cfg, never), MissingOffline);
  cfg.offline = false;
  const Transport wrong = [](const std::string&) -> std::optional<std::string> { return "y"; };
  EXPECT_THROW(fetch_mnist(cfg, wrong), ChecksumMismatch);
  EXPECT_FALSE(fs::exists(dir / "f1"));
  const Transport down = [](const std::string& url) -> std::optional<std::string> { throw NetworkError(url); };
  EXPECT_THROW(fetch_mnist(cfg, down), NetworkError);
  const Transport missing = [](const std::string&) -> std::optional<std::string> { return std::nullopt; };
  EXPECT_THROW(fetch_mnist(cfg, missing), NetworkError);
  fs::remove_all(dir);
}

TEST(Fetch, FileMirrorTransport) {
  const auto src = scratch_dir("mirror"), dst = scratch_dir("dst");
  write_file(src / "f1", "local");
  FetchConfig cfg{dst, {"file://" + src.string() + "/"}, {{"f1", md5_hex("local")}}};
  EXPECT_EQ(read_file(fetch_mnist(cfg).at("f1")), "local");
  fs::remove_all(src);
  fs::remove_all(dst);
}

TEST(DigitPatch, ConstantImages) {
  const std::vector<std::uint8_t> black(784, 0), white(784, 255);
  for (double v : make_digit_patch(black)) EXPECT_EQ(v, -1.0);
  for (double v : make_digit_patch(white)) EXPECT_EQ(v, 1.0);
  EXPECT_THROW(make_digit_patch(std::vector<std::uint8_t>(783)), DimensionError);
}

TEST(DigitPatch, CheckerboardPooling) {
  std::vector<std::uint8_t> img(784);
  for (int r = 0; r < 28; ++r)
    for (int c = 0; c < 28; ++c) img[r * 28 + c] = ((r + c) % 2) * 255;
  const auto p = make_digit_patch(img);
  // Cropped row r+2, columns 2+3c..4+3c: one lit pixel when r+c is even, two otherwise.
  for (std::size_t r = 0; r < kPatchRows; ++r)
    for (std::size_t c = 0; c < kPatchCols; ++c) {
      const double mean = ((r + c) % 2 == 0) ? 85.0 : 170.0;
      EXPECT_DOUBLE_EQ(p[r * kPatchCols + c], mean / 127.5 - 1.0) << r << "," << c;
    }
}

TEST(DigitSet, ShapeValidation) {
  EXPECT_THROW(make_digit_set(u8_tensor({2, 28, 27}, 0), u8_tensor({2}, 1)), DimensionError);
  EXPECT_THROW(make_digit_set(u8_tensor({2, 28, 28}, 0), u8_tensor({3}, 1)), DimensionError);
  EXPECT_THROW(make_digit_set(u8_tensor({1, 28, 28}, 0), u8_tensor({1}, 10)), ValidationError);
  const auto s = make_digit_set(u8_tensor({2, 28, 28}, 255), u8_tensor({2}, 4));
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.classes[1], 4);
}

TEST(Sequences, LabelExamples) {
  const std::vector<int> a{7, 3, 4, 5, 0}, b{1, 9, 2, 9, 2};
  EXPECT_EQ(sequence_label(a, SequenceRule::CentralParity), 1);
  EXPECT_EQ(sequence_label(b, SequenceRule::EndsMiddleParity), -1);
  EXPECT_EQ(rule_positions(13, SequenceRule::CentralParity), (std::array<std::size_t, 3>{6, 7, 8}));
  EXPECT_EQ(rule_positions(13, SequenceRule::EndsMiddleParity), (std::array<std::size_t, 3>{1, 7, 13}));
  EXPECT_THROW(rule_positions(4, SequenceRule::CentralParity), ValidationError);
  EXPECT_THROW(parse_rule("middle"), ValidationError);
}

TEST(Sequences, ShapeRangeAndConsistency) {
  Rng rng(2);
  const auto digits = toy_digits();
  const auto ex = build_sequences(digits, 7, SequenceRule::EndsMiddleParity, 50, rng);
  for (const auto& e : ex) {
    EXPECT_EQ(e.image.rows(), 24);
    EXPECT_EQ(e.image.cols(), 56);
    EXPECT_LE(e.image.maxCoeff(), 1.0);
    EXPECT_GE(e.image.minCoeff(), -1.0);
    EXPECT_EQ(e.label, sequence_label(e.classes, SequenceRule::EndsMiddleParity));
    for (std::size_t s = 0; s < 7; ++s) EXPECT_EQ(e.image(5, (Eigen::Index)(8 * s + 3)), e.classes[s] / 4.5 - 1.0);
  }
  EXPECT_THROW(build_sequences(digits, 6, SequenceRule::CentralParity, 1, rng), ValidationError);
  EXPECT_THROW(build_sequences(digits, 5, SequenceRule::CentralParity, 0, rng), ValidationError);
}

TEST(Sequences, LabelBalance) {
  Rng rng(3);
  const auto ex = build_sequences(toy_digits(), 5, SequenceRule::CentralParity, 10000, rng);
  int pos = 0;
  for (const auto& e : ex) pos += e.label == 1;
  EXPECT_NEAR(pos / 10000.0, 0.5, 0.02);
}

TEST(Sequences, MutationInvariance) {
  Rng rng(4);
  for (auto rule : {SequenceRule::CentralParity, SequenceRule::EndsMiddleParity}) {
    const auto pos = rule_positions(9, rule);
    for (int t = 0; t < 200; ++t) {
      std::vector<int> c(9);
      for (auto& v : c) v = (int)rng.below(10);
      const int y = sequence_label(c, rule);
      const std::size_t s = 1 + rng.below(9);
      auto m = c;
      m[s - 1] = (int)rng.below(10);
      const bool relevant = std::find(pos.begin(), pos.end(), s) != pos.end();
      if (!relevant) EXPECT_EQ(sequence_label(m, rule), y);
      else EXPECT_EQ(sequence_label(m, rule) == y, (m[s - 1] - c[s - 1]) % 2 == 0);
    }
  }
}

TEST(Sequences, ColumnMajorFlattenAndScheme) {
  Rng rng(5);
  const auto ex = build_sequences(toy_digits(), 3, SequenceRule::CentralParity, 4, rng);
  const auto b = sequences_to_batch(ex);
  EXPECT_EQ(b.inputs.cols(), 24 * 24);
  for (Eigen::Index c = 0; c < 24; ++c)
    for (Eigen::Index r = 0; r < 24; ++r) EXPECT_EQ(b.inputs(2, 24 * c + r), ex[2].image(r, c));
  EXPECT_EQ(b.labels[1], ex[1].label);
  const auto s = sequence_scheme(13);
  EXPECT_EQ(s.input_length, 24u * 8 * 13);
  EXPECT_EQ(s.width, 576u);
  EXPECT_EQ(s.stride, 192u);
  EXPECT_EQ(s.positions(), 11u);
}

TEST(MnistFiles, CachedSubsetHeaders) {
  const fs::path dir = mnist_cache_dir(KPAT_TEST_MNIST_DIR);
  if (!fs::exists(dir / mnist_file_names()[0])) GTEST_SKIP() << "no MNIST files in " << dir;
  const auto img = load_idx(dir / mnist_file_names()[0]);
  EXPECT_EQ(img.type_code, 0x08);
  ASSERT_EQ(img.dims.size(), 3u);
  EXPECT_EQ(img.dims[1], 28u);
  EXPECT_EQ(img.dims[2], 28u);
  const auto lab = load_idx(dir / mnist_file_names()[1]);
  EXPECT_EQ(lab.dims, std::vector<std::uint32_t>{img.dims[0]});
  const auto data = load_mnist(dir);
  EXPECT_EQ(data.train.size(), img.dims[0]);
  EXPECT_GT(data.test.size(), 0u);
}
