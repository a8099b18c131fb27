#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "../support.hpp"
#include "fbalign/data.hpp"

using namespace fbalign;
using namespace fbalign::testing;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

IdxImages random_idx(Rng& rng, std::size_t count) {
  IdxImages im{count, 28, 28, std::vector<std::uint8_t>(count * 784)};
  for (auto& p : im.pixels) p = static_cast<std::uint8_t>(rng.uniform_index(256));
  return im;
}

std::vector<std::uint8_t> random_labels_u8(Rng& rng, std::size_t count, std::size_t classes = 10) {
  std::vector<std::uint8_t> l(count);
  for (auto& v : l) v = static_cast<std::uint8_t>(rng.uniform_index(classes));
  return l;
}

void write_mnist(const fs::path& dir, Rng& rng, std::size_t train, std::size_t test, std::uint8_t first_label) {
  auto train_labels = random_labels_u8(rng, train);
  train_labels[0] = first_label;
  write_bytes(dir / "train-images-idx3-ubyte", encode_idx_images(random_idx(rng, train)));
  write_bytes(dir / "train-labels-idx1-ubyte", encode_idx_labels(train_labels));
  write_bytes(dir / "t10k-images-idx3-ubyte", encode_idx_images(random_idx(rng, test)));
  write_bytes(dir / "t10k-labels-idx1-ubyte", encode_idx_labels(random_labels_u8(rng, test)));
}

CifarRecords random_cifar(Rng& rng, std::size_t count) {
  CifarRecords r{random_labels_u8(rng, count), std::vector<std::uint8_t>(count * 3072)};
  for (auto& p : r.pixels) p = static_cast<std::uint8_t>(rng.uniform_index(256));
  return r;
}

Dataset counting_dataset(std::size_t n, Shape example = {1, 4, 4}) {
  Dataset d;
  Shape shape{n};
  shape.insert(shape.end(), example.begin(), example.end());
  d.images = Tensor(shape);
  const std::size_t per = shape_size(example);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < per; ++k) d.images[i * per + k] = static_cast<float>(i);
    d.labels.push_back(static_cast<int>(i % 10));
  }
  return d;
}

}  // namespace

TEST_CASE("IDX round trip reproduces the source bytes") {
  Rng rng(1);
  const IdxImages im = random_idx(rng, 7);
  const auto bytes = encode_idx_images(im);
  CHECK(bytes.size() == 16 + 7 * 784);
  CHECK(bytes[2] == 0x08);
  CHECK(bytes[3] == 0x03);
  const IdxImages back = parse_idx_images(bytes, "mem");
  CHECK(back.count == 7);
  CHECK(back.rows == 28);
  CHECK(encode_idx_images(back) == bytes);
  const auto labels = random_labels_u8(rng, 7);
  const auto lbytes = encode_idx_labels(labels);
  CHECK(parse_idx_labels(lbytes, "mem") == labels);
  CHECK(encode_idx_labels(parse_idx_labels(lbytes, "mem")) == lbytes);
}

TEST_CASE("IDX parser rejects bad magic and truncation, naming the source") {
  Rng rng(2);
  auto bytes = encode_idx_images(random_idx(rng, 2));
  auto bad = bytes;
  bad[3] = 0x01;
  try {
    parse_idx_images(bad, "train-images-idx3-ubyte");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("train-images-idx3-ubyte") != std::string::npos);
  }
  bytes.pop_back();
  CHECK_THROWS_AS(parse_idx_images(bytes, "x"), FormatError);
  CHECK_THROWS_AS(parse_idx_labels(encode_idx_images(random_idx(rng, 1)), "x"), FormatError);
  CHECK_THROWS_AS(parse_idx_labels(std::vector<std::uint8_t>{0, 0, 8}, "x"), FormatError);
}

TEST_CASE("MNIST loader reads the standard files") {
  TempDir dir("fbalign_mnist_full");
  Rng rng(3);
  write_mnist(dir.path, rng, 60000, 10000, 5);
  const DatasetPair d = load_mnist(dir.path);
  CHECK(d.train.size() == 60000);
  CHECK(d.test.size() == 10000);
  CHECK(d.train.images.shape() == Shape{60000, 1, 28, 28});
  CHECK(d.test.example_shape() == Shape{1, 28, 28});

  // Independent read of the first label byte straight from the file.
  std::ifstream raw(dir.path / "train-labels-idx1-ubyte", std::ios::binary);
  raw.seekg(8);
  const int first = raw.get();
  CHECK(first == 5);
  CHECK(d.train.labels[0] == first);

  float lo = 1.0f, hi = 0.0f;
  for (float v : d.train.images.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= 0.0f);
  CHECK(hi <= 1.0f);
  CHECK(hi > 0.99f);
}

TEST_CASE("MNIST loader reports missing files and mismatched counts") {
  TempDir dir("fbalign_mnist_small");
  CHECK_THROWS(load_mnist(dir.path));
  Rng rng(4);
  write_mnist(dir.path, rng, 20, 10, 1);
  CHECK(load_mnist(dir.path).train.size() == 20);
  write_bytes(dir.path / "train-labels-idx1-ubyte", encode_idx_labels(random_labels_u8(rng, 19)));
  CHECK_THROWS_AS(load_mnist(dir.path), FormatError);
}

TEST_CASE("CIFAR records round trip and size checks") {
  Rng rng(5);
  const CifarRecords r = random_cifar(rng, 3);
  const auto bytes = encode_cifar_batch(r);
  CHECK(bytes.size() == 3 * kCifarRecordBytes);
  const CifarRecords back = parse_cifar_batch(bytes, "mem");
  CHECK(back.labels == r.labels);
  CHECK(encode_cifar_batch(back) == bytes);
  auto short_bytes = bytes;
  short_bytes.pop_back();
  CHECK_THROWS_AS(parse_cifar_batch(short_bytes, "data_batch_1.bin"), FormatError);
  auto bad_label = bytes;
  bad_label[0] = 10;
  CHECK_THROWS_AS(parse_cifar_batch(bad_label, "x"), FormatError);
}

TEST_CASE("CIFAR normalization centres the train channels") {
  Rng rng(6);
  CifarRecords r = random_cifar(rng, 200);
  // skew channel 1 so the statistics are not trivial
  for (std::size_t n = 0; n < 200; ++n) {
    for (std::size_t k = 1024; k < 2048; ++k) r.pixels[n * 3072 + k] = static_cast<std::uint8_t>(r.pixels[n * 3072 + k] / 4);
  }
  const ChannelStats stats = channel_stats(r);
  const Dataset d = cifar_to_dataset(r, stats, Split::train);
  CHECK(d.images.shape() == Shape{200, 3, 32, 32});
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t n = 0; n < 200; ++n) {
      for (std::size_t k = 0; k < 1024; ++k) {
        const double v = d.images[(n * 3 + c) * 1024 + k];
        mean += v;
        sq += v * v;
      }
    }
    mean /= 200.0 * 1024.0;
    CHECK(std::abs(mean) < 1e-3);
    CHECK(std::sqrt(sq / (200.0 * 1024.0) - mean * mean) == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("CIFAR loader reads five train batches and the test batch") {
  TempDir dir("fbalign_cifar_full");
  const fs::path sub = dir.path / "cifar-10-batches-bin";
  fs::create_directories(sub);
  Rng rng(7);
  for (int b = 1; b <= 5; ++b) write_bytes(sub / ("data_batch_" + std::to_string(b) + ".bin"), encode_cifar_batch(random_cifar(rng, 10000)));
  write_bytes(sub / "test_batch.bin", encode_cifar_batch(random_cifar(rng, 10000)));
  const DatasetPair d = load_cifar10(dir.path);
  CHECK(d.train.size() == 50000);
  CHECK(d.test.size() == 10000);
  CHECK(d.train.example_shape() == Shape{3, 32, 32});
  REQUIRE(d.test.normalization.has_value());
  CHECK(d.test.normalization->mean == d.train.normalization->mean);

  write_bytes(sub / "test_batch.bin", encode_cifar_batch(random_cifar(rng, 9999)));
  try {
    load_cifar10(dir.path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("test_batch.bin") != std::string::npos);
  }
}

TEST_CASE("dataset validation") {
  Dataset d = counting_dataset(4);
  CHECK_NOTHROW(d.validate());
  d.labels[2] = 10;
  CHECK_THROWS(d.validate());
  d.labels[2] = 1;
  d.labels.pop_back();
  CHECK_THROWS(d.validate());
}

TEST_CASE("synthetic data is deterministic and class-structured") {
  SyntheticSpec spec;
  spec.example_shape = {2, 5, 5};
  spec.train_count = 30;
  spec.test_count = 12;
  spec.seed = 9;
  const DatasetPair a = make_synthetic(spec), b = make_synthetic(spec);
  CHECK(a.train.images == b.train.images);
  CHECK(a.test.labels == b.test.labels);
  CHECK(a.train.images.shape() == Shape{30, 2, 5, 5});
  spec.seed = 10;
  CHECK_FALSE(make_synthetic(spec).train.images == a.train.images);
}

TEST_CASE("batch stream sizes, short final batch and full coverage") {
  const Dataset d = counting_dataset(100);
  Rng rng(10);
  BatchStream even(d, 50, &rng);
  CHECK(even.batches_per_epoch() == 2);
  BatchStream odd(d, 30, &rng);
  CHECK(odd.batches_per_epoch() == 4);
  odd.start_epoch();
  Batch b;
  std::vector<std::size_t> sizes;
  std::multiset<float> seen;
  std::map<int, int> label_counts;
  while (odd.next(b)) {
    sizes.push_back(b.labels.size());
    for (std::size_t n = 0; n < b.labels.size(); ++n) {
      seen.insert(b.images[n * 16]);
      ++label_counts[b.labels[n]];
    }
  }
  CHECK(sizes == std::vector<std::size_t>{30, 30, 30, 10});
  CHECK(seen.size() == 100);
  CHECK(std::set<float>(seen.begin(), seen.end()).size() == 100);
  for (const auto& [label, count] : label_counts) CHECK(count == 10);
}

TEST_CASE("batch order and crops depend only on the seed") {
  const Dataset d = counting_dataset(40, {3, 32, 32});
  Rng r1(11), r2(11);
  BatchStream a(d, 8, &r1, CropSpec{24}, true), b(d, 8, &r2, CropSpec{24}, true);
  for (int epoch = 0; epoch < 2; ++epoch) {
    a.start_epoch();
    b.start_epoch();
    CHECK(a.order() == b.order());
    Batch x, y;
    while (a.next(x)) {
      REQUIRE(b.next(y));
      CHECK(x.images == y.images);
      CHECK(x.images.dim(2) == 24);
    }
  }
  Rng r3(12);
  BatchStream c(d, 8, &r3);
  c.start_epoch();
  a.start_epoch();
  CHECK_FALSE(a.order() == c.order());
}

TEST_CASE("random crop offsets are uniform over the valid range") {
  // Encode pixel coordinates so the crop origin can be read back.
  Dataset d;
  d.images = Tensor(Shape{1, 1, 32, 32});
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) d.images.at(0, 0, i, j) = static_cast<float>(i * 32 + j);
  d.labels = {0};
  Rng rng(13);
  BatchStream s(d, 1, &rng, CropSpec{24}, true);
  std::map<std::pair<int, int>, int> counts;
  const int trials = 81 * 400;
  Batch b;
  for (int t = 0; t < trials; ++t) {
    s.start_epoch();
    s.next(b);
    const int origin = static_cast<int>(b.images[0]);
    counts[{origin / 32, origin % 32}]++;
  }
  CHECK(counts.size() == 81);
  for (const auto& [offset, n] : counts) {
    CHECK(offset.first <= 8);
    CHECK(offset.second <= 8);
    CHECK(std::abs(n - 400) < 100);  // about 5 standard deviations
  }

  BatchStream centre(d, 1, nullptr, CropSpec{24}, false);
  centre.start_epoch();
  centre.next(b);
  CHECK(b.images[0] == 4 * 32 + 4);
  CHECK_THROWS(BatchStream(d, 1, nullptr, CropSpec{40}, false));
}
