#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fbalign/rng.hpp"
#include "fbalign/tensor.hpp"

namespace fbalign {

enum class Split { train, test };

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct Dataset {
  Tensor images;  // [N,C,H,W], or [N,features] for dense-only data
  std::vector<int> labels;
  Split split = Split::train;
  std::size_t classes = 10;
  std::optional<ChannelStats> normalization;

  std::size_t size() const noexcept { return labels.size(); }
  Shape example_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  /// Checks label range and image/label count agreement.
  void validate() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// IDX (MNIST) format: big-endian u32 magic, counts, then raw bytes.
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;
};

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& source);
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes, const std::string& source);
std::vector<std::uint8_t> encode_idx_images(const IdxImages& images);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

/// Reads the four standard IDX files; pixels scaled to [0,1].
DatasetPair load_mnist(const std::filesystem::path& dir);

// CIFAR-10 binary: records of 1 label byte + 3072 channel-major pixel bytes.
inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarBatchRecords = 10000;
inline constexpr std::size_t kCifarBatchBytes = kCifarRecordBytes * kCifarBatchRecords;

struct CifarRecords {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // count * 3072
};

CifarRecords parse_cifar_batch(std::span<const std::uint8_t> bytes, const std::string& source);
std::vector<std::uint8_t> encode_cifar_batch(const CifarRecords& records);

/// Reads data_batch_1..5.bin and test_batch.bin (from `dir` or
/// `dir/cifar-10-batches-bin`). Each file must be exactly 30,730,000 bytes.
/// Both splits are standardized per channel with train-split statistics.
DatasetPair load_cifar10(const std::filesystem::path& dir);

/// Converts raw CIFAR records into a dataset using the given statistics.
Dataset cifar_to_dataset(const CifarRecords& records, const ChannelStats& stats, Split split);
ChannelStats channel_stats(const CifarRecords& records);

/// Class-prototype images plus Gaussian noise. Used for tests and for
/// exercising the pipeline without the real datasets.
struct SyntheticSpec {
  Shape example_shape{1, 28, 28};
  std::size_t classes = 10;
  std::size_t train_count = 500;
  std::size_t test_count = 100;
  double noise = 1.0;
  std::uint64_t seed = 0;
};
DatasetPair make_synthetic(const SyntheticSpec& spec);

struct CropSpec {
  std::size_t size = 0;
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

/// Epoch-level shuffled mini-batches. With a crop spec, training streams take
/// a uniformly random size x size window per example and evaluation streams
/// take the centered window. The final short batch is kept.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, Rng* rng, std::optional<CropSpec> crop = std::nullopt,
              bool random_crop = false);

  /// Reshuffles (when an rng is attached) and rewinds.
  void start_epoch();
  bool next(Batch& batch);

  std::size_t batches_per_epoch() const;
  const std::vector<std::size_t>& order() const noexcept { return order_; }
  Shape output_example_shape() const;

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  Rng* rng_;
  std::optional<CropSpec> crop_;
  bool random_crop_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Fisher-Yates shuffle driven by Rng::uniform_index.
void shuffle_indices(std::vector<std::size_t>& indices, Rng& rng);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace fbalign
