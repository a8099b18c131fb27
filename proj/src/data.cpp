#include "fbalign/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "fbalign/ops.hpp"

namespace fbalign {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarPlane = 1024;

std::filesystem::path find_first(const std::filesystem::path& dir, std::initializer_list<const char*> names) {
  for (const char* name : names) {
    const auto p = dir / name;
    if (std::filesystem::exists(p)) return p;
  }
  throw FormatError("missing file " + (dir / *names.begin()).string());
}

Dataset idx_to_dataset(const IdxImages& images, const std::vector<std::uint8_t>& labels, Split split,
                       const std::string& source) {
  if (images.count != labels.size()) {
    throw FormatError(source + ": " + std::to_string(images.count) + " images but " + std::to_string(labels.size()) +
                      " labels");
  }
  Dataset d;
  d.split = split;
  d.images = Tensor(Shape{images.count, 1, images.rows, images.cols});
  for (std::size_t i = 0; i < images.pixels.size(); ++i) d.images[i] = static_cast<float>(images.pixels[i]) / 255.0f;
  d.labels.assign(labels.begin(), labels.end());
  d.validate();
  return d;
}

}  // namespace

void Dataset::validate() const {
  if (images.empty() || images.rank() < 2) throw ShapeError("dataset images must be [N,...]");
  if (images.dim(0) != labels.size()) {
    throw ShapeError("dataset has " + std::to_string(images.dim(0)) + " images but " + std::to_string(labels.size()) +
                     " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) throw FormatError("label " + std::to_string(l) + " out of range");
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < 16) throw FormatError(source + ": truncated IDX image header");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxImageMagic) throw FormatError(source + ": bad IDX image magic " + std::to_string(magic));
  IdxImages images;
  images.count = read_be32(bytes, 4);
  images.rows = read_be32(bytes, 8);
  images.cols = read_be32(bytes, 12);
  const std::size_t expected = images.count * images.rows * images.cols;
  if (bytes.size() - 16 != expected) {
    throw FormatError(source + ": expected " + std::to_string(expected) + " pixel bytes, found " +
                      std::to_string(bytes.size() - 16));
  }
  images.pixels.assign(bytes.begin() + 16, bytes.end());
  return images;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < 8) throw FormatError(source + ": truncated IDX label header");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxLabelMagic) throw FormatError(source + ": bad IDX label magic " + std::to_string(magic));
  const std::size_t count = read_be32(bytes, 4);
  if (bytes.size() - 8 != count) {
    throw FormatError(source + ": expected " + std::to_string(count) + " labels, found " +
                      std::to_string(bytes.size() - 8));
  }
  return std::vector<std::uint8_t>(bytes.begin() + 8, bytes.end());
}

std::vector<std::uint8_t> encode_idx_images(const IdxImages& images) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.pixels.size());
  write_be32(out, kIdxImageMagic);
  write_be32(out, static_cast<std::uint32_t>(images.count));
  write_be32(out, static_cast<std::uint32_t>(images.rows));
  write_be32(out, static_cast<std::uint32_t>(images.cols));
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  write_be32(out, kIdxLabelMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

DatasetPair load_mnist(const std::filesystem::path& dir) {
  auto load = [&](std::initializer_list<const char*> image_names, std::initializer_list<const char*> label_names,
                  Split split) {
    const auto image_path = find_first(dir, image_names);
    const auto label_path = find_first(dir, label_names);
    const IdxImages images = parse_idx_images(read_file_bytes(image_path), image_path.string());
    const auto labels = parse_idx_labels(read_file_bytes(label_path), label_path.string());
    return idx_to_dataset(images, labels, split, image_path.string());
  };
  DatasetPair pair;
  pair.train = load({"train-images-idx3-ubyte", "train-images.idx3-ubyte"},
                    {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"}, Split::train);
  pair.test = load({"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"},
                   {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"}, Split::test);
  return pair;
}

CifarRecords parse_cifar_batch(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(source + ": size " + std::to_string(bytes.size()) + " is not a whole number of " +
                      std::to_string(kCifarRecordBytes) + "-byte records");
  }
  const std::size_t count = bytes.size() / kCifarRecordBytes;
  CifarRecords records;
  records.labels.reserve(count);
  records.pixels.reserve(count * kCifarPixels);
  for (std::size_t r = 0; r < count; ++r) {
    const auto record = bytes.subspan(r * kCifarRecordBytes, kCifarRecordBytes);
    if (record[0] > 9) throw FormatError(source + ": label " + std::to_string(record[0]) + " out of range in record " + std::to_string(r));
    records.labels.push_back(record[0]);
    records.pixels.insert(records.pixels.end(), record.begin() + 1, record.end());
  }
  return records;
}

std::vector<std::uint8_t> encode_cifar_batch(const CifarRecords& records) {
  std::vector<std::uint8_t> out;
  out.reserve(records.labels.size() * kCifarRecordBytes);
  for (std::size_t r = 0; r < records.labels.size(); ++r) {
    out.push_back(records.labels[r]);
    const auto begin = records.pixels.begin() + static_cast<std::ptrdiff_t>(r * kCifarPixels);
    out.insert(out.end(), begin, begin + kCifarPixels);
  }
  return out;
}

ChannelStats channel_stats(const CifarRecords& records) {
  ChannelStats stats{std::vector<double>(3, 0.0), std::vector<double>(3, 0.0)};
  const std::size_t count = records.labels.size();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0, ss = 0.0;
    for (std::size_t r = 0; r < count; ++r) {
      const std::uint8_t* plane = records.pixels.data() + r * kCifarPixels + c * kCifarPlane;
      for (std::size_t k = 0; k < kCifarPlane; ++k) {
        const double v = plane[k] / 255.0;
        s += v;
        ss += v * v;
      }
    }
    const double n = static_cast<double>(count * kCifarPlane);
    stats.mean[c] = s / n;
    stats.stddev[c] = std::sqrt(std::max(ss / n - stats.mean[c] * stats.mean[c], 1e-12));
  }
  return stats;
}

Dataset cifar_to_dataset(const CifarRecords& records, const ChannelStats& stats, Split split) {
  Dataset d;
  d.split = split;
  d.normalization = stats;
  const std::size_t count = records.labels.size();
  d.images = Tensor(Shape{count, 3, 32, 32});
  for (std::size_t r = 0; r < count; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t base = r * kCifarPixels + c * kCifarPlane;
      for (std::size_t k = 0; k < kCifarPlane; ++k) {
        d.images[base + k] = static_cast<float>((records.pixels[base + k] / 255.0 - stats.mean[c]) / stats.stddev[c]);
      }
    }
  }
  d.labels.assign(records.labels.begin(), records.labels.end());
  d.validate();
  return d;
}

DatasetPair load_cifar10(const std::filesystem::path& root) {
  std::filesystem::path dir = root;
  if (!std::filesystem::exists(dir / "data_batch_1.bin") && std::filesystem::exists(root / "cifar-10-batches-bin")) {
    dir = root / "cifar-10-batches-bin";
  }
  auto read_batch = [&](const std::string& name) {
    const auto path = dir / name;
    const auto bytes = read_file_bytes(path);
    if (bytes.size() != kCifarBatchBytes) {
      throw FormatError(path.string() + ": expected " + std::to_string(kCifarBatchBytes) + " bytes, found " +
                        std::to_string(bytes.size()));
    }
    return parse_cifar_batch(bytes, path.string());
  };
  CifarRecords train;
  for (int b = 1; b <= 5; ++b) {
    CifarRecords part = read_batch("data_batch_" + std::to_string(b) + ".bin");
    train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
    train.pixels.insert(train.pixels.end(), part.pixels.begin(), part.pixels.end());
  }
  const CifarRecords test = read_batch("test_batch.bin");
  const ChannelStats stats = channel_stats(train);
  return {cifar_to_dataset(train, stats, Split::train), cifar_to_dataset(test, stats, Split::test)};
}

DatasetPair make_synthetic(const SyntheticSpec& spec) {
  Rng rng(spec.seed);
  Shape proto_shape{spec.classes};
  proto_shape.insert(proto_shape.end(), spec.example_shape.begin(), spec.example_shape.end());
  const Tensor prototypes = fill_gaussian(rng, proto_shape, 1.0);
  const std::size_t per_example = shape_size(spec.example_shape);
  auto make = [&](std::size_t count, Split split) {
    Dataset d;
    d.split = split;
    d.classes = spec.classes;
    Shape shape{count};
    shape.insert(shape.end(), spec.example_shape.begin(), spec.example_shape.end());
    d.images = Tensor(shape);
    for (std::size_t n = 0; n < count; ++n) {
      const int label = static_cast<int>(rng.uniform_index(spec.classes));
      d.labels.push_back(label);
      for (std::size_t k = 0; k < per_example; ++k) {
        d.images[n * per_example + k] =
            static_cast<float>(prototypes[static_cast<std::size_t>(label) * per_example + k] + spec.noise * rng.normal());
      }
    }
    d.validate();
    return d;
  };
  DatasetPair pair;
  pair.train = make(spec.train_count, Split::train);
  pair.test = make(spec.test_count, Split::test);
  return pair;
}

void shuffle_indices(std::vector<std::size_t>& indices, Rng& rng) {
  for (std::size_t i = indices.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(indices[i - 1], indices[j]);
  }
}

BatchStream::BatchStream(const Dataset& data, std::size_t batch_size, Rng* rng, std::optional<CropSpec> crop,
                         bool random_crop)
    : data_(&data), batch_size_(batch_size), rng_(rng), crop_(crop), random_crop_(random_crop) {
  if (batch_size == 0) throw Error("batch size must be positive");
  if (crop_) {
    const auto& s = data.images.shape();
    if (s.size() != 4) throw ShapeError("cropping needs [N,C,H,W] images, got " + to_string(s));
    if (crop_->size == 0 || crop_->size > s[2] || crop_->size > s[3]) {
      throw ShapeError("crop " + std::to_string(crop_->size) + " does not fit images " + to_string(s));
    }
  }
  if (random_crop_ && !rng_) throw Error("random cropping needs an rng");
  order_.resize(data.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  cursor_ = order_.size();
}

void BatchStream::start_epoch() {
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (rng_) shuffle_indices(order_, *rng_);
  cursor_ = 0;
}

std::size_t BatchStream::batches_per_epoch() const { return (data_->size() + batch_size_ - 1) / batch_size_; }

Shape BatchStream::output_example_shape() const {
  Shape s = data_->example_shape();
  if (crop_) {
    s[1] = crop_->size;
    s[2] = crop_->size;
  }
  return s;
}

bool BatchStream::next(Batch& batch) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
  Shape shape{n};
  const Shape example = output_example_shape();
  shape.insert(shape.end(), example.begin(), example.end());
  batch.images = Tensor(shape);
  batch.labels.resize(n);
  const std::size_t src_size = shape_size(data_->example_shape());
  const std::size_t dst_size = shape_size(example);
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t idx = order_[cursor_ + b];
    batch.labels[b] = data_->labels[idx];
    const float* src = data_->images.raw() + idx * src_size;
    float* dst = batch.images.raw() + b * dst_size;
    if (!crop_) {
      std::copy(src, src + src_size, dst);
      continue;
    }
    const auto& full = data_->images.shape();
    const std::size_t channels = full[1], height = full[2], width = full[3], size = crop_->size;
    std::size_t oy = (height - size) / 2, ox = (width - size) / 2;
    if (random_crop_) {
      oy = rng_->uniform_index(height - size + 1);
      ox = rng_->uniform_index(width - size + 1);
    }
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < size; ++y) {
        const float* row = src + (c * height + oy + y) * width + ox;
        std::copy(row, row + size, dst + (c * size + y) * size);
      }
    }
  }
  cursor_ += n;
  return true;
}

}  // namespace fbalign
