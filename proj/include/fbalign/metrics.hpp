#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace fbalign {

inline constexpr const char* kMetricsHeader =
    "step,epoch,lr,train_loss,train_err,test_err,layer,angle_deg,w_norm,b_norm,signflip_frac,wall_s";

/// One CSV row. Absent quantities serialize as empty fields; per-layer rows
/// repeat the run-level scalars.
struct MetricsRow {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double lr = 0.0;
  std::optional<double> train_loss;
  std::optional<double> train_err;  // percent
  std::optional<double> test_err;   // percent
  std::string layer;
  std::optional<double> angle_deg;
  std::optional<double> w_norm;
  std::optional<double> b_norm;
  std::optional<double> signflip_frac;
  double wall_s = 0.0;

  bool operator==(const MetricsRow&) const = default;
};

std::string format_row(const MetricsRow& row);

class MetricsSink {
 public:
  virtual ~MetricsSink() = default;
  /// Rows must arrive in non-decreasing step order.
  void write(const MetricsRow& row);

 protected:
  virtual void emit(const MetricsRow& row) = 0;

 private:
  std::optional<std::uint64_t> last_step_;
};

class MemoryMetricsSink final : public MetricsSink {
 public:
  const std::vector<MetricsRow>& rows() const noexcept { return rows_; }

 protected:
  void emit(const MetricsRow& row) override { rows_.push_back(row); }

 private:
  std::vector<MetricsRow> rows_;
};

class CsvMetricsWriter final : public MetricsSink {
 public:
  /// `append` continues an existing file (resume) without rewriting the header.
  explicit CsvMetricsWriter(const std::filesystem::path& path, bool append = false);

 protected:
  void emit(const MetricsRow& row) override;

 private:
  std::ofstream out_;
};

/// Forwards every row to two sinks.
class TeeMetricsSink final : public MetricsSink {
 public:
  TeeMetricsSink(MetricsSink& a, MetricsSink& b) : a_(a), b_(b) {}

 protected:
  void emit(const MetricsRow& row) override {
    a_.write(row);
    b_.write(row);
  }

 private:
  MetricsSink& a_;
  MetricsSink& b_;
};

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace fbalign
