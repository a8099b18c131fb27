#include "fbalign/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "fbalign/tensor.hpp"

namespace fbalign {

namespace {

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string optional_number(const std::optional<double>& v) { return v ? number(*v) : std::string(); }

std::optional<double> parse_optional(const std::string& field) {
  if (field.empty()) return std::nullopt;
  return std::stod(field);
}

}  // namespace

std::string format_row(const MetricsRow& r) {
  std::string s;
  s += std::to_string(r.step) + ',' + std::to_string(r.epoch) + ',' + number(r.lr) + ',';
  s += optional_number(r.train_loss) + ',' + optional_number(r.train_err) + ',' + optional_number(r.test_err) + ',';
  s += r.layer + ',';
  s += optional_number(r.angle_deg) + ',' + optional_number(r.w_norm) + ',' + optional_number(r.b_norm) + ',';
  s += optional_number(r.signflip_frac) + ',' + number(r.wall_s);
  return s;
}

void MetricsSink::write(const MetricsRow& row) {
  if (last_step_ && row.step < *last_step_) {
    throw Error("metrics row for step " + std::to_string(row.step) + " arrived after step " +
                std::to_string(*last_step_));
  }
  last_step_ = row.step;
  emit(row);
}

CsvMetricsWriter::CsvMetricsWriter(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw Error("cannot open metrics file " + path.string());
  if (!append) out_ << kMetricsHeader << '\n';
}

void CsvMetricsWriter::emit(const MetricsRow& row) {
  out_ << format_row(row) << '\n';
  out_.flush();
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open metrics file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw FormatError(path.string() + ": unexpected metrics header");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 12) throw FormatError(path.string() + ": malformed metrics row '" + line + "'");
    MetricsRow r;
    r.step = std::stoull(f[0]);
    r.epoch = std::stoull(f[1]);
    r.lr = std::stod(f[2]);
    r.train_loss = parse_optional(f[3]);
    r.train_err = parse_optional(f[4]);
    r.test_err = parse_optional(f[5]);
    r.layer = f[6];
    r.angle_deg = parse_optional(f[7]);
    r.w_norm = parse_optional(f[8]);
    r.b_norm = parse_optional(f[9]);
    r.signflip_frac = parse_optional(f[10]);
    r.wall_s = std::stod(f[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace fbalign
