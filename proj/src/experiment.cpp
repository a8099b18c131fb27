#include "fbalign/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "fbalign/checkpoint.hpp"

namespace fbalign {

using nlohmann::json;

namespace {

std::size_t steps_per_epoch(const ExperimentConfig& c, const Dataset& train) {
  return (train.size() + c.batch_size - 1) / c.batch_size;
}

std::optional<CropSpec> crop_of(const ExperimentConfig& c) {
  if (!c.dataset.crop) return std::nullopt;
  return CropSpec{*c.dataset.crop};
}

std::string checkpoint_name(std::uint64_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04llu.fbck", static_cast<unsigned long long>(epoch));
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

double elapsed(const EpochContext& ctx) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
}

void fill_summary(RunSummary& summary, const std::vector<MetricsRow>& rows) {
  summary.rows = rows;
  summary.test_err_by_epoch.clear();
  summary.angles_by_layer.clear();
  summary.signflip_by_epoch.clear();
  for (const MetricsRow& r : rows) {
    if (r.layer.empty()) continue;
    if (r.layer == "all") {
      if (r.test_err) summary.test_err_by_epoch.push_back(*r.test_err);
      if (r.signflip_frac) summary.signflip_by_epoch.push_back(*r.signflip_frac);
      summary.final_test_err = r.test_err;
      summary.final_train_err = r.train_err;
      summary.epochs = r.epoch;
      summary.steps = r.step;
    } else {
      summary.angles_by_layer[r.layer].push_back(r.angle_deg);
    }
  }
}

// Keeps the header and every row at or before `step`; returns the kept rows.
std::vector<MetricsRow> truncate_metrics(const std::filesystem::path& path, std::uint64_t step) {
  if (!std::filesystem::exists(path)) return {};
  std::vector<MetricsRow> rows = read_metrics_csv(path);
  std::ifstream in(path);
  std::string header, line, kept;
  std::getline(in, header);
  kept = header + '\n';
  std::vector<MetricsRow> out;
  std::size_t k = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (rows.at(k).step <= step) {
      kept += line + '\n';
      out.push_back(rows[k]);
    }
    ++k;
  }
  in.close();
  write_text(path, kept);
  return out;
}

struct RunContext {
  ExperimentConfig config;
  DatasetPair data;
  Batch probe;
  std::filesystem::path out_dir;
};

void log_epoch(std::ostream* log, const ExperimentConfig& c, const MetricsRecord& rec, double wall) {
  if (!log) return;
  std::ostringstream os;
  os << c.name << " epoch " << rec.epoch << "/" << c.epochs << " lr " << rec.lr;
  if (rec.train_loss) os << " train_loss " << std::fixed << std::setprecision(4) << *rec.train_loss;
  if (rec.train_err) os << " train_err " << std::fixed << std::setprecision(2) << *rec.train_err << "%";
  if (rec.test_err) os << " test_err " << std::fixed << std::setprecision(2) << *rec.test_err << "%";
  os << " (" << std::fixed << std::setprecision(1) << wall << "s)";
  *log << os.str() << std::endl;
}

RunSummary drive(RunContext& rc, TrainingSession& session, EpochContext& ctx, MetricsSink* csv,
                 std::vector<MetricsRow> prior_rows, const RunOptions& options, bool emit_baseline) {
  const ExperimentConfig& c = rc.config;
  MemoryMetricsSink memory;
  std::optional<TeeMetricsSink> tee;
  MetricsSink* sink = &memory;
  if (csv) {
    tee.emplace(*csv, memory);
    sink = &*tee;
  }

  if (emit_baseline) {
    const MetricsRecord rec = emit_epoch_rows(session, ctx, sink, std::nullopt, std::nullopt);
    log_epoch(options.log, c, rec, elapsed(ctx));
  }

  BatchStream stream(rc.data.train, c.batch_size, &session.data_rng, crop_of(c), c.dataset.crop.has_value());
  const std::filesystem::path ckpt_dir = rc.out_dir / "checkpoints";
  if (options.write_files) std::filesystem::create_directories(ckpt_dir);

  bool stopped = false;
  while (session.epoch < c.epochs) {
    const MetricsRecord rec = train_epoch(session, stream, ctx, sink);
    const double wall = elapsed(ctx);
    log_epoch(options.log, c, rec, wall);
    const bool last = session.epoch == c.epochs;
    stopped = options.stop_after_epoch && session.epoch >= *options.stop_after_epoch && !last;
    if (options.write_files) {
      const bool periodic = c.checkpoint_every && session.epoch % c.checkpoint_every == 0;
      if (periodic || stopped || last) {
        const CheckpointData data = capture_session(c, session, c.metrics.wall_time ? wall : 0.0);
        write_checkpoint(ckpt_dir / checkpoint_name(session.epoch), data);
        if (last) write_checkpoint(ckpt_dir / "final.fbck", data);
      }
    }
    if (stopped) break;
  }
  if (options.write_files && c.epochs == 0) {
    // zero-epoch run: the untrained state is the final state
    const CheckpointData data = capture_session(c, session, 0.0);
    write_checkpoint(ckpt_dir / checkpoint_name(0), data);
    write_checkpoint(ckpt_dir / "final.fbck", data);
  }

  RunSummary summary;
  summary.name = c.name;
  summary.strategy = std::string(to_string(c.strategy));
  summary.output_dir = rc.out_dir;
  std::vector<MetricsRow> rows = std::move(prior_rows);
  rows.insert(rows.end(), memory.rows().begin(), memory.rows().end());
  fill_summary(summary, rows);
  if (options.write_files) write_text(rc.out_dir / "summary.json", summary_to_json(summary).dump(2) + "\n");
  if (options.log && summary.final_test_err && !stopped) {
    *options.log << c.name << " final test error " << std::fixed << std::setprecision(2) << *summary.final_test_err
                 << "%" << std::endl;
  }
  return summary;
}

EpochContext make_context(const RunContext& rc) {
  EpochContext ctx;
  ctx.test = &rc.data.test;
  ctx.crop = crop_of(rc.config);
  ctx.eval_batch_size = rc.config.eval_batch_size;
  ctx.probe = rc.config.metrics.angles ? &rc.probe : nullptr;
  ctx.loss_every = rc.config.metrics.loss_every;
  ctx.wall_time = rc.config.metrics.wall_time;
  return ctx;
}

double geometric_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) {
    if (!(x > 0.0)) return 0.0;
    s += std::log(x);
  }
  return std::exp(s / static_cast<double>(v.size()));
}

}  // namespace

DatasetPair load_datasets(const ExperimentConfig& c) {
  switch (c.dataset.kind) {
    case DatasetKind::synthetic:
      return make_synthetic(c.dataset.synthetic);
    case DatasetKind::mnist:
    case DatasetKind::cifar10: {
      const auto dir = c.dataset_path();
      if (!std::filesystem::is_directory(dir)) {
        throw DataUnavailable(std::string(to_string(c.dataset.kind)) + " data directory '" + dir.string() +
                              "' not found (run scripts/fetch_data.sh or set dataset.path)");
      }
      try {
        return c.dataset.kind == DatasetKind::mnist ? load_mnist(dir) : load_cifar10(dir);
      } catch (const FormatError& e) {
        throw DataUnavailable(e.what());
      }
    }
  }
  throw Error("unknown dataset kind");
}

TrainingSession make_session(const ExperimentConfig& c, std::size_t per_epoch) {
  const Rng master(c.seed);
  auto stream = [&](RngStream s) { return master.fork(static_cast<std::uint64_t>(s)); };
  TrainingSession s;
  Rng net_rng = stream(RngStream::network);
  s.net = build(c.resolved_network(), c.init, net_rng);
  Rng fb_rng = stream(RngStream::feedback);
  FeedbackOptions fo;
  fo.projection_memory_cap_bytes = c.projection_memory_cap_mib * std::size_t{1024} * 1024;
  s.feedback = init_feedback(s.net, c.strategy, c.init, fb_rng, fo);
  s.adam = AdamState::for_network(s.net, c.adam);
  const ConstraintConfig& cc = c.constraints;
  if (cc.ei_freeze_fraction) {
    s.constraints.ei_freeze = EiFreeze::at_fraction(c.epochs * per_epoch, *cc.ei_freeze_fraction);
    s.constraints.ei_freeze->clip = cc.ei_clip;
  }
  if (cc.norm_constraint) s.constraints.initial_norms = weight_norms(s.net);
  if (cc.alignment_penalty) {
    Rng penalty_rng = stream(RngStream::penalty);
    s.constraints.alignment_penalty = make_alignment_penalty(s.net, c.init, *cc.alignment_penalty, penalty_rng);
  }
  s.constraints.grad_noise = cc.grad_noise;
  s.constraints.batch_manhattan = cc.batch_manhattan;
  s.constraints.weight_decay = cc.weight_decay;
  s.schedule = c.schedule;
  s.sign_flips = SignFlipTracker(s.net);
  s.data_rng = stream(RngStream::data);
  s.dropout_rng = stream(RngStream::dropout);
  s.noise_rng = stream(RngStream::noise);
  s.probe_rng = stream(RngStream::probe);
  return s;
}

Batch make_probe_batch(const ExperimentConfig& c, const Dataset& test) {
  BatchStream stream(test, std::min(c.metrics.probe_size, test.size()), nullptr, crop_of(c), false);
  stream.start_epoch();
  Batch b;
  stream.next(b);
  return b;
}

ExperimentConfig apply_overrides(ExperimentConfig c, const RunOptions& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.output_dir) c.output_dir = *o.output_dir;
  if (o.epochs) c.epochs = *o.epochs;
  return c;
}

json summary_to_json(const RunSummary& s) {
  json j;
  j["name"] = s.name;
  j["strategy"] = s.strategy;
  j["steps"] = s.steps;
  j["epochs"] = s.epochs;
  j["final_test_err"] = s.final_test_err ? json(*s.final_test_err) : json(nullptr);
  j["final_train_err"] = s.final_train_err ? json(*s.final_train_err) : json(nullptr);
  j["test_err_by_epoch"] = s.test_err_by_epoch;
  j["signflip_by_epoch"] = s.signflip_by_epoch;
  json angles = json::object();
  for (const auto& [layer, values] : s.angles_by_layer) {
    json a = json::array();
    for (const auto& v : values) a.push_back(v ? json(*v) : json(nullptr));
    angles[layer] = a;
  }
  j["angles_by_layer"] = angles;
  return j;
}

RunSummary run_training(const ExperimentConfig& config, const RunOptions& options) {
  RunContext rc;
  rc.config = apply_overrides(config, options);
  rc.data = load_datasets(rc.config);
  rc.probe = make_probe_batch(rc.config, rc.data.test);
  rc.out_dir = rc.config.output_dir;
  TrainingSession session = make_session(rc.config, steps_per_epoch(rc.config, rc.data.train));
  EpochContext ctx = make_context(rc);

  std::optional<CsvMetricsWriter> csv;
  if (options.write_files) {
    std::filesystem::create_directories(rc.out_dir);
    write_text(rc.out_dir / "config.json", to_json(rc.config).dump(2) + "\n");
    csv.emplace(rc.out_dir / "metrics.csv");
  }
  return drive(rc, session, ctx, csv ? &*csv : nullptr, {}, options, true);
}

RunSummary resume_training(const std::filesystem::path& checkpoint, const std::optional<ExperimentConfig>& override_cfg,
                           const RunOptions& options) {
  const CheckpointData data = read_checkpoint(checkpoint);
  ExperimentConfig stored = checkpoint_config(data);
  RunContext rc;
  if (override_cfg) {
    if (auto diff = identity_mismatch(stored, *override_cfg)) {
      throw ConfigError("refusing to resume: config differs from the checkpointed run in " + *diff);
    }
    rc.config = *override_cfg;
  } else {
    rc.config = stored;
  }
  if (options.seed && *options.seed != stored.seed) throw ConfigError("refusing to resume: --seed differs from the run");
  RunOptions opts = options;
  opts.seed.reset();
  rc.config = apply_overrides(rc.config, opts);
  rc.data = load_datasets(rc.config);
  rc.probe = make_probe_batch(rc.config, rc.data.test);
  rc.out_dir = rc.config.output_dir;

  TrainingSession session = make_session(rc.config, steps_per_epoch(rc.config, rc.data.train));
  restore_session(session, data);
  EpochContext ctx = make_context(rc);
  ctx.start = std::chrono::steady_clock::now() -
              std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                  std::chrono::duration<double>(checkpoint_wall_seconds(data)));

  std::optional<CsvMetricsWriter> csv;
  std::vector<MetricsRow> prior;
  if (options.write_files) {
    std::filesystem::create_directories(rc.out_dir);
    const auto metrics = rc.out_dir / "metrics.csv";
    const bool existing = std::filesystem::exists(metrics);
    prior = truncate_metrics(metrics, session.step);
    csv.emplace(metrics, existing);
    write_text(rc.out_dir / "config.json", to_json(rc.config).dump(2) + "\n");
  }
  return drive(rc, session, ctx, csv ? &*csv : nullptr, std::move(prior), opts, false);
}

std::string describe_run(const ExperimentConfig& c) {
  const NetworkSpec spec = c.resolved_network();
  const auto shapes = spec.resolve_shapes();
  std::ostringstream os;
  os << "run " << c.name << ": strategy " << to_string(c.strategy) << ", init " << to_string(c.init) << ", "
     << c.epochs << " epochs, batch " << c.batch_size << ", dataset " << to_string(c.dataset.kind) << "\n";
  os << "input " << to_string(spec.input_shape) << "\n";
  Rng rng(c.seed);
  const NetworkState net = build(spec, c.init, rng);
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const LayerState& l = net.layer(i);
    os << "  " << std::left << std::setw(14) << l.name << " -> " << std::setw(14) << to_string(l.output_shape);
    if (l.trainable()) os << " params " << l.weights.size() + l.bias.size();
    os << "\n";
  }
  os << "trainable parameters " << net.parameter_count() << "\n";
  if (uses_projections(c.strategy)) {
    os << "feedback projections " << projection_memory_bytes(net, c.strategy) / (1024.0 * 1024.0) << " MiB (cap "
       << c.projection_memory_cap_mib << " MiB)\n";
  }
  return os.str();
}

std::vector<RatioProfileRow> ratio_profile(const ExperimentConfig& config, std::size_t seeds) {
  if (seeds == 0) throw Error("ratio-profile needs at least one seed");
  if (!uses_layer_feedback(config.strategy)) {
    throw ConfigError("strategy: ratio-profile needs fa, usf_init or usf_sn, got " +
                      std::string(to_string(config.strategy)));
  }
  const DatasetPair data = load_datasets(config);
  const Batch probe = make_probe_batch(config, data.test);
  std::vector<std::vector<double>> measured, cumulative, norm;
  std::vector<RatioProfileRow> rows;
  for (std::size_t k = 0; k < seeds; ++k) {
    ExperimentConfig c = config;
    c.seed = config.seed + k;
    const Rng master(c.seed);
    Rng net_rng = master.fork(static_cast<std::uint64_t>(RngStream::network));
    Rng fb_rng = master.fork(static_cast<std::uint64_t>(RngStream::feedback));
    NetworkState net = build(c.resolved_network(), c.init, net_rng);
    const FeedbackState fb = init_feedback(net, c.strategy, c.init, fb_rng);
    const GradientRatioReport report = gradient_ratio_profile(net, fb, probe.images, probe.labels);
    if (rows.empty()) {
      for (const auto& r : report.rows) rows.push_back({r.layer, r.name, 0.0, 0.0, 0.0});
      measured.resize(rows.size());
      cumulative.resize(rows.size());
      norm.resize(rows.size());
    }
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
      measured[i].push_back(report.rows[i].measured_ratio);
      cumulative[i].push_back(report.rows[i].cumulative_product);
      norm[i].push_back(report.rows[i].norm_ratio);
    }
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].measured_ratio = geometric_mean(measured[i]);
    rows[i].cumulative_product = geometric_mean(cumulative[i]);
    rows[i].norm_ratio = geometric_mean(norm[i]);
  }
  return rows;
}

std::string ratio_profile_csv(const std::vector<RatioProfileRow>& rows) {
  std::ostringstream os;
  os << "layer,name,measured_ratio,cumulative_product,norm_ratio\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.layer << ',' << r.name << ',' << r.measured_ratio << ',' << r.cumulative_product << ',' << r.norm_ratio
       << '\n';
  }
  return os.str();
}

std::string angle_sweep_csv(const RunSummary& summary) {
  std::ostringstream os;
  os << "epoch,layer,angle_deg\n" << std::setprecision(9);
  for (const MetricsRow& r : summary.rows) {
    if (r.layer.empty() || r.layer == "all") continue;
    os << r.epoch << ',' << r.layer << ',';
    if (r.angle_deg) os << *r.angle_deg;
    os << '\n';
  }
  return os.str();
}

std::string sign_flips_csv(const RunSummary& summary) {
  std::ostringstream os;
  os << "step,epoch,layer,signflip_frac\n" << std::setprecision(9);
  for (const MetricsRow& r : summary.rows) {
    if (r.layer.empty() || !r.signflip_frac) continue;
    os << r.step << ',' << r.epoch << ',' << r.layer << ',' << *r.signflip_frac << '\n';
  }
  return os.str();
}

}  // namespace fbalign
