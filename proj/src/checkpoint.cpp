#include "fbalign/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace fbalign {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'F', 'B', 'C', 'K'};

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t k = 0; k < sizeof(T); ++k) bytes[k] = static_cast<unsigned char>((v >> (8 * k)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::string& source) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError(source + ": truncated header");
  T v = 0;
  for (std::size_t k = 0; k < sizeof(T); ++k) v |= static_cast<T>(bytes[k]) << (8 * k);
  return v;
}

std::uint32_t float_bits(float f) { return std::bit_cast<std::uint32_t>(f); }
float bits_float(std::uint32_t u) { return std::bit_cast<float>(u); }

Tensor bytes_as_tensor(const std::vector<std::uint8_t>& v) {
  Tensor t(Shape{v.size()});
  for (std::size_t k = 0; k < v.size(); ++k) t[k] = v[k];
  return t;
}

void put(CheckpointData& d, const std::string& name, const Tensor& t) {
  if (!t.empty()) d.tensors[name] = t;
}

const Tensor& need(const CheckpointData& d, const std::string& name, const std::string& why) {
  auto it = d.tensors.find(name);
  if (it == d.tensors.end()) throw FormatError("checkpoint is missing tensor '" + name + "' (" + why + ")");
  return it->second;
}

void assign_checked(Tensor& dst, const Tensor& src, const std::string& name) {
  if (!dst.empty() && dst.shape() != src.shape()) {
    throw FormatError("checkpoint tensor '" + name + "' has shape " + to_string(src.shape()) + ", expected " +
                      to_string(dst.shape()));
  }
  dst = src;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  json manifest = data.manifest;
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : data.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"dtype", "f32"}});
    offset += t.size();
  }
  manifest["tensors"] = entries;
  const std::string text = manifest.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(kMagic, 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : data.tensors) {
      for (float f : t.data()) put_le<std::uint32_t>(out, float_bits(f));
    }
    if (!out) throw Error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  const std::string source = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + source);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(source + ": not a checkpoint file");
  const auto version = get_le<std::uint32_t>(in, source);
  if (version != kCheckpointVersion) {
    throw FormatError(source + ": checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto manifest_bytes = get_le<std::uint64_t>(in, source);
  std::string text(manifest_bytes, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(manifest_bytes))) throw FormatError(source + ": truncated manifest");
  CheckpointData data;
  try {
    data.manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(source + ": bad manifest: " + e.what());
  }
  std::vector<std::uint32_t> payload;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (rest.size() % 4 != 0) throw FormatError(source + ": payload is not a whole number of floats");
    payload.resize(rest.size() / 4);
    for (std::size_t k = 0; k < payload.size(); ++k) {
      std::uint32_t v = 0;
      for (std::size_t b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(rest[4 * k + b])) << (8 * b);
      payload[k] = v;
    }
  }
  for (const auto& e : data.manifest.at("tensors")) {
    const Shape shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (offset + n > payload.size()) throw FormatError(source + ": tensor '" + e.at("name").get<std::string>() + "' runs past the payload");
    std::vector<float> values(n);
    for (std::size_t k = 0; k < n; ++k) values[k] = bits_float(payload[offset + k]);
    data.tensors.emplace(e.at("name").get<std::string>(), Tensor(shape, std::move(values)));
  }
  return data;
}

CheckpointData capture_session(const ExperimentConfig& config, const TrainingSession& s, double wall_s) {
  CheckpointData d;
  json& m = d.manifest;
  m["config"] = to_json(config);
  m["strategy"] = std::string(to_string(s.feedback.strategy));
  m["step"] = s.step;
  m["epoch"] = s.epoch;
  m["adam_t"] = s.adam.t;
  m["loss_window_sum"] = s.loss_window_sum;
  m["loss_window_count"] = s.loss_window_count;
  m["wall_s"] = wall_s;
  m["feedback_seed"] = s.feedback.seed;
  m["rng"] = {{"data", s.data_rng.serialize()},
              {"dropout", s.dropout_rng.serialize()},
              {"noise", s.noise_rng.serialize()},
              {"probe", s.probe_rng.serialize()}};

  const NetworkState& net = s.net;
  for (auto i : net.trainable()) {
    const std::string& name = net.layer(i).name;
    put(d, "param/" + name + "/weights", net.layer(i).weights);
    put(d, "param/" + name + "/bias", net.layer(i).bias);
    const AdamMoments& mo = s.adam.moments.at(i);
    put(d, "adam/" + name + "/m_weights", mo.m_weights);
    put(d, "adam/" + name + "/v_weights", mo.v_weights);
    put(d, "adam/" + name + "/m_bias", mo.m_bias);
    put(d, "adam/" + name + "/v_bias", mo.v_bias);
    if (uses_layer_feedback(s.feedback.strategy)) put(d, "feedback/" + name + "/B", s.feedback.feedback_for(i));
    if (i < s.feedback.initial_magnitude.size()) put(d, "feedback/" + name + "/B0_abs", s.feedback.initial_magnitude[i]);
    if (s.constraints.alignment_penalty) put(d, "penalty/" + name + "/target", s.constraints.alignment_penalty->targets.at(i));
    if (s.constraints.ei_freeze && s.constraints.ei_freeze->frozen) {
      put(d, "ei/" + name + "/sign", s.constraints.ei_freeze->frozen_sign.at(i));
    }
  }
  json projections = json::array();
  for (std::size_t k = 0; k < s.feedback.projections.size(); ++k) {
    const Projection& p = s.feedback.projections[k];
    projections.push_back({{"target", p.target}, {"source", p.source ? json(*p.source) : json(nullptr)}});
    put(d, "projection/" + std::to_string(k), p.matrix);
  }
  m["projections"] = projections;

  if (s.constraints.initial_norms) m["initial_norms"] = *s.constraints.initial_norms;
  if (s.constraints.ei_freeze) {
    m["ei"] = {{"freeze_step", s.constraints.ei_freeze->freeze_step},
               {"clip", s.constraints.ei_freeze->clip},
               {"frozen", s.constraints.ei_freeze->frozen}};
  }
  const auto& tracker = s.sign_flips;
  m["signflip_layers"] = tracker.layers();
  for (std::size_t k = 0; k < tracker.layers().size(); ++k) {
    const std::string& name = net.layer(tracker.layers()[k]).name;
    put(d, "signflip/" + name + "/initial", tracker.initial_signs()[k]);
    put(d, "signflip/" + name + "/ever", bytes_as_tensor(tracker.ever_flipped()[k]));
  }
  return d;
}

ExperimentConfig checkpoint_config(const CheckpointData& data) {
  if (!data.manifest.contains("config")) throw FormatError("checkpoint has no config echo");
  return parse_config(data.manifest.at("config"));
}

double checkpoint_wall_seconds(const CheckpointData& data) { return data.manifest.value("wall_s", 0.0); }

void restore_session(TrainingSession& s, const CheckpointData& d) {
  const json& m = d.manifest;
  const Strategy strategy = parse_strategy(m.at("strategy").get<std::string>());
  if (strategy != s.feedback.strategy) {
    throw FormatError("checkpoint strategy " + std::string(to_string(strategy)) + " differs from session strategy " +
                      std::string(to_string(s.feedback.strategy)));
  }
  NetworkState& net = s.net;
  for (auto i : net.trainable()) {
    const std::string& name = net.layer(i).name;
    assign_checked(net.mutable_weights(i), need(d, "param/" + name + "/weights", "parameters"), name + " weights");
    assign_checked(net.mutable_bias(i), need(d, "param/" + name + "/bias", "parameters"), name + " bias");
    AdamMoments& mo = s.adam.moments.at(i);
    assign_checked(mo.m_weights, need(d, "adam/" + name + "/m_weights", "optimizer moments"), "adam m");
    assign_checked(mo.v_weights, need(d, "adam/" + name + "/v_weights", "optimizer moments"), "adam v");
    assign_checked(mo.m_bias, need(d, "adam/" + name + "/m_bias", "optimizer moments"), "adam m");
    assign_checked(mo.v_bias, need(d, "adam/" + name + "/v_bias", "optimizer moments"), "adam v");
    if (uses_layer_feedback(strategy)) {
      const std::string why = "feedback tensors of a " + std::string(to_string(strategy)) + " run";
      assign_checked(s.feedback.feedback.at(i), need(d, "feedback/" + name + "/B", why), name + " feedback");
      if (strategy == Strategy::usf_init) {
        assign_checked(s.feedback.initial_magnitude.at(i), need(d, "feedback/" + name + "/B0_abs", why),
                       name + " |B0|");
      }
    }
    if (s.constraints.alignment_penalty) {
      assign_checked(s.constraints.alignment_penalty->targets.at(i),
                     need(d, "penalty/" + name + "/target", "alignment penalty targets"), name + " target");
    }
  }
  if (uses_projections(strategy)) {
    const json& projections = m.at("projections");
    if (projections.size() != s.feedback.projections.size()) {
      throw FormatError("checkpoint has " + std::to_string(projections.size()) + " feedback projections, expected " +
                        std::to_string(s.feedback.projections.size()));
    }
    for (std::size_t k = 0; k < projections.size(); ++k) {
      assign_checked(s.feedback.projections[k].matrix,
                     need(d, "projection/" + std::to_string(k), "feedback projections of a dfa/dense_fa run"),
                     "projection " + std::to_string(k));
    }
  }
  if (s.constraints.initial_norms) {
    if (!m.contains("initial_norms")) throw FormatError("checkpoint is missing initial weight norms");
    s.constraints.initial_norms = m.at("initial_norms").get<std::vector<double>>();
  }
  if (s.constraints.ei_freeze) {
    if (!m.contains("ei")) throw FormatError("checkpoint is missing E/I freeze state");
    EiFreeze& f = *s.constraints.ei_freeze;
    f.freeze_step = m.at("ei").at("freeze_step").get<std::uint64_t>();
    f.clip = m.at("ei").at("clip").get<double>();
    f.frozen = m.at("ei").at("frozen").get<bool>();
    f.frozen_sign.assign(net.layer_count(), Tensor());
    if (f.frozen) {
      for (auto i : net.trainable()) {
        f.frozen_sign[i] = need(d, "ei/" + net.layer(i).name + "/sign", "frozen signs");
      }
    }
  }

  std::vector<std::size_t> layers = m.at("signflip_layers").get<std::vector<std::size_t>>();
  std::vector<Tensor> initial;
  std::vector<std::vector<std::uint8_t>> ever;
  for (auto i : layers) {
    const std::string& name = net.layer(i).name;
    initial.push_back(need(d, "signflip/" + name + "/initial", "sign-flip tracker"));
    const Tensor& e = need(d, "signflip/" + name + "/ever", "sign-flip tracker");
    std::vector<std::uint8_t> flags(e.size());
    for (std::size_t k = 0; k < e.size(); ++k) flags[k] = e[k] != 0.0f;
    ever.push_back(std::move(flags));
  }
  s.sign_flips = SignFlipTracker::restore(std::move(layers), std::move(initial), std::move(ever));

  const json& rng = m.at("rng");
  s.data_rng = Rng::deserialize(rng.at("data").get<std::string>());
  s.dropout_rng = Rng::deserialize(rng.at("dropout").get<std::string>());
  s.noise_rng = Rng::deserialize(rng.at("noise").get<std::string>());
  s.probe_rng = Rng::deserialize(rng.at("probe").get<std::string>());
  s.step = m.at("step").get<std::uint64_t>();
  s.epoch = m.at("epoch").get<std::uint64_t>();
  s.adam.t = m.at("adam_t").get<std::uint64_t>();
  s.loss_window_sum = m.at("loss_window_sum").get<double>();
  s.loss_window_count = m.at("loss_window_count").get<std::uint64_t>();
  s.feedback.seed = m.at("feedback_seed").get<std::uint64_t>();
  net.invalidate_cache();
}

}  // namespace fbalign
