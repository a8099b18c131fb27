#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "../support.hpp"
#include "fbalign/checkpoint.hpp"
#include "fbalign/config.hpp"
#include "fbalign/experiment.hpp"

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

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path write_config(const fs::path& dir, const std::string& file, const nlohmann::json& j) {
  const fs::path p = dir / file;
  std::ofstream(p) << j.dump(2);
  return p;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(FBALIGN_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json toy_at(const std::string& strategy, const fs::path& out) {
  auto j = toy_config_json(strategy);
  j["output_dir"] = out.string();
  return j;
}

void check_same_params(const CheckpointData& a, const CheckpointData& b) {
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (const auto& [name, t] : a.tensors) {
    CAPTURE(name);
    REQUIRE(b.tensors.count(name) == 1);
    CHECK(t == b.tensors.at(name));
  }
}

}  // namespace

TEST_CASE("config parser rejects unknown fields with their path") {
  auto j = toy_config_json("fa");
  CHECK_NOTHROW(parse_config(j));
  j["constraints"] = {{"norm_constraint", true}, {"frobnicate", 1}};
  try {
    parse_config(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("frobnicate") != std::string::npos);
  }
  auto k = toy_config_json("fa");
  k["strategy"] = "magic";
  CHECK_THROWS_AS(parse_config(k), ConfigError);
  k = toy_config_json("fa");
  k["batch_size"] = 0;
  CHECK_THROWS_AS(parse_config(k), ConfigError);
}

TEST_CASE("every bundled config parses and survives a JSON round trip") {
  std::size_t count = 0;
  for (const auto& entry : fs::directory_iterator(fs::path(FBALIGN_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".cfg") continue;
    CAPTURE(entry.path().string());
    const ExperimentConfig c = load_config(entry.path());
    CHECK_NOTHROW(c.resolved_network().resolve_shapes());
    const ExperimentConfig back = parse_config(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK_FALSE(identity_mismatch(c, back).has_value());
    ++count;
  }
  CHECK(count >= 25);
}

TEST_CASE("command line exit codes") {
  TempDir dir("fbalign_cli_codes");
  const fs::path good = write_config(dir.path, "good.cfg", toy_at("fa", dir.path / "run"));
  CHECK(cli("train " + good.string() + " --dry-run") == 0);
  CHECK_FALSE(fs::exists(dir.path / "run"));
  CHECK(cli("frobnicate") != 0);
  CHECK(cli("") != 0);

  auto bad = toy_at("fa", dir.path / "run");
  bad["epochs"] = "many";
  CHECK(cli("train " + write_config(dir.path, "bad.cfg", bad).string()) == 2);

  auto missing = toy_at("fa", dir.path / "run");
  missing["dataset"] = {{"kind", "mnist"}, {"path", (dir.path / "no_such_dir").string()}};
  missing.erase("network");
  missing["architecture"] = "mnist";
  CHECK(cli("train " + write_config(dir.path, "missing.cfg", missing).string()) == 3);

  CHECK(cli("diag ratio-profile " + good.string() + " --seeds 2 --output " + (dir.path / "r.csv").string()) == 0);
  CHECK(slurp(dir.path / "r.csv").rfind("layer", 0) == 0);
}

TEST_CASE("identical configs and seeds give byte-identical outputs") {
  TempDir dir("fbalign_cli_repeat");
  const fs::path cfg = write_config(dir.path, "toy.cfg", toy_at("usf_sn", dir.path / "run"));
  // Same output path both times since checkpoints echo the config.
  REQUIRE(cli("train " + cfg.string()) == 0);
  fs::rename(dir.path / "run", dir.path / "a");
  REQUIRE(cli("train " + cfg.string()) == 0);
  fs::rename(dir.path / "run", dir.path / "b");
  for (const std::string f : {"metrics.csv", "summary.json", "checkpoints/final.fbck"}) {
    CAPTURE(f);
    const std::string a = slurp(dir.path / "a" / f);
    CHECK_FALSE(a.empty());
    CHECK((a == slurp(dir.path / "b" / f)));
  }
  REQUIRE(cli("train " + cfg.string() + " --seed 6 --out " + (dir.path / "c").string()) == 0);
  CHECK_FALSE(slurp(dir.path / "a/metrics.csv") == slurp(dir.path / "c/metrics.csv"));
}

TEST_CASE("an interrupted run resumes to the same result as a straight run") {
  for (const std::string strategy : {"fa", "usf_init", "dfa"}) {
    CAPTURE(strategy);
    TempDir dir("fbalign_cli_resume");
    auto j = toy_at(strategy, dir.path / "unused");
    j["epochs"] = 4;
    j["constraints"] = {{"grad_noise", {{"scale", 0.01}}}};
    if (strategy == "usf_init") j["constraints"] = {{"ei_freeze", {{"fraction", 0.05}}}, {"norm_constraint", true}};
    const fs::path cfg = write_config(dir.path, "toy.cfg", j);
    const fs::path straight = dir.path / "straight", split = dir.path / "split";
    REQUIRE(cli("train " + cfg.string() + " --out " + straight.string()) == 0);
    REQUIRE(cli("train " + cfg.string() + " --stop-after-epoch 2 --out " + split.string()) == 0);
    CHECK_FALSE(fs::exists(split / "checkpoints/final.fbck"));
    REQUIRE(cli("resume " + (split / "checkpoints/epoch_0002.fbck").string()) == 0);
    // the stored output_dir is the --out override, so resume lands in `split`
    CHECK(slurp(straight / "metrics.csv") == slurp(split / "metrics.csv"));
    check_same_params(read_checkpoint(straight / "checkpoints/final.fbck"),
                      read_checkpoint(split / "checkpoints/final.fbck"));
  }
}

TEST_CASE("checkpoints round trip bit-exactly") {
  TempDir dir("fbalign_cli_ckpt");
  auto j = toy_at("usf_init", dir.path / "run");
  j["constraints"] = {{"alignment_penalty", {{"lambda", 0.1}}}, {"norm_constraint", true}};
  j["strategy"] = "bp";
  const ExperimentConfig c = parse_config(j);
  TrainingSession s = make_session(c, 4);
  const CheckpointData data = capture_session(c, s, 1.5);
  write_checkpoint(dir.path / "a.fbck", data);
  const CheckpointData back = read_checkpoint(dir.path / "a.fbck");
  nlohmann::json manifest = back.manifest;
  manifest.erase("tensors");  // index added by the writer
  CHECK(manifest == data.manifest);
  check_same_params(data, back);
  write_checkpoint(dir.path / "b.fbck", back);
  CHECK((slurp(dir.path / "a.fbck") == slurp(dir.path / "b.fbck")));
  CHECK(checkpoint_wall_seconds(back) == 1.5);

  std::string bytes = slurp(dir.path / "a.fbck");
  bytes[0] = 'X';
  std::ofstream(dir.path / "bad.fbck", std::ios::binary) << bytes;
  CHECK_THROWS_AS(read_checkpoint(dir.path / "bad.fbck"), FormatError);
  std::ofstream(dir.path / "short.fbck", std::ios::binary) << slurp(dir.path / "a.fbck").substr(0, 40);
  CHECK_THROWS_AS(read_checkpoint(dir.path / "short.fbck"), FormatError);
}

TEST_CASE("resume refuses mismatched runs and incomplete checkpoints") {
  TempDir dir("fbalign_cli_refuse");
  auto j = toy_at("fa", dir.path / "run");
  j["epochs"] = 1;
  const fs::path cfg = write_config(dir.path, "fa.cfg", j);
  REQUIRE(cli("train " + cfg.string()) == 0);
  const fs::path ckpt = dir.path / "run/checkpoints/final.fbck";

  auto other = j;
  other["strategy"] = "bp";
  const fs::path bp_cfg = write_config(dir.path, "bp.cfg", other);
  CHECK(cli("resume " + ckpt.string() + " --config " + bp_cfg.string()) == 2);
  try {
    resume_training(ckpt, parse_config(other));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("strategy") != std::string::npos);
  }

  // Extending the epoch count keeps the identity.
  auto longer = j;
  longer["epochs"] = 2;
  CHECK(cli("resume " + ckpt.string() + " --config " + write_config(dir.path, "long.cfg", longer).string()) == 0);

  CheckpointData data = read_checkpoint(ckpt);
  for (auto it = data.tensors.begin(); it != data.tensors.end();) {
    it = it->first.rfind("feedback/", 0) == 0 ? data.tensors.erase(it) : std::next(it);
  }
  write_checkpoint(dir.path / "stripped.fbck", data);
  try {
    resume_training(dir.path / "stripped.fbck");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("feedback") != std::string::npos);
  }
  CHECK(cli("resume " + (dir.path / "stripped.fbck").string()) == 1);
}
