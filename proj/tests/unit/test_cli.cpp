#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "ditopt/app/commands.hpp"
#include "ditopt/dit/checkpoint.hpp"
#include "ditopt/io/image.hpp"

using namespace ditopt;
using namespace ditopt::app;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& root() {
  static const fs::path r = [] {
    auto p = fs::temp_directory_path() / "ditopt_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return r;
}

int run(std::vector<std::string> args, std::string* log = nullptr) {
  args.insert(args.begin(), "ditopt");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (log) *log = out.str() + err.str();
  return code;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// One-block model on 8x8 synthetic textures: a few seconds for everything below.
fs::path tiny_config() {
  const auto path = root() / "tiny.json";
  if (!fs::exists(path)) {
    const json j = {{"model", {{"depth", 1}, {"hidden", 32}, {"heads", 2}, {"input_size", 8}}},
                    {"data", {{"classes", 4}, {"per_class", 4}}},
                    {"batch", 4}};
    std::ofstream(path) << j.dump(2);
  }
  return path;
}

std::string out_dir(const std::string& name) { return (root() / name).string(); }

}  // namespace

TEST_CASE("train is deterministic and logs the loss CSV") {
  REQUIRE(run({"train", "--config", tiny_config().string(), "--steps", "5", "--out", out_dir("t1")}) == 0);
  REQUIRE(run({"train", "--config", tiny_config().string(), "--steps", "5", "--out", out_dir("t2")}) == 0);
  const auto a = bytes(root() / "t1" / "loss.csv");
  CHECK(a == bytes(root() / "t2" / "loss.csv"));
  std::istringstream csv(a);
  std::string line;
  std::getline(csv, line);
  CHECK(line == kLossCsvHeader);
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 5);
  CHECK(bytes(root() / "t1" / "checkpoint" / "weights.bin") == bytes(root() / "t2" / "checkpoint" / "weights.bin"));

  const auto resolved = json::parse(bytes(root() / "t1" / "resolved_config.json"));
  CHECK(resolved.at("steps") == 5);
  CHECK(resolved.at("batch") == 4);
  CHECK(resolved.at("model").at("hidden") == 32);

  REQUIRE(run({"train", "--config", tiny_config().string(), "--steps", "5", "--seed", "1", "--out", out_dir("t3")}) == 0);
  CHECK(bytes(root() / "t3" / "loss.csv") != a);
}

TEST_CASE("steps=0 checkpoint equals the initialization") {
  REQUIRE(run({"train", "--config", tiny_config().string(), "--steps", "0", "--seed", "9", "--out", out_dir("t0")}) ==
          0);
  const auto loaded = load_checkpoint(root() / "t0" / "checkpoint");
  const DiTModel<float> init(loaded.config(), 9);
  REQUIRE(loaded.parameters().size() == init.parameters().size());
  for (std::size_t i = 0; i < init.parameters().size(); ++i) CHECK(loaded.parameters()[i].value == init.parameters()[i].value);
}

TEST_CASE("sample: one file per class plus a montage, bit-identical reruns") {
  REQUIRE(run({"train", "--config", tiny_config().string(), "--steps", "0", "--out", out_dir("s_ckpt")}) == 0);
  const auto ckpt = (root() / "s_ckpt" / "checkpoint").string();
  for (const char* o : {"s1", "s2"}) {
    REQUIRE(run({"sample", "--checkpoint", ckpt, "--classes", "0,1,2,3,0,1,2,3", "--steps", "5", "--out", out_dir(o)}) ==
            0);
  }
  Index pngs = 0;
  for (const auto& e : fs::directory_iterator(root() / "s1")) {
    if (e.path().extension() != ".png") continue;
    ++pngs;
    CHECK(bytes(e.path()) == bytes(root() / "s2" / e.path().filename()));
  }
  // Repeated class ids share a file name.
  CHECK(pngs == 4 + 1);
}

TEST_CASE("eight classes give eight images and one montage") {
  const auto cfg = root() / "eight.json";
  std::ofstream(cfg) << json{{"model", {{"depth", 1}, {"hidden", 32}, {"heads", 2}, {"input_size", 8}}},
                             {"data", {{"classes", 8}, {"per_class", 1}}},
                             {"batch", 2}}
                            .dump();
  REQUIRE(run({"train", "--config", cfg.string(), "--steps", "0", "--out", out_dir("e_ckpt")}) == 0);
  REQUIRE(run({"sample", "--checkpoint", (root() / "e_ckpt" / "checkpoint").string(), "--classes", "0,1,2,3,4,5,6,7",
               "--steps", "3", "--out", out_dir("e_samples")}) == 0);
  Index samples = 0, montages = 0;
  for (const auto& e : fs::directory_iterator(root() / "e_samples")) {
    const auto n = e.path().filename().string();
    samples += n.rfind("sample_c", 0) == 0;
    montages += n.rfind("montage_", 0) == 0;
    if (e.path().extension() == ".png") {
      const auto img = read_png(e.path());
      for (float v : img.rgb) CHECK((v >= 0.0f && v <= 1.0f));
    }
  }
  CHECK(samples == 8);
  CHECK(montages == 1);
  CHECK(run({"sample", "--checkpoint", (root() / "e_ckpt" / "checkpoint").string(), "--classes", "8", "--out",
             out_dir("e_bad")}) == 2);
}

TEST_CASE("profile: suite, determinism, partial failure and empty list") {
  REQUIRE(run({"profile", "--out", out_dir("p1")}) == 0);
  REQUIRE(run({"profile", "--out", out_dir("p2")}) == 0);
  CHECK(bytes(root() / "p1" / "profile.csv") == bytes(root() / "p2" / "profile.csv"));
  const auto rows = json::parse(bytes(root() / "p1" / "profile.json"));
  REQUIRE(rows.size() == 12);
  CHECK(rows[0].at("name") == "S/2-base");
  CHECK(std::abs(rows[0].at("gflops").get<double>() - 6.07) / 6.07 <= 0.01);

  const auto mixed = root() / "mixed.json";
  std::ofstream(mixed) << json{{"profile_configs", {"XS/4-base", {{"name", "broken"}, {"hidden", 30}, {"heads", 4}}}}}.dump();
  CHECK(run({"profile", "--config", mixed.string(), "--out", out_dir("p3")}) == 1);
  const auto mixed_rows = json::parse(bytes(root() / "p3" / "profile.json"));
  REQUIRE(mixed_rows.size() == 2);
  CHECK_FALSE(mixed_rows[0].contains("error"));
  CHECK(mixed_rows[1].contains("error"));

  const auto empty = root() / "empty.json";
  std::ofstream(empty) << R"({"profile_configs": []})";
  CHECK(run({"profile", "--config", empty.string(), "--out", out_dir("p4")}) == 0);
  CHECK(bytes(root() / "p4" / "profile.csv") == "name,params_m,activated_m,gflops,throughput_it_s\n");
  CHECK(json::parse(bytes(root() / "p4" / "profile.json")).empty());
}

TEST_CASE("prune and quantize compose") {
  REQUIRE(run({"train", "--config", tiny_config().string(), "--steps", "3", "--out", out_dir("c_ckpt")}) == 0);
  REQUIRE(run({"prune", "--checkpoint", (root() / "c_ckpt" / "checkpoint").string(), "--keep-heads", "1", "--out",
               out_dir("c_pruned")}) == 0);
  const auto report = json::parse(bytes(root() / "c_pruned" / "prune_report.json"));
  CHECK(report.at("live_heads") == json::array({1}));
  REQUIRE(run({"quantize", "--checkpoint", (root() / "c_pruned" / "checkpoint").string(), "--out", out_dir("c_q")}) ==
          0);
  CHECK(run({"sample", "--checkpoint", (root() / "c_q" / "checkpoint").string(), "--classes", "0,1", "--steps", "3",
             "--out", out_dir("c_samples")}) == 0);
}

TEST_CASE("distill, gen-data and compare") {
  REQUIRE(run({"train", "--config", tiny_config().string(), "--steps", "2", "--out", out_dir("d_teacher")}) == 0);
  REQUIRE(run({"distill", "--config", tiny_config().string(), "--teacher", (root() / "d_teacher" / "checkpoint").string(),
               "--steps", "3", "--alpha", "0.3", "--out", out_dir("d_student")}) == 0);
  std::istringstream csv(bytes(root() / "d_student" / "loss.csv"));
  std::string line;
  std::getline(csv, line);
  std::getline(csv, line);
  CHECK(line.rfind("1,", 0) == 0);

  REQUIRE(run({"gen-data", "--num-classes", "2", "--per-class", "3", "--size", "8", "--out", out_dir("g")}) == 0);
  Index files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root() / "g")) files += e.path().extension() == ".png";
  CHECK(files == 6);

  REQUIRE(run({"compare", "--a", (root() / "g" / "class_000").string(), "--b", (root() / "g" / "class_000").string(),
               "--out", out_dir("cmp")}) == 0);
  const auto same = json::parse(bytes(root() / "cmp" / "compare.json"));
  CHECK(same.at("frechet_distance").get<double>() <= 1e-6);
}

TEST_CASE("exit codes") {
  CHECK(run({"--help"}) == 0);
  CHECK(run({"train", "--no-such-flag"}) == 1);
  CHECK(run({"frobnicate"}) == 1);
  CHECK(run({"train", "--config", (root() / "missing.json").string(), "--out", out_dir("x1")}) != 0);
  CHECK(run({"train", "--config", tiny_config().string(), "--variant", "med-0", "--out", out_dir("x2")}) == 1);
  CHECK(run({"train", "--config", tiny_config().string(), "--data", (root() / "no_folder").string(), "--out",
             out_dir("x3")}) == 2);
  CHECK(run({"sample", "--checkpoint", (root() / "no_ckpt").string(), "--out", out_dir("x4")}) == 2);
  CHECK(run({"train", "--config", tiny_config().string(), "--lr", "1e30", "--steps", "20", "--out", out_dir("x5")}) == 3);
}
