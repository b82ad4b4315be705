#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <sys/wait.h>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(UNGLASS_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

}  // namespace

TEST_CASE("cli rejects bad usage") {
  CHECK(run("") != 0);
  CHECK(run("no-such-command") != 0);
  CHECK(run("train") != 0);
  CHECK(run("remove --checkpoint /nonexistent.ckpt --input x.png") != 0);
}

TEST_CASE("toy-faces is deterministic") {
  const fs::path root = unglass::test::scratch("cli_toy");
  const std::string common = " --n 4 --seed 11 --image-size 32 --glasses 2";
  REQUIRE(run("toy-faces --out " + (root / "a").string() + common) == 0);
  REQUIRE(run("toy-faces --out " + (root / "b").string() + common) == 0);
  const auto eff = read_json(root / "a" / "effective_config.json");
  CHECK(eff.at("n") == 4);
  CHECK(eff.at("seed") == 11);
  CHECK(eff.at("image_size") == 32);
  for (const auto& e : fs::recursive_directory_iterator(root / "a" / "faces")) {
    if (!e.is_regular_file()) continue;
    const fs::path twin = root / "b" / fs::relative(e.path(), root / "a");
    CHECK(slurp(e.path()) == slurp(twin));
  }
}

TEST_CASE("config file sits below explicit flags") {
  const fs::path root = unglass::test::scratch("cli_config");
  {
    std::ofstream cfg(root / "cfg.json");
    cfg << R"({"n": 2, "seed": 4, "image_size": 32, "glasses": 0})";
  }
  REQUIRE(run("toy-faces --config " + (root / "cfg.json").string() + " --seed 9 --out " + (root / "o").string()) == 0);
  const auto eff = read_json(root / "o" / "effective_config.json");
  CHECK(eff.at("n") == 2);
  CHECK(eff.at("seed") == 9);
}

TEST_CASE("end-to-end pipeline") {
  const fs::path root = unglass::test::scratch("cli_pipeline");
  const std::string toy = (root / "toy").string(), data = (root / "data").string(), model = (root / "model").string();
  REQUIRE(run("toy-faces --n 8 --seed 1 --image-size 32 --faces-per-identity 2 --glasses 3 --out " + toy) == 0);
  REQUIRE(run("synth-data --faces " + toy + "/faces --glasses " + toy + "/glasses --image-size 32 --seed 2 --out " +
              data) == 0);
  CHECK(fs::exists(fs::path(data) / "manifest.jsonl"));
  CHECK(fs::exists(fs::path(data) / "effective_config.json"));

  REQUIRE(run("train --data " + data +
              " --steps 3 --batch-size 2 --depth 3 --base-channels 4 --image-size 32 --d-base-channels 4"
              " --ie-pretrain-steps 2 --checkpoint-every 0 --seed 3 --out " + model) == 0);
  const fs::path ckpt = fs::path(model) / "final.ckpt";
  REQUIRE(fs::exists(ckpt));
  CHECK(fs::exists(fs::path(model) / "metrics.jsonl"));
  const auto train_eff = read_json(fs::path(model) / "effective_config.json");
  CHECK(train_eff.at("train").at("steps") == 3);
  CHECK(train_eff.at("train").at("generator").at("input_size") == 32);

  std::ifstream manifest(fs::path(data) / "manifest.jsonl");
  std::string line;
  REQUIRE(std::getline(manifest, line));
  const fs::path x = fs::path(data) / json::parse(line).at("x_path").get<std::string>();

  const std::string removed = (root / "removed").string();
  REQUIRE(run("remove --checkpoint " + ckpt.string() + " --input " + x.string() + " --out " + removed) == 0);
  const auto outputs = read_json(fs::path(removed) / "outputs.json");
  REQUIRE(outputs.size() == 1);
  CHECK(fs::exists(outputs[0].at("y_hat").get<std::string>()));
  CHECK(fs::exists(outputs[0].at("m_hat").get<std::string>()));

  // Inputs must match the model size.
  const std::string small = (root / "small").string();
  REQUIRE(run("toy-faces --n 1 --image-size 16 --glasses 0 --out " + small) == 0);
  CHECK(run("remove --checkpoint " + ckpt.string() + " --input " + small + "/faces/face_000000.png --out " +
            (root / "bad").string()) != 0);

  const std::string recog = (root / "recog").string();
  REQUIRE(run("eval-recog --data " + data + " --checkpoint " + ckpt.string() + " --out " + recog) == 0);
  const auto report = read_json(fs::path(recog) / "report.json");
  CHECK(report.at("rows").size() == 7);
  CHECK(report.at("cosine_improvement").at("total") == 8);

  const std::string fid = (root / "fid").string();
  REQUIRE(run("eval-fid --real " + data + "/x --fake " + data + "/x --embed-dim 4 --out " + fid) == 0);
  CHECK(std::abs(read_json(fs::path(fid) / "fid.json").at("fid").get<double>()) < 1e-8);

  const std::string extract = (root / "extract").string();
  REQUIRE(run("extract-glasses --checkpoint " + ckpt.string() + " --input " + x.string() + " --out " + extract) == 0);
  CHECK(fs::exists(fs::path(extract) / "result.json"));
}
