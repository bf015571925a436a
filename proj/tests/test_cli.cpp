// End-to-end tests that drive the installed CLI binary.
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

#ifndef REFMC_CLI_PATH
#error "REFMC_CLI_PATH must be defined by the build"
#endif

using namespace refmc;

namespace {

int run(const std::string& args) {
  std::string cmd = std::string(REFMC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

// Writes a small self-contained scene to dir and returns the scene path.
std::string write_cli_scene(const std::filesystem::path& dir) {
  TriangleMesh sph = make_sphere({0, 0, 0}, 1.0f, 12, 24);
  save_obj((dir / "sphere.obj").string(), sph);
  SceneDescription desc;
  MeshDesc md;
  md.obj = "sphere.obj";
  md.kd.constant = {0.7f, 0.5f, 0.3f, 1.0f};
  md.orm.constant = {1.0f, 0.6f, 0.0f};
  md.cache_resolution = {16, 16};
  desc.meshes.push_back(md);
  desc.environment.constant = {1.0f, 0.9f, 0.8f};
  desc.environment.resolution = {32, 16};
  desc.cameras.push_back(CameraDesc{{0, -4, 0}, {0, 0, 0}, {0, 0, 1}, 35.0f, {24, 24}});
  std::string path = (dir / "scene.json").string();
  serialize_scene(path, desc);
  return path;
}

}  // namespace

TEST_CASE("cli usage errors") {
  REQUIRE(run("--help") == 0);
  REQUIRE(run("") != 0);
  REQUIRE(run("render") == 1);                        // missing required options
  REQUIRE(run("no-such-subcommand") == 1);
  REQUIRE(run("render --scene /nonexistent.json --out /tmp/x.hdr") == 2);
}

TEST_CASE("cli render produces deterministic output") {
  auto dir = testutil::tmp_dir("cli_render");
  std::string scene = write_cli_scene(dir);
  std::string a = (dir / "a.hdr").string();
  std::string b = (dir / "b.hdr").string();
  REQUIRE(run("render --scene " + scene + " --out " + a +
              " --spp 4 --depth 2 --seed 7 --workers 1") == 0);
  REQUIRE(run("render --scene " + scene + " --out " + b +
              " --spp 4 --depth 2 --seed 7 --workers 16") == 0);
  auto ba = slurp(a), bb = slurp(b);
  REQUIRE(ba == bb);  // bit-identical across worker counts

  SECTION("different seed changes the image") {
    std::string c = (dir / "c.hdr").string();
    REQUIRE(run("render --scene " + scene + " --out " + c +
                " --spp 4 --depth 2 --seed 8 --workers 1") == 0);
    REQUIRE(slurp(c) != ba);
  }
  SECTION("png output is written with the png signature") {
    std::string p = (dir / "a.png").string();
    REQUIRE(run("render --scene " + scene + " --out " + p + " --spp 2 --seed 7") == 0);
    auto bytes = slurp(p);
    REQUIRE(bytes.size() > 8);
    REQUIRE(static_cast<unsigned char>(bytes[0]) == 0x89);
    REQUIRE(bytes[1] == 'P');
  }
}

TEST_CASE("cli eval") {
  auto dir = testutil::tmp_dir("cli_eval");
  std::string scene = write_cli_scene(dir);
  std::filesystem::create_directories(dir / "r");
  std::filesystem::create_directories(dir / "g");
  REQUIRE(run("render --scene " + scene + " --out " + (dir / "r" / "v0.hdr").string() +
              " --spp 2 --seed 3") == 0);
  std::filesystem::copy_file(dir / "r" / "v0.hdr", dir / "g" / "v0.hdr",
                             std::filesystem::copy_options::overwrite_existing);
  std::string csv = (dir / "eval.csv").string();
  REQUIRE(run("eval --renders " + (dir / "r").string() + " --gt " + (dir / "g").string() +
              " --out " + csv) == 0);
  std::ifstream f(csv);
  std::string line, all;
  while (std::getline(f, line)) all += line + "\n";
  REQUIRE(all.find("v0.hdr") != std::string::npos);
  REQUIRE(all.find("inf") != std::string::npos);  // identical images
}

TEST_CASE("cli make-dataset") {
  auto dir = testutil::tmp_dir("cli_mkds");
  std::string scene = write_cli_scene(dir);
  auto out = dir / "ds";
  REQUIRE(run("make-dataset --scene " + scene + " --out " + out.string() +
              " --views 6 --spp 2 --width 16 --height 16 --seed 5") == 0);
  REQUIRE(std::filesystem::exists(out / "transforms_train.json"));
  REQUIRE(std::filesystem::exists(out / "transforms_test.json"));
  Dataset train = load_dataset((out / "transforms_train.json").string());
  Dataset test = load_dataset((out / "transforms_test.json").string());
  REQUIRE(train.items.size() == 4);  // 2:1 train/test split
  REQUIRE(test.items.size() == 2);
  REQUIRE(train.items[0].image.width == 16);

  SECTION("same seed reproduces the dataset bit-exactly") {
    auto out2 = dir / "ds2";
    REQUIRE(run("make-dataset --scene " + scene + " --out " + out2.string() +
                " --views 6 --spp 2 --width 16 --height 16 --seed 5") == 0);
    for (const auto& item : train.items) {
      auto rel = std::filesystem::path(item.file_path + ".hdr");
      REQUIRE(slurp(out / rel) == slurp(out2 / rel));
    }
  }
}

TEST_CASE("cli optimize round trip", "[slow]") {
  auto dir = testutil::tmp_dir("cli_opt");
  std::string scene = write_cli_scene(dir);
  auto ds = dir / "ds";
  REQUIRE(run("make-dataset --scene " + scene + " --out " + ds.string() +
              " --views 3 --spp 8 --width 16 --height 16 --seed 5") == 0);
  std::string cfg_path = (dir / "opt.json").string();
  {
    std::ofstream f(cfg_path);
    f << R"({"iterations": 4, "cache_warmup": 2, "eval_every": 2,
             "render": {"spp": 2, "depth": 2}})";
  }
  auto out = dir / "out";
  REQUIRE(run("optimize --scene " + scene + " --data " + ds.string() + " --config " + cfg_path +
              " --out " + out.string()) == 0);
  REQUIRE(std::filesystem::exists(out / "metrics.csv"));

  SECTION("unknown config keys are rejected") {
    std::string bad = (dir / "bad.json").string();
    std::ofstream f(bad);
    f << R"({"learning_rate": 0.1})";
    f.close();
    REQUIRE(run("optimize --scene " + scene + " --data " + ds.string() + " --config " + bad +
                " --out " + out.string()) == 2);
  }
}

TEST_CASE("cli selftest") {
  REQUIRE(run("selftest") == 0);
}
