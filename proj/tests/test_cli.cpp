#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "mv3d/eval/report.hpp"
#include "mv3d/io/dataset.hpp"

using namespace mv3d;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun cli(const std::string& args) {
  const fs::path err = fs::temp_directory_path() / "mv3d_cli_stderr.txt";
  const std::string cmd = std::string(MV3D_CLI_PATH) + " " + args + " 2>" + err.string();
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  for (std::size_t n; (n = std::fread(buf.data(), 1, buf.size(), p)) > 0;) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream e(err);
  r.err.assign(std::istreambuf_iterator<char>(e), std::istreambuf_iterator<char>());
  return r;
}

std::string slurp(const fs::path& p) {
  EXPECT_TRUE(fs::is_regular_file(p)) << p;
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;
  void SetUp() override {
    dir = fs::temp_directory_path() / ("mv3d_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string at(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_F(Cli, GenDataDefaults) {
  const CliRun r = cli("gen-data --out-dir " + at("s1"));
  ASSERT_EQ(r.code, 0) << r.err;
  const SubjectFiles s = read_subject(at("s1"));
  EXPECT_EQ(s.views.size(), 30u);
  EXPECT_EQ(s.views[0].width, 16);
  EXPECT_NE(s.prompt.find("<V>"), std::string::npos);
  EXPECT_NE(r.out.find("views 30"), std::string::npos);
  const CliRun small = cli("gen-data --out-dir " + at("s2") + " --views 8 --seed 3 --size 24");
  ASSERT_EQ(small.code, 0) << small.err;
  const SubjectFiles t = read_subject(at("s2"));
  EXPECT_EQ(t.views.size(), 8u);
  EXPECT_EQ(t.views[0].height, 24);
}

TEST_F(Cli, GenDataRefusesToOverwrite) {
  ASSERT_EQ(cli("gen-data --views 4 --out-dir " + at("s")).code, 0);
  const CliRun again = cli("gen-data --views 4 --out-dir " + at("s"));
  EXPECT_EQ(again.code, 2);
  EXPECT_NE(again.err.find("mv3d-error code=2"), std::string::npos);
  EXPECT_EQ(cli("gen-data --views 4 --force --out-dir " + at("s")).code, 0);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("gen-data --no-such-flag 1 --out-dir " + at("x")).code, 2);
  EXPECT_EQ(cli("gen-data --views 0 --out-dir " + at("x")).code, 2);
  EXPECT_EQ(cli("gen-data --background plaid --out-dir " + at("x")).code, 2);
  EXPECT_EQ(cli("gen-data").code, 2);
  std::ofstream(at("bad.cfg")) << "views = 4\nbogus_key = 1\n";
  EXPECT_EQ(cli("gen-data --config " + at("bad.cfg") + " --out-dir " + at("x")).code, 2);
  const CliRun io = cli("eval-geom --gen-dir " + at("missing") + " --gt-dir " + at("missing") + " --out-dir " + at("o"));
  EXPECT_EQ(io.code, 4);
  EXPECT_NE(io.err.find("kind=io"), std::string::npos);
  EXPECT_EQ(cli("eval-fid --embedder clip --frames-dir " + at("f") + " --dataset-dir " + at("d") + " --out-dir " + at("o")).code, 2);
}

TEST_F(Cli, HelpListsEveryKey) {
  const CliRun r = cli("train-joint --help");
  EXPECT_EQ(r.code, 0);
  for (const char* k : {"--stage", "--iters", "--lr", "--seed", "--out-dir", "--backbone", "--checkpoint-every",
                        "--lora-rank", "--lora-alpha", "--dataset-dir", "--n-c", "--adapters", "--skip-pretrain", "--config"})
    EXPECT_NE(r.out.find(k), std::string::npos) << k;
  const CliRun g = cli("gen-data --help");
  for (const char* k : {"--out-dir", "--seed", "--views", "--size", "--background", "--force"})
    EXPECT_NE(g.out.find(k), std::string::npos) << k;
}

TEST_F(Cli, EvalGeomSelfIsZero) {
  ASSERT_EQ(cli("gen-data --views 8 --size 24 --out-dir " + at("s1")).code, 0);
  const CliRun r = cli("eval-geom --gen-dir " + at("s1") + " --gt-dir " + at("s1") + " --out-dir " + at("g") + " --export-ply");
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream f(dir / "g" / "geometry.csv");
  std::string line;
  std::getline(f, line);
  std::getline(f, line);
  std::getline(f, line);
  ASSERT_EQ(line.rfind("s1,", 0), 0u) << line;
  std::vector<std::string> cells;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
  ASSERT_GE(cells.size(), 4u);
  EXPECT_LT(std::stod(cells[3]), 1e-3);
  EXPECT_TRUE(fs::exists(dir / "g" / "s1_gen_aligned.ply"));
  EXPECT_TRUE(fs::exists(dir / "g" / "s1_stages.csv"));
}

TEST_F(Cli, PipelineIsByteDeterministic) {
  ASSERT_EQ(cli("gen-data --views 8 --seed 2 --out-dir " + at("s")).code, 0);
  ASSERT_EQ(cli("gen-data --views 8 --seed 2 --out-dir " + at("s_again")).code, 0);
  EXPECT_EQ(slurp(dir / "s" / "views" / "000.png"), slurp(dir / "s_again" / "views" / "000.png"));
  EXPECT_EQ(slurp(dir / "s" / "depth" / "005.dpth"), slurp(dir / "s_again" / "depth" / "005.dpth"));

  const std::string bb = "pretrain --stage backbone --iters 20 --seed 1 --out-dir ";
  ASSERT_EQ(cli(bb + at("bb")).code, 0);
  ASSERT_EQ(cli(bb + at("bb2")).code, 0);
  EXPECT_EQ(slurp(dir / "bb" / "backbone.mvck"), slurp(dir / "bb2" / "backbone.mvck"));

  const std::string train = "train-joint --skip-pretrain --iters 3 --seed 4 --backbone " + at("bb/backbone.mvck") +
                            " --dataset-dir " + at("s") + " --out-dir ";
  const CliRun t = cli(train + at("j1"));
  ASSERT_EQ(t.code, 0) << t.err;
  ASSERT_EQ(cli(train + at("j2")).code, 0);
  EXPECT_EQ(slurp(dir / "j1" / "adapters.mvck"), slurp(dir / "j2" / "adapters.mvck"));

  const std::string smp = "sample --steps 3 --frames 2 --seed 5 --backbone " + at("bb/backbone.mvck") + " --adapters " +
                          at("j1/adapters.mvck") + " --dataset-dir " + at("s") + " --out-dir ";
  const CliRun s1 = cli(smp + at("f1"));
  ASSERT_EQ(s1.code, 0) << s1.err;
  ASSERT_EQ(cli(smp + at("f2")).code, 0);
  EXPECT_EQ(slurp(dir / "f1" / "frame_001.png"), slurp(dir / "f2" / "frame_001.png"));

  const CliRun a = cli("export-attn --backbone " + at("bb/backbone.mvck") + " --adapters " + at("j1/adapters.mvck") +
                    " --dataset-dir " + at("s") + " --view 5 --out-dir " + at("attn"));
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_TRUE(fs::exists(dir / "attn" / "router.csv"));
  const CliRun fid = cli("eval-fid --frames-dir " + at("f1") + " --dataset-dir " + at("s") + " --out-dir " + at("fid"));
  ASSERT_EQ(fid.code, 0) << fid.err;
}
