#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixture_mutations.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(OSFA_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  Run r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path root = fs::temp_directory_path() / "osfa_test_cli";
  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string operator/(const std::string& s) const { return (root / s).string(); }
};

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli("").code == 1);
  CHECK(cli("no-such-command").code == 1);
  CHECK(cli("gen-data --out /tmp/osfa_never --n-seen 0").code == 1);
  CHECK(cli("train --data /nonexistent --out /tmp/osfa_never").code == 1);
  CHECK(cli("report /nonexistent/eval.json").code == 1);
  CHECK(cli("dump-sigma").code == 1);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("gen-data, train, eval, report") {
  Workspace ws;
  const std::string data = ws / "data";
  Run g = cli("gen-data --out " + data + " --seed 4 --n-seen 3 --n-unseen 2 --train-pages 4 --test-pages 3");
  REQUIRE(g.code == 0);
  CHECK(g.out.find("slope") != std::string::npos);
  CHECK(fs::exists(fs::path(data) / "train.json"));
  // refuses to overwrite without --force
  CHECK(cli("gen-data --out " + data + " --n-seen 3 --n-unseen 2").code == 1);

  CHECK(cli("train --data " + data + " --out " + (ws / "bad") + " --set learning_rat=1").code == 1);
  CHECK(cli("train --data " + data + " --out " + (ws / "bad") + " --variant mixup").code == 1);

  const std::string run = ws / "run";
  Run t = cli("train --data " + data + " --out " + run + " --variant channel --epochs 1 --episodes 2 --seed 3");
  REQUIRE(t.code == 0);
  CHECK(t.out.find("seed_noise = 3") != std::string::npos);
  CHECK(t.out.find("epoch 1") != std::string::npos);
  for (const char* f : {"model.ckpt", "config.txt", "run.json"}) CHECK(fs::exists(fs::path(run) / f));

  Run s = cli("dump-sigma --run " + run);
  REQUIRE(s.code == 0);
  CHECK(s.out.rfind("channel,abs_sigma\n", 0) == 0);
  CHECK(std::count(s.out.begin(), s.out.end(), '\n') == 33);

  const std::string ev = ws / "eval";
  Run e = cli("eval --data " + data + " --run " + run + " --out " + ev + " --dump " + (ws / "dets.csv") +
              " --thr-seen 0,80 --thr-unseen 0");
  REQUIRE(e.code == 0);
  const auto j = nlohmann::json::parse(slurp(fs::path(ev) / "eval.json"));
  CHECK(j.at("seen").at("thr").size() == 2);
  CHECK(slurp(ws / "dets.csv").rfind("image_id,query_class,xmin,ymin,xmax,ymax,score\n", 0) == 0);

  Run r = cli("report " + ev + " --format csv");
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("block,variant,thr,mean_ap50,std_ap50,n_seeds\n", 0) == 0);
  CHECK(r.out.find("seen,+Ours,0,") != std::string::npos);
  CHECK(cli("report " + ev).out.find("+Ours") != std::string::npos);

  const std::string oracle = ws / "oracle";
  REQUIRE(cli("eval --data " + data + " --oracle-gt --out " + oracle).code == 0);
  const auto oj = nlohmann::json::parse(slurp(fs::path(oracle) / "eval.json"));
  CHECK(oj.at("seen").at("thresholded").at(0) == 1.0);

  // mismatched threshold lists are rejected
  CHECK(cli("report " + ev + " " + oracle).code == 1);
}

TEST_CASE("gradcheck") {
  const Run ok = cli("gradcheck --seed 1");
  CHECK(ok.code == 0);
  CHECK(ok.out.find("FAIL") == std::string::npos);
  const Run bad = cli("gradcheck --seed 1 --corrupt conv2d");
  CHECK(bad.code != 0);
  CHECK(bad.out.find("FAIL") != std::string::npos);
}

TEST_CASE("parse-annotations") {
  Workspace ws;
  const Run ok = cli(std::string("parse-annotations ") + osfa::testing::kFixturePath);
  CHECK(ok.code == 0);
  const std::string base = slurp(osfa::testing::kFixturePath);
  const auto m = osfa::testing::fixture_mutations().front();
  std::string xml = base;
  xml.replace(xml.find(m.from), m.from.size(), m.to);
  std::ofstream(ws / "bad.xml") << xml;
  const Run bad = cli("parse-annotations " + (ws / "bad.xml"));
  CHECK(bad.code != 0);
  CHECK(bad.out.find(m.path) != std::string::npos);
}
