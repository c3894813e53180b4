#include "support/doctest_torch.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "p2ld/config.hpp"
#include "p2ld/data.hpp"
#include "p2ld/metrics.hpp"
#include "support/synthetic.hpp"
#include "support/training.hpp"

using namespace p2ld;
using namespace p2ld::testing;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const TempDir& dir, const std::string& args) {
  const auto log = dir / "stdout.txt";
  const std::string cmd = std::string(P2LD_CLI_PATH) + " " + args + " > '" + log.string() + "' 2> '" +
                          (dir / "stderr.txt").string() + "'";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST_CASE("cli: usage errors exit 2") {
  TempDir dir;
  CHECK(run(dir, "").code == 2);
  CHECK(run(dir, "prepare --drawings x --out y").code == 2);
  CHECK(run(dir, "train --dry-run --lr -1").code == 2);
  CHECK(run(dir, "train --dry-run --fusion mean").code == 2);
  CHECK(run(dir, "--help").code == 0);
}

TEST_CASE("cli: train echoes the default configuration") {
  TempDir dir;
  const auto r = run(dir, "train --dry-run");
  CHECK(r.code == 0);
  CHECK(r.out.find("lr=0.0002 betas=(0.5,0.999) epochs=200 batch=1 size=512") != std::string::npos);
}

TEST_CASE("cli: prepare, train, resume, generate, evaluate") {
  TempDir dir;
  write_dataset(dir / "data", 10, 64);
  std::ofstream(dir / "cats.csv") << "img000,Male\nimg001,Female\nimg002,Female\n";

  auto r = run(dir, "prepare --photos " + q(dir / "data/photos") + " --drawings " + q(dir / "data/drawings") +
                        " --categories " + q(dir / "cats.csv") + " --out " + q(dir / "m.json") + " --seed 3 --train-frac 0.7");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("train=7 test=3") != std::string::npos);
  CHECK(r.out.find("Female=2") != std::string::npos);
  CHECK(load_manifest(dir / "m.json").count(Split::Train) == 7);

  auto cfg = tiny_run(0);
  cfg.train.epochs = 1;
  save_run_config(cfg, dir / "tiny.json");
  r = run(dir, "train --manifest " + q(dir / "m.json") + " --config " + q(dir / "tiny.json") + " --out " + q(dir / "run"));
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "run/final.pt"));
  CHECK(count_lines(dir / "run/log.jsonl") == 7);
  CHECK(load_run_config(dir / "run/config.json") == cfg);

  r = run(dir, "train --resume " + q(dir / "run/final.pt"));
  CHECK(r.code == 0);
  CHECK(r.out.find("training complete") != std::string::npos);

  r = run(dir, "train --resume " + q(dir / "run/final.pt") + " --epochs 2 --manifest " + q(dir / "m.json"));
  CHECK(r.code == 0);
  CHECK(count_lines(dir / "run/log.jsonl") == 14);

  r = run(dir, "generate --ckpt " + q(dir / "run/final.pt") + " --input " + q(dir / "data/photos") + " --out " + q(dir / "gen"));
  REQUIRE(r.code == 0);
  std::size_t produced = 0;
  for (const auto& e : fs::directory_iterator(dir / "gen")) {
    ++produced;
    CHECK(fs::exists(dir / "data/photos" / e.path().filename()));
    CHECK(load_rgb(e.path()).rows == 32);
  }
  CHECK(produced == 10);

  r = run(dir, "generate --ckpt " + q(dir / "run/final.pt") + " --input " + q(dir / "data/photos/img004.png") +
                   " --size 64 --out " + q(dir / "one"));
  CHECK(r.code == 0);
  CHECK(load_rgb(dir / "one/img004.png").cols == 64);

  r = run(dir, "evaluate --generated " + q(dir / "data/drawings") + " --ground-truth " + q(dir / "data/drawings") +
                   " --extractor builtin --out " + q(dir / "report.json"));
  REQUIRE(r.code == 0);
  std::ifstream in(dir / "report.json");
  std::stringstream ss;
  ss << in.rdbuf();
  const auto report = report_from_json(ss.str());
  CHECK(report.extractor == "builtin-rand64-seed0");
  CHECK(report.ssim_mean == doctest::Approx(1.0));
  CHECK(std::abs(report.fid) < 1e-6);
  CHECK(report.per_image.size() == 10);
}

TEST_CASE("cli: error classes map to exit codes") {
  TempDir dir;
  fs::create_directories(dir / "p");
  fs::create_directories(dir / "d");
  save_rgb_png(random_image(32, 32, 1), dir / "p/a.png");
  save_rgb_png(random_image(16, 32, 1), dir / "d/a.png");
  CHECK(run(dir, "prepare --photos " + q(dir / "p") + " --drawings " + q(dir / "d") + " --out " + q(dir / "m.json")).code == 1);

  std::ofstream(dir / "bad.pt") << "not a checkpoint";
  CHECK(run(dir, "generate --ckpt " + q(dir / "bad.pt") + " --input " + q(dir / "p") + " --out " + q(dir / "gen")).code == 4);
  CHECK_FALSE(fs::exists(dir / "gen"));
  CHECK(run(dir, "train --resume " + q(dir / "bad.pt")).code == 4);

  fs::create_directories(dir / "other");
  save_rgb_png(random_image(32, 32, 2), dir / "other/b.png");
  CHECK(run(dir, "evaluate --generated " + q(dir / "p") + " --ground-truth " + q(dir / "other") + " --out " +
                     q(dir / "r.json")).code == 5);

  // Exploding learning rate drives the losses non-finite.
  write_dataset(dir / "data", 2, 32);
  save_manifest(split_dataset(scan_pairs(dir / "data/photos", dir / "data/drawings"), 0.5, 0), dir / "m2.json");
  auto cfg = tiny_run(0);
  cfg.train.epochs = 50;
  cfg.train.lr = 1e30;
  save_run_config(cfg, dir / "boom.json");
  CHECK(run(dir, "train --manifest " + q(dir / "m2.json") + " --config " + q(dir / "boom.json") + " --out " + q(dir / "boom")).code == 3);
}
