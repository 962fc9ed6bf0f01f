// End-to-end tests that drive the installed binary as a subprocess: exit
// codes, artifact layout, byte-level determinism, and pause/resume.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int rc = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(CVCORR_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult res;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) res.out.append(buf, n);
  const int status = pclose(pipe);
  res.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path& work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("cvcorr_cli_" + std::to_string(getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string smoke_cfg() { return (fs::path(CVCORR_SRC) / "configs" / "smoke.ini").string(); }

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run("").rc == 2);                       // missing subcommand
  CHECK(run("frobnicate").rc == 2);             // unknown subcommand
  CHECK(run("gen-data --out x.ccvp").rc == 2);  // missing required --config
  CHECK(run("gen-data --config /nonexistent.ini --out x.ccvp").rc == 2);
  CHECK(run("eval --ckpt /nonexistent.ckpt --data /nonexistent.ccvp --out x").rc == 2);
  CHECK(run("--help").rc == 0);
}

TEST_CASE("gen-data is byte-deterministic") {
  const fs::path a = work_dir() / "ds_a.ccvp";
  const fs::path b = work_dir() / "ds_b.ccvp";
  auto r1 = run("gen-data --config " + smoke_cfg() + " --out " + a.string());
  REQUIRE(r1.rc == 0);
  CHECK(r1.out.find("32 samples") != std::string::npos);
  auto r2 = run("gen-data --config " + smoke_cfg() + " --out " + b.string());
  REQUIRE(r2.rc == 0);
  CHECK(read_bytes(a) == read_bytes(b));
}

TEST_CASE("grad-check passes and the negative control is rejected") {
  auto ok = run("grad-check --seed 5");
  CHECK(ok.rc == 0);
  CHECK(ok.out.find("FAIL") == std::string::npos);
  CHECK(ok.out.find("full_model") != std::string::npos);

  auto bad = run("grad-check --negative-control");
  CHECK(bad.rc == 1);
  CHECK(bad.out.find("FAIL") != std::string::npos);
  CHECK(bad.out.find("failed to reject") == std::string::npos);
}

TEST_CASE("train / eval / resume pipeline") {
  const fs::path ds = work_dir() / "ds.ccvp";
  REQUIRE(run("gen-data --config " + smoke_cfg() + " --out " + ds.string()).rc == 0);

  // one uninterrupted run
  const fs::path full = work_dir() / "full.ckpt";
  auto rt = run("train --config " + smoke_cfg() + " --data " + ds.string() + " --out " +
                full.string());
  REQUIRE(rt.rc == 0);
  CHECK(rt.out.find("trained 25 steps") != std::string::npos);

  // same schedule paused mid-flight, then resumed: final checkpoint must be
  // byte-identical to the uninterrupted one
  const fs::path part = work_dir() / "part.ckpt";
  auto rp = run("train --config " + smoke_cfg() + " --data " + ds.string() + " --out " +
                part.string() + " --stop-after 12");
  REQUIRE(rp.rc == 0);
  CHECK(rp.out.find("paused after 12") != std::string::npos);
  const fs::path resumed = work_dir() / "resumed.ckpt";
  auto rr = run("train --config " + smoke_cfg() + " --data " + ds.string() + " --resume " +
                part.string() + " --out " + resumed.string());
  REQUIRE(rr.rc == 0);
  CHECK(read_bytes(full) == read_bytes(resumed));

  // eval artifacts
  const fs::path rep = work_dir() / "report";
  auto re = run("eval --ckpt " + full.string() + " --data " + ds.string() + " --out " +
                rep.string());
  REQUIRE(re.rc == 0);
  CHECK(re.out.find("mIoU") != std::string::npos);
  CHECK(fs::exists(rep / "report.csv"));
  CHECK(fs::exists(rep / "summary.txt"));
  CHECK(fs::exists(rep / "size_buckets.svg"));

  // T=0 adaptation is a bit-exact no-op end to end
  const fs::path rep0 = work_dir() / "report_t0";
  auto r0 = run("eval --ckpt " + full.string() + " --data " + ds.string() + " --out " +
                rep0.string() + " --ttt --ttt-t 0");
  REQUIRE(r0.rc == 0);
  CHECK(read_bytes(rep / "report.csv") == read_bytes(rep0 / "report.csv"));

  // sweep over a comma list writes one row per (k, t, direction)
  const fs::path sw = work_dir() / "sweep";
  auto rs = run("sweep-ttt --ckpt " + full.string() + " --data " + ds.string() +
                " --k-list 1,2 --t-list 0,1 --out " + sw.string());
  REQUIRE(rs.rc == 0);
  const std::string csv = read_bytes(sw / "sweep.csv");
  CHECK(csv.rfind("k,t,direction,mean_iou,mean_latency_ms,n_samples", 0) == 0);
  int rows = 0;
  for (char c : csv) rows += (c == '\n');
  CHECK(rows == 1 + 2 * 2 * 2);
  CHECK(fs::exists(sw / "sweep.svg"));

  // mismatched dataset vs model geometry is a config error
  auto bad = run("train --config " + (fs::path(CVCORR_SRC) / "configs" / "default.ini").string() +
                 " --data " + ds.string() + " --out " + (work_dir() / "x.ckpt").string());
  CHECK(bad.rc == 2);
  CHECK(bad.out.find("config error") != std::string::npos);

  fs::remove_all(work_dir());
}
