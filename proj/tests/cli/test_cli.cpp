// End-to-end tests of the command-line tool: every subcommand is exercised
// through a real subprocess, checking exit codes, artifacts, determinism, and
// the resume path. STF_CLI_BIN is injected by the build.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) lines.push_back(line);
  return lines;
}

fs::path scratch_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "stfusion_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string scratch(const std::string& rel) { return (scratch_root() / rel).string(); }

RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
  static int counter = 0;
  const std::string out_file = scratch("io/out" + std::to_string(counter) + ".txt");
  const std::string err_file = scratch("io/err" + std::to_string(counter) + ".txt");
  ++counter;
  fs::create_directories(fs::path(out_file).parent_path());
  std::string cmd = env_prefix + std::string(STF_CLI_BIN) + " " + args + " >" + out_file +
                    " 2>" + err_file;
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

// shared tiny-model overrides so training invocations finish in seconds
const std::string kTinyModel =
    " --set d=8 --set heads=2 --set layers_vision=1 --set layers_scene=1"
    " --set layers_text=1 --set layers_fusion=1 --set embed_dim=6 --set max_ocr=4"
    " --set max_text=8";

const std::string kCorpus = scratch("corpus.jsonl");

void require_corpus() {
  static bool made = false;
  if (made) return;
  RunResult r = run_cli("gen --out " + kCorpus + " --items 8 --seed 5 --ocr-prob 1.0");
  REQUIRE(r.code == 0);
  made = true;
}

}  // namespace

TEST_CASE("help is help and a missing subcommand is a usage error") {
  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("gen --help").code == 0);
  CHECK(run_cli("").code == 1);
  CHECK(run_cli("frobnicate").code == 1);
}

TEST_CASE("enum flags reject unknown values with the valid names listed") {
  require_corpus();
  RunResult r = run_cli("train --corpus " + kCorpus + " --out " + scratch("nope") +
                        " --strategy telepathy");
  CHECK(r.code == 1);
  CHECK(r.err.find("fusion_token") != std::string::npos);
  CHECK(r.err.find("late_fusion") != std::string::npos);
  CHECK(r.err.find("vision_only") != std::string::npos);
}

TEST_CASE("gen is deterministic and validates before writing") {
  const std::string a = scratch("gen_a.jsonl");
  const std::string b = scratch("gen_b.jsonl");
  const std::string c = scratch("gen_c.jsonl");
  REQUIRE(run_cli("gen --out " + a + " --items 10 --seed 3").code == 0);
  REQUIRE(run_cli("gen --out " + b + " --items 10 --seed 3").code == 0);
  REQUIRE(run_cli("gen --out " + c + " --items 10 --seed 4").code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a) != slurp(c));

  const std::string bad = scratch("gen_bad.jsonl");
  RunResult r = run_cli("gen --out " + bad + " --items 10 --vocab 4");
  CHECK(r.code == 2);
  CHECK_FALSE(fs::exists(bad));  // validation failed before any write
}

TEST_CASE("train writes config, metrics, and checkpoints") {
  require_corpus();
  const std::string dir = scratch("train_basic");
  RunResult r = run_cli("train --corpus " + kCorpus + " --out " + dir +
                        " --steps 4 --batch-size 4 --seed 7 --lr 0.001" + kTinyModel);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir + "/config.txt"));
  CHECK(fs::exists(dir + "/checkpoint_final.bin"));
  CHECK(fs::exists(dir + "/checkpoint_best.bin"));

  const std::string cfg_text = slurp(dir + "/config.txt");
  CHECK(cfg_text.find("d=8") != std::string::npos);
  CHECK(cfg_text.find("steps=4") != std::string::npos);

  const auto metrics = lines_of(slurp(dir + "/metrics.jsonl"));
  REQUIRE(metrics.size() == 5);  // one run header + four steps
  CHECK(metrics[0].find("\"record\":\"run\"") != std::string::npos);
  CHECK(metrics[0].find("\"n_params\"") != std::string::npos);
  for (size_t i = 1; i < metrics.size(); ++i) {
    CHECK(metrics[i].find("\"record\":\"step\"") != std::string::npos);
    CHECK(metrics[i].find("\"step\":" + std::to_string(i)) != std::string::npos);
  }
}

TEST_CASE("an interrupted run resumed from its checkpoint matches the uninterrupted one") {
  require_corpus();
  const std::string shared = " --corpus " + kCorpus +
                             " --batch-size 4 --seed 9 --lr 0.001" + kTinyModel;
  const std::string da = scratch("resume_full");
  const std::string db = scratch("resume_half");
  const std::string dc = scratch("resume_cont");
  REQUIRE(run_cli("train --out " + da + " --steps 6" + shared).code == 0);
  REQUIRE(run_cli("train --out " + db + " --steps 3" + shared).code == 0);
  REQUIRE(run_cli("train --out " + dc + " --steps 6 --resume " + db +
                  "/checkpoint_final.bin" + shared)
              .code == 0);

  // the continued run reproduces exactly the steps the full run took
  const auto full = lines_of(slurp(da + "/metrics.jsonl"));
  const auto cont = lines_of(slurp(dc + "/metrics.jsonl"));
  REQUIRE(full.size() == 7);
  REQUIRE(cont.size() == 4);  // header + steps 4,5,6
  CHECK(cont[0].find("\"start_step\":3") != std::string::npos);
  CHECK(cont[1] == full[4]);
  CHECK(cont[2] == full[5]);
  CHECK(cont[3] == full[6]);

  // and lands on the byte-identical final checkpoint
  CHECK(slurp(dc + "/checkpoint_final.bin") == slurp(da + "/checkpoint_final.bin"));

  // resuming from a missing checkpoint is an I/O failure
  const std::string de = scratch("resume_missing");
  RunResult r = run_cli("train --out " + de + " --steps 2 --resume " + da +
                        "/nonexistent.bin" + shared);
  CHECK(r.code == 2);
}

TEST_CASE("eval writes a three-line report and prints forward counters") {
  require_corpus();
  const std::string train_dir = scratch("train_for_eval");
  REQUIRE(run_cli("train --corpus " + kCorpus + " --out " + train_dir +
                  " --steps 2 --batch-size 4 --seed 11" + kTinyModel)
              .code == 0);
  const std::string dir = scratch("eval_out");
  RunResult r = run_cli("eval --checkpoint " + train_dir + "/checkpoint_final.bin --corpus " +
                        kCorpus + " --out " + dir);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("forwards: visual=8") != std::string::npos);
  CHECK(r.out.find("R@1") != std::string::npos);

  const auto rep = lines_of(slurp(dir + "/report.jsonl"));
  REQUIRE(rep.size() == 3);
  CHECK(rep[0].find("\"record\":\"provenance\"") != std::string::npos);
  CHECK(rep[1].find("image_to_text") != std::string::npos);
  CHECK(rep[2].find("text_to_image") != std::string::npos);
  CHECK(fs::exists(dir + "/report.txt"));

  // the oracle ranking produces the same report lines
  const std::string dir2 = scratch("eval_oracle");
  REQUIRE(run_cli("eval --checkpoint " + train_dir + "/checkpoint_final.bin --corpus " +
                  kCorpus + " --out " + dir2 + " --oracle")
              .code == 0);
  CHECK(slurp(dir2 + "/report.jsonl") == slurp(dir + "/report.jsonl"));
}

TEST_CASE("embed dumps one embedding file per side with id sidecars") {
  require_corpus();
  const std::string train_dir = scratch("train_for_embed");
  REQUIRE(run_cli("train --corpus " + kCorpus + " --out " + train_dir +
                  " --steps 2 --batch-size 4 --seed 13" + kTinyModel)
              .code == 0);
  const std::string dir = scratch("embed_out");
  REQUIRE(run_cli("embed --checkpoint " + train_dir + "/checkpoint_final.bin --corpus " +
                  kCorpus + " --out " + dir)
              .code == 0);
  for (const char* name : {"images.bin", "images.bin.ids", "texts.bin", "texts.bin.ids"}) {
    CHECK(fs::exists(dir + "/" + name));
  }
  CHECK(lines_of(slurp(dir + "/images.bin.ids")).size() == 8);
  CHECK(lines_of(slurp(dir + "/texts.bin.ids")).size() == 8);  // one caption per item
}

TEST_CASE("ablate scores every strategy into one table") {
  require_corpus();
  const std::string dir = scratch("ablate_out");
  RunResult r = run_cli("ablate --corpus " + kCorpus + " --out " + dir +
                        " --steps 2 --batch-size 4 --seed 15" + kTinyModel);
  REQUIRE(r.code == 0);
  const auto rows = lines_of(slurp(dir + "/ablation.jsonl"));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].find("fusion_token") != std::string::npos);
  CHECK(rows[1].find("late_fusion") != std::string::npos);
  CHECK(rows[2].find("vision_only") != std::string::npos);
  CHECK(rows[2].find("scene_text_free") != std::string::npos);
  CHECK(fs::exists(dir + "/ablation.txt"));
}

TEST_CASE("relative output paths are rooted at STFUSION_OUTPUT_ROOT") {
  const std::string root = scratch("rooted");
  fs::create_directories(root);
  RunResult r = run_cli("gen --out sub/corpus.jsonl --items 4 --seed 17",
                        "STFUSION_OUTPUT_ROOT=" + root + " ");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(root + "/sub/corpus.jsonl"));
}

TEST_CASE("reading a missing corpus is an I/O failure, not a crash") {
  RunResult r = run_cli("train --corpus " + scratch("ghost.jsonl") + " --out " +
                        scratch("ghost_out") + " --steps 2");
  CHECK(r.code == 2);
  CHECK(r.err.find("ghost.jsonl") != std::string::npos);
}
