#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "support.hpp"

namespace fs = std::filesystem;
using namespace gasr::testing;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

Result run(const fs::path& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = "cd '" + dir.string() + "' && '" + GASR_CLI_PATH + "' " + args + " >'" + out.string() +
                          "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// A failing command prints exactly one JSON line on stderr.
nlohmann::json error_line(const Result& r) {
  REQUIRE(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  return nlohmann::json::parse(r.err);
}

const std::string kTinyModel = "--hidden 8 --layers 1 --heads 2 --ffn 16 --max-positions 96";

// Small corpora shared by the training commands.
fs::path corpora() {
  static const fs::path dir = [] {
    const auto d = temp_dir("cli-corpora");
    for (const auto& [name, seed, count] : std::vector<std::tuple<std::string, int, int>>{
             {"train.tsv", 1, 60}, {"dev.tsv", 2, 12}, {"ood.tsv", 3, 12}}) {
      const std::string domain = name == "ood.tsv" ? "ood" : "clean";
      const auto r = run(d, "gen-data --seed " + std::to_string(seed) + " --count " + std::to_string(count) +
                                " --domain " + domain + " --vocab-size 16 --frame-dim 4 --out " + name);
      REQUIRE(r.code == 0);
    }
    return d;
  }();
  return dir;
}

std::string sft_args(const fs::path& out, int steps = 6) {
  const auto c = corpora();
  return "sft --train '" + (c / "train.tsv").string() + "' --dev '" + (c / "dev.tsv").string() + "' --out '" +
         out.string() + "' " + kTinyModel + " --max-steps " + std::to_string(steps) +
         " --batch-size 4 --eval-every 3 --eval-max-len 10 --warmup-steps 1 --quiet";
}

fs::path sft_checkpoint() {
  static const fs::path stem = [] {
    const auto d = temp_dir("cli-sft-init");
    REQUIRE(run(d, sft_args(d / "run")).code == 0);
    return d / "run" / "best";
  }();
  return stem;
}

std::string grpo_args(const fs::path& out, const std::string& extra = "") {
  const auto c = corpora();
  return "grpo --init '" + sft_checkpoint().string() + "' --train '" + (c / "train.tsv").string() + "' --dev '" +
         (c / "dev.tsv").string() + "' --out '" + out.string() +
         "' --max-steps 4 --batch-size 2 --num-generations 4 --max-len 10 --eval-every 2 --eval-max-len 10 --quiet " +
         extra;
}

void check_same_run(const fs::path& a, const fs::path& b) {
  for (const char* f : {"metrics.jsonl", "last.bin", "last.manifest", "best.bin", "best.manifest"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
}

}  // namespace

TEST_CASE("usage errors exit 2 with a JSON line") {
  const auto d = temp_dir("cli-usage");
  auto r = run(d, "gen-data --count 5 --out x.tsv --bogus-flag 1");
  CHECK(r.code == 2);
  const auto j = error_line(r);
  CHECK(j["error"] == "usage");
  CHECK(j["code"] == 2);
  CHECK_FALSE(fs::exists(d / "x.tsv"));

  CHECK(run(d, "").code == 2);
  CHECK(run(d, "frobnicate").code == 2);
  CHECK(run(d, "gen-data --count 5 --domain noisy --out x.tsv").code == 2);
  CHECK(run(d, "gen-data --count 0 --out x.tsv").code == 2);
  CHECK(run(d, "score --ref missing.txt --hyp missing.txt").code == 2);
}

TEST_CASE("data errors exit 3 and runtime errors exit 4") {
  const auto d = temp_dir("cli-data");
  spit(d / "ref.txt", "a b c\nd e\n");
  spit(d / "hyp.txt", "a b c\n");
  auto r = run(d, "score --ref ref.txt --hyp hyp.txt");
  CHECK(r.code == 3);
  CHECK(error_line(r)["error"] == "data");

  spit(d / "broken.tsv", "not a corpus\n");
  r = run(d, "eval --ckpt '" + sft_checkpoint().string() + "' --corpus broken.tsv");
  CHECK(r.code == 3);
  CHECK(error_line(r)["message"].get<std::string>().find("header") != std::string::npos);

  r = run(d, "eval --ckpt no/such/checkpoint --corpus '" + (corpora() / "dev.tsv").string() + "'");
  CHECK((r.code == 3 || r.code == 4));
  (void)error_line(r);
}

TEST_CASE("score on identical files prints zero WER") {
  const auto d = temp_dir("cli-score");
  spit(d / "ref.txt", "the cat sat\non the mat\n");
  auto r = run(d, "score --ref ref.txt --hyp ref.txt --out s.json");
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("WER 0.00%", 0) == 0);
  const auto j = nlohmann::json::parse(slurp(d / "s.json"));
  CHECK(j["wer"] == 0.0);
  CHECK(j["ref_tokens"] == 6);
  CHECK(fs::exists(d / "s.json.config"));

  spit(d / "hyp.txt", "the cat cat sat\non mat\n");
  r = run(d, "score --ref ref.txt --hyp hyp.txt");
  REQUIRE(r.code == 0);
  // One insertion and one deletion over six words.
  CHECK(r.out.rfind("WER 33.33% (ins 16.67%, del 16.67%, sub 0.00%)", 0) == 0);
}

TEST_CASE("gen-data is deterministic and persists its config") {
  const auto d = temp_dir("cli-gen");
  REQUIRE(run(d, "gen-data --seed 9 --count 40 --domain ood --out a.tsv").code == 0);
  REQUIRE(run(d, "gen-data --seed 9 --count 40 --domain ood --out b.tsv").code == 0);
  REQUIRE(run(d, "gen-data --seed 10 --count 40 --domain ood --out c.tsv").code == 0);
  CHECK(slurp(d / "a.tsv") == slurp(d / "b.tsv"));
  CHECK(slurp(d / "a.tsv") != slurp(d / "c.tsv"));
  const std::string config = slurp(d / "a.tsv.config");
  CHECK(config.find("seed=9") != std::string::npos);
  CHECK(config.find("domain=\"ood\"") != std::string::npos);

  // The persisted config reproduces the corpus; a flag overrides the file.
  REQUIRE(run(d, "gen-data --config a.tsv.config --out d.tsv").code == 0);
  CHECK(slurp(d / "d.tsv") == slurp(d / "a.tsv"));
  REQUIRE(run(d, "gen-data --config a.tsv.config --seed 10 --out e.tsv").code == 0);
  CHECK(slurp(d / "e.tsv") == slurp(d / "c.tsv"));

  spit(d / "bad.cfg", "seed = 3\nnot_an_option = 1\n");
  const auto r = run(d, "gen-data --config bad.cfg --out f.tsv");
  CHECK(r.code == 2);
  CHECK(error_line(r)["message"].get<std::string>().find("not_an_option") != std::string::npos);
}

TEST_CASE("sft runs are byte-identical and reproducible from the resolved config") {
  const auto d = temp_dir("cli-sft");
  auto r = run(d, sft_args(d / "a"));
  REQUIRE(r.code == 0);
  const auto summary = nlohmann::json::parse(r.out);
  CHECK(summary["last_step"] == 6);
  REQUIRE(run(d, sft_args(d / "b")).code == 0);
  check_same_run(d / "a", d / "b");
  CHECK(fs::exists(d / "a" / "resolved_config.ini"));

  // Replaying the resolved config into a new directory.
  REQUIRE(run(d, "sft --config a/resolved_config.ini --out c").code == 0);
  check_same_run(d / "a", d / "c");

  REQUIRE(run(d, sft_args(d / "s") + " --seed 2").code == 0);
  CHECK(slurp(d / "a" / "last.bin") != slurp(d / "s" / "last.bin"));
}

TEST_CASE("grpo presets, conflicts and determinism") {
  const auto d = temp_dir("cli-grpo");
  auto r = run(d, grpo_args(d / "x", "--algo dapo --beta 0.1"));
  CHECK(r.code == 2);
  CHECK(error_line(r)["message"].get<std::string>().find("dapo") != std::string::npos);
  CHECK(run(d, grpo_args(d / "x", "--reward bleu")).code == 2);
  CHECK(run(d, grpo_args(d / "x", "--num-generations 1")).code == 2);

  REQUIRE(run(d, grpo_args(d / "a", "--reward wer --algo grpo --beta 0.04 --num-generations 4")).code == 0);
  REQUIRE(run(d, grpo_args(d / "b", "--reward wer --algo grpo --beta 0.04 --num-generations 4")).code == 0);
  check_same_run(d / "a", d / "b");

  for (const std::string extra : {"--algo dapo --beta 0", "--algo drgrpo --reward ed", "--beta 0 --decode beam",
                                  "--reward em --reward-scale 2"}) {
    CAPTURE(extra);
    CHECK(run(d, grpo_args(d / "p", extra)).code == 0);
  }
}

TEST_CASE("eval and compare") {
  const auto d = temp_dir("cli-eval");
  const std::string ck = sft_checkpoint().string();
  const std::string dev = (corpora() / "dev.tsv").string();
  REQUIRE(run(d, "eval --ckpt '" + ck + "' --corpus '" + dev + "' --max-len 10 --out a.json").code == 0);
  const auto r = run(d, "eval --ckpt '" + ck + ".manifest' --corpus '" + dev + "' --max-len 10 --out b.json");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("WER") != std::string::npos);
  CHECK(slurp(d / "a.json") == slurp(d / "b.json"));
  const auto report = nlohmann::json::parse(slurp(d / "a.json"));
  CHECK(report["overall"]["utterances"] == 12);

  REQUIRE(run(d, "eval --ckpt '" + ck + "' --corpus '" + dev + "' --decode beam --beam-size 3 --max-len 10 --out c.json")
              .code == 0);
  REQUIRE(run(d, "compare --a a.json --b b.json --out same.json").code == 0);
  CHECK(nlohmann::json::parse(slurp(d / "same.json"))["overall"]["wer"] == 0.0);
  REQUIRE(run(d, "compare --a a.json --b c.json").code == 0);

  // A corpus built for another vocabulary is rejected as a data error.
  REQUIRE(run(d, "gen-data --count 3 --out other.tsv").code == 0);
  CHECK(run(d, "eval --ckpt '" + ck + "' --corpus other.tsv").code == 3);
}
