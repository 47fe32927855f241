#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mdan_cli_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

int run(const std::string& args) {
    const std::string cmd = std::string(MDAN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

const std::string kBinary = std::string(MDAN_CONFIG_DIR) + "/binary.tsv";
const std::string kEkman = std::string(MDAN_CONFIG_DIR) + "/ekman6.tsv";

}  // namespace

TEST_CASE("usage errors exit with code 1") {
    CHECK(run("") == 1);
    CHECK(run("no-such-command") == 1);
    CHECK(run("train --out x.ckpt") == 1);  // missing --hierarchy
    TempDir dir;
    CHECK(run("train --hierarchy " + kBinary + " --out " + dir.file("x.ckpt") +
              " --input 20") == 1);  // config rejected
}

TEST_CASE("missing input files exit with code 2") {
    TempDir dir;
    CHECK(run("train --hierarchy /nonexistent.tsv --out " + dir.file("x.ckpt")) == 2);
    CHECK(run("eval --hierarchy " + kBinary + " --checkpoint /nonexistent.ckpt") == 2);
    CHECK(run("predict --hierarchy " + kBinary + " --checkpoint /nonexistent.ckpt --image a.ppm") ==
          2);
}

TEST_CASE("gradient fault injection exits with code 3") {
    CHECK(run("grad-check") == 0);
    CHECK(run("grad-check --inject-fault") == 3);
}

TEST_CASE("train, eval, predict and export-cam chain together") {
    TempDir dir;
    const std::string ckpt = dir.file("m.ckpt");
    CHECK(run("train --hierarchy " + kEkman + " --samples 4 --epochs 1 --input 32 --out " + ckpt +
              " --curve " + dir.file("curve.csv")) == 0);
    CHECK(fs::exists(ckpt));
    CHECK(slurp(dir.file("curve.csv")).rfind("epoch,step,loss", 0) == 0);

    CHECK(run("eval --hierarchy " + kEkman + " --checkpoint " + ckpt +
              " --samples 2 --gen-seed 9 --format csv --out " + dir.file("report.csv")) == 0);
    CHECK(slurp(dir.file("report.csv")).rfind("level,head,alpha,accuracy", 0) == 0);

    CHECK(run("gen-data --hierarchy " + kEkman + " --samples 1 --input 32 --out " +
              dir.file("ds")) == 0);
    CHECK(fs::exists(dir.file("ds/index.tsv")));

    CHECK(run("predict --hierarchy " + kEkman + " --checkpoint " + ckpt + " --image " +
              dir.file("ds/happiness_0.ppm") + " --out " + dir.file("pred.json")) == 0);
    const std::string pred = slurp(dir.file("pred.json"));
    CHECK(pred.find("\"levels\"") != std::string::npos);
    CHECK(pred.find("\"hierarchy_violations\"") != std::string::npos);

    CHECK(run("export-cam --hierarchy " + kEkman + " --checkpoint " + ckpt + " --image " +
              dir.file("ds/happiness_0.ppm") + " --out " + dir.file("cams")) == 0);
    CHECK(fs::exists(dir.file("cams/fused_level2.pgm")));

    // evaluating against an index on disk
    CHECK(run("eval --hierarchy " + kEkman + " --checkpoint " + ckpt + " --data " +
              dir.file("ds/index.tsv") + " --out " + dir.file("report.jsonl")) == 0);
    CHECK(slurp(dir.file("report.jsonl")).find("\"head\":\"violations\"") != std::string::npos);
}

TEST_CASE("identical seeds give identical checkpoints, different seeds do not") {
    TempDir dir;
    const std::string base = "train --hierarchy " + kBinary +
                             " --samples 3 --epochs 1 --input 32 ";
    CHECK(run(base + "--seed 5 --out " + dir.file("a.ckpt")) == 0);
    CHECK(run(base + "--seed 5 --out " + dir.file("b.ckpt")) == 0);
    CHECK(run(base + "--seed 6 --out " + dir.file("c.ckpt")) == 0);
    CHECK(slurp(dir.file("a.ckpt")) == slurp(dir.file("b.ckpt")));
    CHECK(slurp(dir.file("a.ckpt")) != slurp(dir.file("c.ckpt")));
}

TEST_CASE("epochs can be zero for a pure initialization run") {
    TempDir dir;
    CHECK(run("train --hierarchy " + kBinary + " --samples 2 --epochs 0 --input 32 --out " +
              dir.file("init.ckpt")) == 0);
    CHECK(fs::exists(dir.file("init.ckpt")));
}

TEST_CASE("sweeps emit CSV tables") {
    TempDir dir;
    const std::string ckpt = dir.file("m.ckpt");
    REQUIRE(run("train --hierarchy " + kBinary + " --samples 3 --epochs 1 --input 32 --out " +
                ckpt) == 0);
    CHECK(run("sweep-alpha --hierarchy " + kBinary + " --checkpoint " + ckpt +
              " --samples 2 --steps 4 --out " + dir.file("alpha.csv")) == 0);
    const std::string alpha = slurp(dir.file("alpha.csv"));
    CHECK(alpha.rfind("alpha,acc_overall_l1", 0) == 0);

    CHECK(run("sweep-mapping --hierarchy " + kBinary +
              " --samples 2 --epochs 1 --input 32 --out " + dir.file("map.csv")) == 0);
    CHECK(slurp(dir.file("map.csv")).find("sequential+fusion") != std::string::npos);
}

TEST_CASE("ablation flags reach the model configuration") {
    TempDir dir;
    const std::string base = "train --hierarchy " + kEkman +
                             " --samples 2 --epochs 0 --input 32 ";
    CHECK(run(base + "--out " + dir.file("full.ckpt")) == 0);
    CHECK(run(base + "--ablate mhcca --out " + dir.file("plain.ckpt")) == 0);
    CHECK(run(base + "--ablate bogus --out " + dir.file("x.ckpt")) == 1);
    CHECK(slurp(dir.file("full.ckpt")) != slurp(dir.file("plain.ckpt")));
}
