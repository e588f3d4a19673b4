#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kFixtures = AMSEG_FIXTURE_DIR;
const std::string kEmbeddings = kFixtures + "/embeddings.json";

int run(const std::string& args) {
  const std::string cmd = std::string(AMSEG_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

double weighted_f1(const fs::path& results_csv) {
  std::ifstream in(results_csv);
  std::string line;
  std::string last;
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  std::stringstream fields(last);
  std::string field;
  for (int k = 0; k < 5; ++k) std::getline(fields, field, ',');
  return std::stod(field);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("amseg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string convert(const std::string& name) {
    const fs::path out = dir_ / name;
    EXPECT_EQ(run("convert --corpus " + kFixtures + "/corpus --split " + kFixtures + "/split.csv --out " +
                  out.string()),
              0);
    return out.string();
  }

  std::string train(const std::string& data, const std::string& name, const std::string& extra = "") {
    const fs::path out = dir_ / name;
    EXPECT_EQ(run("train --arch sb --embeddings " + kEmbeddings + " --train " + data + "/train.seq --out " +
                  out.string() + " --seed 1 --val-fraction 0.4 " + extra),
              0);
    return out.string();
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, ConvertIsDeterministic) {
  const std::string a = convert("a");
  const std::string b = convert("b");
  for (const char* file : {"train.seq", "test.seq", "conversion_report.json"}) {
    EXPECT_FALSE(slurp(fs::path(a) / file).empty()) << file;
    EXPECT_EQ(slurp(fs::path(a) / file), slurp(fs::path(b) / file)) << file;
  }
  EXPECT_TRUE(fs::exists(fs::path(a) / "manifest.json"));
}

TEST_F(Cli, ConvertEmptyCorpusWritesNothing) {
  fs::create_directories(dir_ / "empty");
  const fs::path out = dir_ / "out";
  EXPECT_EQ(run("convert --corpus " + (dir_ / "empty").string() + " --split " + kFixtures + "/split.csv --out " +
                out.string()),
            1);
  EXPECT_FALSE(fs::exists(out / "train.seq"));
  EXPECT_FALSE(fs::exists(out / "manifest.json"));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("train --arch transformer --embeddings " + kEmbeddings + " --train " + kEmbeddings + " --out " +
                (dir_ / "x").string()),
            2);
  EXPECT_EQ(run("convert --corpus " + kFixtures + "/corpus"), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, FixedSeedGivesIdenticalCheckpoint) {
  const std::string data = convert("data");
  const std::string a = train(data, "a", "--max-epochs 3");
  const std::string b = train(data, "b", "--max-epochs 3");
  const std::string bytes = slurp(fs::path(a) / "model.ckpt");
  ASSERT_FALSE(bytes.empty());
  EXPECT_EQ(bytes, slurp(fs::path(b) / "model.ckpt"));
  EXPECT_EQ(slurp(fs::path(a) / "loss_curve.csv"), slurp(fs::path(b) / "loss_curve.csv"));
}

TEST_F(Cli, MissingCheckpointIsRuntimeError) {
  const std::string data = convert("data");
  EXPECT_EQ(run("evaluate --checkpoint " + (dir_ / "nope.ckpt").string() + " --test " + data +
                "/test.seq --embeddings " + kEmbeddings + " --out " + (dir_ / "eval").string()),
            1);
}

// Long training with generous patience memorizes the two training essays.
TEST_F(Cli, TrainScoresAboveTestAndResultsAppend) {
  const std::string data = convert("data");
  const std::string model = train(data, "run", "--max-epochs 60 --patience 60 --lr 0.02");
  const fs::path results = dir_ / "results.csv";
  auto evaluate = [&](const std::string& file, const std::string& out) {
    return run("evaluate --checkpoint " + model + "/model.ckpt --test " + data + "/" + file + " --embeddings " +
               kEmbeddings + " --out " + (dir_ / out).string() + " --results " + results.string());
  };
  ASSERT_EQ(evaluate("train.seq", "eval_train"), 0);
  const double train_f1 = weighted_f1(results);
  ASSERT_EQ(evaluate("test.seq", "eval_test"), 0);
  const double test_f1 = weighted_f1(results);
  EXPECT_GT(train_f1, test_f1);

  std::ifstream in(results);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "arch,embedding,seed,lr,weighted_f1,accuracy,f1_B,f1_I,f1_O,gap");
  int rows = 0;
  for (std::string line; std::getline(in, line);) rows += line.empty() ? 0 : 1;
  EXPECT_EQ(rows, 2);

  const fs::path labeled = dir_ / "pred.seq";
  EXPECT_EQ(run("predict --checkpoint " + model + "/model.ckpt --input " + data + "/test.seq --embeddings " +
                kEmbeddings + " --output " + labeled.string()),
            0);
  EXPECT_FALSE(slurp(labeled).empty());
}

TEST_F(Cli, SelfTestPasses) { EXPECT_EQ(run("selftest"), 0); }
