#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "crate/cli.hpp"
#include "crate/serialize.hpp"

using namespace crate;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("crate_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// The dispatcher writes through the global streams; swap their buffers so
// tests can assert on messages without spawning the binary.
struct Capture {
  std::ostringstream out, err;
  std::streambuf* old_out;
  std::streambuf* old_err;
  Capture()
      : old_out(std::cout.rdbuf(out.rdbuf())), old_err(std::cerr.rdbuf(err.rdbuf())) {}
  ~Capture() {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
  }
};

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  Capture cap;
  int code = cli_dispatch(args);
  if (out_text) *out_text = cap.out.str();
  if (err_text) *err_text = cap.err.str();
  return code;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::istringstream in(line);
  std::string cell;
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  return cells;
}

bool same_bytes(const std::string& a, const std::string& b) {
  return read_text_file(a) == read_text_file(b);
}

// One tiny dataset + trained model shared by the pipeline cases.
struct Pipeline {
  TempDir dir;
  std::string data_stem;
  std::string model_stem;

  Pipeline() {
    write_text_file(dir.file("gen.json"),
                    R"({"classes": 2, "tokens": 4, "input_dim": 8, "p_data": 2,
                        "sigma_data": 0.02, "samples_per_class": 24,
                        "test_fraction": 0.25, "seed": 3})");
    REQUIRE(run({"gen-data", "--config", dir.file("gen.json"), "--out",
                 dir.file("data")}) == 0);
    data_stem = dir.file("data") + "/dataset";

    write_text_file(dir.file("train.json"),
                    std::string(R"({"data": ")") + data_stem + R"(",
                        "arch": {"d": 8, "p": 2, "K": 2, "L": 1},
                        "train": {"lr": 0.002, "epochs": 3, "batch_size": 12,
                                  "warmup_epochs": 1, "weight_decay": 0.1},
                        "seed": 7})");
    REQUIRE(run({"train", "--config", dir.file("train.json"), "--out",
                 dir.file("run")}) == 0);
    model_stem = dir.file("run") + "/model";
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("bad invocations exit 1 with guidance") {
  std::string out, err;
  CHECK(run({"train", "--config", "/nowhere/missing.json", "--out", "/tmp/x"}, &out,
            &err) == 1);
  CHECK(err.find("/nowhere/missing.json") != std::string::npos);

  CHECK(run({"frobnicate"}, &out, &err) == 1);
  CHECK(run({}, &out, &err) == 1);
  CHECK(run({"train", "--frob"}, &out, &err) == 1);
  CHECK(err.find("Usage") != std::string::npos);

  CHECK(run({"--help"}, &out, &err) == 0);
  CHECK(out.find("gen-data") != std::string::npos);
  CHECK(out.find("gradcheck") != std::string::npos);
}

TEST_CASE("configs are fail-closed against unknown keys") {
  TempDir dir;
  write_text_file(dir.file("bad.json"), R"({"classes": 2, "bogus": 1})");
  std::string out, err;
  CHECK(run({"gen-data", "--config", dir.file("bad.json"), "--out", dir.file("o")},
            &out, &err) == 1);
  CHECK(err.find("bogus") != std::string::npos);

  write_text_file(dir.file("broken.json"), "{not json");
  CHECK(run({"gen-data", "--config", dir.file("broken.json"), "--out", dir.file("o")},
            &out, &err) == 1);

  // Nested blocks are checked too.
  write_text_file(dir.file("train.json"),
                  R"({"synthetic": {"classes": 2, "tokens": 3, "input_dim": 6,
                      "p_data": 2, "samples_per_class": 4},
                      "arch": {"d": 6, "p": 2, "K": 1, "L": 1},
                      "train": {"lr": 0.001, "epochz": 2}})");
  CHECK(run({"train", "--config", dir.file("train.json"), "--out", dir.file("o")},
            &out, &err) == 1);
  CHECK(err.find("epochz") != std::string::npos);
}

TEST_CASE("gen-data writes a loadable dataset and an echo without run facts") {
  Pipeline& p = pipeline();
  CHECK(fs::exists(p.data_stem + ".json"));
  CHECK(fs::exists(p.data_stem + ".bin"));

  json echo = json::parse(read_text_file(p.dir.file("data") + "/config.echo.json"));
  CHECK(echo.at("classes") == 2);
  CHECK(echo.at("seed") == 3);
  CHECK_FALSE(echo.contains("out"));
  CHECK_FALSE(echo.contains("threads"));
  json info = json::parse(read_text_file(p.dir.file("data") + "/run_info.json"));
  CHECK(info.at("subcommand") == "gen-data");
  CHECK(info.contains("timestamp_utc"));
}

TEST_CASE("--seed overrides the config seed") {
  Pipeline& p = pipeline();
  TempDir dir;
  // Same config, explicit --seed 3 (the config value): identical bytes.
  CHECK(run({"gen-data", "--config", p.dir.file("gen.json"), "--seed", "3", "--out",
             dir.file("same")}) == 0);
  CHECK(same_bytes(dir.file("same") + "/dataset.bin", p.data_stem + ".bin"));
  // Different seed: different draw.
  CHECK(run({"gen-data", "--config", p.dir.file("gen.json"), "--seed", "4", "--out",
             dir.file("diff")}) == 0);
  CHECK_FALSE(same_bytes(dir.file("diff") + "/dataset.bin", p.data_stem + ".bin"));
}

TEST_CASE("train emits metrics, a checkpoint, and a materialized echo") {
  Pipeline& p = pipeline();
  const std::string run_dir = p.dir.file("run");
  CHECK(fs::exists(run_dir + "/metrics.csv"));
  CHECK(fs::exists(run_dir + "/model.json"));
  CHECK(fs::exists(run_dir + "/model.bin"));

  std::vector<std::string> rows = lines_of(read_text_file(run_dir + "/metrics.csv"));
  REQUIRE(rows.size() == 1 + 3 * 2);  // header + train/test per epoch
  CHECK(rows[0] == "epoch,split,loss,accuracy,lr");

  json echo = json::parse(read_text_file(run_dir + "/config.echo.json"));
  CHECK(echo.at("train").at("optimizer") == "lion");
  CHECK(echo.at("train").at("schedule") == "cosine");
  CHECK(echo.at("train").at("weight_decay") == 0.1);
  CHECK(echo.at("options").at("variant") == "default");
  CHECK(echo.at("arch").at("classes") == 2);
  CHECK(echo.at("seed") == 7);

  Checkpoint ck = load_checkpoint(run_dir + "/model");
  CHECK(ck.arch.d == 8);
  CHECK(ck.arch.L == 1);
  CHECK(ck.meta.at("seed") == 7);
}

TEST_CASE("rerunning train with the same config and seed is byte-identical") {
  Pipeline& p = pipeline();
  TempDir dir;
  REQUIRE(run({"train", "--config", p.dir.file("train.json"), "--out",
               dir.file("again")}) == 0);
  for (const char* name : {"/metrics.csv", "/model.json", "/model.bin",
                           "/config.echo.json"})
    CHECK(same_bytes(dir.file("again") + name, p.dir.file("run") + name));

  // Threads change the wall clock, not the bytes.
  REQUIRE(run({"train", "--config", p.dir.file("train.json"), "--threads", "3",
               "--out", dir.file("mt")}) == 0);
  for (const char* name : {"/metrics.csv", "/model.bin", "/config.echo.json"})
    CHECK(same_bytes(dir.file("mt") + name, p.dir.file("run") + name));
}

TEST_CASE("eval reproduces the final logged train metrics exactly") {
  Pipeline& p = pipeline();
  TempDir dir;
  write_text_file(dir.file("eval.json"),
                  std::string(R"({"model": ")") + p.model_stem + R"(", "data": ")" +
                      p.data_stem + R"(", "split": "train", "smoothing": 0.1})");
  std::string out;
  REQUIRE(run({"eval", "--config", dir.file("eval.json"), "--out", dir.file("e")},
              &out) == 0);

  std::vector<std::string> metric_rows =
      lines_of(read_text_file(p.dir.file("run") + "/metrics.csv"));
  std::vector<std::string> last_train;
  for (const std::string& row : metric_rows) {
    std::vector<std::string> cells = split_csv(row);
    if (cells.size() >= 2 && cells[1] == "train") last_train = cells;
  }
  REQUIRE(last_train.size() == 5);

  std::vector<std::string> eval_rows = lines_of(read_text_file(dir.file("e") + "/eval.csv"));
  REQUIRE(eval_rows.size() == 2);
  CHECK(eval_rows[0] == "split,loss,accuracy");
  std::vector<std::string> cells = split_csv(eval_rows[1]);
  REQUIRE(cells.size() == 3);
  CHECK(cells[0] == "train");
  CHECK(cells[1] == last_train[2]);  // loss text matches digit for digit
  CHECK(cells[2] == last_train[3]);

  // Same on the held-out split.
  write_text_file(dir.file("eval_test.json"),
                  std::string(R"({"model": ")") + p.model_stem + R"(", "data": ")" +
                      p.data_stem + R"(", "split": "test"})");
  REQUIRE(run({"eval", "--config", dir.file("eval_test.json"), "--out",
               dir.file("et")}, &out) == 0);
  std::vector<std::string> last_test;
  for (const std::string& row : metric_rows) {
    std::vector<std::string> c = split_csv(row);
    if (c.size() >= 2 && c[1] == "test") last_test = c;
  }
  std::vector<std::string> test_cells =
      split_csv(lines_of(read_text_file(dir.file("et") + "/eval.csv"))[1]);
  CHECK(test_cells[1] == last_test[2]);
  CHECK(test_cells[2] == last_test[3]);
}

TEST_CASE("train accepts variant and attention overrides") {
  Pipeline& p = pipeline();
  TempDir dir;
  REQUIRE(run({"train", "--config", p.dir.file("train.json"), "--variant", "mm_prox",
               "--attention", "tied", "--out", dir.file("v")}) == 0);
  json echo = json::parse(read_text_file(dir.file("v") + "/config.echo.json"));
  CHECK(echo.at("options").at("variant") == "mm_prox");
  CHECK(echo.at("options").at("attention") == "tied");
  Checkpoint ck = load_checkpoint(dir.file("v") + "/model");
  CHECK(ck.options.variant == LayerVariant::kMmProx);
  CHECK(ck.options.attention == AttentionMode::kTied);
  CHECK(ck.params.layers[0].head_mixer.size() == 0);

  std::string out, err;
  CHECK(run({"train", "--config", p.dir.file("train.json"), "--variant", "fancy",
             "--out", dir.file("w")}, &out, &err) == 1);
}

TEST_CASE("diagnose writes per-layer profiles and heatmaps") {
  Pipeline& p = pipeline();
  TempDir dir;
  write_text_file(dir.file("diag.json"),
                  std::string(R"({"model": ")") + p.model_stem + R"(", "data": ")" +
                      p.data_stem +
                      R"(", "split": "test", "batch": 8,
                          "heatmap_rows": 4, "heatmap_cols": 3, "seed": 5})");
  REQUIRE(run({"diagnose", "--config", dir.file("diag.json"), "--out",
               dir.file("d1")}) == 0);

  std::vector<std::string> comp =
      lines_of(read_text_file(dir.file("d1") + "/compression.csv"));
  REQUIRE(comp.size() == 2);  // header + one layer
  CHECK(comp[0] == "layer,value");
  CHECK(split_csv(comp[1])[0] == "0");
  CHECK(std::stod(split_csv(comp[1])[1]) > 0.0);

  std::vector<std::string> sp = lines_of(read_text_file(dir.file("d1") + "/sparsity.csv"));
  REQUIRE(sp.size() == 2);
  const double frac = std::stod(split_csv(sp[1])[1]);
  CHECK(frac >= 0.0);
  CHECK(frac <= 1.0);

  // Coherence gram is pK x pK; heatmap honors the requested shape.
  std::vector<std::string> gram =
      lines_of(read_text_file(dir.file("d1") + "/coherence_l0.csv"));
  REQUIRE(gram.size() == 4);
  CHECK(split_csv(gram[0]).size() == 4);
  std::vector<std::string> heat = lines_of(read_text_file(dir.file("d1") + "/tokens_l0.csv"));
  REQUIRE(heat.size() == 4);
  CHECK(split_csv(heat[0]).size() == 3);

  // Byte-identical on rerun.
  REQUIRE(run({"diagnose", "--config", dir.file("diag.json"), "--out",
               dir.file("d2")}) == 0);
  for (const char* name :
       {"/compression.csv", "/sparsity.csv", "/coherence_l0.csv", "/tokens_l0.csv"})
    CHECK(same_bytes(dir.file("d1") + name, dir.file("d2") + name));
}

TEST_CASE("denoise-demo emits the documented sweep table") {
  TempDir dir;
  write_text_file(dir.file("den.json"),
                  R"({"d": 12, "p": 3, "K": 2, "sigmas": [0.2, 0.1], "points": 30,
                      "seed": 2})");
  std::string out;
  REQUIRE(run({"denoise-demo", "--config", dir.file("den.json"), "--out",
               dir.file("den")}, &out) == 0);

  std::vector<std::string> rows = lines_of(read_text_file(dir.file("den") + "/denoise.csv"));
  REQUIRE(rows.size() == 1 + 2 * 3);  // header + 3 methods per sigma
  CHECK(rows[0] == "sigma,method,median_rel_err,mse");
  CHECK(split_csv(rows[1])[1] == "attention");
  CHECK(split_csv(rows[2])[1] == "tweedie");
  CHECK(split_csv(rows[3])[1] == "identity");
  // The score-based route coincides with the closed-form posterior mean.
  CHECK(std::stod(split_csv(rows[2])[2]) < 1e-10);
  CHECK(std::stod(split_csv(rows[5])[2]) < 1e-10);
  // stdout carries the same table.
  CHECK(out.find("sigma,method,median_rel_err,mse") != std::string::npos);

  // Infeasible geometry is a validation error.
  write_text_file(dir.file("bad.json"), R"({"d": 4, "p": 3, "K": 2})");
  CHECK(run({"denoise-demo", "--config", dir.file("bad.json")}) == 1);
}

TEST_CASE("gradcheck passes its own suite and reports per-check errors") {
  TempDir dir;
  write_text_file(dir.file("g.json"), R"({"seed": 1})");
  std::string out;
  REQUIRE(run({"gradcheck", "--config", dir.file("g.json"), "--out", dir.file("g")},
              &out) == 0);
  CHECK(out.find("max relative error:") != std::string::npos);
  CHECK(out.find("PASS") != std::string::npos);

  std::vector<std::string> rows = lines_of(read_text_file(dir.file("g") + "/gradcheck.csv"));
  REQUIRE(rows.size() > 15);
  CHECK(rows[0] == "check,rel_err");
  bool saw_matmul = false, saw_model = false;
  for (const std::string& row : rows) {
    std::vector<std::string> cells = split_csv(row);
    if (cells[0] == "vjp_matmul") saw_matmul = true;
    if (cells[0] == "model_mm_prox") saw_model = true;
    if (cells[0] != "check") CHECK(std::stod(cells[1]) <= 1e-5);
  }
  CHECK(saw_matmul);
  CHECK(saw_model);
}

TEST_CASE("export-checkpoint-info describes the saved model") {
  Pipeline& p = pipeline();
  TempDir dir;
  write_text_file(dir.file("info.json"),
                  std::string(R"({"model": ")") + p.model_stem + R"("})");
  std::string out;
  REQUIRE(run({"export-checkpoint-info", "--config", dir.file("info.json"), "--out",
               dir.file("i")}, &out) == 0);
  json info = json::parse(read_text_file(dir.file("i") + "/info.json"));
  CHECK(info.at("container") == "crate-checkpoint");
  CHECK(info.at("meta").at("arch").at("d") == 8);
  CHECK(info.at("parameter_count").get<std::size_t>() > 0);
  bool has_embed = false;
  for (const json& t : info.at("tensors"))
    if (t.at("name") == "patch_embed") has_embed = true;
  CHECK(has_embed);
  CHECK(out.find("patch_embed") != std::string::npos);

  // Pointing it at a dataset container fails as a runtime error.
  write_text_file(dir.file("wrong.json"),
                  std::string(R"({"model": ")") + p.data_stem + R"("})");
  CHECK(run({"export-checkpoint-info", "--config", dir.file("wrong.json")}) == 2);
}
