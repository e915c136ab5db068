#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "pqforge/config.hpp"

#ifndef PQFORGE_CLI
#error "PQFORGE_CLI must point at the built binary"
#endif
#ifndef PQFORGE_FIXTURE
#error "PQFORGE_FIXTURE must point at the fixture csv"
#endif

namespace {

int run(const std::string& args, std::string* out = nullptr) {
    const std::string cmd = std::string(PQFORGE_CLI) + " " + args + " 2>/dev/null" +
                            (out ? " > cli_test_stdout.txt" : " > /dev/null");
    const int rc = std::system(cmd.c_str());
    if (out) {
        std::ifstream f("cli_test_stdout.txt");
        std::stringstream ss;
        ss << f.rdbuf();
        *out = ss.str();
        std::remove("cli_test_stdout.txt");
    }
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    f << content;
}

} // namespace

TEST_CASE("exit codes: 2 for config errors, 3 for data errors") {
    write_file("cli_bad.yaml", "quantization:\n  round_mode: BANANA\n");
    CHECK(run("train --config cli_bad.yaml --data synth:n=200,features=4,classes=2") == 2);
    std::remove("cli_bad.yaml");

    CHECK(run("train --data /no/such/file.csv") == 3);
    CHECK(run("report /no/such/run.jsonl") == 3);

    // stage violation is a config error too
    write_file("cli_stage.yaml", "pruning:\n  method: dst\ntraining:\n  pretraining_epochs: 2\n");
    CHECK(run("train --config cli_stage.yaml --data synth:n=200,features=4,classes=2") == 2);
    std::remove("cli_stage.yaml");
}

TEST_CASE("train on the fixture produces bundle, log and checkpoint; report renders") {
    write_file("cli_dst.yaml",
               "pruning:\n  method: dst\n  dst: {alpha: 0.001}\ntraining:\n  epochs: 4\n  "
               "batch_size: 128\n");
    std::string out;
    CHECK(run(std::string("train --config cli_dst.yaml --data ") + PQFORGE_FIXTURE +
                  " --out cli_out --seed 3",
              &out) == 0);
    CHECK(out.find("method=dst") != std::string::npos);
    std::remove("cli_dst.yaml");

    std::string table;
    CHECK(run("report cli_out/run.jsonl", &table) == 0);
    CHECK(table.find("| dst | t |") != std::string::npos);
    CHECK(table.find("sp(fc1)") != std::string::npos); // a sparsity column per layer
    CHECK(table.find("sp(out)") != std::string::npos);

    std::string csv;
    CHECK(run("report --csv cli_out/run.jsonl", &csv) == 0);
    CHECK(csv.find("dst,t,") != std::string::npos);

    // infer over raw feature rows of the fixture
    std::string scores;
    CHECK(run(std::string("infer --bundle cli_out/model.pqb --data ") + PQFORGE_FIXTURE, &scores) == 0);
    CHECK(scores.find("argmax") != std::string::npos);
    size_t lines = std::count(scores.begin(), scores.end(), '\n');
    CHECK(lines == 1001); // header + 1000 rows

    // eval agrees between checkpoint and bundle views
    std::string ev;
    CHECK(run(std::string("eval --bundle cli_out/model.pqb --data ") + PQFORGE_FIXTURE + " --seed 3",
              &ev) == 0);
    CHECK(ev.find("val_accuracy=") != std::string::npos);

    // export reproduces the bundle from the checkpoint
    std::string ex;
    CHECK(run("export --checkpoint cli_out/checkpoint.json --out cli_out/model2.pqb", &ex) == 0);
    std::ifstream b1("cli_out/model.pqb"), b2("cli_out/model2.pqb");
    std::stringstream s1, s2;
    s1 << b1.rdbuf();
    s2 << b2.rdbuf();
    CHECK(s1.str() == s2.str());

    std::system("rm -rf cli_out");
}

TEST_CASE("template output parses under load_config") {
    write_file("cli_model.json",
               R"({"input_shape":[16],"layers":[
                   {"kind":"dense","name":"fc1","units":8},
                   {"kind":"activation","name":"r1","act":"relu"},
                   {"kind":"dense","name":"fc2","units":4}]})");
    CHECK(run("template --model cli_model.json --out cli_template.yaml") == 0);
    auto cfg = pqforge::load_config("cli_template.yaml");
    CHECK(cfg.pruning.disabled_layers == std::vector<std::string>{"fc1", "fc2"});
    CHECK(cfg.quantization.layer_specific.count("fc1") == 1);
    CHECK(cfg.quantization.layer_specific.count("fc2") == 1);
    std::remove("cli_model.json");
    std::remove("cli_template.yaml");
}

TEST_CASE("tune runs a small study and logs every trial") {
    write_file("cli_tune.yaml", R"(
pruning:
  method: dst
training:
  epochs: 2
  batch_size: 128
hpo:
  n_trials: 3
  objectives:
    - {metric: val_accuracy, direction: maximize}
    - {metric: ebops, direction: minimize}
  space:
    pruning.dst.alpha: {type: log_uniform, lo: 1e-5, hi: 1e-2}
)");
    std::string out;
    CHECK(run(std::string("tune --config cli_tune.yaml --data synth:n=600,features=8,classes=3 "
                          "--out cli_tune_out"),
              &out) == 0);
    CHECK(out.find("pareto front") != std::string::npos);
    std::ifstream f("cli_tune_out/study.jsonl");
    std::string line;
    int trials = 0;
    while (std::getline(f, line))
        if (line.find("\"trial\"") != std::string::npos) ++trials;
    CHECK(trials == 3);
    std::remove("cli_tune.yaml");
    std::system("rm -rf cli_tune_out");
}
