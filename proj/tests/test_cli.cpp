#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "p2s/checkpoint.hpp"
#include "p2s/dataset_io.hpp"

using namespace p2s;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

// Runs the CLI with stderr folded into the captured output.
Run p2s_cli(const std::string& args) {
    const std::string cmd = std::string(P2S_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string desk_checkpoint() { return (std::filesystem::path(P2S_SOURCE_DIR) / "models" / "desk.p2sc").string(); }

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(p2s_cli("").code, 2);
    EXPECT_EQ(p2s_cli("frobnicate").code, 2);
    EXPECT_EQ(p2s_cli("synth").code, 2);
    auto r = p2s_cli("synth --out /tmp/x --side 50");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("usage error"), std::string::npos);
    EXPECT_EQ(p2s_cli("info --preset huge").code, 2);
}

TEST(Cli, HelpExitsCleanly) {
    auto r = p2s_cli("--help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("serve"), std::string::npos);
}

TEST(Cli, InfoPrintsTheExactParameterCount) {
    auto r = p2s_cli("info --checkpoint " + desk_checkpoint());
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("parameters 122095"), std::string::npos) << r.out;
    auto full = p2s_cli("info --preset full --json");
    EXPECT_EQ(full.code, 0);
    EXPECT_EQ(json::parse(full.out)["parameter_count"], 7111755);
}

TEST(Cli, RuntimeErrorsExitWithOne) {
    auto r = p2s_cli("info --checkpoint /nonexistent.p2sc");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.out.find("p2s: error"), std::string::npos);
}

TEST(Cli, EndToEndPipeline) {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / ("p2s_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    const auto raw = (root / "raw").string(), proc = (root / "proc").string(), run = (root / "run").string();

    ASSERT_EQ(p2s_cli("synth --classes 3 --per-class 10 --side 32 --seed 3 --out " + raw).code, 0);
    ASSERT_EQ(p2s_cli("preprocess --data " + raw + " --out " + proc + " --side 32 --seed 1").code, 0);
    EXPECT_EQ(p2s_cli("train --data " + raw + " --out " + run).code, 1) << "unsplit data must be refused";

    std::ofstream(root / "cfg.json") << R"({"model": {"input_side": 32, "stage_filters": [4, 8, 16, 32, 64]},
                                           "train": {"epochs_per_fold": 1, "seeds": [5]}})";
    auto tr = p2s_cli("train --data " + proc + " --config " + (root / "cfg.json").string() + " --folds 0 --out " + run);
    ASSERT_EQ(tr.code, 0) << tr.out;
    EXPECT_NE(tr.out.find("All"), std::string::npos);
    const auto ckpt = fs::path(run) / "checkpoints" / "run5_fold0.p2sc";
    ASSERT_TRUE(fs::exists(ckpt));
    EXPECT_TRUE(fs::exists(fs::path(run) / "logs" / "run5_fold0.jsonl"));
    auto report = json::parse(std::ifstream(fs::path(run) / "report.json"));
    EXPECT_EQ(report["rows"].size(), 4u);
    auto loaded = load_checkpoint(ckpt);
    EXPECT_EQ(loaded.provenance.seed, 5u);
    EXPECT_EQ(loaded.provenance.fold, 0);

    const auto eval_out = (root / "eval.json").string();
    auto ev = p2s_cli("eval --data " + proc + " --checkpoints " + (fs::path(run) / "checkpoints").string() +
                      " --out " + eval_out);
    ASSERT_EQ(ev.code, 0) << ev.out;
    auto eval_report = json::parse(std::ifstream(eval_out));
    EXPECT_EQ(eval_report["rows"], report["rows"]);

    auto m = read_dataset(proc);
    const auto& rec = *m.select(Split::test).front().record;
    const auto img = (root / "img.png").string(), doo = (root / "doo.png").string(), mask = (root / "mask.png").string();
    write_png(img, rec.image);
    write_png(doo, rec.doodle);
    auto pr = p2s_cli("predict --checkpoint " + ckpt.string() + " --image " + img + " --doodle " + doo +
                      " --class-id " + std::to_string(rec.class_id) + " --out " + mask + " --prob-pfm " +
                      (root / "p.pfm").string());
    ASSERT_EQ(pr.code, 0) << pr.out;
    auto out_mask = read_png_gray(mask);
    EXPECT_EQ(out_mask.width, 32u);
    for (auto v : out_mask.pixels) EXPECT_TRUE(v == 0 || v == 255);
    EXPECT_EQ(fs::file_size(root / "p.pfm"), std::string("Pf\n32 32\n-1.0\n").size() + 32 * 32 * 4);
    EXPECT_EQ(p2s_cli("predict --checkpoint " + ckpt.string() + " --image " + img + " --doodle " + doo +
                      " --class-id 7 --out " + mask)
                  .code,
              2);
    fs::remove_all(root);
}
