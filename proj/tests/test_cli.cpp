#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr interleaved
};

CmdResult run_cli(const std::string& args) {
    const std::string cmd = std::string(BEVFUSE_BIN) + " " + args + " 2>&1";
    CmdResult res;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) {
        res.output.append(buf.data(), n);
    }
    const int status = pclose(pipe);
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return res;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string first_line(const std::string& text) {
    return text.substr(0, text.find('\n'));
}

const std::string kTinyTrain =
    "--stages 1 --blocks-per-stage 1 --groups 2 --train-steps 2 "
    "--batch-size 1 --train-scenes 2 --eval-scenes 1";

}  // namespace

TEST_CASE("unknown flags exit with the usage code") {
    const auto res = run_cli("train --no-such-flag");
    CHECK(res.exit_code == 2);
    CHECK(res.output.find("error:") != std::string::npos);
    CHECK(res.output.find("Usage") != std::string::npos);
}

TEST_CASE("missing subcommand exits with the usage code") {
    const auto res = run_cli("");
    CHECK(res.exit_code == 2);
}

TEST_CASE("invalid option values exit with the usage code") {
    const auto res = run_cli("train --train-steps banana");
    CHECK(res.exit_code == 2);
    CHECK(res.output.find("error:") != std::string::npos);
}

TEST_CASE("gen-scenes is byte reproducible") {
    const auto dir_a = fresh_dir("bevfuse_gen_a");
    const auto dir_b = fresh_dir("bevfuse_gen_b");
    const std::string base = "gen-scenes --count 2 --seed 12 --out-dir ";
    const auto ra = run_cli(base + dir_a.string());
    const auto rb = run_cli(base + dir_b.string());
    REQUIRE(ra.exit_code == 0);
    REQUIRE(rb.exit_code == 0);
    for (const char* name : {"scene_0000.json", "scene_0001.json"}) {
        CHECK(slurp(dir_a / name) == slurp(dir_b / name));
    }
    CHECK(slurp(dir_a / "scene_0000.json") != slurp(dir_a / "scene_0001.json"));
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("train writes its artifact set and eval loads the checkpoint") {
    const auto dir = fresh_dir("bevfuse_train");
    const auto res =
        run_cli("train " + kTinyTrain + " --seed 9 --out-dir " + dir.string());
    CAPTURE(res.output);
    REQUIRE(res.exit_code == 0);
    CHECK(res.output.find("trained lidar_centric") != std::string::npos);
    CHECK(res.output.find("mask focal") != std::string::npos);

    REQUIRE(fs::exists(dir / "checkpoint.bin"));
    REQUIRE(fs::exists(dir / "loss_curve.csv"));
    REQUIRE(fs::exists(dir / "metrics.csv"));
    REQUIRE(fs::exists(dir / "resolved_config.toml"));

    CHECK(first_line(slurp(dir / "loss_curve.csv")) == "step,loss");
    CHECK(first_line(slurp(dir / "metrics.csv")) ==
          "run_id,mode,degradation,magnitude,mask_iou,center_mae_m");
    const auto toml = slurp(dir / "resolved_config.toml");
    CHECK(toml.find("mode = \"lidar_centric\"") != std::string::npos);
    CHECK(toml.find("train_steps = 2") != std::string::npos);

    const auto edir = fresh_dir("bevfuse_eval");
    const auto eres = run_cli("eval " + kTinyTrain + " --seed 9 --checkpoint " +
                              (dir / "checkpoint.bin").string() +
                              " --out-dir " + edir.string());
    CAPTURE(eres.output);
    REQUIRE(eres.exit_code == 0);
    CHECK(eres.output.find("mask_iou") != std::string::npos);
    CHECK(first_line(slurp(edir / "metrics.csv")) ==
          "run_id,mode,degradation,magnitude,mask_iou,center_mae_m");
    fs::remove_all(dir);
    fs::remove_all(edir);
}

TEST_CASE("eval rejects a checkpoint from a different architecture") {
    const auto dir = fresh_dir("bevfuse_archmix");
    const auto res =
        run_cli("train " + kTinyTrain + " --out-dir " + dir.string());
    REQUIRE(res.exit_code == 0);
    const auto eres = run_cli(
        "eval --stages 2 --blocks-per-stage 1 --groups 2 --eval-scenes 1 "
        "--checkpoint " +
        (dir / "checkpoint.bin").string() + " --out-dir " +
        (dir / "eval").string());
    CHECK(eres.exit_code == 1);
    CHECK(eres.output.find("error:") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("the seed flag reads the RUN_SEED environment variable") {
    const auto dir_flag = fresh_dir("bevfuse_seed_flag");
    const auto dir_env = fresh_dir("bevfuse_seed_env");
    const auto ra = run_cli("train " + kTinyTrain + " --seed 77 --out-dir " +
                            dir_flag.string());
    REQUIRE(ra.exit_code == 0);

    const std::string env_cmd = "RUN_SEED=77 " + std::string(BEVFUSE_BIN) +
                                " train " + kTinyTrain + " --out-dir " +
                                dir_env.string() + " 2>&1";
    FILE* pipe = popen(env_cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    while (fread(buf.data(), 1, buf.size(), pipe) > 0) {
    }
    REQUIRE(WEXITSTATUS(pclose(pipe)) == 0);

    CHECK(slurp(dir_flag / "checkpoint.bin") == slurp(dir_env / "checkpoint.bin"));
    fs::remove_all(dir_flag);
    fs::remove_all(dir_env);
}

TEST_CASE("viz-sampling exports the location table and drawing") {
    const auto dir = fresh_dir("bevfuse_viz_samp");
    const auto res = run_cli(
        "viz-sampling --stages 1 --blocks-per-stage 1 --groups 2 --out-dir " +
        dir.string());
    CAPTURE(res.output);
    REQUIRE(res.exit_code == 0);
    REQUIRE(fs::exists(dir / "sampling_locations.csv"));
    REQUIRE(fs::exists(dir / "sampling_locations.svg"));
    const auto csv = slurp(dir / "sampling_locations.csv");
    CHECK(first_line(csv) == "stage,block,group,k,x,y,modulation");
    // 1 stage x 1 block x 2 groups x 9 taps at threshold 0: header + 18 rows.
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 19);
    CHECK(slurp(dir / "sampling_locations.svg").find("<svg") !=
          std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("viz-sampling refuses the naive mode") {
    const auto dir = fresh_dir("bevfuse_viz_refuse");
    const auto res = run_cli(
        "viz-sampling --mode naive_concat --use-svdb 0 --use-sbdb 0 "
        "--out-dir " +
        dir.string());
    CHECK(res.exit_code == 1);
    CHECK(res.output.find("error:") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("viz-occupancy exports original and dilated cells") {
    const auto dir = fresh_dir("bevfuse_viz_occ");
    const auto res = run_cli(
        "viz-occupancy --stages 1 --blocks-per-stage 1 --groups 2 --out-dir " +
        dir.string());
    CAPTURE(res.output);
    REQUIRE(res.exit_code == 0);
    const auto csv = slurp(dir / "occupancy.csv");
    CHECK(first_line(csv) == "ix,iy,state");
    CHECK(csv.find(",original") != std::string::npos);
    CHECK(slurp(dir / "occupancy.svg").find("<svg") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("robustness writes both report tables") {
    const auto dir = fresh_dir("bevfuse_robust");
    const auto res = run_cli(
        "robustness --stages 1 --blocks-per-stage 1 --groups 2 "
        "--train-steps 2 --batch-size 1 --train-scenes 2 --eval-scenes 1 "
        "--out-dir " +
        dir.string());
    CAPTURE(res.output);
    REQUIRE(res.exit_code == 0);
    CHECK(res.output.find("rel drop") != std::string::npos);
    CHECK(first_line(slurp(dir / "metrics.csv")) ==
          "run_id,mode,degradation,magnitude,mask_iou,center_mae_m");
    CHECK(first_line(slurp(dir / "drops.csv")) ==
          "run_id,mode,degradation,magnitude,clean_mask_iou,degraded_mask_iou,"
          "rel_drop_mask_iou");
    const auto metrics = slurp(dir / "metrics.csv");
    CHECK(metrics.find("lidar_centric") != std::string::npos);
    CHECK(metrics.find("naive_concat") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("selftest passes and reports its battery") {
    const auto res = run_cli("selftest --threads 1");
    CAPTURE(res.output);
    CHECK(res.exit_code == 0);
    CHECK(res.output.find(" passed, 0 failed") != std::string::npos);
}
