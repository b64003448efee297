#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "trpfuse/ingest.hpp"
#include "trpfuse/rng.hpp"

using namespace trpfuse;
namespace fs = std::filesystem;

namespace {

std::string cli() {
    const char* path = std::getenv("TRPFUSE_CLI");
    REQUIRE(path != nullptr);
    return path;
}

std::string test_data_dir() {
    const char* dir = std::getenv("TRPFUSE_TEST_DATA");
    REQUIRE(dir != nullptr);
    return dir;
}

struct RunResult {
    int exit_code = 0;
    std::string out;
    std::string err;
};

RunResult run(const std::string& args) {
    static int counter = 0;
    const auto base = fs::temp_directory_path() /
                      ("trpfuse_cli_io" + std::to_string(counter++));
    const std::string out_path = base.string() + ".out";
    const std::string err_path = base.string() + ".err";
    const std::string cmd =
        cli() + " " + args + " > " + out_path + " 2> " + err_path;
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    auto slurp = [](const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };
    r.out = slurp(out_path);
    r.err = slurp(err_path);
    return r;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (char c : text) n += c == '\n';
    return n;
}

// workspace with one synthetic recording whose streams track the labels
class Workspace {
  public:
    Workspace() {
        dir_ = fs::temp_directory_path() / ("trpfuse_cli_ws" + std::to_string(seq_++));
        fs::create_directories(dir_);
        SplitMix64 rng(123);
        const std::int64_t n = 3000;
        GroundTruth truth;
        truth.total_frames = n;
        for (std::int64_t e = 200; e + 200 < n; e += 400) truth.events.push_back(e);
        FrameStream vap, llm;
        for (std::int64_t f = 0; f < n; ++f) {
            bool near = false;
            for (std::int64_t e : truth.events) near |= std::llabs(f - e) <= 75;
            const double base = near ? 0.9 : 0.1;
            vap.values.push_back(base + rng.uniform(-0.05, 0.05));
            llm.values.push_back(base + rng.uniform(-0.05, 0.05));
        }
        store_prediction_stream(vap, path("vap.csv"));
        store_prediction_stream(llm, path("llm.csv"));
        store_ground_truth(truth, path("truth.csv"));
    }

    std::string path(const std::string& name) const {
        return (dir_ / name).string();
    }
    std::string streams() const {
        return "--vap " + path("vap.csv") + " --llm " + path("llm.csv") +
               " --truth " + path("truth.csv");
    }

  private:
    static inline int seq_ = 0;
    fs::path dir_;
};

}  // namespace

TEST_CASE("help enumerates subcommands and flag defaults") {
    auto top = run("--help");
    CHECK(top.exit_code == 0);
    for (const char* name : {"prepare", "train", "evaluate", "sweep", "report"})
        CHECK(top.out.find(name) != std::string::npos);

    auto prep = run("prepare --help");
    CHECK(prep.exit_code == 0);
    CHECK(prep.out.find("--gap-s") != std::string::npos);
    CHECK(prep.out.find("2") != std::string::npos);  // default shown
    CHECK(prep.out.find("--words-per-s") != std::string::npos);

    auto train = run("train --help");
    CHECK(train.out.find("--seed") != std::string::npos);
    CHECK(train.out.find("--epochs") != std::string::npos);
}

TEST_CASE("prepare writes one ground truth per fixture dialog") {
    const auto out = fs::temp_directory_path() / "trpfuse_cli_prep";
    fs::remove_all(out);
    auto r = run("prepare --input " + test_data_dir() +
                 "/fixtures/ccpe_small.json --out " + out.string());
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("prepared 2 dialogs") != std::string::npos);
    CHECK(fs::exists(out / "CCPE-0001.truth.csv"));
    CHECK(fs::exists(out / "CCPE-0002.truth.csv"));
    CHECK(fs::exists(out / "CCPE-0001.spans.csv"));
    auto truth = load_ground_truth((out / "CCPE-0001.truth.csv").string());
    CHECK(!truth.events.empty());
}

TEST_CASE("prepare on an empty file exits 1 with a parse error") {
    const auto empty = fs::temp_directory_path() / "trpfuse_cli_empty.json";
    std::ofstream(empty).close();
    auto r = run("prepare --input " + empty.string() + " --out " +
                 (fs::temp_directory_path() / "trpfuse_cli_prep2").string());
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("error") != std::string::npos);
}

TEST_CASE("train is deterministic for a fixed seed") {
    Workspace ws;
    const std::string common = "train --model lstm " + ws.streams() +
                               " --epochs 2 --seed 7 --hidden 4 --heads 2";
    auto r1 = run(common + " --out " + ws.path("m1.bin"));
    auto r2 = run(common + " --out " + ws.path("m2.bin"));
    REQUIRE(r1.exit_code == 0);
    REQUIRE(r2.exit_code == 0);
    CHECK(read_file(ws.path("m1.bin")) == read_file(ws.path("m2.bin")));
}

TEST_CASE("training history carries the panel columns") {
    Workspace ws;
    auto r = run("train --model lstm " + ws.streams() +
                 " --epochs 2 --seed 3 --hidden 4 --heads 2 --out " +
                 ws.path("m.bin") + " --history " + ws.path("hist.csv"));
    REQUIRE(r.exit_code == 0);
    const auto hist = read_file(ws.path("hist.csv"));
    CHECK(hist.rfind(
              "epoch,train_loss,val_loss,balanced_acc,sensitivity,specificity,"
              "pos_ratio",
              0) == 0);
    CHECK(line_count(hist) == 3);  // header + 2 epochs
}

TEST_CASE("training on single-class labels exits 1") {
    Workspace ws;
    GroundTruth empty_truth;
    empty_truth.total_frames = 3000;
    store_ground_truth(empty_truth, ws.path("empty.csv"));
    auto r = run("train --model lr --vap " + ws.path("vap.csv") + " --llm " +
                 ws.path("llm.csv") + " --truth " + ws.path("empty.csv") +
                 " --out " + ws.path("m.txt"));
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("single class") != std::string::npos);
}

TEST_CASE("sweep emits one row per grid point") {
    Workspace ws;
    auto r = run("sweep --pred " + ws.path("vap.csv") + " --truth " +
                 ws.path("truth.csv") + " --out " + ws.path("grid.csv"));
    REQUIRE(r.exit_code == 0);
    const auto grid = read_file(ws.path("grid.csv"));
    CHECK(line_count(grid) == 1 + 19 * 2);
    CHECK(grid.rfind("threshold,flipped,balanced_acc", 0) == 0);

    auto r2 = run("sweep --no-flip --pred " + ws.path("vap.csv") + " --truth " +
                  ws.path("truth.csv") + " --out " + ws.path("grid2.csv"));
    REQUIRE(r2.exit_code == 0);
    CHECK(line_count(read_file(ws.path("grid2.csv"))) == 1 + 19);
}

TEST_CASE("evaluate on a faithful passthrough reports balanced_acc 1") {
    Workspace ws;
    auto r = run("evaluate --model passthrough-vap " + ws.streams() + " --out " +
                 ws.path("report.csv") + " --trace-dir " + ws.path("traces"));
    REQUIRE(r.exit_code == 0);
    const auto report = read_file(ws.path("report.csv"));
    CHECK(report.find("1.000000,1.000000") != std::string::npos);
    CHECK(line_count(report) == 2);
    const auto trace = read_file(ws.path("traces/truth.csv"));
    CHECK(trace.rfind("frame,truth_event,effective_label,pred_binary,prob", 0) == 0);
    CHECK(line_count(trace) == 3001);
}

TEST_CASE("evaluate without a model file exits 1") {
    Workspace ws;
    auto r = run("evaluate --model lr " + ws.streams() + " --out " +
                 ws.path("r.csv"));
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("--model-file") != std::string::npos);
}

TEST_CASE("report writes one row per fold plus the aggregate") {
    Workspace base;  // reuse its generator through separate workspaces
    std::string streams;
    std::vector<Workspace> keep;
    for (int i = 0; i < 4; ++i) {
        keep.emplace_back();
        streams += " " + keep.back().streams();
    }
    auto r = run("report --model passthrough-vap --folds 2" + streams +
                 " --out " + base.path("cv.csv"));
    REQUIRE(r.exit_code == 0);
    const auto report = read_file(base.path("cv.csv"));
    CHECK(line_count(report) == 1 + 2 + 1);
    CHECK(report.find("/fold0,") != std::string::npos);
    CHECK(report.find("/aggregate,") != std::string::npos);
}

TEST_CASE("config file values apply and flags win") {
    Workspace ws;
    std::ofstream(ws.path("cfg.ini")) << "[evaluate]\nthreshold=0.25\n";
    auto r = run("--config " + ws.path("cfg.ini") +
                 " evaluate --model passthrough-vap " + ws.streams() +
                 " --out " + ws.path("rc.csv"));
    REQUIRE(r.exit_code == 0);
    CHECK(read_file(ws.path("rc.csv")).find(",0.25,") != std::string::npos);

    auto r2 = run("--config " + ws.path("cfg.ini") +
                  " evaluate --model passthrough-vap --threshold 0.65 " +
                  ws.streams() + " --out " + ws.path("rc2.csv"));
    REQUIRE(r2.exit_code == 0);
    CHECK(read_file(ws.path("rc2.csv")).find(",0.65,") != std::string::npos);
}

TEST_CASE("unknown flags exit nonzero") {
    auto r = run("sweep --bogus-flag 1");
    CHECK(r.exit_code == 1);
}
