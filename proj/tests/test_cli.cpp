#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "protocase/dataset.hpp"
#include "protocase/png_io.hpp"

using namespace protocase;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output;
};

std::string cli_binary() {
    const char* env = std::getenv("PROTOCASE_BIN");
    REQUIRE(env != nullptr);
    return env;
}

CliResult run_cli(const std::string& args) {
    const fs::path log = fs::temp_directory_path() / "protocase_cli_out.txt";
    const std::string cmd = cli_binary() + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream f(log);
    r.output.assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return r;
}

fs::path temp_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("protocase_cli_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("exit codes by error category", "[cli]") {
    CHECK(run_cli("definitely-not-a-command").exit_code == 2);
    CHECK(run_cli("train --bogus-flag 1").exit_code == 2);
    CHECK(run_cli("eval --data /nonexistent/dir").exit_code == 2);  // neither model nor maps
    const auto missing = run_cli("train --data /nonexistent/dir --out /tmp/protocase_cli_x");
    CHECK(missing.exit_code == 3);
    CHECK(missing.output.find("missing file") != std::string::npos);
}

TEST_CASE("help enumerates flags with defaults", "[cli]") {
    const auto top = run_cli("--help");
    CHECK(top.exit_code == 0);
    for (const char* sub : {"gen-data", "train", "eval", "explain", "prune", "gradcheck"})
        CHECK(top.output.find(sub) != std::string::npos);

    const auto train_help = run_cli("train --help");
    CHECK(train_help.exit_code == 0);
    for (const char* flag : {"--data", "--out", "--seed", "--warmup-epochs", "--a1-epochs",
                             "--a3-steps", "--max-cycles", "--tol", "--lr-joint", "--lr-h1",
                             "--lr-b", "--batch-size", "--lambda-cluster", "--lambda-sep",
                             "--lambda-fine", "--pool-fraction", "--epsilon-sim",
                             "--prototypes-per-type", "--resume"})
        CHECK(train_help.output.find(flag) != std::string::npos);
    CHECK(train_help.output.find("0.001") != std::string::npos);  // lambda-fine default
    CHECK(train_help.output.find("0.05") != std::string::npos);   // pool-fraction default

    const auto gen_help = run_cli("gen-data --help");
    for (const char* flag : {"--out", "--seed", "--n-per-type", "--image-h", "--image-w",
                             "--context-margin", "--fine-fraction", "--confounder",
                             "--train-frac", "--val-frac"})
        CHECK(gen_help.output.find(flag) != std::string::npos);
}

TEST_CASE("gen-data twice yields identical directory trees", "[cli]") {
    const auto d1 = temp_dir("gen_a");
    REQUIRE(run_cli("gen-data --seed 7 --n-per-type 4 --out " + d1.string()).exit_code == 0);
    CHECK(fs::exists(d1 / "run_config.txt"));  // resolved config emitted

    // snapshot, rerun into the same path, compare every byte
    std::map<std::string, std::vector<std::uint8_t>> snapshot;
    for (const auto& entry : fs::recursive_directory_iterator(d1))
        if (entry.is_regular_file())
            snapshot[fs::relative(entry.path(), d1).string()] =
                png::read_file(entry.path().string());
    REQUIRE(run_cli("gen-data --seed 7 --n-per-type 4 --out " + d1.string()).exit_code == 0);
    for (const auto& [rel, bytes] : snapshot)
        CHECK(png::read_file((d1 / rel).string()) == bytes);
    fs::remove_all(d1);
}

TEST_CASE("config file values are overridden by flags", "[cli]") {
    const auto dir = temp_dir("cfg");
    const auto cfg_path = dir / "run.cfg";
    {
        std::ofstream f(cfg_path);
        f << "seed=11\n";
        f << "n-per-type=3\n";
    }
    const auto out1 = dir / "from_file";
    REQUIRE(run_cli("gen-data --config " + cfg_path.string() + " --out " + out1.string())
                .exit_code == 0);
    const auto ds1 = load(out1.string());
    CHECK(ds1.config.seed == 11);
    CHECK(ds1.config.n_per_type == 3);

    const auto out2 = dir / "flag_wins";
    REQUIRE(run_cli("gen-data --config " + cfg_path.string() + " --seed 12 --out " + out2.string())
                .exit_code == 0);
    CHECK(load(out2.string()).config.seed == 12);
    fs::remove_all(dir);
}

TEST_CASE("gradcheck subcommand passes on the default seed", "[cli]") {
    const auto r = run_cli("gradcheck");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("gradcheck PASS") != std::string::npos);
}

TEST_CASE("end-to-end pipeline: gen-data, train, eval, explain, prune", "[cli]") {
    const auto root = temp_dir("pipeline");
    const auto data = root / "data";
    const auto model = root / "model";

    REQUIRE(run_cli("gen-data --seed 7 --n-per-type 6 --fine-fraction 0.5 --out " + data.string())
                .exit_code == 0);
    REQUIRE(run_cli("train --data " + data.string() + " --out " + model.string() +
                    " --seed 7 --warmup-epochs 1 --a1-epochs 1 --max-cycles 1 --a3-steps 15"
                    " --batch-size 6")
                .exit_code == 0);
    REQUIRE(fs::exists(model / "final.ckpt"));
    REQUIRE(fs::exists(model / "loss_trace.txt"));
    REQUIRE(fs::exists(model / "run_config.txt"));

    {
        std::ifstream f(model / "loss_trace.txt");
        std::string header;
        std::getline(f, header);
        REQUIRE(header == "# cycle,stage,epoch,loss_total,ce,cluster,sep,fine");
        std::string row;
        std::getline(f, row);
        REQUIRE(row.rfind("0,warmup,0,", 0) == 0);
    }

    const auto eval_out = root / "eval";
    const auto ev = run_cli("eval --model " + (model / "final.ckpt").string() + " --data " +
                            data.string() + " --split test --bootstrap 200 --out " +
                            eval_out.string());
    REQUIRE(ev.exit_code == 0);
    REQUIRE(fs::exists(eval_out / "metrics.txt"));
    for (const char* metric : {"margin_accuracy", "margin_auroc_weighted",
                               "margin_auroc_circumscribed", "cohen_kappa", "ap_lesion"})
        CHECK(ev.output.find(metric) != std::string::npos);

    const auto explain_out = root / "explain";
    REQUIRE(run_cli("explain --model " + (model / "final.ckpt").string() + " --data " +
                    data.string() + " --out " + explain_out.string() + " --limit 1 --prototypes")
                .exit_code == 0);
    bool found_case = false;
    for (const auto& e : fs::directory_iterator(explain_out))
        if (e.is_directory() && e.path().filename().string().rfind("case_", 0) == 0) {
            found_case = true;
            CHECK(fs::exists(e.path() / "summary.txt"));
            CHECK(fs::exists(e.path() / "evidence_1.png"));
        }
    REQUIRE(found_case);
    REQUIRE(fs::exists(explain_out / "prototypes"));

    const auto pruned = root / "pruned.ckpt";
    REQUIRE(run_cli("prune --model " + (model / "final.ckpt").string() + " --out " +
                    pruned.string())
                .exit_code == 0);
    REQUIRE(fs::exists(pruned));

    // malformed checkpoint is a data error with a distinct message
    {
        auto bytes = png::read_file(pruned.string());
        bytes[0] = 'Z';
        png::write_file(pruned.string(), bytes);
        const auto bad = run_cli("eval --model " + pruned.string() + " --data " + data.string() +
                                 " --out " + (root / "bad").string());
        CHECK(bad.exit_code == 3);
        CHECK(bad.output.find("checkpoint") != std::string::npos);
    }
    fs::remove_all(root);
}

TEST_CASE("eval scores external attention maps", "[cli]") {
    const auto root = temp_dir("extmaps");
    const auto data = root / "data";
    REQUIRE(run_cli("gen-data --seed 9 --n-per-type 4 --fine-fraction 1.0 --out " + data.string())
                .exit_code == 0);
    const auto ds = load(data.string());

    // hand-made maps: bright exactly on the relevant lesion region -> AP 1.0
    const auto maps = root / "maps";
    fs::create_directories(maps);
    for (int i : ds.indices_of(Split::Test)) {
        const auto& s = ds.samples[i];
        std::vector<std::uint8_t> bytes(s.lesion_mask.size());
        for (std::size_t p = 0; p < bytes.size(); ++p)
            bytes[p] = s.lesion_mask.pix[p] < 0.5 ? 255 : 0;
        png::write_file((maps / (s.id + ".png")).string(),
                        png::encode_gray8(s.lesion_mask.h, s.lesion_mask.w, bytes));
    }
    const auto r = run_cli("eval --data " + data.string() + " --attention-maps " + maps.string() +
                           " --split test --out " + (root / "out").string());
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("ap_lesion_external,1.000000") != std::string::npos);
    CHECK(r.output.find("ap_fine_external") != std::string::npos);
    fs::remove_all(root);
}
