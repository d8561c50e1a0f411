#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "taxcl/data.hpp"

namespace fs = std::filesystem;
using taxcl::cli::run_cli;

namespace {

struct Invocation {
    int code = 0;
    std::string out;
};

// Runs the CLI in-process with stdout and stderr captured.
Invocation invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "taxcl");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    const int code = run_cli(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    return {code, out.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::size_t count_lines(const std::string& s) {
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("taxcl_cli_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)) + "_" +
                std::to_string(std::rand()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

const std::vector<std::string> kSmallData{"--S", "2", "--C", "2", "--n-per-class", "10",
                                          "--dim", "6"};
const std::vector<std::string> kSmallModel{"--hidden", "8",     "--rep-dim",    "6",
                                           "--proj-hidden", "6", "--emb-dim", "4",
                                           "--epochs", "3",      "--batch-size", "8",
                                           "--warmup", "1"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST_CASE("gen-data is deterministic and writes a complete run directory") {
    TempDir t;
    auto args = cat({"gen-data", "--seed", "3"}, kSmallData);
    REQUIRE(invoke(cat(args, {"--run-dir", t / "a"})).code == 0);
    REQUIRE(invoke(cat(args, {"--run-dir", t / "b/nested"})).code == 0);
    CHECK(slurp(t.path / "a/dataset.csv") == slurp(t.path / "b/nested/dataset.csv"));

    taxcl::GenSpec g;
    g.superclasses = 2;
    g.subclasses = 2;
    g.n_per_class = 10;
    g.dim = 6;
    g.seed = 3;
    CHECK(taxcl::load_csv(t.path / "a/dataset.csv") == taxcl::generate(g));

    const auto cfg = read_json(t.path / "a/config.json");
    CHECK(cfg["command"] == "gen-data");
    CHECK(cfg["seed"] == 3);
    const std::string manifest = slurp(t.path / "a/MANIFEST");
    for (const char* name : {"config.json", "dataset.csv", "gen_spec.json"}) {
        const std::string line =
            taxcl::cli::sha256_file(t.path / "a" / name) + "  " + name + "\n";
        CHECK(manifest.find(line) != std::string::npos);
    }
    CHECK(count_lines(manifest) == 3);
}

TEST_CASE("without --run-dir the run lands under --out with a timestamped name") {
    TempDir t;
    const auto r = invoke(cat({"gen-data", "--out", t / "runs"}, kSmallData));
    REQUIRE(r.code == 0);
    const fs::path printed = r.out.substr(0, r.out.find('\n'));
    CHECK(printed.parent_path() == t.path / "runs");
    const std::string name = printed.filename().string();
    // YYYYMMDDTHHMMSSZ-<12 hex>
    REQUIRE(name.size() == 16 + 1 + 12);
    CHECK(name[8] == 'T');
    CHECK(name[15] == 'Z');
    CHECK(name.substr(17) ==
          taxcl::cli::sha256_hex(slurp(printed / "config.json")).substr(0, 12));
}

TEST_CASE("identity reweighting and alpha 0 reproduce the SupCon trace byte for byte") {
    TempDir t;
    auto base = cat(cat({"train"}, kSmallData), kSmallModel);
    REQUIRE(invoke(cat(base, {"--variant", "supcon", "--run-dir", t / "s"})).code == 0);
    REQUIRE(invoke(cat(base, {"--variant", "taxcl_sup", "--q-mode", "identity", "--run-dir",
                              t / "i"}))
                .code == 0);
    REQUIRE(invoke(cat(base, {"--variant", "combined", "--alpha", "0", "--run-dir", t / "c"}))
                .code == 0);
    const std::string trace = slurp(t.path / "s/trace.csv");
    CHECK(count_lines(trace) > 1);
    CHECK(slurp(t.path / "i/trace.csv") == trace);
    CHECK(slurp(t.path / "c/trace.csv") == trace);
    REQUIRE(invoke(cat(base, {"--variant", "taxcl_sup", "--run-dir", t / "d"})).code == 0);
    CHECK(slurp(t.path / "d/trace.csv") != trace);
}

TEST_CASE("probe and analyze consume a training checkpoint") {
    TempDir t;
    REQUIRE(invoke(cat(cat({"train", "--run-dir", t / "train"}, kSmallData), kSmallModel)).code ==
            0);
    const std::string ckpt = t / "train/checkpoint.txck";
    auto probe = cat({"probe", "--checkpoint", ckpt, "--probe-epochs", "5"}, kSmallData);
    REQUIRE(invoke(cat(probe, {"--run-dir", t / "p1"})).code == 0);
    REQUIRE(invoke(cat(probe, {"--run-dir", t / "p2"})).code == 0);
    CHECK(slurp(t.path / "p1/probe.json") == slurp(t.path / "p2/probe.json"));
    const auto pj = read_json(t.path / "p1/probe.json");
    for (const char* key : {"train_accuracy", "test_accuracy", "accuracy"}) {
        CHECK(pj[key].get<double>() >= 0.0);
        CHECK(pj[key].get<double>() <= 1.0);
    }
    CHECK(pj["num_classes"] == 4);

    auto analyze = cat({"analyze", "--checkpoint", ckpt}, kSmallData);
    REQUIRE(invoke(cat(analyze, {"--which", "retrieve", "--k", "3", "--retrieve-batch", "8",
                                 "--run-dir", t / "r"}))
                .code == 0);
    CHECK(count_lines(slurp(t.path / "r/retrieval.csv")) == 16 + 1);
    CHECK(read_json(t.path / "r/retrieval.json")["k"] == 3);

    REQUIRE(invoke(cat(analyze, {"--which", "spectrum", "--run-dir", t / "sp"})).code == 0);
    const auto sj = read_json(t.path / "sp/spectrum.json");
    CHECK(sj["spectra"].size() == 2);

    REQUIRE(invoke(cat(analyze, {"--which", "cosine", "--run-dir", t / "co"})).code == 0);
    CHECK(fs::exists(t.path / "co/cosine.csv"));

    // one-row subset and a single-taxonomy dataset are domain errors
    CHECK(invoke(cat(analyze, {"--which", "spectrum", "--rows", "3", "--run-dir", t / "e1"})).code ==
          1);
    CHECK_FALSE(fs::exists(t.path / "e1"));
    CHECK(invoke({"analyze", "--checkpoint", ckpt, "--which", "cosine", "--S", "1", "--C", "4",
                  "--n-per-class", "10", "--dim", "6", "--run-dir", t / "e2"})
              .code == 1);
    CHECK(invoke(cat(analyze, {"--which", "histogram"})).code == 2);
}

TEST_CASE("sweep-alpha writes one hashed row per cell") {
    TempDir t;
    auto args = cat(cat({"sweep-alpha", "--run-dir", t / "sw", "--epochs", "2", "--probe-epochs",
                         "3"},
                        kSmallData),
                    {"--hidden", "8", "--rep-dim", "6", "--proj-hidden", "6", "--emb-dim", "4",
                     "--batch-size", "8", "--warmup", "1"});
    REQUIRE(invoke(args).code == 0);
    std::istringstream csv(slurp(t.path / "sw/sweep.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "alpha,seed,accuracy,train_accuracy,final_loss,config_hash");
    int rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
        const std::string hash = line.substr(line.rfind(',') + 1);
        CHECK(hash.size() == 12);
        CHECK(hash.find_first_not_of("0123456789abcdef") == std::string::npos);
    }
    CHECK(rows == 15);
    CHECK(invoke(cat(args, {"--alphas", "0.5"})).code == 2);
}

TEST_CASE("gradcheck passes and catches a corrupted gradient") {
    TempDir t;
    REQUIRE(invoke({"gradcheck", "--instances", "3", "--run-dir", t / "g"}).code == 0);
    const auto gj = read_json(t.path / "g/gradcheck.json");
    CHECK(gj["pass"] == true);
    CHECK(gj["variants"].size() == 5);
    CHECK(invoke({"gradcheck", "--instances", "3", "--corrupt-gradient", "--run-dir", t / "bad"})
              .code == 1);
    CHECK(read_json(t.path / "bad/gradcheck.json")["pass"] == false);
}

TEST_CASE("config file, environment and flags resolve in order") {
    TempDir t;
    {
        std::ofstream ini(t.path / "run.ini");
        ini << "[data]\nseed = 3\nS = 2\nC = 2\nn-per-class = 5\ndim = 4\n";
    }
    auto seed_of = [&](std::vector<std::string> extra) {
        auto args = cat({"gen-data", "--config", t / "run.ini", "--run-dir", t / "x"}, extra);
        fs::remove_all(t.path / "x");
        REQUIRE(invoke(args).code == 0);
        return read_json(t.path / "x/config.json")["seed"].get<int>();
    };
    ::unsetenv("TAXCL_SEED");
    CHECK(seed_of({}) == 3);
    CHECK(seed_of({"--seed", "5"}) == 5);
    ::setenv("TAXCL_SEED", "4", 1);
    CHECK(seed_of({}) == 4);
    CHECK(seed_of({"--seed", "5"}) == 5);
    ::unsetenv("TAXCL_SEED");
    CHECK(read_json(t.path / "x/config.json")["gen"]["S"] == 2);

    {
        std::ofstream ini(t.path / "bad.ini");
        ini << "seed = 3\nlearning_rate = 9\n";
    }
    CHECK(invoke({"gen-data", "--config", t / "bad.ini", "--run-dir", t / "y"}).code == 2);
    CHECK(invoke({"gen-data", "--config", t / "missing.ini", "--run-dir", t / "y"}).code == 3);
}

TEST_CASE("exit codes for usage and I/O failures") {
    TempDir t;
    CHECK(invoke({"gen-data", "--bogus", "1"}).code == 2);
    CHECK(invoke({"frobnicate"}).code == 2);
    CHECK(invoke({"train", "--variant", "nonsense", "--run-dir", t / "v"}).code == 2);
    CHECK(invoke({"probe", "--checkpoint", t / "nope.txck", "--run-dir", t / "p"}).code == 3);
    CHECK(invoke({"train", "--data", t / "nope.csv", "--run-dir", t / "d"}).code == 3);
}
