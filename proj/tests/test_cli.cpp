#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "opera/common.hpp"

namespace fs = std::filesystem;

namespace {

std::string opera_bin() {
    const char* p = std::getenv("OPERA_BIN");
    REQUIRE(p != nullptr);
    return p;
}

std::string opera_src() {
    const char* p = std::getenv("OPERA_SRC");
    REQUIRE(p != nullptr);
    return p;
}

struct RunResult {
    int status = -1;
    std::string out;
};

// runs the binary with stderr folded into stdout
RunResult run(const std::string& args) {
    const std::string cmd = opera_bin() + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    RunResult r;
    std::array<char, 4096> buf{};
    size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
    const int rc = pclose(pipe);
    r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("opera_cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) { return opera::read_file(p.string()); }

bool trees_identical(const fs::path& a, const fs::path& b) {
    std::vector<std::string> rel_a, rel_b;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) rel_a.push_back(fs::relative(e.path(), a).string());
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) rel_b.push_back(fs::relative(e.path(), b).string());
    std::sort(rel_a.begin(), rel_a.end());
    std::sort(rel_b.begin(), rel_b.end());
    if (rel_a != rel_b) return false;
    for (const std::string& rel : rel_a)
        if (slurp(a / rel) != slurp(b / rel)) return false;
    return !rel_a.empty();
}

}  // namespace

TEST_CASE("usage errors and help exit codes") {
    CHECK(run("definitely-not-a-subcommand").status == 2);
    CHECK(run("synth --no-such-flag").status == 2);
    CHECK(run("").status == 2);

    RunResult top = run("--help");
    CHECK(top.status == 0);
    CHECK(top.out.find("synth") != std::string::npos);
    CHECK(top.out.find("benchmark") != std::string::npos);
    for (const char* sub : {"synth", "preprocess", "pretrain", "extract", "probe", "finetune",
                            "benchmark", "mrr-fixture", "saliency"}) {
        RunResult h = run(std::string(sub) + " --help");
        CHECK_MESSAGE(h.status == 0, sub);
        CHECK(h.out.find("--seed") != std::string::npos);
    }
}

TEST_CASE("synth is byte-identical under a fixed seed") {
    const fs::path d = fresh_dir("synth_det");
    CHECK(run("synth --seed 7 --subjects 4 --clips 3 --duration 3 --out " +
              (d / "a").string()).status == 0);
    CHECK(run("synth --seed 7 --subjects 4 --clips 3 --duration 3 --out " +
              (d / "b").string()).status == 0);
    CHECK(run("synth --seed 8 --subjects 4 --clips 3 --duration 3 --out " +
              (d / "c").string()).status == 0);
    CHECK(trees_identical(d / "a", d / "b"));
    CHECK_FALSE(trees_identical(d / "a", d / "c"));
}

TEST_CASE("config file sits between defaults and flags") {
    const fs::path d = fresh_dir("cli_cfg");
    std::ofstream(d / "cfg.ini") << "[global]\nseed = 21\n\n[synth]\nn_subjects = 3\n"
                                 << "clips_per_subject = 2\nduration_s = 2\n";

    // default n_subjects is 20; the file lowers it to 3; a flag beats the file
    RunResult from_file =
        run("synth --config " + (d / "cfg.ini").string() + " --out " + (d / "f").string());
    CHECK(from_file.status == 0);
    CHECK(from_file.out.find("wrote 6 clips") != std::string::npos);

    RunResult from_flag = run("synth --config " + (d / "cfg.ini").string() +
                              " --subjects 5 --out " + (d / "g").string());
    CHECK(from_flag.status == 0);
    CHECK(from_flag.out.find("wrote 10 clips") != std::string::npos);

    // the file seed (21) must match an explicit --seed 21 run byte for byte
    CHECK(run("synth --subjects 3 --clips 2 --duration 2 --seed 21 --out " +
              (d / "h").string()).status == 0);
    CHECK(trees_identical(d / "f", d / "h"));

    // and a flag seed must override the file seed
    CHECK(run("synth --config " + (d / "cfg.ini").string() + " --seed 99 --out " +
              (d / "i").string()).status == 0);
    CHECK_FALSE(trees_identical(d / "f", d / "i"));

    std::ofstream(d / "bad.ini") << "[synth]\nnot_a_knob = 1\n";
    CHECK(run("synth --config " + (d / "bad.ini").string() + " --out " +
              (d / "j").string()).status == 2);
    CHECK(run("synth --config " + (d / "missing.ini").string() + " --out " +
              (d / "k").string()).status == 2);
    std::ofstream(d / "dup.ini") << "[synth]\nn_subjects = 2\nn_subjects = 3\n";
    CHECK(run("synth --config " + (d / "dup.ini").string() + " --out " +
              (d / "l").string()).status == 2);
}

TEST_CASE("mrr fixture reproduces the published table") {
    const std::string fixture = (fs::path(opera_src()) / "fixtures" / "paper_tables.csv").string();
    RunResult r = run("mrr-fixture --fixture " + fixture);
    CHECK(r.status == 0);
    CHECK(r.out.find("all opera-ct 0.5632") != std::string::npos);
    CHECK(r.out.find("lung opera-gt 0.6548") != std::string::npos);

    // corrupt one value: the command must flag it and exit nonzero
    const fs::path d = fresh_dir("cli_mrr");
    std::string text = slurp(fixture);
    const size_t at = text.find("T6,health,higher,opera-ct,0.795");
    REQUIRE(at != std::string::npos);
    text.replace(at, std::string("T6,health,higher,opera-ct,0.795").size(),
                 "T6,health,higher,opera-ct,0.405");
    std::ofstream(d / "tampered.csv") << text;
    RunResult bad = run("mrr-fixture --fixture " + (d / "tampered.csv").string());
    CHECK(bad.status == 1);
    CHECK(bad.out.find("opera-ct") != std::string::npos);

    CHECK(run("mrr-fixture --fixture " + (d / "nope.csv").string()).status == 1);
}

TEST_CASE("pipeline smoke: synth, preprocess, pretrain, extract, probe, benchmark, saliency") {
    const fs::path d = fresh_dir("cli_pipe");
    const std::string man = (d / "corpus" / "manifest.jsonl").string();
    REQUIRE(run("synth --seed 11 --subjects 10 --clips 4 --duration 4 --out " +
                (d / "corpus").string()).status == 0);

    RunResult pre =
        run("preprocess --manifest " + man + " --out " + (d / "cache").string());
    CHECK(pre.status == 0);
    CHECK(fs::exists(d / "cache" / "s000_c000.opsg"));
    CHECK(fs::exists(d / "cache" / "s009_c003.opsg"));

    RunResult pt = run("pretrain --manifest " + man +
                       " --method contrastive --epochs 2 --batch-size 4 --seed 3 --out " +
                       (d / "pt").string());
    CHECK(pt.status == 0);
    CHECK(fs::exists(d / "pt" / "encoder.opck"));
    const std::string hist = slurp(d / "pt" / "history.csv");
    CHECK(hist.rfind("epoch,train_loss,val_loss,top1", 0) == 0);

    const std::string ck = (d / "pt" / "encoder.opck").string();
    REQUIRE(run("extract --checkpoint " + ck + " --manifest " + man + " --out " +
                (d / "f.opft").string()).status == 0);

    RunResult pr = run("probe --features " + (d / "f.opft").string() + " --manifest " + man +
                       " --task wheeze --runs 2 --seed 5");
    CHECK(pr.status == 0);
    CHECK(pr.out.find("task_id,method,metric,mean,std,n_units") != std::string::npos);
    CHECK(pr.out.find("wheeze,opera,auroc,") != std::string::npos);

    RunResult pr2 = run("probe --features " + (d / "f.opft").string() + " --manifest " + man +
                        " --task wheeze --runs 2 --seed 5");
    CHECK(pr2.out == pr.out);

    RunResult bm = run("benchmark --checkpoint " + ck + " --manifest " + man +
                       " --runs 2 --seed 5 --out " + (d / "bench").string());
    CHECK(bm.status == 0);
    CHECK(fs::exists(d / "bench" / "results.csv"));
    CHECK(fs::exists(d / "bench" / "report.md"));
    CHECK(slurp(d / "bench" / "results.csv").find("rate,opera,mae,") != std::string::npos);

    RunResult sal = run("saliency --checkpoint " + ck + " --clip " +
                        (d / "corpus" / "s000_c000.wav").string() + " --manifest " + man +
                        " --out " + (d / "sal.opsg").string());
    CHECK(sal.status == 0);
    CHECK(fs::exists(d / "sal.opsg"));

    // a probe against a feature file with the wrong ids must fail at runtime
    CHECK(run("probe --features " + (d / "sal.opsg").string() + " --manifest " + man +
              " --task wheeze").status == 1);
}

TEST_CASE("finetune smoke with frozen encoder") {
    const fs::path d = fresh_dir("cli_ft");
    const std::string man = (d / "corpus" / "manifest.jsonl").string();
    REQUIRE(run("synth --seed 13 --subjects 10 --clips 4 --duration 3 --out " +
                (d / "corpus").string()).status == 0);
    REQUIRE(run("pretrain --manifest " + man +
                " --method generative --epochs 1 --batch-size 4 --seed 3 --out " +
                (d / "pt").string()).status == 0);
    RunResult ft = run("finetune --checkpoint " + (d / "pt" / "encoder.opck").string() +
                       " --manifest " + man +
                       " --task wheeze --epochs 1 --batch-size 4 --freeze enc. --seed 5 --out " +
                       (d / "ft").string());
    CHECK(ft.status == 0);
    CHECK(ft.out.find("wheeze,auroc,") != std::string::npos);
    CHECK(fs::exists(d / "ft" / "encoder_ft.opck"));
}
