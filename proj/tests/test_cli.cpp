#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "tnx/archive.hpp"
#include "tnx/testing.hpp"

namespace {

struct CmdResult {
    int exit_code;
    std::string out;
};

CmdResult run(const std::string& args) {
    const std::string cmd = std::string(TNX_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string out;
    std::array<char, 4096> buf{};
    while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
    const int status = pclose(pipe);
    return {WEXITSTATUS(status), out};
}

std::string write_toy_config() {
    const std::string path = "/tmp/tnx_cli_toy.cfg";
    std::ofstream out(path);
    out << "channels=24,24,24,24\n"
        << "blocks=1,1,1,1\n"
        << "mlp_ratio=2,2,2,2\n"
        << "mixers=A,A,A,M\n"
        << "window=3,3,3,0\n"
        << "pool_mode=ratio\n"
        << "pool=32,32,32,0\n";
    return path;
}

std::string write_image_archive(int res) {
    const std::string path = "/tmp/tnx_cli_image.tnx";
    tnx::Rng rng(99);
    auto img = tnx::testing::rand_tensor<float>(rng, {3, static_cast<std::size_t>(res),
                                                      static_cast<std::size_t>(res)});
    std::vector<tnx::ArchiveEntry> entries;
    entries.push_back(tnx::make_entry("image", img));
    tnx::write_archive(path, std::move(entries));
    return path;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("info reports params and flops for stock configs") {
    auto r = run("info --config micro --resolution 224 --mode normal");
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("# seed=0") != std::string::npos);
    CHECK(r.out.find("# channels=48,96,192,384") != std::string::npos);
    CHECK(r.out.find("section,params,flops_mac1,flops_mac2") != std::string::npos);
    // total row sanity: params ~12.8M, mac1 flops ~2.7G
    std::istringstream lines(r.out);
    std::string line, total;
    while (std::getline(lines, line))
        if (line.rfind("total,", 0) == 0) total = line;
    REQUIRE(!total.empty());
    std::uint64_t params = 0, mac1 = 0;
    std::sscanf(total.c_str(), "total,%lu,%lu", &params, &mac1);
    CHECK(std::abs(static_cast<double>(params) / 12.8e6 - 1.0) <= 0.02);
    CHECK(std::abs(static_cast<double>(mac1) / 2.7e9 - 1.0) <= 0.05);
}

TEST_CASE("info echoes custom config rows exactly") {
    const auto cfg = write_toy_config();
    auto r = run("info --config " + cfg + " --resolution 64");
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("# channels=24,24,24,24") != std::string::npos);
    CHECK(r.out.find("# pool=32,32,32,0") != std::string::npos);
    CHECK(r.out.find("# pool_mode=ratio") != std::string::npos);
}

TEST_CASE("info rejects a bad resolution with exit 2") {
    auto r = run("info --config micro --resolution 100");
    CHECK(r.exit_code == 2);
    CHECK(r.out.find("multiple of 32") != std::string::npos);
}

TEST_CASE("unknown flags are rejected") {
    auto r = run("info --config micro --frobnicate 3");
    CHECK(r.exit_code == 2);
}

TEST_CASE("forward writes a logits archive deterministically") {
    const auto cfg = write_toy_config();
    const auto img = write_image_archive(64);
    auto r1 = run("forward --config " + cfg + " --seed 7 --input " + img +
                  " --mode normal --output /tmp/tnx_cli_out1.tnx");
    CHECK(r1.exit_code == 0);
    auto r2 = run("forward --config " + cfg + " --seed 7 --input " + img +
                  " --mode normal --output /tmp/tnx_cli_out2.tnx");
    CHECK(r2.exit_code == 0);
    const std::string b1 = slurp("/tmp/tnx_cli_out1.tnx");
    CHECK(!b1.empty());
    CHECK(b1 == slurp("/tmp/tnx_cli_out2.tnx"));
    auto entries = tnx::read_archive("/tmp/tnx_cli_out1.tnx");
    REQUIRE(entries.size() == 1);
    CHECK(entries[0].name == "logits");
    CHECK(entries[0].element_count() == 1000);
    auto logits = tnx::entry_to_tensor<float>(entries[0]);
    for (std::size_t i = 0; i < logits.size(); ++i) CHECK(std::isfinite(logits[i]));
    std::remove("/tmp/tnx_cli_out1.tnx");
    std::remove("/tmp/tnx_cli_out2.tnx");
}

TEST_CASE("forward maps archive problems to exit 3 and shape problems to exit 2") {
    const auto cfg = write_toy_config();
    auto missing = run("forward --config " + cfg +
                       " --input /tmp/tnx_cli_nonexistent.tnx --output /tmp/tnx_cli_o.tnx");
    CHECK(missing.exit_code == 3);
    // image with extents not a multiple of 32 -> shape error -> 2
    tnx::Rng rng(1);
    std::vector<tnx::ArchiveEntry> entries;
    entries.push_back(
        tnx::make_entry("image", tnx::testing::rand_tensor<float>(rng, {3, 60, 60})));
    tnx::write_archive("/tmp/tnx_cli_badimg.tnx", std::move(entries));
    auto bad = run("forward --config " + cfg +
                   " --input /tmp/tnx_cli_badimg.tnx --output /tmp/tnx_cli_o.tnx");
    CHECK(bad.exit_code == 2);
    std::remove("/tmp/tnx_cli_badimg.tnx");
}

TEST_CASE("bench emits the documented CSV schema") {
    auto r = run("bench --case fused --h 16 --w 16 --c 24 --heads 2 --k 3 --iters 3");
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("case,h,w,c,heads,k,iters,ns_per_iter,scratch_bytes") != std::string::npos);
    CHECK(r.out.find("fused,16,16,24,2,3,3,") != std::string::npos);
    auto naive = run("bench --case naive --h 16 --w 16 --c 24 --heads 2 --k 3 --iters 3");
    CHECK(naive.exit_code == 0);
    CHECK(naive.out.find("naive,16,16,24,2,3,3,") != std::string::npos);
}

TEST_CASE("erf writes a grid and PGM for a toy run") {
    const auto cfg = write_toy_config();
    auto r = run("erf --config " + cfg +
                 " --seed 3 --resolution 32 --stage 1 --step 0.01 --output /tmp/tnx_cli_erf");
    CHECK(r.exit_code == 0);
    const std::string txt = slurp("/tmp/tnx_cli_erf.txt");
    CHECK(!txt.empty());
    std::istringstream lines(txt);
    std::string line;
    int rows = 0;
    while (std::getline(lines, line)) ++rows;
    CHECK(rows == 32);
    const std::string pgm = slurp("/tmp/tnx_cli_erf.pgm");
    CHECK(pgm.rfind("P5\n32 32\n255\n", 0) == 0);
    CHECK(pgm.size() == std::string("P5\n32 32\n255\n").size() + 32 * 32);
    std::remove("/tmp/tnx_cli_erf.txt");
    std::remove("/tmp/tnx_cli_erf.pgm");
    // resolution guard
    auto guarded = run("erf --config " + cfg +
                       " --seed 3 --resolution 96 --stage 1 --output /tmp/tnx_cli_erf2");
    CHECK(guarded.exit_code == 2);
}

TEST_CASE("selftest passes and reports at least 12 suites") {
    auto r = run("selftest");
    CHECK(r.exit_code == 0);
    int suites = 0;
    std::istringstream lines(r.out);
    std::string line;
    while (std::getline(lines, line))
        if (line.rfind("ok,", 0) == 0) ++suites;
    CHECK(suites >= 12);
    CHECK(r.out.find("FAIL") == std::string::npos);
}
