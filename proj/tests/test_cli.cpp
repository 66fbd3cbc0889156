#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "dbsp/mask_io.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path d =
        fs::temp_directory_path() / ("dbsp_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

CliResult run_cli(const std::string& args) {
  const fs::path log = work_dir() / "cli_output.log";
  const std::string command =
      std::string(DBSP_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(command.c_str());
  CliResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  result.output.assign((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  return result;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const char* fixture(const char* name) {
  static std::string path;
  path = std::string(DBSP_FIXTURE_DIR) + "/" + name;
  return path.c_str();
}

}  // namespace

TEST_CASE("cli gen writes identical files for a static chain") {
  const fs::path out = work_dir() / "gen_static";
  const CliResult r = run_cli(
      "--seed 3 gen --heads 6 --qblocks 8 --kvblocks 8 --pattern random --dmin 0.2 "
      "--dmax 0.8 --steps 3 --flip 0.0 --out " + out.string());
  REQUIRE(r.exit_code == 0);
  const std::string step0 = slurp(out / "step0000_layer0000.mask");
  CHECK(step0 == slurp(out / "step0001_layer0000.mask"));
  CHECK(step0 == slurp(out / "step0002_layer0000.mask"));
}

TEST_CASE("cli gen with full flips complements the previous step") {
  const fs::path out = work_dir() / "gen_flip";
  REQUIRE(run_cli("--seed 3 gen --heads 2 --qblocks 4 --kvblocks 4 --steps 2 "
                  "--flip 1.0 --out " + out.string()).exit_code == 0);
  const auto first = dbsp::load_mask_set(out / "step0000_layer0000.mask");
  const auto second = dbsp::load_mask_set(out / "step0001_layer0000.mask");
  for (uint32_t h = 0; h < first.num_heads(); ++h)
    for (uint32_t q = 0; q < 4; ++q)
      for (uint32_t k = 0; k < 4; ++k)
        CHECK(first.head(h).get(q, k) != second.head(h).get(q, k));
}

TEST_CASE("cli gen rejects an inverted density law") {
  CHECK(run_cli("gen --heads 2 --qblocks 4 --kvblocks 4 --dmin 0.9 --dmax 0.2 --out " +
                (work_dir() / "gen_bad").string()).exit_code == 2);
}

TEST_CASE("cli plan reports rho improvement and writes the outcome") {
  const fs::path mask_dir = work_dir() / "plan_masks";
  REQUIRE(run_cli("--seed 5 gen --heads 8 --qblocks 16 --kvblocks 16 --dmin 0.1 "
                  "--dmax 0.9 --out " + mask_dir.string()).exit_code == 0);
  const fs::path plan_path = work_dir() / "plan.json";
  const CliResult r =
      run_cli("plan --mask " + (mask_dir / "step0000_layer0000.mask").string() +
              " --strategy U4R2 --out " + plan_path.string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("rho_pre") != std::string::npos);
  const nlohmann::json plan = nlohmann::json::parse(slurp(plan_path));
  CHECK(plan["strategy"]["x"] == 4);
  CHECK(plan["head_assignment"].size() == 8);
  CHECK(plan["rho_post"].get<double>() >= 1.0);
  CHECK(plan["rho_post"].get<double>() <= plan["rho_pre"].get<double>() + 1e-12);
}

TEST_CASE("cli plan on a uniform mask is already balanced") {
  const fs::path mask_dir = work_dir() / "plan_uniform";
  REQUIRE(run_cli("gen --heads 8 --qblocks 8 --kvblocks 8 --dmin 1.0 --dmax 1.0 --out " +
                  mask_dir.string()).exit_code == 0);
  const fs::path plan_path = work_dir() / "uniform_plan.json";
  const CliResult r =
      run_cli("plan --mask " + (mask_dir / "step0000_layer0000.mask").string() +
              " --strategy U8R1 --out " + plan_path.string());
  REQUIRE(r.exit_code == 0);
  const nlohmann::json plan = nlohmann::json::parse(slurp(plan_path));
  CHECK(plan["rho_pre"].get<double>() == 1.0);
  CHECK(plan["rho_post"].get<double>() == 1.0);
}

TEST_CASE("cli plan rejects an infeasible strategy with exit 2") {
  const fs::path mask_dir = work_dir() / "plan_masks2";
  REQUIRE(run_cli("gen --heads 8 --qblocks 8 --kvblocks 8 --out " +
                  mask_dir.string()).exit_code == 0);
  CHECK(run_cli("plan --mask " + (mask_dir / "step0000_layer0000.mask").string() +
                " --strategy U16R1 --out " + (work_dir() / "p.json").string())
            .exit_code == 2);
}

TEST_CASE("cli eval reproduces the hand-built workload fixture") {
  const fs::path out = work_dir() / "workload.json";
  const CliResult r = run_cli("eval --mask " + std::string(fixture("counts_3122.json")) +
                              " --strategy U1R2 --out " + out.string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("1.25") != std::string::npos);
  const nlohmann::json workload = nlohmann::json::parse(slurp(out));
  CHECK(workload["rho_s"].get<double>() == doctest::Approx(1.25).epsilon(1e-12));
  CHECK(workload["counts"] == nlohmann::json::parse("[[3,1],[2,2]]"));
}

TEST_CASE("cli eval flags dimension mismatches with exit 4") {
  const fs::path plan_path = work_dir() / "bad_plan.json";
  {
    std::ofstream out(plan_path);
    out << R"({"strategy":{"x":1,"y":2},"head_assignment":[0],)"
        << R"("q_assignment":[0,1],"kv_assignment":[0,1]})";
  }
  CHECK(run_cli("eval --mask " + std::string(fixture("counts_3122.json")) +
                " --strategy U1R2 --plan " + plan_path.string() + " --out " +
                (work_dir() / "w.json").string()).exit_code == 4);
}

TEST_CASE("cli fit emits the dense intercept and slope") {
  const fs::path out = work_dir() / "profile.json";
  const CliResult r = run_cli("fit --samples " + std::string(fixture("profile_samples.csv")) +
                              " --out " + out.string());
  REQUIRE(r.exit_code == 0);
  const nlohmann::json profile = nlohmann::json::parse(slurp(out));
  REQUIRE(profile["dense"].size() == 2);
  CHECK(profile["dense"][0]["density"] == 0.0);
  CHECK(profile["dense"][0]["seconds"].get<double>() ==
        doctest::Approx(0.001).epsilon(1e-9));
  CHECK(profile["dense"][1]["seconds"].get<double>() ==
        doctest::Approx(0.010).epsilon(1e-9));
  CHECK(run_cli("fit --samples /nonexistent.csv --out x.json").exit_code == 3);
}

TEST_CASE("cli simulate produces a report and is deterministic") {
  const fs::path profile = work_dir() / "profile.json";
  REQUIRE(run_cli("fit --samples " + std::string(fixture("profile_samples.csv")) +
                  " --out " + profile.string()).exit_code == 0);
  const std::string common =
      "--seed 11 --gpus 2 simulate --heads 8 --qblocks 8 --kvblocks 8 --dmin 0.2 "
      "--dmax 0.8 --steps 3 --layers 2 --flip 0.05 --profile " + profile.string();
  const fs::path report1 = work_dir() / "report1.json";
  const fs::path report2 = work_dir() / "report2.json";
  REQUIRE(run_cli(common + " --out " + report1.string()).exit_code == 0);
  REQUIRE(run_cli(common + " --out " + report2.string()).exit_code == 0);
  CHECK(slurp(report1) == slurp(report2));
  const nlohmann::json report = nlohmann::json::parse(slurp(report1));
  CHECK(report["records"].size() == 6);
  CHECK(report["total_seconds"].get<double>() > 0.0);
}

TEST_CASE("cli compare and sweep write tables") {
  const fs::path profile = work_dir() / "profile2.json";
  REQUIRE(run_cli("fit --samples " + std::string(fixture("profile_samples.csv")) +
                  " --out " + profile.string()).exit_code == 0);

  const fs::path cmp = work_dir() / "compare.csv";
  const CliResult r1 =
      run_cli("--gpus 2 compare --heads 8 --qblocks 8 --kvblocks 8 --dmin 0.2 --dmax 0.8 "
              "--steps 2 --profile " + profile.string() + " --out " + cmp.string());
  REQUIRE(r1.exit_code == 0);
  CHECK(slurp(cmp).rfind("mode,strategy,balanced", 0) == 0);

  const fs::path swp = work_dir() / "sweep.csv";
  const CliResult r2 = run_cli(
      "--gpus 2 sweep --heads 8 --qblocks 8 --kvblocks 8 --dmin 0.2 --dmax 0.8 --steps 2 "
      "--policy fixed --strategy U1R2 --param Rb --values 0,0.5,inf --profile " +
      profile.string() + " --out " + swp.string());
  REQUIRE(r2.exit_code == 0);
  const std::string csv = slurp(swp);
  CHECK(csv.rfind("param,value", 0) == 0);
  // The infinite-reward row moves nothing.
  const size_t inf_row = csv.find("Rb,inf");
  REQUIRE(inf_row != std::string::npos);
  const std::string tail = csv.substr(inf_row);
  const size_t c1 = tail.find(',', 3);
  const size_t c2 = tail.find(',', c1 + 1);
  const size_t c3 = tail.find(',', c2 + 1);
  const size_t c4 = tail.find(',', c3 + 1);
  CHECK(tail.substr(c3 + 1, c4 - c3 - 1) == "0");
}

TEST_CASE("cli rejects missing required flags with exit 2") {
  CHECK(run_cli("simulate --heads 4").exit_code == 2);
  CHECK(run_cli("sweep --param Zz --values 1 --profile x --out y").exit_code == 2);
}
