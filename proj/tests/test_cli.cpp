#include "srblab/srblab.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

using namespace srb;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::numerical_failure;
}

ExperimentConfig kv(const std::string& text) { return ExperimentConfig::from_text(text, false); }

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("srblab_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string checksum_of(PipelineResult (*fn)(const ExperimentConfig&, RunRecorder&), const ExperimentConfig& cfg) {
    RunRecorder rec(cfg.hash());
    fn(cfg, rec);
    return rec.manifest().checksum();
}

}  // namespace

TEST(Config, DefaultsAreValid) {
    const ExperimentConfig cfg;
    EXPECT_EQ(cfg.system_name(), "cat_map");
    EXPECT_EQ(cfg.get<int>("pliss", "n"), 10000);
    EXPECT_EQ(cfg.schedule().size(), 7u);
    EXPECT_EQ(cfg.x0().size(), 2);
    EXPECT_TRUE(cfg.system().attractor_box.contains(cfg.x0()));
}

TEST(Config, ParsesSectionsCommentsAndDottedKeys) {
    const ExperimentConfig cfg = kv(R"(
# experiment
[system]
name = "skew_center"   # trailing comment
params.a = 0.05

[run]
seeds = [3, 4]
out = "runs/#1"

[noise]
schedule = [0.1, 0.05]
)");
    EXPECT_EQ(cfg.system_name(), "skew_center");
    EXPECT_EQ(cfg.system_params().at("a"), 0.05);
    EXPECT_EQ(cfg.seeds(), (std::vector<std::uint64_t>{3, 4}));
    EXPECT_EQ(cfg.seed(), 3u);
    EXPECT_EQ(cfg.out_dir(), "runs/#1");
    EXPECT_EQ(cfg.schedule(), (std::vector<double>{0.1, 0.05}));
}

TEST(Config, JsonFormat) {
    const ExperimentConfig cfg = ExperimentConfig::from_text(R"({"pliss": {"n": 500}, "system": {"name": "sink"}})", true);
    EXPECT_EQ(cfg.get<int>("pliss", "n"), 500);
    EXPECT_EQ(cfg.system().stable_dim, 2);
    EXPECT_EQ(kind_of([] { ExperimentConfig::from_text("{\"pliss\": ", true); }), ErrorKind::config);
}

TEST(Config, RejectsMalformedInput) {
    EXPECT_EQ(kind_of([] { kv("[pliss]\nn 2000\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[pliss\nn = 2000\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[pliss]\nn = two\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[pliss]\nsize = 2000\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[plis]\nn = 2000\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[pliss]\nn = \"2000\"\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[system]\nname = \"henon\"\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[system]\nparams.mu = 1\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[run]\nthreads = 0\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[run]\nx0 = [0.1, 0.2, 0.3]\n").x0(); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { ExperimentConfig::load("/nonexistent/srblab.conf"); }), ErrorKind::config);
}

TEST(Config, ValidatesValues) {
    EXPECT_EQ(kind_of([] { kv("[pliss]\ngamma1 = 0.5\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[pliss]\nepsilon = 0\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[noise]\nschedule = []\n"); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { kv("[noise]\nschedule = [0.1, 0.2]\n"); }), ErrorKind::config);
    ExperimentConfig cfg;
    EXPECT_EQ(kind_of([&] { cfg.set("run", "threads", 0); }), ErrorKind::config);
    EXPECT_NO_THROW(cfg.set("run", "threads", 3));
    EXPECT_EQ(cfg.threads(), 3);
}

TEST(Config, HashIgnoresThreadsAndOutput) {
    ExperimentConfig a, b;
    b.set("run", "threads", 4);
    b.set("run", "out", std::string("elsewhere"));
    EXPECT_EQ(a.hash(), b.hash());
    b.set("pliss", "n", 123);
    EXPECT_NE(a.hash(), b.hash());
    ExperimentConfig c;
    c.set_system("solenoid", {{"lambda", 0.2}});
    EXPECT_NE(a.hash(), c.hash());
    EXPECT_EQ(a.hash().size(), 64u);
}

TEST(Config, PrintedDefaultsRoundTrip) {
    const ExperimentConfig a;
    const ExperimentConfig b = kv(a.dump_key_value());
    EXPECT_EQ(a.tree(), b.tree());
    EXPECT_EQ(a.hash(), b.hash());
    ExperimentConfig c;
    c.set_system("skew_center", {{"base_degree", 3}, {"center_degree", 2}});
    EXPECT_EQ(kv(c.dump_key_value()).hash(), c.hash());
}

TEST(Manifest, Sha256KnownVectors) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Manifest, ChecksumIgnoresWallTimes) {
    RunManifest m;
    m.config_hash = "h";
    m.stages.push_back({"s", {{"a.csv", sha256_hex("x"), 1}}, 0.5});
    RunManifest n = m;
    n.stages[0].wall_seconds = 7.0;
    EXPECT_EQ(m.checksum(), n.checksum());
    n.stages[0].outputs[0].sha256 = sha256_hex("y");
    EXPECT_NE(m.checksum(), n.checksum());
    EXPECT_TRUE(m.to_json(true)["stages"][0].contains("wall_seconds"));
    EXPECT_FALSE(m.to_json(false)["stages"][0].contains("wall_seconds"));
}

TEST(Manifest, RecorderWritesFilesAndManifest) {
    const fs::path dir = scratch_dir("recorder");
    RunRecorder rec("cafe", dir);
    rec.stage("one", [&] { rec.write("a.txt", "hello\n"); });
    const int v = rec.stage("two", [&] {
        rec.write_json("b.json", {{"k", 1}});
        return 42;
    });
    EXPECT_EQ(v, 42);
    rec.finish();
    EXPECT_EQ(slurp(dir / "a.txt"), "hello\n");
    const auto j = nlohmann::json::parse(slurp(dir / "manifest.json"));
    EXPECT_EQ(j["config_hash"], "cafe");
    EXPECT_EQ(j["checksum"], rec.manifest().checksum());
    EXPECT_EQ(j["stages"][0]["outputs"][0]["sha256"], sha256_hex("hello\n"));
    EXPECT_EQ(j["stages"][1]["name"], "two");
    fs::remove_all(dir);
}

TEST(Manifest, InMemoryRecorderMatchesWrittenRun) {
    const fs::path dir = scratch_dir("in_memory");
    ExperimentConfig cfg = kv("[pliss]\nn = 1000\ntrials = 5\n");
    RunRecorder disk(cfg.hash(), dir), memory(cfg.hash());
    run_pliss(cfg, disk);
    run_pliss(cfg, memory);
    EXPECT_EQ(disk.manifest().checksum(), memory.manifest().checksum());
    EXPECT_TRUE(fs::exists(dir / "trials.csv"));
    EXPECT_FALSE(fs::exists(dir / "manifest.json"));  // only written by finish()
    fs::remove_all(dir);
}

TEST(Manifest, StageErrorsCarryTheStageName) {
    RunRecorder rec("h");
    try {
        rec.stage("fit", [] { throw Error(ErrorKind::hypothesis_violation, "no contraction"); });
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::hypothesis_violation);
        EXPECT_NE(std::string(e.what()).find("stage 'fit'"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("no contraction"), std::string::npos);
    }
    RunRecorder empty("h");
    EXPECT_EQ(kind_of([&] { empty.write("x", "y"); }), ErrorKind::precondition);
}

TEST(Pipelines, PlissSingleTrialWritesOneRow) {
    const fs::path dir = scratch_dir("pliss_one");
    RunRecorder rec("h", dir);
    const auto cfg = kv("[pliss]\nn = 500\ntrials = 1\n");
    const PipelineResult r = run_pliss(cfg, rec);
    EXPECT_EQ(r.summary["trials"], 1);
    EXPECT_EQ(r.summary["conclusion_holds"], 1);
    const std::string csv = slurp(dir / "trials.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
    fs::remove_all(dir);
}

TEST(Pipelines, ChecksumsDoNotDependOnThreads) {
    using Fn = PipelineResult (*)(const ExperimentConfig&, RunRecorder&);
    const std::vector<std::pair<Fn, std::string>> runs{
        {run_pliss, "[pliss]\nn = 2000\ntrials = 20\n"},
        {run_stationary, "[stationary]\nresolution = 8\nmc_per_cell = 64\nmc_steps = 20000\n"},
        {run_blocks,
         "[system]\nname = \"solenoid\"\n[blocks]\nframe_steps = 3000\nsample = 200\n[noise]\nschedule = [0.02, 0.01]\n"},
    };
    for (const auto& [fn, text] : runs) {
        ExperimentConfig one = kv(text), three = kv(text);
        three.set("run", "threads", 3);
        const std::string c1 = checksum_of(fn, one);
        EXPECT_EQ(c1, checksum_of(fn, one));
        EXPECT_EQ(c1, checksum_of(fn, three));
    }
}

TEST(Pipelines, SeedChangesTheChecksum) {
    const std::string text = "[pliss]\nn = 2000\ntrials = 20\n";
    ExperimentConfig a = kv(text), b = kv(text);
    b.set("run", "seeds", std::vector<std::uint64_t>{2});
    EXPECT_NE(checksum_of(run_pliss, a), checksum_of(run_pliss, b));
}

TEST(Pipelines, LevelWithoutBundlesIsAConfigError) {
    RunRecorder rec("h");
    EXPECT_EQ(kind_of([&] { run_domination(kv("[system]\nname = \"sink\"\n"), rec); }), ErrorKind::config);
    EXPECT_EQ(kind_of([&] { run_blocks(kv("[blocks]\nlevel = 1\n"), rec); }), ErrorKind::config);
}

TEST(Pipelines, EscapeIsReportedAsHypothesisViolation) {
    RunRecorder rec("h");
    const auto cfg = kv("[system]\nname = \"solenoid\"\n[stationary]\nestimator = \"monte_carlo\"\nresolution = 8\n"
                        "mc_steps = 20000\n[noise]\nschedule = [0.5, 0.25]\n");
    EXPECT_EQ(kind_of([&] { run_zero_noise(cfg, rec); }), ErrorKind::hypothesis_violation);
}

TEST(Pipelines, LyapunovReportsEverySeed) {
    RunRecorder rec("h");
    const PipelineResult r = run_lyapunov(kv("[system]\nname = \"solenoid\"\n[run]\nseeds = [1, 2, 5]\n[orbit]\nsteps = 5000\n"), rec);
    EXPECT_EQ(r.summary["per_seed"].size(), 3u);
    EXPECT_NEAR(r.summary["mean"][0].get<double>(), std::log(2.0), 1e-3);
}

TEST(Pipelines, ContractingCenterFailsTheTargetHypotheses) {
    RunRecorder rec("h");
    const PipelineResult r = run_gibbs_criterion(
        kv("[system]\nname = \"skew_center\"\n[gibbs]\ntol_fraction = 0.5\nseparation = 0.5\nframe_steps = 20000\n"
           "sample_steps = 200000\n[blocks]\nframe_steps = 4000\nsample = 200\n[noise]\nschedule = [0.02, 0.01]\n"),
        rec);
    EXPECT_FALSE(r.hypotheses_met);
    EXPECT_TRUE(r.summary["downward_closed"].get<bool>());
}
