// srblab command line: runs one named pipeline per invocation and writes its
// artifacts plus manifest.json into the output directory.

#include "srblab/srblab.hpp"

#include "CLI11.hpp"

#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

namespace {

using Pipeline = std::function<srb::PipelineResult(const srb::ExperimentConfig&, srb::RunRecorder&)>;

int exit_code(srb::ErrorKind k) {
    switch (k) {
        case srb::ErrorKind::config:
        case srb::ErrorKind::precondition: return 2;
        case srb::ErrorKind::hypothesis_violation: return 3;
        case srb::ErrorKind::numerical_failure: return 4;
    }
    return 4;
}

}  // namespace

int main(int argc, char** argv) {
    const std::map<std::string, Pipeline> pipelines{
        {"pliss", srb::run_pliss},
        {"lyapunov", srb::run_lyapunov},
        {"domination", srb::run_domination},
        {"blocks", srb::run_blocks},
        {"stationary", srb::run_stationary},
        {"zero-noise", srb::run_zero_noise},
        {"disintegrate", srb::run_disintegrate},
        {"gibbs-criterion", srb::run_gibbs_criterion},
        {"srb-report", srb::run_srb_report},
    };

    CLI::App app{"srblab: numerical experiments on SRB measures and partially hyperbolic attractors"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    std::optional<int> threads;
    std::optional<std::string> out;
    bool as_json = false;
    app.add_option("--config", config_path, "experiment config (key = value file, or .json)");
    app.add_option("--seed-override", seed_override, "replace run.seeds by this single seed");
    app.add_option("--threads", threads, "worker threads (results do not depend on it)");
    app.add_option("--out", out, "output directory");

    for (const auto& [name, fn] : pipelines) app.add_subcommand(name, "run the " + name + " pipeline");
    auto* defaults = app.add_subcommand("print-defaults", "print the embedded default configuration");
    defaults->add_flag("--json", as_json, "print JSON instead of key = value");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (defaults->parsed()) {
            const srb::ExperimentConfig cfg;
            std::cout << (as_json ? cfg.tree().dump(2) + "\n" : cfg.dump_key_value());
            return 0;
        }
        srb::ExperimentConfig cfg = config_path.empty() ? srb::ExperimentConfig{} : srb::ExperimentConfig::load(config_path);
        if (seed_override) cfg.set("run", "seeds", std::vector<std::uint64_t>{*seed_override});
        if (threads) cfg.set("run", "threads", *threads);
        if (out) cfg.set("run", "out", *out);

        const std::string name = app.get_subcommands().front()->get_name();
        srb::RunRecorder rec(cfg.hash(), cfg.out_dir());
        rec.stage("config", [&] {
            nlohmann::json resolved = cfg.tree();
            resolved["run"].erase("threads");
            resolved["run"].erase("out");
            rec.write_json("config.json", resolved);
        });
        srb::PipelineResult res;
        try {
            res = pipelines.at(name)(cfg, rec);
        } catch (...) {
            rec.finish();
            throw;
        }
        rec.finish();
        std::cout << res.summary.dump(2) << "\n";
        std::cout << "manifest checksum " << rec.manifest().checksum() << "\n";
        if (!res.hypotheses_met) {
            std::cerr << "srblab: " << name << ": hypothesis not met (see summary.json)\n";
            return 3;
        }
        return 0;
    } catch (const srb::Error& e) {
        std::cerr << "srblab: " << srb::to_string(e.kind()) << ": " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "srblab: config: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "srblab: numerical-failure: " << e.what() << "\n";
        return 4;
    }
}
