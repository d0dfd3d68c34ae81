// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
#include "srblab/srblab.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#ifndef SRBLAB_CONFIG_DIR
#define SRBLAB_CONFIG_DIR "configs"
#endif

using namespace srb;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

ExperimentConfig from_file(const std::string& name) { return ExperimentConfig::load(std::string(SRBLAB_CONFIG_DIR) + "/" + name); }

ExperimentConfig kv(const std::string& text) { return ExperimentConfig::from_text(text, false); }

PipelineResult run(PipelineResult (*fn)(const ExperimentConfig&, RunRecorder&), const ExperimentConfig& cfg) {
    RunRecorder rec(cfg.hash());
    return fn(cfg, rec);
}

const double kGoldenLog = std::log((3.0 + std::sqrt(5.0)) / 2.0);

// O(N^2) reference: j is kept when every forward window sum from j stays below n*gamma2.
std::vector<std::size_t> brute_pliss_set(const std::vector<double>& a, double gamma2) {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < a.size(); ++j) {
        double s = 0.0;
        bool ok = true;
        for (std::size_t n = 1; j + n <= a.size() && ok; ++n) {
            s += a[j + n - 1];
            ok = s <= static_cast<double>(n) * gamma2;
        }
        if (ok) out.push_back(j);
    }
    return out;
}

Outcome pliss_campaign_holds() {
    const auto t0 = Clock::now();
    const auto trials = pliss::pliss_campaign(pliss::PlissParams{}, 10000, 1000, 1);
    const double t = seconds_since(t0);
    std::size_t holds = 0, hyp = 0;
    for (const auto& r : trials) {
        holds += r.conclusion_holds;
        hyp += r.hypothesis_met;
    }
    std::ostringstream os;
    os << "conclusion " << holds << "/1000, hypothesis " << hyp << "/1000, " << t << " s";
    return {holds == 1000 && hyp == 1000 && t < 30.0, os.str()};
}

Outcome pliss_set_matches_brute_force() {
    const pliss::PlissParams p{};
    const double grid[4] = {-p.C, p.gamma1, p.gamma2, p.C};
    pliss::RealSequence seq;
    seq.bound = p.C;
    std::size_t exhaustive = 0, mismatches = 0;
    for (std::size_t n = 1; n <= 12; ++n) {
        seq.values.assign(n, 0.0);
        for (std::size_t code = 0; code < (std::size_t{1} << (2 * n)); ++code) {
            std::size_t c = code;
            for (std::size_t i = 0; i < n; ++i, c >>= 2) seq.values[i] = grid[c & 3];
            mismatches += pliss::pliss_set(seq, p.gamma2).indices != brute_pliss_set(seq.values, p.gamma2);
            ++exhaustive;
        }
    }
    Rng rng(2024);
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> a(100 + rng.below(301));
        for (double& v : a) v = pliss::quantize(rng.uniform(-p.C, p.C), p.C);
        mismatches += pliss::pliss_set(pliss::RealSequence(a, p.C), p.gamma2).indices != brute_pliss_set(a, p.gamma2);
    }
    std::ostringstream os;
    os << exhaustive << " grid sequences + 10000 random, mismatches " << mismatches;
    return {mismatches == 0, os.str()};
}

Outcome lyapunov_oracles() {
    const SmoothSystem cat = builtin_system("cat_map"), sol = builtin_system("solenoid");
    auto t0 = Clock::now();
    const auto lc = lyapunov_spectrum(cat, make_vec({0.1234, 0.3456}), 100000, 1);
    const double tc = seconds_since(t0);
    t0 = Clock::now();
    const auto ls = lyapunov_spectrum(sol, make_vec({0.1234, 0.1, -0.2}), 100000, 1);
    const double ts = seconds_since(t0);
    const double ec = std::max(std::abs(lc[0] - kGoldenLog), std::abs(lc[1] + kGoldenLog));
    const double es = std::max({std::abs(ls[0] - std::log(2.0)), std::abs(ls[1] - std::log(0.25)),
                                std::abs(ls[2] - std::log(0.25))});
    std::ostringstream os;
    os << "cat error " << ec << " (" << tc << " s), solenoid error " << es << " (" << ts << " s)";
    return {ec < 1e-6 && es < 1e-3 && tc < 10.0 && ts < 10.0, os.str()};
}

Outcome cat_domination() {
    const auto s = run(run_domination, ExperimentConfig{}).summary;
    const double lambda = s["lambda"], C = s["C"];
    std::ostringstream os;
    os << "lambda " << lambda << " (exact " << std::exp(-2.0 * kGoldenLog)
       << "), C " << C;
    return {lambda <= 0.15 && C <= 1.01, os.str()};
}

Outcome stationary_measures() {
    bool ok = true;
    std::ostringstream os;
    for (const std::string& name : builtin_names()) {
        ExperimentConfig cfg;
        cfg.set_system(name);
        if (cfg.system().dim == 3) cfg.set("stationary", "mc_per_cell", 64);
        const auto s = run(run_stationary, cfg).summary;
        const double res = s["ulam_residual"];
        ok = ok && res < 1e-10;
        os << name << " residual " << res << "; ";
        if (name == "cat_map") {
            const double uni = s["l1_ulam_uniform"], mc = s["l1_ulam_mc"];
            ok = ok && uni < 0.02 && mc < 0.02;
            os << "cat uniform " << uni << ", ulam-mc " << mc << "; ";
        }
    }
    return {ok, os.str()};
}

Outcome zero_noise_limit() {
    const auto t0 = Clock::now();
    const auto cat = run(run_zero_noise, ExperimentConfig{}).summary;
    const auto sol = run(run_zero_noise, from_file("solenoid_zero_noise.conf")).summary;
    const double t = seconds_since(t0);
    const bool below = cat["defect_below_twice_floor"], mono = sol["monotone_trend"];
    std::ostringstream os;
    os << "cat defect " << cat["final_defect"].get<double>() << " vs floor " << cat["final_floor"].get<double>()
       << ", solenoid distances " << sol["consecutive_distances"].dump() << ", " << t << " s";
    return {below && mono && t < 300.0, os.str()};
}

Outcome liu_qian_density() {
    const auto r = run(run_disintegrate, from_file("solenoid_liu_qian.conf"));
    const auto& lq = r.summary["liu_qian"];
    if (!lq.contains("rows")) return {false, "no comparison rows: " + r.summary.dump()};
    const double pair = lq["worst_pair_error"], tail = lq["worst_tail"];
    const bool within = lq["ratio_within_bound"];
    const std::size_t seen = r.summary["sample_seen"], rows = lq["rows"];
    std::ostringstream os;
    os << "rows " << rows << ", worst pair error " << pair << ", tail " << tail << ", ratio within bound " << within
       << ", seen " << seen;
    return {rows > 0 && pair <= 0.1 && tail < 1e-3 && within && seen >= 10000000, os.str()};
}

Outcome ratio_algebra() {
    const SmoothSystem sys = builtin_system("solenoid");
    const BundleFrame f = estimate_bundles(
        std::make_shared<const Trajectory>(orbit(sys, make_vec({0.1234, 0.1, -0.2}), 20000, 1)), SplittingSpec::natural(sys));
    const BundleRange e{0, 1};
    std::vector<std::size_t> bases;
    for (std::size_t k = f.begin + 2000; bases.size() < 6; k += 1500) bases.push_back(k);
    const HolderBudget b = fit_holder_budget(f, e, bases, 0.02, 40);
    Rng rng(8);
    double worst = -1.0;  // largest violation margin: |defect| - allowance
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = f.begin + 2500 + rng.below(f.end - f.begin - 2600);
        const Vec x = make_vec({rng.uniform(-0.18, 0.18)}), y = make_vec({rng.uniform(-0.18, 0.18)}),
                  z = make_vec({rng.uniform(-0.18, 0.18)});
        auto T = [&] { return 8 + static_cast<int>(rng.below(113)); };
        auto ratio = [&](const Vec& p, const Vec& q) { return density_ratio(f, k, e, p, q, T(), b); };
        auto allowance = [](std::initializer_list<DensityRatio> rs) {
            double s = 1e-12;
            for (const auto& r : rs) s += std::log1p(r.tail_bound);
            return s;
        };
        const DensityRatio id = ratio(y, y);
        worst = std::max(worst, std::abs(id.log_ratio) - allowance({id}));
        const DensityRatio yz = ratio(y, z), zy = ratio(z, y);
        worst = std::max(worst, std::abs(yz.log_ratio + zy.log_ratio) - allowance({yz, zy}));
        const DensityRatio xy = ratio(x, y), xz = ratio(x, z), yz2 = ratio(y, z);
        worst = std::max(worst, std::abs(xy.log_ratio + yz2.log_ratio - xz.log_ratio) - allowance({xy, yz2, xz}));
    }
    std::ostringstream os;
    os << "1000 point triples, worst excess over combined tails " << worst;
    return {worst <= 0.0, os.str()};
}

Outcome pesin_formula() {
    bool ok = true;
    std::ostringstream os;
    for (const auto& [label, cfg] : {std::pair{"cat_map", ExperimentConfig{}}, std::pair{"solenoid", from_file("solenoid.conf")}}) {
        const auto s = run(run_srb_report, cfg).summary;
        const double gap = s["relative_gap"];
        const std::string verdict = s["entropy_verdict"];
        ok = ok && verdict == "holds" && gap < 0.1;
        os << label << " entropy " << s["entropy"].get<double>() << " gap " << gap << " (" << verdict << "); ";
    }
    return {ok, os.str()};
}

Outcome gibbs_hierarchy() {
    const auto con = run(run_gibbs_criterion, from_file("skew_contracting.conf"));
    const auto exp = run(run_gibbs_criterion, from_file("skew_expanding.conf"));
    double level1_exponent = 0.0;
    const double smallest = con.summary["smallest_noise"];
    for (const auto& h : con.summary["hypotheses"])
        if (h["level"] == 1 && h["noise_level"].get<double>() == smallest) level1_exponent = h["min_exponent"];
    const int con_index = con.summary["index"], exp_index = exp.summary["index"];
    const bool closed = con.summary["downward_closed"].get<bool>() && exp.summary["downward_closed"].get<bool>();
    const bool exp_level1 = exp.summary["hypotheses_by_level"][1].get<bool>();
    std::ostringstream os;
    os << "contracting index " << con_index << " level-1 exponent " << level1_exponent << "; expanding index "
       << exp_index << " level-1 hypotheses " << exp_level1 << "; downward closed " << closed;
    return {closed && con_index == 0 && level1_exponent < 0.0 && exp_level1 && exp_index >= 1, os.str()};
}

Outcome determinism() {
    using Fn = PipelineResult (*)(const ExperimentConfig&, RunRecorder&);
    const std::vector<std::tuple<std::string, Fn, std::string>> runs{
        {"pliss", run_pliss, "[pliss]\nn = 2000\ntrials = 20\n"},
        {"lyapunov", run_lyapunov, "[system]\nname = \"solenoid\"\n[run]\nseeds = [1, 2]\n[orbit]\nsteps = 5000\n"},
        {"domination", run_domination, "[domination]\nframe_steps = 3000\n"},
        {"blocks", run_blocks,
         "[system]\nname = \"solenoid\"\n[blocks]\nframe_steps = 3000\nsample = 200\n[noise]\nschedule = [0.02, 0.01]\n"},
        {"stationary", run_stationary, "[stationary]\nresolution = 8\nmc_per_cell = 64\nmc_steps = 20000\n"},
        {"zero_noise", run_zero_noise,
         "[stationary]\nresolution = 8\nmc_per_cell = 64\nmc_steps = 20000\n[noise]\nschedule = [0.1, 0.05]\n"},
        {"disintegrate", run_disintegrate,
         "[system]\nname = \"solenoid\"\n[gibbs]\nframe_steps = 20000\nsample_steps = 200000\n"},
        {"gibbs_criterion", run_gibbs_criterion,
         "[system]\nname = \"skew_center\"\n[gibbs]\ntol_fraction = 0.5\nseparation = 0.5\nframe_steps = 20000\n"
         "sample_steps = 200000\n[blocks]\nframe_steps = 4000\nsample = 200\n[noise]\nschedule = [0.02, 0.01]\n"},
        {"srb_report", run_srb_report,
         "[orbit]\nsteps = 5000\n[entropy]\nsamples = 300000\nn_max = 12\nstarts = 20000\n"
         "[gibbs]\nframe_steps = 20000\nsample_steps = 200000\n"},
    };
    bool ok = true;
    std::ostringstream os;
    for (const auto& [name, fn, text] : runs) {
        const ExperimentConfig one = kv(text);
        ExperimentConfig three = one;
        three.set("run", "threads", 3);
        RunRecorder a(one.hash()), b(one.hash()), c(three.hash());
        fn(one, a);
        fn(one, b);
        fn(three, c);
        const bool same = a.manifest().checksum() == b.manifest().checksum() &&
                          a.manifest().checksum() == c.manifest().checksum();
        ok = ok && same;
        if (!same) os << name << " differs; ";
    }
    os << runs.size() << " pipelines, repeat and 1 vs 3 threads";
    return {ok, os.str()};
}

}  // namespace

int main() {
    const std::vector<std::pair<int, Outcome (*)()>> criteria{
        {1, pliss_campaign_holds},  {2, pliss_set_matches_brute_force}, {3, lyapunov_oracles}, {4, cat_domination},
        {5, stationary_measures},   {6, zero_noise_limit},              {7, liu_qian_density}, {8, ratio_algebra},
        {9, pesin_formula},         {10, gibbs_hierarchy},              {11, determinism},
    };
    int failed = 0;
    for (const auto& [id, check] : criteria) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %2d: %s  %s  [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
