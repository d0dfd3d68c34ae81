#include "srblab/pesin.hpp"
#include "srblab/random.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace srb;

namespace {

struct Fixture {
    SmoothSystem sys;
    BundleFrame frame;
};

Fixture frames(const std::string& name, std::size_t n = 6000, std::uint64_t seed = 1) {
    Fixture fx{builtin_system(name), {}};
    const Vec x0 = fx.sys.dim == 3 ? make_vec({0.1234, 0.1, -0.2}) : make_vec({0.1234, 0.3456});
    fx.frame = estimate_bundles(std::make_shared<const Trajectory>(orbit(fx.sys, x0, n, seed)),
                                SplittingSpec::natural(fx.sys));
    return fx;
}

// Margin from the full cocycle applied to a unit vector of a one-dimensional E.
double oracle_margin(const BundleFrame& f, std::size_t k, const PesinBlockParams& p, BundleRange e) {
    double sum = 0.0, worst = -1e300;
    for (int i = 0; i < p.depth; ++i) {
        const std::size_t j = k - static_cast<std::size_t>(i) * p.ell;
        const Vec v = f.block(j - p.ell, e).col(0);
        sum += -std::log((cocycle(*f.traj, j - p.ell, p.ell) * v).norm());
        worst = std::max(worst, sum + p.alpha * p.ell * (i + 1));
    }
    return worst;
}

const BundleRange kUnstable{0, 1};

}  // namespace

TEST(Block, MarginMatchesCocycleOracle) {
    const Fixture fx = frames("skew_center");
    for (const PesinBlockParams p : {PesinBlockParams{1, 0.3, 20}, PesinBlockParams{2, 0.5, 10}, PesinBlockParams{3, 0.1, 7}}) {
        for (std::size_t k = fx.frame.begin + 100; k < fx.frame.end; k += 131) {
            const BlockVerdict v = in_block(fx.frame, k, p, kUnstable);
            EXPECT_NEAR(v.margin, oracle_margin(fx.frame, k, p, kUnstable), 1e-9);
            EXPECT_EQ(v.member, v.margin <= 0.0);
            EXPECT_EQ(v.log_norms.size(), static_cast<std::size_t>(p.depth));
        }
    }
}

// The derivative doubles the angular component exactly, so each backward norm
// is -ell*log 2 corrected by the angular components of the unit frames.
TEST(Block, SolenoidNormsFollowTheAngularComponent) {
    const Fixture fx = frames("solenoid");
    const PesinBlockParams p{2, 0.2, 15};
    const std::size_t k = fx.frame.begin + 500;
    const BlockVerdict v = in_block(fx.frame, k, p, kUnstable);
    for (int i = 0; i < p.depth; ++i) {
        const std::size_t j = k - static_cast<std::size_t>(i) * p.ell;
        const double expect = -p.ell * std::log(2.0) - std::log(std::abs(fx.frame.block(j - p.ell, kUnstable)(0, 0))) +
                              std::log(std::abs(fx.frame.block(j, kUnstable)(0, 0)));
        EXPECT_NEAR(v.log_norms[static_cast<std::size_t>(i)], expect, 1e-9);
    }
}

TEST(Block, MembershipShrinksWithDepth) {
    const Fixture fx = frames("skew_center");
    const auto sample = block_sample(fx.frame, 300, 60);
    for (std::size_t k : sample) {
        bool prev = true;
        for (int depth = 1; depth <= 60; depth += 3) {
            const bool now = in_block(fx.frame, k, {1, 0.4, depth}, kUnstable).member;
            EXPECT_TRUE(prev || !now);
            prev = now;
        }
    }
}

TEST(Block, MembershipShrinksWithAlpha) {
    const Fixture fx = frames("skew_center");
    const auto sample = block_sample(fx.frame, 300, 40);
    double prev_mass = 1.0;
    for (double alpha : {0.05, 0.2, 0.4, 0.55, 0.65, 0.8}) {
        const BlockReport r = block_mass(fx.frame, sample, {1, alpha, 40}, kUnstable);
        EXPECT_LE(r.member_fraction, prev_mass);
        prev_mass = r.member_fraction;
    }
    EXPECT_EQ(prev_mass, 0.0);
}

TEST(Block, IntersectionOfBlocksIsABlockAtTheLargerParameters) {
    const Fixture fx = frames("skew_center");
    for (std::size_t k : block_sample(fx.frame, 200, 60)) {
        const bool a = in_block(fx.frame, k, {1, 0.3, 20}, kUnstable).member;
        const bool b = in_block(fx.frame, k, {1, 0.5, 10}, kUnstable).member;
        const bool both = in_block(fx.frame, k, {1, 0.5, 20}, kUnstable).member;
        EXPECT_TRUE(!both || (a && b));
    }
}

TEST(BlockMass, InvariantUnderPermutationAndThreads) {
    const Fixture fx = frames("skew_center");
    auto sample = block_sample(fx.frame, 400, 40);
    const PesinBlockParams p{1, 0.5, 40};
    const BlockReport a = block_mass(fx.frame, sample, p, kUnstable, 1);
    EXPECT_GT(a.member_fraction, 0.0);
    EXPECT_LT(a.member_fraction, 1.0);
    EXPECT_EQ(a.recount(), a.member_fraction);
    EXPECT_EQ(a.worst_margin, *std::max_element(a.margins.begin(), a.margins.end()));
    EXPECT_LT(a.frame_angle_tolerance, 1e-6);
    Rng rng(3);
    for (std::size_t i = sample.size(); i > 1; --i) std::swap(sample[i - 1], sample[rng.below(i)]);
    const BlockReport b = block_mass(fx.frame, sample, p, kUnstable, 3);
    EXPECT_EQ(a.member_fraction, b.member_fraction);
    EXPECT_EQ(a.worst_margin, b.worst_margin);
}

TEST(BlockMass, SolenoidUnstableBundleIsFullyInside) {
    const Fixture fx = frames("solenoid");
    const auto sample = block_sample(fx.frame, 500, 40);
    EXPECT_EQ(block_mass(fx.frame, sample, {1, 0.5 * std::log(2.0), 40}, kUnstable).member_fraction, 1.0);
}

TEST(BlockMass, ContractingBundleIsNeverInside) {
    const Fixture fx = frames("cat_map");
    const auto sample = block_sample(fx.frame, 500, 40);
    EXPECT_EQ(block_mass(fx.frame, sample, {1, 0.01, 5}, {1, 1}).member_fraction, 0.0);
}

TEST(BlockMass, RejectsBadInputs) {
    const Fixture fx = frames("cat_map");
    EXPECT_THROW(block_mass(fx.frame, {}, {1, 0.1, 5}, kUnstable), Error);
    EXPECT_THROW(in_block(fx.frame, fx.frame.begin + 100, {1, 0.0, 5}, kUnstable), Error);
    EXPECT_THROW(in_block(fx.frame, fx.frame.begin + 100, {0, 0.1, 5}, kUnstable), Error);
    try {
        in_block(fx.frame, fx.frame.begin + 10, {2, 0.1, 40}, kUnstable);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::precondition);
    }
}

TEST(FindEll, SolenoidNeedsOneStep) {
    const Fixture fx = frames("solenoid");
    const FindEllResult r = find_ell(fx.frame, block_sample(fx.frame, 500, 10), 0.01, 0.5, kUnstable, 10);
    EXPECT_TRUE(r.found);
    EXPECT_EQ(r.ell, 1);
    EXPECT_NEAR(r.empirical_exponent, std::log(2.0), 1e-5);
    EXPECT_EQ(r.masses.size(), 1u);
}

TEST(FindEll, StepGrowsWithAlpha) {
    const Fixture fx = frames("skew_center", 12000);
    const auto sample = block_sample(fx.frame, 2000, 10);
    int prev = 1;
    for (double alpha : {0.3, 0.5, 0.6}) {
        const FindEllResult r = find_ell(fx.frame, sample, 0.01, alpha, kUnstable, 10);
        ASSERT_TRUE(r.found) << alpha;
        EXPECT_GE(r.ell, prev);
        EXPECT_GT(r.masses.back(), 0.99);
        for (std::size_t i = 0; i + 1 < r.masses.size(); ++i) EXPECT_LE(r.masses[i], 0.99);
        prev = r.ell;
    }
    // the angle fluctuation of the base forces more than one step near the exponent
    EXPECT_GT(prev, 1);
}

TEST(FindEll, MassesAreReportedForEachStep) {
    const Fixture fx = frames("skew_center", 12000);
    const FindEllResult r = find_ell(fx.frame, block_sample(fx.frame, 2000, 10), 0.001, 0.69, kUnstable, 4);
    EXPECT_EQ(r.masses.size(), static_cast<std::size_t>(r.found ? r.ell : 4));
    for (double m : r.masses) {
        EXPECT_GE(m, 0.0);
        EXPECT_LE(m, 1.0);
    }
}

TEST(FindEll, AlphaAboveTheExponentIsAHypothesisViolation) {
    const Fixture fx = frames("solenoid");
    try {
        find_ell(fx.frame, block_sample(fx.frame, 100, 10), 0.01, 0.8, kUnstable, 10);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::hypothesis_violation);
    }
    EXPECT_THROW(find_ell(fx.frame, block_sample(fx.frame, 100, 10), 1.0, 0.5, kUnstable, 10), Error);
}

TEST(UniformBlocks, CatMapIsFullyInsideAtEveryLevel) {
    const SmoothSystem cat = builtin_system("cat_map");
    const auto rs = std::make_shared<const RandomSystem>(cat);
    std::vector<BundleFrame> fr;
    for (double a : {0.04, 0.02, 0.01}) {
        auto t = std::make_shared<const Trajectory>(sample_skew_orbit(rs, {2, a}, make_vec({0.3, 0.4}), 3000, 7));
        fr.push_back(estimate_bundles(t, SplittingSpec::natural(cat)));
    }
    std::vector<PerturbedSample> samples;
    const double levels[] = {0.04, 0.02, 0.01};
    for (std::size_t i = 0; i < fr.size(); ++i) samples.push_back({levels[i], &fr[i], block_sample(fr[i], 200, 40)});
    const auto rows = uniform_block_check(samples, {1, 0.5, 40}, kUnstable);
    ASSERT_EQ(rows.size(), 3u);
    for (const auto& r : rows) {
        EXPECT_EQ(r.member_fraction, 1.0);
        EXPECT_LT(r.worst_margin, 0.0);
    }
    const std::string csv = to_csv(rows);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(UniformBlocks, EmptyScheduleGivesAnEmptyTable) {
    EXPECT_TRUE(uniform_block_check({}, {1, 0.5, 40}, kUnstable).empty());
    EXPECT_THROW(uniform_block_check({PerturbedSample{0.1, nullptr, {1}}}, {1, 0.5, 40}, kUnstable), Error);
}
