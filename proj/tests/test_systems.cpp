#include "srblab/systems.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace srb;

namespace {

const double kLogGolden2 = std::log((3.0 + std::sqrt(5.0)) / 2.0);

std::shared_ptr<const Trajectory> make_orbit(const SmoothSystem& sys, const Vec& x0, std::size_t n,
                                             std::uint64_t seed = 1) {
    return std::make_shared<const Trajectory>(orbit(sys, x0, n, seed));
}

BundleFrame frames_of(const SmoothSystem& sys, const Vec& x0, std::size_t n, std::uint64_t seed = 1) {
    return estimate_bundles(make_orbit(sys, x0, n, seed), SplittingSpec::natural(sys));
}

Vec sample_box(const SmoothSystem& sys, Rng& rng) {
    Vec p(sys.dim);
    for (int i = 0; i < sys.dim; ++i) p(i) = rng.uniform(sys.attractor_box.lo(i), sys.attractor_box.hi(i));
    return p;
}

Vec solenoid_start() { return make_vec({0.1234, 0.1, -0.2}); }
Vec torus_start() { return make_vec({0.1234, 0.3456}); }

}  // namespace

TEST(Roster, CatDerivativeIsConstant) {
    const SmoothSystem cat = builtin_system("cat_map");
    Rng rng(1);
    Mat expected(2, 2);
    expected << 2, 1, 1, 1;
    for (int i = 0; i < 100; ++i) EXPECT_EQ(cat.derivative(sample_box(cat, rng)), expected);
}

TEST(Roster, SolenoidFiberBlockIsScalar) {
    const SmoothSystem sol = builtin_system("solenoid");
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const Mat d = sol.derivative(sample_box(sol, rng));
        EXPECT_EQ(d(0, 0), 2.0);
        EXPECT_EQ(d(1, 1), 0.25);
        EXPECT_EQ(d(2, 2), 0.25);
        EXPECT_EQ(d(1, 2), 0.0);
        EXPECT_EQ(d(2, 1), 0.0);
        EXPECT_EQ(d(0, 1), 0.0);
        EXPECT_EQ(d(0, 2), 0.0);
    }
}

TEST(Roster, SkewCenterDerivativeStaysInItsInterval) {
    const SmoothSystem skew = builtin_system("skew_center");
    const double a = 0.1;
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double dc = skew.derivative(sample_box(skew, rng))(1, 1);
        EXPECT_GE(dc, 1.0 - kTwoPi * a - 1e-15);
        EXPECT_LE(dc, 1.0 + kTwoPi * a + 1e-15);
        EXPECT_GT(dc, 0.0);
    }
}

TEST(Roster, ForwardOfInverseIsIdentity) {
    for (const std::string& name : builtin_names()) {
        const SmoothSystem sys = builtin_system(name);
        Rng rng(4);
        for (int i = 0; i < 200; ++i) {
            const Vec p = sample_box(sys, rng);
            EXPECT_LT(sys.distance(sys.forward(sys.inverse(p)), p), 1e-12) << name;
        }
    }
}

TEST(Roster, ExpandingSkewVariantInverts) {
    const SmoothSystem sys = builtin_system("skew_center", {{"base_degree", 3}, {"center_degree", 2}});
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const Vec p = sample_box(sys, rng);
        EXPECT_LT(sys.distance(sys.forward(sys.inverse(p)), p), 1e-12);
    }
}

TEST(Roster, DerivativeMatchesFiniteDifferences) {
    for (const std::string& name : builtin_names()) {
        const SmoothSystem sys = builtin_system(name);
        Rng rng(6);
        for (int i = 0; i < 50; ++i) {
            const Vec p = sample_box(sys, rng) * 0.9;
            const Mat d = sys.derivative(p);
            const double h = 1e-6;
            for (int k = 0; k < sys.dim; ++k) {
                Vec e = Vec::Zero(sys.dim);
                e(k) = h;
                const Vec fd = (sys.displacement(sys.forward(p - e), sys.forward(p + e))) / (2 * h);
                EXPECT_LT((fd - d.col(k)).norm(), 1e-5) << name;
            }
        }
    }
}

TEST(Roster, AttractingBoxIsForwardInvariant) {
    for (const std::string& name : builtin_names()) {
        const SmoothSystem sys = builtin_system(name);
        Rng rng(7);
        for (int i = 0; i < 1000; ++i) EXPECT_TRUE(sys.attractor_box.contains(sys.forward(sample_box(sys, rng)))) << name;
    }
}

TEST(Roster, RejectsUnknownNamesAndParameters) {
    EXPECT_THROW(builtin_system("henon"), Error);
    EXPECT_THROW(builtin_system("solenoid", {{"mu", 1.0}}), Error);
    EXPECT_THROW(builtin_system("solenoid", {{"lambda", 0.6}}), Error);
    EXPECT_THROW(builtin_system("skew_center", {{"a", 0.3}}), Error);
}

TEST(Splitting, ValidatesDimensions) {
    SplittingSpec s = SplittingSpec::make(1, 1, 1);
    EXPECT_NO_THROW(s.validate(3));
    EXPECT_THROW(s.validate(2), Error);
    s.bundle_dims[1] = 2;
    EXPECT_THROW(s.validate(4), Error);
    const SplittingSpec n = SplittingSpec::natural(builtin_system("skew_center"));
    EXPECT_EQ(n.level(0).count, 1);
    EXPECT_EQ(n.level(1).count, 2);
}

TEST(Cocycle, CompositionOverAdjacentWindows) {
    const SmoothSystem sys = builtin_system("skew_center");
    const Trajectory t = orbit(sys, torus_start(), 200, 3);
    for (std::size_t start : {0u, 40u, 100u}) {
        for (std::size_t n : {1u, 7u, 15u}) {
            for (std::size_t m : {1u, 5u, 12u}) {
                const Mat whole = cocycle(t, start, n + m);
                const Mat split = cocycle(t, start + n, m) * cocycle(t, start, n);
                EXPECT_LT((whole - split).norm() / whole.norm(), 1e-10);
            }
        }
    }
}

TEST(Lyapunov, CatMapMatchesEigenvalues) {
    // largest root of x^2 - 3x + 1
    const double top = std::log((3.0 + std::sqrt(9.0 - 4.0)) / 2.0);
    const auto ex = lyapunov_spectrum(builtin_system("cat_map"), torus_start(), 100000);
    ASSERT_EQ(ex.size(), 2u);
    EXPECT_NEAR(ex[0], top, 1e-6);
    EXPECT_NEAR(ex[1], -top, 1e-6);
}

TEST(Lyapunov, SolenoidMatchesConstantRates) {
    const auto ex = lyapunov_spectrum(builtin_system("solenoid"), solenoid_start(), 100000);
    ASSERT_EQ(ex.size(), 3u);
    EXPECT_NEAR(ex[0], std::log(2.0), 1e-3);
    EXPECT_NEAR(ex[1], std::log(0.25), 1e-3);
    EXPECT_NEAR(ex[2], std::log(0.25), 1e-3);
}

TEST(Lyapunov, FlatCenterHasZeroExponent) {
    const auto ex = lyapunov_spectrum(builtin_system("skew_center", {{"a", 0.0}, {"b", 0.0}}), torus_start(), 20000);
    EXPECT_NEAR(ex[0], std::log(2.0), 1e-9);
    EXPECT_NEAR(ex[1], 0.0, 1e-12);
}

TEST(Lyapunov, SumEqualsVolumeGrowth) {
    for (const std::string& name : builtin_names()) {
        const SmoothSystem sys = builtin_system(name);
        Vec x0 = sys.dim == 3 ? solenoid_start() : (name == "sink" ? make_vec({0.3, -0.2}) : torus_start());
        const Trajectory t = orbit(sys, x0, 20500, 2);
        const auto ex = lyapunov_spectrum(t, 0, t.steps(), 500);
        double sum = 0.0;
        for (double l : ex) sum += l;
        EXPECT_NEAR(sum, log_det_average(t, 500, t.steps()), 1e-6) << name;
    }
}

TEST(Lyapunov, CoarseReorthogonalizationOverflows) {
    const Trajectory t = orbit(builtin_system("cat_map"), torus_start(), 5000);
    try {
        lyapunov_spectrum(t, 0, t.steps(), 500, 2000);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numerical_failure);
    }
}

TEST(Lyapunov, DeterministicForFixedInputs) {
    const SmoothSystem sys = builtin_system("skew_center");
    EXPECT_EQ(lyapunov_spectrum(sys, torus_start(), 5000, 9), lyapunov_spectrum(sys, torus_start(), 5000, 9));
}

TEST(Bundles, CatMapFramesAreEigenvectors) {
    const BundleFrame f = frames_of(builtin_system("cat_map"), torus_start(), 5000);
    Mat eu(2, 1), es(2, 1);
    eu << 1.0, (std::sqrt(5.0) - 1.0) / 2.0;
    es << -(std::sqrt(5.0) - 1.0) / 2.0, 1.0;
    eu /= eu.norm();
    es /= es.norm();
    for (std::size_t k = f.begin; k < f.end; k += 97) {
        EXPECT_LT(subspace_angle(f.block(k, {0, 1}), eu), 1e-6);
        EXPECT_LT(subspace_angle(f.block(k, {1, 1}), es), 1e-6);
    }
}

TEST(Bundles, SolenoidStableBundleIsTheFiberPlane) {
    const BundleFrame f = frames_of(builtin_system("solenoid"), solenoid_start(), 5000);
    for (std::size_t k = f.begin; k < f.end; k += 53) {
        const Mat s = f.block(k, {1, 1});
        EXPECT_LT(s.row(0).norm(), 1e-9);
    }
}

TEST(Bundles, SkewCenterBundleIsTheFiberDirection) {
    const BundleFrame f = frames_of(builtin_system("skew_center"), torus_start(), 5000);
    for (std::size_t k = f.begin; k < f.end; k += 53) EXPECT_LT(std::abs(f.block(k, {1, 1})(0, 0)), 1e-9);
}

TEST(Bundles, FramesAreInvariant) {
    for (const char* name : {"cat_map", "solenoid", "skew_center"}) {
        const SmoothSystem sys = builtin_system(name);
        const BundleFrame f = frames_of(sys, sys.dim == 3 ? solenoid_start() : torus_start(), 6000);
        for (int b = 0; b < static_cast<int>(f.spec.bundle_dims.size()); ++b)
            EXPECT_LT(max_invariance_angle(f, {b, 1}), 1e-6) << name << " bundle " << b;
    }
}

TEST(Bundles, RequireTransient) {
    const SmoothSystem sys = builtin_system("cat_map");
    EXPECT_THROW(estimate_bundles(make_orbit(sys, torus_start(), 5000), SplittingSpec::natural(sys), 100), Error);
    EXPECT_THROW(estimate_bundles(make_orbit(sys, torus_start(), 800), SplittingSpec::natural(sys)), Error);
}

TEST(Domination, CatMapRatio) {
    const BundleFrame f = frames_of(builtin_system("cat_map"), torus_start(), 6000);
    const DominationEstimate est = certify_domination(f, {0, 1}, {1, 1}, 20);
    EXPECT_LE(est.lambda, 0.15);
    EXPECT_GE(est.lambda, 1.0 / std::exp(2 * kLogGolden2) - 1e-12);
    EXPECT_LE(est.C, 1.01);
    EXPECT_GT(est.alpha_holder, 0.0);
}

TEST(Domination, SolenoidRatio) {
    const BundleFrame f = frames_of(builtin_system("solenoid"), solenoid_start(), 6000);
    const DominationEstimate est = certify_domination(f, {0, 1}, {1, 1}, 20);
    // stable rate 1/4 against unstable rate 2
    EXPECT_LE(est.lambda, 0.13);
    EXPECT_GE(est.lambda, 0.125);
    EXPECT_LE(est.C, 1.2);
}

TEST(Domination, HoldsOnAFreshSegment) {
    for (const char* name : {"cat_map", "solenoid"}) {
        const SmoothSystem sys = builtin_system(name);
        const BundleFrame f = frames_of(sys, sys.dim == 3 ? solenoid_start() : torus_start(), 41000);
        const std::size_t mid = f.begin + f.size() / 2;
        BundleFrame fit = f;
        fit.end = mid;
        fit.bases.resize(mid - fit.begin);
        const DominationEstimate est = certify_domination(fit, {0, 1}, {1, 1}, 20);
        EXPECT_LE(domination_excess(f, {0, 1}, {1, 1}, est, mid, f.end), 1.0 + 1e-6) << name;
    }
}

TEST(Domination, SameBundleIsRefuted) {
    const BundleFrame f = frames_of(builtin_system("cat_map"), torus_start(), 3000);
    try {
        certify_domination(f, {0, 1}, {0, 1}, 10);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::hypothesis_violation);
    }
    EXPECT_THROW(certify_domination(f, {1, 1}, {0, 1}, 10), Error);
}

TEST(Plaques, CatMapPlaqueIsTheEigenline) {
    const BundleFrame f = frames_of(builtin_system("cat_map"), torus_start(), 3000);
    const std::size_t k = f.begin + 1000;
    const LocalManifold m = unstable_plaque(f, k, {0, 1}, 0.2, 30);
    const Vec e = f.block(k, {0, 1}).col(0);
    for (double u : m.nodes) {
        const Vec d = m.displacement_at(u);
        EXPECT_LT((d - e * e.dot(d)).norm(), 1e-10);
    }
    EXPECT_LT(m.tangency_error, 1e-6);
}

TEST(Plaques, DepthZeroIsFlat) {
    const BundleFrame f = frames_of(builtin_system("solenoid"), solenoid_start(), 3000);
    const LocalManifold m = unstable_plaque(f, f.begin + 800, {0, 1}, 0.1, 0);
    for (const Vec& o : m.offsets) EXPECT_EQ(o.norm(), 0.0);
    EXPECT_LT(m.tangency_error, 1e-7);  // acos resolution near 1
}

TEST(Plaques, SolenoidPlaqueIsForwardSelfConsistent) {
    const SmoothSystem sys = builtin_system("solenoid");
    const BundleFrame f = frames_of(sys, solenoid_start(), 3000);
    for (std::size_t k = f.begin + 600; k < f.begin + 1600; k += 250) {
        const LocalManifold w = unstable_plaque(f, k, {0, 1}, 0.05, 30);
        const LocalManifold img = unstable_plaque(f, k + 1, {0, 1}, 0.2, 31);
        const double spacing = img.nodes[1] - img.nodes[0];
        const double mesh_error = spacing * spacing;
        EXPECT_LT(w.tangency_error, 1e-6);
        for (std::size_t i = 0; i < w.nodes.size(); i += 8) {
            const Vec y = f.traj->step(k, w.point(w.nodes[i]));
            const Vec c = img.coords_of_displacement(sys.displacement(img.base, y));
            ASSERT_LE(std::abs(c(0)), img.radius);
            EXPECT_LT(sys.distance(img.point(c(0)), y), mesh_error);
        }
        // the theta coordinate is strictly monotone along the plaque
        const double first = wrap_half(w.point(w.nodes[1])(0) - w.point(w.nodes[0])(0));
        for (std::size_t i = 1; i < w.nodes.size(); ++i)
            EXPECT_GT(first * wrap_half(w.point(w.nodes[i])(0) - w.point(w.nodes[i - 1])(0)), 0.0);
    }
}

TEST(Plaques, RejectInvalidRequests) {
    const BundleFrame f = frames_of(builtin_system("cat_map"), torus_start(), 3000);
    EXPECT_THROW(unstable_plaque(f, f.begin + 800, {0, 1}, 0.6, 10), Error);
    EXPECT_THROW(unstable_plaque(f, f.begin + 5, {0, 1}, 0.1, 10), Error);
}
