#pragma once

// Example diffeomorphisms with exact derivatives, trajectories driven by a
// map family, Lyapunov spectra, covariant bundle frames, domination
// certificates and local unstable plaques.

#include "srblab/core.hpp"

#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace srb {

struct Box {
    Vec lo;
    Vec hi;

    bool contains(const Vec& p, double margin = 0.0) const {
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double pad = margin * (hi(i) - lo(i));
            if (p(i) < lo(i) - pad || p(i) > hi(i) + pad) return false;
        }
        return true;
    }
};

struct SmoothSystem {
    std::string name;
    int dim = 0;
    std::function<Vec(const Vec&)> forward;
    // Inverse branch whose output is closest to `hint`; a hint with NaN
    // entries selects the principal branch.
    std::function<Vec(const Vec&, const Vec&)> inverse_near;
    std::function<Mat(const Vec&)> derivative;
    Box attractor_box;
    std::vector<bool> periodic;  // coordinate lives on R/Z
    std::vector<bool> dither;    // coordinate is multiplied by an integer >= 2 mod 1
    std::map<std::string, double> parameters;
    // bundle dimensions of the natural splitting: unstable, centers, stable
    int unstable_dim = 0;
    int center_count = 0;
    int stable_dim = 0;

    Vec inverse(const Vec& p) const {
        Vec hint = Vec::Constant(dim, std::numeric_limits<double>::quiet_NaN());
        return inverse_near(p, hint);
    }

    Vec wrap(Vec p) const {
        for (int i = 0; i < dim; ++i)
            if (periodic[i]) p(i) = wrap_unit(p(i));
        return p;
    }

    // b - a, periodic coordinates taken in [-1/2, 1/2).
    Vec displacement(const Vec& a, const Vec& b) const {
        Vec d = b - a;
        for (int i = 0; i < dim; ++i)
            if (periodic[i]) d(i) = wrap_half(d(i));
        return d;
    }

    double distance(const Vec& a, const Vec& b) const { return displacement(a, b).norm(); }
};

// ---------------------------------------------------------------------------
// Built-in roster
// ---------------------------------------------------------------------------

namespace detail {

inline double param(const std::map<std::string, double>& overrides, const std::string& key, double dflt) {
    auto it = overrides.find(key);
    return it == overrides.end() ? dflt : it->second;
}

inline void check_known(const std::map<std::string, double>& overrides, std::initializer_list<const char*> keys,
                        const std::string& sys) {
    for (const auto& [k, v] : overrides) {
        bool ok = false;
        for (const char* known : keys) ok = ok || k == known;
        require(ok, "builtin_system(" + sys + "): unknown parameter '" + k + "'");
    }
}

inline double circle_gap(double a, double b) { return std::abs(wrap_half(a - b)); }

inline bool has_hint(const Vec& hint) { return hint.size() > 0 && std::isfinite(hint(0)); }

inline SmoothSystem make_cat_map(const std::map<std::string, double>& ov) {
    check_known(ov, {}, "cat_map");
    SmoothSystem s;
    s.name = "cat_map";
    s.dim = 2;
    s.forward = [](const Vec& p) { return make_vec({wrap_unit(2 * p(0) + p(1)), wrap_unit(p(0) + p(1))}); };
    s.inverse_near = [](const Vec& p, const Vec&) {
        return make_vec({wrap_unit(p(0) - p(1)), wrap_unit(-p(0) + 2 * p(1))});
    };
    s.derivative = [](const Vec&) {
        Mat m(2, 2);
        m << 2, 1, 1, 1;
        return m;
    };
    s.attractor_box = {make_vec({0, 0}), make_vec({1, 1})};
    s.periodic = {true, true};
    s.dither = {false, false};
    s.unstable_dim = 1;
    s.stable_dim = 1;
    return s;
}

inline SmoothSystem make_solenoid(const std::map<std::string, double>& ov) {
    check_known(ov, {"lambda", "c"}, "solenoid");
    const double lam = param(ov, "lambda", 0.25);
    const double c = param(ov, "c", 0.5);
    require(lam > 0 && lam < 0.5, "solenoid: lambda must lie in (0, 1/2)");
    require(c > 0 && lam + c <= 1.0, "solenoid: need c > 0 and lambda + c <= 1 (box invariance)");
    require(lam < c, "solenoid: need lambda < c (injectivity on the solid torus)");
    SmoothSystem s;
    s.name = "solenoid";
    s.dim = 3;
    s.parameters = {{"lambda", lam}, {"c", c}};
    s.forward = [lam, c](const Vec& p) {
        const double ang = kTwoPi * p(0);
        return make_vec({wrap_unit(2 * p(0)), lam * p(1) + c * std::cos(ang), lam * p(2) + c * std::sin(ang)});
    };
    s.inverse_near = [lam, c](const Vec& p, const Vec& hint) {
        Vec best;
        double best_score = std::numeric_limits<double>::infinity();
        for (int branch = 0; branch < 2; ++branch) {
            const double th = wrap_unit(0.5 * p(0) + 0.5 * branch);
            const double ang = kTwoPi * th;
            Vec q = make_vec({th, (p(1) - c * std::cos(ang)) / lam, (p(2) - c * std::sin(ang)) / lam});
            double score;
            if (has_hint(hint)) {
                const double dth = circle_gap(q(0), hint(0));
                score = dth * dth + (q.tail(2) - hint.tail(2)).squaredNorm();
            } else {
                score = q.tail(2).squaredNorm();
            }
            if (score < best_score) {
                best_score = score;
                best = q;
            }
        }
        return best;
    };
    s.derivative = [lam, c](const Vec& p) {
        const double ang = kTwoPi * p(0);
        Mat m = Mat::Zero(3, 3);
        m(0, 0) = 2;
        m(1, 0) = -kTwoPi * c * std::sin(ang);
        m(2, 0) = kTwoPi * c * std::cos(ang);
        m(1, 1) = lam;
        m(2, 2) = lam;
        return m;
    };
    s.attractor_box = {make_vec({0, -1, -1}), make_vec({1, 1, 1})};
    s.periodic = {true, false, false};
    s.dither = {true, false, false};
    s.unstable_dim = 1;
    s.stable_dim = 2;
    return s;
}

inline SmoothSystem make_skew_center(const std::map<std::string, double>& ov) {
    check_known(ov, {"a", "b", "base_degree", "center_degree"}, "skew_center");
    const double a = param(ov, "a", 0.1);
    const double b = param(ov, "b", 0.3);
    const double dbase = param(ov, "base_degree", 2.0);
    const double dcen = param(ov, "center_degree", 1.0);
    require(dbase == std::floor(dbase) && dbase >= 2, "skew_center: base_degree must be an integer >= 2");
    require(dcen == std::floor(dcen) && dcen >= 1, "skew_center: center_degree must be an integer >= 1");
    require(kTwoPi * std::abs(a) < dcen, "skew_center: need 2*pi*|a| < center_degree (fiber map monotone)");
    require(dcen + kTwoPi * std::abs(a) < dbase, "skew_center: need center_degree + 2*pi*|a| < base_degree");
    SmoothSystem s;
    s.name = "skew_center";
    s.dim = 2;
    s.parameters = {{"a", a}, {"b", b}, {"base_degree", dbase}, {"center_degree", dcen}};
    s.forward = [=](const Vec& p) {
        return make_vec({wrap_unit(dbase * p(0)),
                         wrap_unit(dcen * p(1) + a * std::sin(kTwoPi * p(1)) + b * std::cos(kTwoPi * p(0)))});
    };
    s.inverse_near = [=](const Vec& p, const Vec& hint) {
        const int nb = static_cast<int>(dbase);
        const int nc = static_cast<int>(dcen);
        Vec best;
        double best_score = std::numeric_limits<double>::infinity();
        for (int i = 0; i < nb; ++i) {
            const double th = (p(0) + i) / dbase;
            if (has_hint(hint) && circle_gap(th, hint(0)) > 0.5 / dbase + 1e-12 && best.size() > 0) continue;
            const double shift = b * std::cos(kTwoPi * th);
            auto g = [&](double t) { return dcen * t + a * std::sin(kTwoPi * t) + shift; };
            const double g0 = g(0.0);
            // targets p(1) + j inside [g(0), g(0) + dcen)
            double target = p(1) + std::ceil(g0 - p(1));
            for (int j = 0; j < nc; ++j, target += 1.0) {
                double lo = 0.0, hi = 1.0;
                for (int it = 0; it < 200 && hi - lo > 1e-17; ++it) {
                    const double mid = 0.5 * (lo + hi);
                    (g(mid) < target ? lo : hi) = mid;
                }
                double t = 0.5 * (lo + hi);
                for (int it = 0; it < 3; ++it) {
                    const double dg = dcen + kTwoPi * a * std::cos(kTwoPi * t);
                    t -= (g(t) - target) / dg;
                }
                Vec q = make_vec({wrap_unit(th), wrap_unit(t)});
                double score = 0.0;
                if (has_hint(hint)) {
                    const double d0 = circle_gap(q(0), hint(0)), d1 = circle_gap(q(1), hint(1));
                    score = d0 * d0 + d1 * d1;
                } else {
                    score = i + j;  // principal branch
                }
                if (score < best_score) {
                    best_score = score;
                    best = q;
                }
            }
        }
        return best;
    };
    s.derivative = [=](const Vec& p) {
        Mat m = Mat::Zero(2, 2);
        m(0, 0) = dbase;
        m(1, 0) = -kTwoPi * b * std::sin(kTwoPi * p(0));
        m(1, 1) = dcen + kTwoPi * a * std::cos(kTwoPi * p(1));
        return m;
    };
    s.attractor_box = {make_vec({0, 0}), make_vec({1, 1})};
    s.periodic = {true, true};
    s.dither = {true, dcen >= 2};
    s.unstable_dim = 1;
    s.center_count = 1;
    return s;
}

inline SmoothSystem make_sink(const std::map<std::string, double>& ov) {
    check_known(ov, {"rate_x", "rate_y"}, "sink");
    const double rx = param(ov, "rate_x", 0.5);
    const double ry = param(ov, "rate_y", 1.0 / 3.0);
    require(rx > 0 && rx < 1 && ry > 0 && ry < 1, "sink: rates must lie in (0,1)");
    SmoothSystem s;
    s.name = "sink";
    s.dim = 2;
    s.parameters = {{"rate_x", rx}, {"rate_y", ry}};
    s.forward = [=](const Vec& p) { return make_vec({rx * p(0), ry * p(1)}); };
    s.inverse_near = [=](const Vec& p, const Vec&) { return make_vec({p(0) / rx, p(1) / ry}); };
    s.derivative = [=](const Vec&) {
        Mat m = Mat::Zero(2, 2);
        m(0, 0) = rx;
        m(1, 1) = ry;
        return m;
    };
    s.attractor_box = {make_vec({-1, -1}), make_vec({1, 1})};
    s.periodic = {false, false};
    s.dither = {false, false};
    s.stable_dim = 2;
    return s;
}

}  // namespace detail

inline std::vector<std::string> builtin_names() { return {"cat_map", "solenoid", "skew_center", "sink"}; }

inline SmoothSystem builtin_system(const std::string& name, const std::map<std::string, double>& overrides = {}) {
    if (name == "cat_map") return detail::make_cat_map(overrides);
    if (name == "solenoid") return detail::make_solenoid(overrides);
    if (name == "skew_center") return detail::make_skew_center(overrides);
    if (name == "sink") return detail::make_sink(overrides);
    throw Error(ErrorKind::precondition, "builtin_system: unknown system '" + name + "'");
}

// ---------------------------------------------------------------------------
// Splittings
// ---------------------------------------------------------------------------

struct BundleRange {
    int first = 0;
    int count = 1;
};

struct SplittingSpec {
    std::vector<int> bundle_dims;  // E^u, E^c_1..E^c_k, E^s; empty bundles omitted
    std::vector<std::string> labels;
    int center_count = 0;

    static SplittingSpec make(int unstable, int centers, int stable) {
        SplittingSpec s;
        s.center_count = centers;
        if (unstable > 0) {
            s.bundle_dims.push_back(unstable);
            s.labels.push_back("u");
        }
        for (int i = 1; i <= centers; ++i) {
            s.bundle_dims.push_back(1);
            s.labels.push_back("c" + std::to_string(i));
        }
        if (stable > 0) {
            s.bundle_dims.push_back(stable);
            s.labels.push_back("s");
        }
        return s;
    }

    static SplittingSpec natural(const SmoothSystem& sys) {
        return make(sys.unstable_dim, sys.center_count, sys.stable_dim);
    }

    int total() const {
        int t = 0;
        for (int d : bundle_dims) t += d;
        return t;
    }

    void validate(int state_dim) const {
        require(!bundle_dims.empty(), "SplittingSpec: no bundles");
        require(total() == state_dim, "SplittingSpec: bundle dimensions do not sum to the state dimension");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i][0] == 'c') require(bundle_dims[i] == 1, "SplittingSpec: center bundles must be 1-dimensional");
    }

    // index of the first column of bundle i
    int column(int bundle) const {
        int c = 0;
        for (int i = 0; i < bundle; ++i) c += bundle_dims[i];
        return c;
    }
    int dim_of(BundleRange r) const {
        int d = 0;
        for (int i = r.first; i < r.first + r.count; ++i) d += bundle_dims[i];
        return d;
    }
    bool valid(BundleRange r) const {
        return r.first >= 0 && r.count >= 1 && r.first + r.count <= static_cast<int>(bundle_dims.size());
    }
    // E^u + E^c_1 + ... + E^c_i (level i of the Gibbs hierarchy)
    BundleRange level(int i) const {
        const int has_u = !labels.empty() && labels[0] == "u" ? 1 : 0;
        return {0, has_u + i};
    }
    // every bundle not in r
    std::vector<int> complement(BundleRange r) const {
        std::vector<int> out;
        for (int i = 0; i < static_cast<int>(bundle_dims.size()); ++i)
            if (i < r.first || i >= r.first + r.count) out.push_back(i);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Map families and trajectories
// ---------------------------------------------------------------------------

// A family omega -> f_omega of maps on the state space. The deterministic
// system is the translation family evaluated at omega = 0.
class MapFamily {
public:
    virtual ~MapFamily() = default;
    virtual const SmoothSystem& system() const = 0;
    virtual int noise_dim() const = 0;
    virtual Vec apply(const Vec& omega, const Vec& x) const = 0;
    virtual Mat jacobian(const Vec& omega, const Vec& x) const = 0;
    virtual Vec inverse_near(const Vec& omega, const Vec& y, const Vec& hint) const = 0;
};

// f_omega(x) = f(x) + omega, periodic coordinates wrapped.
class TranslationFamily final : public MapFamily {
public:
    explicit TranslationFamily(SmoothSystem sys) : sys_(std::move(sys)) {}
    const SmoothSystem& system() const override { return sys_; }
    int noise_dim() const override { return sys_.dim; }
    Vec apply(const Vec& omega, const Vec& x) const override { return sys_.wrap(sys_.forward(x) + omega); }
    Mat jacobian(const Vec&, const Vec& x) const override { return sys_.derivative(x); }
    Vec inverse_near(const Vec& omega, const Vec& y, const Vec& hint) const override {
        return sys_.inverse_near(sys_.wrap(y - omega), hint);
    }

private:
    SmoothSystem sys_;
};

// Lowest bits of a coordinate that is doubled mod 1 are lost every step in
// floating point, collapsing the orbit onto 0 within ~53 iterates. Orbits
// therefore carry a translation of this size on those coordinates; the result
// is a 1e-14 pseudo-orbit, shadowed by a true orbit of the hyperbolic map.
constexpr double kDitherScale = 0x1.0p-47;

struct Trajectory {
    std::shared_ptr<const MapFamily> family;
    std::vector<Vec> points;  // x_0 .. x_N
    std::vector<Vec> noise;   // omega_0 .. omega_{N-1}
    std::vector<Vec> dither;  // x_{k+1} = f_{omega_k}(x_k) + dither_k
    std::size_t origin = 0;   // first post-transient index

    const SmoothSystem& system() const { return family->system(); }
    std::size_t steps() const { return noise.size(); }
    Vec step(std::size_t k, const Vec& p) const { return system().wrap(family->apply(noise[k], p) + dither[k]); }
    Mat jacobian(std::size_t k, const Vec& p) const { return family->jacobian(noise[k], p); }
    Mat jacobian(std::size_t k) const { return family->jacobian(noise[k], points[k]); }
    Vec back(std::size_t k, const Vec& y, const Vec& hint) const {
        return family->inverse_near(noise[k], system().wrap(y - dither[k]), hint);
    }
};

inline Vec dither_vector(const SmoothSystem& sys, Rng& rng) {
    Vec w = Vec::Zero(sys.dim);
    for (int i = 0; i < sys.dim; ++i)
        if (sys.dither[i]) w(i) = rng.uniform(-kDitherScale, kDitherScale);
    return w;
}

constexpr std::uint64_t kDitherStream = 0xD17E5;

// Deterministic orbit (up to the dither) of the base map.
inline Trajectory orbit(const SmoothSystem& sys, const Vec& x0, std::size_t n_steps, std::uint64_t seed = 0) {
    require(x0.size() == sys.dim, "orbit: x0 has the wrong dimension");
    Trajectory t;
    t.family = std::make_shared<TranslationFamily>(sys);
    t.points.reserve(n_steps + 1);
    t.noise.assign(n_steps, Vec::Zero(sys.dim));
    t.dither.reserve(n_steps);
    t.points.push_back(sys.wrap(x0));
    Rng rng(seed, kDitherStream);
    for (std::size_t k = 0; k < n_steps; ++k) {
        t.dither.push_back(dither_vector(sys, rng));
        t.points.push_back(t.step(k, t.points.back()));
    }
    return t;
}

// Product D f(x_{k+n-1}) ... D f(x_k) along a trajectory.
inline Mat cocycle(const Trajectory& t, std::size_t k, std::size_t n) {
    const int d = t.system().dim;
    Mat m = Mat::Identity(d, d);
    for (std::size_t j = k; j < k + n; ++j) m = t.jacobian(j) * m;
    return m;
}

// ---------------------------------------------------------------------------
// Lyapunov spectrum
// ---------------------------------------------------------------------------

namespace detail {

// QR with non-negative diagonal in R.
inline void signed_qr(const Mat& a, Mat& q, Mat& r) {
    Eigen::HouseholderQR<Mat> qr(a);
    q = qr.householderQ() * Mat::Identity(a.rows(), a.cols());
    r = qr.matrixQR().topRows(a.cols()).template triangularView<Eigen::Upper>();
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
        if (r(i, i) < 0) {
            r.row(i) *= -1.0;
            q.col(i) *= -1.0;
        }
    }
}

inline Mat generic_frame(int d) {
    Rng rng(0x5EEDF00D);
    Mat m(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
    return orthonormalize(m);
}

}  // namespace detail

// Averaged log-stretches of successive orthogonalization factors of the
// derivative cocycle over steps [begin + transient, end), sorted descending.
inline std::vector<double> lyapunov_spectrum(const Trajectory& t, std::size_t begin, std::size_t end,
                                             std::size_t transient = 500, int reortho_every = 1) {
    require(end <= t.steps() && begin + transient < end, "lyapunov_spectrum: window too short");
    require(reortho_every >= 1, "lyapunov_spectrum: reortho_every must be >= 1");
    const int d = t.system().dim;
    Mat q = detail::generic_frame(d), r;
    std::vector<double> sums(d, 0.0);
    std::size_t counted = 0;
    Mat acc = q;
    int pending = 0;
    for (std::size_t k = begin; k < end; ++k) {
        acc = t.jacobian(k) * acc;
        if (++pending < reortho_every && k + 1 < end) continue;
        pending = 0;
        if (!acc.allFinite()) {
            std::ostringstream os;
            os << "lyapunov_spectrum: non-finite cocycle product at step " << k << "; reorthogonalize more often"
               << " (reortho_every = " << reortho_every << ")";
            throw Error(ErrorKind::numerical_failure, os.str());
        }
        detail::signed_qr(acc, q, r);
        if (k >= begin + transient) {
            for (int i = 0; i < d; ++i) {
                if (!(r(i, i) > 0)) {
                    throw Error(ErrorKind::numerical_failure,
                                "lyapunov_spectrum: degenerate orthogonalization factor (underflow); "
                                "reorthogonalize more often");
                }
                sums[i] += std::log(r(i, i));
            }
            counted += 1;
        }
        acc = q;
    }
    // counted blocks cover the steps after the transient
    const double steps = static_cast<double>(end - begin - transient);
    (void)counted;
    std::vector<double> out(d);
    for (int i = 0; i < d; ++i) out[i] = sums[i] / steps;
    std::sort(out.begin(), out.end(), std::greater<>());
    return out;
}

inline std::vector<double> lyapunov_spectrum(const SmoothSystem& sys, const Vec& x0, std::size_t n_steps,
                                             std::uint64_t seed = 0, int reortho_every = 1) {
    require(n_steps >= 1000, "lyapunov_spectrum: n_steps must be >= 1000");
    require(sys.attractor_box.contains(x0), "lyapunov_spectrum: x0 outside the attractor box");
    const std::size_t transient = 500;
    const Trajectory t = orbit(sys, x0, n_steps + transient, seed);
    return lyapunov_spectrum(t, 0, t.steps(), transient, reortho_every);
}

// Birkhoff average of log|det Df| over the same window (volume growth).
inline double log_det_average(const Trajectory& t, std::size_t begin, std::size_t end) {
    double s = 0.0;
    for (std::size_t k = begin; k < end; ++k) s += std::log(std::abs(t.jacobian(k).determinant()));
    return s / static_cast<double>(end - begin);
}

// ---------------------------------------------------------------------------
// Covariant bundle frames
// ---------------------------------------------------------------------------

struct BundleFrame {
    std::shared_ptr<const Trajectory> traj;
    SplittingSpec spec;
    std::size_t begin = 0;   // first trajectory index with a frame
    std::size_t end = 0;     // one past the last
    std::vector<Mat> bases;  // per point: columns grouped by bundle, each block orthonormal

    std::size_t size() const { return end - begin; }
    bool has(std::size_t k) const { return k >= begin && k < end; }
    const Vec& point(std::size_t k) const { return traj->points[k]; }
    const SmoothSystem& system() const { return traj->system(); }

    const Mat& basis(std::size_t k) const {
        if (!has(k)) {
            std::ostringstream os;
            os << "BundleFrame: index " << k << " outside the frame window [" << begin << ", " << end << ")";
            throw Error(ErrorKind::precondition, os.str());
        }
        return bases[k - begin];
    }

    // orthonormal basis of the sum of the bundles in r
    Mat block(std::size_t k, BundleRange r) const {
        require(spec.valid(r), "BundleFrame: invalid bundle range");
        const Mat& b = basis(k);
        const Mat cols = b.middleCols(spec.column(r.first), spec.dim_of(r));
        return r.count == 1 ? cols : orthonormalize(cols);
    }

    // orthonormal basis of the sum of the bundles outside r (empty if none)
    Mat complement(std::size_t k, BundleRange r) const {
        const Mat& b = basis(k);
        Mat cols(b.rows(), 0);
        for (int i : spec.complement(r)) {
            Mat next(b.rows(), cols.cols() + spec.bundle_dims[i]);
            next << cols, b.middleCols(spec.column(i), spec.bundle_dims[i]);
            cols = next;
        }
        return cols.cols() == 0 ? cols : orthonormalize(cols);
    }

    // Df(x_k) restricted to the sum of bundles r, written in the orthonormal
    // block bases at x_k and x_{k+1}. Products of these stay accurate for
    // contracted bundles, where pushing ambient vectors forward would pick up
    // roundoff along the expanding directions.
    Mat restricted(std::size_t k, BundleRange r) const {
        return block(k + 1, r).transpose() * traj->jacobian(k) * block(k, r);
    }

    // chart basis [E | F] adapted to the splitting E + F at x_k
    Mat chart(std::size_t k, BundleRange r) const {
        const Mat e = block(k, r);
        const Mat f = complement(k, r);
        Mat c(e.rows(), e.cols() + f.cols());
        c << e, f;
        return c;
    }
};

// Covariant vectors by forward QR followed by a backward sweep of the
// upper-triangular coefficients; frames cover
// [transient, steps - transient] of the trajectory.
inline BundleFrame estimate_bundles(std::shared_ptr<const Trajectory> traj, const SplittingSpec& spec,
                                    std::size_t transient = 500) {
    const int d = traj->system().dim;
    spec.validate(d);
    require(transient >= 500, "estimate_bundles: at least 500 transient points must be discarded");
    const std::size_t n = traj->steps();
    require(n > 2 * transient + 1, "estimate_bundles: trajectory too short for the transient");
    std::vector<Mat> qs(n + 1), rs(n + 1);
    qs[0] = detail::generic_frame(d);
    for (std::size_t k = 0; k < n; ++k) {
        const Mat a = traj->jacobian(k) * qs[k];
        detail::signed_qr(a, qs[k + 1], rs[k + 1]);
        if (!qs[k + 1].allFinite())
            throw Error(ErrorKind::numerical_failure, "estimate_bundles: non-finite forward QR step");
    }
    BundleFrame f;
    f.traj = traj;
    f.spec = spec;
    f.begin = transient;
    f.end = n - transient + 1;
    f.bases.resize(f.end - f.begin);
    Mat c = Mat::Identity(d, d);
    for (std::size_t k = n; k-- > transient;) {
        // C_k = R_{k+1}^{-1} C_{k+1}
        c = rs[k + 1].triangularView<Eigen::Upper>().solve(c);
        for (int j = 0; j < d; ++j) {
            const double nrm = c.col(j).norm();
            if (!(nrm > 0) || !std::isfinite(nrm))
                throw Error(ErrorKind::numerical_failure, "estimate_bundles: backward sweep did not converge");
            c.col(j) /= nrm;
        }
        if (k < f.end) {
            const Mat v = qs[k] * c;
            Mat basis(d, d);
            for (std::size_t b = 0; b < spec.bundle_dims.size(); ++b) {
                const int col = spec.column(static_cast<int>(b));
                const int w = spec.bundle_dims[b];
                basis.middleCols(col, w) = orthonormalize(v.middleCols(col, w));
            }
            f.bases[k - f.begin] = basis;
        }
    }
    return f;
}

// Largest angle between Df(x_k) E(x_k) and E(x_{k+1}) over the frame window.
inline double max_invariance_angle(const BundleFrame& f, BundleRange r) {
    double worst = 0.0;
    for (std::size_t k = f.begin; k + 1 < f.end; ++k) {
        const Mat pushed = orthonormalize(f.traj->jacobian(k) * f.block(k, r));
        worst = std::max(worst, subspace_angle(pushed, f.block(k + 1, r)));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Domination certificates
// ---------------------------------------------------------------------------

struct DominationEstimate {
    double C = 0.0;
    double lambda = 0.0;
    double alpha_holder = 0.0;  // largest alpha on the grid with (1+alpha)-domination
    double C_holder = 0.0;
    double lambda_holder = 0.0;
    int n_max = 0;
    std::size_t segments = 0;
};

namespace detail {

// g(n) = P(n) / lambda^n must not grow over the second half of the horizon;
// returns the fitted C = max_n g(n), or +inf if lambda is not admissible.
inline double admissible_constant(const std::vector<double>& log_p, double lambda) {
    const int n_max = static_cast<int>(log_p.size());
    double first = -std::numeric_limits<double>::infinity(), second = first;
    for (int n = 1; n <= n_max; ++n) {
        const double lg = log_p[n - 1] - n * std::log(lambda);
        if (!std::isfinite(lg)) return std::numeric_limits<double>::infinity();
        if (2 * n <= n_max)
            first = std::max(first, lg);
        else
            second = std::max(second, lg);
    }
    if (second > first) return std::numeric_limits<double>::infinity();
    return std::exp(std::max(first, second));
}

inline std::vector<double> lambda_grid() {
    std::vector<double> g;
    for (int i = 1; i <= 99; ++i) g.push_back(i / 100.0);  // ascending: smallest first
    return g;
}

}  // namespace detail

inline DominationEstimate certify_domination(const BundleFrame& f, BundleRange e_block, BundleRange f_block,
                                             int n_max = 20, std::size_t stride = 1) {
    require(f.spec.valid(e_block) && f.spec.valid(f_block), "certify_domination: invalid bundle ranges");
    require(e_block.first + e_block.count <= f_block.first || e_block.first == f_block.first,
            "certify_domination: E must precede F in the splitting order");
    require(n_max >= 2, "certify_domination: n_max must be >= 2");
    require(f.size() > static_cast<std::size_t>(n_max) + 1, "certify_domination: frame window too short");
    require(stride >= 1, "certify_domination: stride must be >= 1");
    // per (segment, n): log ||Df^n|_F||, log ||Df^{-n}|_E(f^n x)||
    std::vector<std::vector<double>> log_f, log_e;
    const int de = f.spec.dim_of(e_block), dfb = f.spec.dim_of(f_block);
    for (std::size_t i = f.begin; i + n_max < f.end; i += stride) {
        Mat me = Mat::Identity(de, de), mf = Mat::Identity(dfb, dfb);
        std::vector<double> lf(n_max), le(n_max);
        for (int n = 1; n <= n_max; ++n) {
            me = f.restricted(i + n - 1, e_block) * me;
            mf = f.restricted(i + n - 1, f_block) * mf;
            lf[n - 1] = std::log(max_singular(mf));
            le[n - 1] = -std::log(min_singular(me));
        }
        log_f.push_back(std::move(lf));
        log_e.push_back(std::move(le));
    }
    auto sup_over_segments = [&](double wf, double we) {
        std::vector<double> out(n_max, -std::numeric_limits<double>::infinity());
        for (std::size_t s = 0; s < log_f.size(); ++s)
            for (int n = 0; n < n_max; ++n) out[n] = std::max(out[n], wf * log_f[s][n] + we * log_e[s][n]);
        return out;
    };
    DominationEstimate est;
    est.n_max = n_max;
    est.segments = log_f.size();
    const auto base = sup_over_segments(1.0, 1.0);
    bool found = false;
    for (double lam : detail::lambda_grid()) {
        const double c = detail::admissible_constant(base, lam);
        if (std::isfinite(c)) {
            est.lambda = lam;
            est.C = c;
            found = true;
            break;
        }
    }
    if (!found) {
        throw Error(ErrorKind::hypothesis_violation,
                    "certify_domination: domination refuted, no lambda < 1 on the grid is admissible");
    }
    for (int ai = 100; ai >= 1; --ai) {
        const double alpha = ai / 100.0;
        const auto p1 = sup_over_segments(1.0 + alpha, 1.0);
        const auto p2 = sup_over_segments(1.0, 1.0 + alpha);
        std::vector<double> worst(n_max);
        for (int n = 0; n < n_max; ++n) worst[n] = std::max(p1[n], p2[n]);
        for (double lam : detail::lambda_grid()) {
            const double c = detail::admissible_constant(worst, lam);
            if (std::isfinite(c)) {
                est.alpha_holder = alpha;
                est.C_holder = c;
                est.lambda_holder = lam;
                return est;
            }
        }
    }
    return est;  // alpha_holder = 0: no (1+alpha) certificate on the grid
}

// Worst value of ||Df^n|_F|| * ||Df^{-n}|_E|| / (C lambda^n) over a window;
// <= 1 means the certificate holds there.
inline double domination_excess(const BundleFrame& f, BundleRange e_block, BundleRange f_block,
                                const DominationEstimate& est, std::size_t from, std::size_t to) {
    double worst = 0.0;
    for (std::size_t i = std::max(from, f.begin); i + est.n_max < std::min(to, f.end); ++i) {
        Mat me = Mat::Identity(f.spec.dim_of(e_block), f.spec.dim_of(e_block));
        Mat mf = Mat::Identity(f.spec.dim_of(f_block), f.spec.dim_of(f_block));
        for (int n = 1; n <= est.n_max; ++n) {
            me = f.restricted(i + n - 1, e_block) * me;
            mf = f.restricted(i + n - 1, f_block) * mf;
            const double ratio = max_singular(mf) / min_singular(me) / (est.C * std::pow(est.lambda, n));
            worst = std::max(worst, ratio);
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Local unstable plaques (graph transform)
// ---------------------------------------------------------------------------

// A curve through a base point, written as a graph over the E direction of
// the chart [E | F] at the base: p(u) = x + e*u + F*g(u), g piecewise linear.
struct LocalManifold {
    Vec base;
    std::size_t base_index = 0;
    Mat chart;      // [e | F]
    Mat chart_inv;
    std::vector<double> nodes;  // u values, symmetric about 0
    std::vector<Vec> offsets;   // g(u) at the nodes, dimension dim-1
    double radius = 0.0;
    double tangency_error = 0.0;
    std::vector<bool> periodic;

    int dim() const { return static_cast<int>(base.size()); }

    Vec offset(double u) const {
        if (u <= nodes.front()) return offsets.front();
        if (u >= nodes.back()) return offsets.back();
        const auto it = std::upper_bound(nodes.begin(), nodes.end(), u);
        const std::size_t i = static_cast<std::size_t>(it - nodes.begin()) - 1;
        const double w = (u - nodes[i]) / (nodes[i + 1] - nodes[i]);
        return (1.0 - w) * offsets[i] + w * offsets[i + 1];
    }

    Vec displacement_at(double u) const {
        Vec c(dim());
        c(0) = u;
        c.tail(dim() - 1) = offset(u);
        return chart * c;
    }

    Vec point(double u) const {
        Vec p = base + displacement_at(u);
        for (int i = 0; i < dim(); ++i)
            if (periodic[i]) p(i) = wrap_unit(p(i));
        return p;
    }

    // chart coordinates (a, b) of a point given as a displacement from base
    Vec coords_of_displacement(const Vec& d) const { return chart_inv * d; }

    // arc length of the graph between parameters u0 < u1
    double arc_length(double u0, double u1, int pieces = 16) const {
        double len = 0.0;
        Vec prev = displacement_at(u0);
        for (int i = 1; i <= pieces; ++i) {
            const Vec cur = displacement_at(u0 + (u1 - u0) * i / pieces);
            len += (cur - prev).norm();
            prev = cur;
        }
        return len;
    }
};

namespace detail {

inline std::vector<double> symmetric_mesh(double r, int nodes) {
    std::vector<double> u(nodes);
    const int half = nodes / 2;
    for (int i = 0; i < nodes; ++i) u[i] = r * static_cast<double>(i - half) / half;
    return u;
}

}  // namespace detail

constexpr int kPlaqueNodes = 129;

// Graph transform seeded at the flat graph over E(x_{k-depth}) and pushed
// `depth` times along the realized maps, regraphing over E at every step.
inline LocalManifold unstable_plaque(const BundleFrame& f, std::size_t k, BundleRange e_block, double radius,
                                     int depth) {
    const SmoothSystem& sys = f.system();
    require(f.spec.dim_of(e_block) == 1, "unstable_plaque: only one-dimensional bundles are supported");
    require(sys.dim >= 2, "unstable_plaque: state dimension must be >= 2");
    require(radius > 0 && radius < 0.5, "unstable_plaque: radius must lie in (0, 1/2)");
    require(depth >= 0, "unstable_plaque: depth must be >= 0");
    require(k >= f.begin + static_cast<std::size_t>(depth) && f.has(k),
            "unstable_plaque: frame not available along the backward orbit to the requested depth");
    const int d = sys.dim;
    const std::size_t k0 = k - depth;
    const auto& traj = *f.traj;

    Mat chart = f.chart(k0, e_block);
    std::vector<double> mesh = detail::symmetric_mesh(radius, kPlaqueNodes);
    std::vector<Vec> disp(kPlaqueNodes);
    for (int i = 0; i < kPlaqueNodes; ++i) disp[i] = chart.col(0) * mesh[i];
    std::vector<Vec> offs(kPlaqueNodes, Vec::Zero(d - 1));
    Vec tangent = chart.col(0);

    for (std::size_t j = k0; j < k; ++j) {
        const Vec& xj = traj.points[j];
        const Vec& xn = traj.points[j + 1];
        const Mat dj = traj.jacobian(j);
        tangent = dj * tangent;
        tangent.normalize();
        const Mat next_chart = f.chart(j + 1, e_block);
        const Mat next_inv = next_chart.inverse();
        std::vector<double> a(kPlaqueNodes);
        std::vector<Vec> b(kPlaqueNodes);
        for (int i = 0; i < kPlaqueNodes; ++i) {
            const Vec img = traj.step(j, sys.wrap(xj + disp[i]));
            const Vec c = next_inv * sys.displacement(xn, img);
            a[i] = c(0);
            b[i] = c.tail(d - 1);
        }
        if (a.back() < a.front()) {
            std::reverse(a.begin(), a.end());
            std::reverse(b.begin(), b.end());
        }
        for (int i = 1; i < kPlaqueNodes; ++i) {
            if (!(a[i] > a[i - 1])) {
                std::ostringstream os;
                os << "unstable_plaque: graph transform left the chart at step " << (j + 1 - k0)
                   << " (image is not a graph over E); use a smaller radius";
                throw Error(ErrorKind::numerical_failure, os.str());
            }
        }
        const double covered = std::min(-a.front(), a.back());
        const bool last = (j + 1 == k);
        if (last && covered < radius * (1.0 - 1e-12)) {
            std::ostringstream os;
            os << "unstable_plaque: image covers only |u| <= " << covered << " < radius " << radius
               << "; use a smaller radius or a larger depth";
            throw Error(ErrorKind::numerical_failure, os.str());
        }
        // keep a margin beyond the radius, but small enough that the next
        // image stays inside one fundamental domain
        const double r_next =
            last ? radius
                 : std::min({covered, 2.0 * radius, std::max(radius, 0.4 / max_singular(traj.jacobian(j + 1)))});
        mesh = detail::symmetric_mesh(r_next, kPlaqueNodes);
        for (int i = 0; i < kPlaqueNodes; ++i) {
            const double u = mesh[i];
            const auto it = std::upper_bound(a.begin(), a.end(), u);
            std::size_t hi = static_cast<std::size_t>(it - a.begin());
            hi = std::clamp<std::size_t>(hi, 1, kPlaqueNodes - 1);
            const std::size_t lo = hi - 1;
            const double w = (u - a[lo]) / (a[hi] - a[lo]);
            offs[i] = (1.0 - w) * b[lo] + w * b[hi];
            if (u == a[lo]) offs[i] = b[lo];
            Vec c(d);
            c(0) = u;
            c.tail(d - 1) = offs[i];
            disp[i] = next_chart * c;
        }
        chart = next_chart;
    }

    LocalManifold m;
    m.base = traj.points[k];
    m.base_index = k;
    m.chart = chart;
    m.chart_inv = chart.inverse();
    m.nodes = mesh;
    m.offsets = offs;
    m.radius = radius;
    m.periodic = sys.periodic;
    const Vec e = f.block(k, e_block).col(0);
    m.tangency_error = std::acos(std::clamp(std::abs(e.dot(tangent)), 0.0, 1.0));
    return m;
}

// ---------------------------------------------------------------------------
// Backward orbits of points on local unstable manifolds
// ---------------------------------------------------------------------------

// A point y on the local unstable manifold of x_k together with its backward
// orbit y_j = f^{-j}(y) (along the realized noise path) and the unstable
// Jacobians J^E(y_j) = |det Df|_{E(y_j)}| for j = 0..depth.
struct LeafOrbit {
    Vec point;
    std::vector<Vec> backward;
    std::vector<double> log_jacobian;
};

constexpr std::size_t kShootingMargin = 100;

// Chart coordinates of y relative to x_k are (u, *). For one-dimensional E
// the backward orbit is found by shooting: a short segment along E at
// x_{k-K} is pushed forward K = depth + margin steps and the seed parameter
// is solved for by Newton's method, so no unstable backward iteration is
// performed. When E is the whole tangent space, backward iteration is
// contracting and inverse branches along the recorded history are used.
inline LeafOrbit leaf_orbit(const BundleFrame& f, std::size_t k, BundleRange e_block, const Vec& u, int depth,
                            std::size_t margin = kShootingMargin) {
    const SmoothSystem& sys = f.system();
    const auto& traj = *f.traj;
    const int d = sys.dim;
    const int de = f.spec.dim_of(e_block);
    require(u.size() == de, "leaf_orbit: parameter dimension differs from dim E");
    require(depth >= 0, "leaf_orbit: depth must be >= 0");
    require(k < traj.steps(), "leaf_orbit: base index beyond the trajectory");
    LeafOrbit out;

    if (de == d) {
        require(k >= static_cast<std::size_t>(depth), "leaf_orbit: not enough history");
        const Mat chart = f.block(k, e_block);
        Vec y = sys.wrap(traj.points[k] + chart * u);
        out.point = y;
        out.backward.push_back(y);
        out.log_jacobian.push_back(std::log(std::abs(traj.jacobian(k, y).determinant())));
        for (int j = 1; j <= depth; ++j) {
            const std::size_t idx = k - j;
            y = traj.back(idx, y, traj.points[idx]);
            out.backward.push_back(y);
            out.log_jacobian.push_back(std::log(std::abs(traj.jacobian(idx, y).determinant())));
        }
        return out;
    }

    require(de == 1, "leaf_orbit: E must be one-dimensional or the whole space");
    const std::size_t kk = static_cast<std::size_t>(depth) + margin;
    require(k >= f.begin + kk, "leaf_orbit: frame not available at the shooting depth");
    const std::size_t k0 = k - kk;
    const Vec seed_dir = f.block(k0, e_block).col(0);
    const Mat target_inv = f.chart(k, e_block).inverse();
    constexpr double kLinear = 1e-6;

    struct Shot {
        double a = 0.0, slope = 0.0;
        Vec disp, tangent;
        std::vector<Vec> pts;
        std::vector<double> logj;
    };
    auto shoot = [&](double s, bool record) {
        Shot r;
        Vec dl = seed_dir * s;
        Vec t = seed_dir;
        for (std::size_t j = k0; j < k; ++j) {
            const Vec w = sys.wrap(traj.points[j] + dl);
            const Mat dw = traj.jacobian(j, w);
            if (record && j + depth >= k) {
                const Vec tn = t.normalized();
                r.pts.push_back(w);
                r.logj.push_back(std::log((dw * tn).norm()));
            }
            if (dl.norm() < kLinear)
                dl = traj.jacobian(j) * dl;
            else
                dl = sys.displacement(traj.points[j + 1], traj.step(j, w));
            t = dw * t;
        }
        r.tangent = t;
        const Vec c = target_inv * dl;
        const Vec ct = target_inv * t;
        r.a = c(0);
        r.slope = ct(0);
        r.disp = dl;
        return r;
    };

    const double target = u(0);
    Shot lin = shoot(0.0, false);
    double s = target / lin.slope;
    if (target != 0.0) {
        bool converged = false;
        for (int it = 0; it < 60; ++it) {
            const Shot r = shoot(s, false);
            const double err = r.a - target;
            // roundoff in the nonlinear pushes is amplified along E to ~1e-12
            if (std::abs(err) <= 1e-11 + 1e-9 * std::abs(target)) {
                converged = true;
                break;
            }
            s -= err / r.slope;
        }
        if (!converged)
            throw Error(ErrorKind::numerical_failure, "leaf_orbit: shooting did not converge; point too far out");
    }
    Shot fin = shoot(s, true);
    const Vec y = sys.wrap(traj.points[k] + fin.disp);
    const Mat dy = traj.jacobian(k, y);
    const Vec ty = fin.tangent.normalized();
    out.point = y;
    out.backward.push_back(y);
    out.log_jacobian.push_back(std::log((dy * ty).norm()));
    // fin.pts holds y_depth .. y_1 in forward order
    for (std::size_t i = fin.pts.size(); i-- > 0;) {
        out.backward.push_back(fin.pts[i]);
        out.log_jacobian.push_back(fin.logj[i]);
    }
    return out;
}

}  // namespace srb
