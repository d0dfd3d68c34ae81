#pragma once

// Unstable Jacobians, density ratios along unstable leaves, Hoelder budgets,
// foliated boxes with empirical conditional densities, the absolute
// continuity check, the Gibbs level index, recurrence-time entropy and a
// holonomy test for the strong-unstable foliation.

#include "srblab/pesin.hpp"
#include "srblab/random.hpp"
#include "srblab/systems.hpp"

#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace srb {

// ---------------------------------------------------------------------------
// Unstable Jacobian
// ---------------------------------------------------------------------------

inline double unstable_jacobian(const BundleFrame& f, std::size_t k, BundleRange e, int steps = 1) {
    require(steps >= 1, "unstable_jacobian: steps must be >= 1");
    Mat m = f.block(k, e);
    for (int j = 0; j < steps; ++j) m = f.traj->jacobian(k + j) * m;
    const double v = volume_factor(m);
    if (!(v > 0) || !std::isfinite(v)) throw Error(ErrorKind::numerical_failure, "unstable_jacobian: degenerate frame");
    return v;
}

// ---------------------------------------------------------------------------
// Hoelder budgets and density ratios
// ---------------------------------------------------------------------------

struct HolderBudget {
    double C_H = 1.0;
    double alpha_H = 1.0;
    double C = 1.0;
    double lambda_star = 0.5;

    void validate() const {
        require(C_H >= 0 && std::isfinite(C_H), "HolderBudget: C_H must be finite and >= 0");
        require(alpha_H > 0 && alpha_H <= 1, "HolderBudget: alpha_H must lie in (0,1]");
        require(C > 0 && std::isfinite(C), "HolderBudget: C must be positive");
        require(lambda_star > 0 && lambda_star < 1, "HolderBudget: lambda_star must lie in (0,1)");
    }
};

// L = exp{C_H C^a / (1 - lambda^a)}: bound on density ratios along a plaque.
inline double density_bound(const HolderBudget& b) {
    b.validate();
    const double q = std::pow(b.lambda_star, b.alpha_H);
    return std::exp(b.C_H * std::pow(b.C, b.alpha_H) / (1.0 - q));
}

// Relative error bound for truncating the Jacobian product after T factors.
inline double tail_bound(const HolderBudget& b, double distance, int T) {
    b.validate();
    if (distance <= 0.0 || b.C_H == 0.0) return 0.0;
    const double q = std::pow(b.lambda_star, b.alpha_H);
    return std::expm1(b.C_H * std::pow(b.C * distance, b.alpha_H) * std::pow(q, T) / (1.0 - q));
}

// Smallest T with tail_bound(b, distance, T) < target.
inline int truncation_depth(const HolderBudget& b, double distance, double target = 1e-3, int t_max = 400) {
    b.validate();
    require(target > 0, "truncation_depth: target must be positive");
    if (tail_bound(b, distance, 0) < target) return 0;
    const double q = std::pow(b.lambda_star, b.alpha_H);
    const double need = std::log1p(target) * (1.0 - q) / (b.C_H * std::pow(b.C * distance, b.alpha_H));
    int t = static_cast<int>(std::ceil(std::log(need) / std::log(q)));
    while (t > 0 && tail_bound(b, distance, t - 1) < target) --t;
    while (tail_bound(b, distance, t) >= target) ++t;
    if (t > t_max) {
        std::ostringstream os;
        os << "truncation_depth: tail bound needs T = " << t << " > " << t_max;
        throw Error(ErrorKind::numerical_failure, os.str());
    }
    return t;
}

struct DensityRatio {
    double ratio = 1.0;
    double log_ratio = 0.0;
    double tail_bound = 0.0;
    int T = 0;
    double distance = 0.0;
};

// rho(y)/rho(z) = prod_{j=1}^{T} J^E(f^{-j} z) / J^E(f^{-j} y)
inline DensityRatio density_ratio(const SmoothSystem& sys, const LeafOrbit& y, const LeafOrbit& z, int T,
                                  const HolderBudget& b) {
    require(T >= 0, "density_ratio: T must be >= 0");
    require(y.log_jacobian.size() > static_cast<std::size_t>(T) && z.log_jacobian.size() > static_cast<std::size_t>(T),
            "density_ratio: backward orbits shorter than T");
    DensityRatio r;
    r.T = T;
    for (int j = 1; j <= T; ++j) r.log_ratio += z.log_jacobian[j] - y.log_jacobian[j];
    r.ratio = std::exp(r.log_ratio);
    r.distance = sys.distance(y.point, z.point);
    r.tail_bound = tail_bound(b, r.distance, T);
    return r;
}

// Points given by their E-coordinates in the chart at x_k.
inline DensityRatio density_ratio(const BundleFrame& f, std::size_t k, BundleRange e, const Vec& uy, const Vec& uz,
                                  int T, const HolderBudget& b) {
    const LeafOrbit y = leaf_orbit(f, k, e, uy, T);
    const LeafOrbit z = (uy == uz) ? y : leaf_orbit(f, k, e, uz, T);
    return density_ratio(f.system(), y, z, T, b);
}

// Points given in state coordinates; both must lie on the plaque.
inline DensityRatio density_ratio(const BundleFrame& f, const LocalManifold& plaque, BundleRange e, const Vec& y,
                                  const Vec& z, int T, const HolderBudget& b, double on_plaque_tol = 1e-4) {
    const SmoothSystem& sys = f.system();
    auto param = [&](const Vec& p) {
        const Vec c = plaque.coords_of_displacement(sys.displacement(plaque.base, p));
        const double u = c(0);
        if (std::abs(u) > plaque.radius || sys.distance(plaque.point(u), p) > on_plaque_tol) {
            throw Error(ErrorKind::precondition, "density_ratio: point is not on the plaque (projection check failed)");
        }
        return make_vec({u});
    };
    return density_ratio(f, plaque.base_index, e, param(y), param(z), T, b);
}

// ---------------------------------------------------------------------------
// Budget fitting
// ---------------------------------------------------------------------------

namespace detail {

// E-parameters used to probe a leaf: a symmetric star of radius r.
inline std::vector<Vec> probe_parameters(int de, double r) {
    std::vector<Vec> out;
    out.push_back(Vec::Zero(de));
    for (int i = 0; i < de; ++i) {
        for (double s : {-1.0, -0.5, 0.5, 1.0}) {
            Vec u = Vec::Zero(de);
            u(i) = s * r;
            out.push_back(u);
        }
    }
    return out;
}

inline double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace detail

// lambda_*, C from backward contraction of leaf point pairs; C_H, alpha_H by
// regressing |log J^E(y) - log J^E(z)| on d(y, z) over the same pairs.
inline HolderBudget fit_holder_budget(const BundleFrame& f, BundleRange e, const std::vector<std::size_t>& bases,
                                      double radius, int T) {
    require(!bases.empty(), "fit_holder_budget: no base points");
    require(T >= 4, "fit_holder_budget: T must be >= 4");
    const SmoothSystem& sys = f.system();
    const int de = f.spec.dim_of(e);
    constexpr double kResolvable = 1e-9;  // closer pairs are resolved only to roundoff
    std::vector<double> worst(T + 1, -std::numeric_limits<double>::infinity());
    std::vector<double> closest(T + 1, std::numeric_limits<double>::infinity());  // log of the smallest d_j
    std::vector<std::pair<double, double>> holder;  // (d, |delta log J|)
    for (std::size_t k : bases) {
        std::vector<LeafOrbit> leaves;
        for (const Vec& u : detail::probe_parameters(de, radius)) leaves.push_back(leaf_orbit(f, k, e, u, T));
        for (std::size_t a = 0; a < leaves.size(); ++a) {
            for (std::size_t c = a + 1; c < leaves.size(); ++c) {
                const double d0 = sys.distance(leaves[a].point, leaves[c].point);
                if (!(d0 > 0)) continue;
                for (int j = 0; j <= T; ++j) {
                    const double dj = sys.distance(leaves[a].backward[j], leaves[c].backward[j]);
                    worst[j] = std::max(worst[j], std::log(std::max(dj, 1e-300) / d0));
                    closest[j] = std::min(closest[j], std::log(std::max(dj, 1e-300)));
                    const double dl = std::abs(leaves[a].log_jacobian[j] - leaves[c].log_jacobian[j]);
                    if (dj > kResolvable) holder.emplace_back(dj, dl);
                }
            }
        }
    }
    int usable = T;
    for (int j = 1; j <= T; ++j) {
        if (!(std::exp(closest[j]) > kResolvable)) {
            usable = j - 1;
            break;
        }
    }
    if (usable < 3)
        throw Error(ErrorKind::numerical_failure,
                    "fit_holder_budget: leaf pairs collapse below roundoff; use a larger radius");
    HolderBudget b;
    std::vector<double> js, ws;
    for (int j = 1; j <= usable; ++j) {
        js.push_back(j);
        ws.push_back(worst[j]);
    }
    const double slope = detail::ls_slope(js, ws);
    b.lambda_star = std::exp(slope);
    if (!(b.lambda_star < 1.0)) {
        std::ostringstream os;
        os << "fit_holder_budget: no backward contraction along the leaves (fitted lambda_* = " << b.lambda_star << ")";
        throw Error(ErrorKind::hypothesis_violation, os.str());
    }
    double logc = 0.0;
    for (int j = 0; j <= usable; ++j) logc = std::max(logc, worst[j] - j * slope);
    b.C = std::exp(logc);

    std::vector<double> lx, ly;
    double dl_max = 0.0;
    for (const auto& [d, dl] : holder) {
        dl_max = std::max(dl_max, dl);
        if (dl > 1e-13) {
            lx.push_back(std::log(d));
            ly.push_back(std::log(dl));
        }
    }
    if (lx.size() < 3 || dl_max < 1e-12) {
        b.C_H = 0.0;  // Jacobian constant along leaves
        b.alpha_H = 1.0;
        return b;
    }
    b.alpha_H = std::clamp(detail::ls_slope(lx, ly), 0.05, 1.0);
    double ch = 0.0;
    for (const auto& [d, dl] : holder) ch = std::max(ch, dl / std::pow(d, b.alpha_H));
    b.C_H = ch;
    return b;
}

// ---------------------------------------------------------------------------
// Foliated boxes
// ---------------------------------------------------------------------------

constexpr int kBoxMesh = 129;

struct BoxPlaque {
    std::size_t source = 0;  // trajectory index of the leaf's base point
    std::vector<double> a;   // E coordinate in the box chart (mesh)
    std::vector<Vec> b;      // complementary coordinates of the plaque over the mesh
    std::vector<double> u;   // leaf parameter in the source chart at each mesh node
    Vec crossing;            // b at a = 0: the plaque's point on the transversal
    double length = 0.0;     // arc length over the mesh

    template <class T>
    static T interp(const std::vector<double>& xs, const std::vector<T>& ys, double x) {
        if (x <= xs.front()) return ys.front();
        if (x >= xs.back()) return ys.back();
        const auto it = std::upper_bound(xs.begin(), xs.end(), x);
        const std::size_t i = static_cast<std::size_t>(it - xs.begin()) - 1;
        const double w = (x - xs[i]) / (xs[i + 1] - xs[i]);
        return (1.0 - w) * ys[i] + w * ys[i + 1];
    }
    Vec b_at(double x) const { return interp(a, b, x); }
    double u_at(double x) const { return interp(a, u, x); }
};

struct BoxOptions {
    double tol_fraction = 0.125;   // leaf binning tolerance as a fraction of beta
    double separation = 1.0;       // minimal plaque spacing as a fraction of the tolerance
    int max_plaques = 32;
    int max_candidates = 400;
    int plaque_depth = 40;
    std::size_t history = 400;     // frames required before a candidate
};

struct FoliatedBox {
    const BundleFrame* frame = nullptr;
    std::size_t base_index = 0;
    Vec base;
    BundleRange e_block;
    int e_dim = 1;
    Mat chart, chart_inv;  // [E | F] at the base
    double delta = 0.0, beta = 0.0, tol = 0.0;
    std::vector<BoxPlaque> plaques;
    int candidates_tried = 0;
    int candidates_rejected = 0;

    bool full() const { return e_dim == static_cast<int>(base.size()); }
    Vec coords(const Vec& p) const { return chart_inv * frame->system().displacement(base, p); }
    Vec state(const Vec& c) const {
        Vec p = base + chart * c;
        return frame->system().wrap(p);
    }
    // smallest distance between two plaques over the mesh
    double min_separation() const {
        double m = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < plaques.size(); ++i)
            for (std::size_t j = i + 1; j < plaques.size(); ++j)
                for (int n = 0; n < kBoxMesh; ++n) m = std::min(m, (plaques[i].b[n] - plaques[j].b[n]).norm());
        return m;
    }
};

namespace detail {

inline bool graph_over_mesh(const FoliatedBox& box, const LocalManifold& lm, BoxPlaque& out) {
    const std::size_t n = lm.nodes.size();
    std::vector<double> a(n), u(n);
    std::vector<Vec> b(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec c = box.coords(lm.point(lm.nodes[i]));
        a[i] = c(0);
        b[i] = c.tail(c.size() - 1);
        u[i] = lm.nodes[i];
    }
    if (a.back() < a.front()) {
        std::reverse(a.begin(), a.end());
        std::reverse(b.begin(), b.end());
        std::reverse(u.begin(), u.end());
    }
    for (std::size_t i = 1; i < n; ++i)
        if (!(a[i] > a[i - 1])) return false;  // not a graph over E in the box chart
    const double h = 0.5 * box.delta;
    if (a.front() > -h || a.back() < h) return false;  // does not cross the box
    out.a = symmetric_mesh(h, kBoxMesh);
    out.b.resize(kBoxMesh);
    out.u.resize(kBoxMesh);
    for (int i = 0; i < kBoxMesh; ++i) {
        out.b[i] = BoxPlaque::interp(a, b, out.a[i]);
        out.u[i] = BoxPlaque::interp(a, u, out.a[i]);
    }
    out.crossing = out.b[kBoxMesh / 2];
    out.length = 0.0;
    for (int i = 1; i < kBoxMesh; ++i) {
        Vec c0(box.base.size()), c1(box.base.size());
        c0 << out.a[i - 1], out.b[i - 1];
        c1 << out.a[i], out.b[i];
        out.length += (box.chart * (c1 - c0)).norm();
    }
    return true;
}

}  // namespace detail

inline FoliatedBox build_foliated_box(const BundleFrame& f, std::size_t k, const PesinBlockParams& params,
                                      BundleRange e, double delta, double beta, const BoxOptions& opt = {}) {
    require(delta > 0 && delta < 0.5, "build_foliated_box: delta must lie in (0, 1/2)");
    require(beta > 0 && beta < delta / 4, "build_foliated_box: need 0 < beta < delta/4");
    require(opt.tol_fraction > 0 && opt.separation > 0, "build_foliated_box: tolerance and spacing must be positive");
    const BlockVerdict v = in_block(f, k, params, e);
    if (!v.member) {
        std::ostringstream os;
        os << "build_foliated_box: base point is not in the Pesin block (margin " << v.margin << ")";
        throw Error(ErrorKind::precondition, os.str());
    }
    FoliatedBox box;
    box.frame = &f;
    box.base_index = k;
    box.base = f.point(k);
    box.e_block = e;
    box.e_dim = f.spec.dim_of(e);
    box.chart = f.chart(k, e);
    box.chart_inv = box.chart.inverse();
    box.delta = delta;
    box.beta = beta;
    box.tol = opt.tol_fraction * beta;
    if (box.full()) {
        BoxPlaque p;
        p.source = k;
        box.plaques.push_back(p);
        return box;
    }
    require(box.e_dim == 1, "build_foliated_box: E must be one-dimensional or the whole space");

    struct Cand {
        double dist;
        std::size_t idx;
    };
    std::vector<Cand> cands;
    const std::size_t need = std::max<std::size_t>({opt.history, static_cast<std::size_t>(params.ell) * params.depth,
                                                    static_cast<std::size_t>(opt.plaque_depth)});
    for (std::size_t j = f.begin + need; j + 1 < f.end; ++j) {
        const Vec c = box.coords(f.point(j));
        const double bn = c.tail(c.size() - 1).norm();
        if (std::abs(c(0)) <= 0.25 * delta && bn <= beta) cands.push_back({bn, j});
    }
    const double spacing = opt.separation * box.tol;
    std::sort(cands.begin(), cands.end(),
              [](const Cand& x, const Cand& y) { return x.dist < y.dist || (x.dist == y.dist && x.idx < y.idx); });
    for (const Cand& c : cands) {
        if (static_cast<int>(box.plaques.size()) >= opt.max_plaques || box.candidates_tried >= opt.max_candidates) break;
        // candidates already within binning distance of a plaque add nothing
        const Vec cc = box.coords(f.point(c.idx));
        bool near = false;
        for (const auto& p : box.plaques)
            if ((cc.tail(cc.size() - 1) - p.b_at(cc(0))).norm() <= spacing) near = true;
        if (near) continue;
        box.candidates_tried += 1;
        if (!in_block(f, c.idx, params, e).member) {
            box.candidates_rejected += 1;
            continue;
        }
        BoxPlaque p;
        p.source = c.idx;
        try {
            // the plaque must reach |a| = delta/2 in the box chart from the candidate's a
            const double speed = std::abs((box.chart_inv * f.block(c.idx, e).col(0))(0));
            const double radius = std::min(0.45, 1.15 * (0.5 * delta + std::abs(cc(0))) / std::max(speed, 1e-3));
            const LocalManifold lm = unstable_plaque(f, c.idx, e, radius, opt.plaque_depth);
            if (!detail::graph_over_mesh(box, lm, p)) {
                box.candidates_rejected += 1;
                continue;
            }
        } catch (const Error& err) {
            if (err.kind() != ErrorKind::numerical_failure) throw;
            box.candidates_rejected += 1;
            continue;
        }
        bool separated = true;
        for (const auto& q : box.plaques)
            for (int n = 0; n < kBoxMesh && separated; ++n)
                if ((p.b[n] - q.b[n]).norm() <= spacing) separated = false;
        if (separated) box.plaques.push_back(std::move(p));
    }
    if (box.plaques.empty())
        throw Error(ErrorKind::numerical_failure, "build_foliated_box: no block points with usable plaques in the beta-ball");
    if (!(box.min_separation() > 0)) throw Error(ErrorKind::numerical_failure, "build_foliated_box: plaques intersect");
    return box;
}

// ---------------------------------------------------------------------------
// Conditional densities
// ---------------------------------------------------------------------------

struct ConditionalDensity {
    std::size_t plaque = 0;
    std::vector<double> centers;   // E coordinate of bin centres (first axis for full boxes)
    std::vector<double> measure;   // leaf Lebesgue measure of each bin
    std::vector<std::uint64_t> counts;
    std::vector<double> density;   // integrates to 1 against `measure`
    std::uint64_t total = 0;

    double integral() const {
        double s = 0.0;
        for (std::size_t i = 0; i < density.size(); ++i) s += density[i] * measure[i];
        return s;
    }
    std::size_t modal_bin() const {
        return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
};

struct ConditionalResult {
    std::vector<ConditionalDensity> densities;
    std::vector<double> quotient;  // mu-hat: mass fraction per plaque
    std::uint64_t seen = 0;
    std::uint64_t in_ball = 0;     // |a| <= delta/2 and |b| <= beta
    std::uint64_t assigned = 0;
    std::uint64_t discarded = 0;   // in the ball but farther than tol from every plaque
    int bins = 32;

    double discarded_fraction() const {
        const double base = static_cast<double>(assigned + discarded);
        return base > 0 ? static_cast<double>(discarded) / base : 0.0;
    }
};

// Single pass over a sample stream; points are assigned to the nearest
// plaque within the binning tolerance.
class ConditionalAccumulator {
public:
    explicit ConditionalAccumulator(const FoliatedBox& box, int bins = 32) : box_(box), bins_(bins) {
        require(bins >= 2, "ConditionalAccumulator: need at least 2 bins");
        cells_ = box.full() ? static_cast<std::size_t>(bins) * bins : static_cast<std::size_t>(bins);
        counts_.assign(box.plaques.size(), std::vector<std::uint64_t>(cells_, 0));
    }

    void add(const Vec& p) {
        seen_ += 1;
        const Vec c = box_.coords(p);
        const double h = 0.5 * box_.delta;
        if (box_.full()) {
            if (c.cwiseAbs().maxCoeff() > h) return;
            in_ball_ += 1;
            assigned_ += 1;
            counts_[0][bin(c(0)) * bins_ + bin(c(1))] += 1;
            return;
        }
        if (std::abs(c(0)) > h) return;
        const Vec b = c.tail(c.size() - 1);
        const bool ball = b.norm() <= box_.beta;
        in_ball_ += ball ? 1 : 0;
        double best = std::numeric_limits<double>::infinity();
        std::size_t which = 0;
        for (std::size_t i = 0; i < box_.plaques.size(); ++i) {
            const double d = (b - box_.plaques[i].b_at(c(0))).norm();
            if (d < best) {
                best = d;
                which = i;
            }
        }
        if (best <= box_.tol) {
            assigned_ += 1;
            counts_[which][bin(c(0))] += 1;
        } else if (ball) {
            discarded_ += 1;
        }
    }

    ConditionalResult result() const {
        ConditionalResult r;
        r.bins = bins_;
        r.seen = seen_;
        r.in_ball = in_ball_;
        r.assigned = assigned_;
        r.discarded = discarded_;
        const double h = 0.5 * box_.delta;
        const double w = box_.delta / bins_;
        for (std::size_t i = 0; i < box_.plaques.size(); ++i) {
            ConditionalDensity d;
            d.plaque = i;
            d.counts = counts_[i];
            d.total = std::accumulate(d.counts.begin(), d.counts.end(), std::uint64_t{0});
            d.measure.resize(cells_);
            d.centers.resize(cells_);
            for (std::size_t c = 0; c < cells_; ++c) {
                if (box_.full()) {
                    const int ia = static_cast<int>(c) / bins_, ib = static_cast<int>(c) % bins_;
                    d.centers[c] = -h + (ia + 0.5) * w;
                    (void)ib;
                    d.measure[c] = w * w * std::abs(box_.chart.determinant());
                } else {
                    const double a0 = -h + c * w;
                    d.centers[c] = a0 + 0.5 * w;
                    d.measure[c] = arc(box_.plaques[i], a0, a0 + w);
                }
            }
            d.density.assign(cells_, 0.0);
            if (d.total > 0)
                for (std::size_t c = 0; c < cells_; ++c)
                    d.density[c] = static_cast<double>(d.counts[c]) / (static_cast<double>(d.total) * d.measure[c]);
            r.quotient.push_back(assigned_ ? static_cast<double>(d.total) / assigned_ : 0.0);
            r.densities.push_back(std::move(d));
        }
        return r;
    }

private:
    std::size_t bin(double a) const {
        const double h = 0.5 * box_.delta;
        int i = static_cast<int>(std::floor((a + h) / box_.delta * bins_));
        return static_cast<std::size_t>(std::clamp(i, 0, bins_ - 1));
    }
    double arc(const BoxPlaque& p, double a0, double a1) const {
        double len = 0.0;
        const int pieces = 8;
        const int d = static_cast<int>(box_.base.size());
        Vec prev(d);
        prev << a0, p.b_at(a0);
        for (int i = 1; i <= pieces; ++i) {
            const double a = a0 + (a1 - a0) * i / pieces;
            Vec cur(d);
            cur << a, p.b_at(a);
            len += (box_.chart * (cur - prev)).norm();
            prev = cur;
        }
        return len;
    }

    const FoliatedBox& box_;
    int bins_;
    std::size_t cells_ = 0;
    std::vector<std::vector<std::uint64_t>> counts_;
    std::uint64_t seen_ = 0, in_ball_ = 0, assigned_ = 0, discarded_ = 0;
};

inline ConditionalResult empirical_conditional_density(const FoliatedBox& box, const std::vector<Vec>& sample,
                                                       int bins = 32, std::uint64_t min_in_box = 1000) {
    ConditionalAccumulator acc(box, bins);
    for (const Vec& p : sample) acc.add(p);
    ConditionalResult r = acc.result();
    if (r.assigned < min_in_box) {
        std::ostringstream os;
        os << "empirical_conditional_density: only " << r.assigned << " sample points fall on the box plaques (need "
           << min_in_box << ")";
        throw Error(ErrorKind::precondition, os.str());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Comparison with the Jacobian-product prediction
// ---------------------------------------------------------------------------

struct RatioComparison {
    std::size_t plaque = 0;
    std::size_t bin = 0;
    std::uint64_t hits = 0;
    double empirical = 0.0;       // normalized empirical density at the bin
    double predicted = 0.0;       // normalized density from the Jacobian product
    double relative_error = 0.0;  // empirical / predicted - 1
    double sigma = 0.0;           // relative standard error of `empirical`
    double tail = 0.0;
};

struct LiuQianReport {
    std::vector<RatioComparison> rows;
    double worst_relative_error = 0.0;  // over bins, against the plaque normalization
    double worst_pair_error = 0.0;      // over bin pairs y, z of rho(y)/rho(z) / ratio(y, z) - 1
    double worst_tail = 0.0;
    double worst_ratio = 0.0;           // largest observed max/min density ratio on a plaque
    double worst_ratio_sigma = 0.0;     // its standard error
    int T = 0;
};

// Predicted densities are ratio(y, modal bin) renormalized over the bins with
// enough hits, so no single noisy bin serves as the reference.
inline LiuQianReport compare_with_jacobian_product(const FoliatedBox& box, const ConditionalResult& cr, int T,
                                                   const HolderBudget& budget, std::uint64_t min_hits = 100,
                                                   int threads = 1) {
    require(!box.full(), "compare_with_jacobian_product: only one-dimensional plaques are supported");
    LiuQianReport rep;
    rep.T = T;
    const BundleFrame& f = *box.frame;
    for (const auto& d : cr.densities) {
        const BoxPlaque& p = box.plaques[d.plaque];
        const std::size_t modal = d.modal_bin();
        if (d.counts[modal] < min_hits) continue;
        std::vector<std::size_t> bins;
        for (std::size_t b = 0; b < d.counts.size(); ++b)
            if (d.counts[b] >= min_hits) bins.push_back(b);
        if (bins.size() < 2) continue;
        const LeafOrbit anchor = leaf_orbit(f, p.source, box.e_block, make_vec({p.u_at(d.centers[modal])}), T);
        std::vector<DensityRatio> ratios(bins.size());
        parallel_for(bins.size(), threads, [&](std::size_t i) {
            const LeafOrbit y = leaf_orbit(f, p.source, box.e_block, make_vec({p.u_at(d.centers[bins[i]])}), T);
            ratios[i] = density_ratio(f.system(), y, anchor, T, budget);
        });
        double hits = 0.0, pred_mass = 0.0;
        for (std::size_t i = 0; i < bins.size(); ++i) {
            hits += static_cast<double>(d.counts[bins[i]]);
            pred_mass += ratios[i].ratio * d.measure[bins[i]];
        }
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        std::uint64_t n_lo = 0, n_hi = 0;
        double err_lo = std::numeric_limits<double>::infinity(), err_hi = -err_lo;
        for (std::size_t i = 0; i < bins.size(); ++i) {
            const std::size_t b = bins[i];
            RatioComparison rc;
            rc.plaque = d.plaque;
            rc.bin = b;
            rc.hits = d.counts[b];
            rc.empirical = static_cast<double>(d.counts[b]) / (hits * d.measure[b]);
            rc.predicted = ratios[i].ratio / pred_mass;
            rc.relative_error = rc.empirical / rc.predicted - 1.0;
            rc.sigma = 1.0 / std::sqrt(static_cast<double>(d.counts[b]));
            rc.tail = ratios[i].tail_bound;
            rep.worst_relative_error = std::max(rep.worst_relative_error, std::abs(rc.relative_error));
            rep.worst_tail = std::max(rep.worst_tail, rc.tail);
            err_lo = std::min(err_lo, 1.0 + rc.relative_error);
            err_hi = std::max(err_hi, 1.0 + rc.relative_error);
            if (rc.empirical < lo) {
                lo = rc.empirical;
                n_lo = rc.hits;
            }
            if (rc.empirical > hi) {
                hi = rc.empirical;
                n_hi = rc.hits;
            }
            rep.rows.push_back(rc);
        }
        rep.worst_pair_error = std::max({rep.worst_pair_error, err_hi / err_lo - 1.0, 1.0 - err_lo / err_hi});
        if (hi / lo > rep.worst_ratio) {
            rep.worst_ratio = hi / lo;
            rep.worst_ratio_sigma = rep.worst_ratio * std::sqrt(1.0 / n_lo + 1.0 / n_hi);
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Absolute continuity
// ---------------------------------------------------------------------------

struct AbsContinuityReport {
    bool passes = true;
    double worst_excess = -std::numeric_limits<double>::infinity();  // p - (C q + slack)
    double effective_constant = 0.0;  // max over cells of p / q
    std::size_t worst_plaque = 0;
    std::size_t worst_first_bin = 0;
    std::size_t worst_width = 0;
    std::size_t cells_tested = 0;
    double z = 0.0;  // one-sided normal quantile used for the slack
};

// Upper normal quantile: P(Z > z) = p.
inline double normal_upper_quantile(double p) {
    require(p > 0 && p < 0.5, "normal_upper_quantile: p must lie in (0, 1/2)");
    double lo = 0.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (0.5 * std::erfc(mid / std::sqrt(2.0)) > p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// For every plaque xi with enough mass and every dyadic run A of bins:
// mu(A x xi) / mu-hat(xi) <= C_test * Leb(A) / Leb(xi) + z * sd, with z the
// Bonferroni quantile for `family_level` over all cells tested.
inline AbsContinuityReport abs_continuity_check(const ConditionalResult& cr, double c_test, double family_level = 0.01,
                                                std::uint64_t min_plaque_hits = 100) {
    require(c_test > 0, "abs_continuity_check: C_test must be positive");
    require(family_level > 0 && family_level < 1, "abs_continuity_check: family_level must lie in (0,1)");
    AbsContinuityReport rep;
    std::size_t cells = 0;
    for (const auto& d : cr.densities) {
        if (d.total < min_plaque_hits) continue;
        for (std::size_t width = 1; width <= d.counts.size(); width *= 2) cells += d.counts.size() / width;
    }
    if (cells == 0) return rep;
    rep.z = normal_upper_quantile(std::min(0.25, family_level / static_cast<double>(cells)));
    for (const auto& d : cr.densities) {
        if (d.total < min_plaque_hits) continue;
        const double len = std::accumulate(d.measure.begin(), d.measure.end(), 0.0);
        const std::size_t nb = d.counts.size();
        for (std::size_t width = 1; width <= nb; width *= 2) {
            for (std::size_t first = 0; first + width <= nb; first += width) {
                std::uint64_t hits = 0;
                double leb = 0.0;
                for (std::size_t b = first; b < first + width; ++b) {
                    hits += d.counts[b];
                    leb += d.measure[b];
                }
                const double p = static_cast<double>(hits) / d.total;
                const double q = leb / len;
                const double bound = std::min(1.0, c_test * q);
                const double slack = rep.z * std::sqrt(bound * (1.0 - bound) / d.total);
                const double excess = p - (bound + slack);
                rep.cells_tested += 1;
                rep.effective_constant = std::max(rep.effective_constant, p / q);
                if (excess > rep.worst_excess) {
                    rep.worst_excess = excess;
                    rep.worst_plaque = d.plaque;
                    rep.worst_first_bin = first;
                    rep.worst_width = width;
                }
                if (excess > 0) rep.passes = false;
            }
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Gibbs level index
// ---------------------------------------------------------------------------

struct LevelReport {
    int level = 0;
    BundleRange range;
    std::vector<double> exponents;
    bool exponents_positive = false;
    bool box_tested = false;
    HolderBudget budget;
    double bound_L = 0.0;
    AbsContinuityReport abs_continuity;
    double discarded_fraction = 0.0;
    bool box_valid = false;  // discarded fraction below the limit
    std::size_t plaques = 0;
    bool passes = false;
    std::string note;
};

struct GibbsIndexReport {
    int index = -1;
    bool downward_closed = true;
    std::vector<LevelReport> levels;
};

struct LevelTestOptions {
    double delta = 0.16;
    double beta = 0.02;
    PesinBlockParams block{1, 0.05, 20};
    int bins = 32;
    double budget_radius = 0.02;
    int budget_depth = 40;
    std::size_t budget_points = 8;
    double max_discarded = 0.05;
    BoxOptions box;
};

// Lyapunov exponents of the cocycle restricted to E over [from, to).
inline std::vector<double> restricted_exponents(const BundleFrame& f, BundleRange e, std::size_t from, std::size_t to) {
    const int de = f.spec.dim_of(e);
    Mat q = Mat::Identity(de, de), r;
    std::vector<double> sums(de, 0.0);
    for (std::size_t k = from; k < to; ++k) {
        detail::signed_qr(f.restricted(k, e) * q, q, r);
        for (int i = 0; i < de; ++i) sums[i] += std::log(r(i, i));
    }
    for (double& s : sums) s /= static_cast<double>(to - from);
    std::sort(sums.begin(), sums.end(), std::greater<>());
    return sums;
}

// Replays the sample; the callback receives every sample point once.
using SampleStream = std::function<void(const std::function<void(const Vec&)>&)>;

inline std::size_t pick_block_base(const BundleFrame& f, BundleRange e, const PesinBlockParams& p,
                                   std::size_t history) {
    const std::size_t start = f.begin + std::max<std::size_t>(history, static_cast<std::size_t>(p.ell) * p.depth);
    for (std::size_t k = start + (f.end - start) / 2; k + 1 < f.end; ++k)
        if (in_block(f, k, p, e).member) return k;
    throw Error(ErrorKind::hypothesis_violation, "no frame point passes the Pesin block test");
}

inline LevelReport test_gibbs_level(const BundleFrame& f, int level, const SampleStream& sample,
                                    const LevelTestOptions& opt) {
    LevelReport rep;
    rep.level = level;
    rep.range = f.spec.level(level);
    const std::size_t from = f.begin, to = f.end - 1;
    rep.exponents = restricted_exponents(f, rep.range, from, to);
    rep.exponents_positive = rep.exponents.back() > 0.0;
    if (!rep.exponents_positive) {
        std::ostringstream os;
        os << "exponent along E " << rep.exponents.back() << " <= 0";
        rep.note = os.str();
        return rep;
    }
    const std::size_t history = std::max<std::size_t>(opt.box.history, opt.budget_depth + kShootingMargin + 1);
    const std::size_t k = pick_block_base(f, rep.range, opt.block, history);
    const FoliatedBox box = build_foliated_box(f, k, opt.block, rep.range, opt.delta, opt.beta, opt.box);
    std::vector<std::size_t> bases;
    for (const auto& p : box.plaques) bases.push_back(p.source);
    if (bases.size() > opt.budget_points) bases.resize(opt.budget_points);
    rep.budget = fit_holder_budget(f, rep.range, bases, opt.budget_radius, opt.budget_depth);
    rep.bound_L = density_bound(rep.budget);
    ConditionalAccumulator acc(box, opt.bins);
    sample([&](const Vec& p) { acc.add(p); });
    const ConditionalResult cr = acc.result();
    rep.box_tested = true;
    rep.plaques = box.plaques.size();
    rep.discarded_fraction = cr.discarded_fraction();
    rep.box_valid = rep.discarded_fraction < opt.max_discarded;
    rep.abs_continuity = abs_continuity_check(cr, rep.bound_L);
    rep.passes = rep.box_valid && rep.abs_continuity.passes;
    if (!rep.box_valid) {
        std::ostringstream os;
        os << "discarded fraction " << rep.discarded_fraction << " exceeds " << opt.max_discarded;
        rep.note = os.str();
    } else if (!rep.abs_continuity.passes) {
        rep.note = "conditional densities exceed the bound L";
    }
    return rep;
}

inline GibbsIndexReport gibbs_level_index(const BundleFrame& f, const SampleStream& sample,
                                          const LevelTestOptions& opt) {
    GibbsIndexReport rep;
    const int k = f.spec.center_count;
    bool failed = false;
    for (int i = 0; i <= k; ++i) {
        LevelReport lv = test_gibbs_level(f, i, sample, opt);
        if (lv.passes && failed) rep.downward_closed = false;
        if (!lv.passes) failed = true;
        rep.levels.push_back(std::move(lv));
    }
    rep.index = -1;
    for (const auto& lv : rep.levels)
        if (lv.passes) rep.index = lv.level;
    return rep;
}

// ---------------------------------------------------------------------------
// Entropy and the Pesin formula
// ---------------------------------------------------------------------------

struct EntropyEstimate {
    std::vector<double> mean_log_return;  // E log R_n, n = 1..n_max
    std::vector<double> increments;       // E log R_{n+1} - E log R_n
    std::vector<double> censored;         // fraction of starts without recurrence
    bool plateau = false;
    int plateau_first = 0;  // block lengths n..n+len of the plateau
    int plateau_length = 0;
    double entropy = 0.0;
};

// Recurrence-time estimator: R_n(i) is the first return time of the block
// s[i..i+n) among later positions; the entropy is the slope of E log R_n
// over the trailing plateau of near-constant increments.
inline EntropyEstimate recurrence_entropy(const std::vector<std::uint32_t>& symbols, int n_max, std::size_t starts,
                                          double plateau_tol = 0.05, int plateau_min = 3) {
    require(n_max >= 2, "recurrence_entropy: n_max must be >= 2");
    const std::size_t len = symbols.size();
    require(len > starts + static_cast<std::size_t>(n_max), "recurrence_entropy: sequence too short");
    EntropyEstimate est;
    std::vector<std::uint64_t> code(len, 0);
    constexpr std::uint64_t kMul = 0x9E3779B97F4A7C15ull;
    for (int n = 1; n <= n_max; ++n) {
        const std::size_t m = len - static_cast<std::size_t>(n) + 1;  // valid block starts
        for (std::size_t i = 0; i < m; ++i) code[i] = code[i] * kMul + splitmix64(symbols[i + n - 1] + 1);
        std::unordered_map<std::uint64_t, std::size_t> next;
        next.reserve(m / 4 + 16);
        double sum = 0.0;
        std::size_t counted = 0, missing = 0;
        std::vector<std::size_t> ret(starts, 0);
        for (std::size_t i = m; i-- > 0;) {
            auto it = next.find(code[i]);
            if (i < starts) {
                if (it == next.end())
                    missing += 1;
                else {
                    sum += std::log(static_cast<double>(it->second - i));
                    counted += 1;
                }
            }
            if (it == next.end())
                next.emplace(code[i], i);
            else
                it->second = i;
        }
        est.censored.push_back(static_cast<double>(missing) / starts);
        if (counted == 0 || est.censored.back() > 0.01) break;
        est.mean_log_return.push_back(sum / counted);
    }
    for (std::size_t i = 1; i < est.mean_log_return.size(); ++i)
        est.increments.push_back(est.mean_log_return[i] - est.mean_log_return[i - 1]);
    // longest run of trailing increments within plateau_tol of their mean
    int best_len = 0, best_first = 0;
    const int ni = static_cast<int>(est.increments.size());
    for (int first = ni - plateau_min; first >= 0; --first) {
        double mean = 0.0;
        for (int i = first; i < ni; ++i) mean += est.increments[i];
        mean /= (ni - first);
        bool flat = true;
        for (int i = first; i < ni && flat; ++i)
            flat = std::abs(est.increments[i] - mean) <= plateau_tol * std::max(std::abs(mean), 1e-3);
        if (flat) {
            best_len = ni - first;
            best_first = first;
        }
    }
    if (best_len >= plateau_min) {
        est.plateau = true;
        est.plateau_first = best_first + 1;
        est.plateau_length = best_len;
        double mean = 0.0;
        for (int i = best_first; i < best_first + best_len; ++i) mean += est.increments[i];
        est.entropy = std::max(0.0, mean / best_len);
    }
    return est;
}

inline std::vector<std::uint32_t> symbolize(const std::vector<Vec>& points, const Grid& g) {
    std::vector<std::uint32_t> s(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) s[i] = static_cast<std::uint32_t>(g.index(points[i]));
    return s;
}

struct PesinFormulaReport {
    double entropy_estimate = 0.0;
    double positive_exponent_sum = 0.0;
    double relative_gap = 0.0;
    bool conclusive = false;
    std::string verdict;  // "holds", "fails", "holds-vacuously", "inconclusive"
    EntropyEstimate details;
};

inline PesinFormulaReport pesin_formula_check(const std::vector<std::uint32_t>& symbols,
                                              const std::vector<double>& exponents, int n_max = 14,
                                              std::size_t starts = 100000, double gap_tolerance = 0.1) {
    PesinFormulaReport r;
    for (double l : exponents)
        if (l > 0) r.positive_exponent_sum += l;
    r.details = recurrence_entropy(symbols, n_max, std::min(starts, symbols.size() / 2));
    // Constant symbol streams recur immediately at every block length.
    const bool atomic = !r.details.mean_log_return.empty() &&
                        std::all_of(r.details.mean_log_return.begin(), r.details.mean_log_return.end(),
                                    [](double v) { return v == 0.0; });
    if (atomic) {
        r.details.plateau = true;
        r.details.entropy = 0.0;
    }
    r.conclusive = r.details.plateau;
    r.entropy_estimate = r.details.entropy;
    if (!r.conclusive) {
        r.verdict = "inconclusive";
        return r;
    }
    if (r.positive_exponent_sum == 0.0) {
        r.relative_gap = 0.0;
        r.verdict = r.entropy_estimate < 1e-3 ? "holds-vacuously" : "fails";
        return r;
    }
    r.relative_gap = std::abs(r.entropy_estimate - r.positive_exponent_sum) / r.positive_exponent_sum;
    r.verdict = r.relative_gap < gap_tolerance ? "holds" : "fails";
    return r;
}

// ---------------------------------------------------------------------------
// Holonomy of the strong-unstable foliation
// ---------------------------------------------------------------------------

// Asymptotic two-sample Kolmogorov-Smirnov p-value.
inline double ks_p_value(double d, std::size_t n1, std::size_t n2) {
    const double ne = static_cast<double>(n1) * n2 / (n1 + n2);
    const double lam = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
    if (lam < 1e-3) return 1.0;
    double sum = 0.0;
    for (int k = 1; k <= 100; ++k) sum += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lam * lam);
    return std::clamp(sum, 0.0, 1.0);
}

inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] <= x) ++i;
        while (j < b.size() && b[j] <= x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
    }
    return d;
}

struct HolonomyReport {
    std::size_t n_source = 0;
    std::size_t n_target = 0;
    double ks_statistic = 0.0;
    double p_value = 0.0;
    bool passes = false;  // not rejected at the 1% level
};

struct HolonomyOptions {
    double theta1 = 0.3;
    double gap = 0.02;        // distance between the transversals theta = theta1, theta1 + gap
    double slab = 0.004;      // half-width of the sampling slabs around each transversal
    double t_center = 0.5;
    double t_window = 0.3;    // compare crossings with |t - t_center| <= t_window / 2
    int plaque_depth = 30;
    std::size_t history = 200;
    double level = 0.01;
};

// Along a 1-dimensional E^u curve through x_k, the t-coordinate where it
// meets theta = target (searched in the plaque parameter).
inline bool crossing_at(const LocalManifold& lm, double theta_target, double& t_out) {
    const std::size_t n = lm.nodes.size();
    auto dtheta = [&](std::size_t i) { return wrap_half(lm.point(lm.nodes[i])(0) - theta_target); };
    for (std::size_t i = 1; i < n; ++i) {
        const double d0 = dtheta(i - 1), d1 = dtheta(i);
        if ((d0 <= 0 && d1 >= 0) || (d0 >= 0 && d1 <= 0)) {
            if (std::abs(d1 - d0) > 0.25) continue;  // wrap jump
            const double w = d1 == d0 ? 0.0 : -d0 / (d1 - d0);
            const double u = lm.nodes[i - 1] + w * (lm.nodes[i] - lm.nodes[i - 1]);
            t_out = lm.point(u)(1);
            return true;
        }
    }
    return false;
}

// Sample points near theta1 are slid along their strong-unstable curves to
// theta1 + gap; their crossings are compared with those of sample points
// near theta1 + gap by a two-sample KS test.
inline HolonomyReport holonomy_ks_test(const BundleFrame& f, BundleRange strong, const HolonomyOptions& opt) {
    require(f.system().dim == 2 && f.system().periodic[0] && f.system().periodic[1],
            "holonomy_ks_test: needs a skew product on the 2-torus");
    require(f.spec.dim_of(strong) == 1, "holonomy_ks_test: strong-unstable bundle must be one-dimensional");
    const double theta2 = wrap_unit(opt.theta1 + opt.gap);
    std::vector<double> source, target;
    const double radius = std::min(0.45, 3.0 * (opt.gap + opt.slab));
    const std::size_t start = f.begin + std::max<std::size_t>(opt.history, opt.plaque_depth);
    for (std::size_t k = start; k + 1 < f.end; ++k) {
        const Vec& x = f.point(k);
        const bool near1 = std::abs(wrap_half(x(0) - opt.theta1)) <= opt.slab;
        const bool near2 = std::abs(wrap_half(x(0) - theta2)) <= opt.slab;
        if (!near1 && !near2) continue;
        if (std::abs(wrap_half(x(1) - opt.t_center)) > 0.5 * opt.t_window + 0.1) continue;
        const LocalManifold lm = unstable_plaque(f, k, strong, radius, opt.plaque_depth);
        double t = 0.0;
        if (!crossing_at(lm, theta2, t)) continue;
        if (std::abs(wrap_half(t - opt.t_center)) > 0.5 * opt.t_window) continue;
        (near1 ? source : target).push_back(wrap_half(t - opt.t_center));
    }
    HolonomyReport r;
    r.n_source = source.size();
    r.n_target = target.size();
    require(r.n_source >= 50 && r.n_target >= 50, "holonomy_ks_test: too few sample points near the transversals");
    r.ks_statistic = ks_statistic(source, target);
    r.p_value = ks_p_value(r.ks_statistic, r.n_source, r.n_target);
    r.passes = r.p_value >= opt.level;
    return r;
}

}  // namespace srb
