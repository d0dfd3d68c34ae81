#pragma once

// Pesin blocks over finite backward orbit pieces, block masses of samples,
// the search for the block step ell, and block masses along noise schedules.

#include "srblab/systems.hpp"

#include <sstream>
#include <string>
#include <vector>

namespace srb {

struct PesinBlockParams {
    int ell = 1;
    double alpha = 0.1;
    int depth = 40;

    void validate() const {
        require(ell >= 1, "PesinBlockParams: ell must be >= 1");
        require(alpha > 0.0, "PesinBlockParams: alpha must be > 0");
        require(depth >= 1, "PesinBlockParams: depth must be >= 1");
    }
};

struct BlockVerdict {
    bool member = false;
    double margin = 0.0;            // max_m (L_m + alpha*ell*m); member iff <= 0
    std::vector<double> log_norms;  // log ||Df^{-ell}|_{E(f^{-i ell} x)}||, i < depth
};

// log ||Df^{-ell}|_{E(x_j)}|| where x_j = f^{ell}(x_{j-ell}); the inverse
// restricted to E is the inverse of the restricted cocycle from j - ell.
inline double log_backward_norm(const BundleFrame& f, std::size_t j, int ell, BundleRange e) {
    const int de = f.spec.dim_of(e);
    Mat a = Mat::Identity(de, de);
    for (std::size_t s = j - ell; s < j; ++s) a = f.restricted(s, e) * a;
    return -std::log(min_singular(a));
}

inline BlockVerdict in_block(const BundleFrame& f, std::size_t k, const PesinBlockParams& p, BundleRange e) {
    p.validate();
    require(f.spec.valid(e), "in_block: invalid bundle range");
    const std::size_t back = static_cast<std::size_t>(p.ell) * p.depth;
    if (k < f.begin + back || !f.has(k)) {
        std::ostringstream os;
        os << "in_block: backward orbit of index " << k << " leaves the frame window (needs " << back
           << " frames before it, window starts at " << f.begin << ")";
        throw Error(ErrorKind::precondition, os.str());
    }
    BlockVerdict v;
    v.margin = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (int i = 0; i < p.depth; ++i) {
        const double l = log_backward_norm(f, k - static_cast<std::size_t>(i) * p.ell, p.ell, e);
        v.log_norms.push_back(l);
        sum += l;
        v.margin = std::max(v.margin, sum + p.alpha * p.ell * (i + 1));
    }
    v.member = v.margin <= 0.0;
    return v;
}

struct BlockReport {
    std::size_t tested_points = 0;
    double member_fraction = 0.0;
    double worst_margin = 0.0;
    std::vector<char> verdicts;
    std::vector<double> margins;
    // Largest angle by which the frames fail to be invariant on the window;
    // norms carry a relative error of the same order.
    double frame_angle_tolerance = 0.0;

    double recount() const {
        std::size_t m = 0;
        for (char v : verdicts) m += v ? 1 : 0;
        return tested_points ? static_cast<double>(m) / tested_points : 0.0;
    }
};

inline BlockReport block_mass(const BundleFrame& f, const std::vector<std::size_t>& sample, const PesinBlockParams& p,
                              BundleRange e, int threads = 1) {
    require(!sample.empty(), "block_mass: empty sample");
    BlockReport r;
    r.tested_points = sample.size();
    r.verdicts.resize(sample.size());
    r.margins.resize(sample.size());
    parallel_for(sample.size(), threads, [&](std::size_t i) {
        const BlockVerdict v = in_block(f, sample[i], p, e);
        r.verdicts[i] = v.member;
        r.margins[i] = v.margin;
    });
    r.worst_margin = *std::max_element(r.margins.begin(), r.margins.end());
    for (std::size_t k : sample) {
        const Mat pushed = orthonormalize(f.traj->jacobian(k - 1) * f.block(k - 1, e));
        r.frame_angle_tolerance = std::max(r.frame_angle_tolerance, subspace_angle(pushed, f.block(k, e)));
    }
    r.member_fraction = r.recount();
    return r;
}

// Indices usable for blocks of step ell and depth n: evenly spaced over the
// part of the frame window with enough history.
inline std::vector<std::size_t> block_sample(const BundleFrame& f, std::size_t count, std::size_t history) {
    require(f.size() > history + 1, "block_sample: frame window shorter than the required history");
    const std::size_t lo = f.begin + history, hi = f.end - 1;
    std::vector<std::size_t> out;
    const std::size_t span = hi - lo;
    count = std::min(count, span);
    for (std::size_t i = 0; i < count; ++i) out.push_back(lo + (span * i) / count);
    return out;
}

// Smallest Lyapunov exponent of the cocycle restricted to E over [from, to).
inline double restricted_min_exponent(const BundleFrame& f, BundleRange e, std::size_t from, std::size_t to) {
    const int de = f.spec.dim_of(e);
    Mat q = Mat::Identity(de, de), r;
    std::vector<double> sums(de, 0.0);
    for (std::size_t k = from; k < to; ++k) {
        detail::signed_qr(f.restricted(k, e) * q, q, r);
        for (int i = 0; i < de; ++i) sums[i] += std::log(r(i, i));
    }
    double lo = std::numeric_limits<double>::infinity();
    for (double s : sums) lo = std::min(lo, s / static_cast<double>(to - from));
    return lo;
}

struct FindEllResult {
    bool found = false;
    int ell = 0;
    double empirical_exponent = 0.0;
    std::vector<double> masses;  // depth-1 block mass for ell = 1, 2, ...
};

inline FindEllResult find_ell(const BundleFrame& f, const std::vector<std::size_t>& sample, double delta, double alpha,
                              BundleRange e, int ell_max, int threads = 1) {
    require(!sample.empty(), "find_ell: empty sample");
    require(delta > 0 && delta < 1, "find_ell: delta must lie in (0,1)");
    require(alpha > 0, "find_ell: alpha must be > 0");
    require(ell_max >= 1, "find_ell: ell_max must be >= 1");
    FindEllResult res;
    const auto [lo, hi] = std::minmax_element(sample.begin(), sample.end());
    const std::size_t from = std::max(f.begin, *lo >= static_cast<std::size_t>(ell_max) ? *lo - ell_max : 0);
    res.empirical_exponent = restricted_min_exponent(f, e, from, std::min(*hi + 1, f.end - 1));
    if (!(res.empirical_exponent > alpha)) {
        std::ostringstream os;
        os << "find_ell: empirical exponent along E (" << res.empirical_exponent << ") does not exceed alpha = " << alpha;
        throw Error(ErrorKind::hypothesis_violation, os.str());
    }
    for (int ell = 1; ell <= ell_max; ++ell) {
        const BlockReport r = block_mass(f, sample, PesinBlockParams{ell, alpha, 1}, e, threads);
        res.masses.push_back(r.member_fraction);
        if (r.member_fraction > 1.0 - delta) {
            res.found = true;
            res.ell = ell;
            return res;
        }
    }
    return res;
}

struct UniformBlockRow {
    double noise_level = 0.0;
    int ell = 0;
    double alpha = 0.0;
    int depth = 0;
    double member_fraction = 0.0;
    double worst_margin = 0.0;
};

struct PerturbedSample {
    double noise_level = 0.0;
    const BundleFrame* frame = nullptr;
    std::vector<std::size_t> indices;
};

inline std::vector<UniformBlockRow> uniform_block_check(const std::vector<PerturbedSample>& samples,
                                                        const PesinBlockParams& p, BundleRange e, int threads = 1) {
    std::vector<UniformBlockRow> out;
    for (const auto& s : samples) {
        require(s.frame != nullptr, "uniform_block_check: sample without frames");
        const BlockReport r = block_mass(*s.frame, s.indices, p, e, threads);
        out.push_back({s.noise_level, p.ell, p.alpha, p.depth, r.member_fraction, r.worst_margin});
    }
    return out;
}

inline std::string to_csv(const std::vector<UniformBlockRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "noise_level,ell,alpha,depth,member_fraction,worst_margin\n";
    for (const auto& r : rows)
        os << r.noise_level << ',' << r.ell << ',' << r.alpha << ',' << r.depth << ',' << r.member_fraction << ','
           << r.worst_margin << '\n';
    return os.str();
}

}  // namespace srb
