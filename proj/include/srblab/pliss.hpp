#pragma once

// Pliss-type time extraction over finite real sequences.
//
// pliss_set() finds the starts j from which every forward partial sum stays
// below the linear bound n*gamma2 inside the window, verify_pliss_like()
// checks the density transfer from a set of "good" indices L to that set,
// and classic_pliss_times() returns the record indices of the classical
// lemma for expanding sequences.

#include "srblab/core.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

namespace srb::pliss {

struct RealSequence {
    std::vector<double> values;
    double bound = 1.0;  // every |value| <= bound

    RealSequence() = default;
    RealSequence(std::vector<double> v, double c) : values(std::move(v)), bound(c) { validate(); }

    void validate() const {
        require(!values.empty(), "RealSequence: empty sequence");
        require(bound > 0.0, "RealSequence: bound must be positive");
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!(std::abs(values[i]) <= bound)) {
                std::ostringstream os;
                os << "RealSequence: |a[" << i << "]| = " << std::abs(values[i]) << " exceeds bound " << bound;
                throw Error(ErrorKind::precondition, os.str());
            }
        }
    }

    std::size_t size() const { return values.size(); }
};

struct PlissParams {
    double gamma1 = -1.0;
    double gamma2 = -0.5;
    double C = 2.0;
    double epsilon = 0.1;

    void validate() const {
        require(gamma1 < gamma2, "PlissParams: need gamma1 < gamma2");
        require(std::max(0.0, gamma2) < C, "PlissParams: need max{0, gamma2} < C");
        require(epsilon > 0.0 && epsilon < 1.0, "PlissParams: epsilon must lie in (0,1)");
    }
};

struct IndexSet {
    std::vector<std::size_t> indices;  // sorted, unique
    std::size_t horizon = 0;           // window length; every index < horizon

    std::size_t size() const { return indices.size(); }
    bool contains(std::size_t i) const { return std::binary_search(indices.begin(), indices.end(), i); }
    double density() const { return horizon == 0 ? 0.0 : static_cast<double>(indices.size()) / horizon; }
    bool subset_of(const IndexSet& other) const {
        return std::includes(other.indices.begin(), other.indices.end(), indices.begin(), indices.end());
    }
    bool operator==(const IndexSet& o) const { return horizon == o.horizon && indices == o.indices; }
};

// Half of the three-term minimum; any positive value strictly below the
// minimum is admissible, the factor 1/2 makes the choice deterministic.
inline double rho_threshold(const PlissParams& p) {
    p.validate();
    const double gap = p.gamma2 - p.gamma1;
    const double t1 = 1.0;
    const double t2 = gap / (2.0 * (2.0 * p.C - p.gamma1));
    const double t3 = gap / (p.C - p.gamma1) * p.epsilon;
    return 0.5 * std::min({t1, t2, t3});
}

// j is kept iff sum_{i<n} a[j+i] <= n*gamma2 for every n with j+n <= N.
// With T[k] = S[k] - k*gamma2 this is T[j] >= max_{j<k<=N} T[k], so one
// suffix-maximum sweep suffices.
inline IndexSet pliss_set(const RealSequence& seq, double gamma2) {
    const std::size_t n = seq.size();
    require(n > 0, "pliss_set: empty sequence");
    std::vector<double> t(n + 1);
    double s = 0.0;
    t[0] = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        s += seq.values[k];
        t[k + 1] = s - static_cast<double>(k + 1) * gamma2;
    }
    IndexSet out;
    out.horizon = n;
    double suffix_max = -std::numeric_limits<double>::infinity();
    std::vector<std::size_t> rev;
    for (std::size_t j = n; j-- > 0;) {
        suffix_max = std::max(suffix_max, t[j + 1]);
        if (t[j] >= suffix_max) rev.push_back(j);
    }
    out.indices.assign(rev.rbegin(), rev.rend());
    return out;
}

struct PlissLikeReport {
    double rho_used = 0.0;
    double density_of_L = 0.0;
    IndexSet J;
    double density_of_J = 0.0;
    bool hypothesis_met = false;   // density(L) > 1 - rho
    bool conclusion_holds = false; // density(J) > 1 - epsilon
};

inline PlissLikeReport verify_pliss_like(const RealSequence& seq, const IndexSet& L, const PlissParams& params) {
    params.validate();
    seq.validate();
    require(seq.bound <= params.C, "verify_pliss_like: sequence bound exceeds C");
    require(L.horizon == seq.size(), "verify_pliss_like: L horizon differs from the sequence length");
    for (std::size_t i : L.indices) {
        if (i >= seq.size()) {
            std::ostringstream os;
            os << "verify_pliss_like: index " << i << " in L is out of range (N = " << seq.size() << ")";
            throw Error(ErrorKind::precondition, os.str());
        }
        if (seq.values[i] > params.gamma1) {
            std::ostringstream os;
            os << "verify_pliss_like: a[" << i << "] = " << seq.values[i] << " > gamma1 = " << params.gamma1
               << " on L";
            throw Error(ErrorKind::hypothesis_violation, os.str());
        }
    }
    PlissLikeReport r;
    r.rho_used = rho_threshold(params);
    r.density_of_L = L.density();
    r.J = pliss_set(seq, params.gamma2);
    r.density_of_J = r.J.density();
    r.hypothesis_met = r.density_of_L > 1.0 - r.rho_used;
    r.conclusion_holds = r.density_of_J > 1.0 - params.epsilon;
    return r;
}

// Guaranteed fraction of classical Pliss times.
inline double pliss_zeta(double c1, double c2, double C) { return (c2 - c1) / (C - c1); }

// Expansion orientation: returns every n in [1, N] with
// sum_{j=m}^{n-1} a[j] >= c1*(n-m) for all 0 <= m < n.
inline IndexSet classic_pliss_times(const RealSequence& seq, double c1, double c2) {
    seq.validate();
    require(c1 < c2 && c2 <= seq.bound, "classic_pliss_times: need c1 < c2 <= C");
    const std::size_t n = seq.size();
    double total = 0.0;
    for (double a : seq.values) total += a;
    if (total < c2 * static_cast<double>(n)) {
        std::ostringstream os;
        os << "classic_pliss_times: average " << total / n << " below c2 = " << c2;
        throw Error(ErrorKind::hypothesis_violation, os.str());
    }
    IndexSet out;
    out.horizon = n + 1;
    double u = 0.0;
    double running_max = 0.0;  // max over m < n of U[m], U[0] = 0
    double s = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
        s += seq.values[k - 1];
        u = s - static_cast<double>(k) * c1;
        if (u >= running_max) out.indices.push_back(k);
        running_max = std::max(running_max, u);
    }
    return out;
}

// Contraction orientation adapter: sign-flips the sequence so that
// sum_{j=m}^{n-1} a[j] <= c1*(n-m) style bounds become expansion bounds.
inline RealSequence negated(const RealSequence& seq) {
    RealSequence out = seq;
    for (double& v : out.values) v = -v;
    return out;
}

// ---------------------------------------------------------------------------
// Randomized campaign
// ---------------------------------------------------------------------------

struct CampaignTrial {
    std::uint64_t trial = 0;
    double density_of_L = 0.0;
    double density_of_J = 0.0;
    bool hypothesis_met = false;
    bool conclusion_holds = false;
};

// Quantization step for generated values: every value is a multiple of
// C / 2^16, so all partial sums are exact in double precision.
inline double quantize(double v, double c) {
    const double step = c / 65536.0;
    return std::round(v / step) * step;
}

// Builds one conforming input: L has exactly ceil(rho*N) - 1 holes, a <= gamma1
// on L, and the holes carry adversarially large values in [-C, C].
inline std::pair<RealSequence, IndexSet> random_conforming_input(const PlissParams& p, std::size_t n, Rng& rng) {
    const double rho = rho_threshold(p);
    const std::size_t holes = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(n))) - 1;
    std::vector<char> in_l(n, 1);
    std::size_t placed = 0;
    while (placed < holes) {
        const std::size_t i = rng.below(n);
        if (in_l[i]) {
            in_l[i] = 0;
            ++placed;
        }
    }
    std::vector<double> values(n);
    IndexSet L;
    L.horizon = n;
    const double lo = std::max(-p.C, p.gamma1 - 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (in_l[i]) {
            // half the good indices sit exactly on gamma1, the rest below it
            double v = rng.uniform() < 0.5 ? p.gamma1 : quantize(rng.uniform(lo, p.gamma1), p.C);
            v = std::min(v, p.gamma1);
            values[i] = v;
            L.indices.push_back(i);
        } else {
            values[i] = rng.uniform() < 0.5 ? p.C : quantize(rng.uniform(-p.C, p.C), p.C);
        }
    }
    return {RealSequence(std::move(values), p.C), std::move(L)};
}

inline std::vector<CampaignTrial> pliss_campaign(const PlissParams& p, std::size_t n, std::size_t trials,
                                                 std::uint64_t seed, int threads = 1) {
    p.validate();
    require(n >= 1, "pliss_campaign: N must be positive");
    std::vector<CampaignTrial> out(trials);
    parallel_for(trials, threads, [&](std::size_t t) {
        Rng rng(seed, t);
        auto [seq, L] = random_conforming_input(p, n, rng);
        const auto rep = verify_pliss_like(seq, L, p);
        out[t] = {t, rep.density_of_L, rep.density_of_J, rep.hypothesis_met, rep.conclusion_holds};
    });
    return out;
}

}  // namespace srb::pliss
