#pragma once

// Random perturbations built from flows of spanning vector fields, skew
// orbits along realized noise paths, grid measures, Ulam and Monte Carlo
// stationary measures, zero-noise limits and the lifted-measure check.

#include "srblab/systems.hpp"

#include <nlohmann/json.hpp>

#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace srb {

// ---------------------------------------------------------------------------
// Noise kernels and random systems
// ---------------------------------------------------------------------------

struct NoiseKernel {
    int dim = 0;
    double amplitude = 0.0;  // omega uniform on [-amplitude, amplitude]^dim

    void validate() const {
        require(dim >= 1, "NoiseKernel: dim must be >= 1");
        require(amplitude >= 0.0 && std::isfinite(amplitude), "NoiseKernel: amplitude must be finite and >= 0");
    }
    Vec sample(Rng& rng) const {
        Vec w(dim);
        for (int i = 0; i < dim; ++i) w(i) = amplitude > 0 ? rng.uniform(-amplitude, amplitude) : 0.0;
        return w;
    }
    bool admits(const Vec& omega) const {
        return omega.size() == dim && omega.cwiseAbs().maxCoeff() <= amplitude;
    }
    // supp(this) is contained in supp(other)
    bool nested_in(const NoiseKernel& other) const { return dim == other.dim && amplitude <= other.amplitude; }
};

// Schedules must be strictly decreasing so that the kernels are nested.
inline void validate_schedule(const std::vector<double>& amplitudes) {
    for (std::size_t i = 0; i < amplitudes.size(); ++i) {
        require(amplitudes[i] > 0, "noise schedule: amplitudes must be positive");
        if (i > 0) require(amplitudes[i] < amplitudes[i - 1], "noise schedule: amplitudes must strictly decrease");
    }
}

inline std::vector<double> geometric_schedule(double first, double factor = 0.5, int levels = 7) {
    std::vector<double> out;
    double a = first;
    for (int i = 0; i < levels; ++i, a *= factor) out.push_back(a);
    return out;
}

struct VectorField {
    std::function<Vec(const Vec&)> value;
    std::function<Mat(const Vec&)> derivative;
    bool constant = false;  // flows are exact translations
};

inline VectorField coordinate_field(int dim, int axis) {
    VectorField v;
    Vec e = Vec::Zero(dim);
    e(axis) = 1.0;
    v.value = [e](const Vec&) { return e; };
    v.derivative = [dim](const Vec&) { return Mat::Zero(dim, dim); };
    v.constant = true;
    return v;
}

// f_omega = phi^1_{omega_1} o ... o phi^d_{omega_d} o f, phi^i the flow of field i.
class RandomSystem final : public MapFamily {
public:
    explicit RandomSystem(SmoothSystem base) : base_(std::move(base)) {
        for (int i = 0; i < base_.dim; ++i) fields_.push_back(coordinate_field(base_.dim, i));
        translations_ = true;
    }

    RandomSystem(SmoothSystem base, std::vector<VectorField> fields, double max_amplitude)
        : base_(std::move(base)), fields_(std::move(fields)), step_(max_amplitude / 8.0) {
        require(!fields_.empty(), "RandomSystem: no perturbation fields");
        require(max_amplitude > 0, "RandomSystem: integration needs a positive amplitude scale");
        translations_ = std::all_of(fields_.begin(), fields_.end(), [](const VectorField& f) { return f.constant; });
        check_spanning();
    }

    const SmoothSystem& system() const override { return base_; }
    const SmoothSystem& base() const { return base_; }
    int noise_dim() const override { return static_cast<int>(fields_.size()); }
    bool translation_fields() const { return translations_; }

    // Field matrix has full rank on a deterministic sample of the box.
    void check_spanning(int samples = 64) const {
        Rng rng(0xF1E1D5);
        for (int s = 0; s < samples; ++s) {
            Vec p(base_.dim);
            for (int i = 0; i < base_.dim; ++i)
                p(i) = rng.uniform(base_.attractor_box.lo(i), base_.attractor_box.hi(i));
            Mat m(base_.dim, static_cast<Eigen::Index>(fields_.size()));
            for (std::size_t j = 0; j < fields_.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = fields_[j].value(p);
            Eigen::JacobiSVD<Mat> svd(m);
            const auto& sv = svd.singularValues();
            if (sv.size() < base_.dim || !(sv(base_.dim - 1) > 1e-9 * std::max(1.0, sv(0))))
                throw Error(ErrorKind::precondition, "RandomSystem: perturbation fields do not span the tangent space");
        }
    }

    Vec flow(int field, double t, const Vec& p) const { return flow_with_jacobian(field, t, p, nullptr); }

    Vec apply(const Vec& omega, const Vec& x) const override {
        Vec y = base_.forward(x);
        if (translations_) {
            for (int i = 0; i < noise_dim(); ++i) y += fields_[i].value(y) * omega(i);
            return base_.wrap(y);
        }
        for (int i = noise_dim(); i-- > 0;) y = flow(i, omega(i), y);
        return base_.wrap(y);
    }

    Mat jacobian(const Vec& omega, const Vec& x) const override {
        Mat d = base_.derivative(x);
        if (translations_) return d;
        Vec y = base_.forward(x);
        for (int i = noise_dim(); i-- > 0;) {
            Mat m;
            y = flow_with_jacobian(i, omega(i), y, &m);
            d = m * d;
        }
        return d;
    }

    Vec inverse_near(const Vec& omega, const Vec& y, const Vec& hint) const override {
        Vec z = y;
        if (translations_) {
            for (int i = 0; i < noise_dim(); ++i) z -= fields_[i].value(z) * omega(i);
        } else {
            for (int i = 0; i < noise_dim(); ++i) z = flow(i, -omega(i), z);
        }
        return base_.inverse_near(base_.wrap(z), hint);
    }

private:
    // Fixed-step RK4 on the flow and its variational equation.
    Vec flow_with_jacobian(int field, double t, const Vec& p, Mat* jac) const {
        const VectorField& v = fields_[field];
        const int d = base_.dim;
        if (v.constant) {
            if (jac) *jac = Mat::Identity(d, d);
            return p + v.value(p) * t;
        }
        if (t == 0.0) {
            if (jac) *jac = Mat::Identity(d, d);
            return p;
        }
        const int n = std::max(1, static_cast<int>(std::ceil(std::abs(t) / step_ - 1e-12)));
        const double h = t / n;
        Vec x = p;
        Mat m = Mat::Identity(d, d);
        for (int i = 0; i < n; ++i) {
            const Vec k1 = v.value(x);
            const Vec k2 = v.value(x + 0.5 * h * k1);
            const Vec k3 = v.value(x + 0.5 * h * k2);
            const Vec k4 = v.value(x + h * k3);
            if (jac) {
                const Mat a1 = v.derivative(x) * m;
                const Mat a2 = v.derivative(x + 0.5 * h * k1) * (m + 0.5 * h * a1);
                const Mat a3 = v.derivative(x + 0.5 * h * k2) * (m + 0.5 * h * a2);
                const Mat a4 = v.derivative(x + h * k3) * (m + h * a3);
                m += h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4);
            }
            x += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        if (jac) *jac = m;
        return x;
    }

    SmoothSystem base_;
    std::vector<VectorField> fields_;
    double step_ = 0.0;
    bool translations_ = false;
};

inline std::function<Vec(const Vec&)> random_map(std::shared_ptr<const RandomSystem> rs, const NoiseKernel& kernel,
                                                 const Vec& omega) {
    require(kernel.admits(omega), "random_map: omega outside the kernel support");
    return [rs, omega](const Vec& x) { return rs->apply(omega, x); };
}

// ---------------------------------------------------------------------------
// Skew orbits
// ---------------------------------------------------------------------------

using SkewOrbit = Trajectory;

constexpr std::uint64_t kKernelStream = 1;
constexpr double kEscapeMargin = 0.05;  // fraction of the box side

inline void check_inside(const SmoothSystem& sys, const Vec& x, std::size_t step, double amplitude) {
    if (!sys.attractor_box.contains(x, kEscapeMargin) || !x.allFinite()) {
        std::ostringstream os;
        os << "orbit escaped the attracting neighbourhood at step " << step << " (noise amplitude " << amplitude
           << " exceeds the attracting margin of " << sys.name << ")";
        throw Error(ErrorKind::hypothesis_violation, os.str());
    }
}

// Visits (k, x_k, omega_k, dither_k, x_{k+1}) for k in [0, n_steps) without
// storing the orbit. The streams match sample_skew_orbit for the same seed.
template <class Visit>
void stream_skew_orbit(const MapFamily& fam, const NoiseKernel& kernel, const Vec& x0, std::size_t n_steps,
                       std::uint64_t seed, Visit&& visit) {
    const SmoothSystem& sys = fam.system();
    kernel.validate();
    require(kernel.dim == fam.noise_dim(), "skew orbit: kernel dimension differs from the number of fields");
    require(x0.size() == sys.dim, "skew orbit: x0 has the wrong dimension");
    require(sys.attractor_box.contains(x0), "skew orbit: x0 outside the attractor box");
    Rng noise_rng(seed, kKernelStream), dither_rng(seed, kDitherStream);
    Vec x = sys.wrap(x0);
    for (std::size_t k = 0; k < n_steps; ++k) {
        const Vec w = kernel.sample(noise_rng);
        const Vec dz = dither_vector(sys, dither_rng);
        const Vec y = sys.wrap(fam.apply(w, x) + dz);
        check_inside(sys, y, k + 1, kernel.amplitude);
        visit(k, x, w, dz, y);
        x = y;
    }
}

inline SkewOrbit sample_skew_orbit(std::shared_ptr<const MapFamily> fam, const NoiseKernel& kernel, const Vec& x0,
                                   std::size_t n_steps, std::uint64_t seed, std::size_t origin = 0) {
    require(origin <= n_steps, "sample_skew_orbit: origin beyond the orbit");
    SkewOrbit t;
    t.family = fam;
    t.origin = origin;
    t.points.reserve(n_steps + 1);
    t.noise.reserve(n_steps);
    t.dither.reserve(n_steps);
    t.points.push_back(fam->system().wrap(x0));
    stream_skew_orbit(*fam, kernel, x0, n_steps, seed, [&](std::size_t, const Vec&, const Vec& w, const Vec& dz,
                                                           const Vec& y) {
        t.noise.push_back(w);
        t.dither.push_back(dz);
        t.points.push_back(y);
    });
    return t;
}

// ---------------------------------------------------------------------------
// Grids and empirical measures
// ---------------------------------------------------------------------------

struct Grid {
    Vec lo, hi;
    std::vector<int> res;

    static Grid over(const Box& box, int per_axis) {
        require(per_axis >= 1, "Grid: resolution must be >= 1");
        return {box.lo, box.hi, std::vector<int>(static_cast<std::size_t>(box.lo.size()), per_axis)};
    }

    int dim() const { return static_cast<int>(res.size()); }
    std::size_t cells() const {
        std::size_t n = 1;
        for (int r : res) n *= static_cast<std::size_t>(r);
        return n;
    }
    double cell_volume() const {
        double v = 1.0;
        for (int i = 0; i < dim(); ++i) v *= (hi(i) - lo(i)) / res[i];
        return v;
    }
    // Points outside are clamped into the boundary cells.
    std::size_t index(const Vec& p) const {
        std::size_t idx = 0;
        for (int i = 0; i < dim(); ++i) {
            int c = static_cast<int>(std::floor((p(i) - lo(i)) / (hi(i) - lo(i)) * res[i]));
            c = std::clamp(c, 0, res[i] - 1);
            idx = idx * static_cast<std::size_t>(res[i]) + static_cast<std::size_t>(c);
        }
        return idx;
    }
    std::vector<int> coords(std::size_t idx) const {
        std::vector<int> c(static_cast<std::size_t>(dim()));
        for (int i = dim(); i-- > 0;) {
            c[static_cast<std::size_t>(i)] = static_cast<int>(idx % static_cast<std::size_t>(res[i]));
            idx /= static_cast<std::size_t>(res[i]);
        }
        return c;
    }
    Vec cell_lo(std::size_t idx) const {
        const auto c = coords(idx);
        Vec p(dim());
        for (int i = 0; i < dim(); ++i) p(i) = lo(i) + (hi(i) - lo(i)) * c[i] / res[i];
        return p;
    }
    Vec cell_size() const {
        Vec s(dim());
        for (int i = 0; i < dim(); ++i) s(i) = (hi(i) - lo(i)) / res[i];
        return s;
    }
    Vec center(std::size_t idx) const { return cell_lo(idx) + 0.5 * cell_size(); }

    bool same_as(const Grid& o) const { return res == o.res && lo == o.lo && hi == o.hi; }
    // every axis of `coarse` divides this grid's axis and the boxes agree
    bool refines(const Grid& coarse) const {
        if (coarse.dim() != dim() || !(lo == coarse.lo) || !(hi == coarse.hi)) return false;
        for (int i = 0; i < dim(); ++i)
            if (res[i] % coarse.res[i] != 0) return false;
        return true;
    }
};

struct EmpiricalMeasure {
    Grid grid;
    std::vector<double> weights;
    std::uint64_t sample_count = 0;

    static EmpiricalMeasure from_counts(const Grid& g, const std::vector<std::uint64_t>& counts) {
        EmpiricalMeasure m;
        m.grid = g;
        m.weights.assign(counts.size(), 0.0);
        const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
        require(total > 0, "EmpiricalMeasure: no samples");
        for (std::size_t i = 0; i < counts.size(); ++i) m.weights[i] = static_cast<double>(counts[i]) / total;
        m.sample_count = total;
        return m;
    }

    static EmpiricalMeasure uniform(const Grid& g) {
        EmpiricalMeasure m;
        m.grid = g;
        m.weights.assign(g.cells(), 1.0 / static_cast<double>(g.cells()));
        return m;
    }

    double total() const { return std::accumulate(weights.begin(), weights.end(), 0.0); }

    EmpiricalMeasure coarsen(const Grid& coarse) const {
        require(grid.refines(coarse), "EmpiricalMeasure: target grid is not a coarsening");
        EmpiricalMeasure m;
        m.grid = coarse;
        m.sample_count = sample_count;
        m.weights.assign(coarse.cells(), 0.0);
        for (std::size_t i = 0; i < weights.size(); ++i) {
            const auto c = grid.coords(i);
            std::size_t idx = 0;
            for (int a = 0; a < grid.dim(); ++a)
                idx = idx * coarse.res[a] + static_cast<std::size_t>(c[a] / (grid.res[a] / coarse.res[a]));
            m.weights[idx] += weights[i];
        }
        return m;
    }
};

// L1 distance, comparing on the coarser of two nested grids.
inline double l1_distance(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
    if (!a.grid.same_as(b.grid)) {
        if (a.grid.refines(b.grid)) return l1_distance(a.coarsen(b.grid), b);
        if (b.grid.refines(a.grid)) return l1_distance(a, b.coarsen(a.grid));
        throw Error(ErrorKind::precondition, "l1_distance: grids are not nested");
    }
    double d = 0.0;
    for (std::size_t i = 0; i < a.weights.size(); ++i) d += std::abs(a.weights[i] - b.weights[i]);
    return d;
}

inline nlohmann::json to_json(const Grid& g) {
    return {{"lo", to_std(g.lo)}, {"hi", to_std(g.hi)}, {"resolution", g.res}};
}

inline nlohmann::json to_json(const EmpiricalMeasure& m) {
    return {{"grid", to_json(m.grid)}, {"weights", m.weights}, {"sample_count", m.sample_count}};
}

inline EmpiricalMeasure measure_from_json(const nlohmann::json& j) {
    EmpiricalMeasure m;
    m.grid.lo = make_vec(j.at("grid").at("lo").get<std::vector<double>>());
    m.grid.hi = make_vec(j.at("grid").at("hi").get<std::vector<double>>());
    m.grid.res = j.at("grid").at("resolution").get<std::vector<int>>();
    m.weights = j.at("weights").get<std::vector<double>>();
    m.sample_count = j.value("sample_count", std::uint64_t{0});
    require(m.weights.size() == m.grid.cells(), "measure_from_json: weight count differs from the grid size");
    return m;
}

// One row per cell: index, cell centre coordinates, weight.
inline std::string to_csv(const EmpiricalMeasure& m) {
    std::ostringstream os;
    os.precision(17);
    os << "cell";
    for (int i = 0; i < m.grid.dim(); ++i) os << ",x" << i;
    os << ",weight\n";
    for (std::size_t c = 0; c < m.weights.size(); ++c) {
        os << c;
        const Vec ctr = m.grid.center(c);
        for (int i = 0; i < m.grid.dim(); ++i) os << ',' << ctr(i);
        os << ',' << m.weights[c] << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Ulam discretization
// ---------------------------------------------------------------------------

// Row-stochastic cell-to-cell matrix with integer counts: row i sends
// count/samples_per_row of its mass to each listed target.
struct UlamMatrix {
    Grid grid;
    std::uint32_t samples_per_row = 0;
    std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> rows;  // (target, count)
    double clamped_fraction = 0.0;  // images outside the box, assigned to boundary cells

    std::vector<double> apply(const std::vector<double>& mu) const {
        std::vector<double> out(mu.size(), 0.0);
        const double inv = 1.0 / samples_per_row;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (mu[i] == 0.0) continue;
            const double m = mu[i] * inv;
            for (const auto& [j, c] : rows[i]) out[j] += m * c;
        }
        return out;
    }
    std::uint64_t row_count(std::size_t i) const {
        std::uint64_t s = 0;
        for (const auto& e : rows[i]) s += e.second;
        return s;
    }
};

namespace detail {

// k-th point of a stratified sub-grid of a cell with a uniform offset
// inside the sub-cell.
inline Vec stratified_point(const Grid& g, std::size_t cell, std::uint32_t k, int per_axis, Rng& rng) {
    const Vec lo = g.cell_lo(cell);
    const Vec h = g.cell_size();
    Vec p(g.dim());
    std::uint32_t rem = k;
    for (int i = g.dim(); i-- > 0;) {
        const int sub = static_cast<int>(rem % static_cast<std::uint32_t>(per_axis));
        rem /= static_cast<std::uint32_t>(per_axis);
        p(i) = lo(i) + h(i) * (sub + rng.uniform()) / per_axis;
    }
    return p;
}

}  // namespace detail

// Quadrature points and noise draws come from separate streams, so matrices
// built with the same `seed` and different kernels share their points.
inline UlamMatrix build_ulam_matrix(const MapFamily& fam, const NoiseKernel& kernel, const Grid& grid,
                                    std::uint32_t samples_per_cell, std::uint64_t seed, int threads = 1,
                                    std::uint64_t noise_seed = 0) {
    const SmoothSystem& sys = fam.system();
    kernel.validate();
    require(kernel.dim == fam.noise_dim(), "Ulam: kernel dimension differs from the number of fields");
    const int per_axis = std::max(1, static_cast<int>(std::floor(std::pow(samples_per_cell, 1.0 / grid.dim()) + 1e-9)));
    std::uint32_t sub_cells = 1;
    for (int i = 0; i < grid.dim(); ++i) sub_cells *= static_cast<std::uint32_t>(per_axis);
    UlamMatrix u;
    u.grid = grid;
    u.samples_per_row = samples_per_cell;
    u.rows.resize(grid.cells());
    std::vector<std::uint64_t> clamped(grid.cells(), 0);
    parallel_for(grid.cells(), threads, [&](std::size_t cell) {
        Rng rng(seed, cell), noise_rng(stream_seed(seed, noise_seed + 0x0153), cell);
        std::unordered_map<std::uint32_t, std::uint32_t> hits;
        for (std::uint32_t k = 0; k < samples_per_cell; ++k) {
            const Vec x = detail::stratified_point(grid, cell, k % sub_cells, per_axis, rng);
            const Vec y = fam.apply(kernel.sample(noise_rng), x);
            if (!sys.attractor_box.contains(y)) clamped[cell] += 1;
            hits[static_cast<std::uint32_t>(grid.index(y))] += 1;
        }
        auto& row = u.rows[cell];
        row.assign(hits.begin(), hits.end());
        std::sort(row.begin(), row.end());
    });
    const std::uint64_t total_clamped = std::accumulate(clamped.begin(), clamped.end(), std::uint64_t{0});
    u.clamped_fraction = static_cast<double>(total_clamped) / (static_cast<double>(grid.cells()) * samples_per_cell);
    return u;
}

struct UlamResult {
    EmpiricalMeasure measure;
    double residual = 0.0;
    int iterations = 0;
    double clamped_fraction = 0.0;
};

inline double l1_vec(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
    return d;
}

// Left fixed vector of the Ulam matrix by power iteration from the uniform
// vector, to ||mu P - mu||_1 < tol.
inline UlamResult ulam_fixed_vector(const UlamMatrix& u, double tol = 1e-10, int max_iter = 20000) {
    std::vector<double> mu(u.rows.size(), 1.0 / static_cast<double>(u.rows.size()));
    std::vector<double> next = u.apply(mu);
    double res = l1_vec(next, mu);
    double prev_res = res;
    double rate = 0.0;
    int it = 0;
    for (; it < max_iter && res >= tol; ++it) {
        mu.swap(next);
        // renormalize against drift from rounding
        const double s = std::accumulate(mu.begin(), mu.end(), 0.0);
        for (double& m : mu) m /= s;
        next = u.apply(mu);
        prev_res = res;
        res = l1_vec(next, mu);
        if (prev_res > 0) rate = res / prev_res;
    }
    if (!(res < tol)) {
        std::ostringstream os;
        os << "stationary_ulam: power iteration did not converge in " << max_iter << " iterations (residual " << res
           << ", residual contraction per step " << rate << ", estimated spectral gap " << 1.0 - rate << ")";
        throw Error(ErrorKind::numerical_failure, os.str());
    }
    UlamResult r;
    r.measure.grid = u.grid;
    r.measure.weights = mu;
    r.measure.sample_count = static_cast<std::uint64_t>(u.rows.size()) * u.samples_per_row;
    r.residual = res;
    r.iterations = it;
    r.clamped_fraction = u.clamped_fraction;
    return r;
}

inline UlamResult stationary_ulam(const MapFamily& fam, const NoiseKernel& kernel, int resolution,
                                  std::uint32_t mc_per_cell, std::uint64_t seed, int threads = 1) {
    require(resolution >= 8, "stationary_ulam: resolution must be >= 8 per axis");
    require(mc_per_cell >= 16, "stationary_ulam: mc_per_cell must be >= 16");
    const Grid g = Grid::over(fam.system().attractor_box, resolution);
    return ulam_fixed_vector(build_ulam_matrix(fam, kernel, g, mc_per_cell, seed, threads));
}

// ---------------------------------------------------------------------------
// Monte Carlo stationary measures
// ---------------------------------------------------------------------------

struct McResult {
    EmpiricalMeasure measure;      // histogram of x_k, k >= burn_in
    EmpiricalMeasure pushforward;  // histogram of f(x_k) under the base map
    double invariance_defect = 0.0;
};

inline McResult stationary_mc(const MapFamily& fam, const NoiseKernel& kernel, const Vec& x0, std::size_t n_steps,
                              std::size_t burn_in, int resolution, std::uint64_t seed) {
    require(burn_in < n_steps, "stationary_mc: burn_in must be smaller than n_steps");
    require(resolution >= 1, "stationary_mc: resolution must be >= 1");
    const SmoothSystem& sys = fam.system();
    const Grid g = Grid::over(sys.attractor_box, resolution);
    std::vector<std::uint64_t> counts(g.cells(), 0), pushed(g.cells(), 0);
    stream_skew_orbit(fam, kernel, x0, n_steps, seed, [&](std::size_t k, const Vec& x, const Vec&, const Vec&,
                                                          const Vec&) {
        if (k < burn_in) return;
        counts[g.index(x)] += 1;
        pushed[g.index(sys.forward(x))] += 1;
    });
    McResult r;
    r.measure = EmpiricalMeasure::from_counts(g, counts);
    r.pushforward = EmpiricalMeasure::from_counts(g, pushed);
    r.invariance_defect = l1_distance(r.measure, r.pushforward);
    return r;
}

// Seeds for independent runs of the same estimator.
inline std::uint64_t replica_seed(std::uint64_t seed, std::uint64_t replica) {
    return replica == 0 ? seed : stream_seed(seed, 0xA11CE + replica);
}

// ---------------------------------------------------------------------------
// Zero-noise limits
// ---------------------------------------------------------------------------

enum class Estimator { ulam, monte_carlo };

struct ZeroNoiseOptions {
    Estimator estimator = Estimator::ulam;
    int resolution = 32;
    std::uint32_t mc_per_cell = 1024;  // Ulam
    std::size_t n_steps = 2000000;     // Monte Carlo
    std::size_t burn_in = 1000;
    std::uint64_t seed = 1;
    int threads = 1;
};

struct ZeroNoiseLevel {
    double amplitude = 0.0;
    EmpiricalMeasure measure;
    double residual = 0.0;          // Ulam only
    double invariance_defect = 0.0; // ||f_* mu - mu||_1 on the grid
    // L1 distance between two independent-seed estimates of this level:
    // the grid-projection/sampling floor below which differences are noise
    double resolution_floor = 0.0;
};

struct ZeroNoiseReport {
    std::vector<ZeroNoiseLevel> levels;
    std::vector<double> consecutive_distances;       // d(mu_i, mu_{i+1})
    std::vector<std::vector<double>> pairwise;       // full L1 matrix
    double final_defect = 0.0;
    double final_floor = 0.0;
};

namespace detail {

// One stationary estimate at a given amplitude. For Ulam runs the quadrature
// points depend only on `quad_seed`, so every level of a schedule and the
// base-map push-forward matrix share them; `noise_seed` varies per level.
inline EmpiricalMeasure estimate_level(const RandomSystem& rs, double amplitude, const ZeroNoiseOptions& o,
                                       const Vec& x0, std::uint64_t quad_seed, std::uint64_t noise_seed,
                                       double* defect, double* residual) {
    const NoiseKernel k{rs.noise_dim(), amplitude};
    if (o.estimator == Estimator::ulam) {
        require(o.resolution >= 8 && o.mc_per_cell >= 16, "zero_noise_limit: Ulam needs resolution >= 8, mc >= 16");
        const Grid g = Grid::over(rs.system().attractor_box, o.resolution);
        const UlamResult r =
            ulam_fixed_vector(build_ulam_matrix(rs, k, g, o.mc_per_cell, quad_seed, o.threads, noise_seed));
        if (defect) {
            const UlamMatrix p0 =
                build_ulam_matrix(rs, NoiseKernel{rs.noise_dim(), 0.0}, g, o.mc_per_cell, quad_seed, o.threads);
            EmpiricalMeasure pushed = r.measure;
            pushed.weights = p0.apply(r.measure.weights);
            *defect = l1_distance(r.measure, pushed);
        }
        if (residual) *residual = r.residual;
        return r.measure;
    }
    const McResult r = stationary_mc(rs, k, x0, o.n_steps, o.burn_in, o.resolution, stream_seed(quad_seed, noise_seed));
    if (defect) *defect = r.invariance_defect;
    return r.measure;
}

}  // namespace detail

inline ZeroNoiseReport zero_noise_limit(const RandomSystem& rs, const std::vector<double>& schedule,
                                        const ZeroNoiseOptions& o, const Vec& x0) {
    validate_schedule(schedule);
    ZeroNoiseReport rep;
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        ZeroNoiseLevel lv;
        lv.amplitude = schedule[i];
        lv.measure = detail::estimate_level(rs, schedule[i], o, x0, o.seed, i + 1, &lv.invariance_defect, &lv.residual);
        const EmpiricalMeasure twin =
            detail::estimate_level(rs, schedule[i], o, x0, replica_seed(o.seed, 1), i + 1, nullptr, nullptr);
        lv.resolution_floor = l1_distance(lv.measure, twin);
        rep.levels.push_back(std::move(lv));
    }
    const std::size_t n = rep.levels.size();
    rep.pairwise.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            rep.pairwise[i][j] = rep.pairwise[j][i] = l1_distance(rep.levels[i].measure, rep.levels[j].measure);
    for (std::size_t i = 0; i + 1 < n; ++i) rep.consecutive_distances.push_back(rep.pairwise[i][i + 1]);
    if (n > 0) {
        rep.final_defect = rep.levels.back().invariance_defect;
        rep.final_floor = rep.levels.back().resolution_floor;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Lifted measure check
// ---------------------------------------------------------------------------

struct LiftReport {
    std::size_t samples = 0;
    double state_l1 = 0.0;          // state marginal of the orbit vs the given measure
    double chi2 = 0.0;              // state cell x noise orthant contingency statistic
    double control_mean = 0.0;      // same statistic on shuffled noise
    double control_sd = 0.0;
    double independence_z = 0.0;
    bool marginal_ok = false;
    bool independence_ok = false;
};

struct LiftOptions {
    double l1_tolerance = 0.05;
    double z_threshold = 3.0;
    int coarse_per_axis = 4;
    int controls = 20;
    std::uint64_t seed = 11;
};

namespace detail {

inline double contingency_chi2(const std::vector<std::uint32_t>& rows, const std::vector<std::uint32_t>& cols,
                               std::size_t nr, std::size_t nc) {
    std::vector<double> table(nr * nc, 0.0), rs(nr, 0.0), cs(nc, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        table[rows[i] * nc + cols[i]] += 1;
        rs[rows[i]] += 1;
        cs[cols[i]] += 1;
    }
    const double n = static_cast<double>(rows.size());
    double chi2 = 0.0;
    for (std::size_t r = 0; r < nr; ++r) {
        if (rs[r] == 0) continue;
        for (std::size_t c = 0; c < nc; ++c) {
            if (cs[c] == 0) continue;
            const double e = rs[r] * cs[c] / n;
            const double d = table[r * nc + c] - e;
            chi2 += d * d / e;
        }
    }
    return chi2;
}

}  // namespace detail

// The lifted measure projects to nu^N x mu: the orbit's state marginal after
// the origin must match `measure`, and omega_k must be independent of x_k.
inline LiftReport lift_check(const SkewOrbit& orbit, const EmpiricalMeasure& measure, const LiftOptions& opt = {}) {
    require(orbit.steps() > orbit.origin, "lift_check: orbit has no post-origin steps");
    const std::size_t n = orbit.steps() - orbit.origin;
    require(n >= 1000, "lift_check: insufficient sample (need >= 1000 post-origin steps)");
    LiftReport r;
    r.samples = n;
    std::vector<std::uint64_t> counts(measure.grid.cells(), 0);
    for (std::size_t k = orbit.origin; k < orbit.steps(); ++k) counts[measure.grid.index(orbit.points[k])] += 1;
    r.state_l1 = l1_distance(EmpiricalMeasure::from_counts(measure.grid, counts), measure);
    r.marginal_ok = r.state_l1 <= opt.l1_tolerance;

    const Grid coarse = Grid::over(orbit.system().attractor_box, opt.coarse_per_axis);
    const int nd = static_cast<int>(orbit.noise.front().size());
    std::vector<std::uint32_t> rows(n), cols(n);
    bool degenerate = true;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = orbit.origin + i;
        rows[i] = static_cast<std::uint32_t>(coarse.index(orbit.points[k]));
        std::uint32_t c = 0;
        for (int d = 0; d < nd; ++d) c = 2 * c + (orbit.noise[k](d) > 0 ? 1u : 0u);
        cols[i] = c;
        degenerate = degenerate && orbit.noise[k].cwiseAbs().maxCoeff() == 0.0;
    }
    if (degenerate) {
        // point-mass noise marginal: independent of everything
        r.independence_ok = true;
        return r;
    }
    const std::size_t nr = coarse.cells(), nc = std::size_t{1} << nd;
    r.chi2 = detail::contingency_chi2(rows, cols, nr, nc);
    Rng rng(opt.seed);
    std::vector<double> ctrl;
    std::vector<std::uint32_t> shuffled = cols;
    for (int c = 0; c < opt.controls; ++c) {
        for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
        ctrl.push_back(detail::contingency_chi2(rows, shuffled, nr, nc));
    }
    double mean = 0.0, var = 0.0;
    for (double v : ctrl) mean += v;
    mean /= ctrl.size();
    for (double v : ctrl) var += (v - mean) * (v - mean);
    var /= std::max<std::size_t>(1, ctrl.size() - 1);
    r.control_mean = mean;
    r.control_sd = std::sqrt(var);
    r.independence_z = r.control_sd > 0 ? (r.chi2 - mean) / r.control_sd : 0.0;
    r.independence_ok = r.independence_z < opt.z_threshold;
    return r;
}

}  // namespace srb
