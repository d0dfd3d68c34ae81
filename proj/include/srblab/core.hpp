#pragma once

// Shared value types, error kinds, seeded random streams and a small
// deterministic parallel-for used by every module.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace srb {

// State vectors and matrices never exceed four dimensions, so the storage is
// inline and no heap allocation happens in the inner loops.
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 4, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 4, 4>;

constexpr double kTwoPi = 6.283185307179586476925286766559;

enum class ErrorKind {
    precondition,          // caller supplied invalid parameters
    hypothesis_violation,  // an experiment ran but a standing hypothesis failed
    numerical_failure,     // non-convergence, overflow, loss of chart
    config                 // malformed experiment configuration
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::precondition: return "precondition";
        case ErrorKind::hypothesis_violation: return "hypothesis-violation";
        case ErrorKind::numerical_failure: return "numerical-failure";
        case ErrorKind::config: return "config";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(ErrorKind::precondition, msg);
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Independent stream per (seed, index) pair; results never depend on how the
// indices are distributed over threads.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ull));
}

// xoshiro256** with a splitmix64 seeding sequence. Bit-identical on every
// platform, unlike the standard distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t s = seed;
        for (auto& w : s_) {
            s = splitmix64(s);
            w = s;
        }
    }
    Rng(std::uint64_t seed, std::uint64_t stream) : Rng(stream_seed(seed, stream)) {}

    std::uint64_t next() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4]{};
};

// ---------------------------------------------------------------------------
// Threads
// ---------------------------------------------------------------------------

// Runs fn(i) for i in [0, n) over `threads` workers with static chunking.
// Each index writes only its own output slot, so results are independent of
// the worker count.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers =
        std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                const std::size_t lo = w * chunk;
                const std::size_t hi = std::min(n, lo + chunk);
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

// Wraps into [0, 1).
inline double wrap_unit(double v) {
    double r = v - std::floor(v);
    if (r >= 1.0) r = 0.0;
    return r;
}

// Wraps into [-1/2, 1/2).
inline double wrap_half(double v) { return v - std::floor(v + 0.5); }

// Orthonormal basis of the column span (thin Q of a Householder QR).
inline Mat orthonormalize(const Mat& m) {
    Eigen::HouseholderQR<Mat> qr(m);
    Mat q = qr.householderQ() * Mat::Identity(m.rows(), m.cols());
    return q;
}

// Largest principal angle between the column spans of two orthonormal bases.
inline double subspace_angle(const Mat& a, const Mat& b) {
    const Mat resid = a - b * (b.transpose() * a);
    Eigen::JacobiSVD<Mat> svd(resid);
    const double s = svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
    return std::asin(std::clamp(s, 0.0, 1.0));
}

inline double max_singular(const Mat& m) {
    Eigen::JacobiSVD<Mat> svd(m);
    return svd.singularValues()(0);
}

inline double min_singular(const Mat& m) {
    Eigen::JacobiSVD<Mat> svd(m);
    return svd.singularValues()(svd.singularValues().size() - 1);
}

// Volume stretch factor of a (possibly non-square) matrix: sqrt(det(M^T M)).
inline double volume_factor(const Mat& m) {
    Eigen::JacobiSVD<Mat> svd(m);
    double v = 1.0;
    for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) v *= svd.singularValues()(i);
    return v;
}

inline Vec make_vec(std::initializer_list<double> xs) {
    Vec v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v(i++) = x;
    return v;
}

inline Vec make_vec(const std::vector<double>& xs) {
    Vec v(static_cast<Eigen::Index>(xs.size()));
    for (std::size_t i = 0; i < xs.size(); ++i) v(static_cast<Eigen::Index>(i)) = xs[i];
    return v;
}

inline std::vector<double> to_std(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace srb
