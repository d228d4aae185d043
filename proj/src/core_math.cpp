#include "contflow/core_math.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

namespace contflow::core {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), engine_(splitmix64(splitmix64(seed) ^ stream)) {}

double SeededRng::normal() { return normal_(engine_); }

double SeededRng::uniform() { return uniform_(engine_); }

Eigen::MatrixXd SeededRng::gaussian(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = normal();
    }
    return out;
}

Eigen::MatrixXd SeededRng::sphere(Eigen::Index n, Eigen::Index d) {
    Eigen::MatrixXd out = gaussian(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        double norm = out.row(i).norm();
        while (norm == 0.0) {
            for (Eigen::Index j = 0; j < d; ++j) out(i, j) = normal();
            norm = out.row(i).norm();
        }
        out.row(i) /= norm;
    }
    return out;
}

Eigen::MatrixXd SeededRng::angles(Eigen::Index n) {
    Eigen::MatrixXd out(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) out(i, 0) = uniform_angle();
    return out;
}

Eigen::MatrixXd DataDistribution::sample(Eigen::Index n, SeededRng& rng) const {
    switch (kind) {
        case Kind::sphere: return rng.sphere(n, dim);
        case Kind::circle: return rng.angles(n);
        case Kind::gaussian: return rng.gaussian(n, dim);
    }
    throw InvalidParameter("unknown data distribution");
}

Estimate mean_and_stderr(const Eigen::Ref<const Eigen::VectorXd>& values) {
    const Eigen::Index n = values.size();
    if (n == 0) throw InvalidParameter("mean of an empty sample");
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) sum += values(i);
    const double mean = sum / static_cast<double>(n);
    if (n == 1) return {mean, std::numeric_limits<double>::infinity()};
    double sq = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double dev = values(i) - mean;
        sq += dev * dev;
    }
    const double var = sq / static_cast<double>(n - 1);
    return {mean, std::sqrt(var / static_cast<double>(n))};
}

Estimate expect_over_data(const std::function<double(const Eigen::VectorXd&)>& f,
                          const DataDistribution& dist, long batch, SeededRng& rng) {
    if (batch < 1) throw InvalidParameter("expect_over_data needs batch >= 1");
    const Eigen::MatrixXd x = dist.sample(batch, rng);
    Eigen::VectorXd values(batch);
    for (long i = 0; i < batch; ++i) values(i) = f(x.row(i).transpose());
    return mean_and_stderr(values);
}

}  // namespace contflow::core

namespace contflow::core {

double loglog_slope(const std::vector<double>& t, const std::vector<double>& y, double t_begin,
                    double t_end) {
    if (t.size() != y.size()) throw DimensionMismatch("loglog_slope: series lengths differ");
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!(t[i] >= t_begin && t[i] <= t_end && t[i] > 0.0 && y[i] > 0.0)) continue;
        const double lx = std::log(t[i]);
        const double ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        ++count;
    }
    if (count < 2) return std::numeric_limits<double>::quiet_NaN();
    const double denom = count * sxx - sx * sx;
    if (denom <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    return (count * sxy - sx * sy) / denom;
}

int worker_count() {
    if (const char* env = std::getenv("CONTFLOW_THREADS")) {
        char* end = nullptr;
        const long value = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || value < 1) return 1;
        return static_cast<int>(std::min<long>(value, 256));
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(worker_count()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& thread : pool) thread.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace contflow::core
