#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/gamma.hpp>

#include "ski/errors.hpp"
#include "ski/kernels.hpp"
#include "ski/parallel.hpp"
#include "ski/random.hpp"

namespace ski {

enum class ServiceFamily { Exponential, Gamma };

/// Service-time law given by its mean and variance. Exponential ignores the
/// variance (it is mean^2 by construction).
struct ServiceDist {
    ServiceFamily family = ServiceFamily::Exponential;
    double mean = 1.0;
    double variance = 1.0;

    static ServiceDist exponential(double mean) { return {ServiceFamily::Exponential, mean, mean * mean}; }
    static ServiceDist gamma(double mean, double variance) { return {ServiceFamily::Gamma, mean, variance}; }

    void validate() const {
        if (!(mean > 0.0) || !std::isfinite(mean)) throw InputError("service mean must be > 0");
        if (family == ServiceFamily::Gamma && (!(variance > 0.0) || !std::isfinite(variance)))
            throw InputError("gamma service variance must be > 0");
    }
};

/// Inverse CDF of a service distribution. Gamma quantiles come from a cubic
/// Hermite table (slopes 1/pdf) on the interior and are exact in the tails.
class ServiceSampler {
public:
    static constexpr int kIntervals = 2048;
    static constexpr int kTailIntervals = 32;  // exact quantiles below and above this many intervals

    explicit ServiceSampler(const ServiceDist& d) : dist_(d) {
        d.validate();
        if (d.family == ServiceFamily::Exponential) return;
        gamma_ = std::make_shared<boost::math::gamma_distribution<double>>(d.mean * d.mean / d.variance,
                                                                             d.variance / d.mean);
        q_.resize(kIntervals + 1);
        dq_.resize(kIntervals + 1);
        for (int i = 1; i < kIntervals; ++i) {
            const double u = static_cast<double>(i) / kIntervals;
            q_[static_cast<std::size_t>(i)] = boost::math::quantile(*gamma_, u);
            dq_[static_cast<std::size_t>(i)] = 1.0 / boost::math::pdf(*gamma_, q_[static_cast<std::size_t>(i)]);
        }
    }

    [[nodiscard]] const ServiceDist& dist() const noexcept { return dist_; }

    /// u in (0, 1).
    [[nodiscard]] double operator()(double u) const {
        if (dist_.family == ServiceFamily::Exponential) return -dist_.mean * std::log1p(-u);
        const double s = u * kIntervals;
        const int i = static_cast<int>(s);
        if (i < kTailIntervals || i >= kIntervals - kTailIntervals) return boost::math::quantile(*gamma_, u);
        const double t = s - i;
        const double h = 1.0 / kIntervals;
        const auto a = static_cast<std::size_t>(i);
        const double t2 = t * t;
        const double t3 = t2 * t;
        return (2 * t3 - 3 * t2 + 1) * q_[a] + (t3 - 2 * t2 + t) * h * dq_[a] + (-2 * t3 + 3 * t2) * q_[a + 1] +
               (t3 - t2) * h * dq_[a + 1];
    }

private:
    ServiceDist dist_;
    std::shared_ptr<boost::math::gamma_distribution<double>> gamma_;
    std::vector<double> q_, dq_;
};

inline constexpr int kStations = 3;

struct LineConfig {
    double arrival_rate = 1.0;
    std::array<int, kStations> capacity{5, 5, 5};
    std::array<ServiceDist, kStations> service{};
    double horizon = 60000.0;

    void validate() const {
        if (!(arrival_rate > 0.0)) throw InputError("arrival rate must be > 0");
        if (!(horizon > 0.0)) throw InputError("horizon must be > 0");
        for (int s = 0; s < kStations; ++s) {
            if (capacity[static_cast<std::size_t>(s)] < 1) throw InputError("station capacity must be >= 1");
            service[static_cast<std::size_t>(s)].validate();
        }
    }
};

enum class SystemModel { Real, Inadequate };

/// x = (mean_1, mean_2, mean_3, var_1, var_2, var_3). The real system has gamma
/// service; the inadequate model is exponential and reads only the means.
inline LineConfig line_for(const Point& x, SystemModel model, LineConfig base = {}) {
    if (x.size() != 2 * kStations) throw InputError("design variable must have 6 coordinates");
    for (int s = 0; s < kStations; ++s) {
        const double m = x(s);
        base.service[static_cast<std::size_t>(s)] =
            model == SystemModel::Real ? ServiceDist::gamma(m, x(s + kStations)) : ServiceDist::exponential(m);
    }
    return base;
}

enum class StreamMode { Independent, Crn };

/// Under CRN every design point uses the same streams for a given replication;
/// otherwise streams are distinct per (point, replication).
struct RngPolicy {
    StreamMode mode = StreamMode::Independent;
    std::uint64_t master_seed = 1;
    std::uint64_t replication_index = 0;
    std::uint64_t point_index = 0;

    /// Stream 0 drives arrivals, stream s + 1 the services of station s.
    [[nodiscard]] Rng stream(std::uint64_t id) const {
        if (mode == StreamMode::Crn) return make_rng(master_seed, {0xc7aULL, replication_index, id});
        return make_rng(master_seed, {0x1d9ULL, point_index, replication_index, id});
    }
};

struct LineCounters {
    std::uint64_t events = 0;
    std::uint64_t arrived = 0;
    std::uint64_t rejected = 0;
    std::uint64_t completed = 0;
    std::uint64_t in_system = 0;
};

struct SojournResult {
    double mean = 0.0;
    std::uint64_t count = 0;
    LineCounters counters;
};

/// Line with its service samplers built once, reusable across replications.
class PreparedLine {
public:
    explicit PreparedLine(LineConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        for (int s = 0; s < kStations; ++s) samplers_.emplace_back(cfg_.service[static_cast<std::size_t>(s)]);
    }

    [[nodiscard]] const LineConfig& config() const noexcept { return cfg_; }

    using Observer = std::function<void(const LineCounters&)>;

    /// Average sojourn of the parts that leave the line within [0, horizon].
    [[nodiscard]] SojournResult simulate(const RngPolicy& policy, const Observer& observer = {}) const {
        constexpr double inf = std::numeric_limits<double>::infinity();
        Rng arrivals = policy.stream(0);
        std::array<Rng, kStations> svc{policy.stream(1), policy.stream(2), policy.stream(3)};

        std::array<std::deque<double>, kStations> queue;  // arrival times, FIFO; head is in service or blocked
        std::array<double, kStations> finish{inf, inf, inf};
        std::array<bool, kStations> blocked{false, false, false};
        LineCounters c;
        double sum = 0.0;

        auto draw_service = [&](int s) {
            return samplers_[static_cast<std::size_t>(s)](open_uniform(svc[static_cast<std::size_t>(s)]));
        };
        auto start_if_idle = [&](int s, double now) {
            const auto i = static_cast<std::size_t>(s);
            if (!queue[i].empty() && finish[i] == inf && !blocked[i]) finish[i] = now + draw_service(s);
        };
        auto full = [&](int s) {
            return static_cast<int>(queue[static_cast<std::size_t>(s)].size()) >= cfg_.capacity[static_cast<std::size_t>(s)];
        };
        // Station s just lost a part: pull blocked parts forward, cascading upstream.
        auto release = [&](int s, double now) {
            while (s > 0 && blocked[static_cast<std::size_t>(s - 1)] && !full(s)) {
                const auto up = static_cast<std::size_t>(s - 1);
                queue[static_cast<std::size_t>(s)].push_back(queue[up].front());
                queue[up].pop_front();
                blocked[up] = false;
                start_if_idle(s, now);
                start_if_idle(s - 1, now);
                --s;
            }
        };

        double next_arrival = -std::log(open_uniform(arrivals)) / cfg_.arrival_rate;
        for (;;) {
            int which = -1;
            double t = next_arrival;
            for (int s = 0; s < kStations; ++s)
                if (finish[static_cast<std::size_t>(s)] < t) {
                    t = finish[static_cast<std::size_t>(s)];
                    which = s;
                }
            if (t > cfg_.horizon) break;
            ++c.events;
            if (which < 0) {
                ++c.arrived;
                if (full(0)) {
                    ++c.rejected;
                } else {
                    queue[0].push_back(t);
                    ++c.in_system;
                    start_if_idle(0, t);
                }
                next_arrival = t - std::log(open_uniform(arrivals)) / cfg_.arrival_rate;
            } else {
                const auto i = static_cast<std::size_t>(which);
                finish[i] = inf;
                if (which == kStations - 1) {
                    sum += t - queue[i].front();
                    queue[i].pop_front();
                    ++c.completed;
                    --c.in_system;
                    start_if_idle(which, t);
                    release(which, t);
                } else if (full(which + 1)) {
                    blocked[i] = true;
                } else {
                    queue[i + 1].push_back(queue[i].front());
                    queue[i].pop_front();
                    start_if_idle(which + 1, t);
                    start_if_idle(which, t);
                    release(which, t);
                }
            }
            if (observer) observer(c);
        }
        if (c.completed == 0) throw EmptySampleError("no part left the line within the horizon");
        return SojournResult{sum / static_cast<double>(c.completed), c.completed, c};
    }

private:
    LineConfig cfg_;
    std::vector<ServiceSampler> samplers_;
};

inline SojournResult simulate_sojourn(const LineConfig& cfg, const RngPolicy& policy) {
    return PreparedLine(cfg).simulate(policy);
}

/// Replications first .. first + count - 1 at one prepared point.
inline std::vector<double> replicate(const PreparedLine& line, StreamMode mode, std::uint64_t master,
                                     std::uint64_t point, int count, int first = 0) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int j = 0; j < count; ++j) {
        const RngPolicy p{mode, master, static_cast<std::uint64_t>(first + j), point};
        out.push_back(line.simulate(p).mean);
    }
    return out;
}

inline std::vector<PreparedLine> prepare_lines(const PointSet& points, SystemModel model, const LineConfig& base) {
    std::vector<PreparedLine> lines;
    lines.reserve(static_cast<std::size_t>(points.size()));
    for (Index i = 0; i < points.size(); ++i) lines.emplace_back(line_for(points[i], model, base));
    return lines;
}

/// counts(i) replications at every point, in replication order.
inline std::vector<std::vector<double>> run_design(const PointSet& points, const Eigen::VectorXi& counts,
                                                   SystemModel model, const LineConfig& base, StreamMode mode,
                                                   std::uint64_t master, unsigned threads = 1) {
    if (counts.size() != points.size()) throw InputError("need one replication count per point");
    std::vector<std::vector<double>> out(static_cast<std::size_t>(points.size()));
    parallel_for(out.size(), threads, [&](std::size_t i) {
        const PreparedLine line(line_for(points[static_cast<Index>(i)], model, base));
        out[i] = replicate(line, mode, master, i, counts(static_cast<Index>(i)));
    });
    return out;
}

struct GroundTruthConfig {
    double rel_se = 0.005;
    int batch = 20;
    int max_replications = 2000;
    std::uint64_t seed = 99;
};

struct GroundTruth {
    Eigen::VectorXd estimate;
    Eigen::VectorXd std_error;
    Eigen::VectorXi replications;
};

/// Independent replications in batches until the standard error falls below
/// rel_se times the estimate or the cap is reached.
inline GroundTruth ground_truth(const PointSet& points, SystemModel model, const LineConfig& base,
                                const GroundTruthConfig& cfg, unsigned threads = 1) {
    if (cfg.batch < 2 || cfg.max_replications < cfg.batch) throw InputError("invalid ground-truth effort");
    const Index k = points.size();
    GroundTruth gt{Eigen::VectorXd(k), Eigen::VectorXd(k), Eigen::VectorXi(k)};
    parallel_for(static_cast<std::size_t>(k), threads, [&](std::size_t i) {
        const PreparedLine line(line_for(points[static_cast<Index>(i)], model, base));
        double s = 0.0, ss = 0.0;
        int n = 0;
        double mean = 0.0, se = std::numeric_limits<double>::infinity();
        while (n < cfg.max_replications) {
            for (double v : replicate(line, StreamMode::Independent, cfg.seed, i, cfg.batch, n)) {
                s += v;
                ss += v * v;
            }
            n += cfg.batch;
            mean = s / n;
            const double var = std::max(0.0, (ss - n * mean * mean) / (n - 1));
            se = std::sqrt(var / n);
            if (se <= cfg.rel_se * std::abs(mean)) break;
        }
        const auto ii = static_cast<Index>(i);
        gt.estimate(ii) = mean;
        gt.std_error(ii) = se;
        gt.replications(ii) = n;
    });
    return gt;
}

}  // namespace ski
