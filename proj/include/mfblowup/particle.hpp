#pragma once

// Finite-N interacting particle system: drifted Brownian neurons absorbed at
// 0, reset at Lambda after a refractory period eps, with batch-synchronous
// spike cascades.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <thread>
#include <vector>

#include <fftw3.h>

#include "rng.hpp"
#include "timechange.hpp"

namespace mfblowup {

struct ParticleState {
    std::vector<double> positions;
    std::vector<std::uint8_t> active;
    std::vector<double> refractory_until;
    double time = 0.0;
    std::uint64_t step = 0;

    std::size_t size() const { return positions.size(); }

    static ParticleState at_reset(std::size_t n, double lambda_reset)
    {
        ParticleState s;
        s.positions.assign(n, lambda_reset);
        s.active.assign(n, 1);
        s.refractory_until.assign(n, 0.0);
        return s;
    }
};

struct SpikeEvent {
    double t;
    std::uint32_t neuron;
};

struct SpikeRaster {
    std::vector<SpikeEvent> events;
    ModelParams params;
    std::size_t N = 0;
    double dt = 0;
    double t_max = 0;
    std::uint64_t seed = 0;
};

// Cascade at the end of step state.step: crossers spike together, every
// remaining active neuron takes the summed kick of the new spikers, repeat.
// The sum of m independent N(lambda/N, lambda/N) kicks is drawn as one
// N(m lambda/N, m lambda/N). Spikers are marked refractory.
inline std::vector<std::uint32_t> resolve_cascade(ParticleState& st, const ModelParams& p, const Philox4x32& rng)
{
    const std::size_t n = st.size();
    const double w = p.coupling / static_cast<double>(n);
    std::vector<std::uint32_t> fired, fresh;
    for (std::size_t i = 0; i < n; ++i)
        if (st.active[i] && st.positions[i] <= 0.0) fresh.push_back(static_cast<std::uint32_t>(i));
    std::uint32_t round = 1;
    while (!fresh.empty()) {
        for (auto i : fresh) {
            st.active[i] = 0;
            st.refractory_until[i] = st.time + p.epsilon;
        }
        fired.insert(fired.end(), fresh.begin(), fresh.end());
        const double m = static_cast<double>(fresh.size());
        fresh.clear();
        if (w != 0.0) {
            const double mean = m * w, sd = std::sqrt(m * w);
            for (std::size_t j = 0; j < n; ++j) {
                if (!st.active[j]) continue;
                st.positions[j] -= mean + sd * rng.normal(static_cast<std::uint32_t>(j), round, st.step);
                if (st.positions[j] <= 0.0) fresh.push_back(static_cast<std::uint32_t>(j));
            }
        }
        ++round;
    }
    return fired;
}

inline void validate_particle_args(const ModelParams& p, std::size_t N, double t_max, double dt)
{
    if (N < 2) throw std::invalid_argument("particle simulation needs N >= 2");
    if (!(dt > 0.0)) throw std::invalid_argument("dt must be > 0");
    if (!(t_max > 0.0)) throw std::invalid_argument("t_max must be > 0");
    if (!(p.lambda_reset > 0.0) || !(p.nu > 0.0) || !(p.coupling >= 0.0) || !(p.epsilon >= 0.0))
        throw std::invalid_argument("invalid model parameters");
}

inline SpikeRaster simulate(const ModelParams& p, std::size_t N, double t_max, double dt, std::uint64_t seed)
{
    validate_particle_args(p, N, t_max, dt);
    const Philox4x32 rng(seed);
    ParticleState st = ParticleState::at_reset(N, p.lambda_reset);
    SpikeRaster r;
    r.params = p;
    r.N = N;
    r.dt = dt;
    r.t_max = t_max;
    r.seed = seed;
    const std::uint64_t steps = static_cast<std::uint64_t>(std::llround(t_max / dt));
    const double drift = p.nu * dt, sd = std::sqrt(dt);
    for (std::uint64_t s = 0; s < steps; ++s) {
        st.step = s;
        const double t_end = static_cast<double>(s + 1) * dt;
        for (std::size_t i = 0; i < N; ++i) {
            if (st.active[i]) {
                st.positions[i] -= drift + sd * rng.normal(static_cast<std::uint32_t>(i), 0, s);
            } else if (st.refractory_until[i] <= st.time + 0.5 * dt) {
                st.active[i] = 1;
                st.positions[i] = p.lambda_reset;
            }
        }
        st.time = t_end;
        const auto fired = resolve_cascade(st, p, rng);
        for (auto i : fired) r.events.push_back({t_end, i});
        if (p.epsilon == 0.0)
            for (auto i : fired) {
                st.active[i] = 1;
                st.positions[i] = p.lambda_reset;
            }
    }
    return r;
}

// Independent trials run concurrently; results in seed order.
inline std::vector<SpikeRaster> simulate_trials(const ModelParams& p, std::size_t N, double t_max, double dt,
                                                const std::vector<std::uint64_t>& seeds, unsigned threads)
{
    std::vector<SpikeRaster> out(seeds.size());
    std::vector<std::exception_ptr> errs(seeds.size());
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(seeds.size())));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t k = w; k < seeds.size(); k += threads) {
                try {
                    out[k] = simulate(p, N, t_max, dt, seeds[k]);
                } catch (...) {
                    errs[k] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
    return out;
}

struct SyncEvent {
    double t;
    double size; // fraction of N
};

inline std::vector<SyncEvent> detect_sync_events(const SpikeRaster& r, double window, double min_fraction)
{
    if (r.events.empty()) throw std::invalid_argument("detect_sync_events: empty raster");
    if (!(window > 0.0)) throw std::invalid_argument("detect_sync_events: window must be > 0");
    const double need = min_fraction * static_cast<double>(r.N);
    const double span = window * (1.0 - 1e-6); // spikes of one step share a timestamp
    std::vector<SyncEvent> out;
    const auto& e = r.events;
    std::size_t i = 0;
    while (i < e.size()) {
        std::size_t j = i;
        while (j < e.size() && e[j].t - e[i].t < span) ++j;
        if (static_cast<double>(j - i) >= need && j > i) {
            out.push_back({e[i].t, static_cast<double>(j - i) / static_cast<double>(r.N)});
            i = j;
        } else {
            const double t0 = e[i].t;
            while (i < e.size() && e[i].t == t0) ++i;
        }
    }
    return out;
}

struct Spectrum {
    std::vector<double> frequency, power;
    double peak_frequency = 0.0;
};

namespace detail {
inline std::mutex& fftw_planner_mutex()
{
    static std::mutex m;
    return m;
}
} // namespace detail

// Welch estimate of the binned population spike count: Hann window, 50% overlap,
// segments of the largest power of two not exceeding half the record, capped
// at max_segment bins so that long records average many segments.
inline Spectrum spectral_density(const SpikeRaster& r, double bin, std::size_t max_segment = 4096)
{
    if (!(bin > 0.0)) throw std::invalid_argument("spectral_density: bin must be > 0");
    const std::size_t nb = static_cast<std::size_t>(std::floor(r.t_max / bin + 1e-9));
    if (nb < 256) throw std::invalid_argument("spectral_density: t_max/bin must be at least 256");
    std::vector<double> x(nb, 0.0);
    for (const auto& ev : r.events) {
        const auto k = static_cast<std::size_t>(std::floor(ev.t / bin - 1e-9));
        if (k < nb) x[k] += 1.0;
    }
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(nb);
    for (double& v : x) v -= mean;

    std::size_t L = 1;
    while (2 * L <= nb / 2 && 2 * L <= max_segment) L *= 2;
    L = std::max<std::size_t>(L, 128);
    const std::size_t hop = L / 2;
    std::vector<double> win(L);
    double wss = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        win[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(L));
        wss += win[i] * win[i];
    }
    const std::size_t nf = L / 2 + 1;
    Spectrum sp;
    sp.power.assign(nf, 0.0);
    double* in = fftw_alloc_real(L);
    fftw_complex* out = fftw_alloc_complex(nf);
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_1d(static_cast<int>(L), in, out, FFTW_ESTIMATE);
    }
    std::size_t segments = 0;
    for (std::size_t s = 0; s + L <= nb; s += hop, ++segments) {
        for (std::size_t i = 0; i < L; ++i) in[i] = x[s + i] * win[i];
        fftw_execute(plan);
        for (std::size_t k = 0; k < nf; ++k) sp.power[k] += out[k][0] * out[k][0] + out[k][1] * out[k][1];
    }
    {
        std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
    // one-sided density in counts^2 per unit frequency
    const double fs = 1.0 / bin;
    for (std::size_t k = 0; k < nf; ++k) {
        sp.power[k] /= static_cast<double>(segments) * fs * wss;
        if (k > 0 && k + 1 < nf) sp.power[k] *= 2.0;
    }
    sp.frequency.resize(nf);
    for (std::size_t k = 0; k < nf; ++k) sp.frequency[k] = static_cast<double>(k) * fs / static_cast<double>(L);
    std::size_t best = 1;
    for (std::size_t k = 1; k < nf; ++k)
        if (sp.power[k] > sp.power[best]) best = k;
    // A synchronous raster is close to a pulse train whose harmonics carry
    // comparable power; report the lowest sub-harmonic of the global maximum
    // that holds at least half of its power.
    for (std::size_t m = best; m >= 2; --m) {
        const std::size_t c = static_cast<std::size_t>(std::llround(static_cast<double>(best) / static_cast<double>(m)));
        if (c < 1) continue;
        std::size_t arg = c;
        for (std::size_t k = c - 1; k <= c + 1 && k < nf; ++k)
            if (k >= 1 && sp.power[k] > sp.power[arg]) arg = k;
        if (sp.power[arg] >= 0.5 * sp.power[best]) {
            best = arg;
            break;
        }
    }
    sp.peak_frequency = sp.frequency[best];
    return sp;
}

struct SyncSummary {
    std::size_t events = 0;
    double mean_interval = std::numeric_limits<double>::quiet_NaN();
    double mean_size = std::numeric_limits<double>::quiet_NaN();
    double size_sd = std::numeric_limits<double>::quiet_NaN();
};

// Statistics after discarding the first `burn_in` events.
inline SyncSummary summarize_sync(const std::vector<SyncEvent>& ev, std::size_t burn_in = 1)
{
    SyncSummary s;
    s.events = ev.size();
    if (ev.size() <= burn_in) return s;
    double sz = 0.0, sz2 = 0.0;
    for (std::size_t k = burn_in; k < ev.size(); ++k) {
        sz += ev[k].size;
        sz2 += ev[k].size * ev[k].size;
    }
    const double m = static_cast<double>(ev.size() - burn_in);
    s.mean_size = sz / m;
    s.size_sd = std::sqrt(std::max(0.0, sz2 / m - s.mean_size * s.mean_size));
    if (ev.size() >= burn_in + 2)
        s.mean_interval = (ev.back().t - ev[burn_in].t) / static_cast<double>(ev.size() - burn_in - 1);
    return s;
}

inline void write_raster_csv(std::ostream& os, const SpikeRaster& r)
{
    char buf[64];
    os << "t,neuron\n";
    for (const auto& e : r.events) {
        std::snprintf(buf, sizeof buf, "%.17g,%u\n", e.t, e.neuron);
        os << buf;
    }
}

inline void write_events_csv(std::ostream& os, const std::vector<SyncEvent>& ev)
{
    char buf[64];
    os << "t,size\n";
    for (const auto& e : ev) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", e.t, e.size);
        os << buf;
    }
}

inline void write_spectrum_csv(std::ostream& os, const Spectrum& sp)
{
    char buf[64];
    os << "freq,power\n";
    for (std::size_t k = 0; k < sp.frequency.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", sp.frequency[k], sp.power[k]);
        os << buf;
    }
}

} // namespace mfblowup
