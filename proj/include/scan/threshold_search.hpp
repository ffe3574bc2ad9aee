#pragma once

// Genetic search for per-exit thresholds, evaluated against a LogitCache.
//
// A gene holds N bits per exit. Exit i decodes to
//     sigma_i = 1 - (0.3 / N) * popcount(bits of exit i),
// so sigma_i always lies in [0.7, 1.0]. Fitness is
//     acceleration + beta * (accuracy - baseline).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scan/errors.hpp"
#include "scan/inference.hpp"
#include "scan/random.hpp"

namespace scan {

struct Gene {
    std::vector<std::uint8_t> bits;

    bool operator==(const Gene&) const = default;
};

inline constexpr double kThresholdSpan = 0.3;

inline ThresholdVector decode(const Gene& gene, std::size_t bits_per_exit) {
    if (bits_per_exit == 0 || gene.bits.size() % bits_per_exit != 0) {
        throw ContractError("gene length " + std::to_string(gene.bits.size()) + " is not a multiple of " +
                            std::to_string(bits_per_exit));
    }
    ThresholdVector t;
    const double step = kThresholdSpan / static_cast<double>(bits_per_exit);
    for (std::size_t first = 0; first < gene.bits.size(); first += bits_per_exit) {
        std::size_t ones = 0;
        for (std::size_t b = 0; b < bits_per_exit; ++b) ones += gene.bits[first + b] != 0;
        t.sigma.push_back(1.0 - step * static_cast<double>(ones));
    }
    return t;
}

/// A gene decoding to the nearest representable thresholds (leading ones per segment).
inline Gene encode(const ThresholdVector& t, std::size_t bits_per_exit) {
    Gene g;
    for (double s : t.sigma) {
        const double raw = (1.0 - s) * static_cast<double>(bits_per_exit) / kThresholdSpan;
        const auto ones = static_cast<std::size_t>(std::clamp(std::lround(raw), 0L, static_cast<long>(bits_per_exit)));
        for (std::size_t b = 0; b < bits_per_exit; ++b) g.bits.push_back(b < ones ? 1 : 0);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Cache simulation

/// Threshold-independent per-row facts, computed once per cache.
struct CacheSummary {
    std::size_t n = 0, num_exits = 0;
    std::vector<double> max_prob;          // [n, C]
    std::vector<std::uint32_t> argmax;     // [n, C]
    std::vector<std::uint32_t> ensemble;   // [n]
    std::vector<std::int32_t> labels;
    std::vector<std::uint64_t> cost;       // C exits + ensemble
    bool degenerate = false;               // every sample has identical softmax rows

    explicit CacheSummary(const LogitCache& c) : n(c.n), num_exits(c.num_exits), labels(c.labels) {
        c.validate();
        if (c.n == 0) throw ContractError("logit cache is empty");
        const std::size_t C = c.num_exits;
        max_prob.resize(n * C);
        argmax.resize(n * C);
        ensemble.resize(n);
        std::vector<std::span<const float>> rows(C);
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t i = 0; i < C; ++i) {
                rows[i] = c.row(s, i);
                const std::size_t best = scan::argmax(rows[i].begin(), rows[i].end());
                argmax[s * C + i] = static_cast<std::uint32_t>(best);
                max_prob[s * C + i] = rows[i][best];
            }
            ensemble[s] = static_cast<std::uint32_t>(ensemble_argmax(rows));
        }
        for (std::size_t i = 0; i < C; ++i) cost.push_back(c.cumulative_cost[i]);
        cost.push_back(c.ensemble_cost);
        const std::size_t block = C * c.num_classes;
        degenerate = true;
        for (std::size_t s = 1; s < n && degenerate; ++s) {
            degenerate = std::equal(c.probs.begin(), c.probs.begin() + static_cast<std::ptrdiff_t>(block),
                                    c.probs.begin() + static_cast<std::ptrdiff_t>(s * block));
        }
    }

    std::uint64_t full_cost() const { return cost[num_exits - 1]; }

    /// Accuracy of the deepest exit alone.
    double deepest_accuracy() const {
        std::size_t ok = 0;
        for (std::size_t s = 0; s < n; ++s) ok += static_cast<std::int32_t>(argmax[s * num_exits + num_exits - 1]) == labels[s];
        return static_cast<double>(ok) / static_cast<double>(n);
    }
};

struct SimulationResult {
    double accuracy = 0.0;
    double mean_cost = 0.0;
    double acceleration = 0.0;
    std::vector<std::size_t> histogram;  // C exits + ensemble
    std::vector<std::size_t> exits;      // per sample, filled on request
};

inline SimulationResult simulate_from_cache(const ThresholdVector& thresholds, const CacheSummary& cache,
                                            bool record_exits = false) {
    const std::size_t C = cache.num_exits;
    thresholds.validate(C);
    SimulationResult r;
    r.histogram.assign(C + 1, 0);
    if (record_exits) r.exits.resize(cache.n);
    std::size_t correct = 0;
    long double cost = 0;
    for (std::size_t s = 0; s < cache.n; ++s) {
        std::size_t exit = C;
        std::uint32_t pred = cache.ensemble[s];
        for (std::size_t i = 0; i < C; ++i) {
            if (exit_accepts(cache.max_prob[s * C + i], thresholds.sigma[i])) {
                exit = i;
                pred = cache.argmax[s * C + i];
                break;
            }
        }
        ++r.histogram[exit];
        if (record_exits) r.exits[s] = exit;
        correct += static_cast<std::int32_t>(pred) == cache.labels[s];
        cost += cache.cost[exit];
    }
    const double n = static_cast<double>(cache.n);
    r.accuracy = static_cast<double>(correct) / n;
    r.mean_cost = static_cast<double>(cost / n);
    r.acceleration = static_cast<double>(static_cast<long double>(cache.full_cost()) * n / cost);
    return r;
}

inline SimulationResult simulate_from_cache(const ThresholdVector& thresholds, const LogitCache& cache,
                                            bool record_exits = false) {
    return simulate_from_cache(thresholds, CacheSummary(cache), record_exits);
}

struct FitnessReport {
    double fitness = 0.0;
    double acceleration_ratio = 0.0;
    double accuracy = 0.0;
    double baseline = 0.0;
};

inline double combine_fitness(double acceleration, double accuracy, double baseline, double beta) {
    return acceleration + beta * (accuracy - baseline);
}

inline FitnessReport fitness(const ThresholdVector& t, const CacheSummary& cache, double beta, double baseline) {
    const auto sim = simulate_from_cache(t, cache);
    return {combine_fitness(sim.acceleration, sim.accuracy, baseline, beta), sim.acceleration, sim.accuracy, baseline};
}

inline FitnessReport fitness(const Gene& gene, const CacheSummary& cache, double beta, double baseline,
                             std::size_t bits_per_exit) {
    return fitness(decode(gene, bits_per_exit), cache, beta, baseline);
}

// ---------------------------------------------------------------------------
// Genetic algorithm

struct GAConfig {
    std::size_t population = 50;
    std::size_t generations = 100;
    double mutation_rate = 0.01;  // per bit
    double crossover_rate = 1.0;  // probability a selected pair is recombined
    std::size_t elitism = 2;
    double beta = 100.0;
    std::size_t bits_per_exit = 30;
    std::uint64_t seed = 0;

    void validate() const {
        if (population < 2) throw ConfigError("search.population must be >= 2");
        if (generations < 1) throw ConfigError("search.generations must be >= 1");
        if (!(mutation_rate >= 0.0 && mutation_rate <= 1.0)) throw ConfigError("search.mutation_rate must lie in [0,1]");
        if (!(crossover_rate >= 0.0 && crossover_rate <= 1.0)) {
            throw ConfigError("search.crossover_rate must lie in [0,1]");
        }
        if (elitism > population) throw ConfigError("search.elitism must not exceed search.population");
        if (bits_per_exit < 1) throw ConfigError("search.bits_per_exit must be >= 1");
    }
};

struct GenerationLog {
    std::size_t generation = 0;  // 1-based
    double best = 0.0;           // best fitness in this generation
    double best_ever = 0.0;
    double mean = 0.0;
    bool degenerate = false;     // degenerate cache or no fitness spread
};

struct SearchResult {
    ThresholdVector thresholds;
    Gene gene;
    FitnessReport report;
    std::vector<GenerationLog> log;
    bool degenerate_cache = false;
};

/// Roulette-wheel draw. Weights are the fitness values, shifted up by the most
/// negative value when any is negative, plus a small floor so that a zero
/// weight never makes the wheel empty.
inline std::size_t weighted_select(const std::vector<double>& fitness_values, Rng& rng) {
    const double lo = *std::min_element(fitness_values.begin(), fitness_values.end());
    const double shift = lo < 0.0 ? -lo : 0.0;
    constexpr double kFloor = 1e-12;
    double total = 0.0;
    for (double f : fitness_values) total += f + shift + kFloor;
    double x = rng.uniform() * total;
    for (std::size_t i = 0; i < fitness_values.size(); ++i) {
        x -= fitness_values[i] + shift + kFloor;
        if (x < 0.0) return i;
    }
    return fitness_values.size() - 1;
}

inline std::string generation_log_csv(const std::vector<GenerationLog>& log) {
    std::ostringstream os;
    os << "generation,best,best_ever,mean,degenerate\n";
    for (const auto& g : log) {
        os << g.generation << ',' << shortest(g.best) << ',' << shortest(g.best_ever) << ',' << shortest(g.mean) << ',' << (g.degenerate ? 1 : 0)
           << '\n';
    }
    return os.str();
}

/// Genes of the initial population are uniform random bits unless `initial`
/// is given.
inline SearchResult search(const CacheSummary& cache, const GAConfig& cfg, double baseline,
                           const std::vector<Gene>* initial = nullptr) {
    cfg.validate();
    const std::size_t L = cache.num_exits * cfg.bits_per_exit;
    Rng rng(cfg.seed);
    std::vector<Gene> population;
    if (initial) {
        population = *initial;
        if (population.size() != cfg.population) throw ContractError("initial population has the wrong size");
        for (const auto& g : population) {
            if (g.bits.size() != L) throw ContractError("initial gene has the wrong length");
        }
    } else {
        for (std::size_t p = 0; p < cfg.population; ++p) {
            Gene g;
            g.bits.resize(L);
            for (auto& b : g.bits) b = rng.bernoulli(0.5) ? 1 : 0;
            population.push_back(std::move(g));
        }
    }

    SearchResult result;
    result.degenerate_cache = cache.degenerate;
    double best_ever = -std::numeric_limits<double>::infinity();
    std::vector<double> fit(cfg.population);
    std::vector<FitnessReport> reports(cfg.population);
    for (std::size_t gen = 1; gen <= cfg.generations; ++gen) {
        for (std::size_t p = 0; p < population.size(); ++p) {
            reports[p] = fitness(population[p], cache, cfg.beta, baseline, cfg.bits_per_exit);
            fit[p] = reports[p].fitness;
            if (fit[p] > best_ever) {
                best_ever = fit[p];
                result.gene = population[p];
                result.report = reports[p];
            }
        }
        const auto [lo, hi] = std::minmax_element(fit.begin(), fit.end());
        GenerationLog entry;
        entry.generation = gen;
        entry.best = *hi;
        entry.best_ever = best_ever;
        entry.mean = std::accumulate(fit.begin(), fit.end(), 0.0) / static_cast<double>(fit.size());
        entry.degenerate = cache.degenerate || *lo == *hi;
        result.log.push_back(entry);
        if (gen == cfg.generations) break;

        // Elites survive unchanged; ties keep population order.
        std::vector<std::size_t> rank(population.size());
        std::iota(rank.begin(), rank.end(), std::size_t{0});
        std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return fit[a] > fit[b]; });
        std::vector<Gene> next;
        next.reserve(cfg.population);
        for (std::size_t e = 0; e < cfg.elitism; ++e) next.push_back(population[rank[e]]);
        while (next.size() < cfg.population) {
            Gene a = population[weighted_select(fit, rng)];
            Gene b = population[weighted_select(fit, rng)];
            if (L > 1 && rng.bernoulli(cfg.crossover_rate)) {
                const std::size_t cut = 1 + static_cast<std::size_t>(rng.below(L - 1));
                for (std::size_t k = cut; k < L; ++k) std::swap(a.bits[k], b.bits[k]);
            }
            for (Gene* child : {&a, &b}) {
                if (next.size() == cfg.population) break;
                if (cfg.mutation_rate > 0.0) {
                    for (auto& bit : child->bits) {
                        if (rng.bernoulli(cfg.mutation_rate)) bit ^= 1;
                    }
                }
                next.push_back(std::move(*child));
            }
        }
        population = std::move(next);
    }
    result.thresholds = decode(result.gene, cfg.bits_per_exit);
    return result;
}

inline SearchResult search(const LogitCache& cache, const GAConfig& cfg) {
    const CacheSummary summary(cache);
    return search(summary, cfg, summary.deepest_accuracy());
}

/// Exhaustive search over every popcount combination (testing aid; the
/// fitness of a gene depends only on its per-exit popcounts).
inline SearchResult brute_force_search(const CacheSummary& cache, double beta, double baseline,
                                       std::size_t bits_per_exit) {
    const std::size_t C = cache.num_exits;
    std::vector<std::size_t> ones(C, 0);
    SearchResult best;
    best.report.fitness = -std::numeric_limits<double>::infinity();
    while (true) {
        ThresholdVector t;
        for (auto k : ones) t.sigma.push_back(1.0 - kThresholdSpan / static_cast<double>(bits_per_exit) * static_cast<double>(k));
        const auto rep = fitness(t, cache, beta, baseline);
        if (rep.fitness > best.report.fitness) {
            best.report = rep;
            best.thresholds = t;
        }
        std::size_t d = 0;
        while (d < C && ones[d] == bits_per_exit) ones[d++] = 0;
        if (d == C) break;
        ++ones[d];
    }
    best.gene = encode(best.thresholds, bits_per_exit);
    return best;
}

}  // namespace scan
