#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace vnode {

// All randomness in the project funnels through this generator so that runs
// are reproducible from a single seed and the stream can be serialized into
// checkpoints. The uniform mapping is fixed here (rather than delegated to
// std::uniform_real_distribution, whose algorithm is implementation-defined)
// so the same build produces the same stream everywhere.
class Rng {
public:
    Rng() : gen_(0) {}
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    void seed(std::uint64_t s) { gen_.seed(s); }

    // uniform in [0, 1) with 53 random bits
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    std::uint64_t integer(std::uint64_t n) {
        const std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= lim);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates
    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(integer(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // derive an independent stream (e.g. per-epoch augmentation)
    Rng fork(std::uint64_t salt) {
        std::uint64_t s = gen_() ^ (salt * 0x9E3779B97F4A7C15ull);
        return Rng(s);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
    }

private:
    std::mt19937_64 gen_;
};

} // namespace vnode
