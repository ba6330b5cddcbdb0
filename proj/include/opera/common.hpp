#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace opera {

// Error taxonomy. Every module throws one of these; the CLI maps them to
// exit status 1 with the message on stderr.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvalidInputError : Error { using Error::Error; };   // bad data (non-finite samples, short wave)
struct ShapeError : Error { using Error::Error; };          // tensor shape mismatch
struct ConfigError : Error { using Error::Error; };         // invalid configuration
struct ContractError : Error { using Error::Error; };       // precondition violated by caller
struct IndexError : Error { using Error::Error; };          // index out of range
struct TrainingError : Error { using Error::Error; };       // NaN loss / NaN gradient
struct IoError : Error { using Error::Error; };             // file I/O
struct CompletenessError : Error { using Error::Error; };   // missing table cell / fixture row

// Deterministic RNG. std::mt19937_64 has a standard-specified sequence; the
// distributions below are hand-mapped so streams are reproducible across
// standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw ContractError("Rng::uniform_int: n must be positive");
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do { x = engine_(); } while (x >= limit);
        return static_cast<int64_t>(x % un);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (no spare caching; one fresh pair per call)
    double normal() {
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // truncated normal: resample while |x| > 2*std
    double trunc_normal(double stddev) {
        double x = 0.0;
        do { x = normal() * stddev; } while (std::abs(x) > 2.0 * stddev);
        return x;
    }

    // derive an independent substream from (this seed, stream index)
    static uint64_t mix(uint64_t seed, uint64_t stream) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
};

// Worker cap for data-parallel loops; 1 (the default) keeps byte-level
// determinism trivial. Parallel kernels partition work per output element,
// so results are identical for any thread count.
int thread_budget();
void set_thread_budget(int n);

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, one per
// worker; every index is computed by exactly one worker, so the result is
// byte-identical for any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

// little-endian binary IO helpers
namespace le {

// the on-disk formats are little-endian; plain memcpy is only correct there
static_assert(std::endian::native == std::endian::little,
              "binary IO helpers assume a little-endian host");

template <typename T>
void write(std::string& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T read(const std::string& in, size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw IoError("unexpected end of binary stream");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace le

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace opera
