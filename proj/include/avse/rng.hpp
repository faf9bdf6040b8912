#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace avse {

// Deterministic random stream. Normal draws use the Box-Muller transform
// with an explicit cached spare so the full state (engine + spare) can be
// serialized for bit-exact training resumption; std::normal_distribution
// keeps unspecified internal state and is avoided.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  // uniform in [0, 1)
  double uniform() {
    return (gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0,1] so log() is finite
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // circularly symmetric complex standard normal: independent re/im parts
  // with variance 1/2 each so E[|z|^2] = 1
  void complex_normal(double& re, double& im) {
    re = normal() * M_SQRT1_2;
    im = normal() * M_SQRT1_2;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_ << " " << (has_spare_ ? 1 : 0) << " ";
    os.precision(17);
    os << spare_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    is >> gen_ >> flag >> spare_;
    if (is.fail()) throw std::runtime_error("bad rng state string");
    has_spare_ = flag != 0;
  }

  bool operator==(const Rng& o) const {
    return gen_ == o.gen_ && has_spare_ == o.has_spare_ &&
           (!has_spare_ || spare_ == o.spare_);
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64; used to derive independent child streams from (seed, label)
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return mix_seed(seed ^ mix_seed(stream + 0x517cc1b727220a95ull));
}

}  // namespace avse
