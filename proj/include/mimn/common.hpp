#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mimn {

using Index = std::int64_t;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Input that is structurally valid but cannot be processed (e.g. an
// all-masked row fed to a masked softmax or pooling).
struct DegenerateInputError : Error {
  using Error::Error;
};

// API misuse: non-scalar loss, missing gradient, label out of range.
struct ContractError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

// Checkpoint or data file format violations.
struct FormatError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Non-finite loss during training.
struct DivergenceError : Error {
  using Error::Error;
};

inline std::string shape_str(const std::vector<Index>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

// Deterministic random source. All randomness in the project (weight init,
// shuffling, dropout, subsampling) flows through this wrapper so results do
// not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  Index index(Index n) { return static_cast<Index>(uniform() * static_cast<double>(n)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (Index i = static_cast<Index>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(index(i + 1))]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace mimn
