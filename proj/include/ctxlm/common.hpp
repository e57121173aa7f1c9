#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ctxlm {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

/// Base class for all library errors. `category` maps onto the CLI exit
/// codes: usage -> 1, data -> 2, numeric -> 3.
class Error : public std::runtime_error {
 public:
  enum class Category { usage, data, numeric };

  Error(std::string kind, Category category, const std::string& message)
      : std::runtime_error(kind + ": " + message),
        kind_(std::move(kind)),
        category_(category) {}

  const std::string& kind() const { return kind_; }
  Category category() const { return category_; }

 private:
  std::string kind_;
  Category category_;
};

#define CTXLM_ERROR(Name, Cat)                              \
  class Name : public ::ctxlm::Error {                     \
   public:                                                  \
    explicit Name(const std::string& message)               \
        : Error(#Name, ::ctxlm::Error::Category::Cat, message) {} \
  }

// corpus
CTXLM_ERROR(ParseError, data);
CTXLM_ERROR(SplitViolation, data);
CTXLM_ERROR(UnknownKey, data);
CTXLM_ERROR(NonMonotonicTimestamps, data);
CTXLM_ERROR(InvalidSpec, usage);
// tokenizer
CTXLM_ERROR(EmptyCorpus, data);
CTXLM_ERROR(InvalidTokenId, data);
CTXLM_ERROR(InvalidVocabCap, usage);
// model
CTXLM_ERROR(InvalidArch, usage);
CTXLM_ERROR(SequenceTooLong, data);
CTXLM_ERROR(MissingContext, data);
CTXLM_ERROR(NonFiniteLoss, numeric);
CTXLM_ERROR(Unreachable, usage);
CTXLM_ERROR(CheckpointError, data);
// trainer
CTXLM_ERROR(DivergedLoss, numeric);
CTXLM_ERROR(EmptySplit, data);
CTXLM_ERROR(UnknownSpeaker, data);
CTXLM_ERROR(VocabMismatch, data);
// metrics
CTXLM_ERROR(EmptyInput, data);
CTXLM_ERROR(InsufficientRuns, usage);
// embedder
CTXLM_ERROR(MissingEmbedding, data);
// cli
CTXLM_ERROR(UsageError, usage);
CTXLM_ERROR(StageFailed, data);

#undef CTXLM_ERROR

/// Deterministic random source. mt19937_64 output is pinned by the standard,
/// but the std:: distributions are not, so sampling is done by hand here to
/// keep every seed reproducible across compilers and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double next_unit() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = next_unit();
    } while (u1 <= 0.0);
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ctxlm
