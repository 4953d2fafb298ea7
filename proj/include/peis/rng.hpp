#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace peis {

/// Seed derivation: every stream in the library is a pure function of a root
/// seed and a path of integers (trajectory, replication, method id, ...).
/// Uses the splitmix64 finalizer as the mixing step.
std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path);

/// Random stream. Never global; passed explicitly wherever randomness is used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return unif_(engine_); }
  double normal() { return norm_(engine_); }

  /// Gamma with the given shape and scale.
  double gamma(double shape, double scale) {
    return std::gamma_distribution<double>(shape, scale)(engine_);
  }
  /// Inverse gamma IG(shape, scale): density proportional to l^{-shape-1} exp(-scale/l).
  double inverse_gamma(double shape, double scale) { return 1.0 / gamma(shape, 1.0 / scale); }

  double student_t(double dof) { return std::student_t_distribution<double>(dof)(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
  std::normal_distribution<double> norm_{0.0, 1.0};
};

}  // namespace peis
