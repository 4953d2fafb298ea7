#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace peis {

// States, signals and observations in this library are at most four
// dimensional, so small vectors live on the stack.
inline constexpr int kMaxDim = 4;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

/// n x k observation matrix, one row per period.
using Observations = Eigen::MatrixXd;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(sum(exp(v))) with max subtraction; -inf for an empty or all -inf input.
double log_sum_exp(std::span<const double> v);

/// Any A with A A' = S for symmetric positive semi-definite S. Lower
/// triangular when S is positive definite; eigen-based otherwise.
Mat psd_sqrt(const Mat& s);

/// Log density of N(mean, cov) at x. Returns -inf if cov is not positive definite.
double log_mvn(const Vec& x, const Vec& mean, const Mat& cov);

/// Rows of an observation matrix as small vectors.
std::vector<Vec> rows_of(const Observations& y);

}  // namespace peis
