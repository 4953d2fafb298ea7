#include "peis/linalg.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>

namespace peis {

double log_sum_exp(std::span<const double> v) {
  double mx = kNegInf;
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

Mat psd_sqrt(const Mat& s) {
  Eigen::LLT<Mat> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  Vec d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * d.asDiagonal();
}

double log_mvn(const Vec& x, const Vec& mean, const Mat& cov) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success) return kNegInf;
  const Vec r = llt.matrixL().solve(x - mean);
  const double half_logdet = llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * static_cast<double>(x.size()) * kLog2Pi - half_logdet - 0.5 * r.squaredNorm();
}

std::vector<Vec> rows_of(const Observations& y) {
  std::vector<Vec> out(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index t = 0; t < y.rows(); ++t) out[static_cast<std::size_t>(t)] = y.row(t).transpose();
  return out;
}

}  // namespace peis
