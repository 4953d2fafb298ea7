#include "peis/errors.hpp"
#include "peis/harness.hpp"

namespace peis {

double kalman_loglik(const StateSpaceModel& model, const Observations& y) {
  const auto* lg = dynamic_cast<const LinearGaussianModel*>(&model);
  if (lg == nullptr) throw ContractError("kalman_loglik needs a linear Gaussian model");
  const Mat& tr = lg->transition_matrix();
  const Mat& z = lg->signal_map();
  const Mat& h = lg->measurement_cov();
  const Mat& q = lg->noise_cov();
  Vec a = lg->initial_mean();
  Mat p = lg->initial_cov();
  double ll = 0.0;
  for (Eigen::Index t = 0; t < y.rows(); ++t) {
    const Vec v = y.row(t).transpose() - z * a;
    const Mat f = z * p * z.transpose() + h;
    Eigen::LLT<Mat> llt(f);
    if (llt.info() != Eigen::Success) throw NumericDomainError("kalman_loglik: singular prediction variance");
    ll += log_mvn(v, Vec::Zero(v.size()), f);
    const Mat gain = llt.solve(z * p).transpose();  // P Z' F^{-1}
    a += gain * v;
    p -= gain * z * p;
    p = 0.5 * (p + p.transpose()).eval();
    a = tr * a;
    p = tr * p * tr.transpose() + q;
  }
  return ll;
}

}  // namespace peis
