#include "covnet/features.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace covnet {

PcaResult pca_2d(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 3) throw ParameterError("PCA needs at least 3 samples");
  const std::size_t n = rows.size(), d = rows[0].size();
  if (d < 2) throw ParameterError("PCA needs at least 2 features");
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i].size() != d) throw ShapeError("PCA rows differ in length");
    for (std::size_t j = 0; j < d; ++j) x(i, j) = rows[i][j];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");

  PcaResult r;
  r.mean.assign(mu.data(), mu.data() + d);
  // Eigen returns ascending eigenvalues
  double total = 0;
  for (std::size_t k = 0; k < d; ++k) {
    const double ev = std::max(0.0, eig.eigenvalues()(static_cast<Eigen::Index>(d - 1 - k)));
    r.eigenvalues.push_back(ev);
    total += ev;
  }
  for (std::size_t k = 0; k < 2; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - k));
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    r.components[k].assign(v.data(), v.data() + d);
    r.explained_ratio[k] = total > 0 ? r.eigenvalues[k] / total : 0.0;
  }
  r.projection.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * r.components[k][j];
      r.projection[i][k] = s;
    }
  }
  return r;
}

template <typename T>
std::vector<std::vector<double>> extract_features(const ModelGraph<T>& model, const Tensor<T>& batch) {
  if (model.feature_layer < 0) throw ParameterError("model has no feature layer");
  ForwardPass<T> pass = forward_eval(model, batch, false);
  const Tensor<T>& f = pass.tape.value(pass.layer_outputs[static_cast<std::size_t>(model.feature_layer)]);
  const std::size_t n = f.dim(0), d = f.size() / n;
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i][j] = static_cast<double>(f[i * d + j]);
  }
  return out;
}

void write_pca_csv(const std::string& path, const std::vector<FeatureRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "id,label,pc1,pc2\n" << std::setprecision(17);
  for (const auto& r : rows) out << r.id << ',' << r.label << ',' << r.pc1 << ',' << r.pc2 << '\n';
  if (!out) throw DataError("write failed for " + path);
}

template std::vector<std::vector<double>> extract_features(const ModelGraph<float>&, const Tensor<float>&);
template std::vector<std::vector<double>> extract_features(const ModelGraph<double>&, const Tensor<double>&);

}  // namespace covnet
