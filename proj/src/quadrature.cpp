#include "kk/quadrature.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include <Eigen/Eigenvalues>

#include "kk/errors.hpp"

namespace kk {

namespace {

GaussRule golub_welsch(int n) {
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double b = k / std::sqrt(4.0 * k * k - 1.0);
    J(k, k - 1) = b;
    J(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  GaussRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int k = 0; k < n; ++k) {
    rule.nodes[k] = es.eigenvalues()(k);
    const double v = es.eigenvectors()(0, k);
    rule.weights[k] = 2.0 * v * v;
  }
  // Symmetrize: removes eigen-solver noise and makes odd moments vanish exactly.
  for (int k = 0; k < n / 2; ++k) {
    const int j = n - 1 - k;
    const double x = 0.5 * (rule.nodes[j] - rule.nodes[k]);
    const double w = 0.5 * (rule.weights[j] + rule.weights[k]);
    rule.nodes[k] = -x;
    rule.nodes[j] = x;
    rule.weights[k] = rule.weights[j] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

}  // namespace

const GaussRule& gauss_legendre(int n) {
  if (n < 1 || n > 512) throw DomainError("gauss_legendre: node count out of range");
  static std::mutex mu;
  static std::map<int, std::unique_ptr<GaussRule>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<GaussRule>(golub_welsch(n));
  return *slot;
}

void composite_gauss(double a, double b, int panels, int n, std::vector<double>& x,
                     std::vector<double>& w) {
  const GaussRule& rule = gauss_legendre(n);
  x.clear();
  w.clear();
  x.reserve(static_cast<size_t>(panels) * n);
  w.reserve(static_cast<size_t>(panels) * n);
  const double h = (b - a) / panels;
  for (int p = 0; p < panels; ++p) {
    const double lo = a + p * h;
    for (int k = 0; k < n; ++k) {
      x.push_back(lo + 0.5 * h * (rule.nodes[k] + 1.0));
      w.push_back(0.5 * h * rule.weights[k]);
    }
  }
}

}  // namespace kk
