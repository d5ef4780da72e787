#pragma once

#include <vector>

namespace kk {

struct GaussRule {
  std::vector<double> nodes;    // on [-1, 1], ascending
  std::vector<double> weights;  // sum to 2
};

/// n-point Gauss-Legendre rule (Golub-Welsch). Cached; safe to call concurrently.
const GaussRule& gauss_legendre(int n);

/// Composite rule on [a, b] (a > b allowed, weights then negative) with
/// `panels` equal panels of `n` nodes each.
void composite_gauss(double a, double b, int panels, int n, std::vector<double>& x,
                     std::vector<double>& w);

}  // namespace kk
