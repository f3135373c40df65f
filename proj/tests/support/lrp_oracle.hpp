#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "relprop/numerics/rng.hpp"
#include "relprop/numerics/tensor.hpp"

namespace relprop_test {

using namespace relprop;

// Independent scalar implementation: plain loops, Jacobians by long-double
// central differences.
namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // [in][out]

inline Vec linear(const Vec& x, const Mat& w, const Vec& b) {
  Vec y(b);
  for (std::size_t j = 0; j < b.size(); ++j) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      y[j] += x[i] * w[i][j];
    }
  }
  return y;
}

inline long double layer_norm_at(const std::vector<long double>& x, const Vec& g, const Vec& c, double eps, std::size_t j) {
  long double mean = 0;
  for (auto v : x) {
    mean += v;
  }
  mean /= x.size();
  long double var = 0;
  for (auto v : x) {
    var += (v - mean) * (v - mean);
  }
  var /= x.size();
  return g[j] * (x[j] - mean) / std::sqrt(var + eps) + c[j];
}

inline Vec layer_norm(const Vec& x, const Vec& g, const Vec& c, double eps) {
  std::vector<long double> xl(x.begin(), x.end());
  Vec y(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    y[j] = static_cast<double>(layer_norm_at(xl, g, c, eps, j));
  }
  return y;
}

// d f_j / d x_i
inline Mat layer_norm_jacobian(const Vec& x, const Vec& g, const Vec& c, double eps) {
  const long double h = 1e-6L;
  Mat jac(x.size(), Vec(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<long double> plus(x.begin(), x.end());
    std::vector<long double> minus(x.begin(), x.end());
    plus[i] += h;
    minus[i] -= h;
    for (std::size_t j = 0; j < x.size(); ++j) {
      jac[j][i] = static_cast<double>((layer_norm_at(plus, g, c, eps, j) - layer_norm_at(minus, g, c, eps, j)) /
                                      (2 * h));
    }
  }
  return jac;
}

// R_i = sum_j R_j (alpha z_ij+ / z_j+ + beta z_ij- / z_j-); z[j][i].
inline Vec alpha_beta(const Mat& z, const Vec& bias, const Vec& r, double alpha, double beta) {
  const std::size_t n_in = z.empty() ? 0 : z[0].size();
  Vec out(n_in, 0.0);
  for (std::size_t j = 0; j < z.size(); ++j) {
    double zp = std::max(bias[j], 0.0);
    double zn = std::min(bias[j], 0.0);
    for (std::size_t i = 0; i < n_in; ++i) {
      zp += std::max(z[j][i], 0.0);
      zn += std::min(z[j][i], 0.0);
    }
    for (std::size_t i = 0; i < n_in; ++i) {
      if (zp >= 1e-12) {
        out[i] += r[j] * alpha * std::max(z[j][i], 0.0) / zp;
      }
      if (-zn >= 1e-12) {
        out[i] += r[j] * beta * std::min(z[j][i], 0.0) / zn;
      }
    }
  }
  return out;
}

inline Vec linear_relevance(const Vec& x, const Mat& w, const Vec& b, const Vec& r, double alpha, double beta) {
  Mat z(b.size(), Vec(x.size()));
  for (std::size_t j = 0; j < b.size(); ++j) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      z[j][i] = x[i] * w[i][j];
    }
  }
  return alpha_beta(z, b, r, alpha, beta);
}

inline Vec layer_norm_relevance(const Vec& x, const Vec& g, const Vec& c, double eps, const Vec& r, double alpha,
                         double beta) {
  const Mat jac = layer_norm_jacobian(x, g, c, eps);
  const double n = static_cast<double>(x.size());
  Mat z(x.size(), Vec(x.size()));
  for (std::size_t j = 0; j < x.size(); ++j) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      z[j][i] = c[j] / n + jac[j][i] * x[i];
    }
  }
  return alpha_beta(z, Vec(x.size(), 0.0), r, alpha, beta);
}

}  // namespace oracle

inline oracle::Vec random_vec(SeededRng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  oracle::Vec v(n);
  for (auto& x : v) {
    x = rng.uniform(lo, hi);
  }
  return v;
}

inline oracle::Mat random_mat(SeededRng& rng, std::size_t in, std::size_t out) {
  oracle::Mat m(in);
  for (auto& row : m) {
    row = random_vec(rng, out);
  }
  return m;
}

inline BasicTensor<double> to_tensor(const oracle::Mat& m) {
  std::vector<double> flat;
  for (const auto& row : m) {
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return BasicTensor<double>({m.size(), m[0].size()}, flat);
}

inline BasicTensor<double> to_tensor(const oracle::Vec& v) { return BasicTensor<double>({v.size()}, v); }

}  // namespace relprop_test
