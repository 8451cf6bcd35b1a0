// SPDX-License-Identifier: Apache-2.0
//
// Plain statistics over double series. No gradients.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace tips {

// Row-major dense matrix for non-differentiable data (predictions, returns).
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
};

double mean_of(std::span<const double> x);
// Sample (n-1) standard deviation.
double stddev_of(std::span<const double> x);

// 1-based ranks, ties receive the average of their positions.
std::vector<double> average_ranks(std::span<const double> x);

// Returns 0 when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);
double spearman(std::span<const double> a, std::span<const double> b);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

bool is_constant(std::span<const double> x);

struct WelchResult {
  double t = 0.0;
  double dof = 0.0;
  // One-tailed p-value for H1: mean(a) > mean(b).
  double p_greater = 1.0;
};

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

// Upper tail P(T > t) of Student's t with `dof` degrees of freedom.
double student_t_upper(double t, double dof);

}  // namespace tips
