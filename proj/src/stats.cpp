// SPDX-License-Identifier: Apache-2.0
#include "tips/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "tips/error.hpp"

namespace tips {

double mean_of(std::span<const double> x) {
  if (x.empty()) throw DataError("mean of an empty series");
  double total = 0.0;
  for (double v : x) total += v;
  return total / static_cast<double>(x.size());
}

double stddev_of(std::span<const double> x) {
  if (x.size() < 2) throw DataError("standard deviation needs at least two observations");
  const double mu = mean_of(x);
  double ss = 0.0;
  for (double v : x) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("pearson: length mismatch");
  if (a.size() < 2) throw DataError("pearson: need at least two observations");
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  auto ra = average_ranks(a);
  auto rb = average_ranks(b);
  return pearson(ra, rb);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("cosine_similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

bool is_constant(std::span<const double> x) {
  return std::adjacent_find(x.begin(), x.end(), std::not_equal_to<>()) == x.end();
}

double student_t_upper(double t, double dof) {
  if (std::isnan(t)) return 1.0;
  if (std::isinf(t)) return t > 0 ? 0.0 : 1.0;
  boost::math::students_t dist(dof);
  return boost::math::cdf(boost::math::complement(dist, t));
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("welch_t_test: each sample needs >= 2 values");
  const double va = std::pow(stddev_of(a), 2) / static_cast<double>(a.size());
  const double vb = std::pow(stddev_of(b), 2) / static_cast<double>(b.size());
  WelchResult res;
  const double diff = mean_of(a) - mean_of(b);
  const double se = std::sqrt(va + vb);
  if (se == 0.0) {
    res.t = diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
    res.dof = static_cast<double>(a.size() + b.size() - 2);
    res.p_greater = diff == 0.0 ? 0.5 : (diff > 0 ? 0.0 : 1.0);
    return res;
  }
  res.t = diff / se;
  res.dof = (va + vb) * (va + vb) /
            (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  res.p_greater = student_t_upper(res.t, res.dof);
  return res;
}

}  // namespace tips
