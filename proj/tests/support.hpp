#pragma once

// Test-side helpers: random inputs, a central finite-difference gradient checker,
// and brute-force oracles written directly on raw buffers (no library ops).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "cgd/tensor.hpp"

namespace cgd::test {

using Rng = std::mt19937_64;

inline Tensor uniform(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Values bounded away from zero: |x| in [gap, 1].
inline Tensor away_from_zero(Shape shape, Rng& rng, double gap = 0.05, bool requires_grad = true) {
  std::uniform_real_distribution<double> mag(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Random values with pairwise gaps of at least `gap` (a shuffled ladder plus small noise).
inline Tensor well_separated(Shape shape, Rng& rng, double gap = 0.02, bool requires_grad = true) {
  std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  std::uniform_real_distribution<double> jitter(0.0, 0.25 * gap);
  for (auto& x : v) x = 0.1 + x * gap + jitter(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

struct GradCheck {
  double max_rel_error = 0.0;  // over elements not already within the absolute floor
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  bool ok = true;
};

/**
 * Compares backward() against central differences (h = 1e-5). The scalar objective
 * is sum(f(inputs) * R) for a fixed random R, so every output element matters.
 * An element passes when |analytic - numeric| < abs_floor or the relative error < rel_tol.
 */
inline GradCheck check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                                 Rng& rng, double rel_tol = 1e-4, double abs_floor = 1e-7, double h = 1e-5) {
  Tensor probe;
  {
    NoGradGuard g;
    probe = f(inputs);
  }
  Tensor weights = uniform(probe.shape(), rng, 0.5, 1.5, false);
  auto objective = [&](const std::vector<Tensor>& in) {
    Tensor out = f(in);
    return out.ndim() == 0 ? scale(out, weights[0]) : sum(mul(out, weights));
  };
  for (auto& t : inputs) t.zero_grad();
  backward(objective(inputs));

  GradCheck r;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      double plus, minus;
      {
        NoGradGuard g;
        data[i] = orig + h;
        plus = objective(inputs).item();
        data[i] = orig - h;
        minus = objective(inputs).item();
        data[i] = orig;
      }
      double numeric = (plus - minus) / (2.0 * h);
      double abs_err = std::abs(analytic[i] - numeric);
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      ++r.checked;
      const double scale = std::max(std::abs(analytic[i]), std::abs(numeric));
      if (scale < abs_floor) continue;
      double rel = abs_err / scale;
      r.max_rel_error = std::max(r.max_rel_error, rel);
      if (rel >= rel_tol) r.ok = false;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Oracles

/// Direct 6-loop cross-correlation (plus the batch loop), zero padding.
inline std::vector<double> conv2d_oracle(std::span<const double> x, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                                         std::span<const double> wt, std::size_t o, std::size_t k, std::size_t stride,
                                         std::size_t pad, std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                long ix = static_cast<long>(xo * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += x[((b * c + ic) * h + iy) * w + ix] * wt[((oc * c + ic) * k + ky) * k + kx];
              }
          out[((b * o + oc) * oh + y) * ow + xo] = acc;
        }
  return out;
}

inline std::vector<double> matmul_oracle(std::span<const double> a, std::span<const double> b, std::size_t m, std::size_t k,
                                         std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

/// Exhaustive batch-hard triplet loss: every (anchor, positive, negative) distance is scanned.
inline double triplet_oracle(std::span<const double> x, std::span<const int> labels, std::size_t d, double margin,
                             bool soft) {
  const std::size_t n = labels.size();
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t q = 0; q < d; ++q) s += (x[i * d + q] - x[j * d + q]) * (x[i * d + q] - x[j * d + q]);
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double hardest_pos = 0.0, hardest_neg = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) hardest_pos = std::max(hardest_pos, dist(a, j));
      else hardest_neg = std::min(hardest_neg, dist(a, j));
    }
    double gap = hardest_pos - hardest_neg;
    total += soft ? std::log(1.0 + std::exp(gap)) : std::max(0.0, margin + gap);
  }
  return total / static_cast<double>(n);
}

/// Cosine similarities and a full stable sort per query, written independently of knn_search.
inline std::vector<std::vector<std::size_t>> knn_oracle(const std::vector<std::vector<double>>& q,
                                                        const std::vector<std::vector<double>>& g,
                                                        const std::vector<std::size_t>& qids,
                                                        const std::vector<std::size_t>& gids, bool exclude_self) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (exclude_self && qids[i] == gids[j]) continue;
      double dot = 0, nq = 0, ng = 0;
      for (std::size_t t = 0; t < q[i].size(); ++t) {
        dot += q[i][t] * g[j][t];
        nq += q[i][t] * q[i][t];
        ng += g[j][t] * g[j][t];
      }
      all.emplace_back(dot / (std::sqrt(nq) * std::sqrt(ng)), j);
    }
    // id order first, so the stable sort leaves equal scores by ascending id
    std::sort(all.begin(), all.end(), [&](auto& a, auto& b) { return gids[a.second] < gids[b.second]; });
    std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return a.first > b.first; });
    std::vector<std::size_t> order;
    for (auto& [s, j] : all) order.push_back(j);
    out.push_back(order);
  }
  return out;
}

/// Per-query scan: hit at K if any of the first K labels matches.
inline std::map<std::size_t, double> recall_oracle(const std::vector<std::vector<std::size_t>>& rankings,
                                                   const std::vector<int>& qlabels, const std::vector<int>& glabels,
                                                   const std::vector<std::size_t>& ks) {
  std::map<std::size_t, double> out;
  for (auto k : ks) {
    std::size_t hits = 0, valid = 0;
    for (std::size_t i = 0; i < rankings.size(); ++i) {
      bool any = false, hit = false;
      for (std::size_t r = 0; r < rankings[i].size(); ++r) {
        if (glabels[rankings[i][r]] == qlabels[i]) {
          any = true;
          if (r < k) hit = true;
        }
      }
      if (!any) continue;
      ++valid;
      hits += hit;
    }
    out[k] = valid ? static_cast<double>(hits) / valid : 0.0;
  }
  return out;
}

}  // namespace cgd::test
