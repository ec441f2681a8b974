#pragma once

// Independent reference implementations used only by tests: explicit loops,
// no tensor engine on the checked path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat make_mat(std::size_t r, std::size_t c, double v = 0.0) {
  return Mat(r, std::vector<double>(c, v));
}

inline Mat from_flat(const std::vector<double>& flat, std::size_t r,
                     std::size_t c) {
  Mat m = make_mat(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = flat[i * c + j];
  return m;
}

inline std::vector<double> to_flat(const Mat& m) {
  std::vector<double> flat;
  for (const auto& row : m)
    flat.insert(flat.end(), row.begin(), row.end());
  return flat;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c = make_mat(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t t = 0; t < b.size(); ++t)
        c[i][j] += a[i][t] * b[t][j];
  return c;
}

inline Mat affine(const Mat& x, const Mat& w, const std::vector<double>& b) {
  Mat y = matmul(x, w);
  for (auto& row : y)
    for (std::size_t j = 0; j < b.size(); ++j) row[j] += b[j];
  return y;
}

inline std::vector<double> softmax_row(const std::vector<double>& row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> out(row.size());
  double s = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    out[i] = std::exp(row[i] - mx);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

inline Mat layernorm(const Mat& x, const std::vector<double>& gain,
                     const std::vector<double>& bias, double eps = 1e-5) {
  Mat y = x;
  const std::size_t d = gain.size();
  for (auto& row : y) {
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i)
      row[i] = (row[i] - mu) * inv * gain[i] + bias[i];
  }
  return y;
}

struct AttnWeights {
  Mat wq, wk, wv;
  std::vector<double> bq, bk, bv;
};

// softmax(bias + QK^T/sqrt(d)) V + x, all explicit loops.
inline Mat masked_attention(const Mat& x, const Mat& f, const Mat& bias,
                            const AttnWeights& p, const Mat* q_pos = nullptr,
                            const Mat* k_pos = nullptr) {
  const std::size_t d = p.wq.size();
  Mat xq = x;
  if (q_pos) {
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) xq[i][j] += (*q_pos)[i][j];
  }
  Mat fk = f;
  if (k_pos) {
    for (std::size_t i = 0; i < f.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) fk[i][j] += (*k_pos)[i][j];
  }
  const Mat q = affine(xq, p.wq, p.bq);
  const Mat k = affine(fk, p.wk, p.bk);
  const Mat v = affine(f, p.wv, p.bv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Mat out = make_mat(x.size(), d);
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> logits(f.size());
    for (std::size_t j = 0; j < f.size(); ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += q[i][t] * k[j][t];
      logits[j] = s * scale + bias[i][j];
    }
    const std::vector<double> att = softmax_row(logits);
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < f.size(); ++j) s += att[j] * v[j][c];
      out[i][c] = s + x[i][c];
    }
  }
  return out;
}

inline Mat self_attention(const Mat& x, const AttnWeights& p,
                          const Mat* pos = nullptr) {
  const std::size_t d = p.wq.size();
  Mat xp = x;
  if (pos) {
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) xp[i][j] += (*pos)[i][j];
  }
  const Mat q = affine(xp, p.wq, p.bq);
  const Mat k = affine(xp, p.wk, p.bk);
  const Mat v = affine(x, p.wv, p.bv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Mat out = make_mat(x.size(), d);
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> logits(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += q[i][t] * k[j][t];
      logits[j] = s * scale;
    }
    const std::vector<double> att = softmax_row(logits);
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) s += att[j] * v[j][c];
      out[i][c] = s;
    }
  }
  return out;
}

// per-channel 2x2 block mean on [h x w x c] flat data
inline std::vector<double> block_mean_pool(const std::vector<double>& f,
                                           std::size_t h, std::size_t w,
                                           std::size_t c) {
  std::vector<double> out(h / 2 * (w / 2) * c, 0.0);
  for (std::size_t y = 0; y < h / 2; ++y)
    for (std::size_t x = 0; x < w / 2; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            s += f[((2 * y + dy) * w + 2 * x + dx) * c + ch];
        out[(y * (w / 2) + x) * c + ch] = s / 4.0;
      }
  return out;
}

// Exhaustive assignment search: tries queries for gt columns in increasing
// index order, so the first strict optimum found is the lexicographically
// smallest among ties.
struct BruteForceResult {
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> assignment;  // gt j -> query
};

inline void brute_force_rec(const Mat& cost, std::size_t j,
                            std::vector<bool>& used,
                            std::vector<std::size_t>& current, double acc,
                            BruteForceResult& best) {
  const std::size_t m = cost.empty() ? 0 : cost[0].size();
  if (j == m) {
    if (acc < best.best_cost) {
      best.best_cost = acc;
      best.assignment = current;
    }
    return;
  }
  for (std::size_t q = 0; q < cost.size(); ++q) {
    if (used[q]) continue;
    used[q] = true;
    current.push_back(q);
    brute_force_rec(cost, j + 1, used, current, acc + cost[q][j], best);
    current.pop_back();
    used[q] = false;
  }
}

inline BruteForceResult brute_force_assignment(const Mat& cost) {
  BruteForceResult best;
  std::vector<bool> used(cost.size(), false);
  std::vector<std::size_t> current;
  brute_force_rec(cost, 0, used, current, 0.0, best);
  return best;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

inline double bce(const std::vector<double>& logits,
                  const std::vector<std::uint8_t>& target) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits[i]);
    const double t = target[i] ? 1.0 : 0.0;
    s += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  return s / static_cast<double>(logits.size());
}

inline double dice(const std::vector<double>& logits,
                   const std::vector<std::uint8_t>& target, double eps = 1.0) {
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits[i]);
    inter += p * (target[i] ? 1.0 : 0.0);
    sp += p;
    st += target[i] ? 1.0 : 0.0;
  }
  return 1.0 - (2.0 * inter + eps) / (sp + st + eps);
}

}  // namespace oracle
