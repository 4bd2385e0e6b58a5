#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hies/format.hpp"
#include "hies/pruning.hpp"
#include "hies/scoring.hpp"
#include "hies/transformer.hpp"

namespace hies {

constexpr double kBoundTol = 1e-9;

struct BoundReport {
  std::string bound_name;
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;
  bool holds = false;
  std::string context;
};

inline BoundReport make_report(std::string name, double lhs, double rhs, std::string context) {
  BoundReport r;
  r.bound_name = std::move(name);
  r.lhs = lhs;
  r.rhs = rhs;
  r.slack = rhs - lhs;
  r.holds = lhs <= rhs + kBoundTol;
  r.context = std::move(context);
  return r;
}

inline std::string bound_reports_csv(const std::vector<BoundReport>& reports) {
  std::ostringstream os;
  os << "bound_name,lhs,rhs,slack,holds,context\n";
  for (const auto& r : reports)
    os << r.bound_name << "," << fmt_double(r.lhs) << "," << fmt_double(r.rhs) << ","
       << fmt_double(r.slack) << "," << (r.holds ? 1 : 0) << "," << r.context << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Spectral norms via power iteration on M^T M. The estimate at step t is
// ||M v_t||_2 for the current unit vector, which is nondecreasing in t and
// approaches sigma_max from below.
// ---------------------------------------------------------------------------

inline double power_iteration_norm(const Tensor& m, int iters, std::uint64_t seed,
                                   std::vector<double>* history = nullptr) {
  if (m.size() == 0) throw InputError("power iteration on an empty matrix");
  if (iters < 1) throw ConfigError("power iteration needs iters >= 1");
  bool all_zero = true;
  for (double v : m.flat())
    if (v != 0.0) {
      all_zero = false;
      break;
    }
  if (all_zero) {
    if (history) history->assign(static_cast<std::size_t>(iters), 0.0);
    return 0.0;
  }

  const int rows = m.rows(), cols = m.cols();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(cols), w(rows);
  auto draw_unit = [&]() {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& x : v) {
        x = dist(rng);
        norm += x * x;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
  };
  draw_unit();

  double estimate = 0.0;
  for (int t = 0; t < iters; ++t) {
    // w = M v
    double wn = 0.0;
    for (int i = 0; i < rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < cols; ++j) s += m.at(i, j) * v[j];
      w[i] = s;
      wn += s * s;
    }
    wn = std::sqrt(wn);
    if (wn == 0.0) {
      // v landed in the null space of a nonzero matrix; redraw and retry.
      draw_unit();
      if (history) history->push_back(estimate);
      continue;
    }
    estimate = wn;
    if (history) history->push_back(estimate);
    // v <- normalize(M^T w / ||w||)
    double vn = 0.0;
    for (int j = 0; j < cols; ++j) {
      double s = 0.0;
      for (int i = 0; i < rows; ++i) s += m.at(i, j) * w[i];
      v[j] = s / wn;
      vn += v[j] * v[j];
    }
    vn = std::sqrt(vn);
    for (auto& x : v) x /= vn;
  }
  return estimate;
}

// Converged spectral norm for bound arithmetic: iterate until the estimate
// stops moving in relative terms.
inline double spectral_norm(const Tensor& m, double rel_tol = 1e-14, int max_iters = 50000,
                            std::uint64_t seed = 0x5eedULL) {
  if (m.size() == 0) throw InputError("spectral norm of an empty matrix");
  std::vector<double> hist;
  double prev = -1.0, est = 0.0;
  // Run in chunks so we can stop early without re-randomizing.
  const int chunk = 64;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  const int rows = m.rows(), cols = m.cols();
  std::vector<double> v(cols), w(rows);
  double vn = 0.0;
  for (auto& x : v) {
    x = dist(rng);
    vn += x * x;
  }
  if (vn == 0.0) return power_iteration_norm(m, max_iters, seed + 1);
  vn = std::sqrt(vn);
  for (auto& x : v) x /= vn;
  int done = 0;
  while (done < max_iters) {
    for (int t = 0; t < chunk; ++t) {
      double wn = 0.0;
      for (int i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < cols; ++j) s += m.at(i, j) * v[j];
        w[i] = s;
        wn += s * s;
      }
      wn = std::sqrt(wn);
      if (wn == 0.0) return 0.0;
      est = wn;
      double nn = 0.0;
      for (int j = 0; j < cols; ++j) {
        double s = 0.0;
        for (int i = 0; i < rows; ++i) s += m.at(i, j) * w[i];
        v[j] = s / wn;
        nn += v[j] * v[j];
      }
      nn = std::sqrt(nn);
      for (auto& x : v) x /= nn;
    }
    done += chunk;
    if (prev >= 0.0 && std::abs(est - prev) <= rel_tol * std::max(1.0, est)) break;
    prev = est;
  }
  return est;
}

// sigma_max of the W^O block that consumes head h's d_v output dimensions,
// for every head of the given layer.
inline std::vector<double> blockwise_wo_norms(const GatedTransformer& model, int layer) {
  const ModelConfig& cfg = model.config();
  if (layer < 0 || layer >= cfg.num_layers) throw InputError("layer index out of range");
  const Tensor& wo = model.block(layer).wo;
  std::vector<double> out(static_cast<std::size_t>(cfg.num_heads), 0.0);
  for (int h = 0; h < cfg.num_heads; ++h) {
    Tensor blk = Tensor::matrix(cfg.d_v, wo.cols());
    for (int r = 0; r < cfg.d_v; ++r)
      for (int c = 0; c < wo.cols(); ++c) blk.at(r, c) = wo.at(h * cfg.d_v + r, c);
    out[h] = spectral_norm(blk);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy curvature.
// ---------------------------------------------------------------------------

inline void check_simplex(const std::vector<double>& p, const std::string& what) {
  if (p.empty()) throw InputError(what + ": empty probability vector");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= -1e-12)) throw InputError(what + ": negative probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InputError(what + ": probabilities sum to " + fmt_double(sum));
}

// Operator norm of the logit-space Hessian of cross-entropy.
// binary: p(1-p) for the sigmoid probability. multiclass: the top eigenvalue
// of diag(p) - p p^T, found by bisecting the rank-one-downdate secular
// equation between the two largest entries of p.
inline double logit_hessian_norm(const std::vector<double>& p, LossKind kind) {
  if (kind == LossKind::binary) {
    if (p.size() != 1 && p.size() != 2)
      throw InputError("binary curvature expects (p) or (p, 1-p)");
    const double q = p[0];
    if (!(q >= -1e-12 && q <= 1.0 + 1e-12)) throw InputError("binary probability outside [0,1]");
    if (p.size() == 2) check_simplex(p, "binary curvature");
    return q * (1.0 - q);
  }
  check_simplex(p, "multiclass curvature");
  std::vector<double> q;
  q.reserve(p.size());
  for (double v : p)
    if (v > 0.0) q.push_back(v);
  if (q.size() <= 1) return 0.0;  // one-hot
  std::sort(q.begin(), q.end(), std::greater<double>());
  const double p1 = q[0], p2 = q[1];
  if (p1 == p2) return p1;  // duplicated top entry is itself the top eigenvalue
  auto secular = [&](double lam) {
    double s = 1.0;
    for (double v : q) s -= v * v / (v - lam);
    return s;
  };
  double lo = p2, hi = p1;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (secular(mid) > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// Uniform draw from the simplex (normalized unit exponentials).
inline std::vector<double> random_simplex(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(std::numeric_limits<double>::min(), 1.0);
  std::vector<double> p(static_cast<std::size_t>(n));
  double sum = 0.0;
  for (auto& v : p) {
    v = -std::log(u(rng));
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

// ||p - q||_1^2 <= 4 [ (H(u) - H(p)) + (H(u) - H(q)) ] with u uniform on n points.
inline BoundReport entropy_tv_check(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size())
    throw InputError("entropy-tv: dimension mismatch " + std::to_string(p.size()) + " vs " +
                     std::to_string(q.size()));
  if (p.size() < 2) throw InputError("entropy-tv needs n >= 2");
  check_simplex(p, "entropy-tv p");
  check_simplex(q, "entropy-tv q");
  double l1 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) l1 += std::abs(p[i] - q[i]);
  const double log_n = std::log(static_cast<double>(p.size()));
  const double rhs = 4.0 * (2.0 * log_n - entropy(p) - entropy(q));
  return make_report("entropy-tv", l1 * l1, rhs, "n=" + std::to_string(p.size()));
}

// ---------------------------------------------------------------------------
// Lemma-style loss-increase bound on the linear-head configuration.
// ---------------------------------------------------------------------------

enum class CurvatureKind { exact, binary_plugin, multiclass_plugin };
enum class BoundNorm { full, blockwise };

inline std::string curvature_name(CurvatureKind c) {
  switch (c) {
    case CurvatureKind::exact: return "exact";
    case CurvatureKind::binary_plugin: return "binary_plugin";
    case CurvatureKind::multiclass_plugin: return "multiclass_plugin";
  }
  return "?";
}

namespace detail {

inline std::vector<double> softmax_vec(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

// Largest Hessian norm along the logit segment [z0, z1].
inline double segment_curvature(const std::vector<double>& z0, const std::vector<double>& z1,
                                LossKind kind) {
  if (kind == LossKind::binary) {
    const double a = z0[0], b = z1[0];
    if ((a <= 0.0 && b >= 0.0) || (a >= 0.0 && b <= 0.0)) return 0.25;
    const double closest = std::min(std::abs(a), std::abs(b));
    const double p = sigmoid(closest);
    return p * (1.0 - p);
  }
  const int grid = 32;
  double best = 0.0;
  std::vector<double> z(z0.size());
  for (int g = 0; g <= grid; ++g) {
    const double s = static_cast<double>(g) / grid;
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = z0[j] + s * (z1[j] - z0[j]);
    best = std::max(best, logit_hessian_norm(softmax_vec(z), LossKind::multiclass));
  }
  return best;
}

}  // namespace detail

// Empirical Delta L against the first-order + curvature upper bound, on the
// linear-head model where logits are exactly y * W^O.
inline BoundReport verify_loss_bound(const GatedTransformer& model, const PruneMask& mask,
                                     const Dataset& calib, CurvatureKind curvature,
                                     BoundNorm norm) {
  const ModelConfig& cfg = model.config();
  if (!cfg.linear_head)
    throw ConfigError("loss bound is only sound for the linear-head configuration");
  if (calib.empty()) throw InputError("empty calibration set");
  if (curvature == CurvatureKind::binary_plugin && cfg.loss_kind != LossKind::binary)
    throw ConfigError("binary curvature plug-in on a non-binary model");
  if (curvature == CurvatureKind::multiclass_plugin && cfg.loss_kind != LossKind::multiclass)
    throw ConfigError("multiclass curvature plug-in on a non-multiclass model");

  const GateVector open = GateVector::ones(cfg);
  const GateVector pruned = mask.to_gates();
  const CalibStats stats = compute_calib_stats(model, calib);

  double lhs = 0.0;
  double c = curvature == CurvatureKind::binary_plugin ? 0.25
           : curvature == CurvatureKind::multiclass_plugin ? 0.5 : 0.0;
  for (const auto& ex : calib.items) {
    ForwardPass full;
    model.run_forward(ex, open, full, /*want_records=*/false);
    ForwardPass cut;
    model.run_forward(ex, pruned, cut, /*want_records=*/false);
    lhs += cut.loss_value() - full.loss_value();
    if (curvature == CurvatureKind::exact) {
      const Tensor& z0 = full.logits;
      const Tensor& z1 = cut.logits;
      for (int t = 0; t < z0.rows(); ++t) {
        std::vector<double> a(z0.cols()), b(z1.cols());
        for (int j = 0; j < z0.cols(); ++j) {
          a[j] = z0.at(t, j);
          b[j] = z1.at(t, j);
        }
        c = std::max(c, detail::segment_curvature(a, b, cfg.loss_kind));
      }
    }
  }
  lhs /= static_cast<double>(calib.size());

  double first_order = 0.0;
  for (std::size_t i = 0; i < stats.his.size(); ++i)
    if (!mask.retain[i]) first_order += stats.his[i];

  double quad = 0.0;
  if (norm == BoundNorm::full) {
    const double wo2 = spectral_norm(model.block(0).wo);
    double sum = 0.0;
    for (std::size_t i = 0; i < stats.mean_sq_fro.size(); ++i)
      if (!mask.retain[i]) sum += stats.mean_sq_fro[i];
    quad = wo2 * wo2 * sum;
  } else {
    const auto blocks = blockwise_wo_norms(model, 0);
    for (std::size_t i = 0; i < stats.mean_sq_fro.size(); ++i)
      if (!mask.retain[i]) quad += blocks[i] * blocks[i] * stats.mean_sq_fro[i];
  }
  const double rhs = first_order + 0.5 * c * quad;

  std::ostringstream ctx;
  ctx << "rho=" << fmt_double(mask.rho) << ";k=" << mask.k
      << ";curvature=" << curvature_name(curvature)
      << ";norm=" << (norm == BoundNorm::full ? "full" : "blockwise") << ";c=" << fmt_double(c)
      << ";examples=" << stats.examples;
  return make_report("loss-bound", lhs, rhs, ctx.str());
}

// ---------------------------------------------------------------------------
// Quadratic-vs-first-order ratio.
// ---------------------------------------------------------------------------

struct QuadRatio {
  bool empty = false;      // nothing pruned: 0/0
  double empirical = 0.0;  // plug-in quadratic term over first-order term
  double bound = 0.0;      // (c/2) ||W^O||^2 max_h E||A_h|| / g
  double g = 0.0;          // min_h E[|cos phi_h| ||grad A_h||_F]
};

inline QuadRatio quad_ratio(const GatedTransformer& model, const Dataset& calib,
                            const PruneMask& mask, LossKind kind) {
  const CalibStats stats = compute_calib_stats(model, calib);
  const double c = kind == LossKind::binary ? 0.25 : 0.5;
  QuadRatio out;
  out.g = *std::min_element(stats.mean_align.begin(), stats.mean_align.end());
  if (out.g <= 0.0)
    throw InputError("degenerate gradient-activation alignment: g = 0");
  // Single attention sublayer in the bound; take the worst layer elsewhere.
  double wo2 = 0.0;
  for (int l = 0; l < model.config().num_layers; ++l)
    wo2 = std::max(wo2, spectral_norm(model.block(l).wo));
  const double max_fro = *std::max_element(stats.mean_fro.begin(), stats.mean_fro.end());
  out.bound = 0.5 * c * wo2 * wo2 * max_fro / out.g;

  double quad = 0.0, first = 0.0;
  for (std::size_t i = 0; i < stats.his.size(); ++i)
    if (!mask.retain[i]) {
      quad += stats.mean_sq_fro[i];
      first += stats.his[i];
    }
  if (mask.k == mask.total_heads()) {
    out.empty = true;
    return out;
  }
  out.empirical = (0.5 * c * wo2 * wo2 * quad) / first;
  return out;
}

// ---------------------------------------------------------------------------
// Generalization-gap constant and bound value.
// ---------------------------------------------------------------------------

enum class DeficitAgg { on_average, max };
enum class RepLength { mean, max };

struct GapOptions {
  double lipschitz = 1.0;        // L_ell
  double loss_bound = -1.0;      // B; < 0 means "max observed per-example loss"
  double m_override = -1.0;      // < 0 means "compute from V_h row norms"
  double n_override = -1.0;      // < 0 means "use representative length from data"
  RepLength rep_length = RepLength::mean;
  DeficitAgg agg = DeficitAgg::on_average;
};

struct GapBound {
  double m = 0.0;           // max_h max_j ||V_h(j,:)||_2
  double rep_n = 0.0;
  double c_ae = 0.0;        // sqrt(8) * M * sqrt(|H| rho log n)
  double deficit_sum = 0.0; // sum over pruned heads of aggregated AD
  double bound = 0.0;       // 2 L C_AE sqrt(deficit_sum) + B/N
};

inline GapBound gap_constant_from_stats(const CalibStats& stats, const PruneMask& mask,
                                        const GapOptions& opt = {}) {
  GapBound out;
  out.m = opt.m_override >= 0.0 ? opt.m_override : stats.max_v_rownorm;
  out.rep_n = opt.n_override >= 0.0
                  ? opt.n_override
                  : (opt.rep_length == RepLength::mean ? stats.mean_eff_len : stats.max_eff_len);
  if (out.rep_n < 2.0) throw InputError("representative length must be >= 2");
  const int total = mask.total_heads();
  out.c_ae = std::sqrt(8.0) * out.m * std::sqrt(total * mask.rho * std::log(out.rep_n));
  for (int i = 0; i < total; ++i)
    if (!mask.retain[i])
      out.deficit_sum += opt.agg == DeficitAgg::on_average ? (1.0 - stats.ae[i])
                                                           : (1.0 - stats.min_ae[i]);
  const double b = opt.loss_bound >= 0.0 ? opt.loss_bound : stats.max_example_loss;
  out.bound = 2.0 * opt.lipschitz * out.c_ae * std::sqrt(out.deficit_sum) +
              b / static_cast<double>(stats.examples);
  return out;
}

inline GapBound gap_constant(const GatedTransformer& model, const Dataset& calib,
                             const PruneMask& mask, const GapOptions& opt = {}) {
  return gap_constant_from_stats(compute_calib_stats(model, calib), mask, opt);
}

// ---------------------------------------------------------------------------
// Orthogonality diagnostic: per-head sample moments of the projected
// importance and entropy gradient directions over (example, token) samples.
// ---------------------------------------------------------------------------

struct OrthoDiagnostic {
  int layer = 0;
  int head = 0;
  long samples = 0;
  long zero_sign_samples = 0;  // tokens where alpha . g == 0 (subgradient 0 used)
  double cov_trace = 0.0;      // tr Cov(u~, v~)
  double mean_dot = 0.0;       // <E u~, E v~>
  double mean_u_norm = 0.0;
  double mean_v_norm = 0.0;
  double expected_inner = 0.0;  // E <u~, -v~>
};

inline std::vector<OrthoDiagnostic> ortho_diagnostic(const GatedTransformer& model,
                                                     const Dataset& calib, bool project = true) {
  if (calib.empty()) throw InputError("empty calibration set");
  const ModelConfig& cfg = model.config();
  const GateVector open = GateVector::ones(cfg);
  int n_max = 0;
  for (const auto& ex : calib.items) n_max = std::max(n_max, ex.effective_len());

  const std::size_t heads = static_cast<std::size_t>(cfg.total_heads());
  std::vector<std::vector<double>> sum_u(heads, std::vector<double>(n_max, 0.0));
  std::vector<std::vector<double>> sum_v(heads, std::vector<double>(n_max, 0.0));
  std::vector<Tensor> sum_uv(heads, Tensor::matrix(n_max, n_max));
  std::vector<double> sum_inner(heads, 0.0);
  std::vector<long> counts(heads, 0), zero_signs(heads, 0);

  std::vector<double> u(n_max), v(n_max);
  for (const auto& ex : calib.items) {
    ForwardPass fp;
    model.run_forward(ex, open, fp, /*want_records=*/true);
    model.run_backward(fp);
    for (std::size_t i = 0; i < fp.records.size(); ++i) {
      const HeadRecord& rec = fp.records[i];
      const int n = rec.effective_len;
      if (n < 2) continue;  // single-key rows project to zero; skip
      for (int t = 0; t < n; ++t) {
        // g = V_h (grad row)^T over valid keys.
        double dot = 0.0;
        for (int j = 0; j < n; ++j) {
          double gj = 0.0;
          for (int d = 0; d < rec.value_matrix.cols(); ++d)
            gj += rec.value_matrix.at(j, d) * rec.head_output_grad.at(t, d);
          u[j] = gj;
          dot += rec.attn_rows.at(t, j) * gj;
        }
        const double sign = dot > 0.0 ? 1.0 : (dot < 0.0 ? -1.0 : 0.0);
        if (sign == 0.0) ++zero_signs[i];
        for (int j = 0; j < n; ++j) {
          u[j] *= sign;
          const double a = std::max(rec.attn_rows.at(t, j), 1e-300);
          v[j] = 1.0 + std::log(a);
        }
        if (project) {
          // Anchored mean: constant vectors center to exact zeros.
          double mu = 0.0, mv = 0.0;
          for (int j = 0; j < n; ++j) {
            mu += u[j] - u[0];
            mv += v[j] - v[0];
          }
          mu = mu / n + u[0];
          mv = mv / n + v[0];
          for (int j = 0; j < n; ++j) {
            u[j] -= mu;
            v[j] -= mv;
          }
        }
        double inner = 0.0;
        for (int j = 0; j < n; ++j) {
          sum_u[i][j] += u[j];
          sum_v[i][j] += v[j];
          inner += u[j] * v[j];
          for (int k = 0; k < n; ++k) sum_uv[i].at(j, k) += u[j] * v[k];
        }
        sum_inner[i] += inner;
        ++counts[i];
      }
    }
  }

  std::vector<OrthoDiagnostic> out(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    OrthoDiagnostic& d = out[i];
    d.layer = static_cast<int>(i) / cfg.num_heads;
    d.head = static_cast<int>(i) % cfg.num_heads;
    d.samples = counts[i];
    d.zero_sign_samples = zero_signs[i];
    if (counts[i] == 0) continue;
    const double inv = 1.0 / static_cast<double>(counts[i]);
    double mdot = 0.0, mun = 0.0, mvn = 0.0, tr = 0.0;
    for (int j = 0; j < n_max; ++j) {
      const double mu = sum_u[i][j] * inv;
      const double mv = sum_v[i][j] * inv;
      mdot += mu * mv;
      mun += mu * mu;
      mvn += mv * mv;
      tr += sum_uv[i].at(j, j) * inv;
    }
    d.mean_dot = mdot;
    d.mean_u_norm = std::sqrt(mun);
    d.mean_v_norm = std::sqrt(mvn);
    d.cov_trace = tr - mdot;
    d.expected_inner = -sum_inner[i] * inv;
  }
  return out;
}

inline std::string ortho_to_jsonl(const std::vector<OrthoDiagnostic>& diags) {
  std::ostringstream os;
  for (const auto& d : diags) {
    nlohmann::ordered_json j{{"layer", d.layer},
                             {"head", d.head},
                             {"samples", d.samples},
                             {"zero_sign_samples", d.zero_sign_samples},
                             {"cov_trace", d.cov_trace},
                             {"mean_dot", d.mean_dot},
                             {"mean_u_norm", d.mean_u_norm},
                             {"mean_v_norm", d.mean_v_norm},
                             {"expected_inner", d.expected_inner}};
    os << j.dump() << "\n";
  }
  return os.str();
}

}  // namespace hies
