#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hies/format.hpp"
#include "hies/transformer.hpp"

namespace hies {

enum class NormScope { global, per_layer };

inline std::string norm_scope_name(NormScope s) {
  return s == NormScope::global ? "global" : "per-layer";
}

inline NormScope norm_scope_from_name(const std::string& s) {
  if (s == "global") return NormScope::global;
  if (s == "per-layer" || s == "per_layer") return NormScope::per_layer;
  throw ConfigError("unknown normalization scope '" + s + "'");
}

// Shannon entropy of a row restricted to its first `n` entries, natural log,
// with 0*log(0) := 0.
inline double row_entropy(const Tensor& rows, int r, int n) {
  double h = 0.0;
  for (int j = 0; j < n; ++j) {
    const double p = rows.at(r, j);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// Token-averaged, length-normalized attention entropy of one head on one
// example; 1 = every row uniform, 0 = every row one-hot.
inline double ae_of_record(const HeadRecord& rec) {
  const int n = rec.effective_len;
  if (n < 2)
    throw InputError("attention entropy needs effective length >= 2, got " + std::to_string(n));
  double sum = 0.0;
  for (int t = 0; t < n; ++t) sum += row_entropy(rec.attn_rows, t, n);
  return sum / (n * std::log(static_cast<double>(n)));
}

// Per-example HIS contribution: |dL/dm_h| = |<grad A_h, A_h>_F|. Token
// averaging enters through the loss convention (the bound-verification model
// averages its per-token losses), so no further scaling is applied here.
inline double his_of_record(const HeadRecord& rec) {
  return std::abs(rec.dloss_dgate);
}

// One deterministic sweep over the calibration set with all gates open.
// Collects everything scoring and the bound verifiers need per head.
struct CalibStats {
  int num_layers = 0;
  int num_heads = 0;
  long examples = 0;
  std::vector<double> his;         // E |dL/dm_h|
  std::vector<double> ae;          // E AE_h(x)
  std::vector<double> min_ae;      // min over examples of AE_h(x)
  std::vector<double> mean_sq_fro; // E ||A_h||_F^2 (token-averaged)
  std::vector<double> mean_fro;    // E ||A_h||_F
  std::vector<double> mean_align;  // E |cos phi_h| * ||grad A_h||_F
  double max_v_rownorm = 0.0;      // max_h max_j ||V_h(j,:)||_2 over the set
  double max_example_loss = 0.0;
  double mean_eff_len = 0.0;
  double max_eff_len = 0.0;

  std::size_t head_index(HeadId h) const {
    return static_cast<std::size_t>(h.layer) * num_heads + h.head;
  }
};

inline CalibStats compute_calib_stats(const GatedTransformer& model, const Dataset& calib) {
  if (calib.empty()) throw InputError("empty calibration set");
  const ModelConfig& cfg = model.config();
  const GateVector open = GateVector::ones(cfg);
  CalibStats s;
  s.num_layers = cfg.num_layers;
  s.num_heads = cfg.num_heads;
  const std::size_t total = static_cast<std::size_t>(cfg.total_heads());
  s.his.assign(total, 0.0);
  s.ae.assign(total, 0.0);
  s.min_ae.assign(total, 1.0);
  s.mean_sq_fro.assign(total, 0.0);
  s.mean_fro.assign(total, 0.0);
  s.mean_align.assign(total, 0.0);

  for (const auto& ex : calib.items) {
    ForwardPass fp;
    model.run_forward(ex, open, fp, /*want_records=*/true);
    model.run_backward(fp);
    const double loss = fp.loss_value();
    s.max_example_loss = std::max(s.max_example_loss, loss);
    for (std::size_t i = 0; i < fp.records.size(); ++i) {
      const HeadRecord& rec = fp.records[i];
      const int n = rec.effective_len;
      s.his[i] += his_of_record(rec);
      const double ae = ae_of_record(rec);
      s.ae[i] += ae;
      s.min_ae[i] = std::min(s.min_ae[i], ae);
      double sq = 0.0;
      for (int t = 0; t < n; ++t)
        for (int j = 0; j < rec.head_output.cols(); ++j) {
          const double a = rec.head_output.at(t, j);
          sq += a * a;
        }
      sq /= n;
      s.mean_sq_fro[i] += sq;
      const double fro = std::sqrt(sq);
      s.mean_fro[i] += fro;
      // |cos phi| * ||grad||_F equals |<grad, A>_F| / ||A||_F.
      s.mean_align[i] += fro > 0.0 ? his_of_record(rec) / fro : 0.0;
      for (int t = 0; t < n; ++t) {
        double rn = 0.0;
        for (int j = 0; j < rec.value_matrix.cols(); ++j) {
          const double v = rec.value_matrix.at(t, j);
          rn += v * v;
        }
        s.max_v_rownorm = std::max(s.max_v_rownorm, std::sqrt(rn));
      }
    }
    s.mean_eff_len += static_cast<double>(ex.effective_len());
    s.max_eff_len = std::max(s.max_eff_len, static_cast<double>(ex.effective_len()));
    ++s.examples;
  }
  const double inv = 1.0 / static_cast<double>(s.examples);
  for (std::size_t i = 0; i < total; ++i) {
    s.his[i] *= inv;
    s.ae[i] *= inv;
    s.mean_sq_fro[i] *= inv;
    s.mean_fro[i] *= inv;
    s.mean_align[i] *= inv;
  }
  s.mean_eff_len *= inv;
  return s;
}

inline std::vector<double> his_per_head(const GatedTransformer& model, const Dataset& calib) {
  return compute_calib_stats(model, calib).his;
}

inline std::vector<double> ae_per_head(const GatedTransformer& model, const Dataset& calib) {
  return compute_calib_stats(model, calib).ae;
}

// (s - min) / (max - min) within each scope; a constant scope maps to 0.5
// everywhere (rank-neutral).
inline std::vector<double> minmax_normalize(const std::vector<double>& scores, NormScope scope,
                                            int num_layers, int num_heads) {
  if (scores.size() != static_cast<std::size_t>(num_layers) * num_heads)
    throw InputError("score vector size does not match layer/head grid");
  for (double v : scores)
    if (!std::isfinite(v)) throw InputError("non-finite score");
  std::vector<double> out(scores.size());
  auto normalize_range = [&](std::size_t lo, std::size_t hi) {
    double mn = scores[lo], mx = scores[lo];
    for (std::size_t i = lo; i < hi; ++i) {
      mn = std::min(mn, scores[i]);
      mx = std::max(mx, scores[i]);
    }
    if (mx == mn) {
      for (std::size_t i = lo; i < hi; ++i) out[i] = 0.5;
    } else {
      for (std::size_t i = lo; i < hi; ++i) out[i] = (scores[i] - mn) / (mx - mn);
    }
  };
  if (scope == NormScope::global) {
    normalize_range(0, scores.size());
  } else {
    for (int l = 0; l < num_layers; ++l)
      normalize_range(static_cast<std::size_t>(l) * num_heads,
                      static_cast<std::size_t>(l + 1) * num_heads);
  }
  return out;
}

inline double hies_combine(double his_hat, double ae_hat, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0))
    throw ConfigError("alpha must lie in [0,1), got " + fmt_double(alpha));
  if (his_hat < 0.0 || his_hat > 1.0 || ae_hat < 0.0 || ae_hat > 1.0)
    throw InputError("normalized scores must lie in [0,1]");
  return alpha * his_hat + (1.0 - alpha) * (1.0 - ae_hat);
}

struct HeadScore {
  double his = 0.0;
  double ae = 0.0;
  double ad = 0.0;
  double his_hat = 0.0;
  double ae_hat = 0.0;
  double hies = 0.0;
};

struct ScoreTable {
  int num_layers = 0;
  int num_heads = 0;
  long calib_size = 0;
  double alpha = 0.5;
  NormScope scope = NormScope::global;
  std::vector<HeadScore> heads;  // row-major by layer

  std::size_t index(HeadId h) const {
    return static_cast<std::size_t>(h.layer) * num_heads + h.head;
  }
  const HeadScore& at(HeadId h) const { return heads[index(h)]; }

  std::vector<double> column(const std::string& metric) const {
    std::vector<double> v(heads.size());
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const HeadScore& s = heads[i];
      if (metric == "his") v[i] = s.his;
      else if (metric == "ae") v[i] = s.ae;
      else if (metric == "ad") v[i] = s.ad;
      else if (metric == "his_hat") v[i] = s.his_hat;
      else if (metric == "ae_hat") v[i] = s.ae_hat;
      else if (metric == "hies") v[i] = s.hies;
      else throw ConfigError("unknown score metric '" + metric + "'");
    }
    return v;
  }
};

inline ScoreTable score_table_from_raw(const std::vector<double>& his,
                                       const std::vector<double>& ae, int num_layers,
                                       int num_heads, double alpha, NormScope scope,
                                       long calib_size) {
  ScoreTable t;
  t.num_layers = num_layers;
  t.num_heads = num_heads;
  t.alpha = alpha;
  t.scope = scope;
  t.calib_size = calib_size;
  const auto his_hat = minmax_normalize(his, scope, num_layers, num_heads);
  const auto ae_hat = minmax_normalize(ae, scope, num_layers, num_heads);
  t.heads.resize(his.size());
  for (std::size_t i = 0; i < his.size(); ++i) {
    HeadScore& s = t.heads[i];
    s.his = his[i];
    s.ae = ae[i];
    s.ad = 1.0 - ae[i];
    s.his_hat = his_hat[i];
    s.ae_hat = ae_hat[i];
    s.hies = hies_combine(his_hat[i], ae_hat[i], alpha);
  }
  return t;
}

inline ScoreTable build_score_table(const GatedTransformer& model, const Dataset& calib,
                                    double alpha, NormScope scope = NormScope::global) {
  const CalibStats stats = compute_calib_stats(model, calib);
  return score_table_from_raw(stats.his, stats.ae, stats.num_layers, stats.num_heads, alpha,
                              scope, stats.examples);
}

inline std::string score_table_to_jsonl(const ScoreTable& t) {
  std::ostringstream os;
  for (int l = 0; l < t.num_layers; ++l)
    for (int h = 0; h < t.num_heads; ++h) {
      const HeadScore& s = t.at({l, h});
      nlohmann::ordered_json j{{"layer", l},       {"head", h},       {"his", s.his},
                               {"ae", s.ae},       {"ad", s.ad},      {"his_hat", s.his_hat},
                               {"ae_hat", s.ae_hat}, {"hies", s.hies}};
      os << j.dump() << "\n";
    }
  return os.str();
}

inline ScoreTable score_table_from_jsonl(std::istream& in, double alpha, NormScope scope) {
  std::vector<nlohmann::json> rows;
  std::string line;
  int max_layer = -1, max_head = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("malformed score record: ") + e.what());
    }
    const int layer = j.at("layer").get<int>();
    const int head = j.at("head").get<int>();
    if (layer < 0 || head < 0) throw IoError("score record with a negative head index");
    max_layer = std::max(max_layer, layer);
    max_head = std::max(max_head, head);
    rows.push_back(std::move(j));
  }
  if (rows.empty()) throw IoError("score file holds no records");
  ScoreTable t;
  t.num_layers = max_layer + 1;
  t.num_heads = max_head + 1;
  t.alpha = alpha;
  t.scope = scope;
  t.heads.assign(static_cast<std::size_t>(t.num_layers) * t.num_heads, HeadScore{});
  std::vector<bool> seen(t.heads.size(), false);
  for (const auto& j : rows) {
    const HeadId id{j.at("layer").get<int>(), j.at("head").get<int>()};
    const std::size_t i = t.index(id);
    HeadScore& s = t.heads[i];
    s.his = j.at("his").get<double>();
    s.ae = j.at("ae").get<double>();
    s.ad = j.value("ad", 1.0 - s.ae);
    s.his_hat = j.at("his_hat").get<double>();
    s.ae_hat = j.at("ae_hat").get<double>();
    s.hies = hies_combine(s.his_hat, s.ae_hat, alpha);
    seen[i] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw IoError("score file is missing a (layer, head) record");
  return t;
}

// layers x heads grid of one metric.
inline std::string heatmap_csv(const ScoreTable& t, const std::string& metric) {
  const std::vector<double> col = t.column(metric);
  std::ostringstream os;
  for (int l = 0; l < t.num_layers; ++l) {
    for (int h = 0; h < t.num_heads; ++h) {
      if (h) os << ",";
      os << fmt_double(col[static_cast<std::size_t>(l) * t.num_heads + h]);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace hies
