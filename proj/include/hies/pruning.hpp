#pragma once

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hies/scoring.hpp"
#include "hies/transformer.hpp"

namespace hies {

struct PruneMask {
  int num_layers = 0;
  int num_heads = 0;
  std::vector<std::uint8_t> retain;  // row-major by layer; 1 = retained
  int k = 0;                         // retained count
  double rho = 0.0;                  // pruned fraction

  int total_heads() const { return num_layers * num_heads; }
  bool retained(HeadId h) const {
    return retain[static_cast<std::size_t>(h.layer) * num_heads + h.head] != 0;
  }

  GateVector to_gates() const {
    GateVector g(num_layers, num_heads);
    for (int l = 0; l < num_layers; ++l)
      for (int h = 0; h < num_heads; ++h)
        g.set({l, h}, retained({l, h}) ? 1.0 : 0.0);
    return g;
  }

  friend bool operator==(const PruneMask& a, const PruneMask& b) {
    return a.num_layers == b.num_layers && a.num_heads == b.num_heads && a.retain == b.retain &&
           a.k == b.k && a.rho == b.rho;
  }
};

// k = round((1 - rho) * |H|), ties to even.
inline int k_from_ratio(int total_heads, double rho) {
  if (rho < 0.0 || rho > 1.0) throw ConfigError("pruning ratio must lie in [0,1]");
  const int prev = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const int k = static_cast<int>(std::nearbyint((1.0 - rho) * total_heads));
  std::fesetround(prev);
  return k;
}

// Retains exactly the k largest-score heads; ties broken by (layer, head)
// order, lower index retained first. This minimizes the pruned-score sum over
// all masks with sum m_h = k.
inline PruneMask select_topk(const std::vector<double>& scores, int num_layers, int num_heads,
                             int k) {
  const int total = num_layers * num_heads;
  if (scores.size() != static_cast<std::size_t>(total))
    throw InputError("score vector size does not match layer/head grid");
  if (k < 0 || k > total)
    throw ConfigError("budget k = " + std::to_string(k) + " outside [0, " + std::to_string(total) +
                      "]");
  for (double s : scores)
    if (!std::isfinite(s)) throw InputError("non-finite score");

  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  PruneMask m;
  m.num_layers = num_layers;
  m.num_heads = num_heads;
  m.retain.assign(static_cast<std::size_t>(total), 0);
  for (int i = 0; i < k; ++i) m.retain[order[i]] = 1;
  m.k = k;
  m.rho = static_cast<double>(total - k) / total;
  return m;
}

// Sum of scores over pruned heads.
inline double risk(const std::vector<double>& scores, const PruneMask& mask) {
  if (scores.size() != mask.retain.size())
    throw InputError("risk: score vector and mask cover different head sets");
  double r = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!mask.retain[i]) r += scores[i];
  return r;
}

enum class Criterion { random, l2, his, ad, hies };

inline Criterion criterion_from_name(const std::string& s) {
  if (s == "random") return Criterion::random;
  if (s == "l2") return Criterion::l2;
  if (s == "his") return Criterion::his;
  if (s == "ad") return Criterion::ad;
  if (s == "hies") return Criterion::hies;
  throw ConfigError("unknown pruning criterion '" + s + "'");
}

inline std::string criterion_name(Criterion c) {
  switch (c) {
    case Criterion::random: return "random";
    case Criterion::l2: return "l2";
    case Criterion::his: return "his";
    case Criterion::ad: return "ad";
    case Criterion::hies: return "hies";
  }
  return "?";
}

// l2 norm of head h's parameters: W_h^Q, W_h^K, W_h^V and the W^O block that
// consumes head h's d_v output dimensions.
inline std::vector<double> l2_head_norms(const GatedTransformer& model) {
  const ModelConfig& cfg = model.config();
  std::vector<double> out(static_cast<std::size_t>(cfg.total_heads()), 0.0);
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& b = model.block(l);
    for (int h = 0; h < cfg.num_heads; ++h) {
      double sq = 0.0;
      for (const Tensor* w : {&b.wq[h], &b.wk[h], &b.wv[h]})
        for (double v : w->flat()) sq += v * v;
      for (int r = h * cfg.d_v; r < (h + 1) * cfg.d_v; ++r)
        for (int c = 0; c < b.wo.cols(); ++c) {
          const double v = b.wo.at(r, c);
          sq += v * v;
        }
      out[static_cast<std::size_t>(l) * cfg.num_heads + h] = std::sqrt(sq);
    }
  }
  return out;
}

// Baseline selectors. random: uniform without replacement, seeded. l2: retain
// largest parameter norms. his: retain largest HIS. ad: prune smallest AE
// first, i.e. retain largest AE (the entropy-based baseline is deliberately
// opposite in direction to the entropy term inside HIES).
inline PruneMask baseline_mask(Criterion kind, const GatedTransformer* model,
                               const ScoreTable* scores, int k, std::uint64_t seed) {
  switch (kind) {
    case Criterion::random: {
      if (!model && !scores) throw InputError("random baseline needs a head grid source");
      const int L = model ? model->config().num_layers : scores->num_layers;
      const int H = model ? model->config().num_heads : scores->num_heads;
      const int total = L * H;
      if (k < 0 || k > total) throw ConfigError("budget k outside [0, total]");
      std::vector<int> order(total);
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(seed);
      std::shuffle(order.begin(), order.end(), rng);
      PruneMask m;
      m.num_layers = L;
      m.num_heads = H;
      m.retain.assign(static_cast<std::size_t>(total), 0);
      for (int i = 0; i < k; ++i) m.retain[order[i]] = 1;
      m.k = k;
      m.rho = static_cast<double>(total - k) / total;
      return m;
    }
    case Criterion::l2: {
      if (!model) throw InputError("l2 baseline needs model parameters");
      const auto norms = l2_head_norms(*model);
      return select_topk(norms, model->config().num_layers, model->config().num_heads, k);
    }
    case Criterion::his: {
      if (!scores) throw InputError("his baseline needs a score table");
      return select_topk(scores->column("his"), scores->num_layers, scores->num_heads, k);
    }
    case Criterion::ad: {
      if (!scores) throw InputError("ad baseline needs a score table");
      return select_topk(scores->column("ae"), scores->num_layers, scores->num_heads, k);
    }
    case Criterion::hies: {
      if (!scores) throw InputError("hies criterion needs a score table");
      return select_topk(scores->column("hies"), scores->num_layers, scores->num_heads, k);
    }
  }
  throw ConfigError("unknown pruning criterion");
}

// Gate-based pruned view; forwards are exactly the full model's forwards with
// gates == mask.
class PrunedView {
 public:
  PrunedView(const GatedTransformer& model, const PruneMask& mask)
      : model_(&model), gates_(mask.to_gates()) {
    if (mask.num_layers != model.config().num_layers ||
        mask.num_heads != model.config().num_heads)
      throw InputError("mask shape does not match model");
  }

  PrunedView(const GatedTransformer& model, GateVector gates)
      : model_(&model), gates_(std::move(gates)) {}

  static PrunedView unpruned(const GatedTransformer& model) {
    return PrunedView(model, GateVector::ones(model.config()));
  }

  double loss(const Example& ex) const { return model_->loss_only(ex, gates_); }
  Tensor logits(const Example& ex) const { return model_->logits_of(ex, gates_); }
  int predict(const Example& ex) const { return model_->predict(ex, gates_); }
  const GateVector& gates() const { return gates_; }
  const GatedTransformer& model() const { return *model_; }

 private:
  const GatedTransformer* model_;
  GateVector gates_;
};

inline PrunedView apply_mask(const GatedTransformer& model, const PruneMask& mask) {
  return PrunedView(model, mask);
}

inline nlohmann::ordered_json mask_to_json(const PruneMask& m) {
  nlohmann::ordered_json j;
  j["k"] = m.k;
  j["rho"] = m.rho;
  j["num_layers"] = m.num_layers;
  j["num_heads"] = m.num_heads;
  auto retained = nlohmann::ordered_json::array();
  for (int l = 0; l < m.num_layers; ++l)
    for (int h = 0; h < m.num_heads; ++h)
      if (m.retained({l, h})) retained.push_back({l, h});
  j["retained"] = retained;
  return j;
}

inline PruneMask mask_from_json(const nlohmann::json& j) {
  PruneMask m;
  m.k = j.at("k").get<int>();
  m.rho = j.at("rho").get<double>();
  m.num_layers = j.at("num_layers").get<int>();
  m.num_heads = j.at("num_heads").get<int>();
  m.retain.assign(static_cast<std::size_t>(m.total_heads()), 0);
  int count = 0;
  for (const auto& pair : j.at("retained")) {
    const int l = pair.at(0).get<int>();
    const int h = pair.at(1).get<int>();
    if (l < 0 || l >= m.num_layers || h < 0 || h >= m.num_heads)
      throw IoError("mask entry outside the head grid");
    m.retain[static_cast<std::size_t>(l) * m.num_heads + h] = 1;
    ++count;
  }
  if (count != m.k) throw IoError("mask k does not match its retained list");
  return m;
}

}  // namespace hies
