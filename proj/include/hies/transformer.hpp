#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hies/tape.hpp"
#include "hies/tensor.hpp"

namespace hies {

struct ModelConfig {
  int num_layers = 2;
  int num_heads = 4;   // per layer
  int d_model = 32;
  int d_k = 8;
  int d_v = 8;
  int num_classes = 2;
  int max_seq_len = 32;
  int vocab_size = 16;
  LossKind loss_kind = LossKind::multiclass;
  std::uint64_t seed = 1;
  // Bound-verification mode: one block, no MLP, no residual; per-token logits
  // Z = y * W^O with the loss averaged over valid tokens.
  bool linear_head = false;

  int mlp_hidden() const { return 4 * d_model; }
  int out_dim() const { return loss_kind == LossKind::binary ? 1 : num_classes; }
  int total_heads() const { return num_layers * num_heads; }

  void validate() const {
    if (num_layers < 1 || num_heads < 1 || d_model < 1 || d_k < 1 || d_v < 1 ||
        num_classes < 1 || max_seq_len < 1 || vocab_size < 1)
      throw ConfigError("all model dimensions must be >= 1");
    if (d_model != num_heads * d_v)
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal num_heads*d_v (" +
                        std::to_string(num_heads * d_v) + ")");
    if (loss_kind == LossKind::multiclass && num_classes < 2)
      throw ConfigError("multiclass loss needs num_classes >= 2");
    if (linear_head && num_layers != 1)
      throw ConfigError("linear-head mode is a single-block configuration");
  }
};

struct HeadId {
  int layer = 0;
  int head = 0;
  friend bool operator==(const HeadId&, const HeadId&) = default;
  friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

// Per-head gate values m_h in [0,1]; 1 = retained. Binary when used as a mask.
class GateVector {
 public:
  GateVector() = default;
  GateVector(int num_layers, int num_heads)
      : num_layers_(num_layers), num_heads_(num_heads),
        m_(static_cast<std::size_t>(num_layers) * num_heads, 1.0) {}

  static GateVector ones(const ModelConfig& cfg) { return GateVector(cfg.num_layers, cfg.num_heads); }

  double get(HeadId h) const { return m_[index(h)]; }
  void set(HeadId h, double v) {
    if (v < 0.0 || v > 1.0) throw ConfigError("gate value outside [0,1]");
    m_[index(h)] = v;
  }
  // Unchecked variant for finite-difference probes that nudge past the box.
  void set_unchecked(HeadId h, double v) { m_[index(h)] = v; }

  int num_layers() const { return num_layers_; }
  int num_heads() const { return num_heads_; }
  std::size_t size() const { return m_.size(); }
  const std::vector<double>& values() const { return m_; }

  std::size_t index(HeadId h) const {
    return static_cast<std::size_t>(h.layer) * num_heads_ + h.head;
  }

 private:
  int num_layers_ = 0;
  int num_heads_ = 0;
  std::vector<double> m_;
};

// Everything the scoring and analysis passes need from one head on one example.
// head_output is the pre-gate A_h; head_output_grad is the loss gradient taken
// at the head's output slot (the gated contribution), which coincides with
// grad A_h when the gate is 1.
struct HeadRecord {
  Tensor attn_rows;         // [n x n]; key columns beyond effective_len are exact zeros
  Tensor head_output;       // [n x d_v]
  Tensor head_output_grad;  // [n x d_v], filled by backward
  Tensor value_matrix;      // [n x d_v]
  int effective_len = 0;
  double dloss_dgate = 0.0;  // filled by backward
};

struct Example {
  std::vector<int> tokens;
  int label = 0;
  int n_valid = -1;  // -1: all tokens valid; otherwise tokens beyond this are padding

  int effective_len() const {
    return n_valid < 0 ? static_cast<int>(tokens.size()) : n_valid;
  }
};

struct Dataset {
  std::vector<Example> items;
  bool empty() const { return items.empty(); }
  std::size_t size() const { return items.size(); }
};

// One taped forward pass; owns the tape so gradients can be pulled afterwards.
struct ForwardPass {
  Tape tape;
  Var loss;
  Tensor logits;
  std::vector<HeadRecord> records;  // num_layers * num_heads, row-major by layer
  std::vector<Var> gate_vars;
  std::vector<Var> gated_vars;
  std::vector<Var> param_vars;      // aligned with GatedTransformer::params()
  std::vector<Tensor> param_grads;  // filled by backward

  ForwardPass() = default;
  ForwardPass(const ForwardPass&) = delete;
  ForwardPass& operator=(const ForwardPass&) = delete;

  double loss_value() const { return tape.val(loss)[0]; }
};

namespace detail {

inline Tensor sinusoidal_positions(int max_len, int d_model, double scale) {
  Tensor p = Tensor::matrix(max_len, d_model);
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double rate = std::pow(10000.0, static_cast<double>(i) / d_model);
      p.at(pos, i) = scale * std::sin(pos / rate);
      if (i + 1 < d_model) p.at(pos, i + 1) = scale * std::cos(pos / rate);
    }
  }
  return p;
}

}  // namespace detail

class GatedTransformer {
 public:
  struct Block {
    std::vector<Tensor> wq, wk, wv;  // per head: [d_model x d_k], [d_model x d_k], [d_model x d_v]
    Tensor wo;                       // [d_model x d_model], or [d_model x out_dim] in linear-head mode
    Tensor bo;                       // [1 x d_model] (absent in linear-head mode)
    Tensor ln1_g, ln1_b;             // [1 x d_model]
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;           // MLP
  };

  explicit GatedTransformer(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    init_params();
    pos_ = detail::sinusoidal_positions(cfg_.max_seq_len, cfg_.d_model, kPosScale);
  }

  const ModelConfig& config() const { return cfg_; }
  Block& block(int l) { return blocks_[l]; }
  const Block& block(int l) const { return blocks_[l]; }
  Tensor& embedding() { return embed_; }
  const Tensor& embedding() const { return embed_; }
  const Tensor& positional() const { return pos_; }
  const Tensor& final_ln_gain() const { return lnf_g_; }
  const Tensor& final_ln_bias() const { return lnf_b_; }
  const Tensor& classifier_weight() const { return w_cls_; }
  const Tensor& classifier_bias() const { return b_cls_; }

  struct ParamRef {
    std::string name;
    Tensor* tensor;
  };

  std::vector<ParamRef> params() {
    std::vector<ParamRef> out;
    out.push_back({"embed", &embed_});
    for (int l = 0; l < cfg_.num_layers; ++l) {
      auto& b = blocks_[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      for (int h = 0; h < cfg_.num_heads; ++h) {
        const std::string hp = p + "head" + std::to_string(h) + ".";
        out.push_back({hp + "wq", &b.wq[h]});
        out.push_back({hp + "wk", &b.wk[h]});
        out.push_back({hp + "wv", &b.wv[h]});
      }
      out.push_back({p + "wo", &b.wo});
      out.push_back({p + "ln1_g", &b.ln1_g});
      out.push_back({p + "ln1_b", &b.ln1_b});
      if (!cfg_.linear_head) {
        out.push_back({p + "bo", &b.bo});
        out.push_back({p + "ln2_g", &b.ln2_g});
        out.push_back({p + "ln2_b", &b.ln2_b});
        out.push_back({p + "w1", &b.w1});
        out.push_back({p + "b1", &b.b1});
        out.push_back({p + "w2", &b.w2});
        out.push_back({p + "b2", &b.b2});
      }
    }
    if (!cfg_.linear_head) {
      out.push_back({"lnf_g", &lnf_g_});
      out.push_back({"lnf_b", &lnf_b_});
      out.push_back({"w_cls", &w_cls_});
      out.push_back({"b_cls", &b_cls_});
    }
    return out;
  }

  // Records are populated for every head regardless of its gate value.
  void run_forward(const Example& ex, const GateVector& gates, ForwardPass& fp,
                   bool want_records = true) const {
    if (ex.tokens.empty()) throw InputError("empty example");
    const int n = static_cast<int>(ex.tokens.size());
    const int n_valid = ex.effective_len();
    if (n_valid < 1 || n_valid > n) throw InputError("effective length outside [1, n]");
    if (n > cfg_.max_seq_len)
      throw InputError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                       std::to_string(cfg_.max_seq_len));
    if (gates.size() != 0 &&
        (gates.num_layers() != cfg_.num_layers || gates.num_heads() != cfg_.num_heads))
      throw ConfigError("gate vector shape does not match model");

    Tape& t = fp.tape;
    auto self = const_cast<GatedTransformer*>(this);
    std::vector<ParamRef> prefs = self->params();
    fp.param_vars.clear();
    fp.param_vars.reserve(prefs.size());
    for (auto& pr : prefs) fp.param_vars.push_back(t.input(*pr.tensor));
    auto pvar = [&](const Tensor* which) -> Var {
      for (std::size_t i = 0; i < prefs.size(); ++i)
        if (prefs[i].tensor == which) return fp.param_vars[i];
      throw Error("internal: parameter not registered");
    };

    std::vector<std::uint8_t> valid(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n_valid; ++i) valid[i] = 1;
    const bool padded = n_valid < n;

    // Embedding + positional encoding.
    Var x = t.embed(ex.tokens, pvar(&embed_));
    Tensor pos_slice = Tensor::matrix(n, cfg_.d_model);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cfg_.d_model; ++j) pos_slice.at(i, j) = pos_.at(i, j);
    x = t.add_const(x, pos_slice);

    fp.records.assign(static_cast<std::size_t>(cfg_.num_layers) * cfg_.num_heads, HeadRecord{});
    fp.gate_vars.assign(fp.records.size(), Var{});
    fp.gated_vars.assign(fp.records.size(), Var{});

    for (int l = 0; l < cfg_.num_layers; ++l) {
      const Block& b = blocks_[l];
      Var xin = x;
      Var xn = t.layer_norm(xin, pvar(&b.ln1_g), pvar(&b.ln1_b));
      std::vector<Var> gated;
      gated.reserve(cfg_.num_heads);
      for (int h = 0; h < cfg_.num_heads; ++h) {
        Var q = t.matmul(xn, pvar(&b.wq[h]));
        Var k = t.matmul(xn, pvar(&b.wk[h]));
        Var v = t.matmul(xn, pvar(&b.wv[h]));
        Var kt = t.transpose(k);
        Var scores = t.scale(t.matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(cfg_.d_k)));
        Var attn = t.softmax_rows(scores, padded ? &valid : nullptr);
        Var a_h = t.matmul(attn, v);

        const std::size_t idx = static_cast<std::size_t>(l) * cfg_.num_heads + h;
        Tensor gate_t = Tensor::matrix(1, 1);
        gate_t[0] = gates.size() ? gates.get({l, h}) : 1.0;
        Var gate_v = t.input(gate_t);
        Var gated_v = t.gate(a_h, gate_v);
        fp.gate_vars[idx] = gate_v;
        fp.gated_vars[idx] = gated_v;
        gated.push_back(gated_v);

        if (want_records) {
          HeadRecord& rec = fp.records[idx];
          rec.attn_rows = t.val(attn);
          rec.head_output = t.val(a_h);
          rec.value_matrix = t.val(v);
          rec.effective_len = n_valid;
        }
      }
      Var y = t.concat_cols(gated);

      if (cfg_.linear_head) {
        Var z = t.matmul(y, pvar(&b.wo));
        Var z_valid = padded ? t.take_rows(z, n_valid) : z;
        fp.logits = t.val(z_valid);
        if (cfg_.loss_kind == LossKind::binary) {
          fp.loss = t.ce_binary(z_valid, std::vector<int>(n_valid, ex.label));
        } else {
          fp.loss = t.ce_multiclass(z_valid, std::vector<int>(n_valid, ex.label));
        }
        return;
      }

      Var attn_out = t.add_rowvec(t.matmul(y, pvar(&b.wo)), pvar(&b.bo));
      x = t.add(xin, attn_out);
      Var x2 = t.layer_norm(x, pvar(&b.ln2_g), pvar(&b.ln2_b));
      Var h1 = t.gelu(t.add_rowvec(t.matmul(x2, pvar(&b.w1)), pvar(&b.b1)));
      Var mlp = t.add_rowvec(t.matmul(h1, pvar(&b.w2)), pvar(&b.b2));
      x = t.add(x, mlp);
    }

    Var xf = t.layer_norm(x, pvar(&lnf_g_), pvar(&lnf_b_));
    Var cls = t.pick_row(xf, 0);
    Var logits = t.add_rowvec(t.matmul(cls, pvar(&w_cls_)), pvar(&b_cls_));
    fp.logits = t.val(logits);
    if (cfg_.loss_kind == LossKind::binary) {
      fp.loss = t.ce_binary(logits, {ex.label});
    } else {
      fp.loss = t.ce_multiclass(logits, {ex.label});
    }
  }

  // Backpropagates and fills per-head gradients, per-gate derivatives, and
  // parameter gradients (aligned with params()).
  void run_backward(ForwardPass& fp) const {
    if (!fp.loss.valid()) throw InputError("backward before forward");
    fp.tape.backward(fp.loss);
    for (std::size_t i = 0; i < fp.records.size(); ++i) {
      if (fp.records[i].head_output.size() > 0)
        fp.records[i].head_output_grad = fp.tape.grad(fp.gated_vars[i]);
      fp.records[i].dloss_dgate = fp.tape.grad(fp.gate_vars[i])[0];
    }
    fp.param_grads.clear();
    fp.param_grads.reserve(fp.param_vars.size());
    for (Var pv : fp.param_vars) fp.param_grads.push_back(fp.tape.grad(pv));
  }

  double loss_only(const Example& ex, const GateVector& gates) const {
    ForwardPass fp;
    run_forward(ex, gates, fp, /*want_records=*/false);
    return fp.loss_value();
  }

  Tensor logits_of(const Example& ex, const GateVector& gates) const {
    ForwardPass fp;
    run_forward(ex, gates, fp, /*want_records=*/false);
    return fp.logits;
  }

  int predict(const Example& ex, const GateVector& gates) const {
    Tensor z = logits_of(ex, gates);
    if (cfg_.linear_head) {
      // Token-mean logits in bound-verification mode.
      Tensor mean = Tensor::matrix(1, z.cols());
      for (int i = 0; i < z.rows(); ++i)
        for (int j = 0; j < z.cols(); ++j) mean.at(0, j) += z.at(i, j) / z.rows();
      z = mean;
    }
    if (cfg_.loss_kind == LossKind::binary) return z.at(0, 0) > 0.0 ? 1 : 0;
    int best = 0;
    for (int j = 1; j < z.cols(); ++j)
      if (z.at(0, j) > z.at(0, best)) best = j;
    return best;
  }

 private:
  static constexpr double kPosScale = 0.3;

  void init_params() {
    std::mt19937_64 rng(cfg_.seed);
    const int d = cfg_.d_model;
    embed_ = Tensor::matrix(cfg_.vocab_size, d);
    fill_normal(embed_, rng, 0.3);
    blocks_.resize(cfg_.num_layers);
    for (auto& b : blocks_) {
      b.wq.resize(cfg_.num_heads);
      b.wk.resize(cfg_.num_heads);
      b.wv.resize(cfg_.num_heads);
      for (int h = 0; h < cfg_.num_heads; ++h) {
        b.wq[h] = Tensor::matrix(d, cfg_.d_k);
        b.wk[h] = Tensor::matrix(d, cfg_.d_k);
        b.wv[h] = Tensor::matrix(d, cfg_.d_v);
        fill_normal(b.wq[h], rng, 1.0 / std::sqrt(d));
        fill_normal(b.wk[h], rng, 1.0 / std::sqrt(d));
        fill_normal(b.wv[h], rng, 1.0 / std::sqrt(d));
      }
      const int wo_out = cfg_.linear_head ? cfg_.out_dim() : d;
      b.wo = Tensor::matrix(d, wo_out);
      fill_normal(b.wo, rng, 1.0 / std::sqrt(d));
      b.ln1_g = Tensor::matrix(1, d);
      b.ln1_g.fill(1.0);
      b.ln1_b = Tensor::matrix(1, d);
      if (!cfg_.linear_head) {
        b.bo = Tensor::matrix(1, d);
        b.ln2_g = Tensor::matrix(1, d);
        b.ln2_g.fill(1.0);
        b.ln2_b = Tensor::matrix(1, d);
        b.w1 = Tensor::matrix(d, cfg_.mlp_hidden());
        fill_normal(b.w1, rng, 1.0 / std::sqrt(d));
        b.b1 = Tensor::matrix(1, cfg_.mlp_hidden());
        b.w2 = Tensor::matrix(cfg_.mlp_hidden(), d);
        fill_normal(b.w2, rng, 1.0 / std::sqrt(cfg_.mlp_hidden()));
        b.b2 = Tensor::matrix(1, d);
      }
    }
    if (!cfg_.linear_head) {
      lnf_g_ = Tensor::matrix(1, d);
      lnf_g_.fill(1.0);
      lnf_b_ = Tensor::matrix(1, d);
      w_cls_ = Tensor::matrix(d, cfg_.out_dim());
      fill_normal(w_cls_, rng, 1.0 / std::sqrt(d));
      b_cls_ = Tensor::matrix(1, cfg_.out_dim());
    }
  }

  ModelConfig cfg_;
  Tensor embed_;
  Tensor pos_;
  std::vector<Block> blocks_;
  Tensor lnf_g_, lnf_b_, w_cls_, b_cls_;
};

}  // namespace hies
