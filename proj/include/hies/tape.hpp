#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "hies/tensor.hpp"

namespace hies {

enum class LossKind { binary, multiclass };

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

// Handle into a Tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape scoped to a single forward pass. Nodes record their value
// and a closure that scatters the node's adjoint into its parents' adjoints.
// No graph reuse: build, call backward() once, throw the tape away.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor value) { return push(std::move(value), nullptr); }

  const Tensor& val(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  Tensor& grad_mut(Var v) { return nodes_[v.id].grad; }

  Var matmul(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    Tensor out = matmul_plain(A, B);
    return push(std::move(out), [this, a, b](const Tensor& g) {
      const Tensor& A = val(a);
      const Tensor& B = val(b);
      Tensor& da = grad_mut(a);
      Tensor& db = grad_mut(b);
      const int m = A.rows(), k = A.cols(), n = B.cols();
      // dA += g * B^T
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double s = 0.0;
          for (int j = 0; j < n; ++j) s += g.at(i, j) * B.at(p, j);
          da.at(i, p) += s;
        }
      // dB += A^T * g
      for (int p = 0; p < k; ++p)
        for (int i = 0; i < m; ++i) {
          const double av = A.at(i, p);
          if (av == 0.0) continue;
          for (int j = 0; j < n; ++j) db.at(p, j) += av * g.at(i, j);
        }
    });
  }

  Var add(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B))
      throw ShapeError("add over mismatched shapes: " + A.shape_str() + " vs " + B.shape_str());
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
    return push(std::move(out), [this, a, b](const Tensor& g) {
      Tensor& da = grad_mut(a);
      Tensor& db = grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += g[i];
        db[i] += g[i];
      }
    });
  }

  // a (m x n) + row vector b (1 x n), broadcast over rows.
  Var add_rowvec(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (B.rows() != 1 || B.cols() != A.cols())
      throw ShapeError("add_rowvec: " + A.shape_str() + " vs " + B.shape_str());
    Tensor out = A;
    for (int i = 0; i < A.rows(); ++i)
      for (int j = 0; j < A.cols(); ++j) out.at(i, j) += B.at(0, j);
    return push(std::move(out), [this, a, b](const Tensor& g) {
      Tensor& da = grad_mut(a);
      Tensor& db = grad_mut(b);
      for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < g.cols(); ++j) {
          da.at(i, j) += g.at(i, j);
          db.at(0, j) += g.at(i, j);
        }
    });
  }

  Var add_const(Var a, const Tensor& c) {
    const Tensor& A = val(a);
    if (!A.same_shape(c))
      throw ShapeError("add_const shapes: " + A.shape_str() + " vs " + c.shape_str());
    Tensor out = A;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
    return push(std::move(out), [this, a](const Tensor& g) {
      Tensor& da = grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
  }

  Var scale(Var a, double c) {
    Tensor out = val(a);
    for (auto& v : out.flat()) v *= c;
    return push(std::move(out), [this, a, c](const Tensor& g) {
      Tensor& da = grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += c * g[i];
    });
  }

  // Elementwise product of a with a scalar tape variable s (shape [1 x 1]).
  // This is the head gate: both the tensor and the gate receive gradients.
  Var gate(Var a, Var s) {
    const Tensor& S = val(s);
    if (S.size() != 1) throw ShapeError("gate expects a scalar variable, got " + S.shape_str());
    const double sv = S[0];
    Tensor out = val(a);
    for (auto& v : out.flat()) v *= sv;
    return push(std::move(out), [this, a, s](const Tensor& g) {
      const Tensor& A = val(a);
      const double sv = val(s)[0];
      Tensor& da = grad_mut(a);
      Tensor& ds = grad_mut(s);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] += sv * g[i];
        acc += g[i] * A[i];
      }
      ds[0] += acc;
    });
  }

  // Row-wise softmax with an optional column-validity mask. Masked columns are
  // exactly 0 in the output and receive exactly 0 gradient. A row whose valid
  // columns are empty is degenerate.
  Var softmax_rows(Var a, const std::vector<std::uint8_t>* valid_cols = nullptr) {
    const Tensor& A = val(a);
    const int m = A.rows(), n = A.cols();
    if (valid_cols && static_cast<int>(valid_cols->size()) != n)
      throw ShapeError("softmax mask length " + std::to_string(valid_cols->size()) +
                       " vs columns " + std::to_string(n));
    bool any_valid = false;
    if (valid_cols) {
      for (auto b : *valid_cols) any_valid |= (b != 0);
    } else {
      any_valid = n > 0;
    }
    if (!any_valid) throw InputError("softmax row with zero valid columns");

    std::vector<std::uint8_t> mask;
    if (valid_cols) mask = *valid_cols;
    Tensor out = Tensor::matrix(m, n);
    for (int i = 0; i < m; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j)
        if (!valid_cols || mask[j]) mx = std::max(mx, A.at(i, j));
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        if (!valid_cols || mask[j]) {
          const double e = std::exp(A.at(i, j) - mx);
          out.at(i, j) = e;
          sum += e;
        }
      }
      for (int j = 0; j < n; ++j)
        if (!valid_cols || mask[j]) out.at(i, j) /= sum;
    }
    Tensor probs = out;
    return push(std::move(out), [this, a, mask, use_mask = valid_cols != nullptr,
                                 probs = std::move(probs)](const Tensor& g) {
      // ds_j = p_j * (g_j - sum_k p_k g_k) per row, over valid columns.
      Tensor& da = grad_mut(a);
      const int m = probs.rows(), n = probs.cols();
      for (int i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j)
          if (!use_mask || mask[j]) dot += probs.at(i, j) * g.at(i, j);
        for (int j = 0; j < n; ++j)
          if (!use_mask || mask[j]) da.at(i, j) += probs.at(i, j) * (g.at(i, j) - dot);
      }
    });
  }

  // Row-wise layer normalization with learnable gain/bias (each [1 x d]).
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Tensor& X = val(x);
    const Tensor& G = val(gamma);
    const Tensor& B = val(beta);
    const int m = X.rows(), d = X.cols();
    if (G.cols() != d || B.cols() != d || G.rows() != 1 || B.rows() != 1)
      throw ShapeError("layer_norm params vs input " + X.shape_str());
    Tensor out = Tensor::matrix(m, d);
    Tensor xhat = Tensor::matrix(m, d);
    std::vector<double> inv_std(m);
    for (int i = 0; i < m; ++i) {
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += X.at(i, j);
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        const double c = X.at(i, j) - mean;
        var += c * c;
      }
      var /= d;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[i] = is;
      for (int j = 0; j < d; ++j) {
        xhat.at(i, j) = (X.at(i, j) - mean) * is;
        out.at(i, j) = G.at(0, j) * xhat.at(i, j) + B.at(0, j);
      }
    }
    return push(std::move(out),
                [this, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor& g) {
                  const Tensor& G = val(gamma);
                  Tensor& dx = grad_mut(x);
                  Tensor& dg = grad_mut(gamma);
                  Tensor& db = grad_mut(beta);
                  const int m = g.rows(), d = g.cols();
                  for (int i = 0; i < m; ++i) {
                    double sum_gg = 0.0, sum_ggx = 0.0;
                    for (int j = 0; j < d; ++j) {
                      const double gg = g.at(i, j) * G.at(0, j);
                      sum_gg += gg;
                      sum_ggx += gg * xhat.at(i, j);
                      dg.at(0, j) += g.at(i, j) * xhat.at(i, j);
                      db.at(0, j) += g.at(i, j);
                    }
                    const double mg = sum_gg / d;
                    const double mgx = sum_ggx / d;
                    for (int j = 0; j < d; ++j) {
                      const double gg = g.at(i, j) * G.at(0, j);
                      dx.at(i, j) += (gg - mg - xhat.at(i, j) * mgx) * inv_std[i];
                    }
                  }
                });
  }

  // Exact GELU: x * Phi(x).
  Var gelu(Var a) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    const Tensor& A = val(a);
    Tensor out = A;
    for (auto& v : out.flat()) v = v * 0.5 * (1.0 + std::erf(v * inv_sqrt2));
    return push(std::move(out), [this, a](const Tensor& g) {
      const Tensor& A = val(a);
      Tensor& da = grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = A[i];
        const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        da[i] += g[i] * (phi + x * pdf);
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw InputError("concat_cols of zero parts");
    const int m = val(parts[0]).rows();
    int total = 0;
    for (Var p : parts) {
      if (val(p).rows() != m)
        throw ShapeError("concat_cols row mismatch: " + val(p).shape_str());
      total += val(p).cols();
    }
    Tensor out = Tensor::matrix(m, total);
    int off = 0;
    for (Var p : parts) {
      const Tensor& P = val(p);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < P.cols(); ++j) out.at(i, off + j) = P.at(i, j);
      off += P.cols();
    }
    return push(std::move(out), [this, parts](const Tensor& g) {
      int off = 0;
      for (Var p : parts) {
        Tensor& dp = grad_mut(p);
        for (int i = 0; i < dp.rows(); ++i)
          for (int j = 0; j < dp.cols(); ++j) dp.at(i, j) += g.at(i, off + j);
        off += dp.cols();
      }
    });
  }

  // Sum of all entries, as a [1 x 1] scalar.
  Var sum(Var a) {
    const Tensor& A = val(a);
    Tensor out = Tensor::matrix(1, 1);
    for (double v : A.flat()) out[0] += v;
    return push(std::move(out), [this, a](const Tensor& g) {
      Tensor& da = grad_mut(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0];
    });
  }

  Var transpose(Var a) {
    Tensor out = transposed(val(a));
    return push(std::move(out), [this, a](const Tensor& g) {
      Tensor& da = grad_mut(a);
      for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < g.cols(); ++j) da.at(j, i) += g.at(i, j);
    });
  }

  // First `count` rows of a.
  Var take_rows(Var a, int count) {
    const Tensor& A = val(a);
    if (count < 1 || count > A.rows())
      throw InputError("take_rows count " + std::to_string(count) + " outside " + A.shape_str());
    Tensor out = Tensor::matrix(count, A.cols());
    for (int i = 0; i < count; ++i)
      for (int j = 0; j < A.cols(); ++j) out.at(i, j) = A.at(i, j);
    return push(std::move(out), [this, a](const Tensor& g) {
      Tensor& da = grad_mut(a);
      for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < g.cols(); ++j) da.at(i, j) += g.at(i, j);
    });
  }

  Var pick_row(Var a, int r) {
    const Tensor& A = val(a);
    if (r < 0 || r >= A.rows())
      throw InputError("pick_row " + std::to_string(r) + " out of " + A.shape_str());
    Tensor out = Tensor::matrix(1, A.cols());
    for (int j = 0; j < A.cols(); ++j) out.at(0, j) = A.at(r, j);
    return push(std::move(out), [this, a, r](const Tensor& g) {
      Tensor& da = grad_mut(a);
      for (int j = 0; j < g.cols(); ++j) da.at(r, j) += g.at(0, j);
    });
  }

  // Gather rows of an embedding table; gradients scatter-add back.
  Var embed(const std::vector<int>& tokens, Var table) {
    const Tensor& E = val(table);
    Tensor out = Tensor::matrix(static_cast<int>(tokens.size()), E.cols());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (tokens[t] < 0 || tokens[t] >= E.rows())
        throw InputError("token id " + std::to_string(tokens[t]) + " outside vocab of " +
                         std::to_string(E.rows()));
      for (int j = 0; j < E.cols(); ++j) out.at(static_cast<int>(t), j) = E.at(tokens[t], j);
    }
    return push(std::move(out), [this, tokens, table](const Tensor& g) {
      Tensor& de = grad_mut(table);
      for (std::size_t t = 0; t < tokens.size(); ++t)
        for (int j = 0; j < g.cols(); ++j) de.at(tokens[t], j) += g.at(static_cast<int>(t), j);
    });
  }

  // Mean multiclass cross-entropy over rows; logits [R x C], one target per row.
  Var ce_multiclass(Var logits, const std::vector<int>& targets) {
    const Tensor& Z = val(logits);
    const int r = Z.rows(), c = Z.cols();
    if (static_cast<int>(targets.size()) != r)
      throw InputError("targets size " + std::to_string(targets.size()) + " vs rows " +
                       std::to_string(r));
    for (int t : targets)
      if (t < 0 || t >= c)
        throw InputError("class label " + std::to_string(t) + " outside [0," + std::to_string(c) + ")");
    Tensor probs = Tensor::matrix(r, c);
    double loss = 0.0;
    for (int i = 0; i < r; ++i) {
      double mx = Z.at(i, 0);
      for (int j = 1; j < c; ++j) mx = std::max(mx, Z.at(i, j));
      double sum = 0.0;
      for (int j = 0; j < c; ++j) {
        probs.at(i, j) = std::exp(Z.at(i, j) - mx);
        sum += probs.at(i, j);
      }
      for (int j = 0; j < c; ++j) probs.at(i, j) /= sum;
      loss += (std::log(sum) + mx) - Z.at(i, targets[i]);
    }
    loss /= r;
    Tensor out = Tensor::matrix(1, 1);
    out[0] = loss;
    return push(std::move(out), [this, logits, targets, probs = std::move(probs)](const Tensor& g) {
      Tensor& dz = grad_mut(logits);
      const int r = dz.rows(), c = dz.cols();
      const double s = g[0] / r;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          dz.at(i, j) += s * (probs.at(i, j) - (j == targets[i] ? 1.0 : 0.0));
    });
  }

  // Mean binary (sigmoid) cross-entropy; logits [R x 1], labels in {0,1}.
  Var ce_binary(Var logits, const std::vector<int>& labels) {
    const Tensor& Z = val(logits);
    const int r = Z.rows();
    if (Z.cols() != 1) throw ShapeError("binary CE expects one logit per example, got " + Z.shape_str());
    if (static_cast<int>(labels.size()) != r)
      throw InputError("labels size " + std::to_string(labels.size()) + " vs rows " +
                       std::to_string(r));
    for (int y : labels)
      if (y != 0 && y != 1) throw InputError("binary label " + std::to_string(y) + " not in {0,1}");
    double loss = 0.0;
    for (int i = 0; i < r; ++i) loss += softplus(Z.at(i, 0)) - Z.at(i, 0) * labels[i];
    loss /= r;
    Tensor out = Tensor::matrix(1, 1);
    out[0] = loss;
    return push(std::move(out), [this, logits, labels](const Tensor& g) {
      const Tensor& Z = val(logits);
      Tensor& dz = grad_mut(logits);
      const int r = Z.rows();
      const double s = g[0] / r;
      for (int i = 0; i < r; ++i) dz.at(i, 0) += s * (sigmoid(Z.at(i, 0)) - labels[i]);
    });
  }

  // Seed every adjoint to zero, set d(loss)/d(loss) = 1, sweep in reverse.
  void backward(Var loss) {
    if (val(loss).size() != 1) throw InputError("backward expects a scalar loss");
    if (ran_backward_) throw InputError("backward already ran on this tape");
    ran_backward_ = true;
    for (auto& n : nodes_) {
      n.grad = Tensor(n.value.shape());
    }
    nodes_[loss.id].grad[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      if (nodes_[i].back) nodes_[i].back(nodes_[i].grad);
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(const Tensor&)> back;
  };

  Var push(Tensor value, std::function<void(const Tensor&)> back) {
    if (!value.all_finite()) throw InputError("non-finite value produced by tape op");
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

}  // namespace hies
