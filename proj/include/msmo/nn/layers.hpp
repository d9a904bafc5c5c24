// Layers, parameter registries and the Adam optimizer on top of the autodiff
// tape. Linear maps use the row convention y = x W + b with W stored in x out.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msmo/nn/autodiff.hpp"

namespace msmo::nn {

using ad::Index;
using ad::Mat;
using ad::Parameter;
using ad::Tape;
using ad::Var;

/// Named, non-owning view of a model's parameters. Order is the
/// serialization and optimizer order, so it must be deterministic.
using ParamList = std::vector<std::pair<std::string, Parameter*>>;

inline Mat xavier(Index rows, Index cols, std::mt19937_64& rng, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m(i) = dist(rng);
  return m;
}

inline Mat gaussian(Index rows, Index cols, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m(i) = dist(rng);
  return m;
}

struct Linear {
  Parameter weight;  // in x out
  std::optional<Parameter> bias;  // 1 x out

  Linear() = default;
  Linear(Index in, Index out, std::mt19937_64& rng, bool with_bias = true, double gain = 1.0)
      : weight(xavier(in, out, rng, gain)) {
    if (with_bias) bias.emplace(Mat::Zero(1, out));
  }

  Var forward(Tape& t, Var x) {
    Var y = ad::matmul(x, t.param(weight));
    return bias ? ad::add_rowvec(y, t.param(*bias)) : y;
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", &weight);
    if (bias) out.emplace_back(prefix + ".bias", &*bias);
  }
};

struct LayerNorm {
  Parameter gain;
  Parameter bias;

  LayerNorm() = default;
  explicit LayerNorm(Index dim) : gain(Mat::Ones(1, dim)), bias(Mat::Zero(1, dim)) {}

  Var forward(Tape& t, Var x) { return ad::layer_norm(x, t.param(gain), t.param(bias)); }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".gain", &gain);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

struct Embedding {
  Parameter table;  // vocab x dim

  Embedding() = default;
  Embedding(Index vocab, Index dim, std::mt19937_64& rng, double stddev) : table(gaussian(vocab, dim, rng, stddev)) {}

  Var forward(Tape& t, std::vector<Index> ids) { return ad::gather_rows(t.param(table), std::move(ids)); }

  void collect(ParamList& out, const std::string& prefix) { out.emplace_back(prefix + ".table", &table); }
};

/// Multi-head scaled dot-product attention without biases. Heads split the
/// model dimension evenly.
struct MultiHeadAttention {
  Parameter wq, wk, wv, wo;  // dim x dim
  Index heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(Index dim, Index num_heads, std::mt19937_64& rng, double out_gain = 1.0)
      : wq(xavier(dim, dim, rng)), wk(xavier(dim, dim, rng)), wv(xavier(dim, dim, rng)),
        wo(xavier(dim, dim, rng, out_gain)), heads(num_heads) {
    if (num_heads < 1 || dim % num_heads != 0) throw std::invalid_argument("attention heads must divide the dimension");
  }

  /// queries: q x dim, keys/values: k x dim; mask (q x k) is added to the
  /// logits when given (use -inf to block).
  Var forward(Tape& t, Var queries, Var keys_values, const Mat* mask = nullptr) {
    Var q = ad::matmul(queries, t.param(wq));
    Var k = ad::matmul(keys_values, t.param(wk));
    Var v = ad::matmul(keys_values, t.param(wv));
    const Index dim = q.cols();
    const Index hd = dim / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> outs;
    for (Index h = 0; h < heads; ++h) {
      Var qh = heads == 1 ? q : ad::slice_cols(q, h * hd, hd);
      Var kh = heads == 1 ? k : ad::slice_cols(k, h * hd, hd);
      Var vh = heads == 1 ? v : ad::slice_cols(v, h * hd, hd);
      Var logits = ad::scale(ad::matmul_nt(qh, kh), inv);
      if (mask) logits = ad::add_constant(logits, *mask);
      outs.push_back(ad::matmul(ad::row_softmax(logits), vh));
    }
    Var joined = heads == 1 ? outs.front() : ad::hconcat(outs);
    return ad::matmul(joined, t.param(wo));
  }

  void collect(ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".wq", &wq);
    out.emplace_back(prefix + ".wk", &wk);
    out.emplace_back(prefix + ".wv", &wv);
    out.emplace_back(prefix + ".wo", &wo);
  }
};

struct FeedForward {
  Linear in, out;

  FeedForward() = default;
  FeedForward(Index dim, Index hidden, std::mt19937_64& rng, double out_gain = 1.0)
      : in(dim, hidden, rng), out(hidden, dim, rng, true, out_gain) {}

  Var forward(Tape& t, Var x) { return out.forward(t, ad::relu(in.forward(t, x))); }

  void collect(ParamList& params, const std::string& prefix) {
    in.collect(params, prefix + ".in");
    out.collect(params, prefix + ".out");
  }
};

/// Causal mask: -inf strictly above the diagonal.
inline Mat causal_mask(Index n) {
  Mat m = Mat::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) m(i, j) = -std::numeric_limits<double>::infinity();
  return m;
}

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global gradient-norm clip; <= 0 disables
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto& [name, p] : params_) {
      if (p->m1.size() != p->value.size()) p->m1 = Mat::Zero(p->value.rows(), p->value.cols());
      if (p->m2.size() != p->value.size()) p->m2 = Mat::Zero(p->value.rows(), p->value.cols());
      p->zero_grad();
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p->zero_grad();
  }

  /// One update from the accumulated gradients, scaled by 1/batch.
  void step(double batch = 1.0) {
    ++t_;
    double norm2 = 0.0;
    for (auto& [name, p] : params_)
      if (p->trainable) norm2 += (p->grad / batch).squaredNorm();
    double clip = 1.0;
    if (cfg_.clip_norm > 0 && norm2 > cfg_.clip_norm * cfg_.clip_norm) clip = cfg_.clip_norm / std::sqrt(norm2);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params_) {
      if (!p->trainable) continue;
      const Mat g = p->grad * (clip / batch);
      p->m1 = cfg_.beta1 * p->m1 + (1.0 - cfg_.beta1) * g;
      p->m2 = cfg_.beta2 * p->m2 + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      p->value.array() -= cfg_.lr * (p->m1.array() / bc1) / ((p->m2.array() / bc2).sqrt() + cfg_.eps);
    }
    zero_grad();
  }

  const AdamConfig& config() const { return cfg_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  long t_ = 0;
};

/// Deep copy of parameter values (for best-checkpoint tracking).
inline std::vector<Mat> snapshot(const ParamList& params) {
  std::vector<Mat> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) out.push_back(p->value);
  return out;
}

inline void restore(const ParamList& params, const std::vector<Mat>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].second->value = values[i];
}

}  // namespace msmo::nn
