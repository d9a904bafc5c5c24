// Coarse-to-fine image-text alignment.
//
// Coarse pass (all images jointly):
//   Q = G W_q, K = C W_k, V = C W_v
//   O[i,j] = Q_i.K_j / sum_k Q_i.K_k      (paper mode; raw Q_i.K_j when the
//                                          denominator is below kGuardEps)
//   O[i,j] = Q_i.K_j / sqrt(D)            (scaled_dot mode)
//   A = row_softmax(O)
//   refined_i = Q_i + sum_k A[i,k] V_k
//   p_i = sigmoid(w . refined_i + b)
// trained with clamped BCE against labels mined from reference captions.
//
// Fine pass: the rows of A for the top-n sentences by p form a square matrix
// and Kuhn-Munkres assigns one sentence per image.
//
// One-pass variants use a second model that scores sentences for one image at
// a time. With a single image the joint formula above degenerates (softmax over
// one column is 1 for every sentence), so the per-image model normalises the
// attention over sentences instead:
//   a_ij = softmax_i(Q_i.K_j / sqrt(D)),  refined_ij = Q_i + a_ij V_j.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msmo/checkpoint.hpp"
#include "msmo/corpus.hpp"
#include "msmo/encoders.hpp"
#include "msmo/matching.hpp"
#include "msmo/retrieval.hpp"
#include "msmo/rouge.hpp"

namespace msmo::alignment {

using ad::Index;
using ad::Mat;
using ad::Parameter;
using ad::Tape;
using ad::Var;
using corpus::MultimodalDocument;
using corpus::Tokens;
using Json = nlohmann::json;

inline constexpr double kGuardEps = 1e-6;
inline constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

class AlignmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class AttentionMode { paper, scaled_dot };
enum class RougeVariant { rouge_l, rouge_1, rouge_2 };
enum class CoarseRule { top_n, threshold };
enum class ModelKind { coarse_to_fine, one_pass };

inline std::string to_string(AttentionMode m) { return m == AttentionMode::paper ? "paper" : "scaled_dot"; }
inline AttentionMode parse_attention_mode(const std::string& s) {
  if (s == "paper") return AttentionMode::paper;
  if (s == "scaled_dot") return AttentionMode::scaled_dot;
  throw AlignmentError("attention must be 'paper' or 'scaled_dot', got '" + s + "'");
}

inline std::string to_string(RougeVariant v) {
  switch (v) {
    case RougeVariant::rouge_1: return "rouge_1";
    case RougeVariant::rouge_2: return "rouge_2";
    default: return "rouge_l";
  }
}
inline RougeVariant parse_rouge_variant(const std::string& s) {
  if (s == "rouge_l") return RougeVariant::rouge_l;
  if (s == "rouge_1") return RougeVariant::rouge_1;
  if (s == "rouge_2") return RougeVariant::rouge_2;
  throw AlignmentError("label ROUGE variant must be rouge_l, rouge_1 or rouge_2, got '" + s + "'");
}

inline std::string to_string(CoarseRule r) { return r == CoarseRule::top_n ? "top_n" : "threshold"; }
inline CoarseRule parse_coarse_rule(const std::string& s) {
  if (s == "top_n") return CoarseRule::top_n;
  if (s == "threshold") return CoarseRule::threshold;
  throw AlignmentError("coarse rule must be 'top_n' or 'threshold', got '" + s + "'");
}

inline std::string to_string(ModelKind k) { return k == ModelKind::coarse_to_fine ? "coarse_to_fine" : "one_pass"; }

// ---------------------------------------------------------------------------
// Cross attention and scoring

struct CrossAttentionParams {
  Parameter wq, wk, wv;  // D x D

  void collect(nn::ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".wq", &wq);
    out.emplace_back(prefix + ".wk", &wk);
    out.emplace_back(prefix + ".wv", &wv);
  }
};

struct ScorerParams {
  Parameter w;  // D x 1
  Parameter b;  // 1 x 1

  void collect(nn::ParamList& out, const std::string& prefix) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".b", &b);
  }
};

/// Row-wise ratio s_ij / sum_k s_ik. Rows whose sum has magnitude below `eps`
/// pass through unchanged and are flagged in `guarded`.
inline Var ratio_rows(Var s, double eps, std::vector<char>* guarded = nullptr) {
  const Mat& x = s.value();
  const Eigen::VectorXd sums = x.rowwise().sum();
  std::vector<char> skip(static_cast<std::size_t>(x.rows()), 0);
  Mat out = x;
  for (Index i = 0; i < x.rows(); ++i) {
    if (!(std::abs(sums(i)) >= eps)) {
      skip[static_cast<std::size_t>(i)] = 1;
      continue;
    }
    out.row(i) /= sums(i);
  }
  if (guarded) *guarded = skip;
  return s.tape->op(out, {s}, [s, sums, skip, out](Tape& t, std::size_t self) {
    const Mat& g = t.node(self).grad;
    Mat gs(g.rows(), g.cols());
    for (Index i = 0; i < g.rows(); ++i) {
      if (skip[static_cast<std::size_t>(i)]) {
        gs.row(i) = g.row(i);
        continue;
      }
      // d o_ij / d s_il = (delta_jl - o_ij) / sum_i
      const double dot = g.row(i).dot(out.row(i));
      gs.row(i) = (g.row(i).array() - dot).matrix() / sums(i);
    }
    t.accumulate(s.id, gs);
  });
}

struct AttentionVars {
  Var O, A, refined;
  std::vector<char> guarded;  // paper mode: rows that fell back to raw scores
};

/// Eqs. 1-3 on the tape. G: m x D sentences, C: n x D images.
inline AttentionVars cross_attention(Tape& t, Var G, Var C, CrossAttentionParams& params, AttentionMode mode) {
  if (G.cols() != C.cols()) throw AlignmentError("cross_attention: sentence and image widths differ");
  if (G.cols() != params.wq.value.rows()) throw AlignmentError("cross_attention: parameter width mismatch");
  Var Q = ad::matmul(G, t.param(params.wq));
  Var K = ad::matmul(C, t.param(params.wk));
  Var V = ad::matmul(C, t.param(params.wv));
  Var S = ad::matmul_nt(Q, K);
  AttentionVars out;
  if (mode == AttentionMode::paper) {
    out.O = ratio_rows(S, kGuardEps, &out.guarded);
  } else {
    out.O = ad::scale(S, 1.0 / std::sqrt(static_cast<double>(Q.cols())));
    out.guarded.assign(static_cast<std::size_t>(S.rows()), 0);
  }
  out.A = ad::row_softmax(out.O);
  out.refined = ad::add(Q, ad::matmul(out.A, V));
  return out;
}

struct AttentionArtifacts {
  Mat O;        // m x n
  Mat A;        // m x n, row-stochastic
  Mat refined;  // m x D
  std::size_t guarded_rows = 0;
};

inline AttentionArtifacts cross_attention(const Mat& G, const Mat& C, const CrossAttentionParams& params,
                                          AttentionMode mode) {
  Tape t;
  auto v = cross_attention(t, t.constant(G), t.constant(C), const_cast<CrossAttentionParams&>(params), mode);
  return {v.O.value(), v.A.value(), v.refined.value(),
          static_cast<std::size_t>(std::count(v.guarded.begin(), v.guarded.end(), 1))};
}

/// p = sigmoid(refined w + b), m x 1.
inline Var score_sentences(Tape& t, Var refined, ScorerParams& scorer) {
  if (refined.cols() != scorer.w.value.rows()) throw AlignmentError("score_sentences: width mismatch");
  return ad::sigmoid(ad::add_scalar_var(ad::matmul(refined, t.param(scorer.w)), t.param(scorer.b)));
}

inline Eigen::VectorXd score_sentences(const Mat& refined, const ScorerParams& scorer) {
  Tape t;
  return score_sentences(t, t.constant(refined), const_cast<ScorerParams&>(scorer)).value().col(0);
}

/// Mean binary cross-entropy, logs clamped at 1e-12.
inline double bce_loss(const Eigen::VectorXd& p, const std::vector<int>& y) {
  if (static_cast<std::size_t>(p.size()) != y.size()) throw AlignmentError("bce_loss: length mismatch");
  Mat ym(p.size(), 1);
  for (std::size_t i = 0; i < y.size(); ++i) ym(static_cast<Index>(i), 0) = y[i];
  Tape t;
  return ad::bce(t.constant(p), ym).scalar();
}

// ---------------------------------------------------------------------------
// Labels

inline double label_score(const Tokens& sentence, const Tokens& reference, RougeVariant v) {
  switch (v) {
    case RougeVariant::rouge_1: return rouge::rouge_n(sentence, reference, 1).f1;
    case RougeVariant::rouge_2: return rouge::rouge_n(sentence, reference, 2).f1;
    default: return rouge::rouge_l(sentence, reference).f1;
  }
}

/// Sentence indices sorted by descending score against `reference`, ties to
/// the lower index.
inline std::vector<std::size_t> rank_sentences(const MultimodalDocument& doc, const Tokens& reference, RougeVariant v) {
  std::vector<double> score(doc.num_sentences());
  for (std::size_t i = 0; i < score.size(); ++i) score[i] = label_score(doc.sentences[i], reference, v);
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

struct SelectionLabels {
  std::vector<int> y;                   // length m, exactly min(n, m) ones
  std::vector<std::size_t> per_image;   // sentence labelled for image j, or kNone
};

/// Images in order; each labels its best unlabelled sentence by ROUGE against
/// its reference caption.
inline SelectionLabels build_labels(const MultimodalDocument& doc, const retrieval::ReferenceCaptionSet& refs,
                                    RougeVariant variant = RougeVariant::rouge_l) {
  if (doc.num_sentences() < 1) throw AlignmentError("build_labels: document has no sentences");
  SelectionLabels out;
  out.y.assign(doc.num_sentences(), 0);
  std::size_t labelled = 0;
  for (const auto& ref : refs) {
    std::size_t chosen = kNone;
    if (labelled < doc.num_sentences()) {
      for (std::size_t i : rank_sentences(doc, ref.tokens, variant)) {
        if (!out.y[i]) {
          chosen = i;
          break;
        }
      }
      out.y[chosen] = 1;
      ++labelled;
    }
    out.per_image.push_back(chosen);
  }
  return out;
}

/// Per-image best sentence without exclusion (one-pass supervision).
inline std::vector<std::size_t> independent_labels(const MultimodalDocument& doc, const retrieval::ReferenceCaptionSet& refs,
                                                   RougeVariant variant = RougeVariant::rouge_l) {
  std::vector<std::size_t> out;
  for (const auto& ref : refs) out.push_back(rank_sentences(doc, ref.tokens, variant).front());
  return out;
}

// ---------------------------------------------------------------------------
// Coarse selection and fine assignment

/// top_n: the min(n, m) highest-p indices, descending, ties to the lower
/// index. threshold: every index with p >= threshold, same order.
inline std::vector<std::size_t> coarse_select(const Eigen::VectorXd& p, std::size_t n, CoarseRule rule = CoarseRule::top_n,
                                              double threshold = 0.5) {
  std::vector<std::size_t> order(static_cast<std::size_t>(p.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p(static_cast<Index>(a)) > p(static_cast<Index>(b)); });
  if (rule == CoarseRule::top_n) {
    order.resize(std::min(n, order.size()));
  } else {
    order.erase(std::remove_if(order.begin(), order.end(), [&](std::size_t i) { return p(static_cast<Index>(i)) < threshold; }),
                order.end());
  }
  return order;
}

struct AlignmentAssignment {
  std::vector<std::size_t> z;                 // selected sentences, descending p
  std::vector<std::size_t> match;             // per image: index into z, kNone for a dummy row
  std::vector<std::size_t> sentence_of_image; // per image: document sentence index
  std::vector<double> weight;                 // per image: A[sentence, image], 0 for a dummy
  double total_weight = 0.0;
};

/// Eqs. 6-7. Rows z of A are stacked and padded with zero rows (or zero
/// columns) to a square matrix. Images matched to a padding row take z[0],
/// the highest-probability sentence.
inline AlignmentAssignment fine_align(const Mat& A, const std::vector<std::size_t>& z) {
  const std::size_t n = static_cast<std::size_t>(A.cols());
  if (z.empty()) throw AlignmentError("fine_align: no selected sentences");
  for (auto i : z)
    if (i >= static_cast<std::size_t>(A.rows())) throw AlignmentError("fine_align: selected index out of range");
  const std::size_t size = std::max(n, z.size());
  Mat sel = Mat::Zero(static_cast<Index>(size), static_cast<Index>(size));
  for (std::size_t k = 0; k < z.size(); ++k) sel.row(static_cast<Index>(k)).head(static_cast<Index>(n)) = A.row(static_cast<Index>(z[k]));
  const auto km = matching::kuhn_munkres(sel);
  AlignmentAssignment out;
  out.z = z;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t row = km.perm[j];
    if (row < z.size()) {
      out.match.push_back(row);
      out.sentence_of_image.push_back(z[row]);
      out.weight.push_back(A(static_cast<Index>(z[row]), static_cast<Index>(j)));
    } else {
      out.match.push_back(kNone);
      out.sentence_of_image.push_back(z.front());
      out.weight.push_back(0.0);
    }
    out.total_weight += out.weight.back();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct AlignmentConfig {
  Eigen::Index layers = 2;
  Eigen::Index heads = 2;
  Eigen::Index ffn_hidden = 64;
  double block_gain = 0.1;
  double wv_std = 0.01;
  AttentionMode attention = AttentionMode::paper;
  bool freeze_input_projection = true;
  /// Freezes W_k and every image-encoder parameter.
  bool freeze_key_path = false;
  std::uint64_t seed = 21;

  Json to_json() const {
    return {{"layers", layers},         {"heads", heads},   {"ffn_hidden", ffn_hidden},
            {"block_gain", block_gain}, {"wv_std", wv_std}, {"attention", to_string(attention)},
            {"freeze_input_projection", freeze_input_projection}, {"freeze_key_path", freeze_key_path},
            {"seed", seed}};
  }
};

class AlignmentModel {
 public:
  struct Forward {
    AttentionVars attention;
    Var p;  // m x 1
  };

  AlignmentModel(encoders::SentenceEncoderHandle sentences, encoders::ImageEncoderConfig image_cfg, AlignmentConfig cfg,
                 ModelKind kind = ModelKind::coarse_to_fine)
      : sentences_(std::move(sentences)), images_(image_cfg), cfg_(cfg), kind_(kind) {
    if (!sentences_) throw AlignmentError("alignment model needs a sentence encoder");
    if (image_cfg.dim != sentences_->dim())
      throw AlignmentError("image and sentence embedding widths differ (" + std::to_string(image_cfg.dim) + " vs " +
                           std::to_string(sentences_->dim()) + ")");
    const Index d = image_cfg.dim;
    std::mt19937_64 rng(cfg.seed);
    attn_.wq = Parameter(nn::xavier(d, d, rng));
    attn_.wk = Parameter(nn::xavier(d, d, rng));
    attn_.wv = Parameter(nn::gaussian(d, d, rng, cfg.wv_std));
    scorer_.w = Parameter(nn::xavier(d, 1, rng));
    scorer_.b = Parameter(Mat::Zero(1, 1));
    value_bias_ = Parameter(Mat::Zero(1, d));
    images_.input_projection().weight.trainable = !cfg.freeze_input_projection;
    if (images_.input_projection().bias) images_.input_projection().bias->trainable = !cfg.freeze_input_projection;
    if (cfg.freeze_key_path) {
      nn::ParamList ps;
      images_.collect(ps, "images");
      for (auto& [name, p] : ps) p->trainable = false;
      attn_.wk.trainable = false;
    }
  }

  /// Initialises from a trained retrieval model (D_r <= D): shares its
  /// sentence encoder, writes its image head into the first D_r columns of the
  /// image-encoder input projection, and sets
  ///   W_q = [sentence head | random],  W_k = diag(I_{D_r}, 0)
  /// so Q.K starts as the retrieval dot product while the remaining D - D_r
  /// query columns stay free for the scorer.
  static AlignmentModel from_retrieval(retrieval::RetrievalModel& r, AlignmentConfig cfg,
                                       ModelKind kind = ModelKind::coarse_to_fine) {
    const Index d = r.sentence_encoder()->dim();
    const Index dr = r.dim_r();
    if (dr > d)
      throw AlignmentError("retrieval space width " + std::to_string(dr) + " exceeds the sentence width " + std::to_string(d));
    encoders::ImageEncoderConfig icfg;
    icfg.feature_dim = r.feature_dim();
    icfg.dim = d;
    icfg.layers = cfg.layers;
    icfg.heads = cfg.heads;
    icfg.ffn_hidden = cfg.ffn_hidden;
    icfg.block_gain = cfg.block_gain;
    icfg.seed = cfg.seed + 1;
    AlignmentModel m(r.sentence_encoder(), icfg, cfg, kind);
    auto& proj = m.images_.input_projection();
    proj.weight.value.setZero();
    proj.weight.value.leftCols(dr) = r.image_head().weight.value;
    if (proj.bias) {
      proj.bias->value.setZero();
      if (r.image_head().bias) proj.bias->value.leftCols(dr) = r.image_head().bias->value;
    }
    m.attn_.wq.value.leftCols(dr) = r.sentence_head().weight.value;
    m.attn_.wk.value.setZero();
    m.attn_.wk.value.topLeftCorner(dr, dr).setIdentity();
    return m;
  }

  Forward forward(Tape& t, const MultimodalDocument& doc) {
    Var G = sentences_->encode(t, doc.sentences);
    Var C = images_.encode(t, doc.feature_matrix());
    Forward f;
    f.attention = cross_attention(t, G, C, attn_, cfg_.attention);
    f.p = score_sentences(t, f.attention.refined, scorer_);
    return f;
  }

  /// One-pass scoring: m x n matrix of per-image sentence probabilities.
  std::vector<Var> forward_per_image(Tape& t, const MultimodalDocument& doc) {
    Var G = sentences_->encode(t, doc.sentences);
    Var C = images_.encode(t, doc.feature_matrix());
    Var Q = ad::matmul(G, t.param(attn_.wq));
    Var K = ad::matmul(C, t.param(attn_.wk));
    // The bias gives a_ij a direction the scorer can read regardless of the
    // image's own embedding.
    Var V = ad::add_rowvec(ad::matmul(C, t.param(attn_.wv)), t.param(value_bias_));
    const double inv = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
    std::vector<Var> out;
    for (Index j = 0; j < C.rows(); ++j) {
      Var kj = ad::gather_rows(K, {j});
      Var a = ad::transpose(ad::row_softmax(ad::scale(ad::matmul_nt(kj, Q), inv)));  // m x 1
      Var refined = ad::add(Q, ad::matmul(a, ad::gather_rows(V, {j})));
      out.push_back(score_sentences(t, refined, scorer_));
    }
    return out;
  }

  /// Coarse-pass artifacts for a document (no gradient).
  AttentionArtifacts attend(const MultimodalDocument& doc, Eigen::VectorXd* p = nullptr) const {
    Tape t;
    auto f = const_cast<AlignmentModel*>(this)->forward(t, doc);
    if (p) *p = f.p.value().col(0);
    return {f.attention.O.value(), f.attention.A.value(), f.attention.refined.value(),
            static_cast<std::size_t>(std::count(f.attention.guarded.begin(), f.attention.guarded.end(), 1))};
  }

  /// m x n per-image probabilities of the one-pass model.
  Mat per_image_scores(const MultimodalDocument& doc) const {
    Tape t;
    auto cols = const_cast<AlignmentModel*>(this)->forward_per_image(t, doc);
    Mat out(static_cast<Index>(doc.num_sentences()), static_cast<Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Index>(j)) = cols[j].value().col(0);
    return out;
  }

  /// Parameters owned by this model (the shared sentence encoder excluded).
  nn::ParamList parameters() {
    nn::ParamList out;
    images_.collect(out, "image_encoder");
    attn_.collect(out, "cross_attention");
    scorer_.collect(out, "scorer");
    if (kind_ == ModelKind::one_pass) out.emplace_back("one_pass.value_bias", &value_bias_);
    return out;
  }

  const encoders::SentenceEncoderHandle& sentence_encoder() const { return sentences_; }
  encoders::ImageEncoder& image_encoder() { return images_; }
  CrossAttentionParams& attention_params() { return attn_; }
  ScorerParams& scorer() { return scorer_; }
  const AlignmentConfig& config() const { return cfg_; }
  ModelKind kind() const { return kind_; }

  Json manifest() const {
    return {{"model_kind", to_string(kind_)},
            {"alignment", cfg_.to_json()},
            {"image_encoder", images_.config().to_json()},
            {"sentence_encoder", sentences_->manifest()}};
  }

  void save(const std::filesystem::path& stem, Json meta = Json::object()) {
    meta.update(manifest());
    checkpoint::save(stem, "alignment", parameters(), meta);
  }

  /// Loads a checkpoint onto the sentence encoder of `r` (which must be the
  /// retrieval model the checkpoint was trained with).
  static AlignmentModel load(const std::filesystem::path& stem, const retrieval::RetrievalModel& r) {
    const Json m = checkpoint::read_manifest(stem);
    if (m.at("sentence_encoder") != r.sentence_encoder()->manifest())
      throw checkpoint::CheckpointError("alignment checkpoint " + stem.string() +
                                        " was trained with a different sentence encoder");
    const Json& a = m.at("alignment");
    AlignmentConfig cfg;
    cfg.layers = a.at("layers");
    cfg.heads = a.at("heads");
    cfg.ffn_hidden = a.at("ffn_hidden");
    cfg.block_gain = a.at("block_gain");
    cfg.wv_std = a.at("wv_std");
    cfg.attention = parse_attention_mode(a.at("attention"));
    cfg.freeze_input_projection = a.at("freeze_input_projection");
    cfg.freeze_key_path = a.value("freeze_key_path", false);
    cfg.seed = a.at("seed");
    const Json& ie = m.at("image_encoder");
    encoders::ImageEncoderConfig icfg;
    icfg.feature_dim = ie.at("feature_dim");
    icfg.dim = ie.at("dim");
    icfg.layers = ie.at("layers");
    icfg.heads = ie.at("heads");
    icfg.ffn_hidden = ie.at("ffn_hidden");
    icfg.block_gain = ie.at("block_gain");
    icfg.normalize_projection = ie.at("normalize_projection");
    icfg.seed = ie.at("seed");
    const ModelKind kind = m.at("model_kind") == "one_pass" ? ModelKind::one_pass : ModelKind::coarse_to_fine;
    AlignmentModel model(r.sentence_encoder(), icfg, cfg, kind);
    checkpoint::load(stem, "alignment", model.parameters());
    return model;
  }

 private:
  encoders::SentenceEncoderHandle sentences_;
  encoders::ImageEncoder images_;
  CrossAttentionParams attn_;
  ScorerParams scorer_;
  Parameter value_bias_;  // one-pass only
  AlignmentConfig cfg_;
  ModelKind kind_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 10;
  std::size_t batch_docs = 8;
  std::size_t checkpoint_every = 200;  // optimizer steps between validations
  RougeVariant label_rouge = RougeVariant::rouge_l;
  std::uint64_t seed = 31;

  Json to_json() const {
    return {{"lr", lr}, {"epochs", epochs}, {"batch_docs", batch_docs}, {"checkpoint_every", checkpoint_every},
            {"label_rouge", to_string(label_rouge)}, {"seed", seed}};
  }
};

/// A document with its supervision.
struct LabeledDocument {
  const MultimodalDocument* doc = nullptr;
  SelectionLabels labels;
  std::vector<std::size_t> independent;  // one-pass targets
};

inline std::vector<LabeledDocument> label_documents(const corpus::DocumentSet& set,
                                                    const std::vector<retrieval::ReferenceCaptionSet>& refs,
                                                    RougeVariant variant) {
  if (refs.size() != set.size()) throw AlignmentError("reference caption sets must match the document count");
  std::vector<LabeledDocument> out;
  for (std::size_t d = 0; d < set.size(); ++d) {
    const auto& doc = set.documents[d];
    if (refs[d].size() != doc.num_images())
      throw AlignmentError("reference captions for " + doc.doc_id + " do not cover every image");
    out.push_back({&doc, build_labels(doc, refs[d], variant), independent_labels(doc, refs[d], variant)});
  }
  return out;
}

/// Loss of one labelled document on the tape.
inline Var document_loss(Tape& t, AlignmentModel& model, const LabeledDocument& ld) {
  if (model.kind() == ModelKind::coarse_to_fine) {
    auto f = model.forward(t, *ld.doc);
    Mat y(f.p.rows(), 1);
    for (std::size_t i = 0; i < ld.labels.y.size(); ++i) y(static_cast<Index>(i), 0) = ld.labels.y[i];
    return ad::bce(f.p, y);
  }
  auto cols = model.forward_per_image(t, *ld.doc);
  Var total = t.constant(Mat::Zero(1, 1));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    Mat y = Mat::Zero(cols[j].rows(), 1);
    y(static_cast<Index>(ld.independent[j]), 0) = 1.0;
    total = ad::add(total, ad::bce(cols[j], y));
  }
  return ad::scale(total, 1.0 / static_cast<double>(cols.size()));
}

inline double mean_loss(AlignmentModel& model, const std::vector<LabeledDocument>& docs) {
  if (docs.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (const auto& ld : docs) {
    Tape t;
    total += document_loss(t, model, ld).scalar();
  }
  return total / static_cast<double>(docs.size());
}

struct TrainReport {
  double initial_validation = 0.0;
  double best_validation = 0.0;
  std::size_t best_step = 0;
  std::size_t steps = 0;
  std::vector<std::pair<std::size_t, double>> history;  // (step, validation loss)
};

/// Adam over the alignment parameters with the shared sentence encoder frozen.
/// Validation loss is measured at step 0, every checkpoint_every steps and at
/// the end; the best snapshot is restored before returning.
inline TrainReport train_alignment(AlignmentModel& model, const std::vector<LabeledDocument>& train,
                                   const std::vector<LabeledDocument>& valid, const TrainConfig& cfg) {
  if (train.empty()) throw AlignmentError("train_alignment: empty training corpus");
  if (cfg.batch_docs < 1) throw AlignmentError("train_alignment: batch_docs must be >= 1");
  const auto& val = valid.empty() ? train : valid;
  model.sentence_encoder()->set_trainable(false);

  auto params = model.parameters();
  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  nn::Adam opt(params, acfg);
  TrainReport report;
  report.initial_validation = mean_loss(model, val);
  report.best_validation = report.initial_validation;
  report.history.emplace_back(0, report.initial_validation);
  auto best = nn::snapshot(params);

  auto validate = [&] {
    const double v = mean_loss(model, val);
    report.history.emplace_back(report.steps, v);
    if (v < report.best_validation) {
      report.best_validation = v;
      report.best_step = report.steps;
      best = nn::snapshot(params);
    }
  };

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_docs) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_docs);
      for (std::size_t k = start; k < end; ++k) {
        Tape t;
        t.backward(document_loss(t, model, train[order[k]]));
      }
      opt.step(static_cast<double>(end - start));
      ++report.steps;
      if (cfg.checkpoint_every > 0 && report.steps % cfg.checkpoint_every == 0) validate();
    }
  }
  if (report.history.back().first != report.steps) validate();
  nn::restore(params, best);
  model.sentence_encoder()->set_trainable(true);
  return report;
}

// ---------------------------------------------------------------------------
// Inference

inline AlignmentAssignment align_document(const MultimodalDocument& doc, const AlignmentModel& model,
                                          CoarseRule rule = CoarseRule::top_n) {
  Eigen::VectorXd p;
  const auto art = model.attend(doc, &p);
  auto z = coarse_select(p, doc.num_images(), rule);
  if (z.empty()) z = coarse_select(p, 1, CoarseRule::top_n);
  return fine_align(art.A, z);
}

/// Per-image argmax of the one-pass model; duplicates allowed.
inline std::vector<std::size_t> one_pass_align(const MultimodalDocument& doc, const AlignmentModel& model) {
  const Mat s = model.per_image_scores(doc);
  std::vector<std::size_t> out;
  for (Index j = 0; j < s.cols(); ++j) out.push_back(retrieval::argmax_lowest(s.col(j).transpose()));
  return out;
}

/// Images in order, each taking its best sentence not already chosen. When
/// every sentence is taken (n > m) the image falls back to its plain argmax.
inline std::vector<std::size_t> one_pass_dedup_align(const MultimodalDocument& doc, const AlignmentModel& model) {
  const Mat s = model.per_image_scores(doc);
  std::vector<char> used(static_cast<std::size_t>(s.rows()), 0);
  std::vector<std::size_t> out;
  for (Index j = 0; j < s.cols(); ++j) {
    std::size_t best = kNone;
    for (Index i = 0; i < s.rows(); ++i) {
      if (used[static_cast<std::size_t>(i)]) continue;
      if (best == kNone || s(i, j) > s(static_cast<Index>(best), j)) best = static_cast<std::size_t>(i);
    }
    if (best == kNone) best = retrieval::argmax_lowest(s.col(j).transpose());
    used[best] = 1;
    out.push_back(best);
  }
  return out;
}

}  // namespace msmo::alignment
