// Cross-modal dual-encoder retrieval.
//
// Images: F-dim features -> image head (affine, F -> D_r).
// Sentences: shared SentenceEncoder (-> D) -> sentence head (linear, D -> D_r).
// Scores are cosine similarities. Training minimises the max-margin triplet
// loss with the hardest in-batch negative in both directions.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msmo/checkpoint.hpp"
#include "msmo/corpus.hpp"
#include "msmo/encoders.hpp"

namespace msmo::retrieval {

using ad::Index;
using ad::Mat;
using ad::Tape;
using ad::Var;
using corpus::Tokens;
using Json = nlohmann::json;

class RetrievalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kCheckpointKind = "retrieval";
inline constexpr const char* kScoringRule = "cosine";

struct Similarity {
  double value = 0.0;
  bool zero_vector = false;  // one side was the zero vector; value is 0
};

/// Cosine similarity. A zero vector on either side gives 0 and is flagged.
inline Similarity similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw RetrievalError("similarity: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  return {std::clamp(a.dot(b) / (na * nb), -1.0, 1.0), false};
}

/// Hinge triplet loss on a b x b similarity matrix whose diagonal holds the
/// positive pairs, averaged over the batch:
///   sum_i max(0, margin + max_{k != i} S(i,k) - S(i,i))
///       + max(0, margin + max_{k != i} S(k,i) - S(i,i))
/// Hardest negatives tie-break to the lowest index.
inline Var triplet_loss(Var scores, double margin) {
  const Mat& s = scores.value();
  const Index b = s.rows();
  if (b != s.cols()) throw RetrievalError("triplet_loss: similarity matrix must be square");
  if (b < 2) throw RetrievalError("triplet_loss: batch of size 1 has no negatives");
  Mat g = Mat::Zero(b, b);
  double loss = 0.0;
  for (Index i = 0; i < b; ++i) {
    Index hs = i == 0 ? 1 : 0, hi = hs;
    for (Index k = 0; k < b; ++k) {
      if (k == i) continue;
      if (s(i, k) > s(i, hs)) hs = k;
      if (s(k, i) > s(hi, i)) hi = k;
    }
    const double sent_term = margin + s(i, hs) - s(i, i);
    const double img_term = margin + s(hi, i) - s(i, i);
    if (sent_term > 0) {
      loss += sent_term;
      g(i, hs) += 1.0;
      g(i, i) -= 1.0;
    }
    if (img_term > 0) {
      loss += img_term;
      g(hi, i) += 1.0;
      g(i, i) -= 1.0;
    }
  }
  const double inv = 1.0 / static_cast<double>(b);
  return scores.tape->op(Mat::Constant(1, 1, loss * inv), {scores}, [scores, g, inv](Tape& t, std::size_t self) {
    t.accumulate(scores.id, g * (t.node(self).grad(0, 0) * inv));
  });
}

struct RetrievalConfig {
  Eigen::Index dim_r = 32;
  double margin = 0.2;
  double lr = 1e-2;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 11;

  Json to_json() const {
    return {{"dim_r", dim_r}, {"margin", margin},     {"lr", lr},   {"epochs", epochs},
            {"batch_size", batch_size}, {"holdout_fraction", holdout_fraction}, {"seed", seed}};
  }
};

struct RetrievalPair {
  Eigen::VectorXd feature;
  Tokens caption;
};

class RetrievalModel {
 public:
  RetrievalModel(encoders::SentenceEncoderHandle sentences, Eigen::Index feature_dim, Eigen::Index dim_r, double margin,
                 std::uint64_t seed)
      : sentences_(std::move(sentences)), feature_dim_(feature_dim), dim_r_(dim_r), margin_(margin) {
    if (!sentences_) throw RetrievalError("retrieval model needs a sentence encoder");
    if (!(margin >= 0.0) || !std::isfinite(margin)) throw RetrievalError("margin must be finite and >= 0");
    if (feature_dim < 1 || dim_r < 1) throw RetrievalError("retrieval dimensions must be positive");
    std::mt19937_64 rng(seed);
    image_head_ = nn::Linear(feature_dim, dim_r, rng, true);
    sentence_head_ = nn::Linear(sentences_->dim(), dim_r, rng, false);
  }

  Var project_images(Tape& t, const Mat& features) {
    if (features.cols() != feature_dim_)
      throw RetrievalError("feature width " + std::to_string(features.cols()) + " does not match model width " +
                           std::to_string(feature_dim_));
    return image_head_.forward(t, t.constant(features));
  }

  Var project_sentences(Tape& t, const std::vector<Tokens>& sentences) {
    return sentence_head_.forward(t, sentences_->encode(t, sentences));
  }

  Mat embed_images(const Mat& features) const {
    Tape t;
    return const_cast<RetrievalModel*>(this)->project_images(t, features).value();
  }

  Mat embed_sentences(const std::vector<Tokens>& sentences) const {
    Tape t;
    return const_cast<RetrievalModel*>(this)->project_sentences(t, sentences).value();
  }

  /// n x m cosine matrix between images and sentences (zero vectors score 0).
  Mat score_matrix(const Mat& features, const std::vector<Tokens>& sentences) const {
    const Mat u = embed_images(features), v = embed_sentences(sentences);
    Mat s(u.rows(), v.rows());
    for (Index i = 0; i < u.rows(); ++i)
      for (Index j = 0; j < v.rows(); ++j) s(i, j) = similarity(u.row(i).transpose(), v.row(j).transpose()).value;
    return s;
  }

  /// Parameters trained by train_retrieval (sentence encoder included).
  nn::ParamList parameters() {
    nn::ParamList out;
    sentences_->collect(out, "sentence_encoder");
    image_head_.collect(out, "image_head");
    sentence_head_.collect(out, "sentence_head");
    return out;
  }

  const encoders::SentenceEncoderHandle& sentence_encoder() const { return sentences_; }
  nn::Linear& image_head() { return image_head_; }
  nn::Linear& sentence_head() { return sentence_head_; }
  Eigen::Index feature_dim() const { return feature_dim_; }
  Eigen::Index dim_r() const { return dim_r_; }
  double margin() const { return margin_; }

  Json manifest() const {
    return {{"feature_dim", feature_dim_},
            {"dim_r", dim_r_},
            {"margin", margin_},
            {"scoring_rule", kScoringRule},
            {"sentence_encoder", sentences_->manifest()}};
  }

  void save(const std::filesystem::path& stem, Json meta = Json::object()) {
    meta.update(manifest());
    checkpoint::save(stem, kCheckpointKind, parameters(), meta);
  }

  /// Rebuilds the model (and a fresh shared sentence encoder) from disk.
  static RetrievalModel load(const std::filesystem::path& stem) {
    const Json m = checkpoint::read_manifest(stem);
    const Json& se = m.at("sentence_encoder");
    encoders::SentenceEncoderConfig scfg{se.at("dim").get<Eigen::Index>(), se.at("seed").get<std::uint64_t>()};
    auto enc = std::make_shared<encoders::SentenceEncoder>(Vocabulary(se.at("vocab").get<std::vector<std::string>>()), scfg);
    RetrievalModel model(enc, m.at("feature_dim").get<Eigen::Index>(), m.at("dim_r").get<Eigen::Index>(),
                         m.at("margin").get<double>(), 0);
    checkpoint::load(stem, kCheckpointKind, model.parameters());
    return model;
  }

 private:
  encoders::SentenceEncoderHandle sentences_;
  Eigen::Index feature_dim_;
  Eigen::Index dim_r_;
  double margin_;
  nn::Linear image_head_;
  nn::Linear sentence_head_;
};

/// Mean triplet loss of a batch of pairs.
inline Var batch_loss(Tape& t, RetrievalModel& model, const std::vector<const RetrievalPair*>& batch) {
  Mat feats(static_cast<Index>(batch.size()), model.feature_dim());
  std::vector<Tokens> caps;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    feats.row(static_cast<Index>(i)) = batch[i]->feature.transpose();
    caps.push_back(batch[i]->caption);
  }
  Var u = ad::normalize_rows(model.project_images(t, feats));
  Var v = ad::normalize_rows(model.project_sentences(t, caps));
  return triplet_loss(ad::matmul_nt(u, v), model.margin());
}

/// Loss over `pairs` in consecutive chunks of `batch_size` (a trailing chunk
/// of one pair is merged into the previous chunk).
inline double evaluate_loss(RetrievalModel& model, const std::vector<RetrievalPair>& pairs, std::size_t batch_size) {
  if (pairs.size() < 2) throw RetrievalError("need at least 2 pairs to evaluate the triplet loss");
  double total = 0.0;
  std::size_t chunks = 0;
  for (std::size_t start = 0; start < pairs.size();) {
    std::size_t end = std::min(pairs.size(), start + batch_size);
    if (pairs.size() - end == 1) ++end;
    std::vector<const RetrievalPair*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&pairs[i]);
    Tape t;
    total += batch_loss(t, model, batch).scalar();
    ++chunks;
    start = end;
  }
  return total / static_cast<double>(chunks);
}

struct TrainingReport {
  std::vector<double> heldout_loss;  // index 0: before training, k: after epoch k
  std::size_t train_pairs = 0;
  std::size_t heldout_pairs = 0;
};

/// Trains `model` in place. The last holdout_fraction of a seeded shuffle of
/// `pairs` is held out for the loss history.
inline TrainingReport train_retrieval(RetrievalModel& model, const std::vector<RetrievalPair>& pairs,
                                      const RetrievalConfig& cfg) {
  if (pairs.size() < 2) throw RetrievalError("train_retrieval needs at least 2 pairs");
  if (cfg.batch_size < 2) throw RetrievalError("batch size 1 has no in-batch negatives");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_hold = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(pairs.size())));
  if (n_hold == 1) n_hold = 2;
  if (pairs.size() - n_hold < 2) n_hold = 0;
  std::vector<RetrievalPair> train, hold;
  for (std::size_t k = 0; k < order.size(); ++k) (k < pairs.size() - n_hold ? train : hold).push_back(pairs[order[k]]);

  TrainingReport report;
  report.train_pairs = train.size();
  report.heldout_pairs = hold.size();
  auto record = [&] {
    if (!hold.empty()) report.heldout_loss.push_back(evaluate_loss(model, hold, cfg.batch_size));
  };
  record();

  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  nn::Adam opt(model.parameters(), acfg);
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t start = 0; start < idx.size();) {
      std::size_t end = std::min(idx.size(), start + cfg.batch_size);
      if (idx.size() - end == 1) ++end;
      std::vector<const RetrievalPair*> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(&train[idx[k]]);
      Tape t;
      t.backward(batch_loss(t, model, batch));
      opt.step();
      start = end;
    }
    record();
  }
  return report;
}

/// Fraction of pairs whose own caption ranks first among all captions of the
/// pool (ties go to the lowest index, so a tie with an earlier caption misses).
inline double recall_at_1(const RetrievalModel& model, const std::vector<RetrievalPair>& pairs) {
  if (pairs.empty()) return 0.0;
  Mat feats(static_cast<Index>(pairs.size()), model.feature_dim());
  std::vector<Tokens> caps;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    feats.row(static_cast<Index>(i)) = pairs[i].feature.transpose();
    caps.push_back(pairs[i].caption);
  }
  const Mat s = model.score_matrix(feats, caps);
  std::size_t hits = 0;
  for (Index i = 0; i < s.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < s.cols(); ++j)
      if (s(i, j) > s(i, best)) best = j;
    hits += best == i;
  }
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

/// (image feature, golden caption) pairs of every document with captions.
inline std::vector<RetrievalPair> caption_pairs(const corpus::DocumentSet& set) {
  std::vector<RetrievalPair> out;
  for (const auto& d : set.documents) {
    if (!d.golden_captions) continue;
    const Mat f = d.feature_matrix();
    for (std::size_t j = 0; j < d.num_images(); ++j)
      out.push_back({f.row(static_cast<Index>(j)).transpose(), (*d.golden_captions)[j]});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct ReferenceCaption {
  std::size_t source_index = 0;  // into the candidate list
  double score = 0.0;
  Tokens tokens;
};

using ReferenceCaptionSet = std::vector<ReferenceCaption>;

/// Index of the highest score; ties go to the lowest index.
inline std::size_t argmax_lowest(const Eigen::RowVectorXd& scores) {
  std::size_t best = 0;
  for (Index j = 1; j < scores.size(); ++j)
    if (scores(j) > scores(static_cast<Index>(best))) best = static_cast<std::size_t>(j);
  return best;
}

inline ReferenceCaption retrieve_reference_caption(const Eigen::VectorXd& feature, const std::vector<Tokens>& candidates,
                                                   const RetrievalModel& model) {
  if (candidates.empty()) throw RetrievalError("retrieve_reference_caption: empty candidate list");
  const Mat s = model.score_matrix(feature.transpose(), candidates);
  const std::size_t best = argmax_lowest(s.row(0));
  return {best, s(0, static_cast<Index>(best)), candidates[best]};
}

/// One best candidate per image, duplicates allowed.
inline ReferenceCaptionSet retrieve_all(const corpus::MultimodalDocument& doc, const std::vector<Tokens>& candidates,
                                        const RetrievalModel& model) {
  if (candidates.empty()) throw RetrievalError("retrieve: empty candidate list for " + doc.doc_id);
  const Mat s = model.score_matrix(doc.feature_matrix(), candidates);
  ReferenceCaptionSet out;
  for (Index j = 0; j < s.rows(); ++j) {
    const std::size_t best = argmax_lowest(s.row(j));
    out.push_back({best, s(j, static_cast<Index>(best)), candidates[best]});
  }
  return out;
}

/// Reference captions mined from the golden summary (alignment supervision).
inline ReferenceCaptionSet reference_captions(const corpus::MultimodalDocument& doc, const RetrievalModel& model) {
  return retrieve_all(doc, doc.golden_summary, model);
}

/// Pseudo captions retrieved straight from the document sentences (the
/// variant without alignment training).
inline ReferenceCaptionSet retrieve_from_document(const corpus::MultimodalDocument& doc, const RetrievalModel& model) {
  return retrieve_all(doc, doc.sentences, model);
}

}  // namespace msmo::retrieval
