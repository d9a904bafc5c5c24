// Planted-alignment corpus generator.
//
// Every document has n images and m > n sentences. Image j owns a latent
// concept set of three "visual" tokens; its clean feature vector is the sum of
// those tokens' codebook vectors, and its planted sentence is built from the
// three visual tokens whose codes best match that feature:
//
//   [breaking] pictured c1 c2 c3 in w w
//
// The leading "breaking" marks images in the salient subset. The golden
// summary is the planted sentences of the salient images (image order), the
// golden captions are all planted sentences, and the remaining m - n
// sentences are filler distractors. Some images re-use two concepts of an
// earlier image ("twins"), so images inside a document can look alike.
//
// noise_level perturbs the observed features (Gaussian, relative to the
// feature scale) and swaps planted visual tokens for random ones with the same
// probability. The document skeleton is drawn from a stream independent of
// the noise stream, so changing noise_level alone keeps every document's
// structure.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "msmo/corpus.hpp"

namespace msmo::synthetic {

using corpus::Tokens;

inline constexpr const char* kCaptionCue = "pictured";
inline constexpr const char* kCaptionJoin = "in";
inline constexpr const char* kSalienceMarker = "breaking";
inline constexpr std::size_t kConceptsPerImage = 3;

struct SyntheticConfig {
  std::size_t num_docs = 200;
  std::size_t vocab_size = 120;
  std::pair<std::size_t, std::size_t> sentences_per_doc{8, 12};
  std::pair<std::size_t, std::size_t> images_per_doc{3, 6};
  std::size_t feature_dim = 32;
  double noise_level = 0.1;
  std::uint64_t seed = 7;
  /// Chance that an image shares two concepts with an earlier image.
  double twin_probability = 0.35;
  std::string doc_prefix = "doc";

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (sentences_per_doc.first < 1 || sentences_per_doc.first > sentences_per_doc.second)
      v.push_back("sentences_per_doc range must be non-empty and start at >= 1");
    if (images_per_doc.first < 1 || images_per_doc.first > images_per_doc.second)
      v.push_back("images_per_doc range must be non-empty and start at >= 1");
    if (feature_dim < 2) v.push_back("feature_dim must be >= 2");
    if (!(noise_level >= 0.0 && noise_level <= 1.0)) v.push_back("noise_level must lie in [0, 1]");
    if (!(twin_probability >= 0.0 && twin_probability <= 1.0)) v.push_back("twin_probability must lie in [0, 1]");
    // Each image needs fresh visual tokens and fillers need some variety.
    if (vocab_size < 3 + 2 * (kConceptsPerImage * images_per_doc.second + 4))
      v.push_back("vocab_size too small for images_per_doc upper bound");
    return v;
  }
};

/// Vocabulary layout and the token codebook that ties visual tokens to the
/// feature space. Deterministic given (vocab_size, feature_dim, seed).
class Codebook {
 public:
  Codebook(std::size_t vocab_size, std::size_t feature_dim, std::uint64_t seed) : dim_(feature_dim) {
    const std::size_t content = vocab_size - 3;
    const std::size_t visual = content / 2;
    for (std::size_t i = 0; i < visual; ++i) visual_.push_back("v" + std::to_string(i));
    for (std::size_t i = 0; i < content - visual; ++i) filler_.push_back("w" + std::to_string(i));
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> gauss(0.0, 1.0);
    codes_.resize(static_cast<Eigen::Index>(visual), static_cast<Eigen::Index>(feature_dim));
    for (Eigen::Index r = 0; r < codes_.rows(); ++r) {
      for (Eigen::Index c = 0; c < codes_.cols(); ++c) codes_(r, c) = gauss(rng);
      codes_.row(r).normalize();
      index_[visual_[static_cast<std::size_t>(r)]] = static_cast<std::size_t>(r);
    }
  }

  const std::vector<std::string>& visual_tokens() const { return visual_; }
  const std::vector<std::string>& filler_tokens() const { return filler_; }
  std::size_t feature_dim() const { return dim_; }

  /// Code vector of a token; zero for non-visual tokens.
  Eigen::VectorXd code(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
    return codes_.row(static_cast<Eigen::Index>(it->second)).transpose();
  }

  /// Sum of token codes (the toy sentence encoder used as alignment oracle).
  Eigen::VectorXd encode(const Tokens& sentence) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
    for (const auto& t : sentence) v += code(t);
    return v;
  }

  /// Cosine between a feature vector and a sentence code; 0 for zero vectors.
  double similarity(const Eigen::VectorXd& feature, const Tokens& sentence) const {
    const Eigen::VectorXd s = encode(sentence);
    const double denom = feature.norm() * s.norm();
    return denom > 0.0 ? feature.dot(s) / denom : 0.0;
  }

  /// The k visual tokens whose codes have the largest dot product with the
  /// feature, in descending order (ties: lower token index).
  std::vector<std::size_t> top_tokens(const Eigen::VectorXd& feature, std::size_t k) const {
    const Eigen::VectorXd dots = codes_ * feature;
    std::vector<std::size_t> idx(static_cast<std::size_t>(dots.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return dots(static_cast<Eigen::Index>(a)) > dots(static_cast<Eigen::Index>(b));
    });
    idx.resize(std::min(k, idx.size()));
    return idx;
  }

  Eigen::RowVectorXd code_row(std::size_t visual_index) const { return codes_.row(static_cast<Eigen::Index>(visual_index)); }

 private:
  std::size_t dim_;
  std::vector<std::string> visual_;
  std::vector<std::string> filler_;
  Eigen::MatrixXd codes_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

struct DocSkeleton {
  std::vector<std::vector<std::size_t>> concepts;  // per image, visual token indices
  std::vector<Eigen::RowVectorXd> clean_features;
  std::vector<Tokens> planted;  // noise-free planted sentences
  std::vector<Tokens> distractors;
  std::vector<std::size_t> salient;
  std::vector<std::size_t> order;  // shuffled slot order: < n planted, >= n distractor
};

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline bool planted_is_unique_argmax(const Codebook& book, const DocSkeleton& sk) {
  std::vector<const Tokens*> all;
  for (const auto& s : sk.planted) all.push_back(&s);
  for (const auto& s : sk.distractors) all.push_back(&s);
  for (std::size_t j = 0; j < sk.planted.size(); ++j) {
    const Eigen::VectorXd f = sk.clean_features[j].transpose();
    const double own = book.similarity(f, sk.planted[j]);
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (i == j) continue;
      if (book.similarity(f, *all[i]) >= own - 1e-9) return false;
    }
  }
  return true;
}

inline DocSkeleton draw_skeleton(const SyntheticConfig& cfg, const Codebook& book, std::mt19937_64& rng) {
  const auto& visual = book.visual_tokens();
  const auto& filler = book.filler_tokens();
  for (;;) {
    DocSkeleton sk;
    const std::size_t n = uniform_index(rng, cfg.images_per_doc.first, cfg.images_per_doc.second);
    const std::size_t m_lo = std::max(cfg.sentences_per_doc.first, n + 1);
    const std::size_t m = uniform_index(rng, m_lo, std::max(m_lo, cfg.sentences_per_doc.second));

    std::bernoulli_distribution twin(cfg.twin_probability);
    std::set<std::size_t> used;
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<std::size_t> concept_set;
      if (j > 0 && twin(rng)) {
        const auto& base = sk.concepts[uniform_index(rng, 0, j - 1)];
        std::vector<std::size_t> pool = base;
        std::shuffle(pool.begin(), pool.end(), rng);
        concept_set.assign(pool.begin(), pool.begin() + 2);
      }
      while (concept_set.size() < kConceptsPerImage) {
        const std::size_t t = uniform_index(rng, 0, visual.size() - 1);
        if (used.count(t) || std::count(concept_set.begin(), concept_set.end(), t)) continue;
        concept_set.push_back(t);
      }
      for (auto t : concept_set) used.insert(t);
      Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(book.feature_dim()));
      for (auto t : concept_set) x += book.code_row(t);
      sk.concepts.push_back(concept_set);
      sk.clean_features.push_back(x);

      Tokens sent{kCaptionCue};
      for (auto t : book.top_tokens(x.transpose(), kConceptsPerImage)) sent.push_back(visual[t]);
      sent.push_back(kCaptionJoin);
      for (int k = 0; k < 2; ++k) sent.push_back(filler[uniform_index(rng, 0, filler.size() - 1)]);
      sk.planted.push_back(std::move(sent));
    }

    std::set<Tokens> seen(sk.planted.begin(), sk.planted.end());
    std::bernoulli_distribution has_visual(0.3);
    while (sk.distractors.size() < m - n) {
      Tokens d;
      const std::size_t len = uniform_index(rng, 5, 7);
      for (std::size_t k = 0; k < len; ++k) d.push_back(filler[uniform_index(rng, 0, filler.size() - 1)]);
      if (has_visual(rng)) d[uniform_index(rng, 0, len - 1)] = visual[uniform_index(rng, 0, visual.size() - 1)];
      if (seen.insert(d).second) sk.distractors.push_back(std::move(d));
    }

    const std::size_t max_salient = std::max<std::size_t>(1, n / 3);
    const std::size_t k = uniform_index(rng, 1, max_salient);
    std::vector<std::size_t> images(n);
    for (std::size_t j = 0; j < n; ++j) images[j] = j;
    std::shuffle(images.begin(), images.end(), rng);
    sk.salient.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(sk.salient.begin(), sk.salient.end());
    for (auto j : sk.salient) sk.planted[j].insert(sk.planted[j].begin(), kSalienceMarker);

    sk.order.resize(m);
    for (std::size_t i = 0; i < m; ++i) sk.order[i] = i;
    std::shuffle(sk.order.begin(), sk.order.end(), rng);

    if (planted_is_unique_argmax(book, sk)) return sk;
  }
}

}  // namespace detail

/// Generates `config.num_docs` documents. Throws corpus::CorpusError on an
/// invalid config.
inline corpus::DocumentSet generate_synthetic(const SyntheticConfig& config,
                                              corpus::Split split = corpus::Split::train) {
  if (auto v = config.violations(); !v.empty()) {
    std::string msg = "invalid SyntheticConfig:";
    for (const auto& s : v) msg += "\n  " + s;
    throw corpus::CorpusError(msg);
  }
  const Codebook book(config.vocab_size, config.feature_dim, config.seed);
  // Splits share the codebook (vocabulary and feature space) but draw
  // independent documents.
  const std::uint64_t split_offset = 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(split);
  std::mt19937_64 structure(config.seed + split_offset);
  std::mt19937_64 noise((config.seed + split_offset) * 0x2545F4914F6CDD1DULL + 1);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::bernoulli_distribution swap_token(config.noise_level);
  const auto& visual = book.visual_tokens();

  corpus::DocumentSet set;
  set.split = split;
  const int width = static_cast<int>(std::to_string(config.num_docs).size());
  for (std::size_t d = 0; d < config.num_docs; ++d) {
    auto sk = detail::draw_skeleton(config, book, structure);
    const std::size_t n = sk.planted.size();

    corpus::MultimodalDocument doc;
    std::ostringstream id;
    id << config.doc_prefix << '-' << corpus::to_string(split) << '-' << std::setw(width) << std::setfill('0') << d;
    doc.doc_id = id.str();

    std::vector<Tokens> planted = sk.planted;
    for (auto& sent : planted) {
      for (auto& tok : sent) {
        if (tok.front() != 'v') continue;
        if (swap_token(noise)) tok = visual[std::uniform_int_distribution<std::size_t>(0, visual.size() - 1)(noise)];
      }
    }
    // Noise can collide a planted sentence with another sentence; keep the
    // noise-free version in that case so plant maps stay unambiguous.
    for (std::size_t j = 0; j < n; ++j) {
      bool clash = std::count(sk.distractors.begin(), sk.distractors.end(), planted[j]) > 0;
      for (std::size_t k = 0; k < n; ++k) clash = clash || (k != j && planted[k] == planted[j]);
      if (clash) planted[j] = sk.planted[j];
    }

    for (std::size_t slot : sk.order) doc.sentences.push_back(slot < n ? planted[slot] : sk.distractors[slot - n]);
    for (std::size_t j = 0; j < n; ++j) {
      const Eigen::RowVectorXd& x = sk.clean_features[j];
      const double scale = x.norm() / std::sqrt(static_cast<double>(x.size()));
      std::vector<double> f(static_cast<std::size_t>(x.size()));
      for (Eigen::Index c = 0; c < x.size(); ++c) f[static_cast<std::size_t>(c)] = x(c) + config.noise_level * scale * gauss(noise);
      doc.image_features.push_back(std::move(f));
    }
    for (auto j : sk.salient) doc.golden_summary.push_back(planted[j]);
    doc.golden_captions = planted;
    doc.salient_image_refs = sk.salient;
    set.documents.push_back(std::move(doc));
  }
  return set;
}

}  // namespace msmo::synthetic
