// Sentence and image encoders producing D-dimensional rows.
//
// SentenceEncoder: mean of token embeddings followed by one dense tanh layer.
// One instance is shared (by std::shared_ptr) between the retrieval model and
// the alignment model.
//
// ImageEncoder: F -> D input projection, then L pre-norm transformer blocks
// (self-attention + feed-forward, residual) over the image set. The projected
// rows are optionally rescaled to a common norm first. There are no
// position embeddings, so the map is permutation-equivariant in the image rows.
#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msmo/corpus.hpp"
#include "msmo/nn/layers.hpp"
#include "msmo/vocab.hpp"

namespace msmo::encoders {

using ad::Mat;
using ad::Tape;
using ad::Var;
using corpus::Tokens;

class EncoderError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SentenceEncoderConfig {
  Eigen::Index dim = 32;
  std::uint64_t seed = 1;
};

class SentenceEncoder {
 public:
  SentenceEncoder(Vocabulary vocab, SentenceEncoderConfig cfg) : vocab_(std::move(vocab)), cfg_(cfg) {
    std::mt19937_64 rng(cfg.seed);
    embed_ = nn::Embedding(static_cast<Eigen::Index>(vocab_.size()), cfg.dim, rng, 1.0);
    dense_ = nn::Linear(cfg.dim, cfg.dim, rng);
  }

  /// m x D on the tape. Throws on an empty sentence list or empty sentence.
  Var encode(Tape& t, const std::vector<Tokens>& sentences) {
    if (sentences.empty()) throw EncoderError("encode_sentences: empty sentence list");
    std::vector<Eigen::Index> ids;
    Mat pool = Mat::Zero(static_cast<Eigen::Index>(sentences.size()), 0);
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& s : sentences) {
      if (s.empty()) throw EncoderError("encode_sentences: empty sentence");
      spans.emplace_back(ids.size(), s.size());
      for (auto id : vocab_.ids(s)) ids.push_back(id);
    }
    pool = Mat::Zero(static_cast<Eigen::Index>(sentences.size()), static_cast<Eigen::Index>(ids.size()));
    for (std::size_t i = 0; i < spans.size(); ++i) {
      const auto [start, len] = spans[i];
      pool.block(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(start), 1, static_cast<Eigen::Index>(len))
          .setConstant(1.0 / static_cast<double>(len));
    }
    Var tokens = embed_.forward(t, std::move(ids));
    Var mean = ad::matmul(t.constant(std::move(pool)), tokens);
    return ad::tanh(dense_.forward(t, mean));
  }

  /// m x D values (no gradient tracking needed by the caller).
  Mat encode(const std::vector<Tokens>& sentences) const {
    Tape t;
    // Parameters are bound read-only; the tape never writes back without backward().
    return const_cast<SentenceEncoder*>(this)->encode(t, sentences).value();
  }

  void collect(nn::ParamList& out, const std::string& prefix) {
    embed_.collect(out, prefix + ".embed");
    dense_.collect(out, prefix + ".dense");
  }

  void set_trainable(bool on) {
    embed_.table.trainable = on;
    dense_.weight.trainable = on;
    if (dense_.bias) dense_.bias->trainable = on;
  }

  const Vocabulary& vocab() const { return vocab_; }
  const SentenceEncoderConfig& config() const { return cfg_; }
  Eigen::Index dim() const { return cfg_.dim; }

  nlohmann::json manifest() const {
    return {{"dim", cfg_.dim}, {"seed", cfg_.seed}, {"vocab", vocab_.tokens()}, {"tokenizer_rule", corpus::kTokenizerRuleId}};
  }

 private:
  Vocabulary vocab_;
  SentenceEncoderConfig cfg_;
  nn::Embedding embed_;
  nn::Linear dense_;
};

using SentenceEncoderHandle = std::shared_ptr<SentenceEncoder>;

// ---------------------------------------------------------------------------

struct ImageEncoderConfig {
  Eigen::Index feature_dim = 32;
  Eigen::Index dim = 32;
  Eigen::Index layers = 2;
  Eigen::Index heads = 2;
  Eigen::Index ffn_hidden = 64;
  /// Init gain of each block's output projections; small values start the
  /// blocks close to the identity map.
  double block_gain = 0.1;
  /// Rescale each projected image to norm sqrt(D) before the blocks, so
  /// dot products against it rank like cosines.
  bool normalize_projection = true;
  std::uint64_t seed = 2;

  nlohmann::json to_json() const {
    return {{"feature_dim", feature_dim}, {"dim", dim},
            {"layers", layers},           {"heads", heads},
            {"ffn_hidden", ffn_hidden},   {"block_gain", block_gain},
            {"normalize_projection", normalize_projection}, {"seed", seed}};
  }
};

class ImageEncoder {
 public:
  struct Block {
    nn::LayerNorm ln_attn, ln_ffn;
    nn::MultiHeadAttention attn;
    nn::FeedForward ffn;
  };

  ImageEncoder() = default;
  explicit ImageEncoder(ImageEncoderConfig cfg) : cfg_(cfg) {
    if (cfg.layers < 1) throw EncoderError("image encoder needs at least one block");
    if (cfg.feature_dim < 1 || cfg.dim < 1) throw EncoderError("image encoder dimensions must be positive");
    std::mt19937_64 rng(cfg.seed);
    input_ = nn::Linear(cfg.feature_dim, cfg.dim, rng);
    for (Eigen::Index l = 0; l < cfg.layers; ++l) {
      Block b;
      b.ln_attn = nn::LayerNorm(cfg.dim);
      b.ln_ffn = nn::LayerNorm(cfg.dim);
      b.attn = nn::MultiHeadAttention(cfg.dim, cfg.heads, rng, cfg.block_gain);
      b.ffn = nn::FeedForward(cfg.dim, cfg.ffn_hidden, rng, cfg.block_gain);
      blocks_.push_back(std::move(b));
    }
  }

  /// n x F features -> n x D contextual embeddings.
  Var encode(Tape& t, const Mat& features) {
    if (features.rows() < 1) throw EncoderError("encode_images: need at least one image");
    if (features.cols() != cfg_.feature_dim)
      throw EncoderError("encode_images: feature width " + std::to_string(features.cols()) + " does not match encoder width " +
                         std::to_string(cfg_.feature_dim));
    Var x = input_.forward(t, t.constant(features));
    if (cfg_.normalize_projection) x = ad::scale(ad::normalize_rows(x), std::sqrt(static_cast<double>(cfg_.dim)));
    for (auto& b : blocks_) {
      Var h = b.ln_attn.forward(t, x);
      x = ad::add(x, b.attn.forward(t, h, h));
      x = ad::add(x, b.ffn.forward(t, b.ln_ffn.forward(t, x)));
    }
    return x;
  }

  Mat encode(const Mat& features) const {
    Tape t;
    return const_cast<ImageEncoder*>(this)->encode(t, features).value();
  }

  void collect(nn::ParamList& out, const std::string& prefix) {
    input_.collect(out, prefix + ".input");
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const std::string p = prefix + ".block" + std::to_string(l);
      blocks_[l].ln_attn.collect(out, p + ".ln_attn");
      blocks_[l].attn.collect(out, p + ".attn");
      blocks_[l].ln_ffn.collect(out, p + ".ln_ffn");
      blocks_[l].ffn.collect(out, p + ".ffn");
    }
  }

  nn::Linear& input_projection() { return input_; }
  const ImageEncoderConfig& config() const { return cfg_; }

 private:
  ImageEncoderConfig cfg_;
  nn::Linear input_;
  std::vector<Block> blocks_;
};

}  // namespace msmo::encoders
