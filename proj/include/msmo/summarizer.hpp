// Dual-source abstractive summarizer.
//
// One encoder (token + learned position embeddings, pre-norm blocks) is run
// separately over the document T and over the pseudo-caption text T_s,
// giving R and R_s. Each decoder block is
//   x += SelfAttn(LN(x))                       causal
//   h  = LN(x);  x += CrossAttn(h, R) + CrossAttn_s(h, R_s)
//   x += FFN(LN(x))
// with separate parameters for the two cross-attention paths. A single-source
// model is the same network with the caption path removed.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msmo/checkpoint.hpp"
#include "msmo/corpus.hpp"
#include "msmo/nn/layers.hpp"
#include "msmo/vocab.hpp"

namespace msmo::summarizer {

using ad::Index;
using ad::Mat;
using ad::Tape;
using ad::Var;
using corpus::Tokens;
using Json = nlohmann::json;

inline constexpr const char* kBos = "<bos>";
inline constexpr const char* kEos = "<eos>";
inline constexpr const char* kSep = "<sep>";
inline constexpr const char* kCheckpointKind = "summarizer";

class SummarizerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SummarizerConfig {
  Index hidden = 64;
  Index encoder_layers = 2;
  Index decoder_layers = 2;
  Index heads = 2;
  Index ffn_hidden = 128;
  std::size_t max_doc_len = 128;
  std::size_t max_cap_len = 32;
  std::size_t max_summary_len = 48;
  bool dual_source = true;
  std::uint64_t seed = 41;

  Json to_json() const {
    return {{"hidden", hidden},
            {"encoder_layers", encoder_layers},
            {"decoder_layers", decoder_layers},
            {"heads", heads},
            {"ffn_hidden", ffn_hidden},
            {"max_doc_len", max_doc_len},
            {"max_cap_len", max_cap_len},
            {"max_summary_len", max_summary_len},
            {"dual_source", dual_source},
            {"seed", seed}};
  }

  static SummarizerConfig from_json(const Json& j) {
    SummarizerConfig c;
    c.hidden = j.at("hidden");
    c.encoder_layers = j.at("encoder_layers");
    c.decoder_layers = j.at("decoder_layers");
    c.heads = j.at("heads");
    c.ffn_hidden = j.at("ffn_hidden");
    c.max_doc_len = j.at("max_doc_len");
    c.max_cap_len = j.at("max_cap_len");
    c.max_summary_len = j.at("max_summary_len");
    c.dual_source = j.at("dual_source");
    c.seed = j.at("seed");
    return c;
  }
};

/// Document tokens and the concatenated pseudo captions, both truncated.
struct DualSourceInputs {
  Tokens doc_tokens;
  Tokens caption_tokens;
};

/// Flattens the document and joins the captions in image order with <sep>.
inline DualSourceInputs make_inputs(const corpus::MultimodalDocument& doc, const std::vector<Tokens>& captions,
                                    std::size_t max_doc_len, std::size_t max_cap_len) {
  if (max_doc_len < 1 || max_cap_len < 1) throw SummarizerError("truncation caps must be >= 1");
  DualSourceInputs in;
  for (const auto& s : doc.sentences) in.doc_tokens.insert(in.doc_tokens.end(), s.begin(), s.end());
  for (std::size_t k = 0; k < captions.size(); ++k) {
    if (k) in.caption_tokens.emplace_back(kSep);
    in.caption_tokens.insert(in.caption_tokens.end(), captions[k].begin(), captions[k].end());
  }
  if (in.doc_tokens.size() > max_doc_len) in.doc_tokens.resize(max_doc_len);
  if (in.caption_tokens.size() > max_cap_len) in.caption_tokens.resize(max_cap_len);
  if (in.doc_tokens.empty()) throw SummarizerError("document " + doc.doc_id + " has no tokens");
  if (in.caption_tokens.empty()) throw SummarizerError("document " + doc.doc_id + " has no pseudo-caption tokens");
  return in;
}

/// Golden summary as one target sequence: s_1 <sep> s_2 ... (no bos/eos).
inline Tokens flatten_summary(const std::vector<Tokens>& sentences) {
  Tokens out;
  for (std::size_t k = 0; k < sentences.size(); ++k) {
    if (k) out.emplace_back(kSep);
    out.insert(out.end(), sentences[k].begin(), sentences[k].end());
  }
  return out;
}

inline std::vector<Tokens> split_sentences(const Tokens& flat) {
  std::vector<Tokens> out(1);
  for (const auto& t : flat) {
    if (t == kSep) {
      out.emplace_back();
      continue;
    }
    out.back().push_back(t);
  }
  out.erase(std::remove_if(out.begin(), out.end(), [](const Tokens& s) { return s.empty(); }), out.end());
  return out;
}

/// Vocabulary over documents, summaries and captions plus the decoder specials.
inline Vocabulary build_vocabulary(const corpus::DocumentSet& set) { return Vocabulary::from_corpus(set, {kBos, kEos, kSep}); }

struct EncoderBlock {
  nn::LayerNorm ln_attn, ln_ffn;
  nn::MultiHeadAttention attn;
  nn::FeedForward ffn;

  void collect(nn::ParamList& out, const std::string& p) {
    ln_attn.collect(out, p + ".ln_attn");
    attn.collect(out, p + ".attn");
    ln_ffn.collect(out, p + ".ln_ffn");
    ffn.collect(out, p + ".ffn");
  }
};

struct DecoderBlock {
  nn::LayerNorm ln_self, ln_cross, ln_ffn;
  nn::MultiHeadAttention self_attn, cross_doc, cross_cap;
  nn::FeedForward ffn;

  void collect(nn::ParamList& out, const std::string& p, bool dual) {
    ln_self.collect(out, p + ".ln_self");
    self_attn.collect(out, p + ".self_attn");
    ln_cross.collect(out, p + ".ln_cross");
    cross_doc.collect(out, p + ".cross_doc");
    if (dual) cross_cap.collect(out, p + ".cross_cap");
    ln_ffn.collect(out, p + ".ln_ffn");
    ffn.collect(out, p + ".ffn");
  }
};

/// One decoder block. `Rs` is ignored when `dual` is false.
inline Var decoder_block_forward(Tape& t, Var x, Var R, Var Rs, DecoderBlock& b, bool dual) {
  const Mat mask = nn::causal_mask(x.rows());
  Var h = b.ln_self.forward(t, x);
  x = ad::add(x, b.self_attn.forward(t, h, h, &mask));
  h = b.ln_cross.forward(t, x);
  Var cross = b.cross_doc.forward(t, h, R);
  if (dual) cross = ad::add(cross, b.cross_cap.forward(t, h, Rs));
  x = ad::add(x, cross);
  return ad::add(x, b.ffn.forward(t, b.ln_ffn.forward(t, x)));
}

struct SummaryOutput {
  std::vector<Tokens> sentences;
  Tokens tokens;        // flat, without bos/eos
  double score = 0.0;   // length-normalised log-probability
  double log_prob = 0.0;
  bool truncated = false;  // hit max_summary_len before <eos>
};

class SummarizerModel {
 public:
  SummarizerModel(Vocabulary vocab, SummarizerConfig cfg) : vocab_(std::move(vocab)), cfg_(cfg) {
    if (cfg.encoder_layers < 1 || cfg.decoder_layers < 1) throw SummarizerError("summarizer needs at least one block per stack");
    if (cfg.hidden < 1 || cfg.heads < 1 || cfg.hidden % cfg.heads != 0)
      throw SummarizerError("hidden size must be a positive multiple of the head count");
    for (const char* s : {kBos, kEos, kSep})
      if (!vocab_.contains(s)) throw SummarizerError(std::string("summarizer vocabulary lacks ") + s);
    std::mt19937_64 rng(cfg.seed);
    const Index h = cfg.hidden;
    const Index positions =
        static_cast<Index>(std::max({cfg.max_doc_len, cfg.max_cap_len, cfg.max_summary_len + 1}));
    embed_ = nn::Embedding(static_cast<Index>(vocab_.size()), h, rng, 1.0 / std::sqrt(static_cast<double>(h)));
    pos_ = nn::Embedding(positions, h, rng, 0.02);
    for (Index l = 0; l < cfg.encoder_layers; ++l)
      enc_.push_back({nn::LayerNorm(h), nn::LayerNorm(h), nn::MultiHeadAttention(h, cfg.heads, rng),
                      nn::FeedForward(h, cfg.ffn_hidden, rng)});
    enc_norm_ = nn::LayerNorm(h);
    for (Index l = 0; l < cfg.decoder_layers; ++l) {
      DecoderBlock b{nn::LayerNorm(h), nn::LayerNorm(h), nn::LayerNorm(h), nn::MultiHeadAttention(h, cfg.heads, rng),
                     nn::MultiHeadAttention(h, cfg.heads, rng), nn::MultiHeadAttention(h, cfg.heads, rng),
                     nn::FeedForward(h, cfg.ffn_hidden, rng)};
      dec_.push_back(std::move(b));
    }
    dec_norm_ = nn::LayerNorm(h);
    out_ = nn::Linear(h, static_cast<Index>(vocab_.size()), rng);
  }

  /// Encoder over one token sequence: len x hidden.
  Var encode(Tape& t, const Tokens& tokens) {
    if (tokens.empty()) throw SummarizerError("encode: empty input");
    if (tokens.size() > static_cast<std::size_t>(pos_.table.value.rows()))
      throw SummarizerError("encode: input longer than the position table");
    Var x = embed(t, vocab_.ids(tokens));
    for (auto& b : enc_) {
      Var h = b.ln_attn.forward(t, x);
      x = ad::add(x, b.attn.forward(t, h, h));
      x = ad::add(x, b.ffn.forward(t, b.ln_ffn.forward(t, x)));
    }
    return enc_norm_.forward(t, x);
  }

  struct Encoded {
    Var R, Rs;
  };

  Encoded encode_dual(Tape& t, const DualSourceInputs& in) {
    Encoded e;
    e.R = encode(t, in.doc_tokens);
    e.Rs = cfg_.dual_source ? encode(t, in.caption_tokens) : e.R;
    return e;
  }

  /// Next-token logits for every prefix position: len x V.
  Var decode(Tape& t, const Encoded& e, const std::vector<Index>& prefix) {
    Var x = embed(t, prefix);
    for (auto& b : dec_) x = decoder_block_forward(t, x, e.R, e.Rs, b, cfg_.dual_source);
    return out_.forward(t, dec_norm_.forward(t, x));
  }

  /// Teacher-forced mean token cross-entropy of `target` (no bos/eos), which
  /// is truncated to max_summary_len tokens.
  Var loss(Tape& t, const DualSourceInputs& in, const Tokens& target) {
    Tokens tgt = target;
    if (tgt.size() > cfg_.max_summary_len) tgt.resize(cfg_.max_summary_len);
    std::vector<Index> input{vocab_.id(kBos)};
    std::vector<Index> gold;
    for (auto id : vocab_.ids(tgt)) {
      input.push_back(id);
      gold.push_back(id);
    }
    gold.push_back(vocab_.id(kEos));
    return ad::cross_entropy_rows(decode(t, encode_dual(t, in), input), gold);
  }

  /// Beam search; hypotheses are ranked by log-probability divided by the
  /// number of generated tokens (eos included). beam_size 1 is greedy.
  SummaryOutput summarize(const DualSourceInputs& in, std::size_t beam_size) const {
    if (beam_size < 1) throw SummarizerError("beam size must be >= 1");
    auto* self = const_cast<SummarizerModel*>(this);
    Tape enc_tape;
    Encoded e = self->encode_dual(enc_tape, in);
    const Mat R = e.R.value(), Rs = e.Rs.value();
    const Index bos = vocab_.id(kBos), eos = vocab_.id(kEos);

    struct Hyp {
      std::vector<Index> ids;  // starts with bos
      double log_prob = 0.0;
      bool done = false;
    };
    auto norm = [](const Hyp& h) { return h.log_prob / static_cast<double>(h.ids.size() - 1); };
    std::vector<Hyp> beam{{{bos}, 0.0, false}};
    std::vector<Hyp> finished;
    while (!beam.empty() && finished.size() < beam_size) {
      if (beam.front().ids.size() - 1 >= cfg_.max_summary_len) break;  // token budget spent
      std::vector<Hyp> cand;
      for (const auto& h : beam) {
        Tape t;
        Encoded c{t.constant(R), t.constant(Rs)};
        const Mat logits = self->decode(t, c, h.ids).value();
        const Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        std::vector<Index> order(static_cast<std::size_t>(row.size()));
        std::iota(order.begin(), order.end(), 0);
        const std::size_t keep = std::min<std::size_t>(beam_size, order.size());
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                          [&](Index a, Index b) { return row(a) > row(b) || (row(a) == row(b) && a < b); });
        for (std::size_t k = 0; k < keep; ++k) {
          Hyp n = h;
          n.ids.push_back(order[k]);
          n.log_prob += row(order[k]) - lse;
          n.done = order[k] == eos;
          cand.push_back(std::move(n));
        }
      }
      std::stable_sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) { return a.log_prob > b.log_prob; });
      cand.resize(std::min(cand.size(), beam_size));
      beam.clear();
      for (auto& c : cand) (c.done ? finished : beam).push_back(std::move(c));
    }
    SummaryOutput out;
    const Hyp* best = nullptr;
    for (const auto& h : finished)
      if (!best || norm(h) > norm(*best)) best = &h;
    if (!best) {
      for (const auto& h : beam)
        if (!best || norm(h) > norm(*best)) best = &h;
      out.truncated = true;
    }
    for (std::size_t k = 1; k < best->ids.size(); ++k)
      if (best->ids[k] != eos) out.tokens.push_back(vocab_.token(best->ids[k]));
    out.log_prob = best->log_prob;
    out.score = norm(*best);
    out.sentences = split_sentences(out.tokens);
    return out;
  }

  /// Same weights, caption path removed.
  SummarizerModel single_source() const {
    SummarizerModel m = *this;
    m.cfg_.dual_source = false;
    return m;
  }

  /// Zeroes the caption-side cross-attention value projections.
  void zero_caption_values() {
    for (auto& b : dec_) b.cross_cap.wv.value.setZero();
  }

  nn::ParamList parameters() {
    nn::ParamList out;
    embed_.collect(out, "embed");
    pos_.collect(out, "position");
    for (std::size_t l = 0; l < enc_.size(); ++l) enc_[l].collect(out, "encoder" + std::to_string(l));
    enc_norm_.collect(out, "encoder_norm");
    for (std::size_t l = 0; l < dec_.size(); ++l) dec_[l].collect(out, "decoder" + std::to_string(l), cfg_.dual_source);
    dec_norm_.collect(out, "decoder_norm");
    out_.collect(out, "output");
    return out;
  }

  std::vector<DecoderBlock>& decoder_blocks() { return dec_; }
  const Vocabulary& vocab() const { return vocab_; }
  const SummarizerConfig& config() const { return cfg_; }

  Json manifest() const { return {{"summarizer", cfg_.to_json()}, {"vocab", vocab_.tokens()}}; }

  void save(const std::filesystem::path& stem, Json meta = Json::object()) {
    meta.update(manifest());
    checkpoint::save(stem, kCheckpointKind, parameters(), meta);
  }

  static SummarizerModel load(const std::filesystem::path& stem) {
    const Json m = checkpoint::read_manifest(stem);
    if (!m.contains("summarizer") || !m.contains("vocab"))
      throw checkpoint::CheckpointError("summarizer manifest " + stem.string() + " lacks model fields");
    SummarizerModel model(Vocabulary(m.at("vocab").get<std::vector<std::string>>()), SummarizerConfig::from_json(m.at("summarizer")));
    checkpoint::load(stem, kCheckpointKind, model.parameters());
    return model;
  }

 private:
  Var embed(Tape& t, std::vector<Index> ids) {
    std::vector<Index> pos(ids.size());
    std::iota(pos.begin(), pos.end(), 0);
    return ad::add(embed_.forward(t, std::move(ids)), pos_.forward(t, std::move(pos)));
  }

  Vocabulary vocab_;
  SummarizerConfig cfg_;
  nn::Embedding embed_, pos_;
  std::vector<EncoderBlock> enc_;
  nn::LayerNorm enc_norm_;
  std::vector<DecoderBlock> dec_;
  nn::LayerNorm dec_norm_;
  nn::Linear out_;
};

/// Greedy decoding, kept as a separate loop from the beam search.
inline SummaryOutput greedy_decode(const SummarizerModel& model, const DualSourceInputs& in) {
  auto& m = const_cast<SummarizerModel&>(model);
  const Index bos = model.vocab().id(kBos), eos = model.vocab().id(kEos);
  Tape enc_tape;
  auto e = m.encode_dual(enc_tape, in);
  std::vector<Index> ids{bos};
  SummaryOutput out;
  out.truncated = true;
  while (ids.size() - 1 < model.config().max_summary_len) {
    Tape t;
    SummarizerModel::Encoded c{t.constant(e.R.value()), t.constant(e.Rs.value())};
    const Mat logits = m.decode(t, c, ids).value();
    const Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
    Index best;
    row.maxCoeff(&best);
    const double mx = row.maxCoeff();
    out.log_prob += row(best) - (mx + std::log((row.array() - mx).exp().sum()));
    ids.push_back(best);
    if (best == eos) {
      out.truncated = false;
      break;
    }
  }
  for (std::size_t k = 1; k < ids.size(); ++k)
    if (ids[k] != eos) out.tokens.push_back(model.vocab().token(ids[k]));
  out.score = out.log_prob / static_cast<double>(ids.size() - 1);
  out.sentences = split_sentences(out.tokens);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct SummaryExample {
  std::string doc_id;
  DualSourceInputs inputs;
  Tokens target;
};

struct TrainConfig {
  double lr = 1e-4;
  std::size_t epochs = 10;
  std::size_t batch_docs = 8;
  std::size_t checkpoint_every = 100;
  std::uint64_t seed = 51;

  Json to_json() const {
    return {{"lr", lr}, {"epochs", epochs}, {"batch_docs", batch_docs}, {"checkpoint_every", checkpoint_every}, {"seed", seed}};
  }
};

struct TrainReport {
  double initial_validation = 0.0;  // mean token cross-entropy
  double best_validation = 0.0;
  std::size_t best_step = 0;
  std::size_t steps = 0;
  std::vector<std::pair<std::size_t, double>> history;

  double initial_perplexity() const { return std::exp(initial_validation); }
  double best_perplexity() const { return std::exp(best_validation); }
};

inline SummaryExample make_example(const corpus::MultimodalDocument& doc, const std::vector<Tokens>& captions,
                                   const SummarizerConfig& cfg) {
  return {doc.doc_id, make_inputs(doc, captions, cfg.max_doc_len, cfg.max_cap_len), flatten_summary(doc.golden_summary)};
}

inline double mean_loss(SummarizerModel& model, const std::vector<SummaryExample>& data) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (const auto& ex : data) {
    Tape t;
    total += model.loss(t, ex.inputs, ex.target).scalar();
  }
  return total / static_cast<double>(data.size());
}

/// Teacher-forced Adam training; the best validation snapshot is restored.
inline TrainReport train_summarizer(SummarizerModel& model, const std::vector<SummaryExample>& train,
                                    const std::vector<SummaryExample>& valid, const TrainConfig& cfg) {
  if (train.empty()) throw SummarizerError("train_summarizer: empty training corpus");
  if (cfg.batch_docs < 1) throw SummarizerError("train_summarizer: batch_docs must be >= 1");
  const auto& val = valid.empty() ? train : valid;
  auto params = model.parameters();
  nn::AdamConfig acfg;
  acfg.lr = cfg.lr;
  nn::Adam opt(params, acfg);
  TrainReport report;
  report.initial_validation = report.best_validation = mean_loss(model, val);
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
        const auto& ex = train[order[k]];
        t.backward(model.loss(t, ex.inputs, ex.target));
      }
      opt.step(static_cast<double>(end - start));
      ++report.steps;
      if (cfg.checkpoint_every > 0 && report.steps % cfg.checkpoint_every == 0) validate();
    }
  }
  if (report.history.back().first != report.steps) validate();
  nn::restore(params, best);
  return report;
}

/// Extractive baseline: the first k document sentences, k = golden summary length.
inline std::vector<Tokens> lead_k(const corpus::MultimodalDocument& doc) {
  const std::size_t k = std::min(doc.golden_summary.size(), doc.sentences.size());
  return {doc.sentences.begin(), doc.sentences.begin() + static_cast<std::ptrdiff_t>(k)};
}

}  // namespace msmo::summarizer
