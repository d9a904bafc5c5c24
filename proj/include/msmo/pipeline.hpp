// msmo/pipeline.hpp
//
// Pipeline configuration, in-memory stages and the file-backed subcommands
// built on them. Every artifact carries a manifest with the config hash, the
// seed and the code version.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msmo/alignment.hpp"
#include "msmo/checkpoint.hpp"
#include "msmo/corpus.hpp"
#include "msmo/retrieval.hpp"
#include "msmo/selection_eval.hpp"
#include "msmo/summarizer.hpp"
#include "msmo/synthetic.hpp"

namespace msmo::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::json;
using corpus::DocumentSet;
using corpus::Tokens;

enum class Variant { coarse_to_fine, one_pass, one_pass_dedup, wo_ita };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::coarse_to_fine: return "coarse_to_fine";
    case Variant::one_pass: return "one_pass";
    case Variant::one_pass_dedup: return "one_pass_dedup";
    case Variant::wo_ita: return "wo_ita";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(const std::string& s) {
  for (auto v : {Variant::coarse_to_fine, Variant::one_pass, Variant::one_pass_dedup, Variant::wo_ita})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

/// Alignment model kind a variant trains, if any.
inline std::optional<alignment::ModelKind> model_kind(Variant v) {
  if (v == Variant::coarse_to_fine) return alignment::ModelKind::coarse_to_fine;
  if (v == Variant::wo_ita) return std::nullopt;
  return alignment::ModelKind::one_pass;
}

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : std::runtime_error(join(violations)), violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "invalid config:";
    for (const auto& x : v) s += "\n  - " + x;
    return s;
  }
  std::vector<std::string> violations_;
};

/// A stage input is absent; the message names the subcommand producing it.
class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config

struct PipelineConfig {
  struct Paths {
    std::string workdir = "work";
    std::string corpus = "corpus";            // relative to workdir unless absolute
    std::string checkpoints = "checkpoints";  // relative to workdir unless absolute
  } paths;

  std::uint64_t seed = 7;
  Variant variant = Variant::coarse_to_fine;

  struct Synthetic {
    std::size_t train_docs = 200, valid_docs = 50, test_docs = 50;
    double noise_level = 0.1;
    std::size_t vocab_size = 120;
    std::size_t feature_dim = 32;
    double twin_probability = 0.35;
  } synthetic;

  struct Model {
    Eigen::Index dim = 64;
    Eigen::Index dim_r = 16;
    Eigen::Index layers = 2;
    Eigen::Index heads = 2;
    Eigen::Index ffn_hidden = 64;
  } model;

  struct Retrieval {
    double lr = 3e-3;
    double margin = 0.2;
    std::size_t epochs = 30;
    std::size_t batch = 16;
  } retrieval;

  struct Alignment {
    double lr = 3e-3;
    std::size_t epochs = 30;
    std::size_t batch = 8;
    std::size_t checkpoint_every = 200;
    alignment::AttentionMode attention = alignment::AttentionMode::scaled_dot;
    bool freeze_key_path = true;
    alignment::RougeVariant label_rouge = alignment::RougeVariant::rouge_l;
  } alignment;

  struct Summarizer {
    Eigen::Index hidden = 32;
    Eigen::Index encoder_layers = 2;
    Eigen::Index decoder_layers = 2;
    Eigen::Index heads = 2;
    Eigen::Index ffn_hidden = 64;
    bool dual_source = true;
    double lr = 1e-3;
    std::size_t epochs = 10;
    std::size_t batch = 8;
    std::size_t checkpoint_every = 100;
  } summarizer;

  struct Decoding {
    std::size_t beam_size = 5;
    std::size_t max_doc_len = 128;
    std::size_t max_cap_len = 32;
    std::size_t max_summary_len = 48;
  } decoding;

  Json to_json() const {
    return {{"paths", {{"workdir", paths.workdir}, {"corpus", paths.corpus}, {"checkpoints", paths.checkpoints}}},
            {"seed", seed},
            {"variant", to_string(variant)},
            {"synthetic",
             {{"train_docs", synthetic.train_docs},
              {"valid_docs", synthetic.valid_docs},
              {"test_docs", synthetic.test_docs},
              {"noise_level", synthetic.noise_level},
              {"vocab_size", synthetic.vocab_size},
              {"feature_dim", synthetic.feature_dim},
              {"twin_probability", synthetic.twin_probability}}},
            {"model",
             {{"dim", model.dim},
              {"dim_r", model.dim_r},
              {"layers", model.layers},
              {"heads", model.heads},
              {"ffn_hidden", model.ffn_hidden}}},
            {"retrieval",
             {{"lr", retrieval.lr}, {"margin", retrieval.margin}, {"epochs", retrieval.epochs}, {"batch", retrieval.batch}}},
            {"alignment",
             {{"lr", alignment.lr},
              {"epochs", alignment.epochs},
              {"batch", alignment.batch},
              {"checkpoint_every", alignment.checkpoint_every},
              {"attention", alignment::to_string(alignment.attention)},
              {"freeze_key_path", alignment.freeze_key_path},
              {"label_rouge", alignment::to_string(alignment.label_rouge)}}},
            {"summarizer",
             {{"hidden", summarizer.hidden},
              {"encoder_layers", summarizer.encoder_layers},
              {"decoder_layers", summarizer.decoder_layers},
              {"heads", summarizer.heads},
              {"ffn_hidden", summarizer.ffn_hidden},
              {"dual_source", summarizer.dual_source},
              {"lr", summarizer.lr},
              {"epochs", summarizer.epochs},
              {"batch", summarizer.batch},
              {"checkpoint_every", summarizer.checkpoint_every}}},
            {"decoding",
             {{"beam_size", decoding.beam_size},
              {"max_doc_len", decoding.max_doc_len},
              {"max_cap_len", decoding.max_cap_len},
              {"max_summary_len", decoding.max_summary_len}}}};
  }

  /// FNV-1a over the canonical config without paths.
  std::string hash() const {
    Json j = to_json();
    j.erase("paths");
    return checkpoint::hex64(checkpoint::fnv1a(j.dump()));
  }

  synthetic::SyntheticConfig synthetic_config(corpus::Split split) const {
    synthetic::SyntheticConfig c;
    c.num_docs = split == corpus::Split::train ? synthetic.train_docs
                 : split == corpus::Split::valid ? synthetic.valid_docs
                                                 : synthetic.test_docs;
    c.noise_level = synthetic.noise_level;
    c.vocab_size = synthetic.vocab_size;
    c.feature_dim = synthetic.feature_dim;
    c.twin_probability = synthetic.twin_probability;
    c.seed = seed;
    return c;
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    auto positive = [&](double x, const std::string& name) {
      if (!(x > 0.0) || !std::isfinite(x)) v.push_back(name + " must be positive");
    };
    positive(static_cast<double>(synthetic.train_docs), "synthetic.train_docs");
    positive(static_cast<double>(synthetic.valid_docs), "synthetic.valid_docs");
    positive(static_cast<double>(synthetic.test_docs), "synthetic.test_docs");
    for (const auto& s : synthetic_config(corpus::Split::train).violations()) v.push_back("synthetic: " + s);
    positive(static_cast<double>(model.dim), "model.dim");
    positive(static_cast<double>(model.dim_r), "model.dim_r");
    positive(static_cast<double>(model.layers), "model.layers");
    positive(static_cast<double>(model.heads), "model.heads");
    positive(static_cast<double>(model.ffn_hidden), "model.ffn_hidden");
    if (model.dim_r > model.dim) v.push_back("model.dim_r must not exceed model.dim");
    if (model.heads > 0 && model.dim % model.heads != 0) v.push_back("model.heads must divide model.dim");
    positive(retrieval.lr, "retrieval.lr");
    if (!(retrieval.margin >= 0.0) || !std::isfinite(retrieval.margin)) v.push_back("retrieval.margin must be >= 0");
    positive(static_cast<double>(retrieval.epochs), "retrieval.epochs");
    if (retrieval.batch < 2) v.push_back("retrieval.batch must be >= 2");
    positive(alignment.lr, "alignment.lr");
    positive(static_cast<double>(alignment.epochs), "alignment.epochs");
    positive(static_cast<double>(alignment.batch), "alignment.batch");
    positive(static_cast<double>(alignment.checkpoint_every), "alignment.checkpoint_every");
    positive(static_cast<double>(summarizer.hidden), "summarizer.hidden");
    positive(static_cast<double>(summarizer.encoder_layers), "summarizer.encoder_layers");
    positive(static_cast<double>(summarizer.decoder_layers), "summarizer.decoder_layers");
    positive(static_cast<double>(summarizer.heads), "summarizer.heads");
    positive(static_cast<double>(summarizer.ffn_hidden), "summarizer.ffn_hidden");
    if (summarizer.heads > 0 && summarizer.hidden % summarizer.heads != 0)
      v.push_back("summarizer.heads must divide summarizer.hidden");
    positive(summarizer.lr, "summarizer.lr");
    positive(static_cast<double>(summarizer.epochs), "summarizer.epochs");
    positive(static_cast<double>(summarizer.batch), "summarizer.batch");
    positive(static_cast<double>(summarizer.checkpoint_every), "summarizer.checkpoint_every");
    positive(static_cast<double>(decoding.beam_size), "decoding.beam_size");
    positive(static_cast<double>(decoding.max_doc_len), "decoding.max_doc_len");
    positive(static_cast<double>(decoding.max_cap_len), "decoding.max_cap_len");
    positive(static_cast<double>(decoding.max_summary_len), "decoding.max_summary_len");
    if (paths.workdir.empty()) v.push_back("paths.workdir must not be empty");
    if (paths.corpus.empty()) v.push_back("paths.corpus must not be empty");
    if (paths.checkpoints.empty()) v.push_back("paths.checkpoints must not be empty");
    return v;
  }

  void validate() const {
    auto v = violations();
    if (!v.empty()) throw ConfigError(std::move(v));
  }

  // Seeds of the individual stages, derived from the run seed.
  std::uint64_t encoder_seed() const { return seed + 101; }
  std::uint64_t retrieval_seed() const { return seed + 102; }
  std::uint64_t retrieval_train_seed() const { return seed + 103; }
  std::uint64_t alignment_seed() const { return seed + 104; }
  std::uint64_t alignment_train_seed() const { return seed + 105; }
  std::uint64_t summarizer_seed() const { return seed + 106; }
  std::uint64_t summarizer_train_seed() const { return seed + 107; }

  alignment::AlignmentConfig alignment_model_config() const {
    alignment::AlignmentConfig c;
    c.layers = model.layers;
    c.heads = model.heads;
    c.ffn_hidden = model.ffn_hidden;
    c.attention = alignment.attention;
    c.freeze_key_path = alignment.freeze_key_path;
    c.seed = alignment_seed();
    return c;
  }

  alignment::TrainConfig alignment_train_config() const {
    alignment::TrainConfig c;
    c.lr = alignment.lr;
    c.epochs = alignment.epochs;
    c.batch_docs = alignment.batch;
    c.checkpoint_every = alignment.checkpoint_every;
    c.label_rouge = alignment.label_rouge;
    c.seed = alignment_train_seed();
    return c;
  }

  summarizer::SummarizerConfig summarizer_model_config() const {
    summarizer::SummarizerConfig c;
    c.hidden = summarizer.hidden;
    c.encoder_layers = summarizer.encoder_layers;
    c.decoder_layers = summarizer.decoder_layers;
    c.heads = summarizer.heads;
    c.ffn_hidden = summarizer.ffn_hidden;
    c.max_doc_len = decoding.max_doc_len;
    c.max_cap_len = decoding.max_cap_len;
    c.max_summary_len = decoding.max_summary_len;
    c.dual_source = summarizer.dual_source;
    c.seed = summarizer_seed();
    return c;
  }

  summarizer::TrainConfig summarizer_train_config() const {
    summarizer::TrainConfig c;
    c.lr = summarizer.lr;
    c.epochs = summarizer.epochs;
    c.batch_docs = summarizer.batch;
    c.checkpoint_every = summarizer.checkpoint_every;
    c.seed = summarizer_train_seed();
    return c;
  }
};

namespace detail {

/// Reads known keys of one JSON object into fields; records type errors and
/// unknown keys as violations.
class Reader {
 public:
  Reader(const Json& j, std::string where, std::vector<std::string>& errors)
      : j_(j), where_(std::move(where)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(name("") + " must be an object");
  }

  ~Reader() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) errors_.push_back(name(it.key()) + ": unknown key");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    const Json* v = find(key);
    if (!v) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) return bad(key, "a boolean");
      out = v->get<bool>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) return bad(key, "a number");
      out = v->get<T>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v->is_number_unsigned()) return bad(key, "a non-negative integer");
      out = v->get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer()) return bad(key, "an integer");
      out = v->get<T>();
    } else {
      if (!v->is_string()) return bad(key, "a string");
      out = v->get<std::string>();
    }
  }

  template <class E, class Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string s;
    const Json* v = find(key);
    if (!v) return;
    if (!v->is_string()) return bad(key, "a string");
    try {
      out = parse(v->get<std::string>());
    } catch (const std::exception&) {
      errors_.push_back(name(key) + ": unsupported value '" + v->get<std::string>() + "'");
    }
  }

  const Json* section(const std::string& key) { return find(key); }
  std::string name(const std::string& key) const { return where_.empty() ? key : key.empty() ? where_ : where_ + "." + key; }

 private:
  const Json* find(const std::string& key) {
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }
  void bad(const std::string& key, const std::string& what) { errors_.push_back(name(key) + " must be " + what); }

  const Json& j_;
  std::string where_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Parses a config over the defaults. Throws ConfigError listing every
/// problem, including failed validation.
inline PipelineConfig config_from_json(const Json& j) {
  PipelineConfig c;
  std::vector<std::string> errors;
  {
    detail::Reader top(j, "", errors);
    top.get("seed", c.seed);
    top.get_enum("variant", c.variant, [](const std::string& s) {
      auto v = parse_variant(s);
      if (!v) throw std::invalid_argument(s);
      return *v;
    });
    if (const Json* s = top.section("paths")) {
      detail::Reader r(*s, "paths", errors);
      r.get("workdir", c.paths.workdir);
      r.get("corpus", c.paths.corpus);
      r.get("checkpoints", c.paths.checkpoints);
    }
    if (const Json* s = top.section("synthetic")) {
      detail::Reader r(*s, "synthetic", errors);
      r.get("train_docs", c.synthetic.train_docs);
      r.get("valid_docs", c.synthetic.valid_docs);
      r.get("test_docs", c.synthetic.test_docs);
      r.get("noise_level", c.synthetic.noise_level);
      r.get("vocab_size", c.synthetic.vocab_size);
      r.get("feature_dim", c.synthetic.feature_dim);
      r.get("twin_probability", c.synthetic.twin_probability);
    }
    if (const Json* s = top.section("model")) {
      detail::Reader r(*s, "model", errors);
      r.get("dim", c.model.dim);
      r.get("dim_r", c.model.dim_r);
      r.get("layers", c.model.layers);
      r.get("heads", c.model.heads);
      r.get("ffn_hidden", c.model.ffn_hidden);
    }
    if (const Json* s = top.section("retrieval")) {
      detail::Reader r(*s, "retrieval", errors);
      r.get("lr", c.retrieval.lr);
      r.get("margin", c.retrieval.margin);
      r.get("epochs", c.retrieval.epochs);
      r.get("batch", c.retrieval.batch);
    }
    if (const Json* s = top.section("alignment")) {
      detail::Reader r(*s, "alignment", errors);
      r.get("lr", c.alignment.lr);
      r.get("epochs", c.alignment.epochs);
      r.get("batch", c.alignment.batch);
      r.get("checkpoint_every", c.alignment.checkpoint_every);
      r.get_enum("attention", c.alignment.attention, alignment::parse_attention_mode);
      r.get("freeze_key_path", c.alignment.freeze_key_path);
      r.get_enum("label_rouge", c.alignment.label_rouge, alignment::parse_rouge_variant);
    }
    if (const Json* s = top.section("summarizer")) {
      detail::Reader r(*s, "summarizer", errors);
      r.get("hidden", c.summarizer.hidden);
      r.get("encoder_layers", c.summarizer.encoder_layers);
      r.get("decoder_layers", c.summarizer.decoder_layers);
      r.get("heads", c.summarizer.heads);
      r.get("ffn_hidden", c.summarizer.ffn_hidden);
      r.get("dual_source", c.summarizer.dual_source);
      r.get("lr", c.summarizer.lr);
      r.get("epochs", c.summarizer.epochs);
      r.get("batch", c.summarizer.batch);
      r.get("checkpoint_every", c.summarizer.checkpoint_every);
    }
    if (const Json* s = top.section("decoding")) {
      detail::Reader r(*s, "decoding", errors);
      r.get("beam_size", c.decoding.beam_size);
      r.get("max_doc_len", c.decoding.max_doc_len);
      r.get("max_cap_len", c.decoding.max_cap_len);
      r.get("max_summary_len", c.decoding.max_summary_len);
    }
  }
  for (auto& v : c.violations()) errors.push_back(std::move(v));
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError({"config file " + path.string() + " does not exist"});
  Json j;
  try {
    j = Json::parse(checkpoint::read_file(path));
  } catch (const Json::exception& e) {
    throw ConfigError({"config file " + path.string() + " is not valid JSON: " + e.what()});
  }
  return config_from_json(j);
}

/// MSMO_WORKDIR, MSMO_CORPUS_DIR and MSMO_CHECKPOINT_DIR replace the paths.
inline void apply_env_overrides(PipelineConfig& c) {
  if (const char* v = std::getenv("MSMO_WORKDIR"); v && *v) c.paths.workdir = v;
  if (const char* v = std::getenv("MSMO_CORPUS_DIR"); v && *v) c.paths.corpus = v;
  if (const char* v = std::getenv("MSMO_CHECKPOINT_DIR"); v && *v) c.paths.checkpoints = v;
}

// ---------------------------------------------------------------------------
// In-memory stages

struct Corpora {
  DocumentSet train, valid, test;
};

inline Corpora synthesize(const PipelineConfig& c) {
  return {synthetic::generate_synthetic(c.synthetic_config(corpus::Split::train), corpus::Split::train),
          synthetic::generate_synthetic(c.synthetic_config(corpus::Split::valid), corpus::Split::valid),
          synthetic::generate_synthetic(c.synthetic_config(corpus::Split::test), corpus::Split::test)};
}

/// Untrained retrieval model with a sentence encoder over the training vocabulary.
inline retrieval::RetrievalModel make_retrieval_model(const PipelineConfig& c, const DocumentSet& train) {
  if (train.empty()) throw std::invalid_argument("retrieval needs a non-empty training split");
  auto enc = std::make_shared<encoders::SentenceEncoder>(Vocabulary::from_corpus(train),
                                                         encoders::SentenceEncoderConfig{c.model.dim, c.encoder_seed()});
  return retrieval::RetrievalModel(enc, static_cast<Eigen::Index>(train.documents.front().feature_dim()), c.model.dim_r,
                                   c.retrieval.margin, c.retrieval_seed());
}

inline retrieval::TrainingReport train_retrieval_stage(const PipelineConfig& c, retrieval::RetrievalModel& model,
                                                       const DocumentSet& train) {
  retrieval::RetrievalConfig rc;
  rc.dim_r = c.model.dim_r;
  rc.margin = c.retrieval.margin;
  rc.lr = c.retrieval.lr;
  rc.epochs = c.retrieval.epochs;
  rc.batch_size = c.retrieval.batch;
  rc.seed = c.retrieval_train_seed();
  auto pairs = retrieval::caption_pairs(train);
  if (pairs.size() < 2) throw std::invalid_argument("retrieval training needs golden captions on the training split");
  return retrieval::train_retrieval(model, pairs, rc);
}

/// Reference captions for every document, retrieved from its golden summary.
inline std::vector<retrieval::ReferenceCaptionSet> mine_references(const DocumentSet& set,
                                                                   const retrieval::RetrievalModel& model) {
  std::vector<retrieval::ReferenceCaptionSet> out;
  for (const auto& d : set.documents) out.push_back(retrieval::reference_captions(d, model));
  return out;
}

inline alignment::AlignmentModel train_alignment_stage(const PipelineConfig& c, retrieval::RetrievalModel& rm,
                                                       const std::vector<alignment::LabeledDocument>& train,
                                                       const std::vector<alignment::LabeledDocument>& valid,
                                                       alignment::ModelKind kind,
                                                       alignment::TrainReport* report = nullptr) {
  auto model = alignment::AlignmentModel::from_retrieval(rm, c.alignment_model_config(), kind);
  auto r = alignment::train_alignment(model, train, valid, c.alignment_train_config());
  if (report) *report = r;
  return model;
}

/// Sentence index assigned to each image of each document.
inline std::vector<std::vector<std::size_t>> align_set(const DocumentSet& set, Variant variant,
                                                       const alignment::AlignmentModel* model,
                                                       const retrieval::RetrievalModel& rm) {
  if (variant != Variant::wo_ita && !model) throw std::invalid_argument("variant " + to_string(variant) + " needs an alignment model");
  std::vector<std::vector<std::size_t>> out;
  for (const auto& d : set.documents) {
    switch (variant) {
      case Variant::coarse_to_fine: out.push_back(alignment::align_document(d, *model).sentence_of_image); break;
      case Variant::one_pass: out.push_back(alignment::one_pass_align(d, *model)); break;
      case Variant::one_pass_dedup: out.push_back(alignment::one_pass_dedup_align(d, *model)); break;
      case Variant::wo_ita: {
        std::vector<std::size_t> idx;
        for (const auto& r : retrieval::retrieve_from_document(d, rm)) idx.push_back(r.source_index);
        out.push_back(std::move(idx));
        break;
      }
    }
  }
  return out;
}

inline std::vector<std::vector<Tokens>> captions_of(const DocumentSet& set, const std::vector<std::vector<std::size_t>>& idx) {
  if (idx.size() != set.size()) throw std::invalid_argument("caption indices must match the document count");
  std::vector<std::vector<Tokens>> out;
  for (std::size_t d = 0; d < set.size(); ++d) {
    std::vector<Tokens> caps;
    for (auto i : idx[d]) caps.push_back(set.documents[d].sentences.at(i));
    out.push_back(std::move(caps));
  }
  return out;
}

inline std::vector<summarizer::SummaryExample> summary_examples(const PipelineConfig& c, const DocumentSet& set,
                                                                const std::vector<std::vector<Tokens>>& caps) {
  const auto sc = c.summarizer_model_config();
  std::vector<summarizer::SummaryExample> out;
  for (std::size_t d = 0; d < set.size(); ++d) out.push_back(summarizer::make_example(set.documents[d], caps.at(d), sc));
  return out;
}

inline summarizer::SummarizerModel train_summarizer_stage(const PipelineConfig& c, const DocumentSet& train,
                                                          const std::vector<std::vector<Tokens>>& train_caps,
                                                          const DocumentSet& valid,
                                                          const std::vector<std::vector<Tokens>>& valid_caps,
                                                          summarizer::TrainReport* report = nullptr) {
  summarizer::SummarizerModel model(summarizer::build_vocabulary(train), c.summarizer_model_config());
  auto r = summarizer::train_summarizer(model, summary_examples(c, train, train_caps), summary_examples(c, valid, valid_caps),
                                        c.summarizer_train_config());
  if (report) *report = r;
  return model;
}

inline std::vector<summarizer::SummaryOutput> summarize_set(const PipelineConfig& c, const summarizer::SummarizerModel& model,
                                                            const DocumentSet& set,
                                                            const std::vector<std::vector<Tokens>>& caps) {
  std::vector<summarizer::SummaryOutput> out;
  for (std::size_t d = 0; d < set.size(); ++d)
    out.push_back(model.summarize(
        summarizer::make_inputs(set.documents[d], caps.at(d), c.decoding.max_doc_len, c.decoding.max_cap_len),
        c.decoding.beam_size));
  return out;
}

/// Selection by the caption closest to the summary; an empty summary falls
/// back to the first image.
inline std::vector<selection::EvaluationSelection> select_set(const std::vector<std::vector<Tokens>>& caps,
                                                              const std::vector<std::vector<Tokens>>& summaries) {
  if (caps.size() != summaries.size()) throw std::invalid_argument("caption and summary counts differ");
  std::vector<selection::EvaluationSelection> out;
  for (std::size_t d = 0; d < caps.size(); ++d) {
    if (rouge::flatten(summaries[d]).empty()) {
      out.push_back({0, caps[d].at(0), 0.0});
      continue;
    }
    out.push_back(selection::select_image(caps[d], summaries[d]));
  }
  return out;
}

inline std::map<std::string, selection::DocArtifacts> artifacts_of(const DocumentSet& set,
                                                                   const std::vector<std::vector<Tokens>>& caps,
                                                                   const std::vector<std::vector<Tokens>>& summaries,
                                                                   const std::vector<selection::EvaluationSelection>& sel) {
  std::map<std::string, selection::DocArtifacts> out;
  for (std::size_t d = 0; d < set.size(); ++d)
    out[set.documents[d].doc_id] = {caps.at(d), summaries.at(d), sel.at(d).chosen_image};
  return out;
}

/// Mean number of distinct sentences recalled per document and the fraction
/// of images assigned their planted sentence.
struct AlignmentStats {
  double distinct_per_doc = 0.0;
  double planted_recall = 0.0;
};

inline AlignmentStats alignment_stats(const DocumentSet& set, const std::vector<std::vector<std::size_t>>& idx) {
  AlignmentStats s;
  std::size_t images = 0, hits = 0;
  for (std::size_t d = 0; d < set.size(); ++d) {
    s.distinct_per_doc += static_cast<double>(std::set<std::size_t>(idx[d].begin(), idx[d].end()).size());
    if (!set.documents[d].golden_captions) continue;
    const auto planted = corpus::caption_sentence_indices(set.documents[d]);
    for (std::size_t j = 0; j < idx[d].size() && j < planted.size(); ++j) hits += idx[d][j] == planted[j];
    images += planted.size();
  }
  if (!set.empty()) s.distinct_per_doc /= static_cast<double>(set.size());
  s.planted_recall = images ? static_cast<double>(hits) / static_cast<double>(images) : 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// File-backed subcommands

/// Resolved locations of every artifact of a run.
class Workspace {
 public:
  explicit Workspace(const PipelineConfig& c) : cfg_(c), hash_(c.hash()) {
    root_ = c.paths.workdir;
    corpus_ = resolve(c.paths.corpus);
    checkpoints_ = resolve(c.paths.checkpoints);
  }

  const PipelineConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const fs::path& root() const { return root_; }
  const fs::path& corpus_dir() const { return corpus_; }
  const fs::path& checkpoint_dir() const { return checkpoints_; }

  fs::path corpus_file(corpus::Split s) const { return corpus_ / (corpus::to_string(s) + ".jsonl"); }
  fs::path corpus_manifest() const { return corpus_ / "manifest.json"; }
  fs::path retrieval_stem() const { return checkpoints_ / "retrieval"; }
  fs::path alignment_stem() const { return checkpoints_ / "alignment"; }
  fs::path summarizer_stem() const { return checkpoints_ / "summarizer"; }
  fs::path labels_file(corpus::Split s) const { return root_ / "labels" / (corpus::to_string(s) + ".json"); }
  fs::path captions_file(corpus::Split s) const { return root_ / "captions" / (corpus::to_string(s) + ".json"); }
  fs::path summaries_file() const { return root_ / "summaries" / "test.json"; }
  fs::path selections_file() const { return root_ / "selections" / "test.json"; }
  fs::path metrics_file() const { return root_ / "reports" / "metrics.json"; }
  fs::path metrics_text_file() const { return root_ / "reports" / "metrics.txt"; }
  fs::path curve_file() const { return root_ / "reports" / "simple_summary.tsv"; }

  Json manifest(const std::string& stage) const {
    return {{"stage", stage}, {"config_hash", hash_}, {"seed", cfg_.seed}, {"code_version", checkpoint::kCodeVersion},
            {"variant", to_string(cfg_.variant)}};
  }

 private:
  fs::path resolve(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() ? q : root_ / q;
  }

  PipelineConfig cfg_;
  std::string hash_;
  fs::path root_, corpus_, checkpoints_;
};

namespace detail {

inline void require(const fs::path& p, const std::string& what, const std::string& producer) {
  if (!fs::exists(p))
    throw PrerequisiteError("missing " + what + " (" + p.string() + "); run `" + producer + "` first");
}

inline void require_checkpoint(const fs::path& stem, const std::string& what, const std::string& producer) {
  if (!checkpoint::exists(stem))
    throw PrerequisiteError("missing " + what + " checkpoint (" + stem.string() + ".*); run `" + producer + "` first");
}

inline void write_json(const fs::path& p, const Json& j) { checkpoint::write_file(p, j.dump(2) + "\n"); }

inline Json read_json(const fs::path& p) {
  try {
    return Json::parse(checkpoint::read_file(p));
  } catch (const Json::exception& e) {
    throw std::runtime_error("malformed artifact " + p.string() + ": " + e.what());
  }
}

inline Json tokens_json(const std::vector<Tokens>& v) {
  Json a = Json::array();
  for (const auto& s : v) a.push_back(s);
  return a;
}

inline std::vector<Tokens> tokens_from(const Json& j) { return j.get<std::vector<Tokens>>(); }

}  // namespace detail

inline Corpora load_corpora(const Workspace& ws) {
  for (auto s : {corpus::Split::train, corpus::Split::valid, corpus::Split::test})
    detail::require(ws.corpus_file(s), corpus::to_string(s) + " corpus", "synth");
  return {corpus::load_corpus_strict(ws.corpus_file(corpus::Split::train), corpus::Split::train),
          corpus::load_corpus_strict(ws.corpus_file(corpus::Split::valid), corpus::Split::valid),
          corpus::load_corpus_strict(ws.corpus_file(corpus::Split::test), corpus::Split::test)};
}

inline DocumentSet load_split(const Workspace& ws, corpus::Split s) {
  detail::require(ws.corpus_file(s), corpus::to_string(s) + " corpus", "synth");
  return corpus::load_corpus_strict(ws.corpus_file(s), s);
}

inline retrieval::RetrievalModel load_retrieval(const Workspace& ws) {
  detail::require_checkpoint(ws.retrieval_stem(), "retrieval", "train-retrieval");
  return retrieval::RetrievalModel::load(ws.retrieval_stem());
}

inline void cmd_synth(const Workspace& ws, std::ostream& log) {
  const auto c = synthesize(ws.config());
  corpus::save_corpus(ws.corpus_file(corpus::Split::train), c.train);
  corpus::save_corpus(ws.corpus_file(corpus::Split::valid), c.valid);
  corpus::save_corpus(ws.corpus_file(corpus::Split::test), c.test);
  Json m = ws.manifest("synth");
  m["documents"] = {{"train", c.train.size()}, {"valid", c.valid.size()}, {"test", c.test.size()}};
  detail::write_json(ws.corpus_manifest(), m);
  log << "synth: " << c.train.size() << "/" << c.valid.size() << "/" << c.test.size() << " documents -> "
      << ws.corpus_dir().string() << "\n";
}

inline void cmd_train_retrieval(const Workspace& ws, std::ostream& log) {
  const auto train = load_split(ws, corpus::Split::train);
  auto model = make_retrieval_model(ws.config(), train);
  const auto rep = train_retrieval_stage(ws.config(), model, train);
  model.save(ws.retrieval_stem(), ws.manifest("train-retrieval"));
  log << "train-retrieval: held-out loss " << rep.heldout_loss.front() << " -> " << rep.heldout_loss.back() << "\n";
}

inline void cmd_build_labels(const Workspace& ws, std::ostream& log) {
  const auto rm = load_retrieval(ws);
  for (auto s : {corpus::Split::train, corpus::Split::valid}) {
    const auto set = load_split(ws, s);
    const auto refs = mine_references(set, rm);
    const auto labelled = alignment::label_documents(set, refs, ws.config().alignment.label_rouge);
    Json docs = Json::array();
    for (std::size_t d = 0; d < set.size(); ++d) {
      Json r = Json::array();
      for (const auto& x : refs[d]) r.push_back({{"source_index", x.source_index}, {"score", x.score}, {"tokens", x.tokens}});
      Json per_image = Json::array();
      for (auto i : labelled[d].labels.per_image) per_image.push_back(i == alignment::kNone ? Json(nullptr) : Json(i));
      docs.push_back({{"doc_id", set.documents[d].doc_id},
                      {"references", r},
                      {"y", labelled[d].labels.y},
                      {"per_image", per_image},
                      {"independent", labelled[d].independent}});
    }
    Json out = {{"manifest", ws.manifest("build-labels")}, {"split", corpus::to_string(s)}, {"documents", docs}};
    detail::write_json(ws.labels_file(s), out);
    log << "build-labels: " << corpus::to_string(s) << " " << set.size() << " documents\n";
  }
}

/// Labelled documents read back from a label file; `set` must outlive them.
inline std::vector<alignment::LabeledDocument> load_labels(const Workspace& ws, corpus::Split s, const DocumentSet& set) {
  detail::require(ws.labels_file(s), corpus::to_string(s) + " labels", "build-labels");
  const Json j = detail::read_json(ws.labels_file(s));
  std::map<std::string, const corpus::MultimodalDocument*> by_id;
  for (const auto& d : set.documents) by_id[d.doc_id] = &d;
  std::vector<alignment::LabeledDocument> out;
  for (const auto& rec : j.at("documents")) {
    auto it = by_id.find(rec.at("doc_id").get<std::string>());
    if (it == by_id.end())
      throw PrerequisiteError("labels mention unknown document " + rec.at("doc_id").get<std::string>() +
                              "; run `build-labels` again");
    alignment::LabeledDocument ld;
    ld.doc = it->second;
    ld.labels.y = rec.at("y").get<std::vector<int>>();
    for (const auto& v : rec.at("per_image")) ld.labels.per_image.push_back(v.is_null() ? alignment::kNone : v.get<std::size_t>());
    ld.independent = rec.at("independent").get<std::vector<std::size_t>>();
    out.push_back(std::move(ld));
  }
  return out;
}

inline void cmd_train_align(const Workspace& ws, std::ostream& log) {
  const auto kind = model_kind(ws.config().variant);
  if (!kind) {
    log << "train-align: variant wo_ita uses no alignment model\n";
    return;
  }
  auto rm = load_retrieval(ws);
  const auto train = load_split(ws, corpus::Split::train), valid = load_split(ws, corpus::Split::valid);
  const auto lt = load_labels(ws, corpus::Split::train, train), lv = load_labels(ws, corpus::Split::valid, valid);
  alignment::TrainReport rep;
  auto model = train_alignment_stage(ws.config(), rm, lt, lv, *kind, &rep);
  model.save(ws.alignment_stem(), ws.manifest("train-align"));
  log << "train-align: validation loss " << rep.initial_validation << " -> " << rep.best_validation << " (step "
      << rep.best_step << " of " << rep.steps << ")\n";
}

inline void cmd_align(const Workspace& ws, std::ostream& log) {
  const auto rm = load_retrieval(ws);
  std::optional<alignment::AlignmentModel> model;
  if (model_kind(ws.config().variant)) {
    detail::require_checkpoint(ws.alignment_stem(), "alignment", "train-align");
    model.emplace(alignment::AlignmentModel::load(ws.alignment_stem(), rm));
    const auto want = *model_kind(ws.config().variant);
    if (model->kind() != want)
      throw PrerequisiteError("alignment checkpoint holds a " + alignment::to_string(model->kind()) + " model but variant " +
                              to_string(ws.config().variant) + " needs " + alignment::to_string(want) +
                              "; run `train-align` again");
  }
  for (auto s : {corpus::Split::train, corpus::Split::valid, corpus::Split::test}) {
    const auto set = load_split(ws, s);
    const auto idx = align_set(set, ws.config().variant, model ? &*model : nullptr, rm);
    Json docs = Json::array();
    for (std::size_t d = 0; d < set.size(); ++d) {
      Json caps = Json::array();
      for (auto i : idx[d]) caps.push_back(set.documents[d].sentences[i]);
      docs.push_back({{"doc_id", set.documents[d].doc_id}, {"sentence_indices", idx[d]}, {"captions", caps}});
    }
    detail::write_json(ws.captions_file(s),
                       {{"manifest", ws.manifest("align")}, {"split", corpus::to_string(s)}, {"documents", docs}});
    const auto st = alignment_stats(set, idx);
    log << "align: " << corpus::to_string(s) << " planted recall " << st.planted_recall << ", distinct sentences/doc "
        << st.distinct_per_doc << "\n";
  }
}

/// Pseudo captions of `set`, in document order.
inline std::vector<std::vector<Tokens>> load_captions(const Workspace& ws, corpus::Split s, const DocumentSet& set,
                                                      Json* manifest = nullptr) {
  detail::require(ws.captions_file(s), corpus::to_string(s) + " pseudo captions", "align");
  const Json j = detail::read_json(ws.captions_file(s));
  if (manifest) *manifest = j.at("manifest");
  std::map<std::string, std::vector<Tokens>> by_id;
  for (const auto& rec : j.at("documents")) by_id[rec.at("doc_id").get<std::string>()] = detail::tokens_from(rec.at("captions"));
  std::vector<std::vector<Tokens>> out;
  for (const auto& d : set.documents) {
    auto it = by_id.find(d.doc_id);
    if (it == by_id.end())
      throw PrerequisiteError("no pseudo captions for " + d.doc_id + " in " + ws.captions_file(s).string() +
                              "; run `align` again");
    out.push_back(it->second);
  }
  return out;
}

inline void cmd_train_summarizer(const Workspace& ws, std::ostream& log) {
  const auto train = load_split(ws, corpus::Split::train), valid = load_split(ws, corpus::Split::valid);
  const auto ct = load_captions(ws, corpus::Split::train, train), cv = load_captions(ws, corpus::Split::valid, valid);
  summarizer::TrainReport rep;
  auto model = train_summarizer_stage(ws.config(), train, ct, valid, cv, &rep);
  model.save(ws.summarizer_stem(), ws.manifest("train-summarizer"));
  log << "train-summarizer: validation perplexity " << rep.initial_perplexity() << " -> " << rep.best_perplexity()
      << " (step " << rep.best_step << " of " << rep.steps << ")\n";
}

inline void cmd_summarize(const Workspace& ws, std::ostream& log) {
  detail::require_checkpoint(ws.summarizer_stem(), "summarizer", "train-summarizer");
  const auto model = summarizer::SummarizerModel::load(ws.summarizer_stem());
  const auto test = load_split(ws, corpus::Split::test);
  const auto caps = load_captions(ws, corpus::Split::test, test);
  const auto outs = summarize_set(ws.config(), model, test, caps);
  Json docs = Json::array();
  std::size_t truncated = 0;
  for (std::size_t d = 0; d < test.size(); ++d) {
    truncated += outs[d].truncated;
    docs.push_back({{"doc_id", test.documents[d].doc_id},
                    {"sentences", detail::tokens_json(outs[d].sentences)},
                    {"score", outs[d].score},
                    {"log_prob", outs[d].log_prob},
                    {"truncated", outs[d].truncated}});
  }
  detail::write_json(ws.summaries_file(), {{"manifest", ws.manifest("summarize")}, {"documents", docs}});
  log << "summarize: " << test.size() << " summaries (" << truncated << " truncated)\n";
}

inline std::map<std::string, std::vector<Tokens>> load_summaries(const Workspace& ws, Json* manifest = nullptr) {
  detail::require(ws.summaries_file(), "summaries", "summarize");
  const Json j = detail::read_json(ws.summaries_file());
  if (manifest) *manifest = j.at("manifest");
  std::map<std::string, std::vector<Tokens>> out;
  for (const auto& rec : j.at("documents")) out[rec.at("doc_id").get<std::string>()] = detail::tokens_from(rec.at("sentences"));
  return out;
}

inline void cmd_select(const Workspace& ws, std::ostream& log) {
  const auto test = load_split(ws, corpus::Split::test);
  const auto caps = load_captions(ws, corpus::Split::test, test);
  const auto sums = load_summaries(ws);
  Json docs = Json::array();
  for (std::size_t d = 0; d < test.size(); ++d) {
    auto it = sums.find(test.documents[d].doc_id);
    if (it == sums.end())
      throw PrerequisiteError("no summary for " + test.documents[d].doc_id + "; run `summarize` again");
    const auto sel = select_set({caps[d]}, {it->second}).front();
    docs.push_back({{"doc_id", test.documents[d].doc_id},
                    {"image", sel.chosen_image},
                    {"caption", sel.chosen_caption},
                    {"score", sel.score}});
  }
  detail::write_json(ws.selections_file(), {{"manifest", ws.manifest("select")}, {"documents", docs}});
  log << "select: " << test.size() << " images selected\n";
}

inline selection::MetricsReport cmd_evaluate(const Workspace& ws, std::ostream& log, bool allow_mixed = false) {
  const auto test = load_split(ws, corpus::Split::test);
  Json mc, ms;
  const auto caps = load_captions(ws, corpus::Split::test, test, &mc);
  const auto sums = load_summaries(ws, &ms);
  detail::require(ws.selections_file(), "selections", "select");
  const Json sel = detail::read_json(ws.selections_file());
  detail::require_checkpoint(ws.retrieval_stem(), "retrieval", "train-retrieval");
  const Json mr = checkpoint::read_manifest(ws.retrieval_stem());

  std::vector<std::string> mixed;
  auto check = [&](const Json& m, const std::string& what) {
    const std::string h = m.value("config_hash", std::string("none"));
    if (h != ws.hash()) mixed.push_back(what + " (" + h + ")");
  };
  check(mc, "pseudo captions");
  check(ms, "summaries");
  check(sel.at("manifest"), "selections");
  check(mr, "retrieval checkpoint");
  if (!mixed.empty()) {
    std::string msg = "inputs were produced under a different config than " + ws.hash() + ":";
    for (const auto& m : mixed) msg += " " + m;
    if (!allow_mixed) throw ConfigError({msg + "; re-run the stages or pass --allow-mixed"});
    log << "evaluate: warning: " << msg << "\n";
  }

  const auto rm = retrieval::RetrievalModel::load(ws.retrieval_stem());
  std::map<std::string, selection::DocArtifacts> arts;
  for (std::size_t d = 0; d < test.size(); ++d) arts[test.documents[d].doc_id].pseudo_captions = caps[d];
  for (const auto& [id, s] : sums)
    if (arts.count(id)) arts[id].summary = s;
  for (const auto& rec : sel.at("documents")) {
    const auto id = rec.at("doc_id").get<std::string>();
    if (arts.count(id)) arts[id].selected_image = rec.at("image").get<std::size_t>();
  }
  const auto report = selection::evaluate_run(test, arts, &rm);

  std::vector<std::vector<Tokens>> golden;
  for (const auto& d : test.documents) golden.push_back(d.golden_captions.value_or(std::vector<Tokens>{}));
  std::size_t max_k = 1;
  for (const auto& d : test.documents) max_k = std::max(max_k, d.num_images());
  const auto table = selection::curve_table(selection::simple_summary_experiment(test, caps, max_k),
                                            selection::simple_summary_experiment(test, golden, max_k));

  Json out = report.to_json();
  out["manifest"] = ws.manifest("evaluate");
  out["random_selection_ip"] = selection::random_selection_ip(test);
  detail::write_json(ws.metrics_file(), out);
  checkpoint::write_file(ws.metrics_text_file(), report.human());
  checkpoint::write_file(ws.curve_file(), table);
  log << "evaluate:\n" << report.human();
  return report;
}

inline selection::MetricsReport cmd_pipeline(const Workspace& ws, std::ostream& log) {
  cmd_synth(ws, log);
  cmd_train_retrieval(ws, log);
  cmd_build_labels(ws, log);
  cmd_train_align(ws, log);
  cmd_align(ws, log);
  cmd_train_summarizer(ws, log);
  cmd_summarize(ws, log);
  cmd_select(ws, log);
  return cmd_evaluate(ws, log);
}

}  // namespace msmo::pipeline
