// Multimodal document model, tokenization, validation and JSONL corpus I/O.
//
// Record schema (one JSON object per line, UTF-8):
//
//   {"doc_id": "d0001",
//    "sentences":          [["tok", ...], ...],     // m >= 1 sentences
//    "image_features":     [[0.1, ...], ...],       // n >= 1 rows of width F
//    "golden_summary":     [["tok", ...], ...],
//    "golden_captions":    [["tok", ...], ...],     // optional, exactly n
//    "salient_image_refs": [0, 2]}                  // optional, 0-based
//
// Any sentence may also be given as a plain string; it is tokenized with the
// same rule. Token arrays are re-normalized on ingestion, so the rule is
// applied exactly once regardless of how the file was produced.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace msmo::corpus {

using Tokens = std::vector<std::string>;
using Json = nlohmann::json;

/// Identifier written into manifests so artifacts record which rule produced
/// their token streams.
inline constexpr std::string_view kTokenizerRuleId = "ws-lower-strip-punct-v1";

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, valid, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "unknown";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw CorpusError("unknown split '" + std::string(s) + "'");
}

/// Lowercases ASCII letters and drops ASCII punctuation inside one token.
inline std::string normalize_token(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::ispunct(c)) continue;
    out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  return out;
}

/// Whitespace split + lowercasing + punctuation stripping. Tokens that are
/// pure punctuation disappear.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      auto tok = normalize_token(text.substr(i, j - i));
      if (!tok.empty()) out.push_back(std::move(tok));
    }
    i = j;
  }
  return out;
}

struct MultimodalDocument {
  std::string doc_id;
  std::vector<Tokens> sentences;
  std::vector<std::vector<double>> image_features;
  std::vector<Tokens> golden_summary;
  std::optional<std::vector<Tokens>> golden_captions;
  std::optional<std::vector<std::size_t>> salient_image_refs;

  std::size_t num_sentences() const { return sentences.size(); }
  std::size_t num_images() const { return image_features.size(); }
  std::size_t feature_dim() const { return image_features.empty() ? 0 : image_features.front().size(); }

  /// n x F matrix of image features. Requires a validated document.
  Eigen::MatrixXd feature_matrix() const {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(num_images()), static_cast<Eigen::Index>(feature_dim()));
    for (std::size_t i = 0; i < num_images(); ++i)
      for (std::size_t j = 0; j < feature_dim(); ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = image_features[i][j];
    return m;
  }

  bool operator==(const MultimodalDocument&) const = default;
};

struct DocumentSet {
  std::vector<MultimodalDocument> documents;
  Split split = Split::train;

  std::size_t size() const { return documents.size(); }
  bool empty() const { return documents.empty(); }
  bool operator==(const DocumentSet&) const = default;
};

struct Violation {
  std::string field;
  std::string rule;
};

inline std::vector<Violation> validate_document(const MultimodalDocument& doc) {
  std::vector<Violation> v;
  if (doc.doc_id.empty()) v.push_back({"doc_id", "must be non-empty"});
  if (doc.sentences.empty()) v.push_back({"sentences", "m >= 1 required"});
  for (std::size_t i = 0; i < doc.sentences.size(); ++i) {
    if (doc.sentences[i].empty())
      v.push_back({"sentences[" + std::to_string(i) + "]", "sentence is empty after tokenization"});
  }
  if (doc.image_features.empty()) v.push_back({"image_features", "n >= 1 required"});
  if (!doc.image_features.empty()) {
    const std::size_t f = doc.image_features.front().size();
    if (f == 0) v.push_back({"image_features[0]", "feature width F must be >= 1"});
    bool ragged = false, finite = true;
    for (const auto& row : doc.image_features) {
      ragged = ragged || row.size() != f;
      for (double x : row) finite = finite && std::isfinite(x);
    }
    if (ragged) v.push_back({"image_features", "F mismatch: all feature vectors must have identical length"});
    if (!finite) v.push_back({"image_features", "entries must be finite"});
  }
  if (doc.golden_summary.empty()) v.push_back({"golden_summary", "must contain at least one sentence"});
  for (std::size_t i = 0; i < doc.golden_summary.size(); ++i) {
    if (doc.golden_summary[i].empty())
      v.push_back({"golden_summary[" + std::to_string(i) + "]", "sentence is empty after tokenization"});
  }
  if (doc.golden_captions && doc.golden_captions->size() != doc.image_features.size()) {
    v.push_back({"golden_captions", "expected exactly n=" + std::to_string(doc.image_features.size()) +
                                        " entries, got " + std::to_string(doc.golden_captions->size())});
  }
  if (doc.salient_image_refs) {
    for (std::size_t idx : *doc.salient_image_refs) {
      if (idx >= doc.image_features.size()) {
        v.push_back({"salient_image_refs", "index " + std::to_string(idx) + " out of range for n=" +
                                               std::to_string(doc.image_features.size())});
      }
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// JSONL I/O

struct Diagnostic {
  std::size_t line = 0;  // 1-based
  std::string doc_id;
  std::string field;
  std::string message;

  std::string str() const {
    std::ostringstream os;
    os << "line " << line;
    if (!doc_id.empty()) os << " (doc_id=" << doc_id << ")";
    os << ": " << field << ": " << message;
    return os.str();
  }
};

struct LoadResult {
  DocumentSet set;
  std::vector<Diagnostic> rejected;
  std::vector<std::string> warnings;
};

namespace detail {

inline Tokens sentence_from_json(const Json& j, const std::string& field) {
  if (j.is_string()) return tokenize(j.get<std::string>());
  if (!j.is_array()) throw CorpusError(field + ": expected a token array or string");
  Tokens out;
  for (const auto& t : j) {
    if (!t.is_string()) throw CorpusError(field + ": tokens must be strings");
    for (auto& tok : tokenize(t.get<std::string>())) out.push_back(std::move(tok));
  }
  return out;
}

inline std::vector<Tokens> sentences_from_json(const Json& rec, const std::string& field) {
  if (!rec.contains(field)) throw CorpusError(field + ": missing required field");
  const auto& arr = rec.at(field);
  if (!arr.is_array()) throw CorpusError(field + ": expected an array of sentences");
  std::vector<Tokens> out;
  for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(sentence_from_json(arr[i], field + "[" + std::to_string(i) + "]"));
  return out;
}

// Field-scoped parse failures carry the field name as the message prefix.
inline std::pair<std::string, std::string> split_field(const std::string& what) {
  const auto pos = what.find(": ");
  if (pos == std::string::npos) return {"record", what};
  return {what.substr(0, pos), what.substr(pos + 2)};
}

}  // namespace detail

inline Json to_json(const MultimodalDocument& doc) {
  Json j;
  j["doc_id"] = doc.doc_id;
  j["sentences"] = doc.sentences;
  j["image_features"] = doc.image_features;
  j["golden_summary"] = doc.golden_summary;
  if (doc.golden_captions) j["golden_captions"] = *doc.golden_captions;
  if (doc.salient_image_refs) j["salient_image_refs"] = *doc.salient_image_refs;
  return j;
}

/// Parses one record. Throws CorpusError("<field>: <message>") on schema errors;
/// invariant checks are left to validate_document().
inline MultimodalDocument document_from_json(const Json& rec) {
  if (!rec.is_object()) throw CorpusError("record: expected a JSON object");
  MultimodalDocument doc;
  if (!rec.contains("doc_id") || !rec.at("doc_id").is_string()) throw CorpusError("doc_id: missing or not a string");
  doc.doc_id = rec.at("doc_id").get<std::string>();
  doc.sentences = detail::sentences_from_json(rec, "sentences");
  if (!rec.contains("image_features") || !rec.at("image_features").is_array())
    throw CorpusError("image_features: missing or not an array");
  for (const auto& row : rec.at("image_features")) {
    if (!row.is_array()) throw CorpusError("image_features: each feature vector must be an array");
    std::vector<double> vec;
    for (const auto& x : row) {
      if (!x.is_number()) throw CorpusError("image_features: entries must be numbers");
      vec.push_back(x.get<double>());
    }
    doc.image_features.push_back(std::move(vec));
  }
  doc.golden_summary = detail::sentences_from_json(rec, "golden_summary");
  if (rec.contains("golden_captions") && !rec.at("golden_captions").is_null())
    doc.golden_captions = detail::sentences_from_json(rec, "golden_captions");
  if (rec.contains("salient_image_refs") && !rec.at("salient_image_refs").is_null()) {
    const auto& refs = rec.at("salient_image_refs");
    if (!refs.is_array()) throw CorpusError("salient_image_refs: expected an array of indices");
    std::vector<std::size_t> idx;
    for (const auto& r : refs) {
      if (!r.is_number_integer() || r.get<long long>() < 0)
        throw CorpusError("salient_image_refs: indices must be non-negative integers");
      idx.push_back(r.get<std::size_t>());
    }
    doc.salient_image_refs = std::move(idx);
  }
  return doc;
}

/// Reads a JSONL corpus. Invalid records are skipped and reported in
/// `rejected`; a missing file throws. An empty file yields an empty set and a
/// warning.
inline LoadResult load_corpus(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file: " + path.string());
  LoadResult result;
  result.set.split = split;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json rec;
    try {
      rec = Json::parse(line);
    } catch (const Json::parse_error& e) {
      result.rejected.push_back({lineno, "", "record", std::string("malformed JSON: ") + e.what()});
      continue;
    }
    const std::string doc_id = rec.is_object() && rec.contains("doc_id") && rec["doc_id"].is_string()
                                   ? rec["doc_id"].get<std::string>()
                                   : std::string();
    MultimodalDocument doc;
    try {
      doc = document_from_json(rec);
    } catch (const CorpusError& e) {
      auto [field, msg] = detail::split_field(e.what());
      result.rejected.push_back({lineno, doc_id, field, msg});
      continue;
    }
    const auto violations = validate_document(doc);
    if (!violations.empty()) {
      for (const auto& v : violations) result.rejected.push_back({lineno, doc.doc_id, v.field, v.rule});
      continue;
    }
    if (!seen.insert(doc.doc_id).second) {
      result.rejected.push_back({lineno, doc.doc_id, "doc_id", "duplicate doc_id within set"});
      continue;
    }
    result.set.documents.push_back(std::move(doc));
  }
  if (lineno == 0) result.warnings.push_back("corpus file is empty: " + path.string());
  return result;
}

/// Like load_corpus but any rejected record is an error listing every
/// diagnostic.
inline DocumentSet load_corpus_strict(const std::filesystem::path& path, Split split) {
  auto result = load_corpus(path, split);
  if (!result.rejected.empty()) {
    std::ostringstream os;
    os << path.string() << ": " << result.rejected.size() << " invalid record field(s)";
    for (const auto& d : result.rejected) os << "\n  " << d.str();
    throw CorpusError(os.str());
  }
  return std::move(result.set);
}

inline void save_corpus(const std::filesystem::path& path, const DocumentSet& set) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CorpusError("cannot write corpus file: " + path.string());
  for (const auto& doc : set.documents) out << to_json(doc).dump() << '\n';
}

/// Index of the sentence identical to each golden caption, or npos when the
/// caption does not occur verbatim in the document.
inline std::vector<std::size_t> caption_sentence_indices(const MultimodalDocument& doc) {
  std::vector<std::size_t> out;
  if (!doc.golden_captions) return out;
  for (const auto& cap : *doc.golden_captions) {
    auto it = std::find(doc.sentences.begin(), doc.sentences.end(), cap);
    out.push_back(it == doc.sentences.end() ? static_cast<std::size_t>(-1)
                                            : static_cast<std::size_t>(it - doc.sentences.begin()));
  }
  return out;
}

}  // namespace msmo::corpus
