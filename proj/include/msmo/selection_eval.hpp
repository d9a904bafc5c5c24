// Salient-image selection and the evaluation harness.
//
// select_image: the image whose pseudo caption has the highest ROUGE-L F
// against the generated summary (flattened), ties to the lower index.
// Metrics: summary ROUGE-1/2 (flattened) and summary-level ROUGE-L against the
// golden summary, image precision, Caption-ROUGE-L and M_sim (max cosine, in
// the retrieval space, between the selected image and the summary sentences).
// MR_max and MMAE++ need external judge models and are not computed.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msmo/corpus.hpp"
#include "msmo/retrieval.hpp"
#include "msmo/rouge.hpp"

namespace msmo::selection {

using corpus::MultimodalDocument;
using corpus::Tokens;
using Json = nlohmann::json;

class SelectionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvaluationSelection {
  std::size_t chosen_image = 0;
  Tokens chosen_caption;
  double score = 0.0;
};

inline EvaluationSelection select_image(const std::vector<Tokens>& captions, const std::vector<Tokens>& summary) {
  if (captions.empty()) throw SelectionError("select_image: no candidate images");
  const Tokens flat = rouge::flatten(summary);
  if (flat.empty()) throw SelectionError("select_image: empty summary");
  EvaluationSelection best;
  best.score = -1.0;
  for (std::size_t j = 0; j < captions.size(); ++j) {
    const double s = captions[j].empty() ? 0.0 : rouge::rouge_l(captions[j], flat).f1;
    if (s > best.score) best = {j, captions[j], s};
  }
  return best;
}

struct ImagePrecision {
  double ip = 0.0;
  std::size_t scored = 0;
  std::size_t skipped = 0;  // docs with no recommendation
  std::vector<double> per_doc;  // NaN for skipped docs
};

inline ImagePrecision image_precision(const std::vector<std::vector<std::size_t>>& recommended,
                                      const std::vector<std::vector<std::size_t>>& references) {
  if (recommended.size() != references.size()) throw SelectionError("image_precision: document counts differ");
  ImagePrecision out;
  double total = 0.0;
  for (std::size_t d = 0; d < recommended.size(); ++d) {
    const std::set<std::size_t> rec(recommended[d].begin(), recommended[d].end());
    if (rec.empty()) {
      ++out.skipped;
      out.per_doc.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const std::set<std::size_t> ref(references[d].begin(), references[d].end());
    std::size_t hit = 0;
    for (auto r : rec) hit += ref.count(r);
    const double v = static_cast<double>(hit) / static_cast<double>(rec.size());
    out.per_doc.push_back(v);
    total += v;
    ++out.scored;
  }
  out.ip = out.scored ? total / static_cast<double>(out.scored) : 0.0;
  return out;
}

/// Mean ROUGE-L F over the images of one document.
inline double caption_rouge_l(const std::vector<Tokens>& pseudo, const std::vector<Tokens>& golden) {
  if (pseudo.size() != golden.size()) throw SelectionError("caption_rouge_l: caption counts differ");
  if (pseudo.empty()) throw SelectionError("caption_rouge_l: no captions");
  double total = 0.0;
  for (std::size_t j = 0; j < pseudo.size(); ++j) total += rouge::rouge_l(pseudo[j], golden[j]).f1;
  return total / static_cast<double>(pseudo.size());
}

/// Max retrieval-space cosine between one image and the summary sentences;
/// nullopt for an empty summary.
inline std::optional<double> m_sim(const std::vector<double>& image_features, const std::vector<Tokens>& summary,
                                   const retrieval::RetrievalModel& model) {
  std::vector<Tokens> sents;
  for (const auto& s : summary)
    if (!s.empty()) sents.push_back(s);
  if (sents.empty()) return std::nullopt;
  Eigen::MatrixXd x(1, static_cast<Eigen::Index>(image_features.size()));
  for (std::size_t k = 0; k < image_features.size(); ++k) x(0, static_cast<Eigen::Index>(k)) = image_features[k];
  return model.score_matrix(x, sents).maxCoeff();
}

// ---------------------------------------------------------------------------
// Caption-concatenation experiment

struct CurvePoint {
  std::size_t k = 0;
  double rouge1 = 0.0, rouge1_recall = 0.0, rouge2 = 0.0, rougeL = 0.0;
  std::size_t docs = 0;
  std::size_t short_docs = 0;  // fewer than k images; all used
};

/// Summary = first-k captions of each document, scored against its golden
/// summary, for k = 1..max_k. `captions[d]` are document d's captions in image
/// order.
inline std::vector<CurvePoint> simple_summary_experiment(const corpus::DocumentSet& set,
                                                         const std::vector<std::vector<Tokens>>& captions,
                                                         std::size_t max_k) {
  if (max_k < 1) throw SelectionError("simple_summary_experiment: k starts at 1");
  if (captions.size() != set.size()) throw SelectionError("simple_summary_experiment: caption sets must match documents");
  std::vector<CurvePoint> out;
  for (std::size_t k = 1; k <= max_k; ++k) {
    CurvePoint p;
    p.k = k;
    for (std::size_t d = 0; d < set.size(); ++d) {
      const auto& caps = captions[d];
      if (caps.empty()) continue;
      if (caps.size() < k) ++p.short_docs;
      const std::vector<Tokens> first(caps.begin(), caps.begin() + static_cast<std::ptrdiff_t>(std::min(k, caps.size())));
      const Tokens cand = rouge::flatten(first);
      const Tokens ref = rouge::flatten(set.documents[d].golden_summary);
      const auto r1 = rouge::rouge_n(cand, ref, 1);
      p.rouge1 += r1.f1;
      p.rouge1_recall += r1.recall;
      p.rouge2 += rouge::rouge_n(cand, ref, 2).f1;
      p.rougeL += rouge::rouge_l_multi(first, set.documents[d].golden_summary).f1;
      ++p.docs;
    }
    if (p.docs) {
      const double n = static_cast<double>(p.docs);
      p.rouge1 /= n;
      p.rouge1_recall /= n;
      p.rouge2 /= n;
      p.rougeL /= n;
    }
    out.push_back(p);
  }
  return out;
}

inline std::string curve_table(const std::vector<CurvePoint>& pseudo, const std::vector<CurvePoint>& golden) {
  std::string s = "k\tpseudo_r1\tgolden_r1\tpseudo_r2\tgolden_r2\tpseudo_rl\tgolden_rl\n";
  char buf[256];
  for (std::size_t i = 0; i < std::min(pseudo.size(), golden.size()); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\n", pseudo[i].k, pseudo[i].rouge1, golden[i].rouge1,
                  pseudo[i].rouge2, golden[i].rouge2, pseudo[i].rougeL, golden[i].rougeL);
    s += buf;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Run evaluation

/// Everything produced for one document by a run.
struct DocArtifacts {
  std::optional<std::vector<Tokens>> pseudo_captions;  // one per image
  std::optional<std::vector<Tokens>> summary;
  std::optional<std::size_t> selected_image;
};

struct DocRow {
  std::string doc_id;
  double rouge1 = 0, rouge2 = 0, rougeL = 0;
  std::optional<double> ip, caption_rouge_l, m_sim;
};

struct MetricsReport {
  double rouge1 = 0, rouge2 = 0, rougeL = 0;
  double ip = 0;
  double caption_rouge_l = 0;
  double m_sim = 0;
  std::size_t documents = 0;          // documents in the corpus
  std::size_t evaluated = 0;          // documents with a summary
  std::size_t missing = 0;            // documents lacking any artifact
  std::size_t ip_docs = 0, caption_docs = 0, m_sim_docs = 0;
  std::vector<DocRow> rows;           // sorted by doc_id

  bool complete() const { return missing == 0; }

  Json to_json() const {
    Json per_doc = Json::array();
    auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    for (const auto& r : rows)
      per_doc.push_back({{"doc_id", r.doc_id}, {"rouge1", r.rouge1}, {"rouge2", r.rouge2}, {"rougeL", r.rougeL},
                         {"ip", opt(r.ip)}, {"caption_rouge_l", opt(r.caption_rouge_l)}, {"m_sim", opt(r.m_sim)}});
    return {{"rouge1", rouge1},
            {"rouge2", rouge2},
            {"rougeL", rougeL},
            {"ip", ip},
            {"caption_rouge_l", caption_rouge_l},
            {"m_sim", m_sim},
            {"counts",
             {{"documents", documents},
              {"evaluated", evaluated},
              {"missing", missing},
              {"ip_docs", ip_docs},
              {"caption_docs", caption_docs},
              {"m_sim_docs", m_sim_docs}}},
            {"not_computed", {"MR_max", "MMAE++"}},
            {"per_doc", per_doc}};
  }

  std::string human() const {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "docs %zu (evaluated %zu, missing %zu)\nROUGE-1 %.4f  ROUGE-2 %.4f  ROUGE-L %.4f\nIP %.4f (%zu docs)  "
                  "Caption-ROUGE-L %.4f (%zu docs)  M_sim %.4f (%zu docs)\nMR_max, MMAE++: not computed\n",
                  documents, evaluated, missing, rouge1, rouge2, rougeL, ip, ip_docs, caption_rouge_l, caption_docs, m_sim,
                  m_sim_docs);
    return buf;
  }
};

/// Scores every document that has a summary. Documents missing any artifact
/// are counted in `missing`; metrics use whatever each document has. The
/// report does not depend on document order.
inline MetricsReport evaluate_run(const corpus::DocumentSet& set, const std::map<std::string, DocArtifacts>& artifacts,
                                  const retrieval::RetrievalModel* model = nullptr) {
  std::vector<const MultimodalDocument*> docs;
  for (const auto& d : set.documents) docs.push_back(&d);
  std::sort(docs.begin(), docs.end(), [](auto* a, auto* b) { return a->doc_id < b->doc_id; });
  MetricsReport rep;
  rep.documents = docs.size();
  for (const auto* doc : docs) {
    auto it = artifacts.find(doc->doc_id);
    const DocArtifacts* a = it == artifacts.end() ? nullptr : &it->second;
    if (!a || !a->pseudo_captions || !a->summary || !a->selected_image) ++rep.missing;
    if (!a || !a->summary) continue;
    DocRow row;
    row.doc_id = doc->doc_id;
    const Tokens cand = rouge::flatten(*a->summary), ref = rouge::flatten(doc->golden_summary);
    row.rouge1 = rouge::rouge_n(cand, ref, 1).f1;
    row.rouge2 = rouge::rouge_n(cand, ref, 2).f1;
    row.rougeL = rouge::rouge_l_multi(*a->summary, doc->golden_summary).f1;
    if (a->selected_image && doc->salient_image_refs && *a->selected_image < doc->num_images())
      row.ip = image_precision({{*a->selected_image}}, {*doc->salient_image_refs}).ip;
    if (a->pseudo_captions && doc->golden_captions && a->pseudo_captions->size() == doc->golden_captions->size() &&
        !doc->golden_captions->empty())
      row.caption_rouge_l = caption_rouge_l(*a->pseudo_captions, *doc->golden_captions);
    if (model && a->selected_image && *a->selected_image < doc->num_images())
      row.m_sim = m_sim(doc->image_features[*a->selected_image], *a->summary, *model);
    rep.rows.push_back(row);
  }
  rep.evaluated = rep.rows.size();
  for (const auto& r : rep.rows) {
    rep.rouge1 += r.rouge1;
    rep.rouge2 += r.rouge2;
    rep.rougeL += r.rougeL;
    if (r.ip) {
      rep.ip += *r.ip;
      ++rep.ip_docs;
    }
    if (r.caption_rouge_l) {
      rep.caption_rouge_l += *r.caption_rouge_l;
      ++rep.caption_docs;
    }
    if (r.m_sim) {
      rep.m_sim += *r.m_sim;
      ++rep.m_sim_docs;
    }
  }
  auto mean = [](double& v, std::size_t n) { v = n ? v / static_cast<double>(n) : 0.0; };
  mean(rep.rouge1, rep.evaluated);
  mean(rep.rouge2, rep.evaluated);
  mean(rep.rougeL, rep.evaluated);
  mean(rep.ip, rep.ip_docs);
  mean(rep.caption_rouge_l, rep.caption_docs);
  mean(rep.m_sim, rep.m_sim_docs);
  return rep;
}

/// Expected IP of picking one image uniformly at random.
inline double random_selection_ip(const corpus::DocumentSet& set) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& d : set.documents) {
    if (!d.salient_image_refs || d.num_images() == 0) continue;
    total += static_cast<double>(d.salient_image_refs->size()) / static_cast<double>(d.num_images());
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace msmo::selection
