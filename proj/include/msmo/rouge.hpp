// ROUGE-1/2/L scorers over pre-tokenized text. No stemming, no stopword
// removal; tokens are compared verbatim, so callers must tokenize with the
// corpus rule (see corpus.hpp) before scoring.
#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msmo::rouge {

using Tokens = std::vector<std::string>;

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Set when an input was empty and the score was forced to zero.
  bool degenerate = false;
};

inline RougeScore make_score(double overlap, double cand_total, double ref_total) {
  RougeScore s;
  s.precision = cand_total > 0 ? overlap / cand_total : 0.0;
  s.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  s.f1 = (s.precision + s.recall) > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline RougeScore degenerate_score() {
  RougeScore s;
  s.degenerate = true;
  return s;
}

namespace detail {

inline std::map<std::vector<std::string>, int> ngram_counts(std::span<const std::string> toks, int n) {
  std::map<std::vector<std::string>, int> counts;
  if (toks.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
    ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                      toks.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return counts;
}

// Full LCS table, (|a|+1) x (|b|+1), row-major.
inline std::vector<int> lcs_table(std::span<const std::string> a, std::span<const std::string> b) {
  const std::size_t cols = b.size() + 1;
  std::vector<int> t((a.size() + 1) * cols, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      t[i * cols + j] = a[i - 1] == b[j - 1] ? t[(i - 1) * cols + j - 1] + 1
                                             : std::max(t[(i - 1) * cols + j], t[i * cols + j - 1]);
    }
  }
  return t;
}

}  // namespace detail

inline std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.empty() || b.empty()) return 0;
  // Two-row DP; the full table is only needed for union-LCS backtracking.
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return static_cast<std::size_t>(prev[b.size()]);
}

/// Clipped n-gram overlap, n in {1, 2}.
inline RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, int n) {
  if (n != 1 && n != 2) throw std::invalid_argument("rouge_n supports n = 1 or 2");
  if (candidate.empty() || reference.empty()) return degenerate_score();
  const auto cand = detail::ngram_counts(candidate, n);
  const auto ref = detail::ngram_counts(reference, n);
  double overlap = 0.0, cand_total = 0.0, ref_total = 0.0;
  for (const auto& [gram, c] : cand) {
    cand_total += c;
    if (auto it = ref.find(gram); it != ref.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [gram, c] : ref) ref_total += c;
  return make_score(overlap, cand_total, ref_total);
}

/// Sentence-level ROUGE-L: longest common subsequence.
inline RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return degenerate_score();
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  return make_score(lcs, static_cast<double>(candidate.size()), static_cast<double>(reference.size()));
}

/// Summary-level ROUGE-L with union-LCS aggregation:
///
///   hits(r_i)  = | U_j LCS-positions(r_i, c_j) |   (positions within r_i)
///   recall     = sum_i hits(r_i) / sum_i |r_i|
///   precision  = sum_i hits(r_i) / sum_j |c_j|
///
/// Each pairwise LCS is recovered by a fixed backtrack (match first, then
/// prefer moving up in the candidate), so the union is deterministic.
inline RougeScore rouge_l_multi(std::span<const Tokens> candidate, std::span<const Tokens> reference) {
  double cand_total = 0.0, ref_total = 0.0;
  for (const auto& c : candidate) cand_total += static_cast<double>(c.size());
  for (const auto& r : reference) ref_total += static_cast<double>(r.size());
  if (cand_total == 0.0 || ref_total == 0.0) return degenerate_score();

  double hits = 0.0;
  for (const auto& r : reference) {
    std::vector<char> hit(r.size(), 0);
    for (const auto& c : candidate) {
      if (c.empty() || r.empty()) continue;
      const auto t = detail::lcs_table(r, c);
      const std::size_t cols = c.size() + 1;
      std::size_t i = r.size(), j = c.size();
      while (i > 0 && j > 0) {
        if (r[i - 1] == c[j - 1]) {
          hit[i - 1] = 1;
          --i;
          --j;
        } else if (t[(i - 1) * cols + j] >= t[i * cols + j - 1]) {
          --i;
        } else {
          --j;
        }
      }
    }
    for (char h : hit) hits += h;
  }
  return make_score(hits, cand_total, ref_total);
}

/// Flattens a sentence list into one token stream.
inline Tokens flatten(std::span<const Tokens> sentences) {
  Tokens out;
  for (const auto& s : sentences) out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace msmo::rouge
