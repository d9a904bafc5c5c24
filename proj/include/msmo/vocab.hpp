#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "msmo/corpus.hpp"

namespace msmo {

/// Token <-> id map. Ids 0..k-1 are the special tokens given at construction;
/// the rest are added in first-seen order (or sorted, via from_corpus).
class Vocabulary {
 public:
  static constexpr const char* kUnk = "<unk>";

  Vocabulary() { add(kUnk); }
  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const auto& t : tokens) add(t);
    if (!contains(kUnk)) throw std::invalid_argument("vocabulary must contain " + std::string(kUnk));
  }

  Eigen::Index add(const std::string& tok) {
    auto [it, inserted] = index_.emplace(tok, static_cast<Eigen::Index>(tokens_.size()));
    if (inserted) tokens_.push_back(tok);
    return it->second;
  }

  bool contains(const std::string& tok) const { return index_.count(tok) > 0; }

  Eigen::Index id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? index_.at(kUnk) : it->second;
  }

  const std::string& token(Eigen::Index id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<Eigen::Index> ids(const corpus::Tokens& toks) const {
    std::vector<Eigen::Index> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }

  /// Specials first, then every token of the set's sentences, summaries and
  /// captions in sorted order (stable across runs and platforms).
  static Vocabulary from_corpus(const corpus::DocumentSet& set, const std::vector<std::string>& specials = {}) {
    Vocabulary v;
    for (const auto& s : specials) v.add(s);
    std::vector<std::string> all;
    auto take = [&](const std::vector<corpus::Tokens>& sents) {
      for (const auto& s : sents) all.insert(all.end(), s.begin(), s.end());
    };
    for (const auto& d : set.documents) {
      take(d.sentences);
      take(d.golden_summary);
      if (d.golden_captions) take(*d.golden_captions);
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    for (const auto& t : all) v.add(t);
    return v;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Eigen::Index> index_;
};

}  // namespace msmo
