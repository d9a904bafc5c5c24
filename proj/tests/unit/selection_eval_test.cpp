#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "msmo/retrieval.hpp"
#include "msmo/selection_eval.hpp"
#include "msmo/synthetic.hpp"
#include "oracles.hpp"

namespace msmo::selection {
namespace {

Tokens toks(std::initializer_list<const char*> words) {
  Tokens t;
  for (auto* w : words) t.emplace_back(w);
  return t;
}

Tokens flat(const std::vector<Tokens>& s) {
  Tokens out;
  for (const auto& x : s) out.insert(out.end(), x.begin(), x.end());
  return out;
}

TEST(SelectImage, HandCases) {
  EXPECT_EQ(select_image({toks({"q"})}, {toks({"a"})}).chosen_image, 0u);
  const auto s = select_image({toks({"a", "b", "c"}), toks({"x", "y"})}, {toks({"a", "b", "c"})});
  EXPECT_EQ(s.chosen_image, 0u);
  EXPECT_DOUBLE_EQ(s.score, 1.0);
  EXPECT_EQ(s.chosen_caption, toks({"a", "b", "c"}));
  const auto second = select_image({toks({"x", "y"}), toks({"a", "b", "c"})}, {toks({"a", "b"}), toks({"c"})});
  EXPECT_EQ(second.chosen_image, 1u);
  EXPECT_DOUBLE_EQ(second.score, 1.0);
}

TEST(SelectImage, TiesGoToLowestIndexAndEmptyCaptionsParticipate) {
  const auto s = select_image({toks({}), toks({"a", "z"}), toks({"a", "y"})}, {toks({"a", "b"})});
  EXPECT_EQ(s.chosen_image, 1u);
  EXPECT_DOUBLE_EQ(s.score, 0.5);
  const auto none = select_image({toks({}), toks({"q"})}, {toks({"a"})});
  EXPECT_EQ(none.chosen_image, 0u);
  EXPECT_DOUBLE_EQ(none.score, 0.0);
}

TEST(SelectImage, RejectsEmptyInputs) {
  EXPECT_THROW(select_image({}, {toks({"a"})}), SelectionError);
  EXPECT_THROW(select_image({toks({"a"})}, {}), SelectionError);
  EXPECT_THROW(select_image({toks({"a"})}, {toks({})}), SelectionError);
}

TEST(SelectImage, MatchesOracleAndFollowsPermutations) {
  std::mt19937_64 rng(17);
  std::size_t checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 6;
    std::vector<Tokens> caps;
    for (std::size_t j = 0; j < n; ++j) caps.push_back(oracle::random_tokens(rng, 6, 8));
    const std::vector<Tokens> summary = {oracle::random_tokens(rng, 8, 8), oracle::random_tokens(rng, 5, 8)};
    std::vector<double> score;
    for (const auto& c : caps) score.push_back(oracle::rouge_l_f(c, flat(summary)));
    const auto best = static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
    const auto sel = select_image(caps, summary);
    EXPECT_EQ(sel.chosen_image, best);
    EXPECT_NEAR(sel.score, score[best], 1e-12);

    std::vector<double> sorted = score;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) continue;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Tokens> shuffled;
    for (auto p : perm) shuffled.push_back(caps[p]);
    EXPECT_EQ(perm[select_image(shuffled, summary).chosen_image], sel.chosen_image);
    EXPECT_EQ(select_image(caps, summary).chosen_image, sel.chosen_image);
    ++checked;
  }
  EXPECT_GT(checked, 100u);
}

TEST(ImagePrecision, HandCases) {
  EXPECT_DOUBLE_EQ(image_precision({{0}, {2, 1}}, {{0}, {1, 2}}).ip, 1.0);
  EXPECT_DOUBLE_EQ(image_precision({{1}, {0}}, {{0}, {1}}).ip, 0.0);
  const auto half = image_precision({{0}, {2}}, {{0, 1}, {0, 1}});
  EXPECT_DOUBLE_EQ(half.per_doc[0], 1.0);
  EXPECT_DOUBLE_EQ(half.per_doc[1], 0.0);
  EXPECT_DOUBLE_EQ(half.ip, 0.5);
  const auto sets = image_precision({{0, 1, 2}}, {{1}});
  EXPECT_NEAR(sets.ip, 1.0 / 3.0, 1e-15);
}

TEST(ImagePrecision, EmptyRecommendationsAreSkippedAndCounted) {
  const auto r = image_precision({{}, {0}}, {{0}, {0}});
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.scored, 1u);
  EXPECT_TRUE(std::isnan(r.per_doc[0]));
  EXPECT_DOUBLE_EQ(r.ip, 1.0);
  EXPECT_THROW(image_precision({{0}}, {}), SelectionError);
}

TEST(ImagePrecision, BoundedAndOneOnlyWhenAllHit) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<std::size_t>> rec(4), ref(4);
    bool all_hit = true;
    for (std::size_t d = 0; d < 4; ++d) {
      rec[d] = {rng() % 5};
      ref[d] = {rng() % 5, rng() % 5};
      all_hit &= std::count(ref[d].begin(), ref[d].end(), rec[d][0]) > 0;
    }
    const double ip = image_precision(rec, ref).ip;
    EXPECT_GE(ip, 0.0);
    EXPECT_LE(ip, 1.0);
    EXPECT_EQ(ip == 1.0, all_hit);
  }
}

TEST(CaptionRougeL, HandCases) {
  const std::vector<Tokens> golden = {toks({"a", "b", "d"}), toks({"y"})};
  EXPECT_DOUBLE_EQ(caption_rouge_l(golden, golden), 1.0);
  EXPECT_DOUBLE_EQ(caption_rouge_l({toks({"p"}), toks({"q"})}, golden), 0.0);
  const std::vector<Tokens> pseudo = {toks({"a", "b", "c"}), toks({"a", "x"})};
  const double want = (oracle::rouge_l_f(pseudo[0], golden[0]) + oracle::rouge_l_f(pseudo[1], golden[1])) / 2.0;
  EXPECT_NEAR(caption_rouge_l(pseudo, golden), want, 1e-15);
  EXPECT_NEAR(want, 1.0 / 3.0, 1e-15);
  EXPECT_THROW(caption_rouge_l({toks({"a"})}, golden), SelectionError);
}

// ---------------------------------------------------------------------------

struct Retrieval {
  corpus::DocumentSet train, test;
  std::unique_ptr<retrieval::RetrievalModel> model;
};

const Retrieval& trained_retrieval() {
  static Retrieval r = [] {
    Retrieval out;
    synthetic::SyntheticConfig sc;
    sc.noise_level = 0.0;
    sc.num_docs = 120;
    sc.seed = 3;
    out.train = synthetic::generate_synthetic(sc, corpus::Split::train);
    sc.num_docs = 20;
    out.test = synthetic::generate_synthetic(sc, corpus::Split::test);
    auto enc = std::make_shared<encoders::SentenceEncoder>(Vocabulary::from_corpus(out.train),
                                                           encoders::SentenceEncoderConfig{32, 3});
    out.model = std::make_unique<retrieval::RetrievalModel>(enc, 32, 16, 0.2, 3);
    retrieval::RetrievalConfig rc;
    rc.epochs = 20;
    retrieval::train_retrieval(*out.model, retrieval::caption_pairs(out.train), rc);
    return out;
  }();
  return r;
}

double direct_similarity(const retrieval::RetrievalModel& m, const std::vector<double>& f, const Tokens& s) {
  Eigen::MatrixXd x(1, static_cast<Eigen::Index>(f.size()));
  for (std::size_t k = 0; k < f.size(); ++k) x(0, static_cast<Eigen::Index>(k)) = f[k];
  const Eigen::VectorXd u = m.embed_images(x).row(0).transpose();
  const Eigen::VectorXd v = m.embed_sentences({s}).row(0).transpose();
  return u.dot(v) / (u.norm() * v.norm());
}

TEST(MSim, SingleSentenceBoundsAndPlantedCaption) {
  const auto& r = trained_retrieval();
  std::size_t planted_wins = 0, cases = 0;
  for (const auto& d : r.test.documents) {
    const auto& caps = *d.golden_captions;
    for (std::size_t j = 0; j < d.num_images(); ++j) {
      const double own = direct_similarity(*r.model, d.image_features[j], caps[j]);
      const auto single = m_sim(d.image_features[j], {caps[j]}, *r.model);
      ASSERT_TRUE(single.has_value());
      EXPECT_NEAR(*single, own, 1e-12);
      const Tokens& other = d.sentences[(corpus::caption_sentence_indices(d)[j] + 1) % d.num_sentences()];
      const double alt = direct_similarity(*r.model, d.image_features[j], other);
      const double both = *m_sim(d.image_features[j], {other, caps[j]}, *r.model);
      EXPECT_NEAR(both, std::max(own, alt), 1e-12);
      EXPECT_GE(both, -1.0 - 1e-12);
      EXPECT_LE(both, 1.0 + 1e-12);
      planted_wins += std::abs(both - own) <= 1e-6;
      ++cases;
    }
  }
  EXPECT_GE(static_cast<double>(planted_wins), 0.9 * static_cast<double>(cases));
  EXPECT_FALSE(m_sim(r.test.documents[0].image_features[0], {}, *r.model).has_value());
  EXPECT_FALSE(m_sim(r.test.documents[0].image_features[0], {toks({})}, *r.model).has_value());
}

// ---------------------------------------------------------------------------

corpus::MultimodalDocument caption_doc(const std::string& id, std::vector<Tokens> captions) {
  corpus::MultimodalDocument d;
  d.doc_id = id;
  d.sentences = captions;
  d.image_features.assign(captions.size(), std::vector<double>{1.0, 0.0});
  d.golden_summary = captions;
  d.golden_captions = std::move(captions);
  d.salient_image_refs = std::vector<std::size_t>{0};
  return d;
}

TEST(SimpleSummary, GuardsAndContainment) {
  corpus::DocumentSet set;
  set.documents = {caption_doc("d0", {toks({"a", "b"}), toks({"c"}), toks({"d", "e", "f"})}),
                   caption_doc("d1", {toks({"g"}), toks({"h", "i"})})};
  std::vector<std::vector<Tokens>> golden;
  for (const auto& d : set.documents) golden.push_back(*d.golden_captions);
  EXPECT_THROW(simple_summary_experiment(set, golden, 0), SelectionError);
  EXPECT_THROW(simple_summary_experiment(set, {golden[0]}, 2), SelectionError);
  const auto curve = simple_summary_experiment(set, golden, 3);
  ASSERT_EQ(curve.size(), 3u);
  EXPECT_DOUBLE_EQ(curve[2].rouge1_recall, 1.0);
  EXPECT_DOUBLE_EQ(curve[2].rouge1, 1.0);
  EXPECT_EQ(curve[2].short_docs, 1u);
  EXPECT_EQ(curve[0].short_docs, 0u);
  for (std::size_t k = 1; k < curve.size(); ++k) EXPECT_GE(curve[k].rouge1_recall, curve[k - 1].rouge1_recall);
  // k = 1: d0 recalls 2 of 6 tokens, d1 recalls 1 of 3.
  EXPECT_NEAR(curve[0].rouge1_recall, (2.0 / 6.0 + 1.0 / 3.0) / 2.0, 1e-15);
  const auto table = curve_table(curve, curve);
  EXPECT_NE(table.find("k\tpseudo_r1\tgolden_r1"), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
}

// ---------------------------------------------------------------------------

corpus::DocumentSet three_docs() {
  synthetic::SyntheticConfig sc;
  sc.num_docs = 3;
  sc.seed = 21;
  return synthetic::generate_synthetic(sc, corpus::Split::test);
}

std::map<std::string, DocArtifacts> perfect(const corpus::DocumentSet& set) {
  std::map<std::string, DocArtifacts> out;
  for (const auto& d : set.documents) out[d.doc_id] = {*d.golden_captions, d.golden_summary, d.salient_image_refs->front()};
  return out;
}

TEST(EvaluateRun, PerfectArtifactsScoreOne) {
  const auto set = three_docs();
  const auto rep = evaluate_run(set, perfect(set), &*trained_retrieval().model);
  EXPECT_DOUBLE_EQ(rep.rouge1, 1.0);
  EXPECT_DOUBLE_EQ(rep.rouge2, 1.0);
  EXPECT_DOUBLE_EQ(rep.rougeL, 1.0);
  EXPECT_DOUBLE_EQ(rep.ip, 1.0);
  EXPECT_DOUBLE_EQ(rep.caption_rouge_l, 1.0);
  EXPECT_EQ(rep.m_sim_docs, 3u);
  EXPECT_LE(std::abs(rep.m_sim), 1.0);
  EXPECT_EQ(rep.evaluated, 3u);
  EXPECT_TRUE(rep.complete());
  const auto j = rep.to_json();
  EXPECT_EQ(j.at("per_doc").size(), 3u);
  EXPECT_EQ(j.at("not_computed"), Json({"MR_max", "MMAE++"}));
}

TEST(EvaluateRun, OrderInvariantAndDeterministic) {
  auto set = three_docs();
  const auto arts = perfect(set);
  auto mixed = arts;
  mixed.begin()->second.selected_image = set.documents.front().num_images() - 1;
  mixed.begin()->second.summary = std::vector<Tokens>{set.documents.front().sentences.back()};
  const auto a = evaluate_run(set, mixed).to_json();
  std::reverse(set.documents.begin(), set.documents.end());
  EXPECT_EQ(evaluate_run(set, mixed).to_json(), a);
  EXPECT_EQ(evaluate_run(set, mixed).to_json(), a);
}

TEST(EvaluateRun, PerDocRowsAverageToCorpusValues) {
  const auto set = three_docs();
  auto arts = perfect(set);
  arts.begin()->second.summary = std::vector<Tokens>{set.documents.front().sentences.back()};
  const auto rep = evaluate_run(set, arts);
  double r1 = 0.0, rl = 0.0;
  for (const auto& row : rep.rows) {
    r1 += row.rouge1;
    rl += row.rougeL;
  }
  EXPECT_NEAR(rep.rouge1, r1 / 3.0, 1e-15);
  EXPECT_NEAR(rep.rougeL, rl / 3.0, 1e-15);
  EXPECT_LT(rep.rouge1, 1.0);
}

TEST(EvaluateRun, MissingSummaryIsExcludedAndCounted) {
  const auto set = three_docs();
  auto arts = perfect(set);
  arts.begin()->second.summary.reset();
  const auto rep = evaluate_run(set, arts);
  EXPECT_EQ(rep.documents, 3u);
  EXPECT_EQ(rep.evaluated, 2u);
  EXPECT_EQ(rep.missing, 1u);
  EXPECT_FALSE(rep.complete());
  EXPECT_DOUBLE_EQ(rep.rouge1, 1.0);
  EXPECT_EQ(rep.m_sim_docs, 0u);
  arts.erase(arts.begin());
  EXPECT_EQ(evaluate_run(set, arts).missing, 1u);
}

TEST(RandomSelection, ExpectedIpMatchesSalientFraction) {
  corpus::DocumentSet set;
  auto a = caption_doc("a", {toks({"x"}), toks({"y"})});
  auto b = caption_doc("b", {toks({"x"}), toks({"y"}), toks({"z"}), toks({"w"})});
  b.salient_image_refs = std::vector<std::size_t>{1, 2};
  set.documents = {a, b};
  EXPECT_DOUBLE_EQ(random_selection_ip(set), (0.5 + 0.5) / 2.0);
}

}  // namespace
}  // namespace msmo::selection
