#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "msmo/pipeline.hpp"

namespace msmo::pipeline {
namespace {

namespace fs = std::filesystem;

std::vector<std::string> violations_of(const Json& j) {
  try {
    config_from_json(j);
  } catch (const ConfigError& e) {
    return e.violations();
  }
  return {};
}

bool mentions(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

TEST(PipelineConfig, DefaultsRoundTripThroughJson) {
  const PipelineConfig c;
  EXPECT_TRUE(c.violations().empty());
  const auto back = config_from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
}

TEST(PipelineConfig, EveryProblemIsReported) {
  const Json j = {{"seed", "seven"},
                  {"variant", "two_pass"},
                  {"retrieval", {{"lr", -1.0}, {"momentum", 0.9}}},
                  {"summarizer", {{"hidden", 30}, {"heads", 4}}},
                  {"extra", 1}};
  const auto v = violations_of(j);
  EXPECT_TRUE(mentions(v, "seed must be"));
  EXPECT_TRUE(mentions(v, "variant: unsupported value 'two_pass'"));
  EXPECT_TRUE(mentions(v, "retrieval.momentum: unknown key"));
  EXPECT_TRUE(mentions(v, "retrieval.lr must be positive"));
  EXPECT_TRUE(mentions(v, "summarizer.heads must divide"));
  EXPECT_TRUE(mentions(v, "extra: unknown key"));
  EXPECT_EQ(v.size(), 6u);
}

TEST(PipelineConfig, LoadConfigReportsMissingAndMalformedFiles) {
  const fs::path dir = fs::temp_directory_path() / "msmo_cfg_test";
  fs::create_directories(dir);
  EXPECT_THROW(load_config(dir / "absent.json"), ConfigError);
  checkpoint::write_file(dir / "bad.json", "{ not json");
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  checkpoint::write_file(dir / "ok.json", R"({"seed": 9, "variant": "wo_ita"})");
  const auto c = load_config(dir / "ok.json");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.variant, Variant::wo_ita);
  fs::remove_all(dir);
}

TEST(PipelineConfig, HashIgnoresPathsOnly) {
  PipelineConfig a, b;
  b.paths.workdir = "/elsewhere";
  b.paths.checkpoints = "/ckpt";
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 8;
  EXPECT_NE(a.hash(), b.hash());
  PipelineConfig c;
  c.variant = Variant::one_pass;
  EXPECT_NE(a.hash(), c.hash());
}

TEST(PipelineConfig, EnvironmentOverridesPaths) {
  PipelineConfig c;
  ::setenv("MSMO_WORKDIR", "/tmp/w", 1);
  ::setenv("MSMO_CHECKPOINT_DIR", "/tmp/ck", 1);
  apply_env_overrides(c);
  ::unsetenv("MSMO_WORKDIR");
  ::unsetenv("MSMO_CHECKPOINT_DIR");
  EXPECT_EQ(c.paths.workdir, "/tmp/w");
  EXPECT_EQ(c.paths.corpus, "corpus");
  const Workspace ws(c);
  EXPECT_EQ(ws.corpus_dir(), fs::path("/tmp/w/corpus"));
  EXPECT_EQ(ws.checkpoint_dir(), fs::path("/tmp/ck"));
}

TEST(PipelineConfig, VariantNamesAndModelKinds) {
  for (auto v : {Variant::coarse_to_fine, Variant::one_pass, Variant::one_pass_dedup, Variant::wo_ita})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_FALSE(parse_variant("nope").has_value());
  EXPECT_FALSE(model_kind(Variant::wo_ita).has_value());
  EXPECT_EQ(model_kind(Variant::one_pass), model_kind(Variant::one_pass_dedup));
  EXPECT_NE(model_kind(Variant::one_pass), model_kind(Variant::coarse_to_fine));
}

// ---------------------------------------------------------------------------

PipelineConfig tiny(const fs::path& dir) {
  PipelineConfig c;
  c.paths.workdir = dir.string();
  c.seed = 4;
  c.synthetic.train_docs = 16;
  c.synthetic.valid_docs = 4;
  c.synthetic.test_docs = 4;
  c.model.dim = 16;
  c.model.dim_r = 8;
  c.model.layers = 1;
  c.model.ffn_hidden = 16;
  c.retrieval.epochs = 2;
  c.alignment.epochs = 1;
  c.summarizer.hidden = 16;
  c.summarizer.encoder_layers = 1;
  c.summarizer.decoder_layers = 1;
  c.summarizer.ffn_hidden = 16;
  c.summarizer.epochs = 1;
  c.decoding.beam_size = 2;
  c.decoding.max_summary_len = 8;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
};

TEST(PipelineStages, MissingInputsNameTheProducer) {
  TempDir dir("msmo_prereq_test");
  const Workspace ws(tiny(dir.path));
  std::ostringstream log;
  try {
    cmd_train_retrieval(ws, log);
    FAIL() << "expected PrerequisiteError";
  } catch (const PrerequisiteError& e) {
    EXPECT_NE(std::string(e.what()).find("`synth`"), std::string::npos);
  }
  cmd_synth(ws, log);
  cmd_train_retrieval(ws, log);
  try {
    cmd_align(ws, log);
    FAIL() << "expected PrerequisiteError";
  } catch (const PrerequisiteError& e) {
    EXPECT_NE(std::string(e.what()).find("`train-align`"), std::string::npos);
  }
  EXPECT_THROW(cmd_select(ws, log), PrerequisiteError);
  EXPECT_THROW(cmd_evaluate(ws, log), PrerequisiteError);
}

TEST(PipelineStages, WoItaNeedsNoAlignmentCheckpoint) {
  TempDir dir("msmo_woita_test");
  auto c = tiny(dir.path);
  c.variant = Variant::wo_ita;
  const Workspace ws(c);
  std::ostringstream log;
  cmd_synth(ws, log);
  cmd_train_retrieval(ws, log);
  cmd_train_align(ws, log);
  EXPECT_FALSE(checkpoint::exists(ws.alignment_stem()));
  cmd_align(ws, log);
  EXPECT_TRUE(fs::exists(ws.captions_file(corpus::Split::test)));
}

TEST(PipelineStages, AlignRejectsCheckpointOfTheWrongKind) {
  TempDir dir("msmo_kind_test");
  auto c = tiny(dir.path);
  const Workspace ws(c);
  std::ostringstream log;
  cmd_synth(ws, log);
  cmd_train_retrieval(ws, log);
  cmd_build_labels(ws, log);
  cmd_train_align(ws, log);
  c.variant = Variant::one_pass;
  EXPECT_THROW(cmd_align(Workspace(c), log), PrerequisiteError);
}

std::string slurp(const fs::path& p) { return checkpoint::read_file(p); }

TEST(PipelineStages, RerunIsByteIdenticalAndMixedInputsAreRefused) {
  TempDir a("msmo_run_a"), b("msmo_run_b");
  std::ostringstream log;
  const auto ra = cmd_pipeline(Workspace(tiny(a.path)), log);
  const auto rb = cmd_pipeline(Workspace(tiny(b.path)), log);
  EXPECT_EQ(ra.to_json(), rb.to_json());
  const Workspace wa(tiny(a.path)), wb(tiny(b.path));
  for (auto f : {&Workspace::metrics_file, &Workspace::curve_file, &Workspace::summaries_file, &Workspace::selections_file})
    EXPECT_EQ(slurp((wa.*f)()), slurp((wb.*f)())) << (wa.*f)();
  EXPECT_EQ(slurp(wa.captions_file(corpus::Split::test)), slurp(wb.captions_file(corpus::Split::test)));
  EXPECT_EQ(ra.documents, 4u);
  EXPECT_TRUE(ra.complete());

  auto other = tiny(a.path);
  other.decoding.beam_size = 3;
  const Workspace mixed(other);
  EXPECT_THROW(cmd_evaluate(mixed, log), ConfigError);
  std::ostringstream warn;
  EXPECT_NO_THROW(cmd_evaluate(mixed, warn, true));
  EXPECT_NE(warn.str().find("warning"), std::string::npos);
}

}  // namespace
}  // namespace msmo::pipeline
