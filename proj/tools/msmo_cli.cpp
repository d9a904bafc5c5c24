// msmo command-line front end.
//
//   msmo <subcommand> [--config FILE] [--seed N] [--workdir DIR]
//
// Exit codes: 0 success, 1 validation error, 2 missing prerequisite,
// 3 runtime failure.

#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "msmo/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kInvalid = 1, kMissing = 2, kFailed = 3 };

using msmo::pipeline::Workspace;
using Stage = std::function<void(const Workspace&)>;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal summarization pipeline"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string workdir;
  bool allow_mixed = false;
  app.add_option("--config", config_path, "pipeline config (JSON); built-in desk defaults when omitted");
  app.add_option("--seed", seed, "run seed, overrides the config");
  app.add_option("--workdir", workdir, "working directory, overrides the config");

  const std::map<std::string, std::string> commands = {
      {"synth", "generate the synthetic corpus"},
      {"train-retrieval", "train the image-caption retrieval model"},
      {"build-labels", "retrieve reference captions and build alignment labels"},
      {"train-align", "train the alignment model"},
      {"align", "assign pseudo captions to every image"},
      {"train-summarizer", "train the dual-source summarizer"},
      {"summarize", "summarize the test split"},
      {"select", "select one image per test document"},
      {"evaluate", "score the run"},
      {"pipeline", "run every stage in order"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) subs[name] = app.add_subcommand(name, help);
  subs["evaluate"]->add_flag("--allow-mixed", allow_mixed, "accept inputs produced under a different config");
  subs["pipeline"]->add_flag("--allow-mixed", allow_mixed, "ignored; pipeline inputs always match");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }

  try {
    auto cfg = config_path.empty() ? msmo::pipeline::PipelineConfig{} : msmo::pipeline::load_config(config_path);
    if (seed) cfg.seed = *seed;
    msmo::pipeline::apply_env_overrides(cfg);
    if (!workdir.empty()) cfg.paths.workdir = workdir;
    cfg.validate();
    const Workspace ws(cfg);
    std::cout << "config " << ws.hash() << ", seed " << cfg.seed << ", variant " << msmo::pipeline::to_string(cfg.variant)
              << ", workdir " << ws.root().string() << "\n";

    namespace p = msmo::pipeline;
    const std::map<std::string, Stage> stages = {
        {"synth", [](const Workspace& w) { p::cmd_synth(w, std::cout); }},
        {"train-retrieval", [](const Workspace& w) { p::cmd_train_retrieval(w, std::cout); }},
        {"build-labels", [](const Workspace& w) { p::cmd_build_labels(w, std::cout); }},
        {"train-align", [](const Workspace& w) { p::cmd_train_align(w, std::cout); }},
        {"align", [](const Workspace& w) { p::cmd_align(w, std::cout); }},
        {"train-summarizer", [](const Workspace& w) { p::cmd_train_summarizer(w, std::cout); }},
        {"summarize", [](const Workspace& w) { p::cmd_summarize(w, std::cout); }},
        {"select", [](const Workspace& w) { p::cmd_select(w, std::cout); }},
        {"evaluate", [&](const Workspace& w) { p::cmd_evaluate(w, std::cout, allow_mixed); }},
        {"pipeline", [](const Workspace& w) { p::cmd_pipeline(w, std::cout); }},
    };
    for (const auto& [name, sub] : subs)
      if (sub->parsed()) stages.at(name)(ws);
    return kOk;
  } catch (const msmo::pipeline::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const msmo::pipeline::PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
}
