#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "shike/errors.hpp"

namespace {

int fail(const std::string& kind, const std::string& message, const std::string& dump = {}) {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  if (!dump.empty()) {
    try {
      j["dump"] = nlohmann::json::parse(dump);
    } catch (const nlohmann::json::exception&) {
      j["dump"] = dump;
    }
  }
  std::cerr << j.dump() << std::endl;
  return 1;
}

void add_config(CLI::App* cmd, shike::cli::ConfigSource& c) {
  cmd->add_option("-c,--config", c.path, "run config (flat JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override one config key, key=value")->allow_extra_args(false);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace shike::cli;
  CLI::App app{"Long-tailed mixture-of-experts training and diagnostics"};
  app.require_subcommand(1);

  BuildDataOptions bd;
  auto* c_bd = app.add_subcommand("build-data", "build the long-tailed train set and balanced test set");
  add_config(c_bd, bd.config);
  c_bd->add_option("-o,--out", bd.out, "output directory")->required();

  TrainOptions tr;
  auto* c_tr = app.add_subcommand("train", "representation learning then classifier retraining");
  add_config(c_tr, tr.config);
  c_tr->add_option("-o,--out", tr.out, "output directory")->required();
  c_tr->add_option("--data", tr.data, "dataset directory from build-data")->check(CLI::ExistingDirectory);
  c_tr->add_option("--from-stage1", tr.from_stage1, "stage-1 checkpoint; run classifier retraining only")
      ->check(CLI::ExistingFile);

  EvalOptions ev;
  auto* c_ev = app.add_subcommand("eval", "evaluate a checkpoint on the test set");
  add_config(c_ev, ev.config);
  c_ev->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  c_ev->add_option("--data", ev.data, "dataset directory from build-data")->check(CLI::ExistingDirectory);
  c_ev->add_option("-o,--out", ev.out, "output directory")->required();

  DiagnoseOptions dg;
  auto* c_dg = app.add_subcommand("diagnose", "hardest-negative histogram and expert preference");
  add_config(c_dg, dg.eval.config);
  c_dg->add_option("--checkpoint", dg.eval.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  c_dg->add_option("--data", dg.eval.data, "dataset directory from build-data")->check(CLI::ExistingDirectory);
  c_dg->add_option("-o,--out", dg.eval.out, "output directory")->required();
  c_dg->add_option("--bins", dg.bins, "histogram bins")->capture_default_str();
  c_dg->add_option("--source", dg.source, "ensemble or expert")->capture_default_str();
  c_dg->add_option("--expert", dg.expert, "expert index for --source expert")->capture_default_str();

  AblateOptions ab;
  auto* c_ab = app.add_subcommand("ablate", "component ablation over seeds");
  add_config(c_ab, ab.config);
  c_ab->add_option("-o,--out", ab.out, "output directory")->required();
  c_ab->add_option("--seeds", ab.seeds, "repetitions")->capture_default_str();
  c_ab->add_option("--rows", ab.rows, "'all' or comma-separated row indices 0..6")->capture_default_str();

  SweepOptions sw;
  auto* c_sw = app.add_subcommand("sweep-experts", "expert count and tap arrangement sweep");
  add_config(c_sw, sw.config);
  c_sw->add_option("-o,--out", sw.out, "output directory")->required();
  c_sw->add_option("--seeds", sw.seeds, "repetitions")->capture_default_str();
  c_sw->add_option("--grid", sw.grid, "groups M:ARR,ARR separated by ';' or spaces; letters A.. name tap depths")
      ->capture_default_str();

  LossesOptions ls;
  auto* c_ls = app.add_subcommand("losses", "evaluate the losses on a logit file");
  c_ls->add_option("logits", ls.logits, "JSON logit file")->required()->check(CLI::ExistingFile);
  c_ls->add_option("-o,--out", ls.out, "also write losses.json/csv under this directory");
  c_ls->add_flag("--grad", ls.gradients, "include gradients");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what());
    return 2;
  }

  try {
    if (c_bd->parsed()) build_data(bd);
    else if (c_tr->parsed()) train(tr);
    else if (c_ev->parsed()) eval(ev);
    else if (c_dg->parsed()) diagnose(dg);
    else if (c_ab->parsed()) ablate(ab);
    else if (c_sw->parsed()) sweep_experts(sw);
    else if (c_ls->parsed()) losses(ls);
  } catch (const shike::NumericError& e) {
    return fail(e.kind(), e.what(), e.dump());
  } catch (const shike::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail("format", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
