// Command-line front end: every subcommand drives the same config-described
// pipeline, truncated at a different stage. Exit codes: 0 success, 2 config
// fault, 3 data fault, 4 numerical fault, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "diva/diva.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string out_dir = "runs";
  long seed = -1;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "experiment config file")->required();
  cmd->add_option("--seed", a.seed, "override the seed in the config");
  cmd->add_option("--out-dir", a.out_dir, "directory holding run directories");
  cmd->add_flag("--force", a.force, "redo the run even if it already finished");
}

int run_stage(const CommonArgs& a, diva::Stage upto) {
  diva::RunOutcome out = diva::run_experiment_file(a.config, a.out_dir, a.force, upto, a.seed);
  if (out.skipped) {
    std::cout << "skipped (already complete): " << out.run_dir << "\n";
    return 0;
  }
  std::cout << "run dir: " << out.run_dir << "\n";
  if (out.has_report) {
    const diva::MetricsReport& r = out.report;
    std::printf("samples=%d attack_only=%.4f top1_evasive=%.4f top5_evasive=%.4f "
                "instability=%.4f dssim_max=%.5f rejected=%d\n",
                r.n_samples, r.attack_only_rate, r.top1_evasive_rate, r.top5_evasive_rate,
                r.instability, r.dssim_max, r.rejected);
  }
  return 0;
}

int report_cmd(const std::string& run_dir) {
  namespace fs = std::filesystem;
  fs::path rp = fs::path(run_dir) / "report.json";
  std::ifstream in(rp, std::ios::binary);
  if (!in) throw diva::DataError("no report.json under " + run_dir);
  nlohmann::json j = nlohmann::json::parse(in);

  std::cout << "experiment: " << j.value("name", "?") << "\n";
  std::cout << "config hash: " << j.value("config_hash", "?") << "\n";
  if (j.contains("attack"))
    std::cout << "attack: " << j["attack"].value("variant", "?")
              << " eps=" << j["attack"].value("epsilon", 0.0)
              << " steps=" << j["attack"].value("steps", 0)
              << " c=" << j["attack"].value("c", 0.0) << "\n";
  if (j.contains("clean_accuracy"))
    std::printf("clean accuracy: original=%.4f adapted=%.4f\n",
                j["clean_accuracy"].value("original", 0.0),
                j["clean_accuracy"].value("adapted", 0.0));
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    std::printf("samples: %d (retention %.3f)\n", m.value("n_samples", 0),
                m.value("retention", 0.0));
    std::printf("attack_only: %.4f\n", m.value("attack_only_rate", 0.0));
    std::printf("top1_evasive: %.4f\n", m.value("top1_evasive_rate", 0.0));
    std::printf("top5_evasive: %.4f (literal top-5 miss: %.4f)\n",
                m.value("top5_evasive_rate", 0.0), m.value("top5_literal_rate", 0.0));
    std::printf("confidence_delta_mean: %.4f\n", m.value("confidence_delta_mean", 0.0));
    std::printf("instability: %.4f\n", m.value("instability", 0.0));
    std::printf("dssim: mean=%.5f max=%.5f flagged=%d\n", m.value("dssim_mean", 0.0),
                m.value("dssim_max", 0.0), m.value("dssim_flagged", 0));
    if (m.value("rejected", 0) > 0) std::printf("rejected: %d\n", m.value("rejected", 0));
  }
  if (j.contains("sweep")) {
    std::cout << "c sweep:\n      c  evasive   attack\n";
    for (const auto& row : j["sweep"])
      std::printf("%7.3f  %7.4f  %7.4f\n", row.value("c", 0.0), row.value("evasive_rate", 0.0),
                  row.value("attack_rate", 0.0));
  }

  // Plot-ready flat CSV next to the report.
  std::ofstream csv(fs::path(run_dir) / "metrics.csv", std::ios::binary | std::ios::trunc);
  csv << "key,value\n";
  if (j.contains("metrics"))
    for (const auto& [k, v] : j["metrics"].items()) csv << k << ',' << v.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differential evasion toolkit"};
  app.require_subcommand(1);

  CommonArgs train_a, quant_a, prune_a, distill_a, attack_a, defend_a, eval_a;
  std::string report_run;

  CLI::App* c_train = app.add_subcommand("train", "train the full-precision model");
  add_common(c_train, train_a);
  CLI::App* c_quant = app.add_subcommand("quantize", "adapt by quantization-aware training");
  add_common(c_quant, quant_a);
  CLI::App* c_prune = app.add_subcommand("prune", "adapt by magnitude pruning");
  add_common(c_prune, prune_a);
  CLI::App* c_distill = app.add_subcommand("distill", "build a surrogate by distillation");
  add_common(c_distill, distill_a);
  CLI::App* c_attack = app.add_subcommand("attack", "run the configured attack and evaluate");
  add_common(c_attack, attack_a);
  CLI::App* c_defend = app.add_subcommand("defend", "run the configured minimax defense");
  add_common(c_defend, defend_a);
  CLI::App* c_eval = app.add_subcommand("eval", "full pipeline through evaluation");
  add_common(c_eval, eval_a);
  CLI::App* c_report = app.add_subcommand("report", "summarize a finished run directory");
  c_report->add_option("--run", report_run, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_train->parsed()) return run_stage(train_a, diva::Stage::train);
    if (c_quant->parsed()) {
      diva::Config cfg = diva::parse_config_file(quant_a.config);
      if (!cfg.find("adapt", "mode")) cfg.set("adapt", "mode", "quantized");
      if (quant_a.seed >= 0) cfg.set("experiment", "seed", std::to_string(quant_a.seed));
      diva::RunOutcome out =
          diva::run_experiment(std::move(cfg), quant_a.out_dir, quant_a.force, diva::Stage::adapt);
      std::cout << (out.skipped ? "skipped (already complete): " : "run dir: ") << out.run_dir
                << "\n";
      return 0;
    }
    if (c_prune->parsed()) {
      diva::Config cfg = diva::parse_config_file(prune_a.config);
      if (!cfg.find("adapt", "mode")) cfg.set("adapt", "mode", "pruned");
      if (prune_a.seed >= 0) cfg.set("experiment", "seed", std::to_string(prune_a.seed));
      diva::RunOutcome out =
          diva::run_experiment(std::move(cfg), prune_a.out_dir, prune_a.force, diva::Stage::adapt);
      std::cout << (out.skipped ? "skipped (already complete): " : "run dir: ") << out.run_dir
                << "\n";
      return 0;
    }
    if (c_distill->parsed()) return run_stage(distill_a, diva::Stage::surrogate);
    if (c_attack->parsed()) return run_stage(attack_a, diva::Stage::eval);
    if (c_defend->parsed()) return run_stage(defend_a, diva::Stage::defend);
    if (c_eval->parsed()) return run_stage(eval_a, diva::Stage::eval);
    if (c_report->parsed()) return report_cmd(report_run);
  } catch (const diva::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const diva::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const diva::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const diva::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
