// trm: transfer risk maps for segmentation fine-tuning.
//
// Subcommands: gen-data, pretrain, riskmap, finetune, eval, matrix.
// Exit codes: 0 success, 1 validation/input error, 2 runtime or divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "trm/trm.hpp"

namespace fs = std::filesystem;

namespace {

trm::json load_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) trm::fail(trm::Errc::missing_file, "cannot open " + path.string());
  trm::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    trm::fail(trm::Errc::validation, path.string() + ": " + e.what());
  }
  return j;
}

// Pretraining has no frozen encoder; default the flag off when the config
// file does not set it explicitly.
trm::TrainConfig load_train_config(const fs::path& path, bool pretraining) {
  trm::json j = load_json(path);
  if (pretraining && !j.contains("freeze_encoder")) j["freeze_encoder"] = false;
  return trm::TrainConfig::from_json(j);
}

int run_gen_data(const fs::path& spec_path, std::uint64_t seed, const fs::path& out) {
  const trm::PhantomSpec spec = trm::PhantomSpec::from_json(load_json(spec_path));
  const auto datasets = trm::generate_phantoms(spec, seed);
  for (const auto& ds : datasets) {
    const auto dir = out / ds.manifest.id;
    trm::save_dataset(ds, dir);
    std::printf("wrote %s (%lld slices, %lldx%lld, %lld classes)\n", dir.string().c_str(),
                static_cast<long long>(ds.count()), static_cast<long long>(ds.height()),
                static_cast<long long>(ds.width()), static_cast<long long>(ds.num_classes()));
  }
  return 0;
}

int run_pretrain(const fs::path& data, const fs::path& config, const fs::path& out) {
  const trm::SliceDataset ds = trm::load_dataset(data);
  const trm::TrainConfig cfg = load_train_config(config, true);
  trm::TrainResult r = trm::pretrain(ds, cfg);
  trm::save_checkpoint(r.params, out);
  std::printf("pretrained on %s: %lld iterations, loss %.6f -> %.6f, checkpoint %s\n",
              ds.manifest.id.c_str(), static_cast<long long>(cfg.iterations),
              r.loss_history.front(), r.loss_history.back(), out.string().c_str());
  return 0;
}

int run_riskmap(const fs::path& ckpt, const fs::path& data, const std::string& mode,
                const std::string& orientation, const std::string& prefix) {
  const trm::ModelParams params = trm::load_checkpoint(ckpt);
  const trm::SliceDataset ds = trm::load_dataset(data);
  const trm::RiskResult rr = trm::compute_risk(params, ds, trm::cond_mode_from_string(mode),
                                               trm::orientation_from_string(orientation));
  trm::export_risk_map(rr.risk, prefix);
  trm::export_transferability_map(rr.tmap, prefix + ".leep");
  std::printf("risk map for %s on %s: mean %.4f, max %.4f -> %s.{csv,rmrs,pgm}\n",
              ckpt.string().c_str(), ds.manifest.id.c_str(), rr.risk.mean(), rr.risk.max(),
              prefix.c_str());
  return 0;
}

int run_finetune(const fs::path& ckpt, const fs::path& data, const std::string& scheme,
                 const fs::path& config, const fs::path& out) {
  const trm::ModelParams source = trm::load_checkpoint(ckpt);
  const trm::SliceDataset ds = trm::load_dataset(data);
  trm::TrainConfig cfg = load_train_config(config, false);
  cfg.scheme = trm::scheme_from_string(scheme);
  trm::TrainResult r = trm::finetune(source, ds, cfg);
  trm::save_checkpoint(r.params, out);
  std::printf("finetuned (%s) on %s: loss %.6f -> %.6f, checkpoint %s\n", scheme.c_str(),
              ds.manifest.id.c_str(), r.loss_history.front(), r.loss_history.back(),
              out.string().c_str());
  return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data, const fs::path& report) {
  const trm::ModelParams params = trm::load_checkpoint(ckpt);
  const trm::SliceDataset ds = trm::load_dataset(data);
  const trm::DiceReport r = trm::evaluate(params, ds);
  trm::json j;
  j["dataset"] = ds.manifest.id;
  j["dice"] = r.to_json();
  std::ofstream os(report);
  if (!os) trm::fail(trm::Errc::missing_file, "cannot write " + report.string());
  os << j.dump(2) << '\n';
  std::printf("macro foreground dice on %s: %.4f (%lld samples) -> %s\n", ds.manifest.id.c_str(),
              r.macro_foreground, static_cast<long long>(r.samples), report.string().c_str());
  return 0;
}

int run_matrix(const fs::path& suite_path, const fs::path& out, int jobs) {
  const trm::Suite suite = trm::Suite::from_json(load_json(suite_path));
  const trm::ExperimentResult result = trm::run_matrix(suite, out, jobs);
  for (const auto& sm : result.report.at("scheme_means")) {
    std::printf("scheme %-8s mean macro dice %.4f over %lld cells\n",
                sm.at("scheme").get<std::string>().c_str(), sm.at("mean_macro_dice").get<double>(),
                sm.at("cells").get<long long>());
  }
  for (const auto& cmp : result.report.at("comparisons")) {
    std::printf("%s vs vanilla: mean gain %+.4f, wins %lld/%lld, risk-mean drops %lld/%lld\n",
                cmp.at("scheme").get<std::string>().c_str(), cmp.at("mean_gain").get<double>(),
                cmp.at("wins").get<long long>(), cmp.at("runs").get<long long>(),
                cmp.at("risk_mean_drops").get<long long>(), cmp.at("risk_runs").get<long long>());
  }
  std::int64_t failed = 0;
  for (const auto& c : result.cells) failed += c.status != "ok";
  if (failed > 0) std::fprintf(stderr, "%lld cell(s) failed; see report.json\n", static_cast<long long>(failed));
  std::printf("report: %s\n", (out / "report.json").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transfer risk maps for segmentation fine-tuning"};
  app.require_subcommand(1);

  std::string spec_file, config_file, suite_file, data_dir, out_path, ckpt_path, report_path;
  std::string mode = "global", orientation = "hardness", scheme = "riskmap";
  std::uint64_t seed = 0;
  int jobs = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic registered phantom dataset");
  gen->add_option("--spec", spec_file, "phantom spec JSON")->required();
  gen->add_option("--seed", seed, "generation seed")->required();
  gen->add_option("--out", out_path, "output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "train a source model from scratch");
  pre->add_option("--data", data_dir, "dataset directory")->required();
  pre->add_option("--config", config_file, "training config JSON")->required();
  pre->add_option("--out", ckpt_path, "output checkpoint path")->required();

  auto* risk = app.add_subcommand("riskmap", "compute the transfer risk map of a checkpoint on a dataset");
  risk->add_option("--ckpt", ckpt_path, "source checkpoint")->required();
  risk->add_option("--data", data_dir, "target dataset directory")->required();
  risk->add_option("--mode", mode, "conditional mode: global|perloc");
  risk->add_option("--orientation", orientation, "scaling orientation: hardness|paper-eq");
  risk->add_option("--out", out_path, "output prefix (.csv/.rmrs/.pgm)")->required();

  auto* fine = app.add_subcommand("finetune", "fine-tune a source checkpoint on target data");
  fine->add_option("--ckpt", ckpt_path, "source checkpoint")->required();
  fine->add_option("--data", data_dir, "target dataset directory")->required();
  fine->add_option("--scheme", scheme, "vanilla|class|trsmap|riskmap")->required();
  fine->add_option("--config", config_file, "training config JSON")->required();
  fine->add_option("--out", out_path, "output checkpoint path")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint with per-class Dice");
  ev->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--report", report_path, "output report JSON")->required();

  auto* mat = app.add_subcommand("matrix", "run the full experiment matrix from a suite file");
  mat->add_option("--suite", suite_file, "suite JSON")->required();
  mat->add_option("--out", out_path, "output directory")->required();
  mat->add_option("--jobs", jobs, "parallel cell jobs (0 = hardware)");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return run_gen_data(spec_file, seed, out_path);
    if (pre->parsed()) return run_pretrain(data_dir, config_file, ckpt_path);
    if (risk->parsed()) return run_riskmap(ckpt_path, data_dir, mode, orientation, out_path);
    if (fine->parsed()) return run_finetune(ckpt_path, data_dir, scheme, config_file, out_path);
    if (ev->parsed()) return run_eval(ckpt_path, data_dir, report_path);
    if (mat->parsed()) return run_matrix(suite_file, out_path, jobs);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const trm::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
