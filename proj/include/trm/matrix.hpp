#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "trm/phantom.hpp"
#include "trm/train.hpp"

namespace trm {

// A task is a (modality, label mapping) view over the shared phantom
// population, so cross-modality and cross-task transfer share geometry.
struct SuiteTaskDef {
  std::string modality;
  std::vector<std::int32_t> mapping;
  std::vector<std::string> class_names;
};

struct Suite {
  std::string name = "suite";
  std::int64_t height = 64, width = 64, subjects = 60;
  double background = 0.05;
  std::vector<StructureSpec> structures;
  std::vector<ModalitySpec> modalities;
  std::vector<std::pair<std::string, SuiteTaskDef>> tasks;  // declaration order preserved
  std::vector<std::pair<std::string, std::string>> pairs;   // (source, target)
  std::vector<SchemeKind> schemes;
  std::vector<std::uint64_t> seeds;
  std::uint64_t data_seed = 7;
  std::array<double, 3> split_fractions = {0.7, 0.0, 0.3};
  std::optional<std::int64_t> few_shot_k;  // subset of the target train split, keyed by run seed
  TrainConfig finetune_cfg;
  TrainConfig pretrain_cfg;

  const SuiteTaskDef& task(const std::string& name_) const {
    for (const auto& [n, def] : tasks)
      if (n == name_) return def;
    fail(Errc::validation, "suite references undefined task '" + name_ + "'");
  }

  PhantomSpec phantom_for(const std::string& task_name) const {
    const SuiteTaskDef& def = task(task_name);
    PhantomSpec spec;
    spec.height = height;
    spec.width = width;
    spec.subjects = subjects;
    spec.background = background;
    spec.structures = structures;
    spec.modalities = modalities;
    spec.task = {task_name, def.mapping, def.class_names};
    return spec;
  }

  void validate() const {
    if (tasks.empty() || pairs.empty() || schemes.empty() || seeds.empty()) {
      fail(Errc::validation, "suite needs tasks, pairs, schemes, and seeds");
    }
    for (const auto& [src, tgt] : pairs) {
      (void)task(src);
      (void)task(tgt);
      if (src == tgt) fail(Errc::validation, "suite pairs a task with itself: " + src);
    }
    for (const auto& [n, def] : tasks) {
      bool known = false;
      for (const auto& m : modalities) known |= m.name == def.modality;
      if (!known) fail(Errc::validation, "task '" + n + "' uses undeclared modality '" + def.modality + "'");
    }
  }

  static Suite from_json(const json& j) {
    Suite s;
    s.name = j.value("name", s.name);
    const json& g = j.at("geometry");
    s.height = g.value("height", s.height);
    s.width = g.value("width", s.width);
    s.subjects = g.value("subjects", s.subjects);
    s.background = g.value("background", s.background);
    for (const auto& sj : g.at("structures")) {
      StructureSpec st;
      st.name = sj.at("name").get<std::string>();
      st.rx_min = sj.at("rx").at(0).get<double>();
      st.rx_max = sj.at("rx").at(1).get<double>();
      st.ry_min = sj.at("ry").at(0).get<double>();
      st.ry_max = sj.at("ry").at(1).get<double>();
      st.jitter = sj.value("jitter", 0.05);
      st.intensity = sj.at("intensity").get<double>();
      s.structures.push_back(st);
    }
    for (const auto& mj : j.at("modalities")) {
      ModalitySpec m;
      m.name = mj.at("name").get<std::string>();
      m.gamma = mj.value("gamma", 1.0);
      m.gain = mj.value("gain", 1.0);
      m.offset = mj.value("offset", 0.0);
      m.noise = mj.value("noise", 0.0);
      s.modalities.push_back(m);
    }
    for (const auto& [name, tj] : j.at("tasks").items()) {
      SuiteTaskDef def;
      def.modality = tj.at("modality").get<std::string>();
      def.mapping = tj.at("mapping").get<std::vector<std::int32_t>>();
      def.class_names = tj.at("classes").get<std::vector<std::string>>();
      s.tasks.emplace_back(name, std::move(def));
    }
    for (const auto& pj : j.at("pairs"))
      s.pairs.emplace_back(pj.at(0).get<std::string>(), pj.at(1).get<std::string>());
    for (const auto& sj : j.at("schemes")) s.schemes.push_back(scheme_from_string(sj.get<std::string>()));
    s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    s.data_seed = j.value("data_seed", s.data_seed);
    if (j.contains("split")) {
      for (std::size_t i = 0; i < 3; ++i) s.split_fractions[i] = j.at("split").at(i).get<double>();
    }
    if (j.contains("few_shot_k") && !j.at("few_shot_k").is_null())
      s.few_shot_k = j.at("few_shot_k").get<std::int64_t>();
    if (j.contains("finetune")) s.finetune_cfg = TrainConfig::from_json(j.at("finetune"));
    if (j.contains("pretrain")) s.pretrain_cfg = TrainConfig::from_json(j.at("pretrain"));
    s.validate();
    return s;
  }
};

struct CellResult {
  std::string source, target;
  SchemeKind scheme = SchemeKind::vanilla;
  std::uint64_t seed = 0;
  std::string status = "ok";
  DiceReport dice_report;
  double risk_before_mean = 0.0, risk_before_max = 0.0;
  double risk_after_mean = 0.0, risk_after_max = 0.0;
  double final_loss = 0.0;
};

struct ExperimentResult {
  std::string suite_name;
  std::vector<CellResult> cells;
  json report;
};

namespace detail {

inline void parallel_for(std::size_t njobs, int jobs, const std::function<void(std::size_t)>& fn) {
  std::size_t workers = jobs > 0 ? static_cast<std::size_t>(jobs)
                                 : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, njobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < njobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= njobs) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

struct TaskData {
  SliceDataset train, test;
};

}  // namespace detail

// Runs the full (source, target, scheme, seed) grid. Each cell is an
// independent job: risk map before, fine-tune, risk map after, Dice on the
// target test split, plus PGM/CSV/RMRS exports. Cell failures are recorded
// in the report rather than aborting the matrix.
inline ExperimentResult run_matrix(const Suite& suite, const std::filesystem::path& out_dir,
                                   int jobs = 0) {
  suite.validate();
  std::filesystem::create_directories(out_dir / "checkpoints");
  std::filesystem::create_directories(out_dir / "cells");

  // --- datasets, one per referenced task, shared geometry population
  std::vector<std::string> task_names;
  for (const auto& [src, tgt] : suite.pairs) {
    for (const auto& name : {src, tgt}) {
      if (std::find(task_names.begin(), task_names.end(), name) == task_names.end())
        task_names.push_back(name);
    }
  }
  std::map<std::string, detail::TaskData> data;
  for (const auto& name : task_names) {
    SliceDataset full = generate_phantom_modality(suite.phantom_for(name),
                                                  suite.task(name).modality, suite.data_seed);
    auto parts = split(full, suite.split_fractions, suite.data_seed);
    data[name] = {std::move(parts[0]), std::move(parts[2])};
  }

  // --- pretrain each distinct source once (cached by task + config hash)
  std::vector<std::string> sources;
  for (const auto& [src, tgt] : suite.pairs)
    if (std::find(sources.begin(), sources.end(), src) == sources.end()) sources.push_back(src);

  std::map<std::string, ModelParams> source_models;
  std::map<std::string, std::string> source_errors;
  {
    std::vector<std::optional<ModelParams>> slots(sources.size());
    std::vector<std::string> errors(sources.size());
    detail::parallel_for(sources.size(), jobs, [&](std::size_t i) {
      const std::string& name = sources[i];
      try {
        TrainConfig cfg = suite.pretrain_cfg;
        cfg.freeze_encoder = false;
        cfg.scheme = SchemeKind::vanilla;
        cfg.seed = derive_seed(suite.pretrain_cfg.seed, {fnv1a64(name)});
        TrainResult r = pretrain(data.at(name).train, cfg);
        const auto digest = detail::params_digest(r.params).substr(0, 8);
        save_checkpoint(r.params, out_dir / "checkpoints" / (name + "-" + digest + ".rmtc"));
        slots[i] = std::move(r.params);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
    for (std::size_t i = 0; i < sources.size(); ++i) {
      if (slots[i]) {
        source_models.emplace(sources[i], std::move(*slots[i]));
      } else {
        source_errors.emplace(sources[i], errors[i]);
      }
    }
  }

  // --- cells
  struct Job {
    std::string source, target;
    SchemeKind scheme;
    std::uint64_t seed;
  };
  std::vector<Job> grid;
  for (const auto& [src, tgt] : suite.pairs)
    for (const auto scheme : suite.schemes)
      for (const auto seed : suite.seeds) grid.push_back({src, tgt, scheme, seed});

  ExperimentResult result;
  result.suite_name = suite.name;
  result.cells.resize(grid.size());

  detail::parallel_for(grid.size(), jobs, [&](std::size_t i) {
    const Job& job = grid[i];
    CellResult& cell = result.cells[i];
    cell.source = job.source;
    cell.target = job.target;
    cell.scheme = job.scheme;
    cell.seed = job.seed;
    try {
      if (auto it = source_errors.find(job.source); it != source_errors.end()) {
        fail(Errc::runtime, "source pretrain failed: " + it->second);
      }
      const ModelParams& source = source_models.at(job.source);
      SliceDataset train = data.at(job.target).train;
      if (suite.few_shot_k) train = few_shot_subset(train, *suite.few_shot_k, job.seed);
      const SliceDataset& test = data.at(job.target).test;

      TrainConfig cfg = suite.finetune_cfg;
      cfg.seed = job.seed;
      cfg.scheme = job.scheme;

      const auto cell_dir = out_dir / "cells" /
                            (job.source + "__" + job.target + "__" + to_string(job.scheme) +
                             "__s" + std::to_string(job.seed));
      std::filesystem::create_directories(cell_dir);

      RiskResult before = compute_risk(source, train, cfg);
      export_risk_map(before.risk, cell_dir / "risk_before");
      export_transferability_map(before.tmap, cell_dir / "leep_before");

      TrainResult ft = finetune(source, train, cfg);

      RiskResult after = compute_risk(ft.params, train, cfg);
      export_risk_map(after.risk, cell_dir / "risk_after");

      cell.dice_report = evaluate(ft.params, test);
      cell.risk_before_mean = before.risk.mean();
      cell.risk_before_max = before.risk.max();
      cell.risk_after_mean = after.risk.mean();
      cell.risk_after_max = after.risk.max();
      cell.final_loss = ft.loss_history.back();
    } catch (const std::exception& e) {
      cell.status = e.what();
    }
  });

  // --- report (assembled in deterministic grid order)
  json report;
  report["suite"] = suite.name;
  report["subjects"] = suite.subjects;
  report["extent"] = {suite.height, suite.width};
  report["schemes"] = json::array();
  for (auto s : suite.schemes) report["schemes"].push_back(to_string(s));
  report["seeds"] = suite.seeds;
  if (suite.few_shot_k) report["few_shot_k"] = *suite.few_shot_k;

  report["cells"] = json::array();
  for (const auto& c : result.cells) {
    json cj;
    cj["source"] = c.source;
    cj["target"] = c.target;
    cj["scheme"] = to_string(c.scheme);
    cj["seed"] = c.seed;
    cj["status"] = c.status;
    if (c.status == "ok") {
      cj["dice"] = c.dice_report.to_json();
      cj["risk_before"] = {{"mean", c.risk_before_mean}, {"max", c.risk_before_max}};
      cj["risk_after"] = {{"mean", c.risk_after_mean}, {"max", c.risk_after_max}};
      cj["final_loss"] = c.final_loss;
    }
    report["cells"].push_back(std::move(cj));
  }

  // per-target averages per scheme (the Table-I "Average Dice" column)
  report["target_averages"] = json::array();
  {
    std::vector<std::string> targets;
    for (const auto& [src, tgt] : suite.pairs)
      if (std::find(targets.begin(), targets.end(), tgt) == targets.end()) targets.push_back(tgt);
    for (const auto& tgt : targets) {
      for (const auto scheme : suite.schemes) {
        double sum = 0.0;
        std::int64_t count = 0;
        for (const auto& c : result.cells) {
          if (c.target == tgt && c.scheme == scheme && c.status == "ok") {
            sum += c.dice_report.macro_foreground;
            ++count;
          }
        }
        if (count > 0) {
          report["target_averages"].push_back({{"target", tgt},
                                               {"scheme", to_string(scheme)},
                                               {"average_dice", sum / static_cast<double>(count)},
                                               {"cells", count}});
        }
      }
    }
  }

  // scheme means and paired comparisons against vanilla
  report["scheme_means"] = json::array();
  for (const auto scheme : suite.schemes) {
    double sum = 0.0;
    std::int64_t count = 0;
    for (const auto& c : result.cells)
      if (c.scheme == scheme && c.status == "ok") {
        sum += c.dice_report.macro_foreground;
        ++count;
      }
    if (count > 0) {
      report["scheme_means"].push_back(
          {{"scheme", to_string(scheme)}, {"mean_macro_dice", sum / static_cast<double>(count)}, {"cells", count}});
    }
  }

  report["comparisons"] = json::array();
  const bool has_vanilla =
      std::find(suite.schemes.begin(), suite.schemes.end(), SchemeKind::vanilla) != suite.schemes.end();
  if (has_vanilla) {
    for (const auto scheme : suite.schemes) {
      if (scheme == SchemeKind::vanilla) continue;
      double gain_sum = 0.0;
      std::int64_t runs = 0, wins = 0, risk_drops = 0, risk_runs = 0;
      for (const auto& a : result.cells) {
        if (a.scheme != scheme || a.status != "ok") continue;
        for (const auto& b : result.cells) {
          if (b.scheme == SchemeKind::vanilla && b.status == "ok" && b.source == a.source &&
              b.target == a.target && b.seed == a.seed) {
            gain_sum += a.dice_report.macro_foreground - b.dice_report.macro_foreground;
            wins += a.dice_report.macro_foreground > b.dice_report.macro_foreground;
            ++runs;
          }
        }
        risk_drops += a.risk_after_mean < a.risk_before_mean;
        ++risk_runs;
      }
      if (runs > 0) {
        report["comparisons"].push_back({{"scheme", to_string(scheme)},
                                         {"baseline", "vanilla"},
                                         {"runs", runs},
                                         {"mean_gain", gain_sum / static_cast<double>(runs)},
                                         {"wins", wins},
                                         {"win_rate", static_cast<double>(wins) / static_cast<double>(runs)},
                                         {"risk_mean_drops", risk_drops},
                                         {"risk_runs", risk_runs}});
      }
    }
  }

  result.report = std::move(report);
  std::ofstream os(out_dir / "report.json");
  if (!os) fail(Errc::missing_file, "cannot write report in " + out_dir.string());
  os << result.report.dump(2) << '\n';
  return result;
}

}  // namespace trm
