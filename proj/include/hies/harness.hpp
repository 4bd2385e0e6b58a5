#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hies/analysis.hpp"
#include "hies/format.hpp"
#include "hies/pruning.hpp"
#include "hies/scoring.hpp"
#include "hies/train.hpp"
#include "hies/transformer.hpp"

namespace hies {

// Token layout shared by all synthetic tasks:
//   0 = CLS (prepended to every sequence), 1 = MARK,
//   [2, 2 + num_classes) = class tokens, the rest are fillers.
enum class TaskKind { majority, needle, parity };

inline TaskKind task_kind_from_name(const std::string& s) {
  if (s == "majority") return TaskKind::majority;
  if (s == "needle") return TaskKind::needle;
  if (s == "parity") return TaskKind::parity;
  throw ConfigError("unknown task kind '" + s + "'");
}

inline std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::majority: return "majority";
    case TaskKind::needle: return "needle";
    case TaskKind::parity: return "parity";
  }
  return "?";
}

struct SyntheticTask {
  TaskKind kind = TaskKind::majority;
  int vocab_size = 16;
  int min_len = 8;   // content length; CLS is prepended on top
  int max_len = 16;
  int num_classes = 2;
  std::uint64_t seed = 7;

  static constexpr int kCls = 0;
  static constexpr int kMark = 1;
  int class_token(int c) const { return 2 + c; }
  int first_filler() const { return 2 + num_classes; }

  void validate() const {
    if (num_classes < 2) throw ConfigError("synthetic tasks need num_classes >= 2");
    if (vocab_size < first_filler() + 1)
      throw ConfigError("vocab must cover CLS, MARK, class tokens and at least one filler (" +
                        std::to_string(first_filler() + 1) + "), got " +
                        std::to_string(vocab_size));
    if (min_len < 2 || min_len > max_len)
      throw ConfigError("need 2 <= min_len <= max_len");
    if (kind == TaskKind::parity && num_classes != 2)
      throw ConfigError("parity is a binary task");
  }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 step over a xor-folded pair
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline Example make_example(const SyntheticTask& t, int label, int len, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> any_class(0, t.num_classes - 1);
  std::uniform_int_distribution<int> any_filler(t.first_filler(), t.vocab_size - 1);
  std::vector<int> body(static_cast<std::size_t>(len), 0);

  switch (t.kind) {
    case TaskKind::majority: {
      for (auto& tok : body) tok = t.class_token(any_class(rng));
      // Force a strict majority of the label's class token.
      std::uniform_int_distribution<int> any_pos(0, len - 1);
      auto counts = [&]() {
        std::vector<int> c(t.num_classes, 0);
        for (int tok : body) ++c[tok - 2];
        return c;
      };
      for (;;) {
        auto c = counts();
        int rival = -1;
        for (int i = 0; i < t.num_classes; ++i)
          if (i != label && c[i] >= c[label]) rival = i;
        if (rival < 0) break;
        int pos = any_pos(rng);
        while (body[pos] != t.class_token(rival)) pos = (pos + 1) % len;
        body[pos] = t.class_token(label);
      }
      break;
    }
    case TaskKind::needle: {
      for (auto& tok : body) tok = any_filler(rng);
      // Distractor class tokens keep "spot any class token" from solving it.
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      for (auto& tok : body)
        if (coin(rng) < 0.3) tok = t.class_token(any_class(rng));
      std::uniform_int_distribution<int> mark_pos(0, len - 2);
      const int pos = mark_pos(rng);
      body[pos] = SyntheticTask::kMark;
      body[pos + 1] = t.class_token(label);
      break;
    }
    case TaskKind::parity: {
      for (auto& tok : body) tok = any_filler(rng);
      std::vector<int> feasible;
      for (int c = label; c <= len; c += 2) feasible.push_back(c);
      std::uniform_int_distribution<int> pick(0, static_cast<int>(feasible.size()) - 1);
      const int count = feasible[pick(rng)];
      std::vector<int> pos(static_cast<std::size_t>(len));
      std::iota(pos.begin(), pos.end(), 0);
      std::shuffle(pos.begin(), pos.end(), rng);
      for (int i = 0; i < count; ++i) body[pos[i]] = SyntheticTask::kMark;
      break;
    }
  }

  Example ex;
  ex.tokens.reserve(body.size() + 1);
  ex.tokens.push_back(SyntheticTask::kCls);
  ex.tokens.insert(ex.tokens.end(), body.begin(), body.end());
  ex.label = label;
  return ex;
}

inline Dataset gen_split(const SyntheticTask& t, int n, std::uint64_t stream_seed) {
  std::mt19937_64 rng(stream_seed);
  std::uniform_int_distribution<int> any_len(t.min_len, t.max_len);
  Dataset out;
  out.items.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int label = i % t.num_classes;  // stratified: exact class balance
    out.items.push_back(make_example(t, label, any_len(rng), rng));
  }
  std::shuffle(out.items.begin(), out.items.end(), rng);
  return out;
}

}  // namespace detail

inline std::pair<Dataset, Dataset> gen_task(const SyntheticTask& t, int n_train, int n_eval) {
  t.validate();
  if (n_train < 1 || n_eval < 1) throw ConfigError("need n_train, n_eval >= 1");
  return {detail::gen_split(t, n_train, detail::mix_seed(t.seed, 1)),
          detail::gen_split(t, n_eval, detail::mix_seed(t.seed, 2))};
}

inline double stability_from_preds(const std::vector<int>& pruned,
                                   const std::vector<int>& reference) {
  if (pruned.empty() || pruned.size() != reference.size())
    throw InputError("stability needs matching nonempty prediction vectors");
  int agree = 0;
  for (std::size_t i = 0; i < pruned.size(); ++i) agree += pruned[i] == reference[i] ? 1 : 0;
  return static_cast<double>(agree) / pruned.size();
}

// Fraction of eval examples on which the pruned model's argmax prediction
// agrees with the unpruned reference.
inline double stability(const PrunedView& pruned, const PrunedView& reference,
                        const Dataset& eval) {
  if (eval.empty()) throw InputError("empty eval set");
  std::vector<int> a, b;
  a.reserve(eval.size());
  b.reserve(eval.size());
  for (const auto& ex : eval.items) {
    a.push_back(pruned.predict(ex));
    b.push_back(reference.predict(ex));
  }
  return stability_from_preds(a, b);
}

inline double accuracy(const PrunedView& view, const Dataset& eval) {
  if (eval.empty()) throw InputError("empty eval set");
  int hits = 0;
  for (const auto& ex : eval.items) hits += view.predict(ex) == ex.label ? 1 : 0;
  return static_cast<double>(hits) / eval.size();
}

// ---------------------------------------------------------------------------
// Experiment orchestration: train -> score -> prune -> evaluate.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  ModelConfig model;
  SyntheticTask task;
  TrainConfig train;
  std::vector<std::string> criteria = {"hies", "his", "ad", "l2", "random"};
  std::vector<double> ratios = {0.25, 0.5};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  double alpha = 0.5;
  NormScope scope = NormScope::global;
  int calib_size = 512;
  int n_train = 4000;
  int n_eval = 1000;
  std::vector<double> alpha_grid = {0.0, 0.25, 0.5, 0.75, 0.9};
  std::vector<double> wauc_weights;  // empty: uniform over ratios
  int threads = 1;

  void validate() const {
    model.validate();
    task.validate();
    if (model.vocab_size != task.vocab_size)
      throw ConfigError("model vocab_size and task vocab_size disagree");
    if (model.num_classes != task.num_classes)
      throw ConfigError("model num_classes and task num_classes disagree");
    if (model.max_seq_len < task.max_len + 1)
      throw ConfigError("max_seq_len must cover CLS + max_len tokens");
    if (seeds.empty()) throw ConfigError("need at least one seed");
    if (criteria.empty()) throw ConfigError("need at least one criterion");
    for (const auto& c : criteria) criterion_from_name(c);
    for (std::size_t i = 0; i < ratios.size(); ++i) {
      if (ratios[i] <= 0.0 || ratios[i] >= 1.0)
        throw ConfigError("sweep ratios must lie in (0,1)");
      if (i && ratios[i] <= ratios[i - 1])
        throw ConfigError("sweep ratios must be strictly increasing");
    }
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0,1)");
    for (double a : alpha_grid)
      if (!(a >= 0.0 && a < 1.0)) throw ConfigError("alpha grid values must lie in [0,1)");
    if (!wauc_weights.empty() && wauc_weights.size() != ratios.size())
      throw ConfigError("wauc_weights must match the ratio grid");
    if (calib_size < 1 || n_train < 1 || n_eval < 1)
      throw ConfigError("calib_size, n_train, n_eval must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

// One trained model with its calibration statistics and cached reference
// predictions; the unit of work a sweep seed produces.
struct TrainedRun {
  std::uint64_t seed = 0;
  GatedTransformer model;
  CalibStats stats;
  Dataset train_split;
  Dataset calib;
  Dataset eval;
  std::vector<int> ref_preds;
  double ref_accuracy = 0.0;
  TrainStats train_stats;

  TrainedRun() : model(ModelConfig{}) {}
};

// The calibration set is a fixed held-out slice of the generated training
// data; eval is its own stream.
struct TaskSplits {
  Dataset train;
  Dataset calib;
  Dataset eval;
};

inline TaskSplits make_splits(const ExperimentConfig& cfg) {
  auto [all_train, eval] = gen_task(cfg.task, cfg.n_train + cfg.calib_size, cfg.n_eval);
  TaskSplits s;
  s.eval = std::move(eval);
  s.train.items.assign(all_train.items.begin(), all_train.items.end() - cfg.calib_size);
  s.calib.items.assign(all_train.items.end() - cfg.calib_size, all_train.items.end());
  return s;
}

inline TrainedRun prepare_run(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelConfig mc = cfg.model;
  mc.seed = seed;
  TrainedRun run;
  run.seed = seed;
  run.model = GatedTransformer(mc);

  TaskSplits splits = make_splits(cfg);
  run.eval = std::move(splits.eval);
  run.train_split = std::move(splits.train);
  run.calib = std::move(splits.calib);

  TrainConfig tc = cfg.train;
  tc.shuffle_seed = detail::mix_seed(seed, 3);
  run.train_stats = train(run.model, run.train_split, tc);

  run.stats = compute_calib_stats(run.model, run.calib);
  PrunedView ref = PrunedView::unpruned(run.model);
  run.ref_preds.reserve(run.eval.size());
  int hits = 0;
  for (const auto& ex : run.eval.items) {
    const int p = ref.predict(ex);
    run.ref_preds.push_back(p);
    hits += p == ex.label ? 1 : 0;
  }
  run.ref_accuracy = static_cast<double>(hits) / run.eval.size();
  return run;
}

inline std::vector<TrainedRun> prepare_runs(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<TrainedRun> runs(cfg.seeds.size());
  if (cfg.threads <= 1 || cfg.seeds.size() <= 1) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) runs[i] = prepare_run(cfg, cfg.seeds[i]);
    return runs;
  }
  std::vector<std::future<void>> jobs;
  std::size_t next = 0;
  const std::size_t width = std::min<std::size_t>(cfg.threads, cfg.seeds.size());
  std::mutex mu;
  for (std::size_t w = 0; w < width; ++w) {
    jobs.push_back(std::async(std::launch::async, [&]() {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= cfg.seeds.size()) return;
          i = next++;
        }
        runs[i] = prepare_run(cfg, cfg.seeds[i]);
      }
    }));
  }
  for (auto& j : jobs) j.get();
  return runs;
}

struct SweepCell {
  std::string criterion;
  double ratio = 0.0;  // 0 is the unpruned anchor row
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double stability = 0.0;
  double risk = 0.0;  // pruned-HIES sum, the risk objective
  PruneMask mask;
};

struct SweepResult {
  ExperimentConfig cfg;
  std::vector<SweepCell> cells;  // ordered by (criterion, ratio, seed)
  std::vector<std::uint64_t> seeds;
  std::vector<ScoreTable> scores;  // per seed
  std::vector<double> ref_accuracy;
};

inline PruneMask mask_for(const std::string& criterion, const TrainedRun& run,
                          const ScoreTable& table, double ratio, std::uint64_t mask_seed) {
  const int total = table.num_layers * table.num_heads;
  const int k = k_from_ratio(total, ratio);
  const Criterion c = criterion_from_name(criterion);
  if (c == Criterion::random) return baseline_mask(c, &run.model, nullptr, k, mask_seed);
  if (c == Criterion::l2) return baseline_mask(c, &run.model, nullptr, k, 0);
  return baseline_mask(c, nullptr, &table, k, 0);
}

inline SweepResult run_sweep(const ExperimentConfig& cfg, const std::vector<TrainedRun>& runs) {
  SweepResult result;
  result.cfg = cfg;
  for (const auto& run : runs) {
    if (run.train_stats.epoch_loss.empty()) throw ConfigError("sweep needs trained models");
    result.seeds.push_back(run.seed);
    result.scores.push_back(score_table_from_raw(run.stats.his, run.stats.ae,
                                                 run.stats.num_layers, run.stats.num_heads,
                                                 cfg.alpha, cfg.scope, run.stats.examples));
    result.ref_accuracy.push_back(run.ref_accuracy);
  }

  std::vector<double> all_ratios;
  all_ratios.push_back(0.0);  // anchor
  for (double r : cfg.ratios) all_ratios.push_back(r);

  for (const auto& criterion : cfg.criteria) {
    for (double ratio : all_ratios) {
      for (std::size_t si = 0; si < runs.size(); ++si) {
        const TrainedRun& run = runs[si];
        const ScoreTable& table = result.scores[si];
        SweepCell cell;
        cell.criterion = criterion;
        cell.ratio = ratio;
        cell.seed = run.seed;
        if (ratio == 0.0) {
          const int total = table.num_layers * table.num_heads;
          cell.mask = select_topk(table.column("hies"), table.num_layers, table.num_heads, total);
        } else {
          cell.mask = mask_for(criterion, run, table, ratio,
                               detail::mix_seed(run.seed, 100 + static_cast<std::uint64_t>(
                                                              ratio * 1e6)));
        }
        PrunedView view(run.model, cell.mask);
        std::vector<int> preds;
        preds.reserve(run.eval.size());
        int hits = 0;
        for (const auto& ex : run.eval.items) {
          const int p = view.predict(ex);
          preds.push_back(p);
          hits += p == ex.label ? 1 : 0;
        }
        cell.accuracy = static_cast<double>(hits) / run.eval.size();
        cell.stability = stability_from_preds(preds, run.ref_preds);
        cell.risk = risk(table.column("hies"), cell.mask);
        result.cells.push_back(std::move(cell));
      }
    }
  }
  return result;
}

inline SweepResult run_sweep(const ExperimentConfig& cfg) {
  return run_sweep(cfg, prepare_runs(cfg));
}

// ---------------------------------------------------------------------------
// Alpha sensitivity sweep with weighted-AUC selection.
// ---------------------------------------------------------------------------

struct AlphaSweepResult {
  std::vector<double> alphas;
  std::vector<double> wauc;
  // mean accuracy per (alpha, ratio), ratios in config order
  std::vector<std::vector<double>> accuracy;
  double alpha_best = 0.0;
  double alpha_median = 0.0;
  double alpha_worst = 0.0;
};

inline AlphaSweepResult alpha_sweep(const ExperimentConfig& cfg,
                                    const std::vector<TrainedRun>& runs) {
  if (cfg.alpha_grid.empty()) throw ConfigError("alpha sweep needs a nonempty grid");
  std::vector<double> weights = cfg.wauc_weights;
  if (weights.empty()) weights.assign(cfg.ratios.size(), 1.0);
  double wsum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ConfigError("wauc weights must be nonnegative");
    wsum += w;
  }
  if (wsum <= 0.0) throw ConfigError("wauc weights must not all vanish");

  AlphaSweepResult out;
  out.alphas = cfg.alpha_grid;
  out.accuracy.assign(cfg.alpha_grid.size(), std::vector<double>(cfg.ratios.size(), 0.0));
  for (std::size_t ai = 0; ai < cfg.alpha_grid.size(); ++ai) {
    const double alpha = cfg.alpha_grid[ai];
    for (const auto& run : runs) {
      const ScoreTable table =
          score_table_from_raw(run.stats.his, run.stats.ae, run.stats.num_layers,
                               run.stats.num_heads, alpha, cfg.scope, run.stats.examples);
      for (std::size_t ri = 0; ri < cfg.ratios.size(); ++ri) {
        const int total = table.num_layers * table.num_heads;
        const int k = k_from_ratio(total, cfg.ratios[ri]);
        const PruneMask mask =
            select_topk(table.column("hies"), table.num_layers, table.num_heads, k);
        PrunedView view(run.model, mask);
        out.accuracy[ai][ri] += accuracy(view, run.eval) / runs.size();
      }
    }
    double w = 0.0;
    for (std::size_t ri = 0; ri < cfg.ratios.size(); ++ri)
      w += weights[ri] / wsum * out.accuracy[ai][ri];
    out.wauc.push_back(w);
  }

  std::size_t best = 0, worst = 0;
  for (std::size_t i = 1; i < out.wauc.size(); ++i) {
    if (out.wauc[i] > out.wauc[best]) best = i;
    if (out.wauc[i] < out.wauc[worst]) worst = i;
  }
  out.alpha_best = out.alphas[best];
  out.alpha_worst = out.alphas[worst];
  std::vector<std::size_t> order(out.wauc.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out.wauc[a] < out.wauc[b]; });
  out.alpha_median = out.alphas[order[(order.size() - 1) / 2]];
  return out;
}

inline AlphaSweepResult alpha_sweep(const ExperimentConfig& cfg) {
  return alpha_sweep(cfg, prepare_runs(cfg));
}

// ---------------------------------------------------------------------------
// File exports.
// ---------------------------------------------------------------------------

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << content;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string curve_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "criterion,ratio,seed,accuracy,stability,risk\n";
  for (const auto& c : r.cells)
    os << c.criterion << "," << fmt_double(c.ratio) << "," << c.seed << ","
       << fmt_double(c.accuracy) << "," << fmt_double(c.stability) << "," << fmt_double(c.risk)
       << "\n";
  return os.str();
}

inline std::string mask_grid_csv(const PruneMask& m) {
  std::ostringstream os;
  for (int l = 0; l < m.num_layers; ++l) {
    for (int h = 0; h < m.num_heads; ++h) {
      if (h) os << ",";
      os << (m.retained({l, h}) ? 1 : 0);
    }
    os << "\n";
  }
  return os.str();
}

inline PruneMask mask_from_grid_csv(const std::string& text) {
  PruneMask m;
  std::istringstream in(text);
  std::string line;
  std::vector<std::vector<int>> grid;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<int> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      if (cell != "0" && cell != "1") throw IoError("mask grid cells must be 0 or 1");
      row.push_back(cell == "1" ? 1 : 0);
    }
    if (!grid.empty() && row.size() != grid.front().size())
      throw IoError("ragged mask grid");
    grid.push_back(std::move(row));
  }
  if (grid.empty()) throw IoError("empty mask grid");
  m.num_layers = static_cast<int>(grid.size());
  m.num_heads = static_cast<int>(grid.front().size());
  m.retain.reserve(static_cast<std::size_t>(m.total_heads()));
  int k = 0;
  for (const auto& row : grid)
    for (int v : row) {
      m.retain.push_back(static_cast<std::uint8_t>(v));
      k += v;
    }
  m.k = k;
  m.rho = static_cast<double>(m.total_heads() - k) / m.total_heads();
  return m;
}

inline nlohmann::ordered_json experiment_config_to_json(const ExperimentConfig& cfg);

inline void export_reports(const SweepResult& r, const std::filesystem::path& outdir) {
  if (r.cells.empty()) throw InputError("nothing to export");
  std::error_code ec;
  std::filesystem::create_directories(outdir, ec);
  if (ec) throw IoError("cannot create output directory '" + outdir.string() + "'");

  write_file(outdir / "curve.csv", curve_csv(r));

  const std::vector<std::string> metrics = {"his", "ae", "ad", "his_hat", "ae_hat", "hies"};
  for (std::size_t si = 0; si < r.scores.size(); ++si)
    for (const auto& metric : metrics)
      write_file(outdir / ("heatmap_" + metric + "_seed" + std::to_string(r.seeds[si]) + ".csv"),
                 heatmap_csv(r.scores[si], metric));

  for (const auto& c : r.cells) {
    if (c.ratio == 0.0) continue;
    write_file(outdir / ("mask_" + c.criterion + "_r" + fmt_double(c.ratio) + "_seed" +
                         std::to_string(c.seed) + ".csv"),
               mask_grid_csv(c.mask));
  }

  nlohmann::ordered_json summary;
  summary["config"] = experiment_config_to_json(r.cfg);
  auto refs = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < r.seeds.size(); ++i)
    refs.push_back({{"seed", r.seeds[i]}, {"accuracy", r.ref_accuracy[i]}});
  summary["reference"] = refs;
  auto cells = nlohmann::ordered_json::object();
  for (const auto& c : r.cells) {
    const std::string key = c.criterion + "/r" + fmt_double(c.ratio);
    if (!cells.contains(key))
      cells[key] = {{"accuracy", 0.0}, {"stability", 0.0}, {"risk", 0.0}, {"count", 0}};
    auto& agg = cells[key];
    const int n = agg["count"].get<int>() + 1;
    agg["accuracy"] = agg["accuracy"].get<double>() + (c.accuracy - agg["accuracy"].get<double>()) / n;
    agg["stability"] =
        agg["stability"].get<double>() + (c.stability - agg["stability"].get<double>()) / n;
    agg["risk"] = agg["risk"].get<double>() + (c.risk - agg["risk"].get<double>()) / n;
    agg["count"] = n;
  }
  summary["mean_over_seeds"] = cells;
  write_file(outdir / "summary.json", summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Experiment config JSON (the single-file CLI input).
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json experiment_config_to_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["model"] = {{"num_layers", cfg.model.num_layers},
                {"num_heads", cfg.model.num_heads},
                {"d_model", cfg.model.d_model},
                {"d_k", cfg.model.d_k},
                {"d_v", cfg.model.d_v},
                {"num_classes", cfg.model.num_classes},
                {"max_seq_len", cfg.model.max_seq_len},
                {"vocab_size", cfg.model.vocab_size},
                {"loss_kind", cfg.model.loss_kind == LossKind::binary ? "binary" : "multiclass"},
                {"seed", cfg.model.seed},
                {"linear_head", cfg.model.linear_head}};
  j["task"] = {{"kind", task_kind_name(cfg.task.kind)},
               {"vocab_size", cfg.task.vocab_size},
               {"min_len", cfg.task.min_len},
               {"max_len", cfg.task.max_len},
               {"num_classes", cfg.task.num_classes},
               {"seed", cfg.task.seed}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"lr", cfg.train.lr}};
  j["criteria"] = cfg.criteria;
  j["ratios"] = cfg.ratios;
  j["seeds"] = cfg.seeds;
  j["alpha"] = cfg.alpha;
  j["norm_scope"] = norm_scope_name(cfg.scope);
  j["calib_size"] = cfg.calib_size;
  j["n_train"] = cfg.n_train;
  j["n_eval"] = cfg.n_eval;
  j["alpha_grid"] = cfg.alpha_grid;
  j["wauc_weights"] = cfg.wauc_weights;
  j["threads"] = cfg.threads;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    cfg.model.num_layers = m.value("num_layers", cfg.model.num_layers);
    cfg.model.num_heads = m.value("num_heads", cfg.model.num_heads);
    cfg.model.d_model = m.value("d_model", cfg.model.d_model);
    cfg.model.d_k = m.value("d_k", cfg.model.d_k);
    cfg.model.d_v = m.value("d_v", cfg.model.d_v);
    cfg.model.num_classes = m.value("num_classes", cfg.model.num_classes);
    cfg.model.max_seq_len = m.value("max_seq_len", cfg.model.max_seq_len);
    cfg.model.vocab_size = m.value("vocab_size", cfg.model.vocab_size);
    if (m.contains("loss_kind")) {
      const std::string kind = m.at("loss_kind").get<std::string>();
      if (kind == "binary") cfg.model.loss_kind = LossKind::binary;
      else if (kind == "multiclass") cfg.model.loss_kind = LossKind::multiclass;
      else throw ConfigError("unknown loss_kind '" + kind + "'");
    }
    cfg.model.seed = m.value("seed", cfg.model.seed);
    cfg.model.linear_head = m.value("linear_head", cfg.model.linear_head);
  }
  if (j.contains("task")) {
    const auto& t = j.at("task");
    if (t.contains("kind")) cfg.task.kind = task_kind_from_name(t.at("kind").get<std::string>());
    cfg.task.vocab_size = t.value("vocab_size", cfg.task.vocab_size);
    cfg.task.min_len = t.value("min_len", cfg.task.min_len);
    cfg.task.max_len = t.value("max_len", cfg.task.max_len);
    cfg.task.num_classes = t.value("num_classes", cfg.task.num_classes);
    cfg.task.seed = t.value("seed", cfg.task.seed);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.lr = t.value("lr", cfg.train.lr);
  }
  cfg.criteria = j.value("criteria", cfg.criteria);
  cfg.ratios = j.value("ratios", cfg.ratios);
  cfg.seeds = j.value("seeds", cfg.seeds);
  cfg.alpha = j.value("alpha", cfg.alpha);
  if (j.contains("norm_scope"))
    cfg.scope = norm_scope_from_name(j.at("norm_scope").get<std::string>());
  cfg.calib_size = j.value("calib_size", cfg.calib_size);
  cfg.n_train = j.value("n_train", cfg.n_train);
  cfg.n_eval = j.value("n_eval", cfg.n_eval);
  cfg.alpha_grid = j.value("alpha_grid", cfg.alpha_grid);
  cfg.wauc_weights = j.value("wauc_weights", cfg.wauc_weights);
  cfg.threads = j.value("threads", cfg.threads);
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed config '" + path + "': " + e.what());
  }
  ExperimentConfig cfg = experiment_config_from_json(j);
  // Environment override for the root seed.
  if (const char* env = std::getenv("HIES_SEED")) {
    try {
      cfg.model.seed = std::stoull(env);
    } catch (...) {
      throw ConfigError("HIES_SEED must be an unsigned integer");
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace hies
