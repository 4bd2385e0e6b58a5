#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "hies/harness.hpp"

using namespace hies;
namespace fs = std::filesystem;

namespace {

SyntheticTask small_task(TaskKind kind, std::uint64_t seed = 7) {
  SyntheticTask t;
  t.kind = kind;
  t.vocab_size = 12;
  t.min_len = 4;
  t.max_len = 8;
  t.num_classes = 2;
  t.seed = seed;
  return t;
}

int rule_label(const SyntheticTask& t, const Example& ex) {
  // recompute the task rule from raw tokens (CLS at position 0)
  switch (t.kind) {
    case TaskKind::majority: {
      std::vector<int> counts(t.num_classes, 0);
      for (std::size_t i = 1; i < ex.tokens.size(); ++i) {
        const int tok = ex.tokens[i];
        if (tok >= 2 && tok < 2 + t.num_classes) ++counts[tok - 2];
      }
      int best = 0;
      for (int c = 1; c < t.num_classes; ++c)
        if (counts[c] > counts[best]) best = c;
      return best;
    }
    case TaskKind::needle: {
      for (std::size_t i = 1; i + 1 < ex.tokens.size(); ++i)
        if (ex.tokens[i] == SyntheticTask::kMark) return ex.tokens[i + 1] - 2;
      return -1;
    }
    case TaskKind::parity: {
      int count = 0;
      for (std::size_t i = 1; i < ex.tokens.size(); ++i)
        if (ex.tokens[i] == SyntheticTask::kMark) ++count;
      return count % 2;
    }
  }
  return -1;
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig cfg;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 4;
  cfg.model.d_model = 16;
  cfg.model.d_k = 4;
  cfg.model.d_v = 4;
  cfg.model.vocab_size = 12;
  cfg.model.max_seq_len = 12;
  cfg.task = small_task(TaskKind::majority);
  cfg.train.epochs = 2;
  cfg.n_train = 192;
  cfg.calib_size = 32;
  cfg.n_eval = 64;
  cfg.seeds = {1};
  cfg.ratios = {0.5};
  cfg.criteria = {"hies", "random"};
  cfg.alpha_grid = {0.0, 0.5};
  return cfg;
}

}  // namespace

TEST(Tasks, RulesHoldOnEveryGeneratedExample) {
  for (TaskKind kind : {TaskKind::majority, TaskKind::needle, TaskKind::parity}) {
    const SyntheticTask t = small_task(kind);
    auto [train, eval] = gen_task(t, 200, 50);
    for (const Dataset* d : {&train, &eval}) {
      for (const auto& ex : d->items) {
        EXPECT_EQ(ex.tokens[0], SyntheticTask::kCls);
        EXPECT_EQ(rule_label(t, ex), ex.label) << task_kind_name(kind);
        EXPECT_GE(static_cast<int>(ex.tokens.size()), t.min_len + 1);
        EXPECT_LE(static_cast<int>(ex.tokens.size()), t.max_len + 1);
      }
    }
  }
}

TEST(Tasks, HandPickedRuleExamples) {
  // majority [a,a,b] -> a; needle [x, MARK, c2, y] -> class 2
  SyntheticTask t = small_task(TaskKind::majority);
  t.num_classes = 3;
  Example maj;
  maj.tokens = {SyntheticTask::kCls, 2, 2, 3};
  EXPECT_EQ(rule_label(t, maj), 0);
  SyntheticTask needle = small_task(TaskKind::needle);
  needle.num_classes = 3;
  Example ndl;
  ndl.tokens = {SyntheticTask::kCls, 7, SyntheticTask::kMark, 4, 8};
  EXPECT_EQ(rule_label(needle, ndl), 2);
}

TEST(Tasks, ClassBalanceWithinFivePercent) {
  const SyntheticTask t = small_task(TaskKind::needle);
  auto [train, eval] = gen_task(t, 1000, 200);
  std::map<int, int> counts;
  for (const auto& ex : train.items) ++counts[ex.label];
  for (const auto& [label, n] : counts)
    EXPECT_NEAR(static_cast<double>(n) / train.size(), 0.5, 0.05);
}

TEST(Tasks, DeterministicPerSeed) {
  const SyntheticTask t = small_task(TaskKind::parity);
  auto [a_train, a_eval] = gen_task(t, 64, 16);
  auto [b_train, b_eval] = gen_task(t, 64, 16);
  ASSERT_EQ(a_train.size(), b_train.size());
  for (std::size_t i = 0; i < a_train.size(); ++i) {
    EXPECT_EQ(a_train.items[i].tokens, b_train.items[i].tokens);
    EXPECT_EQ(a_train.items[i].label, b_train.items[i].label);
  }
}

TEST(Tasks, InfeasibleSpecRejected) {
  SyntheticTask t = small_task(TaskKind::needle);
  t.vocab_size = 4;  // no room for a filler
  EXPECT_THROW(gen_task(t, 8, 8), ConfigError);
  SyntheticTask p = small_task(TaskKind::parity);
  p.num_classes = 3;
  EXPECT_THROW(gen_task(p, 8, 8), ConfigError);
}

TEST(Stability, IdentityIsExactlyOne) {
  std::vector<int> preds = {0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(stability_from_preds(preds, preds), 1.0);
}

TEST(Stability, CountingCase) {
  EXPECT_DOUBLE_EQ(stability_from_preds({0, 1, 1, 0}, {0, 1, 1, 1}), 0.75);
}

TEST(Stability, RandomGuessNearHalf) {
  std::mt19937_64 rng(61);
  std::vector<int> reference(1000), guess(1000);
  for (int i = 0; i < 1000; ++i) {
    reference[i] = i % 2;
    guess[i] = static_cast<int>(rng() % 2);
  }
  EXPECT_NEAR(stability_from_preds(guess, reference), 0.5, 0.1);
}

TEST(Stability, EmptyEvalRejected) {
  EXPECT_THROW(stability_from_preds({}, {}), InputError);
}

TEST(Sweep, AnchorRowsAndRiskOptimality) {
  const ExperimentConfig cfg = tiny_experiment();
  const SweepResult r = run_sweep(cfg);
  ASSERT_FALSE(r.cells.empty());
  std::map<std::pair<std::string, double>, SweepCell> by_key;
  for (const auto& c : r.cells) by_key[{c.criterion, c.ratio}] = c;

  for (const auto& criterion : cfg.criteria) {
    const SweepCell& anchor = by_key.at({criterion, 0.0});
    EXPECT_DOUBLE_EQ(anchor.accuracy, r.ref_accuracy[0]);
    EXPECT_DOUBLE_EQ(anchor.stability, 1.0);
    EXPECT_DOUBLE_EQ(anchor.risk, 0.0);
  }

  const SweepCell& hies_cell = by_key.at({"hies", 0.5});
  const SweepCell& random_cell = by_key.at({"random", 0.5});
  EXPECT_LE(hies_cell.risk, random_cell.risk + 1e-12);
}

TEST(Sweep, UntrainedModelRejected) {
  const ExperimentConfig cfg = tiny_experiment();
  std::vector<TrainedRun> runs(1);  // never trained
  EXPECT_THROW(run_sweep(cfg, runs), ConfigError);
}

TEST(Sweep, RatioValidation) {
  ExperimentConfig cfg = tiny_experiment();
  cfg.ratios = {0.5, 0.25};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.ratios = {0.0};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(AlphaSweep, SinglePointGridSelectsIt) {
  ExperimentConfig cfg = tiny_experiment();
  cfg.alpha_grid = {0.3};
  const AlphaSweepResult r = alpha_sweep(cfg);
  EXPECT_DOUBLE_EQ(r.alpha_best, 0.3);
  EXPECT_DOUBLE_EQ(r.alpha_median, 0.3);
  EXPECT_DOUBLE_EQ(r.alpha_worst, 0.3);
}

TEST(AlphaSweep, ReproducibleAcrossRuns) {
  ExperimentConfig cfg = tiny_experiment();
  cfg.alpha_grid = {0.0, 0.5, 0.9};
  const AlphaSweepResult a = alpha_sweep(cfg);
  const AlphaSweepResult b = alpha_sweep(cfg);
  EXPECT_EQ(a.alpha_best, b.alpha_best);
  for (std::size_t i = 0; i < a.wauc.size(); ++i) EXPECT_EQ(a.wauc[i], b.wauc[i]);
}

TEST(AlphaSweep, UniformWaucIsMeanAccuracy) {
  ExperimentConfig cfg = tiny_experiment();
  cfg.ratios = {0.25, 0.5};
  const AlphaSweepResult r = alpha_sweep(cfg);
  for (std::size_t ai = 0; ai < r.alphas.size(); ++ai) {
    double mean = 0.0;
    for (double a : r.accuracy[ai]) mean += a / r.accuracy[ai].size();
    EXPECT_NEAR(r.wauc[ai], mean, 1e-12);
  }
}

TEST(AlphaSweep, WeightedArithmetic) {
  // wauc must be the normalized weighted sum of the per-ratio accuracies.
  ExperimentConfig cfg = tiny_experiment();
  cfg.ratios = {0.25, 0.5};
  cfg.wauc_weights = {3.0, 1.0};
  const AlphaSweepResult r = alpha_sweep(cfg);
  for (std::size_t ai = 0; ai < r.alphas.size(); ++ai)
    EXPECT_NEAR(r.wauc[ai], 0.75 * r.accuracy[ai][0] + 0.25 * r.accuracy[ai][1], 1e-12);
}

TEST(AlphaSweep, HighAlphaMatchesHisMask) {
  ExperimentConfig cfg = tiny_experiment();
  const std::vector<TrainedRun> runs = prepare_runs(cfg);
  const TrainedRun& run = runs[0];
  const ScoreTable his_like = score_table_from_raw(run.stats.his, run.stats.ae, 1, 4,
                                                   1.0 - 1e-12, NormScope::global, 1);
  const PruneMask a = select_topk(his_like.column("hies"), 1, 4, 2);
  const PruneMask b = select_topk(his_like.column("his"), 1, 4, 2);
  EXPECT_EQ(a.retain, b.retain);
}

TEST(Exports, FilesHeatmapsAndMaskRoundTrip) {
  const ExperimentConfig cfg = tiny_experiment();
  const SweepResult r = run_sweep(cfg);
  const fs::path dir = fs::temp_directory_path() / "hies_export_test";
  fs::remove_all(dir);
  export_reports(r, dir);

  EXPECT_TRUE(fs::exists(dir / "curve.csv"));
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "heatmap_hies_seed1.csv"));

  std::ifstream heat(dir / "heatmap_hies_seed1.csv");
  std::string line;
  int rows = 0, cols = 0;
  while (std::getline(heat, line)) {
    ++rows;
    cols = 1 + static_cast<int>(std::count(line.begin(), line.end(), ','));
  }
  EXPECT_EQ(rows, cfg.model.num_layers);
  EXPECT_EQ(cols, cfg.model.num_heads);

  for (const auto& c : r.cells) {
    if (c.ratio == 0.0) continue;
    const fs::path mp =
        dir / ("mask_" + c.criterion + "_r" + fmt_double(c.ratio) + "_seed1.csv");
    ASSERT_TRUE(fs::exists(mp)) << mp;
    std::ifstream in(mp);
    std::stringstream ss;
    ss << in.rdbuf();
    const PruneMask back = mask_from_grid_csv(ss.str());
    EXPECT_EQ(back, c.mask);
  }
  fs::remove_all(dir);
}

TEST(Exports, ByteIdenticalAcrossRuns) {
  const ExperimentConfig cfg = tiny_experiment();
  const fs::path a = fs::temp_directory_path() / "hies_det_a";
  const fs::path b = fs::temp_directory_path() / "hies_det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  export_reports(run_sweep(cfg), a);
  export_reports(run_sweep(cfg), b);
  for (const auto& entry : fs::directory_iterator(a)) {
    std::ifstream fa(entry.path(), std::ios::binary);
    std::ifstream fb(b / entry.path().filename(), std::ios::binary);
    ASSERT_TRUE(fb.good()) << entry.path().filename();
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    EXPECT_EQ(sa.str(), sb.str()) << entry.path().filename();
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Config, JsonRoundTripAndSeedOverride) {
  ExperimentConfig cfg = tiny_experiment();
  cfg.model.seed = 17;
  const nlohmann::ordered_json j = experiment_config_to_json(cfg);
  const ExperimentConfig back = experiment_config_from_json(j);
  EXPECT_EQ(back.model.seed, 17u);
  EXPECT_EQ(back.criteria, cfg.criteria);
  EXPECT_EQ(back.ratios, cfg.ratios);
  EXPECT_EQ(back.task.kind, cfg.task.kind);

  const fs::path p = fs::temp_directory_path() / "hies_cfg_test.json";
  write_file(p, j.dump());
  setenv("HIES_SEED", "12345", 1);
  const ExperimentConfig loaded = load_experiment_config(p.string());
  unsetenv("HIES_SEED");
  EXPECT_EQ(loaded.model.seed, 12345u);
  fs::remove(p);
}

TEST(Config, ConsistencyChecks) {
  ExperimentConfig cfg = tiny_experiment();
  cfg.task.vocab_size = 20;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_experiment();
  cfg.model.max_seq_len = 6;  // < max_len + 1
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, MajorityTaskReachesDeskScaleAccuracy) {
  ExperimentConfig cfg;
  cfg.model.num_layers = 2;
  cfg.model.num_heads = 4;
  cfg.model.d_model = 32;
  cfg.model.d_k = 8;
  cfg.model.d_v = 8;
  cfg.model.vocab_size = 16;
  cfg.model.max_seq_len = 24;
  cfg.task.kind = TaskKind::majority;
  cfg.task.vocab_size = 16;
  cfg.task.min_len = 8;
  cfg.task.max_len = 16;
  cfg.train.epochs = 4;
  cfg.n_train = 2000;
  cfg.calib_size = 128;
  cfg.n_eval = 500;
  const TrainedRun run = prepare_run(cfg, 1);
  EXPECT_GE(run.ref_accuracy, 0.95);
}

TEST(Sweep, ThreadedRunsMatchSequential) {
  ExperimentConfig cfg = tiny_experiment();
  cfg.seeds = {1, 2};
  cfg.threads = 1;
  const SweepResult seq = run_sweep(cfg);
  cfg.threads = 2;
  const SweepResult par = run_sweep(cfg);
  ASSERT_EQ(seq.cells.size(), par.cells.size());
  for (std::size_t i = 0; i < seq.cells.size(); ++i) {
    EXPECT_EQ(seq.cells[i].accuracy, par.cells[i].accuracy);
    EXPECT_EQ(seq.cells[i].stability, par.cells[i].stability);
    EXPECT_EQ(seq.cells[i].mask.retain, par.cells[i].mask.retain);
  }
}
