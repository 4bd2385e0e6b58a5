// Command-line front end: train -> score -> prune -> verify -> diagnose ->
// sweep -> alpha-sweep, with file-mediated scores and masks so each stage can
// run (and be tested) on its own.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hies/analysis.hpp"
#include "hies/checkpoint.hpp"
#include "hies/harness.hpp"

namespace fs = std::filesystem;
using namespace hies;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "'");
}

int print_reports(const std::vector<BoundReport>& reports, const std::string& out_csv) {
  int failures = 0;
  for (const auto& r : reports)
    if (!r.holds) ++failures;
  std::printf("%s: %zu checks, %d violations\n",
              reports.empty() ? "(no reports)" : reports.front().bound_name.c_str(),
              reports.size(), failures);
  if (!out_csv.empty()) write_file(out_csv, bound_reports_csv(reports));
  return failures;
}

ExperimentConfig degenerate_toy_config() {
  ExperimentConfig cfg;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 4;
  cfg.model.d_model = 16;
  cfg.model.d_k = 4;
  cfg.model.d_v = 4;
  cfg.model.vocab_size = 12;
  cfg.model.max_seq_len = 12;
  cfg.model.loss_kind = LossKind::binary;
  cfg.model.linear_head = true;
  cfg.task.kind = TaskKind::majority;
  cfg.task.vocab_size = 12;
  cfg.task.min_len = 4;
  cfg.task.max_len = 8;
  cfg.train.epochs = 3;
  cfg.n_train = 256;
  cfg.calib_size = 64;
  cfg.n_eval = 64;
  return cfg;
}

ExperimentConfig standard_toy_config() {
  ExperimentConfig cfg;
  cfg.model.num_layers = 1;
  cfg.model.num_heads = 4;
  cfg.model.d_model = 16;
  cfg.model.d_k = 4;
  cfg.model.d_v = 4;
  cfg.model.vocab_size = 12;
  cfg.model.max_seq_len = 12;
  cfg.task.kind = TaskKind::majority;
  cfg.task.vocab_size = 12;
  cfg.task.min_len = 4;
  cfg.task.max_len = 8;
  cfg.train.epochs = 4;
  cfg.n_train = 512;
  cfg.calib_size = 64;
  cfg.n_eval = 128;
  return cfg;
}

std::vector<BoundReport> suite_entropy_tv(long trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dim(2, 64);
  std::vector<BoundReport> out;
  out.reserve(static_cast<std::size_t>(trials));
  for (long t = 0; t < trials; ++t) {
    const int n = dim(rng);
    out.push_back(entropy_tv_check(random_simplex(n, rng), random_simplex(n, rng)));
  }
  return out;
}

std::vector<BoundReport> suite_hessian(long trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dim(2, 16);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<BoundReport> out;
  for (long t = 0; t < trials; ++t) {
    const int n = dim(rng);
    const double lam = logit_hessian_norm(random_simplex(n, rng), LossKind::multiclass);
    out.push_back(make_report("hessian-multiclass", lam, 0.5, "n=" + std::to_string(n)));
    const double p = unit(rng);
    out.push_back(make_report("hessian-binary", logit_hessian_norm({p}, LossKind::binary), 0.25,
                              "p=" + fmt_double(p)));
  }
  const double tight = logit_hessian_norm({0.5, 0.5}, LossKind::multiclass);
  out.push_back(make_report("hessian-tightness", std::abs(tight - 0.5), 0.0, "C=2 uniform"));
  return out;
}

std::vector<BoundReport> suite_power_iter(long trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dim(2, 32);
  std::vector<BoundReport> out;
  for (long t = 0; t < trials; ++t) {
    Tensor m = Tensor::matrix(dim(rng), dim(rng));
    fill_uniform(m, rng, -1.0, 1.0);
    std::vector<double> hist;
    power_iteration_norm(m, 200, rng(), &hist);
    double worst_drop = 0.0;
    for (std::size_t i = 1; i < hist.size(); ++i)
      worst_drop = std::max(worst_drop, hist[i - 1] - hist[i]);
    out.push_back(make_report("power-iter-monotone", worst_drop, 0.0, m.shape_str()));
    // Same start vector: the 2M iterates are exactly the M iterates scaled.
    const std::uint64_t s = rng();
    const double est2 = power_iteration_norm(m, 200, s);
    Tensor m2 = m;
    for (auto& v : m2.flat()) v *= 2.0;
    const double scaled = power_iteration_norm(m2, 200, s);
    out.push_back(make_report("power-iter-homogeneity", std::abs(scaled - 2.0 * est2),
                              1e-9 * std::max(1.0, est2), m.shape_str()));
  }
  Tensor d = Tensor::matrix(3, 3);
  d.at(0, 0) = 3.0;
  d.at(1, 1) = 2.0;
  d.at(2, 2) = 1.0;
  out.push_back(make_report("power-iter-diag", std::abs(power_iteration_norm(d, 200, seed) - 3.0),
                            1e-9, "diag(3,2,1)"));
  Tensor z = Tensor::matrix(4, 4);
  out.push_back(make_report("power-iter-zero", power_iteration_norm(z, 50, seed), 0.0, "zero 4x4"));
  return out;
}

std::vector<BoundReport> suite_op_ineq(long trials, std::uint64_t seed) {
  // ||(alpha - alpha')^T V||_2 <= M ||alpha - alpha'||_1 with M the max row norm.
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dim(2, 24);
  std::uniform_int_distribution<int> dv(1, 8);
  std::vector<BoundReport> out;
  for (long t = 0; t < trials; ++t) {
    const int n = dim(rng), d = dv(rng);
    const auto a = random_simplex(n, rng);
    const auto b = random_simplex(n, rng);
    Tensor v = Tensor::matrix(n, d);
    fill_uniform(v, rng, -2.0, 2.0);
    double m = 0.0;
    for (int i = 0; i < n; ++i) {
      double rn = 0.0;
      for (int j = 0; j < d; ++j) rn += v.at(i, j) * v.at(i, j);
      m = std::max(m, std::sqrt(rn));
    }
    double l1 = 0.0;
    for (int i = 0; i < n; ++i) l1 += std::abs(a[i] - b[i]);
    std::vector<double> delta(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) delta[j] += (a[i] - b[i]) * v.at(i, j);
    double l2 = 0.0;
    for (double x : delta) l2 += x * x;
    out.push_back(make_report("attention-output-perturbation", std::sqrt(l2), m * l1,
                              "n=" + std::to_string(n) + ";d_v=" + std::to_string(d)));
  }
  return out;
}

std::vector<BoundReport> suite_loss_bound(std::uint64_t seed) {
  ExperimentConfig cfg = degenerate_toy_config();
  TrainedRun run = prepare_run(cfg, seed);
  const int total = run.model.config().total_heads();
  std::vector<BoundReport> out;
  for (int bits = 0; bits < (1 << total); ++bits) {
    PruneMask mask;
    mask.num_layers = 1;
    mask.num_heads = total;
    mask.retain.assign(static_cast<std::size_t>(total), 0);
    int k = 0;
    for (int h = 0; h < total; ++h)
      if (bits & (1 << h)) {
        mask.retain[h] = 1;
        ++k;
      }
    mask.k = k;
    mask.rho = static_cast<double>(total - k) / total;
    for (BoundNorm norm : {BoundNorm::full, BoundNorm::blockwise})
      out.push_back(verify_loss_bound(run.model, mask, run.calib, CurvatureKind::binary_plugin,
                                      norm));
  }
  return out;
}

std::vector<BoundReport> suite_quad_ratio(std::uint64_t seed) {
  ExperimentConfig cfg = standard_toy_config();
  TrainedRun run = prepare_run(cfg, seed);
  std::vector<BoundReport> out;
  const ScoreTable table = score_table_from_raw(run.stats.his, run.stats.ae, 1,
                                                run.model.config().num_heads, cfg.alpha,
                                                cfg.scope, run.stats.examples);
  for (double rho : {0.25, 0.5}) {
    const int k = k_from_ratio(run.model.config().total_heads(), rho);
    const PruneMask mask = select_topk(table.column("hies"), 1, run.model.config().num_heads, k);
    const QuadRatio qr = quad_ratio(run.model, run.calib, mask, run.model.config().loss_kind);
    out.push_back(make_report("quad-ratio", qr.empirical, qr.bound,
                              "rho=" + fmt_double(rho) + ";g=" + fmt_double(qr.g)));
  }
  return out;
}

std::vector<BoundReport> suite_gap_bound(std::uint64_t seed) {
  ExperimentConfig cfg = standard_toy_config();
  TrainedRun run = prepare_run(cfg, seed);
  const int heads = run.model.config().num_heads;
  std::vector<BoundReport> out;
  for (double rho : {0.25, 0.5}) {
    const int k = k_from_ratio(heads, rho);
    // Pruning the highest-AE heads (retaining the k lowest-AE ones) should
    // give the smaller bound value.
    std::vector<double> neg_ae(run.stats.ae.size());
    for (std::size_t i = 0; i < neg_ae.size(); ++i) neg_ae[i] = -run.stats.ae[i];
    const PruneMask prune_high_ae = select_topk(neg_ae, 1, heads, k);
    const PruneMask prune_low_ae = select_topk(run.stats.ae, 1, heads, k);
    const GapBound high = gap_constant_from_stats(run.stats, prune_high_ae);
    const GapBound low = gap_constant_from_stats(run.stats, prune_low_ae);
    out.push_back(make_report("gap-bound-ordering", high.bound, low.bound,
                              "rho=" + fmt_double(rho)));
  }
  return out;
}

int cmd_verify(const std::string& suite, long trials, std::uint64_t seed, const fs::path& out) {
  if (!out.empty()) ensure_dir(out);
  std::vector<std::pair<std::string, std::vector<BoundReport>>> batches;
  auto want = [&](const std::string& name) { return suite == "all" || suite == name; };
  if (want("entropy-tv")) batches.emplace_back("entropy-tv", suite_entropy_tv(trials, seed));
  if (want("hessian")) batches.emplace_back("hessian", suite_hessian(trials, seed));
  if (want("power-iter"))
    batches.emplace_back("power-iter", suite_power_iter(std::min<long>(trials, 100), seed));
  if (want("op-ineq")) batches.emplace_back("op-ineq", suite_op_ineq(trials, seed));
  if (want("loss-bound")) batches.emplace_back("loss-bound", suite_loss_bound(seed));
  if (want("quad-ratio")) batches.emplace_back("quad-ratio", suite_quad_ratio(seed));
  if (want("gap-bound")) batches.emplace_back("gap-bound", suite_gap_bound(seed));
  if (batches.empty()) throw ConfigError("unknown verify suite '" + suite + "'");

  int failures = 0;
  std::vector<BoundReport> merged;
  for (auto& [name, reports] : batches) {
    int bad = 0;
    for (const auto& r : reports)
      if (!r.holds) ++bad;
    std::printf("[%s] %s: %zu checks, %d violations\n", bad ? "FAIL" : "PASS", name.c_str(),
                reports.size(), bad);
    failures += bad;
    merged.insert(merged.end(), reports.begin(), reports.end());
  }
  if (!out.empty()) write_file(out / "bounds.csv", bound_reports_csv(merged));
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HIES attention-head pruning toolkit"};
  app.require_subcommand(1);

  std::string config_path, model_path, scores_path, out_dir;
  std::string criterion = "hies", suite = "entropy-tv", scope_name = "global";
  std::string projection = "on";
  double ratio = 0.5, alpha = 0.5;
  long trials = 10000;
  std::uint64_t seed = 7;
  int threads = 0;

  auto* c_train = app.add_subcommand("train", "Train a model from an experiment config");
  c_train->add_option("--config", config_path, "experiment config JSON")->required();
  c_train->add_option("--out", out_dir, "output directory")->required();

  auto* c_score = app.add_subcommand("score", "Compute per-head HIS/AE/HIES scores");
  c_score->add_option("--config", config_path, "experiment config JSON")->required();
  c_score->add_option("--model", model_path, "model checkpoint JSON")->required();
  c_score->add_option("--alpha", alpha, "HIES mixing coefficient in [0,1)")
      ->default_val("0.5");
  c_score->add_option("--scope", scope_name, "normalization scope: global|per-layer")
      ->default_val("global");
  c_score->add_option("--out", out_dir, "output directory")->required();

  auto* c_prune = app.add_subcommand("prune", "Build a prune mask from a score file");
  c_prune->add_option("--scores", scores_path, "scores JSONL from `score`")->required();
  c_prune->add_option("--ratio", ratio, "fraction of heads to prune, in [0,1]")->required();
  c_prune->add_option("--criterion", criterion, "hies|his|ad|l2|random")->default_val("hies");
  c_prune->add_option("--alpha", alpha, "HIES mixing coefficient")->default_val("0.5");
  c_prune->add_option("--seed", seed, "seed for the random baseline")->default_val("7");
  c_prune->add_option("--model", model_path, "model checkpoint (needed for l2)");
  c_prune->add_option("--out", out_dir, "output directory")->required();

  auto* c_verify = app.add_subcommand("verify", "Run numerical bound suites");
  c_verify
      ->add_option("--suite", suite,
                   "entropy-tv|hessian|power-iter|op-ineq|loss-bound|quad-ratio|gap-bound|all")
      ->default_val("all");
  c_verify->add_option("--trials", trials, "randomized trial count")->default_val("10000");
  c_verify->add_option("--seed", seed, "root seed")->default_val("7");
  c_verify->add_option("--out", out_dir, "optional output directory for bounds.csv");

  auto* c_diag = app.add_subcommand("diagnose", "Orthogonality diagnostic per head");
  c_diag->add_option("--config", config_path, "experiment config JSON")->required();
  c_diag->add_option("--model", model_path, "model checkpoint (trains one if omitted)");
  c_diag->add_option("--projection", projection, "on|off")->default_val("on");
  c_diag->add_option("--out", out_dir, "output directory")->required();

  auto* c_sweep = app.add_subcommand("sweep", "Full criterion x ratio x seed sweep");
  c_sweep->add_option("--config", config_path, "experiment config JSON")->required();
  c_sweep->add_option("--out", out_dir, "output directory")->required();
  c_sweep->add_option("--threads", threads, "worker cap (overrides config)");

  auto* c_alpha = app.add_subcommand("alpha-sweep", "Alpha sensitivity sweep with wAUC");
  c_alpha->add_option("--config", config_path, "experiment config JSON")->required();
  c_alpha->add_option("--out", out_dir, "output directory")->required();
  c_alpha->add_option("--threads", threads, "worker cap (overrides config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (c_train->parsed()) {
      ExperimentConfig cfg = load_experiment_config(config_path);
      ensure_dir(out_dir);
      GatedTransformer model(cfg.model);
      TaskSplits splits = make_splits(cfg);
      TrainConfig tc = cfg.train;
      TrainStats stats = train(model, splits.train, tc);
      save_checkpoint(model, (fs::path(out_dir) / "model.json").string());
      nlohmann::ordered_json j;
      j["initial_loss"] = stats.initial_loss;
      j["final_loss"] = stats.final_loss;
      j["epoch_loss"] = stats.epoch_loss;
      j["eval_accuracy"] = accuracy(PrunedView::unpruned(model), splits.eval);
      write_file(fs::path(out_dir) / "train_stats.json", j.dump(2) + "\n");
      std::printf("trained: loss %s -> %s, eval accuracy %s\n",
                  fmt_double(stats.initial_loss).c_str(), fmt_double(stats.final_loss).c_str(),
                  fmt_double(j["eval_accuracy"].get<double>()).c_str());
      return 0;
    }

    if (c_score->parsed()) {
      ExperimentConfig cfg = load_experiment_config(config_path);
      GatedTransformer model = load_checkpoint(model_path);
      ensure_dir(out_dir);
      TaskSplits splits = make_splits(cfg);
      const ScoreTable table =
          build_score_table(model, splits.calib, alpha, norm_scope_from_name(scope_name));
      write_file(fs::path(out_dir) / "scores.jsonl", score_table_to_jsonl(table));
      for (const std::string metric : {"his", "ae", "ad", "his_hat", "ae_hat", "hies"})
        write_file(fs::path(out_dir) / ("heatmap_" + metric + ".csv"),
                   heatmap_csv(table, metric));
      std::printf("scored %d heads over %ld calibration examples\n",
                  table.num_layers * table.num_heads, table.calib_size);
      return 0;
    }

    if (c_prune->parsed()) {
      std::ifstream in(scores_path);
      if (!in) throw IoError("cannot open scores '" + scores_path + "'");
      const ScoreTable table = score_table_from_jsonl(in, alpha, NormScope::global);
      const Criterion kind = criterion_from_name(criterion);
      const int total = table.num_layers * table.num_heads;
      const int k = k_from_ratio(total, ratio);
      PruneMask mask;
      if (kind == Criterion::l2) {
        if (model_path.empty()) throw ConfigError("the l2 criterion needs --model");
        GatedTransformer model = load_checkpoint(model_path);
        mask = baseline_mask(kind, &model, nullptr, k, seed);
      } else if (kind == Criterion::random) {
        mask = baseline_mask(kind, nullptr, &table, k, seed);
      } else {
        mask = baseline_mask(kind, nullptr, &table, k, 0);
      }
      ensure_dir(out_dir);
      write_file(fs::path(out_dir) / "mask.json", mask_to_json(mask).dump(2) + "\n");
      std::printf("mask: retained %d of %d heads (rho=%s, risk=%s)\n", mask.k, total,
                  fmt_double(mask.rho).c_str(),
                  fmt_double(risk(table.column("hies"), mask)).c_str());
      return 0;
    }

    if (c_verify->parsed()) return cmd_verify(suite, trials, seed, out_dir);

    if (c_diag->parsed()) {
      ExperimentConfig cfg = load_experiment_config(config_path);
      if (projection != "on" && projection != "off")
        throw ConfigError("--projection must be on or off");
      ensure_dir(out_dir);
      TaskSplits splits = make_splits(cfg);
      std::vector<OrthoDiagnostic> diags;
      if (!model_path.empty()) {
        GatedTransformer model = load_checkpoint(model_path);
        diags = ortho_diagnostic(model, splits.calib, projection == "on");
      } else {
        TrainedRun run = prepare_run(cfg, cfg.model.seed);
        diags = ortho_diagnostic(run.model, run.calib, projection == "on");
      }
      write_file(fs::path(out_dir) / "ortho.jsonl", ortho_to_jsonl(diags));
      int bad = 0;
      for (const auto& d : diags) {
        const double gap = std::abs(d.expected_inner + d.cov_trace + d.mean_dot);
        const bool ok = gap <= 1e-9;
        bad += ok ? 0 : 1;
        std::printf("[%s] layer %d head %d: E<u~,-v~>=%s cov_trace=%s mean_dot=%s identity_gap=%s\n",
                    ok ? "PASS" : "FAIL", d.layer, d.head, fmt_double(d.expected_inner).c_str(),
                    fmt_double(d.cov_trace).c_str(), fmt_double(d.mean_dot).c_str(),
                    fmt_double(gap).c_str());
      }
      return bad == 0 ? 0 : 1;
    }

    if (c_sweep->parsed() || c_alpha->parsed()) {
      ExperimentConfig cfg = load_experiment_config(config_path);
      if (threads > 0) cfg.threads = threads;
      ensure_dir(out_dir);
      std::vector<TrainedRun> runs = prepare_runs(cfg);
      if (c_sweep->parsed()) {
        SweepResult result = run_sweep(cfg, runs);
        export_reports(result, out_dir);
        std::printf("sweep: %zu cells over %zu seeds -> %s\n", result.cells.size(),
                    runs.size(), out_dir.c_str());
      } else {
        AlphaSweepResult result = alpha_sweep(cfg, runs);
        std::ostringstream os;
        os << "alpha,wauc";
        for (double r : cfg.ratios) os << ",acc_r" << fmt_double(r);
        os << "\n";
        for (std::size_t i = 0; i < result.alphas.size(); ++i) {
          os << fmt_double(result.alphas[i]) << "," << fmt_double(result.wauc[i]);
          for (double a : result.accuracy[i]) os << "," << fmt_double(a);
          os << "\n";
        }
        write_file(fs::path(out_dir) / "alpha_wauc.csv", os.str());
        nlohmann::ordered_json j{{"alpha_best", result.alpha_best},
                                 {"alpha_median", result.alpha_median},
                                 {"alpha_worst", result.alpha_worst}};
        write_file(fs::path(out_dir) / "alpha_star.json", j.dump(2) + "\n");
        std::printf("alpha-sweep: best=%s median=%s worst=%s\n",
                    fmt_double(result.alpha_best).c_str(),
                    fmt_double(result.alpha_median).c_str(),
                    fmt_double(result.alpha_worst).c_str());
      }
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
