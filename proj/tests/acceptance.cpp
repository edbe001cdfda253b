// Acceptance suite: one PASS/FAIL line per criterion. Usage:
//   acceptance <path-to-dinet-cli> [--only N[,N...]] [--work DIR]
// Criterion 7 runs six full training runs on the default task and dominates
// the runtime (roughly a quarter of an hour on one core).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "conv_oracle.hpp"
#include "dinet/checkpoint.hpp"
#include "dinet/config.hpp"
#include "dinet/eval.hpp"

using namespace dinet;
namespace fs = std::filesystem;

namespace {

std::string g_cli;
fs::path g_work;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + g_cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

bool criterion_2() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto log = g_work / "grad_check.log";
  const int rc = run_cli("grad-check --scope ops --configs 20", log);
  const double secs = seconds_since(t0);
  const auto text = slurp(log);
  std::istringstream lines(text);
  std::set<std::string> seen;
  bool enough_configs = true;
  for (std::string line; std::getline(lines, line);) {
    std::istringstream ls(line);
    std::string op, word;
    std::size_t configs = 0;
    if (ls >> op >> word >> configs && word == "configs") {
      seen.insert(op);
      enough_configs = enough_configs && configs >= 20;
      note("%s", line.c_str());
    }
  }
  bool covered = true;
  for (const char* op : {"conv3d", "batchnorm3d", "max_pool3d", "avg_pool3d", "global_avg_pool", "linear",
                         "softmax_cross_entropy", "binary_cross_entropy", "gradient_reversal"}) {
    if (!seen.count(op)) {
      note("missing op %s", op);
      covered = false;
    }
  }
  note("exit %d, %.1f s", rc, secs);
  return rc == 0 && covered && enough_configs && secs <= 120.0;
}

template <typename T>
double conv_oracle_worst(std::mt19937_64& rng, std::size_t configs) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto fill = [&](Tensor<T>& t) {
    for (auto& v : t.mutable_data()) v = static_cast<T>(u(rng));
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < configs; ++i) {
    const std::size_t groups = pick(1, 3);
    const std::size_t cin = groups * pick(1, 3), cout = groups * pick(1, 3);
    Triple k, s, p, e;
    for (int d = 0; d < 3; ++d) {
      k[d] = pick(1, 3);
      s[d] = pick(1, 2);
      p[d] = pick(0, k[d] - 1);
      e[d] = pick(k[d], k[d] + 5);
    }
    auto layer = Conv3dLayer<T>::create(cin, cout, k, s, p, groups);
    fill(layer.weights);
    fill(layer.bias);
    auto x = Tensor<T>::zeros({pick(1, 2), cin, e[0], e[1], e[2]});
    fill(x);
    const auto act = static_cast<Activation>(pick(0, 3));
    const auto y = conv3d(x, layer, act);
    const auto ref = test::naive_conv3d(x, layer, act);
    if (ref.size() != y.size()) return INFINITY;
    for (std::size_t j = 0; j < ref.size(); ++j) {
      worst = std::max(worst, std::abs(static_cast<double>(y.at(j)) - static_cast<double>(ref[j])));
    }
  }
  return worst;
}

bool criterion_3() {
  std::mt19937_64 rng(2024);
  const double f = conv_oracle_worst<float>(rng, 50);
  const double d = conv_oracle_worst<double>(rng, 50);
  note("50 configs single: max abs diff %.3e (limit 1e-5)", f);
  note("50 configs double: max abs diff %.3e (limit 1e-10)", d);
  return f <= 1e-5 && d <= 1e-10;
}

// Feature-extractor gradient produced by the domain loss alone.
std::vector<double> feature_grad_from_domain(DiNetModel<double>& model, const Tensor<double>& clips,
                                             const std::vector<int>& domains, double lambda, DomainRoute route) {
  auto params = model.all_parameters();
  zero_grads(params);
  {
    Graph<double> g;
    auto features = model.forward_features(clips, BatchNormMode::train);
    backward(binary_cross_entropy_with_logit(model.forward_domain(features, lambda, route),
                                             std::span<const int>(domains)));
  }
  std::vector<double> out;
  for (const auto& p : model.parameters()) {
    if (p.partition == Partition::feature) out.insert(out.end(), p.tensor.grad().begin(), p.tensor.grad().end());
  }
  return out;
}

bool criterion_4() {
  RunConfig rc;
  rc.data.num_classes = 3;
  rc.data.clips_per_class_per_domain = 2;
  rc.data.clip_shape = {1, 8, 16, 16};
  rc.finalize();
  auto model = build_model(rc).convert<double>();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto clips = Tensor<double>::zeros({4, 1, 8, 16, 16});
  for (auto& v : clips.mutable_data()) v = u(rng);
  const std::vector<int> domains{0, 0, 1, 1};

  // Forward: the reversal node passes features through untouched.
  bool forward_ok;
  {
    auto f = model.forward_features(clips, BatchNormMode::eval);
    auto r = gradient_reversal(f, 0.25);
    forward_ok = std::ranges::equal(f.data(), r.data());
  }
  note("reversal forward bitwise identity: %s", forward_ok ? "yes" : "no");
  bool ok = forward_ok;
  const auto plain = feature_grad_from_domain(model, clips, domains, 1.0, DomainRoute::identity);
  for (double lambda : {0.0, 0.25, 1.0}) {
    const auto rev = feature_grad_from_domain(model, clips, domains, lambda, DomainRoute::reversal);
    std::size_t mismatches = 0, nonzero = 0;
    for (std::size_t i = 0; i < rev.size(); ++i) {
      mismatches += rev[i] != -lambda * plain[i];
      nonzero += rev[i] != 0.0;
    }
    note("lambda %.2f: %zu of %zu theta_f entries differ from -lambda*identity; %zu nonzero", lambda, mismatches,
         rev.size(), nonzero);
    ok = ok && mismatches == 0 && (lambda != 0.0 || nonzero == 0);
  }
  return ok;
}

bool criterion_5() {
  TrainConfig tc;
  bool ok = lambda_schedule(0.0) == 0.0;
  const double l1 = lambda_schedule(1.0);
  note("lambda(0) = %.17g, lambda(1) = %.10f", lambda_schedule(0.0), l1);
  ok = ok && std::abs(l1 - 0.9999092) <= 1e-6;
  bool lam_inc = true, lr_dec = true;
  for (int i = 1; i <= 100; ++i) {
    lam_inc = lam_inc && lambda_schedule(i / 100.0) > lambda_schedule((i - 1) / 100.0);
    lr_dec = lr_dec && lr_schedule(i / 100.0, tc) < lr_schedule((i - 1) / 100.0, tc);
  }
  note("lambda strictly increasing on 101 points: %s; lr strictly decreasing: %s", lam_inc ? "yes" : "no",
       lr_dec ? "yes" : "no");
  note("lr(0) = %.17g, base_lr = %.17g", lr_schedule(0.0, tc), tc.base_lr);
  return ok && lam_inc && lr_dec && lr_schedule(0.0, tc) == tc.base_lr;
}

// ---------------------------------------------------------------------------
// Criteria 6, 7 and 9 share the six default-task runs.

struct RunOutcome {
  double source_train = 0, source_test = 0, target_test = 0, probe = 0;
  std::size_t steps = 0, batches_checked = 0;
  MetricsReport report;
};

double top1(DiNetModel<float>& model, const std::vector<Clip>& clips) {
  const auto preds = predict(model, clips);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) hit += preds[i] == *clips[i].action;
  return static_cast<double>(hit) / static_cast<double>(clips.size());
}

RunOutcome run_default(const DatasetSplit& data, std::uint64_t seed, TrainMode mode) {
  RunConfig rc;
  rc.seed = seed;
  rc.train.mode = mode;
  rc.finalize();
  auto model = build_model(rc);
  const auto result = train(model, data, rc.train);
  RunOutcome o;
  o.steps = result.total_steps;
  o.batches_checked = result.batches_checked;
  o.report = evaluate(model, data);
  o.source_train = top1(model, data.train_source);
  o.source_test = o.report.source.top1_accuracy;
  o.target_test = o.report.target.top1_accuracy;
  o.probe = *o.report.domain_probe_accuracy;
  return o;
}

struct PairedResults {
  std::vector<std::pair<RunOutcome, RunOutcome>> runs;  // (source-only, dann) per seed
  std::vector<std::size_t> test_per_class;
  double seconds = 0;
};

PairedResults& paired() {
  static PairedResults r = [] {
    PairedResults out;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t seed : {1, 2, 3}) {
      RunConfig rc;
      rc.seed = seed;
      rc.finalize();
      const auto data = generate_dataset(rc.data);
      if (out.test_per_class.empty()) {
        out.test_per_class.assign(rc.data.num_classes, 0);
        for (const auto& c : data.test_target) ++out.test_per_class[*c.action];
      }
      auto base = run_default(data, seed, TrainMode::source_only);
      auto dann = run_default(data, seed, TrainMode::dann);
      note("seed %llu source-only: src-train %.3f src-test %.3f tgt-test %.3f probe %.3f", (unsigned long long)seed,
           base.source_train, base.source_test, base.target_test, base.probe);
      note("seed %llu dann:        src-train %.3f src-test %.3f tgt-test %.3f probe %.3f  (%.0f s elapsed)",
           (unsigned long long)seed, dann.source_train, dann.source_test, dann.target_test, dann.probe,
           seconds_since(t0));
      out.runs.emplace_back(std::move(base), std::move(dann));
    }
    out.seconds = seconds_since(t0);
    return out;
  }();
  return r;
}

bool criterion_6() {
  auto& p = paired();
  bool ok = true;
  for (const auto& [base, dann] : p.runs) {
    for (const auto* r : {&base, &dann}) ok = ok && r->batches_checked == r->steps && r->steps > 0;
  }
  note("6 full runs, every batch asserted half source / half target in-loop: %s", ok ? "yes" : "no");
  return ok;
}

bool criterion_7() {
  auto& p = paired();
  std::size_t passing = 0;
  for (std::size_t i = 0; i < p.runs.size(); ++i) {
    const auto& [base, dann] = p.runs[i];
    const bool a = base.source_test >= 0.85 && base.target_test <= 0.60;
    const bool b = dann.target_test >= base.target_test + 0.10;
    const bool c = dann.probe < base.probe && dann.probe <= 0.80;
    note("seed %zu: (a) %s  (b) %s [%+.1f points]  (c) %s", i + 1, a ? "pass" : "fail", b ? "pass" : "fail",
         100.0 * (dann.target_test - base.target_test), c ? "pass" : "fail");
    passing += a && b && c;
  }
  bool trainable = true;
  for (const auto& [base, dann] : p.runs) trainable = trainable && base.source_train >= 0.9 && dann.source_train >= 0.9;
  note("seeds satisfying (a)-(c): %zu of 3 (need 2); runtime %.0f s (limit 1200)", passing, p.seconds);
  note("source-train accuracy >= 0.9 in every run: %s", trainable ? "yes" : "no");
  return passing >= 2 && p.seconds <= 1200.0;
}

bool criterion_9() {
  auto& p = paired();
  bool ok = true;
  for (std::size_t i = 0; i < p.runs.size(); ++i) {
    const auto dir = g_work / ("metrics_seed" + std::to_string(i + 1));
    write_report(p.runs[i].second.report, dir);
    const auto reread = read_report(dir);
    const auto cm = read_confusion_csv(dir / "confusion.csv");
    const auto src = read_confusion_csv(dir / "confusion_source.csv");
    ok = ok && reread.target.top1_accuracy == static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
    ok = ok && reread.source.top1_accuracy == static_cast<double>(src.trace()) / static_cast<double>(src.total());
    for (std::size_t k = 0; k < cm.classes(); ++k) {
      ok = ok && cm.row_sum(k) == p.test_per_class[k] && src.row_sum(k) == p.test_per_class[k];
    }
  }
  note("top-1 == trace/sum and row sums == %zu per class in all emitted reports: %s", p.test_per_class.at(0),
       ok ? "yes" : "no");
  return ok;
}

// ---------------------------------------------------------------------------
// Criteria 8 and 10 go through the command-line tool on one epoch of the
// default task.

bool cli_data_ready() {
  static const bool ready = [] {
    const int rc = run_cli("generate-data --force --out \"" + (g_work / "data").string() + "\"", g_work / "gen.log");
    return rc == 0;
  }();
  return ready;
}

std::string train_args(const std::string& out) {
  return "train --data \"" + (g_work / "data").string() + "\" --out \"" + (g_work / out).string() +
         "\" --force --no-eval --log-every 0 --set train.epochs=1";
}

bool criterion_8() {
  if (!cli_data_ready()) return false;
  const int r1 = run_cli(train_args("det_a"), g_work / "det_a.log");
  const int r2 = run_cli(train_args("det_b"), g_work / "det_b.log");
  const auto a = slurp(g_work / "det_a" / "history.csv");
  const auto b = slurp(g_work / "det_b" / "history.csv");
  note("two identical train runs: exit %d/%d, history.csv %zu bytes, identical: %s", r1, r2, a.size(),
       (a == b && !a.empty()) ? "yes" : "no");
  return r1 == 0 && r2 == 0 && !a.empty() && a == b;
}

bool criterion_10() {
  if (!cli_data_ready()) return false;
  if (!fs::exists(g_work / "det_a" / "history.csv")) run_cli(train_args("det_a"), g_work / "det_a.log");
  const int r1 = run_cli(train_args("resume") + " --max-steps 23", g_work / "resume_1.log");
  const int r2 = run_cli("train --data \"" + (g_work / "data").string() + "\" --out \"" +
                             (g_work / "resume").string() + "\" --no-eval --log-every 0 --resume \"" +
                             (g_work / "resume" / "checkpoint.bin").string() + "\"",
                         g_work / "resume_2.log");
  if (r1 != 0 || r2 != 0) {
    note("train exit codes %d/%d", r1, r2);
    return false;
  }
  const auto full = read_history_csv(g_work / "det_a" / "history.csv");
  const auto resumed = read_history_csv(g_work / "resume" / "history.csv");
  double worst = 0.0;
  for (std::size_t i = 0; i < std::min(full.size(), resumed.size()); ++i) {
    worst = std::max({worst, std::abs(full[i].loss_action - resumed[i].loss_action),
                      std::abs(full[i].loss_domain - resumed[i].loss_domain)});
  }
  note("interrupted at step 23 of %zu and resumed: max per-step loss difference %.3e (limit 1e-6)", full.size(),
       worst);
  return full.size() == resumed.size() && !full.empty() && worst <= 1e-6;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <dinet-cli> [--only N,N] [--work DIR]\n", argv[0]);
    return 2;
  }
  g_cli = argv[1];
  std::set<int> only;
  g_work = fs::temp_directory_path() / "dinet_acceptance";
  for (int i = 2; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--only") {
      std::stringstream ss(argv[i + 1]);
      for (std::string n; std::getline(ss, n, ',');) only.insert(std::stoi(n));
    } else if (flag == "--work") {
      g_work = argv[i + 1];
    }
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<int, std::function<bool()>>> criteria = {
      {2, criterion_2}, {3, criterion_3}, {4, criterion_4}, {5, criterion_5}, {6, criterion_6},
      {7, criterion_7}, {8, criterion_8}, {9, criterion_9}, {10, criterion_10},
  };
  const char* titles[] = {"",
                          "",
                          "gradient correctness (grad-check --scope ops)",
                          "conv3d matches the direct-sum oracle",
                          "gradient reversal algebra",
                          "lambda and learning-rate schedules",
                          "half source / half target batches",
                          "adaptation experiment, seeds 1-3",
                          "bitwise deterministic training history",
                          "metrics consistent with confusion matrix",
                          "resume fidelity"};

  if (only.empty() || only.count(1)) {
    std::printf("[criterion 1] NOT REPRODUCIBLE: full-scale accuracy needs external infrared/visible datasets and a "
                "pretrained backbone; covered by criteria 2-10\n");
  }
  int failed = 0;
  for (const auto& [n, fn] : criteria) {
    if (!only.empty() && !only.count(n)) continue;
    std::printf("[criterion %d] %s\n", n, titles[n]);
    std::fflush(stdout);
    bool ok = false;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      note("exception: %s", e.what());
    }
    std::printf("[criterion %d] %s\n", n, ok ? "PASS" : "FAIL");
    std::fflush(stdout);
    failed += !ok;
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
