// Command-line front end. Talks to the engine only through the C interface.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dinet/dinet.h"

namespace fs = std::filesystem;

namespace {

struct Failure {
  dinet_status status;
  std::string message;
};

void check(dinet_status s) {
  if (s != DINET_OK) throw Failure{s, dinet_last_error()};
}

[[noreturn]] void usage_error(dinet_status s, const std::string& message) { throw Failure{s, message}; }

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using ConfigPtr = std::unique_ptr<dinet_config, Deleter<dinet_config, dinet_config_free>>;
using DatasetPtr = std::unique_ptr<dinet_dataset, Deleter<dinet_dataset, dinet_dataset_free>>;
using RunPtr = std::unique_ptr<dinet_run, Deleter<dinet_run, dinet_run_free>>;

struct ConfigFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Global seed (overrides the config file)");
    app->add_option("--set", overrides, "Override a config value, e.g. --set train.epochs=3")->take_all();
  }

  bool given() const { return !config_path.empty() || seed || !overrides.empty(); }

  // Precedence: flags > file > defaults.
  ConfigPtr build() const {
    dinet_config* raw = nullptr;
    check(config_path.empty() ? dinet_config_create(&raw) : dinet_config_load(config_path.c_str(), &raw));
    ConfigPtr cfg(raw);
    for (const auto& o : overrides) check(dinet_config_set(cfg.get(), o.c_str()));
    if (seed) check(dinet_config_set_seed(cfg.get(), *seed));
    return cfg;
  }
};

// Refuses to write into a non-empty directory unless forced.
void prepare_out(const std::string& out, bool force, bool allow_existing = false) {
  std::error_code ec;
  if (fs::exists(out, ec) && !fs::is_empty(out, ec) && !force && !allow_existing) {
    usage_error(DINET_ERR_ALREADY_EXISTS, "output directory " + out + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(out, ec);
  if (!fs::is_directory(out, ec)) usage_error(DINET_ERR_IO, "cannot create output directory " + out);
}

std::string path_in(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

DatasetPtr load_data(const std::string& dir) {
  if (!fs::is_directory(dir)) usage_error(DINET_ERR_IO, "data directory " + dir + " does not exist");
  dinet_dataset* raw = nullptr;
  check(dinet_dataset_load(dir.c_str(), &raw));
  return DatasetPtr(raw);
}

void print_metrics(const dinet_metrics& m) {
  std::printf("source top-1 %.4f\ntarget top-1 %.4f\n", m.source_top1, m.target_top1);
  if (m.has_domain_probe) std::printf("domain probe %.4f\n", m.domain_probe);
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  ConfigFlags config;
  std::string out;
  bool force = false;
};

int cmd_generate(const GenerateArgs& a) {
  auto cfg = a.config.build();
  prepare_out(a.out, a.force);
  dinet_dataset* raw = nullptr;
  check(dinet_dataset_generate(cfg.get(), &raw));
  DatasetPtr data(raw);
  check(dinet_dataset_save(data.get(), a.out.c_str()));
  check(dinet_config_save(cfg.get(), path_in(a.out, "config.json").c_str()));
  dinet_dataset_counts c{};
  check(dinet_dataset_counts_get(data.get(), &c));
  const std::size_t total = c.train_source + c.train_target + c.test_source + c.test_target;
  std::printf("wrote %zu clips (%zu classes) to %s\n", total, c.num_classes, a.out.c_str());
  std::printf("train: %zu source, %zu target; test: %zu source, %zu target\n", c.train_source, c.train_target,
              c.test_source, c.test_target);
  return 0;
}

struct TrainArgs {
  ConfigFlags config;
  std::string data;
  std::string out;
  std::string mode;
  std::string resume;
  std::size_t max_steps = 0;
  std::size_t log_every = 60;
  bool force = false;
  bool no_eval = false;
};

void log_step(const dinet_step_info* s, void* user) {
  const auto every = *static_cast<std::size_t*>(user);
  if (every == 0 || ((s->step + 1) % every != 0 && s->step + 1 != s->total_steps)) return;
  std::printf("step %zu/%zu epoch %zu  L_a %.5f  L_d %.5f  lambda %.4f  lr %.6f\n", s->step + 1, s->total_steps,
              s->epoch, s->loss_action, s->loss_domain, s->lambda, s->lr);
  std::fflush(stdout);
}

int cmd_train(const TrainArgs& a) {
  ConfigPtr cfg;
  if (a.resume.empty() || a.config.given() || !a.mode.empty()) {
    cfg = a.config.build();
    if (!a.mode.empty()) check(dinet_config_set(cfg.get(), ("train.mode=" + a.mode).c_str()));
  }
  auto data = load_data(a.data);
  prepare_out(a.out, a.force, !a.resume.empty());

  const std::string ckpt = path_in(a.out, "checkpoint.bin");
  dinet_train_options opts;
  dinet_train_options_init(&opts);
  opts.resume_path = a.resume.empty() ? nullptr : a.resume.c_str();
  opts.checkpoint_path = ckpt.c_str();
  opts.stop_after_step = a.max_steps;
  opts.on_step = log_step;
  std::size_t every = a.log_every;
  opts.user = &every;
  dinet_run* raw = nullptr;
  check(dinet_train(cfg.get(), data.get(), &opts, &raw));
  RunPtr run(raw);

  dinet_config* effective = nullptr;
  check(dinet_run_config(run.get(), &effective));
  ConfigPtr eff(effective);
  check(dinet_config_save(eff.get(), path_in(a.out, "config.json").c_str()));
  check(dinet_run_write_history(run.get(), path_in(a.out, "history.csv").c_str()));
  check(dinet_run_write_batch_hashes(run.get(), path_in(a.out, "batch_hashes.csv").c_str()));

  std::size_t step = 0, total = 0;
  check(dinet_run_progress(run.get(), &step, &total));
  dinet_step_info last{};
  if (step > 0) {
    check(dinet_run_last_step(run.get(), &last));
    std::printf("final losses: L_a %.6f  L_d %.6f  objective %.6f\n", last.loss_action, last.loss_domain,
                last.objective);
  }
  std::printf("completed %zu of %zu steps; checkpoint %s\n", step, total, ckpt.c_str());
  if (step == total && !a.no_eval) {
    dinet_metrics m{};
    check(dinet_evaluate(run.get(), data.get(), 1, a.out.c_str(), &m));
    print_metrics(m);
  }
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  bool force = false;
  bool no_probe = false;
};

int cmd_eval(const EvalArgs& a) {
  dinet_run* raw = nullptr;
  check(dinet_run_load(a.checkpoint.c_str(), &raw));
  RunPtr run(raw);
  auto data = load_data(a.data);
  prepare_out(a.out, a.force);
  dinet_metrics m{};
  check(dinet_evaluate(run.get(), data.get(), a.no_probe ? 0 : 1, a.out.c_str(), &m));
  print_metrics(m);
  return 0;
}

struct GradCheckArgs {
  std::string scope = "ops";
  std::size_t configs = 20;
  std::uint64_t seed = 1;
  bool inject_fault = false;
};

void print_op(const char* op, size_t configs, double max_error, int passed, void*) {
  std::printf("%-24s configs %3zu  max rel error %.3e  %s\n", op, configs, max_error, passed ? "ok" : "FAIL");
}

int cmd_grad_check(const GradCheckArgs& a) {
  dinet_grad_check_options opts;
  dinet_grad_check_options_init(&opts);
  opts.configs_per_op = a.configs;
  opts.seed = a.seed;
  opts.inject_conv_fault = a.inject_fault ? 1 : 0;
  opts.on_result = print_op;
  check(dinet_grad_check(a.scope.c_str(), &opts));
  std::printf("all gradients within tolerance\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adversarial 3D convolutional action recognition"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dinet_version());

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "Render the synthetic day/night dataset");
  gen.config.add_to(g);
  g->add_option("--out", gen.out, "Dataset directory")->required();
  g->add_flag("--force", gen.force, "Write into a non-empty directory");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model (adversarial or source-only)");
  tr.config.add_to(t);
  t->add_option("--data", tr.data, "Dataset directory from generate-data")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--mode", tr.mode, "dann or source-only")->check(CLI::IsMember({"dann", "source-only", "source_only"}));
  t->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--max-steps", tr.max_steps, "Stop after this many steps in total (checkpoint is kept)");
  t->add_option("--log-every", tr.log_every, "Print losses every N steps (0 = quiet)");
  t->add_flag("--force", tr.force, "Write into a non-empty directory");
  t->add_flag("--no-eval", tr.no_eval, "Skip the evaluation after training");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--out", ev.out, "Report directory")->required();
  e->add_flag("--force", ev.force, "Write into a non-empty directory");
  e->add_flag("--no-probe", ev.no_probe, "Skip the post-hoc domain probe");

  GradCheckArgs gc;
  auto* c = app.add_subcommand("grad-check", "Finite-difference gradient checks in double precision");
  c->add_option("--scope", gc.scope, "ops or model")->check(CLI::IsMember({"ops", "model"}));
  c->add_option("--configs", gc.configs, "Random configurations per op");
  c->add_option("--seed", gc.seed, "Seed for the random configurations");
  c->add_flag("--inject-fault", gc.inject_fault, "Sign-flip the conv3d input gradient (checker self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*c) return cmd_grad_check(gc);
  } catch (const Failure& f) {
    std::fflush(stdout);
    std::fprintf(stderr, "error: %s: %s\n", dinet_status_name(f.status), f.message.c_str());
    return 1;
  }
  return 0;
}
