#include "dinet/dinet.h"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <new>

#include "dinet/checkpoint.hpp"
#include "dinet/config.hpp"
#include "dinet/eval.hpp"
#include "dinet/gradcheck_suite.hpp"

struct dinet_config {
  dinet::RunConfig config;
};

struct dinet_dataset {
  dinet::DatasetSplit split;
};

struct dinet_run {
  dinet::DiNetModel<float> model;
  dinet::TrainProgress progress;
  std::size_t total_steps = 0;
  dinet::RunConfig config;
};

namespace {

thread_local std::string g_last_error;

dinet_status to_status(dinet::ErrorCode code) {
  using dinet::ErrorCode;
  switch (code) {
    case ErrorCode::invalid_argument: return DINET_ERR_INVALID_ARGUMENT;
    case ErrorCode::shape_mismatch: return DINET_ERR_SHAPE_MISMATCH;
    case ErrorCode::io: return DINET_ERR_IO;
    case ErrorCode::corrupt_file: return DINET_ERR_CORRUPT_FILE;
    case ErrorCode::version_mismatch: return DINET_ERR_VERSION_MISMATCH;
    case ErrorCode::detached: return DINET_ERR_DETACHED;
    case ErrorCode::non_finite: return DINET_ERR_NON_FINITE;
    case ErrorCode::diverged: return DINET_ERR_DIVERGED;
    case ErrorCode::already_exists: return DINET_ERR_ALREADY_EXISTS;
    case ErrorCode::grad_check_failed: return DINET_ERR_GRAD_CHECK_FAILED;
  }
  return DINET_ERR_INTERNAL;
}

template <typename F>
dinet_status guard(F&& body) {
  try {
    body();
    g_last_error.clear();
    return DINET_OK;
  } catch (const dinet::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown exception";
  }
  return DINET_ERR_INTERNAL;
}

template <typename P>
void require(const P* p, const char* what) {
  if (p == nullptr) dinet::fail(dinet::ErrorCode::invalid_argument, std::string(what) + " must not be NULL");
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

dinet_step_info step_info(const dinet::LossRecord& r, std::size_t total) {
  return {r.step, total, r.epoch, r.p, r.lambda, r.lr, r.loss_action, r.loss_domain, r.objective};
}

void check_dataset(const dinet::DatasetSplit& split, const dinet::RunConfig& config) {
  if (split.train_source.empty() || split.train_target.empty()) {
    dinet::fail(dinet::ErrorCode::invalid_argument, "dataset has no training clips in one of the domains");
  }
  if (split.class_names.size() != config.model.num_actions) {
    dinet::fail(dinet::ErrorCode::shape_mismatch,
                "dataset has " + std::to_string(split.class_names.size()) + " classes, config expects " +
                    std::to_string(config.model.num_actions));
  }
  const auto& s = config.model.input_shape;
  const std::size_t expected = s[0] * s[1] * s[2] * s[3];
  for (const auto* clips : {&split.train_source, &split.train_target, &split.test_source, &split.test_target}) {
    for (const auto& c : *clips) {
      if (c.video.size() != expected) {
        dinet::fail(dinet::ErrorCode::shape_mismatch,
                    "clip " + c.id + " has " + std::to_string(c.video.size()) + " values, config expects " +
                        std::to_string(expected));
      }
    }
  }
}

}  // namespace

extern "C" {

const char* dinet_last_error(void) { return g_last_error.c_str(); }

const char* dinet_status_name(dinet_status status) {
  switch (status) {
    case DINET_OK: return "ok";
    case DINET_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case DINET_ERR_SHAPE_MISMATCH: return "shape_mismatch";
    case DINET_ERR_IO: return "io";
    case DINET_ERR_CORRUPT_FILE: return "corrupt_file";
    case DINET_ERR_VERSION_MISMATCH: return "version_mismatch";
    case DINET_ERR_DETACHED: return "detached";
    case DINET_ERR_NON_FINITE: return "non_finite";
    case DINET_ERR_DIVERGED: return "diverged";
    case DINET_ERR_ALREADY_EXISTS: return "already_exists";
    case DINET_ERR_GRAD_CHECK_FAILED: return "grad_check_failed";
    case DINET_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* dinet_version(void) { return "0.1.0"; }

// ---------------------------------------------------------------------------
// Configuration

dinet_status dinet_config_create(dinet_config** out) {
  return guard([&] {
    require(out, "out");
    auto c = std::make_unique<dinet_config>();
    c->config.finalize();
    *out = c.release();
  });
}

dinet_status dinet_config_load(const char* path, dinet_config** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    *out = new dinet_config{dinet::RunConfig::load(path)};
  });
}

dinet_status dinet_config_from_json(const char* json, dinet_config** out) {
  return guard([&] {
    require(json, "json");
    require(out, "out");
    *out = new dinet_config{dinet::RunConfig::from_json(json)};
  });
}

dinet_status dinet_config_set(dinet_config* config, const char* assignment) {
  return guard([&] {
    require(config, "config");
    require(assignment, "assignment");
    config->config.apply_override(assignment);
  });
}

dinet_status dinet_config_set_seed(dinet_config* config, uint64_t seed) {
  return guard([&] {
    require(config, "config");
    auto updated = config->config;
    updated.seed = seed;
    updated.finalize();
    config->config = updated;
  });
}

dinet_status dinet_config_seed(const dinet_config* config, uint64_t* seed) {
  return guard([&] {
    require(config, "config");
    require(seed, "seed");
    *seed = config->config.seed;
  });
}

dinet_status dinet_config_hash(const dinet_config* config, uint64_t* hash) {
  return guard([&] {
    require(config, "config");
    require(hash, "hash");
    *hash = config->config.hash();
  });
}

dinet_status dinet_config_to_json(const dinet_config* config, char* buf, size_t capacity, size_t* needed) {
  return guard([&] {
    require(config, "config");
    const auto text = config->config.to_json();
    if (needed) *needed = text.size() + 1;
    if (buf && capacity > text.size()) std::memcpy(buf, text.c_str(), text.size() + 1);
    else if (buf) dinet::fail(dinet::ErrorCode::invalid_argument, "buffer too small for config JSON");
  });
}

dinet_status dinet_config_save(const dinet_config* config, const char* path) {
  return guard([&] {
    require(config, "config");
    require(path, "path");
    std::ofstream os(path);
    if (!os) dinet::fail(dinet::ErrorCode::io, std::string("cannot write ") + path);
    os << config->config.to_json() << '\n';
    if (!os) dinet::fail(dinet::ErrorCode::io, std::string("cannot write ") + path);
  });
}

void dinet_config_free(dinet_config* config) { delete config; }

// ---------------------------------------------------------------------------
// Datasets

dinet_status dinet_dataset_generate(const dinet_config* config, dinet_dataset** out) {
  return guard([&] {
    require(config, "config");
    require(out, "out");
    *out = new dinet_dataset{dinet::generate_dataset(config->config.data)};
  });
}

dinet_status dinet_dataset_save(const dinet_dataset* dataset, const char* dir) {
  return guard([&] {
    require(dataset, "dataset");
    require(dir, "dir");
    dinet::save_dataset(dataset->split, dir);
  });
}

dinet_status dinet_dataset_load(const char* dir, dinet_dataset** out) {
  return guard([&] {
    require(dir, "dir");
    require(out, "out");
    *out = new dinet_dataset{dinet::load_dataset(dir)};
  });
}

dinet_status dinet_dataset_counts_get(const dinet_dataset* dataset, dinet_dataset_counts* out) {
  return guard([&] {
    require(dataset, "dataset");
    require(out, "out");
    const auto& s = dataset->split;
    *out = {s.train_source.size(), s.train_target.size(), s.test_source.size(), s.test_target.size(),
            s.class_names.size()};
  });
}

dinet_status dinet_dataset_check(const dinet_dataset* dataset, const dinet_config* config) {
  return guard([&] {
    require(dataset, "dataset");
    require(config, "config");
    check_dataset(dataset->split, config->config);
  });
}

void dinet_dataset_free(dinet_dataset* dataset) { delete dataset; }

// ---------------------------------------------------------------------------
// Training

void dinet_train_options_init(dinet_train_options* options) {
  if (options) *options = dinet_train_options{};
}

dinet_status dinet_train(const dinet_config* config, const dinet_dataset* dataset, const dinet_train_options* options,
                         dinet_run** out) {
  return guard([&] {
    require(dataset, "dataset");
    require(out, "out");
    dinet_train_options opts{};
    if (options) opts = *options;

    std::unique_ptr<dinet_run> run;
    std::optional<dinet::TrainProgress> progress;
    if (opts.resume_path) {
      auto ck = dinet::load_checkpoint(opts.resume_path);
      if (ck.run_config_json.empty()) {
        dinet::fail(dinet::ErrorCode::corrupt_file, "checkpoint carries no run configuration");
      }
      auto stored = dinet::RunConfig::from_json(ck.run_config_json);
      if (config && config->config.hash() != stored.hash()) {
        dinet::fail(dinet::ErrorCode::invalid_argument, "configuration differs from the one stored in the checkpoint");
      }
      run.reset(new dinet_run{std::move(ck.model), {}, ck.total_steps, stored});
      progress = std::move(ck.progress);
    } else {
      require(config, "config");
      run.reset(new dinet_run{dinet::build_model(config->config), {}, 0, config->config});
    }
    check_dataset(dataset->split, run->config);

    const auto& tc = run->config.train;
    const auto pools = dinet::training_pools(dataset->split);
    const std::size_t total = dinet::steps_per_epoch(pools, tc.batch_size) * tc.epochs;
    if (progress && run->total_steps != total) {
      dinet::fail(dinet::ErrorCode::shape_mismatch, "checkpoint was written for " + std::to_string(run->total_steps) +
                                                        " steps, this dataset gives " + std::to_string(total));
    }
    run->total_steps = total;
    const std::size_t per_epoch = total / tc.epochs;
    const std::size_t stop = opts.stop_after_step > 0 ? std::min(opts.stop_after_step, total) : total;
    const std::string config_json = run->config.to_json();

    dinet::TrainHooks hooks;
    if (opts.on_step) hooks.on_step = [&](const dinet::LossRecord& r) {
      const auto info = step_info(r, total);
      opts.on_step(&info, opts.user);
    };
    if (opts.on_epoch) hooks.on_epoch = [&](std::size_t e, std::uint64_t h) { opts.on_epoch(e, h, opts.user); };

    // Run one epoch at a time so a checkpoint exists after every epoch. A
    // resumed run is bitwise identical to an uninterrupted one.
    std::size_t done = progress ? progress->step : 0;
    if (done >= stop) run->progress = std::move(*progress);
    while (done < stop) {
      const std::size_t target = std::min(stop, (done / per_epoch + 1) * per_epoch);
      hooks.stop_after_step = target < total ? std::optional<std::size_t>(target) : std::nullopt;
      auto result = dinet::train(run->model, dataset->split, tc, std::move(progress), hooks);
      done = result.progress.step;
      progress = result.progress;
      run->progress = std::move(result.progress);
      if (opts.checkpoint_path) {
        dinet::save_checkpoint(opts.checkpoint_path, run->model, run->progress, total, config_json);
      }
    }
    *out = run.release();
  });
}

dinet_status dinet_run_load(const char* checkpoint_path, dinet_run** out) {
  return guard([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    auto ck = dinet::load_checkpoint(checkpoint_path);
    dinet::RunConfig config;
    if (!ck.run_config_json.empty()) {
      config = dinet::RunConfig::from_json(ck.run_config_json);
    } else {
      config.model = ck.model.config();
    }
    *out = new dinet_run{std::move(ck.model), std::move(ck.progress), ck.total_steps, config};
  });
}

dinet_status dinet_run_save(const dinet_run* run, const char* checkpoint_path) {
  return guard([&] {
    require(run, "run");
    require(checkpoint_path, "checkpoint_path");
    dinet::save_checkpoint(checkpoint_path, run->model, run->progress, run->total_steps, run->config.to_json());
  });
}

dinet_status dinet_run_progress(const dinet_run* run, size_t* step, size_t* total_steps) {
  return guard([&] {
    require(run, "run");
    if (step) *step = run->progress.step;
    if (total_steps) *total_steps = run->total_steps;
  });
}

dinet_status dinet_run_config(const dinet_run* run, dinet_config** out) {
  return guard([&] {
    require(run, "run");
    require(out, "out");
    *out = new dinet_config{run->config};
  });
}

dinet_status dinet_run_last_step(const dinet_run* run, dinet_step_info* out) {
  return guard([&] {
    require(run, "run");
    require(out, "out");
    if (run->progress.history.empty()) dinet::fail(dinet::ErrorCode::invalid_argument, "run has no completed steps");
    *out = step_info(run->progress.history.back(), run->total_steps);
  });
}

dinet_status dinet_run_write_history(const dinet_run* run, const char* csv_path) {
  return guard([&] {
    require(run, "run");
    require(csv_path, "csv_path");
    dinet::write_history_csv(run->progress.history, csv_path);
  });
}

dinet_status dinet_run_write_batch_hashes(const dinet_run* run, const char* csv_path) {
  return guard([&] {
    require(run, "run");
    require(csv_path, "csv_path");
    std::ofstream os(csv_path);
    if (!os) dinet::fail(dinet::ErrorCode::io, std::string("cannot write ") + csv_path);
    os << "epoch,batch_stream_hash\n";
    for (std::size_t e = 0; e < run->progress.epoch_batch_hashes.size(); ++e) {
      os << e << ',' << hex(run->progress.epoch_batch_hashes[e]) << '\n';
    }
  });
}

dinet_status dinet_run_input_shape(const dinet_run* run, size_t shape[4]) {
  return guard([&] {
    require(run, "run");
    require(shape, "shape");
    const auto& s = run->model.config().input_shape;
    std::copy(s.begin(), s.end(), shape);
  });
}

void dinet_run_free(dinet_run* run) { delete run; }

// ---------------------------------------------------------------------------
// Evaluation

dinet_status dinet_evaluate(dinet_run* run, const dinet_dataset* dataset, int run_probe, const char* out_dir,
                            dinet_metrics* out) {
  return guard([&] {
    require(run, "run");
    require(dataset, "dataset");
    check_dataset(dataset->split, run->config);
    dinet::EvalOptions options;
    options.run_probe = run_probe != 0;
    auto report = dinet::evaluate(run->model, dataset->split, options);
    report.seed = run->config.seed;
    report.config_hash = hex(run->config.hash());
    report.mode = dinet::train_mode_name(run->config.train.mode);
    if (out_dir) dinet::write_report(report, out_dir);
    if (out) {
      *out = {report.source.top1_accuracy, report.target.top1_accuracy, report.domain_probe_accuracy.value_or(0.0),
              report.domain_probe_accuracy ? 1 : 0, report.target.confusion.classes()};
    }
  });
}

dinet_status dinet_predict(dinet_run* run, const float* clips, size_t n, int* labels) {
  return guard([&] {
    require(run, "run");
    require(clips, "clips");
    require(labels, "labels");
    const auto& s = run->model.config().input_shape;
    const std::size_t stride = s[0] * s[1] * s[2] * s[3];
    std::vector<dinet::Clip> batch(n);
    for (std::size_t i = 0; i < n; ++i) {
      batch[i].id = std::to_string(i);
      batch[i].shape = s;
      batch[i].video.assign(clips + i * stride, clips + (i + 1) * stride);
    }
    const auto preds = dinet::predict(run->model, batch);
    std::copy(preds.begin(), preds.end(), labels);
  });
}

// ---------------------------------------------------------------------------
// Gradient checks

void dinet_grad_check_options_init(dinet_grad_check_options* options) {
  if (options) *options = dinet_grad_check_options{20, 1, 0, nullptr, nullptr};
}

dinet_status dinet_grad_check(const char* scope, const dinet_grad_check_options* options) {
  return guard([&] {
    require(scope, "scope");
    dinet_grad_check_options opts;
    dinet_grad_check_options_init(&opts);
    if (options) opts = *options;
    dinet::GradCheckOptions go;
    go.configs_per_op = opts.configs_per_op;
    go.seed = opts.seed;
    go.inject_conv_fault = opts.inject_conv_fault != 0;
    const auto report = dinet::run_grad_check(dinet::parse_grad_check_scope(scope), go);
    for (const auto& r : report.results) {
      if (opts.on_result) opts.on_result(r.op.c_str(), r.configs, r.max_error, r.passed ? 1 : 0, opts.user);
    }
    if (!report.passed()) {
      std::string names;
      for (const auto& op : report.failing()) names += (names.empty() ? "" : ", ") + op;
      dinet::fail(dinet::ErrorCode::grad_check_failed, "gradient check failed for: " + names);
    }
  });
}

}  // extern "C"
