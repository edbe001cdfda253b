#include "dinet/train.hpp"

#include <cmath>
#include <sstream>

namespace dinet {

const char* train_mode_name(TrainMode mode) { return mode == TrainMode::dann ? "dann" : "source-only"; }

TrainMode parse_train_mode(const std::string& name) {
  if (name == "dann") return TrainMode::dann;
  if (name == "source-only" || name == "source_only") return TrainMode::source_only;
  fail(ErrorCode::invalid_argument, "unknown training mode '" + name + "' (expected dann or source-only)");
}

void TrainConfig::validate() const {
  if (epochs == 0) fail(ErrorCode::invalid_argument, "epochs must be positive");
  if (batch_size == 0 || batch_size % 2 != 0) {
    fail(ErrorCode::invalid_argument, "batch size must be even and positive, got " + std::to_string(batch_size));
  }
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) fail(ErrorCode::invalid_argument, "base_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorCode::invalid_argument, "momentum must be in [0,1)");
  if (!(anneal_a > 0.0 && anneal_b > 0.0)) fail(ErrorCode::invalid_argument, "lr annealing constants must be positive");
  if (!(lambda_gain > 0.0)) fail(ErrorCode::invalid_argument, "lambda gain must be positive");
  if (lambda_fixed && !(*lambda_fixed >= 0.0)) fail(ErrorCode::invalid_argument, "fixed lambda must be >= 0");
}

double lambda_schedule(double p, double gain) {
  if (!(p >= 0.0 && p <= 1.0)) fail(ErrorCode::invalid_argument, "progress must lie in [0,1]");
  return 2.0 / (1.0 + std::exp(-gain * p)) - 1.0;
}

double lr_schedule(double p, const TrainConfig& cfg) {
  if (!(p >= 0.0 && p <= 1.0)) fail(ErrorCode::invalid_argument, "progress must lie in [0,1]");
  return cfg.base_lr / std::pow(1.0 + cfg.anneal_a * p, cfg.anneal_b);
}

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(const std::vector<Tensor<T>>& params) {
  OptimizerState s;
  for (const auto& p : params) s.velocity.emplace_back(p.size(), T(0));
  return s;
}

template <typename T>
void sgd_update(std::vector<Tensor<T>>& params, const std::vector<std::span<const T>>& grads,
                OptimizerState<T>& state, T lr, T momentum) {
  if (grads.size() != params.size() || state.velocity.size() != params.size()) {
    fail(ErrorCode::shape_mismatch, "optimizer holds " + std::to_string(state.velocity.size()) + " buffers for " +
                                        std::to_string(params.size()) + " parameters and " +
                                        std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = state.velocity[i];
    const auto& g = grads[i];
    if (v.size() != params[i].size() || (!g.empty() && g.size() != v.size())) {
      fail(ErrorCode::shape_mismatch, "parameter " + std::to_string(i) + " does not match its optimizer buffer");
    }
    auto theta = params[i].mutable_data();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = momentum * v[j] + (g.empty() ? T(0) : g[j]);
      theta[j] -= lr * v[j];
    }
  }
}

template <typename T>
void sgd_update(std::vector<Tensor<T>>& params, OptimizerState<T>& state, T lr, T momentum) {
  std::vector<std::span<const T>> grads;
  for (const auto& p : params) grads.push_back(p.grad());
  sgd_update(params, grads, state, lr, momentum);
}

template <typename T>
StepBatch<T> assemble_batch(const TrainingPools& pools, const Batch& batch) {
  if (batch.source.empty() || batch.source.size() != batch.target.size()) {
    fail(ErrorCode::invalid_argument, "malformed batch: " + std::to_string(batch.source.size()) + " source and " +
                                          std::to_string(batch.target.size()) + " target clips");
  }
  StepBatch<T> out;
  std::vector<const std::vector<float>*> videos;
  for (auto i : batch.source) {
    const auto& c = pools.source.at(i);
    videos.push_back(c.video);
    out.source_actions.push_back(c.action);
    out.domains.push_back(kSourceDomain);
  }
  for (auto i : batch.target) {
    videos.push_back(pools.target.at(i).video);
    out.domains.push_back(kTargetDomain);
  }
  out.clips = stack_videos<T>(videos, pools.shape);
  return out;
}

template <typename T>
StepGradients<T> compute_step_gradients(DiNetModel<T>& model, const StepBatch<T>& batch, T lambda, TrainMode mode,
                                         DomainRoute route) {
  const std::size_t n = batch.clips.dim(0);
  const std::size_t ns = batch.source_actions.size();
  if (ns == 0 || batch.domains.size() != n || 2 * ns != n) {
    fail(ErrorCode::invalid_argument, "malformed batch composition: " + std::to_string(ns) + " labeled rows of " +
                                          std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (batch.domains[i] != (i < ns ? kSourceDomain : kTargetDomain)) {
      fail(ErrorCode::invalid_argument, "batch rows must be source first, then target");
    }
  }
  auto params = model.all_parameters();
  zero_grads(params);
  StepGradients<T> out;
  {
    Graph<T> graph;
    auto features = model.forward_features(batch.clips, BatchNormMode::train);
    auto loss_a = softmax_cross_entropy(model.forward_action(slice_rows(features, 0, ns)),
                                        std::span<const int>(batch.source_actions));
    const T effective = mode == TrainMode::dann ? lambda : T(0);
    auto loss_d = binary_cross_entropy_with_logit(model.forward_domain(features, effective, route),
                                                  std::span<const int>(batch.domains));
    out.loss_action = loss_a.item();
    out.loss_domain = loss_d.item();
    if (std::isfinite(out.loss_action) && std::isfinite(out.loss_domain)) {
      backward(mode == TrainMode::dann ? add(loss_a, loss_d) : loss_a);
    }
  }
  for (const auto& p : params) out.grads.emplace_back(p.grad().begin(), p.grad().end());
  return out;
}

template <typename T>
LossRecord dann_step(DiNetModel<T>& model, const StepBatch<T>& batch, double lambda, double lr,
                     const TrainConfig& cfg, OptimizerState<T>& optimizer) {
  const double effective = cfg.mode == TrainMode::dann ? lambda : 0.0;
  auto grads = compute_step_gradients(model, batch, static_cast<T>(effective), cfg.mode);
  auto params = model.all_parameters();
  LossRecord rec;
  rec.lambda = effective;
  rec.lr = lr;
  rec.loss_action = static_cast<double>(grads.loss_action);
  rec.loss_domain = static_cast<double>(grads.loss_domain);
  rec.objective = rec.loss_action - rec.lambda * rec.loss_domain;
  if (!std::isfinite(rec.loss_action) || !std::isfinite(rec.loss_domain)) {
    zero_grads(params);
    std::ostringstream msg;
    msg << "non-finite loss (L_a=" << rec.loss_action << ", L_d=" << rec.loss_domain << ") at lambda=" << rec.lambda
        << " lr=" << rec.lr;
    fail(ErrorCode::diverged, msg.str());
  }
  sgd_update(params, optimizer, static_cast<T>(lr), static_cast<T>(cfg.momentum));
  zero_grads(params);
  return rec;
}

std::size_t steps_per_epoch(const TrainingPools& pools, std::size_t batch_size) {
  return std::min(pools.source.size(), pools.target.size()) / (batch_size / 2);
}

TrainResult train(DiNetModel<float>& model, const DatasetSplit& data, const TrainConfig& cfg,
                  std::optional<TrainProgress> resume, const TrainHooks& hooks) {
  cfg.validate();
  const auto pools = training_pools(data);
  const auto& in = model.config().input_shape;
  if (pools.shape != in) {
    fail(ErrorCode::shape_mismatch, "dataset clips do not match the model input shape");
  }
  const std::size_t per_epoch = steps_per_epoch(pools, cfg.batch_size);
  if (per_epoch == 0) fail(ErrorCode::invalid_argument, "training pools are smaller than half a batch");

  TrainResult result;
  result.total_steps = cfg.epochs * per_epoch;
  auto params = model.all_parameters();
  if (resume) {
    result.progress = std::move(*resume);
    if (result.progress.step > result.total_steps || result.progress.history.size() != result.progress.step) {
      fail(ErrorCode::invalid_argument, "resume state does not fit this training configuration");
    }
    if (result.progress.optimizer.velocity.size() != params.size()) {
      fail(ErrorCode::shape_mismatch, "resume optimizer state does not match the model");
    }
  } else {
    result.progress.optimizer = OptimizerState<float>::zeros_like(params);
  }
  auto& prog = result.progress;
  const double half = static_cast<double>(cfg.batch_size / 2);

  for (std::size_t epoch = prog.step / per_epoch; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(pools.source.size(), pools.target.size(), cfg.batch_size,
                                      derive_seed(cfg.seed, 0xba7c4e5ULL, epoch));
    const auto hash = batch_stream_hash(batches, pools);
    if (prog.epoch_batch_hashes.size() <= epoch) prog.epoch_batch_hashes.resize(epoch + 1);
    prog.epoch_batch_hashes[epoch] = hash;
    if (hooks.on_epoch) hooks.on_epoch(epoch, hash);
    for (std::size_t b = prog.step - epoch * per_epoch; b < batches.size(); ++b) {
      if (hooks.stop_after_step && prog.step >= *hooks.stop_after_step) return result;
      const auto& batch = batches[b];
      if (batch.source.size() != cfg.batch_size / 2 || batch.target.size() != cfg.batch_size / 2) {
        fail(ErrorCode::invalid_argument, "batch " + std::to_string(b) + " is not half source, half target");
      }
      ++result.batches_checked;
      const double p = static_cast<double>(prog.step) / static_cast<double>(result.total_steps);
      const double lambda = cfg.lambda_fixed ? *cfg.lambda_fixed : lambda_schedule(p, cfg.lambda_gain);
      const double lr = lr_schedule(p, cfg);
      const auto step_batch = assemble_batch<float>(pools, batch);
      if (step_batch.source_actions.size() != half) fail(ErrorCode::invalid_argument, "lost source rows");
      LossRecord rec;
      try {
        rec = dann_step(model, step_batch, lambda, lr, cfg, prog.optimizer);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::diverged) throw;
        fail(ErrorCode::diverged, "step " + std::to_string(prog.step) + ": " + e.what());
      }
      rec.step = prog.step;
      rec.epoch = epoch;
      rec.p = p;
      prog.history.push_back(rec);
      ++prog.step;
      if (hooks.on_step) hooks.on_step(rec);
    }
  }
  result.completed = true;
  return result;
}

TrainResult train_source_only(DiNetModel<float>& model, const DatasetSplit& data, TrainConfig cfg,
                              const TrainHooks& hooks) {
  cfg.mode = TrainMode::source_only;
  return train(model, data, cfg, std::nullopt, hooks);
}

std::vector<std::vector<float>> extract_features(DiNetModel<float>& model, const std::vector<Clip>& clips,
                                                 std::size_t chunk) {
  std::vector<std::vector<float>> out;
  if (chunk == 0) chunk = 1;
  for (std::size_t begin = 0; begin < clips.size(); begin += chunk) {
    const std::size_t end = std::min(clips.size(), begin + chunk);
    std::vector<const std::vector<float>*> videos;
    for (std::size_t i = begin; i < end; ++i) {
      if (clips[i].shape != model.config().input_shape) {
        fail(ErrorCode::shape_mismatch, "clip " + clips[i].id + " does not match the model input shape");
      }
      videos.push_back(&clips[i].video);
    }
    auto f = model.forward_features(stack_videos<float>(videos, model.config().input_shape), BatchNormMode::eval);
    const std::size_t d = f.dim(1);
    for (std::size_t r = 0; r < end - begin; ++r) {
      out.emplace_back(f.data().begin() + static_cast<long>(r * d), f.data().begin() + static_cast<long>((r + 1) * d));
    }
  }
  return out;
}

double post_hoc_domain_probe(const std::vector<std::vector<float>>& train_features, const std::vector<int>& train_domains,
                             const std::vector<std::vector<float>>& test_features, const std::vector<int>& test_domains,
                             const ProbeConfig& cfg) {
  if (train_features.empty() || test_features.empty()) fail(ErrorCode::invalid_argument, "probe needs features");
  if (train_features.size() != train_domains.size() || test_features.size() != test_domains.size()) {
    fail(ErrorCode::shape_mismatch, "probe features and domain labels differ in length");
  }
  const std::size_t d = train_features.front().size();
  for (const auto* set : {&train_features, &test_features}) {
    for (const auto& row : *set) {
      if (row.size() != d) fail(ErrorCode::shape_mismatch, "probe feature rows differ in width");
    }
  }
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (const auto& row : train_features) {
    for (std::size_t j = 0; j < d; ++j) mu[j] += row[j];
  }
  for (auto& m : mu) m /= static_cast<double>(train_features.size());
  for (const auto& row : train_features) {
    for (std::size_t j = 0; j < d; ++j) sd[j] += (row[j] - mu[j]) * (row[j] - mu[j]);
  }
  for (auto& s : sd) {
    s = std::sqrt(s / static_cast<double>(train_features.size()));
    if (s < 1e-6) s = 1.0;
  }
  auto standardize = [&](const std::vector<std::vector<float>>& rows) {
    std::vector<double> flat;
    flat.reserve(rows.size() * d);
    for (const auto& row : rows) {
      for (std::size_t j = 0; j < d; ++j) flat.push_back((row[j] - mu[j]) / sd[j]);
    }
    return Tensor<double>({rows.size(), d}, std::move(flat));
  };
  const auto x_train = standardize(train_features);
  const auto x_test = standardize(test_features);

  std::array<LinearLayer<double>, 3> head{LinearLayer<double>::create(d, cfg.hidden[0]),
                                         LinearLayer<double>::create(cfg.hidden[0], cfg.hidden[1]),
                                         LinearLayer<double>::create(cfg.hidden[1], 1)};
  std::vector<Tensor<double>> params;
  for (std::size_t i = 0; i < head.size(); ++i) {
    init_parameters(head[i], derive_seed(cfg.seed, i));
    params.push_back(head[i].weights);
    params.push_back(head[i].bias);
  }
  auto logits = [&](const Tensor<double>& x) {
    auto h = linear(x, head[0], Activation::relu);
    h = linear(h, head[1], Activation::relu);
    return linear(h, head[2]);
  };
  auto opt = OptimizerState<double>::zeros_like(params);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    {
      Graph<double> graph;
      backward(binary_cross_entropy_with_logit(logits(x_train), std::span<const int>(train_domains)));
    }
    sgd_update(params, opt, cfg.lr, cfg.momentum);
    zero_grads(params);
  }
  const auto z = logits(x_test);
  std::array<std::size_t, 2> correct{0, 0}, count{0, 0};
  for (std::size_t i = 0; i < test_domains.size(); ++i) {
    const int dom = test_domains[i];
    if (dom != kSourceDomain && dom != kTargetDomain) fail(ErrorCode::invalid_argument, "domain labels must be 0 or 1");
    const int pred = z.at(i) > 0.0 ? kTargetDomain : kSourceDomain;
    ++count[dom];
    correct[dom] += pred == dom;
  }
  double acc = 0.0;
  std::size_t present = 0;
  for (int k = 0; k < 2; ++k) {
    if (count[k] == 0) continue;
    acc += static_cast<double>(correct[k]) / static_cast<double>(count[k]);
    ++present;
  }
  return acc / static_cast<double>(present);
}

double model_domain_probe(DiNetModel<float>& model, const DatasetSplit& data, const ProbeConfig& cfg) {
  auto collect = [&](const std::vector<Clip>& a, const std::vector<Clip>& b, std::vector<std::vector<float>>& feats,
                     std::vector<int>& doms) {
    for (const auto* set : {&a, &b}) {
      auto f = extract_features(model, *set);
      for (std::size_t i = 0; i < f.size(); ++i) {
        feats.push_back(std::move(f[i]));
        doms.push_back((*set)[i].domain);
      }
    }
  };
  std::vector<std::vector<float>> train_f, test_f;
  std::vector<int> train_d, test_d;
  collect(data.train_source, data.train_target, train_f, train_d);
  collect(data.test_source, data.test_target, test_f, test_d);
  return post_hoc_domain_probe(train_f, train_d, test_f, test_d, cfg);
}

#define DINET_INSTANTIATE(T)                                                                                      \
  template struct OptimizerState<T>;                                                                              \
  template void sgd_update<T>(std::vector<Tensor<T>>&, const std::vector<std::span<const T>>&, OptimizerState<T>&, \
                              T, T);                                                                              \
  template void sgd_update<T>(std::vector<Tensor<T>>&, OptimizerState<T>&, T, T);                                 \
  template StepBatch<T> assemble_batch<T>(const TrainingPools&, const Batch&);                                    \
  template StepGradients<T> compute_step_gradients<T>(DiNetModel<T>&, const StepBatch<T>&, T, TrainMode,          \
                                                      DomainRoute);                                               \
  template LossRecord dann_step<T>(DiNetModel<T>&, const StepBatch<T>&, double, double, const TrainConfig&,       \
                                   OptimizerState<T>&);

DINET_INSTANTIATE(float)
DINET_INSTANTIATE(double)
#undef DINET_INSTANTIATE

}  // namespace dinet
