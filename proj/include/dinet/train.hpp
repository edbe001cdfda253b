#pragma once

// Domain-adversarial training: schedules, momentum SGD, the per-batch update
// and the epoch loop, plus the source-only control and a post-hoc domain
// probe on frozen features.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dinet/data.hpp"
#include "dinet/model.hpp"

namespace dinet {

enum class TrainMode { dann, source_only };

const char* train_mode_name(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);  // accepts source-only and source_only

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double base_lr = 0.03;  // 0.01 leaves both arms near chance on the night clips after 10 epochs
  double momentum = 0.9;
  double anneal_a = 10.0;
  double anneal_b = 0.75;
  double lambda_gain = 10.0;
  std::optional<double> lambda_fixed;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::dann;

  void validate() const;
};

// 2/(1+exp(-gain*p)) - 1
double lambda_schedule(double p, double gain = 10.0);
// base_lr / (1 + a*p)^b
double lr_schedule(double p, const TrainConfig& cfg);

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> velocity;

  static OptimizerState zeros_like(const std::vector<Tensor<T>>& params);
};

// v <- m*v + g; theta <- theta - lr*v. An empty gradient span counts as zero.
template <typename T>
void sgd_update(std::vector<Tensor<T>>& params, const std::vector<std::span<const T>>& grads,
                OptimizerState<T>& state, T lr, T momentum);

// Same, reading each parameter's accumulated gradient.
template <typename T>
void sgd_update(std::vector<Tensor<T>>& params, OptimizerState<T>& state, T lr, T momentum);

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double p = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
  double loss_action = 0.0;
  double loss_domain = 0.0;
  double objective = 0.0;  // loss_action - lambda * loss_domain
};

// One assembled batch: the first `source_actions.size()` rows of `clips` are
// source samples, the remaining rows are target samples.
template <typename T>
struct StepBatch {
  Tensor<T> clips;
  std::vector<int> source_actions;
  std::vector<int> domains;
};

template <typename T>
StepBatch<T> assemble_batch(const TrainingPools& pools, const Batch& batch);

// Gradients produced by one forward/backward pass before the update.
template <typename T>
struct StepGradients {
  T loss_action{};
  T loss_domain{};
  std::vector<std::vector<T>> grads;  // parallel to model.all_parameters()
};

// Forward the full batch, take the mean action loss on the source rows and
// the mean domain loss on all rows, and backpropagate L_a + L_d with the
// reversal node set to lambda. In source-only mode the domain loss is only
// measured and the domain head receives no gradient. Gradients are left on
// the parameters.
template <typename T>
StepGradients<T> compute_step_gradients(DiNetModel<T>& model, const StepBatch<T>& batch, T lambda, TrainMode mode,
                                         DomainRoute route = DomainRoute::reversal);

// compute_step_gradients followed by sgd_update over every parameter and a
// gradient reset.
template <typename T>
LossRecord dann_step(DiNetModel<T>& model, const StepBatch<T>& batch, double lambda, double lr,
                     const TrainConfig& cfg, OptimizerState<T>& optimizer);

struct TrainProgress {
  std::size_t step = 0;  // completed steps
  std::vector<LossRecord> history;
  std::vector<std::uint64_t> epoch_batch_hashes;
  OptimizerState<float> optimizer;
};

struct TrainHooks {
  std::optional<std::size_t> stop_after_step;  // simulate an interruption
  std::function<void(const LossRecord&)> on_step;
  std::function<void(std::size_t epoch, std::uint64_t hash)> on_epoch;
};

struct TrainResult {
  TrainProgress progress;
  std::size_t total_steps = 0;
  std::size_t batches_checked = 0;
  bool completed = false;
};

std::size_t steps_per_epoch(const TrainingPools& pools, std::size_t batch_size);

// Runs (or resumes, when `resume` holds a partial progress) the training
// loop. Progress p = completed_steps / total_steps is taken at the start of
// every step. Throws Error(diverged) on a non-finite loss.
TrainResult train(DiNetModel<float>& model, const DatasetSplit& data, const TrainConfig& cfg,
                  std::optional<TrainProgress> resume = std::nullopt, const TrainHooks& hooks = {});

// train() with mode forced to source_only.
TrainResult train_source_only(DiNetModel<float>& model, const DatasetSplit& data, TrainConfig cfg,
                              const TrainHooks& hooks = {});

// Eval-mode features for a clip list, in order; never changes the model.
std::vector<std::vector<float>> extract_features(DiNetModel<float>& model, const std::vector<Clip>& clips,
                                                 std::size_t chunk = 16);

struct ProbeConfig {
  std::array<std::size_t, 2> hidden{64, 32};
  std::size_t iterations = 400;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 7;
};

// Trains a fresh three-layer domain classifier on standardized frozen
// features and returns its balanced accuracy on the test rows.
double post_hoc_domain_probe(const std::vector<std::vector<float>>& train_features, const std::vector<int>& train_domains,
                             const std::vector<std::vector<float>>& test_features, const std::vector<int>& test_domains,
                             const ProbeConfig& cfg = {});

// Probe on a model's features: trains on the training clips of both domains
// and tests on the test clips of both domains.
double model_domain_probe(DiNetModel<float>& model, const DatasetSplit& data, const ProbeConfig& cfg = {});

}  // namespace dinet
