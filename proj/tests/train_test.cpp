#include <gtest/gtest.h>

#include <cmath>

#include "dinet/train.hpp"
#include "test_util.hpp"
#include "train_fixtures.hpp"

namespace dinet {
namespace {

using test::small_data_config;
using test::small_model_config;
using test::small_train_config;

TEST(LambdaSchedule, Values) {
  EXPECT_EQ(lambda_schedule(0.0), 0.0);
  // 2/(1+e^-10) - 1 and 2/(1+e^-5) - 1, evaluated independently in long double.
  const long double e10 = std::exp(-10.0L), e5 = std::exp(-5.0L);
  EXPECT_NEAR(lambda_schedule(1.0), static_cast<double>(2.0L / (1.0L + e10) - 1.0L), 1e-15);
  EXPECT_NEAR(lambda_schedule(1.0), 0.9999092, 1e-6);
  EXPECT_NEAR(lambda_schedule(0.5), 0.9866143, 1e-6);
  EXPECT_NEAR(lambda_schedule(0.5), static_cast<double>(2.0L / (1.0L + e5) - 1.0L), 1e-15);
}

TEST(LambdaSchedule, StrictlyIncreasingAndBelowOne) {
  double prev = lambda_schedule(0.0);
  for (int i = 1; i <= 100; ++i) {
    const double v = lambda_schedule(i / 100.0);
    EXPECT_GT(v, prev);
    EXPECT_LT(v, 1.0);
    prev = v;
  }
}

TEST(LambdaSchedule, RejectsOutOfRange) {
  EXPECT_THROW(lambda_schedule(-0.01), Error);
  EXPECT_THROW(lambda_schedule(1.01), Error);
  EXPECT_THROW(lambda_schedule(std::nan("")), Error);
}

TEST(LrSchedule, Values) {
  TrainConfig cfg;
  cfg.base_lr = 0.01;
  EXPECT_EQ(lr_schedule(0.0, cfg), 0.01);
  EXPECT_NEAR(lr_schedule(1.0, cfg), 0.01 / std::pow(11.0, 0.75), 1e-15);
  EXPECT_NEAR(lr_schedule(1.0, cfg), 0.0016556, 1e-6);
  double prev = lr_schedule(0.0, cfg);
  for (int i = 1; i <= 100; ++i) {
    const double v = lr_schedule(i / 100.0, cfg);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 7;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.base_lr = 0.0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_train_mode("source-only"), TrainMode::source_only);
  EXPECT_THROW(parse_train_mode("adversarial"), Error);
}

TEST(SgdUpdate, PlainStep) {
  std::vector<Tensor<double>> params{Tensor<double>::zeros({1})};
  auto state = OptimizerState<double>::zeros_like(params);
  const std::vector<double> g{1.0};
  sgd_update(params, {std::span<const double>(g)}, state, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(params[0].at(0), -0.1);
}

TEST(SgdUpdate, MomentumTwoSteps) {
  std::vector<Tensor<double>> params{Tensor<double>::zeros({1})};
  auto state = OptimizerState<double>::zeros_like(params);
  const std::vector<double> g{1.0};
  for (int i = 0; i < 2; ++i) sgd_update(params, {std::span<const double>(g)}, state, 0.1, 0.9);
  EXPECT_NEAR(params[0].at(0), -0.29, 1e-15);
  EXPECT_NEAR(state.velocity[0][0], 1.9, 1e-15);
}

TEST(SgdUpdate, ZeroGradientDecaysVelocity) {
  std::vector<Tensor<double>> params{Tensor<double>::full({2}, 1.0)};
  auto state = OptimizerState<double>::zeros_like(params);
  state.velocity[0] = {2.0, -4.0};
  sgd_update(params, {std::span<const double>()}, state, 0.5, 0.9);
  EXPECT_DOUBLE_EQ(params[0].at(0), 1.0 - 0.5 * 0.9 * 2.0);
  EXPECT_DOUBLE_EQ(params[0].at(1), 1.0 + 0.5 * 0.9 * 4.0);
}

TEST(SgdUpdate, QuadraticMatchesLinearRecurrence) {
  // Loss theta^2/2: the state (theta, v) evolves by a fixed 2x2 matrix, whose
  // powers are computed by repeated squaring in long double.
  const double alpha = 0.05, m = 0.9, theta0 = 3.0;
  std::vector<Tensor<double>> params{Tensor<double>::full({1}, theta0)};
  auto state = OptimizerState<double>::zeros_like(params);
  using M = std::array<long double, 4>;
  auto mul = [](const M& a, const M& b) {
    return M{a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2],
             a[2] * b[1] + a[3] * b[3]};
  };
  const M a{1.0L - alpha, -alpha * m, 1.0L, m};
  for (int k = 1; k <= 100; ++k) {
    const std::vector<double> g{params[0].at(0)};
    sgd_update(params, {std::span<const double>(g)}, state, alpha, m);
    M power{1, 0, 0, 1}, base = a;
    for (int e = k; e > 0; e >>= 1) {
      if (e & 1) power = mul(power, base);
      base = mul(base, base);
    }
    EXPECT_NEAR(params[0].at(0), static_cast<double>(power[0] * theta0), 1e-10) << k;
    EXPECT_NEAR(state.velocity[0][0], static_cast<double>(power[2] * theta0), 1e-10) << k;
  }
}

TEST(SgdUpdate, ShapeMismatch) {
  std::vector<Tensor<double>> params{Tensor<double>::zeros({2})};
  auto state = OptimizerState<double>::zeros_like(params);
  const std::vector<double> g{1.0, 2.0, 3.0};
  EXPECT_THROW(sgd_update(params, {std::span<const double>(g)}, state, 0.1, 0.9), Error);
  EXPECT_THROW(sgd_update(params, {}, state, 0.1, 0.9), Error);
}

// A double-precision model and one assembled batch from the small dataset.
struct StepFixture {
  DatasetSplit data = generate_dataset(small_data_config());
  TrainingPools pools = training_pools(data);
  DiNetModel<double> model = DiNetModel<double>::build(small_model_config(), 3);
  StepBatch<double> batch = assemble_batch<double>(pools, make_batches(pools.source.size(), pools.target.size(), 4, 1)[0]);
};

std::vector<double> grads_of(const DiNetModel<double>& model, Partition part, const StepGradients<double>& g) {
  std::vector<double> out;
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].partition != part) continue;
    if (g.grads[i].empty()) {
      out.insert(out.end(), params[i].tensor.size(), 0.0);
    } else {
      out.insert(out.end(), g.grads[i].begin(), g.grads[i].end());
    }
  }
  return out;
}

TEST(DannStep, ZeroLambdaMatchesSourceOnlyFeatureGradients) {
  StepFixture fx;
  auto a = compute_step_gradients(fx.model, fx.batch, 0.0, TrainMode::dann);
  auto b = compute_step_gradients(fx.model, fx.batch, 0.0, TrainMode::source_only);
  EXPECT_EQ(grads_of(fx.model, Partition::feature, a), grads_of(fx.model, Partition::feature, b));
  EXPECT_EQ(grads_of(fx.model, Partition::action, a), grads_of(fx.model, Partition::action, b));
  for (double v : grads_of(fx.model, Partition::domain, b)) EXPECT_EQ(v, 0.0);
}

// Gradients of one loss term alone, routed through the reversal node or the
// identity.
std::vector<std::vector<double>> single_loss_grads(DiNetModel<double>& model, const StepBatch<double>& batch,
                                                   bool domain_loss, double lambda, DomainRoute route) {
  auto params = model.all_parameters();
  zero_grads(params);
  {
    Graph<double> g;
    auto f = model.forward_features(batch.clips, BatchNormMode::train);
    if (domain_loss) {
      backward(binary_cross_entropy_with_logit(model.forward_domain(f, lambda, route),
                                               std::span<const int>(batch.domains)));
    } else {
      const std::size_t ns = batch.source_actions.size();
      backward(softmax_cross_entropy(model.forward_action(slice_rows(f, 0, ns)),
                                     std::span<const int>(batch.source_actions)));
    }
  }
  std::vector<std::vector<double>> out;
  for (const auto& p : params) {
    out.push_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                               : std::vector<double>(p.size(), 0.0));
  }
  zero_grads(params);
  return out;
}

TEST(DannStep, DomainContributionIsNegatedIdentityContribution) {
  for (double lambda : {0.0, 0.25, 1.0}) {
    StepFixture fx;
    const auto rev = single_loss_grads(fx.model, fx.batch, true, lambda, DomainRoute::reversal);
    const auto id = single_loss_grads(fx.model, fx.batch, true, lambda, DomainRoute::identity);
    const auto& params = fx.model.parameters();
    std::size_t checked = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].partition != Partition::feature) continue;
      for (std::size_t j = 0; j < rev[i].size(); ++j) {
        ASSERT_EQ(rev[i][j], -lambda * id[i][j]) << params[i].name << " lambda=" << lambda;
        if (lambda == 0.0) ASSERT_EQ(rev[i][j], 0.0);
        ++checked;
      }
    }
    EXPECT_GT(checked, 0u);
  }
}

TEST(DannStep, HeadsSeeOnlyTheirOwnLoss) {
  StepFixture fx;
  const auto from_domain = single_loss_grads(fx.model, fx.batch, true, 0.5, DomainRoute::reversal);
  const auto from_action = single_loss_grads(fx.model, fx.batch, false, 0.5, DomainRoute::reversal);
  const auto& params = fx.model.parameters();
  bool domain_nonzero = false, action_nonzero = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].partition == Partition::action) {
      for (double v : from_domain[i]) EXPECT_EQ(v, 0.0);
      for (double v : from_action[i]) action_nonzero |= v != 0.0;
    }
    if (params[i].partition == Partition::domain) {
      for (double v : from_action[i]) EXPECT_EQ(v, 0.0);
      for (double v : from_domain[i]) domain_nonzero |= v != 0.0;
    }
  }
  EXPECT_TRUE(domain_nonzero);
  EXPECT_TRUE(action_nonzero);
}

TEST(DannStep, ReversalUpdateEqualsManualRoutingBitwise) {
  const double lambda = 0.25, lr = 0.01, momentum = 0.9;
  StepFixture fx;
  auto manual = fx.model.clone();
  const std::size_t ns = fx.batch.source_actions.size();

  // Reversal route: the production step.
  TrainConfig cfg;
  cfg.momentum = momentum;
  auto opt = OptimizerState<double>::zeros_like(fx.model.all_parameters());
  dann_step(fx.model, fx.batch, lambda, lr, cfg, opt);

  // Manual route: heads on a detached copy of the features with the reversal
  // replaced by identity, then the feature-side upstream gradient
  // u_a - lambda * u_d is pushed back through the extractor.
  auto params = manual.all_parameters();
  std::vector<std::vector<double>> grads(params.size());
  {
    Graph<double> g;
    auto f = manual.forward_features(fx.batch.clips, BatchNormMode::train);
    auto head_in = f.detach();
    head_in.set_requires_grad(true);
    std::vector<double> u_a, u_d;
    {
      Graph<double> heads;
      backward(softmax_cross_entropy(manual.forward_action(slice_rows(head_in, 0, ns)),
                                     std::span<const int>(fx.batch.source_actions)));
      u_a.assign(head_in.grad().begin(), head_in.grad().end());
    }
    std::ranges::fill(head_in.mutable_grad(), 0.0);
    {
      Graph<double> heads;
      backward(binary_cross_entropy_with_logit(manual.forward_domain(head_in, lambda, DomainRoute::identity),
                                               std::span<const int>(fx.batch.domains)));
      u_d.assign(head_in.grad().begin(), head_in.grad().end());
    }
    std::vector<double> upstream(u_a.size());
    for (std::size_t i = 0; i < u_a.size(); ++i) upstream[i] = u_a[i] + (-lambda * u_d[i]);
    backward(sum(mul(f, Tensor<double>(f.shape(), upstream))));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    grads[i].assign(params[i].grad().begin(), params[i].grad().end());
  }
  std::vector<std::span<const double>> spans(grads.begin(), grads.end());
  auto opt2 = OptimizerState<double>::zeros_like(params);
  sgd_update(params, spans, opt2, lr, momentum);

  const auto& a = fx.model.parameters();
  const auto& b = manual.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_TRUE(std::ranges::equal(a[i].tensor.data(), b[i].tensor.data())) << a[i].name;
  }
}

TEST(DannStep, MalformedBatch) {
  StepFixture fx;
  auto bad = fx.batch;
  bad.source_actions.pop_back();
  EXPECT_THROW(compute_step_gradients(fx.model, bad, 0.5, TrainMode::dann), Error);
  auto swapped = fx.batch;
  std::swap(swapped.domains.front(), swapped.domains.back());
  EXPECT_THROW(compute_step_gradients(fx.model, swapped, 0.5, TrainMode::dann), Error);
  EXPECT_THROW(assemble_batch<double>(fx.pools, Batch{{0, 1}, {0}}), Error);
}

TEST(DannStep, RecordedObjective) {
  StepFixture fx;
  TrainConfig cfg;
  auto opt = OptimizerState<double>::zeros_like(fx.model.all_parameters());
  auto rec = dann_step(fx.model, fx.batch, 0.7, 0.01, cfg, opt);
  EXPECT_NEAR(rec.objective, rec.loss_action - 0.7 * rec.loss_domain, 1e-12);
  for (const auto& p : fx.model.all_parameters()) {
    for (double v : p.grad()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Train, StepCountAndProgress) {
  auto data = generate_dataset(small_data_config());
  auto model = DiNetModel<float>::build(small_model_config(), 1);
  auto cfg = small_train_config();
  auto result = train(model, data, cfg);
  const std::size_t per_epoch = std::min(data.train_source.size(), data.train_target.size()) / (cfg.batch_size / 2);
  EXPECT_EQ(result.total_steps, cfg.epochs * per_epoch);
  EXPECT_EQ(result.progress.history.size(), result.total_steps);
  EXPECT_EQ(result.batches_checked, result.total_steps);
  EXPECT_TRUE(result.completed);
  EXPECT_EQ(static_cast<double>(result.progress.step) / result.total_steps, 1.0);
  EXPECT_EQ(result.progress.history.front().p, 0.0);
  double prev = -1.0;
  for (const auto& r : result.progress.history) {
    EXPECT_GT(r.p, prev);
    prev = r.p;
    EXPECT_TRUE(std::isfinite(r.loss_action) && std::isfinite(r.loss_domain));
    EXPECT_NEAR(r.objective, r.loss_action - r.lambda * r.loss_domain, 1e-6);
    EXPECT_EQ(r.lambda, lambda_schedule(r.p));
    EXPECT_EQ(r.lr, lr_schedule(r.p, cfg));
  }
}

TEST(Train, DeterministicHistories) {
  auto data = generate_dataset(small_data_config());
  auto run = [&] {
    auto model = DiNetModel<float>::build(small_model_config(), 1);
    return train(model, data, small_train_config()).progress.history;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].loss_action, b[i].loss_action);
    EXPECT_EQ(a[i].loss_domain, b[i].loss_domain);
  }
}

TEST(Train, SourceOnlyEqualsZeroLambdaWithFrozenDomainHead) {
  auto data = generate_dataset(small_data_config());
  auto cfg = small_train_config();
  auto base = DiNetModel<float>::build(small_model_config(), 2);
  auto zero = base.clone();
  auto src = base.clone();
  cfg.lambda_fixed = 0.0;
  train(zero, data, cfg);
  auto so = train_source_only(src, data, cfg);
  for (const auto& r : so.progress.history) EXPECT_EQ(r.lambda, 0.0);
  const auto& a = zero.parameters();
  const auto& b = src.parameters();
  const auto& c = base.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].partition == Partition::domain) {
      EXPECT_TRUE(std::ranges::equal(b[i].tensor.data(), c[i].tensor.data())) << "domain head moved: " << b[i].name;
    } else {
      EXPECT_TRUE(std::ranges::equal(a[i].tensor.data(), b[i].tensor.data())) << a[i].name;
    }
  }
}

TEST(Train, BaselineAndDannConsumeIdenticalBatches) {
  auto data = generate_dataset(small_data_config());
  auto cfg = small_train_config();
  auto m1 = DiNetModel<float>::build(small_model_config(), 2);
  auto m2 = m1.clone();
  auto a = train(m1, data, cfg);
  auto b = train_source_only(m2, data, cfg);
  EXPECT_EQ(a.progress.epoch_batch_hashes, b.progress.epoch_batch_hashes);
  EXPECT_EQ(a.progress.epoch_batch_hashes.size(), cfg.epochs);
}

TEST(Train, DivergenceAborts) {
  auto data = generate_dataset(small_data_config());
  auto model = DiNetModel<float>::build(small_model_config(), 1);
  auto cfg = small_train_config();
  cfg.base_lr = 1e30;
  try {
    train(model, data, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::diverged);
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("lambda"), std::string::npos);
  }
}

TEST(Train, InterruptedThenResumedMatches) {
  auto data = generate_dataset(small_data_config());
  auto cfg = small_train_config();
  auto full_model = DiNetModel<float>::build(small_model_config(), 4);
  auto part_model = full_model.clone();
  auto full = train(full_model, data, cfg);
  TrainHooks stop;
  stop.stop_after_step = 7;
  auto part = train(part_model, data, cfg, std::nullopt, stop);
  EXPECT_FALSE(part.completed);
  EXPECT_EQ(part.progress.step, 7u);
  auto rest = train(part_model, data, cfg, part.progress);
  ASSERT_EQ(rest.progress.history.size(), full.progress.history.size());
  for (std::size_t i = 0; i < full.progress.history.size(); ++i) {
    EXPECT_EQ(rest.progress.history[i].loss_action, full.progress.history[i].loss_action);
  }
}

TEST(DomainProbe, PixelMeanFeaturesLeakDomain) {
  auto data = generate_dataset(SyntheticConfig{});
  auto frame_means = [](const std::vector<Clip>& a, const std::vector<Clip>& b, std::vector<std::vector<float>>& f,
                        std::vector<int>& d) {
    for (const auto* set : {&a, &b}) {
      for (const auto& c : *set) {
        const std::size_t frames = c.shape[1], plane = c.shape[2] * c.shape[3];
        std::vector<float> row(frames, 0.0f);
        for (std::size_t t = 0; t < frames; ++t) {
          double s = 0.0;
          for (std::size_t i = 0; i < plane; ++i) s += c.video[t * plane + i];
          row[t] = static_cast<float>(s / plane);
        }
        f.push_back(row);
        d.push_back(c.domain);
      }
    }
  };
  std::vector<std::vector<float>> train_f, test_f;
  std::vector<int> train_d, test_d;
  frame_means(data.train_source, data.train_target, train_f, train_d);
  frame_means(data.test_source, data.test_target, test_f, test_d);
  EXPECT_GE(post_hoc_domain_probe(train_f, train_d, test_f, test_d), 0.95);
}

TEST(DomainProbe, UntrainedModelWithinBounds) {
  auto data = generate_dataset(small_data_config());
  auto model = DiNetModel<float>::build(small_model_config(), 1);
  const double acc = model_domain_probe(model, data);
  EXPECT_GE(acc, 0.5 - 1e-12);
  EXPECT_LE(acc, 1.0);
}

TEST(DomainProbe, Errors) {
  std::vector<std::vector<float>> f{{1.0f}, {2.0f}};
  EXPECT_THROW(post_hoc_domain_probe(f, {0}, f, {0, 1}), Error);
  EXPECT_THROW(post_hoc_domain_probe({}, {}, f, {0, 1}), Error);
}

TEST(ExtractFeatures, DoesNotTouchRunningStats) {
  auto data = generate_dataset(small_data_config());
  auto model = DiNetModel<float>::build(small_model_config(), 1);
  train(model, data, small_train_config());
  std::vector<float> before;
  for (const auto& b : model.buffers()) before.insert(before.end(), b.tensor.data().begin(), b.tensor.data().end());
  auto f1 = extract_features(model, data.test_target, 5);
  auto f2 = extract_features(model, data.test_target, 1);
  EXPECT_EQ(f1, f2);
  std::vector<float> after;
  for (const auto& b : model.buffers()) after.insert(after.end(), b.tensor.data().begin(), b.tensor.data().end());
  EXPECT_EQ(before, after);
}

}  // namespace
}  // namespace dinet
