#include "dinet/gradcheck_suite.hpp"

#include <random>

#include "dinet/model.hpp"
#include "dinet/ops.hpp"
#include "dinet/train.hpp"

namespace dinet {

namespace {

using Rng = std::mt19937_64;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  Tensor<double> t(std::move(shape), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

Tensor<double> leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return random_tensor(std::move(shape), rng, lo, hi, true);
}

Activation random_activation(Rng& rng) {
  static constexpr Activation all[] = {Activation::identity, Activation::relu, Activation::tanh, Activation::sigmoid};
  return all[pick(rng, 0, 3)];
}

// Scalar losses below weight every output element with a fixed random
// coefficient so each element carries its own upstream gradient.

std::vector<int> random_labels(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<int> out(n);
  for (auto& l : out) l = static_cast<int>(pick(rng, 0, k - 1));
  return out;
}

using Case = std::function<double(Rng&, const GradTolerance&)>;

double check(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> wrt, const GradTolerance& tol) {
  return check_gradients<double>(loss, std::move(wrt), 1e-6, static_cast<std::size_t>(-1), tol);
}

double conv_case(Rng& rng, const GradTolerance& tol) {
  const std::size_t groups = pick(rng, 1, 3);
  const std::size_t cin = groups * pick(rng, 1, 2);
  const std::size_t cout = groups * pick(rng, 1, 2);
  Triple k, s, p, extent;
  for (int d = 0; d < 3; ++d) {
    k[d] = pick(rng, 1, 3);
    s[d] = pick(rng, 1, 2);
    p[d] = pick(rng, 0, k[d] - 1);
    extent[d] = pick(rng, k[d], k[d] + 3);
  }
  auto x = leaf({pick(rng, 1, 2), cin, extent[0], extent[1], extent[2]}, rng);
  auto layer = Conv3dLayer<double>::create(cin, cout, k, s, p, groups);
  layer.weights = leaf(layer.weights.shape(), rng);
  layer.bias = leaf(layer.bias.shape(), rng);
  const auto act = random_activation(rng);
  auto w = random_tensor(conv3d(x.detach(), layer, act).shape(), rng);
  return check([&] { return sum(mul(conv3d(x, layer, act), w)); }, {x, layer.weights, layer.bias}, tol);
}

double batchnorm_case(Rng& rng, const GradTolerance& tol) {
  const std::size_t c = pick(rng, 1, 3);
  auto x = leaf({pick(rng, 2, 3), c, pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 2, 3)}, rng, -1.0, 2.0);
  auto bn = BatchNorm3dLayer<double>::create(c);
  bn.gamma = leaf({c}, rng, 0.5, 1.5);
  bn.beta = leaf({c}, rng);
  bn.running_mean = random_tensor({c}, rng);
  bn.running_var = random_tensor({c}, rng, 0.5, 1.5);
  bn.mode = pick(rng, 0, 1) ? BatchNormMode::train : BatchNormMode::eval;
  auto w = random_tensor(x.shape(), rng);
  return check([&] { return sum(mul(batchnorm3d(x, bn), w)); }, {x, bn.gamma, bn.beta}, tol);
}

double pool_case(PoolKind kind, Rng& rng, const GradTolerance& tol) {
  Triple win, stride, extent;
  for (int d = 0; d < 3; ++d) {
    win[d] = pick(rng, 1, 2);
    stride[d] = pick(rng, 1, 2);
    extent[d] = pick(rng, win[d], win[d] + 3);
  }
  auto x = leaf({pick(rng, 1, 2), pick(rng, 1, 3), extent[0], extent[1], extent[2]}, rng);
  auto w = random_tensor(pool3d(x.detach(), kind, win, stride).shape(), rng);
  return check([&] { return sum(mul(pool3d(x, kind, win, stride), w)); }, {x}, tol);
}

double global_pool_case(Rng& rng, const GradTolerance& tol) {
  auto x = leaf({pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
  auto w = random_tensor(global_avg_pool(x.detach()).shape(), rng);
  return check([&] { return sum(mul(global_avg_pool(x), w)); }, {x}, tol);
}

double linear_case(Rng& rng, const GradTolerance& tol) {
  const std::size_t in = pick(rng, 1, 6), out = pick(rng, 1, 5);
  auto x = leaf({pick(rng, 1, 4), in}, rng);
  auto layer = LinearLayer<double>::create(in, out);
  layer.weights = leaf(layer.weights.shape(), rng);
  layer.bias = leaf(layer.bias.shape(), rng);
  const auto act = random_activation(rng);
  auto w = random_tensor({x.dim(0), out}, rng);
  return check([&] { return sum(mul(linear(x, layer, act), w)); }, {x, layer.weights, layer.bias}, tol);
}

double matmul_case(Rng& rng, const GradTolerance& tol) {
  const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
  auto a = leaf({m, k}, rng);
  auto b = leaf({k, n}, rng);
  auto w = random_tensor({m, n}, rng);
  return check([&] { return sum(mul(matmul(a, b), w)); }, {a, b}, tol);
}

double elementwise_case(Rng& rng, const GradTolerance& tol) {
  const Shape shape{pick(rng, 1, 4), pick(rng, 1, 4)};
  auto a = leaf(shape, rng);
  auto b = leaf(shape, rng);
  const double f = uniform(rng, -2.0, 2.0);
  auto w = random_tensor(shape, rng);
  // add, sub, mul, scale and mean in one expression.
  return check([&] { return add(sum(mul(sub(mul(a, b), scale(add(a, b), f)), w)), mean(a)); }, {a, b}, tol);
}

double rows_case(Rng& rng, const GradTolerance& tol) {
  const std::size_t cols = pick(rng, 1, 4), ra = pick(rng, 1, 3), rb = pick(rng, 1, 3);
  auto a = leaf({ra, cols}, rng);
  auto b = leaf({rb, cols}, rng);
  const std::size_t begin = pick(rng, 0, ra + rb - 1);
  const std::size_t end = pick(rng, begin + 1, ra + rb);
  auto w = random_tensor({end - begin, cols}, rng);
  return check([&] { return sum(mul(slice_rows(concat_rows(a, b), begin, end), w)); }, {a, b}, tol);
}

double softmax_ce_case(Rng& rng, const GradTolerance& tol) {
  const std::size_t n = pick(rng, 1, 5), k = pick(rng, 2, 12);
  auto logits = leaf({n, k}, rng, -3.0, 3.0);
  const auto labels = random_labels(n, k, rng);
  return check([&] { return softmax_cross_entropy(logits, std::span<const int>(labels)); }, {logits}, tol);
}

double bce_case(Rng& rng, const GradTolerance& tol) {
  const std::size_t n = pick(rng, 1, 6);
  auto logits = leaf({n, 1}, rng, -6.0, 6.0);
  const auto labels = random_labels(n, 2, rng);
  return check([&] { return binary_cross_entropy_with_logit(logits, std::span<const int>(labels)); }, {logits}, tol);
}

// Feature layer, reversal node, domain layer, logistic loss. The analytic
// gradient reaching the feature layer must equal -lambda times the plain
// derivative of the domain loss; the domain layer keeps its plain gradient.
double grl_case(Rng& rng, const GradTolerance& tol) {
  const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 4), hidden = pick(rng, 1, 4);
  const double lambda = pick(rng, 0, 3) == 0 ? 0.0 : uniform(rng, 0.0, 1.0);
  auto x = random_tensor({n, in}, rng);
  auto f = LinearLayer<double>::create(in, hidden);
  f.weights = leaf(f.weights.shape(), rng);
  f.bias = leaf(f.bias.shape(), rng);
  auto d = LinearLayer<double>::create(hidden, 1);
  d.weights = leaf(d.weights.shape(), rng);
  d.bias = leaf(d.bias.shape(), rng);
  const auto labels = random_labels(n, 2, rng);
  auto domain_loss = [&](bool reversed) {
    auto h = linear(x, f, Activation::tanh);
    if (reversed) h = gradient_reversal(h, lambda);
    return binary_cross_entropy_with_logit(linear(h, d), std::span<const int>(labels));
  };
  // Domain head against plain differences.
  double worst = check([&] { return domain_loss(true); }, {d.weights, d.bias}, tol);
  // Feature layer against differences of -lambda * L_d.
  std::vector<Tensor<double>> feature{f.weights, f.bias};
  zero_grads(feature);
  {
    Graph<double> g;
    backward(domain_loss(true));
  }
  std::vector<double> analytic;
  for (auto& t : feature) analytic.insert(analytic.end(), t.grad().begin(), t.grad().end());
  std::vector<double> numeric;
  for (auto& t : feature) {
    const auto fd = finite_diff_grad<double>([&](const Tensor<double>& probe) {
      auto values = t.mutable_data();
      std::vector<double> saved(values.begin(), values.end());
      std::copy(probe.data().begin(), probe.data().end(), values.begin());
      const double v = -lambda * domain_loss(false).item();
      std::copy(saved.begin(), saved.end(), values.begin());
      return v;
    }, t, 1e-6);
    numeric.insert(numeric.end(), fd.data().begin(), fd.data().end());
  }
  zero_grads(feature);
  return std::max(worst, max_gradient_error(analytic, numeric, tol));
}

ModelConfig tiny_model(Rng& rng) {
  ModelConfig c;
  c.input_shape = {1, 4, 6, 6};
  const std::size_t card = pick(rng, 1, 2);
  c.blocks = {{BlockKind::plain, 2, 1, false, 1}, {BlockKind::grouped_residual, 2 * card, 1, pick(rng, 0, 1) == 1, card}};
  c.feature_dim = pick(rng, 3, 5);
  c.num_actions = pick(rng, 2, 4);
  c.domain_hidden = {pick(rng, 2, 4), pick(rng, 2, 3)};
  return c;
}

// One full training step on a two-clip batch (one source, one target). The
// feature and action parameters follow L_a - lambda*L_d; the domain head
// follows L_d.
double model_case(Rng& rng, const GradTolerance& tol) {
  const auto cfg = tiny_model(rng);
  auto model = DiNetModel<double>::build(cfg, rng());
  // Zero-initialized biases can leave a ReLU input at exactly 0, where the
  // loss has a kink and central differences are meaningless.
  for (const auto& p : model.parameters()) {
    if (p.tensor.rank() == 1) {
      Tensor<double> handle = p.tensor;
      for (auto& v : handle.mutable_data()) v += uniform(rng, -0.2, 0.2);
    }
  }
  StepBatch<double> batch;
  batch.clips = random_tensor({2, 1, 4, 6, 6}, rng, 0.0, 1.0);
  batch.source_actions = {static_cast<int>(pick(rng, 0, cfg.num_actions - 1))};
  batch.domains = {kSourceDomain, kTargetDomain};
  const double lambda = uniform(rng, 0.1, 1.0);
  const auto step = compute_step_gradients(model, batch, lambda, TrainMode::dann);

  auto losses = [&] {
    auto features = model.forward_features(batch.clips, BatchNormMode::train);
    const double la = softmax_cross_entropy(model.forward_action(slice_rows(features, 0, 1)),
                                            std::span<const int>(batch.source_actions)).item();
    const double ld = binary_cross_entropy_with_logit(model.forward_domain(features, lambda),
                                                      std::span<const int>(batch.domains)).item();
    return std::pair{la, ld};
  };
  double worst = 0.0;
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<double> handle = params[i].tensor;
    auto data = handle.mutable_data();
    const bool domain = params[i].partition == Partition::domain;
    const std::size_t n = data.size();
    const std::size_t stride = n > 12 ? (n + 11) / 12 : 1;
    for (std::size_t e = 0; e < n; e += stride) {
      const double saved = data[e];
      data[e] = saved + 1e-6;
      auto [la_up, ld_up] = losses();
      data[e] = saved - 1e-6;
      auto [la_dn, ld_dn] = losses();
      data[e] = saved;
      const double up = domain ? ld_up : la_up - lambda * ld_up;
      const double dn = domain ? ld_dn : la_dn - lambda * ld_dn;
      worst = std::max(worst, gradient_error(step.grads[i][e], (up - dn) / 2e-6, tol));
    }
  }
  return worst;
}

struct FaultGuard {
  explicit FaultGuard(bool on) : on_(on) {
    if (on_) testing::set_conv3d_backward_fault(true);
  }
  ~FaultGuard() {
    if (on_) testing::set_conv3d_backward_fault(false);
  }
  bool on_;
};

}  // namespace

const char* grad_check_scope_name(GradCheckScope scope) { return scope == GradCheckScope::ops ? "ops" : "model"; }

GradCheckScope parse_grad_check_scope(const std::string& name) {
  if (name == "ops") return GradCheckScope::ops;
  if (name == "model") return GradCheckScope::model;
  fail(ErrorCode::invalid_argument, "unknown grad-check scope '" + name + "' (expected ops or model)");
}

bool GradCheckReport::passed() const {
  return !results.empty() && std::ranges::all_of(results, [](const auto& r) { return r.passed; });
}

std::vector<std::string> GradCheckReport::failing() const {
  std::vector<std::string> out;
  for (const auto& r : results) {
    if (!r.passed) out.push_back(r.op);
  }
  return out;
}

GradCheckReport run_grad_check(GradCheckScope scope, const GradCheckOptions& options) {
  if (options.configs_per_op == 0) fail(ErrorCode::invalid_argument, "configs_per_op must be positive");
  std::vector<std::pair<std::string, Case>> cases;
  if (scope == GradCheckScope::ops) {
    cases = {
        {"conv3d", conv_case},
        {"batchnorm3d", batchnorm_case},
        {"max_pool3d", [](Rng& r, const GradTolerance& t) { return pool_case(PoolKind::max, r, t); }},
        {"avg_pool3d", [](Rng& r, const GradTolerance& t) { return pool_case(PoolKind::avg, r, t); }},
        {"global_avg_pool", global_pool_case},
        {"linear", linear_case},
        {"matmul", matmul_case},
        {"elementwise", elementwise_case},
        {"slice_concat_rows", rows_case},
        {"softmax_cross_entropy", softmax_ce_case},
        {"binary_cross_entropy", bce_case},
        {"gradient_reversal", grl_case},
    };
  } else {
    cases = {{"dann_step", model_case}};
  }
  FaultGuard guard(options.inject_conv_fault);
  GradCheckReport report;
  report.scope = scope;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    Rng rng(options.seed * 0x9E3779B97F4A7C15ULL + c);
    OpCheckResult r;
    r.op = cases[c].first;
    // Whole-model cases are far more expensive; a handful covers them.
    const std::size_t configs =
        scope == GradCheckScope::ops ? options.configs_per_op : std::min<std::size_t>(options.configs_per_op, 5);
    for (std::size_t i = 0; i < configs; ++i) {
      r.max_error = std::max(r.max_error, cases[c].second(rng, options.tolerance));
      ++r.configs;
    }
    r.passed = r.max_error <= options.tolerance.relative;
    report.results.push_back(r);
  }
  return report;
}

}  // namespace dinet
