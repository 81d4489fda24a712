#include "tvproxy/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "tvproxy/error.hpp"

namespace tvproxy {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void AdamWConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorKind::InvalidConfig, "lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "AdamW betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw Error(ErrorKind::InvalidConfig, "AdamW eps must be > 0");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw Error(ErrorKind::InvalidConfig, "weight_decay must be >= 0");
  }
}

void adamw_step(std::span<const ParameterRef> params, std::span<const std::span<const double>> grads,
                OptimizerState& state, const AdamWConfig& cfg) {
  cfg.validate();
  if (params.size() != grads.size()) {
    throw Error(ErrorKind::ShapeMismatch, std::to_string(params.size()) + " parameters vs " +
                                              std::to_string(grads.size()) + " gradients");
  }
  if (state.first_moment.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.values.size(), 0.0);
      state.second_moment.emplace_back(p.values.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw Error(ErrorKind::ShapeMismatch, "optimizer state tracks a different parameter list");
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].values.size() != grads[t].size() ||
        params[t].values.size() != state.first_moment[t].size()) {
      throw Error(ErrorKind::ShapeMismatch, "gradient/moment shape for " + params[t].name);
    }
  }

  ++state.step;
  const double step = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, step);
  const double correction2 = 1.0 - std::pow(cfg.beta2, step);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].values;
    auto& m = state.first_moment[t];
    auto& v = state.second_moment[t];
    const double decay = params[t].decay ? cfg.weight_decay : 0.0;
    for (std::size_t n = 0; n < values.size(); ++n) {
      const double g = grads[t][n];
      m[n] = cfg.beta1 * m[n] + (1.0 - cfg.beta1) * g;
      v[n] = cfg.beta2 * v[n] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[n] / correction1;
      const double v_hat = v[n] / correction2;
      values[n] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.lr * decay * values[n];
    }
  }
}

std::vector<ParameterRef> trainable_parameters(GeneratorParams& params, Temperature& temperature) {
  std::vector<ParameterRef> refs;
  for (std::size_t i = 0; i < params.rounds.size(); ++i) {
    const std::string prefix = "round" + std::to_string(i) + ".";
    refs.push_back({prefix + "w_q", params.rounds[i].w_q.values(), true});
    refs.push_back({prefix + "w_k", params.rounds[i].w_k.values(), true});
    refs.push_back({prefix + "w_v", params.rounds[i].w_v.values(), true});
  }
  if (params.dash_mode == DashMode::Scalar) {
    refs.push_back({"theta", std::span<double>(&params.theta, 1), false});
  } else {
    refs.push_back({"w_dash", params.w_dash.values(), true});
  }
  refs.push_back({"log_temperature", std::span<double>(&temperature.log_sigma, 1), false});
  return refs;
}

std::vector<std::span<const double>> trainable_gradients(const GeneratorParams& params,
                                                         const GeneratorGrads& grads,
                                                         const double& d_log_temperature) {
  std::vector<std::span<const double>> views;
  for (const auto& r : grads.rounds) {
    views.push_back(r.w_q.values());
    views.push_back(r.w_k.values());
    views.push_back(r.w_v.values());
  }
  if (params.dash_mode == DashMode::Scalar) {
    views.emplace_back(&grads.theta, 1);
  } else {
    views.push_back(grads.w_dash.values());
  }
  views.emplace_back(&d_log_temperature, 1);
  return views;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorKind::InvalidConfig, "epochs must be >= 1");
  if (batch_size < 2) throw Error(ErrorKind::BatchTooSmall, "batch_size must be >= 2");
  if (generator.k < 1) throw Error(ErrorKind::InvalidConfig, "k must be >= 1");
  if (workers < 1) throw Error(ErrorKind::InvalidConfig, "workers must be >= 1");
  for (double v : {weights.alpha, weights.beta, generator.delta, generator.eta}) {
    if (!std::isfinite(v)) throw Error(ErrorKind::InvalidConfig, "non-finite hyperparameter");
  }
}

TrainResult train(const EmbeddingDataset& dataset, const TrainConfig& train_cfg,
                  const AdamWConfig& adamw_cfg) {
  train_cfg.validate();
  adamw_cfg.validate();
  if (train_cfg.batch_size > dataset.size()) {
    throw Error(ErrorKind::InvalidConfig, "batch_size exceeds dataset size");
  }

  TrainResult result;
  result.params = GeneratorParams::initialize(dataset.dim(), dataset.num_video_proxies(),
                                              train_cfg.generator, splitmix64(train_cfg.seed));
  OptimizerState state;
  auto refs = trainable_parameters(result.params, result.temperature);

  for (std::size_t epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const auto batches = make_batches(dataset, train_cfg.batch_size,
                                      splitmix64(train_cfg.seed ^ splitmix64(epoch + 1)));
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const Matrix texts = dataset.text_batch(batches[b]);
      const std::vector<Matrix> videos = dataset.video_batch(batches[b]);
      LossGradients g;
      try {
        g = loss_backward(texts, videos, result.params, result.temperature, train_cfg.weights,
                          train_cfg.workers);
      } catch (const Error& e) {
        throw Error(e.kind(), "epoch " + std::to_string(epoch) + " batch " + std::to_string(b) +
                                  ": " + e.what());
      }
      result.pipeline_invocations += g.pipeline_invocations;
      result.log.push_back({state.step, g.loss});
      const auto grads = trainable_gradients(result.params, g.generator, g.d_log_temperature);
      adamw_step(refs, grads, state, adamw_cfg);
    }
  }
  return result;
}

void write_loss_log(const std::filesystem::path& path, std::span<const LossLogRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << "step,l_r,l_p,l_pos,total,sigma\n";
  for (const auto& r : rows) {
    out << r.step << ',' << format_double(r.loss.l_r) << ',' << format_double(r.loss.l_p) << ','
        << format_double(r.loss.l_pos) << ',' << format_double(r.loss.total) << ','
        << format_double(r.loss.sigma) << '\n';
  }
  if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

GradCheckReport grad_check(const TrainConfig& train_cfg, const GradCheckInstance& instance,
                           double tolerance, std::uint64_t seed) {
  if (instance.dim > 16 || instance.batch_size > 8 || instance.num_video_proxies > 4) {
    throw Error(ErrorKind::InvalidConfig, "gradient check is limited to d <= 16, B <= 8, M <= 4");
  }
  if (instance.batch_size < 2) throw Error(ErrorKind::BatchTooSmall, "gradient check needs B >= 2");

  SynthConfig synth;
  synth.n_pairs = instance.batch_size;
  synth.dim = instance.dim;
  synth.num_video_proxies = instance.num_video_proxies;
  synth.seed = seed;
  const EmbeddingDataset ds = generate_synthetic(synth);
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Matrix texts = ds.text_batch(all);
  const std::vector<Matrix> videos = ds.video_batch(all);

  GeneratorParams params = GeneratorParams::initialize(instance.dim, instance.num_video_proxies,
                                                       train_cfg.generator, splitmix64(seed));
  Temperature temperature;
  const LossWeights& weights = train_cfg.weights;

  const LossGradients analytic = loss_backward(texts, videos, params, temperature, weights);
  const auto grads = trainable_gradients(params, analytic.generator, analytic.d_log_temperature);
  auto refs = trainable_parameters(params, temperature);

  auto total_loss = [&] {
    const ScoreGrids g = build_grids(texts, videos, params);
    return loss_total(g, temperature.sigma(), weights.alpha, weights.beta).total;
  };

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t t = 0; t < refs.size(); ++t) {
    for (std::size_t n = 0; n < refs[t].values.size(); ++n) {
      double& slot = refs[t].values[n];
      const double saved = slot;
      slot = saved + kGradCheckStep;
      const double up = total_loss();
      slot = saved - kGradCheckStep;
      const double down = total_loss();
      slot = saved;

      const double numeric = (up - down) / (2.0 * kGradCheckStep);
      const double exact = grads[t][n];
      const double scale = std::max({std::abs(exact), std::abs(numeric), kGradCheckFloor});
      const double rel = std::abs(exact - numeric) / scale;
      ++report.checked;
      if (rel > report.max_rel_err || report.worst_param.empty()) {
        report.max_rel_err = rel;
        report.worst_param = refs[t].name + "[" + std::to_string(n) + "]";
        report.worst_analytic = exact;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err <= tolerance;
  return report;
}

}  // namespace tvproxy
