#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tvproxy/dataset.hpp"
#include "tvproxy/objectives.hpp"
#include "tvproxy/proxy_generator.hpp"

namespace tvproxy {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.2;

  void validate() const;
};

// A named, mutable view of one trainable tensor. Scalars are length-1 views.
struct ParameterRef {
  std::string name;
  std::span<double> values;
  bool decay = true;
};

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
// Moments are created on the first call and must keep their shapes afterwards.
void adamw_step(std::span<const ParameterRef> params, std::span<const std::span<const double>> grads,
                OptimizerState& state, const AdamWConfig& cfg);

// The trainable parameters in a fixed order: each round's W_Q, W_K, W_V, then
// theta (scalar dash) or W_dash (vector dash), then the log temperature.
// Matrices decay; theta and the log temperature do not.
std::vector<ParameterRef> trainable_parameters(GeneratorParams& params, Temperature& temperature);
// Gradient views in the same order as trainable_parameters.
std::vector<std::span<const double>> trainable_gradients(const GeneratorParams& params,
                                                         const GeneratorGrads& grads,
                                                         const double& d_log_temperature);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  LossWeights weights;
  GeneratorConfig generator;
  std::size_t workers = 1;

  void validate() const;
};

struct LossLogRow {
  std::uint64_t step = 0;
  LossBreakdown loss;
};

struct TrainResult {
  GeneratorParams params;
  Temperature temperature;
  std::vector<LossLogRow> log;
  std::uint64_t pipeline_invocations = 0;
};

// One optimizer step per full batch; the logged loss is the one evaluated
// before that step's update. The dataset is never modified.
TrainResult train(const EmbeddingDataset& dataset, const TrainConfig& train_cfg,
                  const AdamWConfig& adamw_cfg);

void write_loss_log(const std::filesystem::path& path, std::span<const LossLogRow> rows);

struct GradCheckInstance {
  std::size_t dim = 8;
  std::size_t num_video_proxies = 3;
  std::size_t batch_size = 4;
};

struct GradCheckReport {
  bool pass = false;
  double tolerance = 0.0;
  double max_rel_err = 0.0;
  std::string worst_param;  // "<tensor>[<flat index>]"
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

inline constexpr double kGradCheckStep = 1e-6;
// Relative errors divide by max(|analytic|, |numeric|, this floor). Below it,
// central differences at h = 1e-6 are dominated by f64 round-off (~1e-9).
inline constexpr double kGradCheckFloor = 1e-5;

// Central differences against loss_backward for every trainable scalar on a
// small synthetic instance (d <= 16, B <= 8, M <= 4).
GradCheckReport grad_check(const TrainConfig& train_cfg, const GradCheckInstance& instance,
                           double tolerance, std::uint64_t seed);

}  // namespace tvproxy
