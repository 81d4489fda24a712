#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>

#include "tvproxy/numkernel.hpp"
#include "tvproxy/proxy_generator.hpp"

namespace tvproxy {

// B x B similarity grids for one training batch (ground truth on the diagonal).
//   text_video[i][j]     = cos(t_q_i, p1_j)
//   proxy_video[i][j]    = cos(t_p(i,j), p1_j)
//   positive_proxy[i][j] = cos(t_p(i,i), p1_j)
// positive_proxy is a training-only signal; retrieval never scores (i,j)
// with the proxy built from video i.
struct ScoreGrids {
  Matrix text_video;
  Matrix proxy_video;
  Matrix positive_proxy;
  std::uint64_t pipeline_invocations = 0;
};

// sigma = exp(log_sigma) keeps the temperature positive under any update.
struct Temperature {
  double log_sigma = std::log(0.01);

  double sigma() const { return std::exp(log_sigma); }
};

struct LossWeights {
  double alpha = 0.5;
  double beta = 0.25;
};

struct LossBreakdown {
  double l_r = 0.0;
  double l_p = 0.0;
  double l_pos = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double sigma = 0.0;
};

ScoreGrids build_grids(const Matrix& text_batch, std::span<const Matrix> video_batch,
                       const GeneratorParams& params, std::size_t workers = 1);

// Mean of the row-wise and column-wise softmax cross-entropies against the
// diagonal, logits = grid / sigma.
double infonce_bidirectional(const Matrix& grid, double sigma);

struct InfoNceGrad {
  double loss = 0.0;
  Matrix d_grid;
  double d_sigma = 0.0;
};
InfoNceGrad infonce_backward(const Matrix& grid, double sigma);

LossBreakdown loss_total(const ScoreGrids& grids, double sigma, double alpha, double beta);

struct LossGradients {
  LossBreakdown loss;
  GeneratorGrads generator;
  double d_log_temperature = 0.0;
  std::uint64_t pipeline_invocations = 0;
};

// Forward and backward through proxy generation, the three grids and the
// weighted objective. Embeddings are inputs only; no gradient flows to them.
LossGradients loss_backward(const Matrix& text_batch, std::span<const Matrix> video_batch,
                            const GeneratorParams& params, const Temperature& temperature,
                            const LossWeights& weights, std::size_t workers = 1);

}  // namespace tvproxy
