#include "tvproxy/objectives.hpp"

#include <algorithm>
#include <atomic>
#include <string>
#include <vector>

#include "tvproxy/error.hpp"
#include "tvproxy/parallel.hpp"

namespace tvproxy {

namespace {

void require_square_batch(const Matrix& text_batch, std::span<const Matrix> video_batch) {
  if (text_batch.rows() != video_batch.size()) {
    throw Error(ErrorKind::NonSquareBatch, std::to_string(text_batch.rows()) + " texts vs " +
                                               std::to_string(video_batch.size()) + " videos");
  }
  if (text_batch.rows() == 0) throw Error(ErrorKind::EmptyInput, "empty batch");
}

void require_loss_inputs(const Matrix& grid, double sigma) {
  if (grid.rows() != grid.cols()) throw Error(ErrorKind::NonSquareBatch, "score grid not square");
  if (grid.rows() < 2) throw Error(ErrorKind::BatchTooSmall, "contrastive loss needs B >= 2");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw Error(ErrorKind::NonPositiveTemperature, "sigma = " + std::to_string(sigma));
  }
}

std::span<const double> retrieval_feature(const Matrix& video) { return video.row(0); }

// Softmax of grid/sigma along rows (by_rows) or columns, plus log-sum-exp per line.
struct DirectionalSoftmax {
  Matrix probs;
  std::vector<double> log_norm;
};

DirectionalSoftmax directional_softmax(const Matrix& grid, double sigma, bool by_rows) {
  const std::size_t b = grid.rows();
  DirectionalSoftmax out{Matrix(b, b), std::vector<double>(b)};
  for (std::size_t line = 0; line < b; ++line) {
    auto at = [&](std::size_t n) { return by_rows ? grid(line, n) / sigma : grid(n, line) / sigma; };
    double peak = at(0);
    for (std::size_t n = 1; n < b; ++n) peak = std::max(peak, at(n));
    double total = 0.0;
    for (std::size_t n = 0; n < b; ++n) total += std::exp(at(n) - peak);
    out.log_norm[line] = peak + std::log(total);
    for (std::size_t n = 0; n < b; ++n) {
      const double p = std::exp(at(n) - out.log_norm[line]);
      if (by_rows) {
        out.probs(line, n) = p;
      } else {
        out.probs(n, line) = p;
      }
    }
  }
  return out;
}

double directional_loss(const Matrix& grid, double sigma, const DirectionalSoftmax& sm) {
  double acc = 0.0;
  for (std::size_t i = 0; i < grid.rows(); ++i) acc += sm.log_norm[i] - grid(i, i) / sigma;
  return acc / static_cast<double>(grid.rows());
}

void check_grids(const ScoreGrids& g) {
  const std::size_t b = g.text_video.rows();
  for (const Matrix* m : {&g.text_video, &g.proxy_video, &g.positive_proxy}) {
    if (m->rows() != b || m->cols() != b) {
      throw Error(ErrorKind::NonSquareBatch, "score grids must share one B x B shape");
    }
  }
}

}  // namespace

ScoreGrids build_grids(const Matrix& text_batch, std::span<const Matrix> video_batch,
                       const GeneratorParams& params, std::size_t workers) {
  require_square_batch(text_batch, video_batch);
  const std::size_t b = text_batch.rows();
  const ProxyGrid proxies = proxy_grid(text_batch, video_batch, params, workers);

  ScoreGrids g{Matrix(b, b), Matrix(b, b), Matrix(b, b), proxies.pipeline_invocations()};
  parallel_for(b, workers, [&](std::size_t i) {
    for (std::size_t j = 0; j < b; ++j) {
      const auto p1 = retrieval_feature(video_batch[j]);
      g.text_video(i, j) = cosine_sim(text_batch.row(i), p1);
      g.proxy_video(i, j) = cosine_sim(proxies.at(i, j), p1);
      g.positive_proxy(i, j) = cosine_sim(proxies.at(i, i), p1);
    }
  });
  return g;
}

double infonce_bidirectional(const Matrix& grid, double sigma) {
  require_loss_inputs(grid, sigma);
  const double rows = directional_loss(grid, sigma, directional_softmax(grid, sigma, true));
  // The column direction is the row direction of the transpose.
  Matrix transposed(grid.cols(), grid.rows());
  for (std::size_t i = 0; i < grid.rows(); ++i) {
    for (std::size_t j = 0; j < grid.cols(); ++j) transposed(j, i) = grid(i, j);
  }
  const double cols =
      directional_loss(transposed, sigma, directional_softmax(transposed, sigma, true));
  return 0.5 * (rows + cols);
}

InfoNceGrad infonce_backward(const Matrix& grid, double sigma) {
  require_loss_inputs(grid, sigma);
  const std::size_t b = grid.rows();
  const DirectionalSoftmax by_row = directional_softmax(grid, sigma, true);
  const DirectionalSoftmax by_col = directional_softmax(grid, sigma, false);

  InfoNceGrad g;
  g.loss = infonce_bidirectional(grid, sigma);
  g.d_grid = Matrix(b, b);
  const double scale = 0.5 / (static_cast<double>(b) * sigma);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double target = i == j ? 1.0 : 0.0;
      g.d_grid(i, j) = scale * ((by_row.probs(i, j) - target) + (by_col.probs(i, j) - target));
    }
  }
  // Logits are grid / sigma, so dL/dsigma = -sum(dL/dgrid * grid) / sigma.
  double acc = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) acc += g.d_grid(i, j) * grid(i, j);
  }
  g.d_sigma = -acc / sigma;
  return g;
}

LossBreakdown loss_total(const ScoreGrids& grids, double sigma, double alpha, double beta) {
  check_grids(grids);
  LossBreakdown out;
  out.l_r = infonce_bidirectional(grids.text_video, sigma);
  out.l_p = infonce_bidirectional(grids.proxy_video, sigma);
  out.l_pos = infonce_bidirectional(grids.positive_proxy, sigma);
  out.total = out.l_r + alpha * out.l_p + beta * out.l_pos;
  out.alpha = alpha;
  out.beta = beta;
  out.sigma = sigma;
  return out;
}

LossGradients loss_backward(const Matrix& text_batch, std::span<const Matrix> video_batch,
                            const GeneratorParams& params, const Temperature& temperature,
                            const LossWeights& weights, std::size_t workers) {
  require_square_batch(text_batch, video_batch);
  const std::size_t b = text_batch.rows();
  const double sigma = temperature.sigma();

  std::vector<std::vector<ProxyTrace>> traces(b);
  std::atomic<std::uint64_t> invocations{0};
  parallel_for(b, workers, [&](std::size_t i) {
    traces[i].reserve(b);
    for (std::size_t j = 0; j < b; ++j) {
      try {
        traces[i].push_back(trace_proxy(text_batch.row(i), video_batch[j], params));
        invocations.fetch_add(1, std::memory_order_relaxed);
      } catch (const Error&) {
        rethrow_with_pair(i, j);
      }
    }
  });

  ScoreGrids grids{Matrix(b, b), Matrix(b, b), Matrix(b, b), invocations.load()};
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const auto p1 = retrieval_feature(video_batch[j]);
      grids.text_video(i, j) = cosine_sim(text_batch.row(i), p1);
      grids.proxy_video(i, j) = cosine_sim(traces[i][j].proxy, p1);
      grids.positive_proxy(i, j) = cosine_sim(traces[i][i].proxy, p1);
    }
  }

  const InfoNceGrad gr = infonce_backward(grids.text_video, sigma);
  const InfoNceGrad gp = infonce_backward(grids.proxy_video, sigma);
  const InfoNceGrad gpos = infonce_backward(grids.positive_proxy, sigma);

  LossGradients out;
  out.loss = loss_total(grids, sigma, weights.alpha, weights.beta);
  out.pipeline_invocations = grids.pipeline_invocations;
  const double d_sigma = gr.d_sigma + weights.alpha * gp.d_sigma + weights.beta * gpos.d_sigma;
  out.d_log_temperature = d_sigma * sigma;

  // Per-row partial gradients, summed afterwards in row order so the result
  // does not depend on the worker count.
  std::vector<GeneratorGrads> row_grads(b, GeneratorGrads::zeros_like(params));
  parallel_for(b, workers, [&](std::size_t i) {
    for (std::size_t j = 0; j < b; ++j) {
      const ProxyTrace& t = traces[i][j];
      Vector d_proxy =
          cosine_sim_backward(t.proxy, retrieval_feature(video_batch[j]),
                              weights.alpha * gp.d_grid(i, j))
              .d_lhs;
      if (i == j) {
        for (std::size_t jj = 0; jj < b; ++jj) {
          const Vector from_positive =
              cosine_sim_backward(t.proxy, retrieval_feature(video_batch[jj]),
                                  weights.beta * gpos.d_grid(i, jj))
                  .d_lhs;
          for (std::size_t c = 0; c < d_proxy.size(); ++c) d_proxy[c] += from_positive[c];
        }
      }
      backprop_proxy(t, text_batch.row(i), video_batch[j], params, d_proxy, row_grads[i]);
    }
  });
  out.generator = GeneratorGrads::zeros_like(params);
  for (const auto& g : row_grads) out.generator += g;
  return out;
}

}  // namespace tvproxy
