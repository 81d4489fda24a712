#pragma once

// Text proxy generation.
//
// For a text query t_q and one video's proxy stack P (M x d):
//   leader_0 = t_q
//   leader_i = softmax((leader_{i-1} W_Q) (P W_K)^T) (P W_V) + leader_{i-1} W_Q
//   director = delta * t_q - eta * leader_k
//   dash     = exp(theta * mean_m cos(t_q, P_m))          (scalar mode)
//            = exp(cos(t_q, P) * W_dash), elementwise      (vector mode)
//   t_p      = t_q + dash * director / |director|
//
// Each proxy depends only on its own (text, video) pair.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tvproxy/numkernel.hpp"

namespace tvproxy {

enum class DashMode { Scalar, Vector };

std::string to_string(DashMode mode);
DashMode parse_dash_mode(const std::string& text);

inline constexpr double kDirectorEpsilon = 1e-12;

struct ProjectionSet {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;

  bool operator==(const ProjectionSet&) const = default;
};

struct GeneratorConfig {
  std::size_t k = 2;
  double delta = 1.0;
  double eta = 1.0;
  DashMode dash_mode = DashMode::Scalar;
  bool scaled_attention = false;
};

struct GeneratorParams {
  std::vector<ProjectionSet> rounds;  // one per leader iteration
  double delta = 1.0;
  double eta = 1.0;
  DashMode dash_mode = DashMode::Scalar;
  double theta = 1.0;
  Matrix w_dash;  // M x d, used in vector mode
  bool scaled_attention = false;

  std::size_t k() const noexcept { return rounds.size(); }
  std::size_t dim() const noexcept { return rounds.empty() ? 0 : rounds.front().w_q.rows(); }
  std::size_t num_video_proxies() const noexcept { return w_dash.rows(); }

  // Normal(0, 1/sqrt(d)) projections and dash weights, theta = 1.
  static GeneratorParams initialize(std::size_t dim, std::size_t num_video_proxies,
                                    const GeneratorConfig& cfg, std::uint64_t seed);

  void validate() const;
  bool operator==(const GeneratorParams&) const = default;
};

// Same layout as the trainable part of GeneratorParams.
struct GeneratorGrads {
  std::vector<ProjectionSet> rounds;
  double theta = 0.0;
  Matrix w_dash;

  static GeneratorGrads zeros_like(const GeneratorParams& params);
  GeneratorGrads& operator+=(const GeneratorGrads& other);
};

using Dash = std::variant<double, Vector>;

Vector leader_step(std::span<const double> prev_leader, const Matrix& video_proxies,
                   const ProjectionSet& proj, bool scaled);
Vector leader_path(std::span<const double> text_query, const Matrix& video_proxies,
                   const GeneratorParams& params);
Vector compute_director(std::span<const double> text_query, std::span<const double> leader,
                        double delta, double eta);
double scalar_dash(std::span<const double> text_query, const Matrix& video_proxies, double theta);
Vector vector_dash(std::span<const double> text_query, const Matrix& video_proxies,
                   const Matrix& w_dash);
Vector assemble_proxy(std::span<const double> text_query, std::span<const double> director,
                      const Dash& dash);

// The whole per-pair pipeline: leader path, director, dash, assembly.
Vector generate_proxy(std::span<const double> text_query, const Matrix& video_proxies,
                      const GeneratorParams& params);

// Forward intermediates kept for the backward pass.
struct LeaderRoundTrace {
  Vector input;
  Vector query;
  Matrix keys;
  Matrix values;
  Vector weights;
};

struct ProxyTrace {
  std::vector<LeaderRoundTrace> rounds;
  Vector leader;
  Vector director;
  double director_norm = 0.0;
  Vector similarities;  // cos(t_q, P_m)
  Dash dash;
  Vector proxy;
};

ProxyTrace trace_proxy(std::span<const double> text_query, const Matrix& video_proxies,
                       const GeneratorParams& params);

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(proxy).
void backprop_proxy(const ProxyTrace& trace, std::span<const double> text_query,
                    const Matrix& video_proxies, const GeneratorParams& params,
                    std::span<const double> d_proxy, GeneratorGrads& grads);

class ProxyGrid {
 public:
  ProxyGrid(std::size_t num_texts, std::size_t num_videos, std::size_t dim);

  std::size_t num_texts() const noexcept { return num_texts_; }
  std::size_t num_videos() const noexcept { return num_videos_; }
  std::size_t dim() const noexcept { return dim_; }

  std::span<const double> at(std::size_t text, std::size_t video) const;
  std::span<double> at(std::size_t text, std::size_t video);

  // Number of times the per-pair pipeline ran to fill this grid.
  std::uint64_t pipeline_invocations() const noexcept { return invocations_; }
  void set_pipeline_invocations(std::uint64_t n) noexcept { invocations_ = n; }

  bool operator==(const ProxyGrid&) const = default;

 private:
  std::size_t num_texts_;
  std::size_t num_videos_;
  std::size_t dim_;
  std::vector<double> data_;
  std::uint64_t invocations_ = 0;
};

ProxyGrid proxy_grid(const Matrix& text_batch, std::span<const Matrix> video_batch,
                     const GeneratorParams& params, std::size_t workers = 1);

// Rethrows a pipeline failure for pair (text, video) with the indices attached.
[[noreturn]] void rethrow_with_pair(std::size_t text, std::size_t video);

// Checkpoint directory: params.json plus one TVPX file per weight matrix.
// `log_temperature` travels with the generator so a run can be resumed.
void save_params(const std::filesystem::path& dir, const GeneratorParams& params,
                 double log_temperature);
GeneratorParams load_params(const std::filesystem::path& dir, double* log_temperature = nullptr);

}  // namespace tvproxy
