#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvproxy/numkernel.hpp"
#include "tvproxy/proxy_generator.hpp"

namespace tvproxy {

enum class ScoreKind { TextOnly, Combined, Factored };

std::string to_string(ScoreKind kind);

struct ScoreMatrix {
  Matrix scores;  // texts x videos
  ScoreKind kind = ScoreKind::TextOnly;
  double gamma = 0.0;
  std::uint64_t pipeline_invocations = 0;
};

// q = t_q/|t_q| + gamma * t_p/|t_p|
struct CombinedQuery {
  Vector q;
  double text_proxy_similarity = 0.0;  // cos(t_q, t_p)
};

CombinedQuery make_combined_query(std::span<const double> text_query,
                                  std::span<const double> text_proxy, double gamma);

// cos(t_q, p1) + gamma * cos(t_p, p1); the proxy term is skipped when gamma == 0.
double combined_score(std::span<const double> text_query, std::span<const double> text_proxy,
                      std::span<const double> video_feature, double gamma);
// sqrt(1 + gamma^2 + 2 gamma cos(t_q, t_p)) * cos(q, p1). Throws ZeroVector when |q| = 0.
double factored_score(std::span<const double> text_query, std::span<const double> text_proxy,
                      std::span<const double> video_feature, double gamma);

ScoreMatrix text_only_scores(const Matrix& texts, std::span<const Matrix> videos);
// Entry (i, j) uses the proxy built from text i and video j, never video i.
ScoreMatrix combined_scores(const Matrix& texts, std::span<const Matrix> videos,
                            const GeneratorParams& params, double gamma, std::size_t workers = 1);
ScoreMatrix factored_scores(const Matrix& texts, std::span<const Matrix> videos,
                            const GeneratorParams& params, double gamma, std::size_t workers = 1);

struct IdentityCheckConfig {
  std::size_t trials = 100;
  std::size_t dim = 16;
  std::size_t num_video_proxies = 4;
  std::size_t batch = 4;
  double gamma_lo = 0.1;
  double gamma_hi = 0.8;
  double tolerance = 1e-9;
  std::uint64_t seed = 0;
  // Use t_q itself as the proxy; with gamma = -1 every trial cancels to |q| = 0.
  bool proxy_equals_query = false;
};

struct IdentityReport {
  bool pass = false;
  std::size_t trials = 0;
  std::size_t compared = 0;
  std::size_t degenerate = 0;  // trials with |q| = 0, reported rather than compared
  double max_abs_err = 0.0;
  double max_norm_err = 0.0;  // | |q|^2 - (1 + gamma^2 + 2 gamma s) |
  double tolerance = 0.0;
};

// Random embeddings, parameters and gamma per trial; PASS iff every compared
// entry satisfies |combined - factored| <= tolerance.
IdentityReport identity_check(const IdentityCheckConfig& cfg);

inline constexpr const char* kTieRule = "strict-greater";

struct RetrievalReport {
  double recall_at_1 = 0.0;  // percentages
  double recall_at_5 = 0.0;
  double recall_at_10 = 0.0;
  std::size_t median_rank = 0;
  double mean_rank = 0.0;
  std::vector<std::size_t> ranks;  // 1-based, per text
  std::vector<std::size_t> ground_truth;
};

// rank = 1 + #videos scoring strictly above the ground truth.
RetrievalReport evaluate(const Matrix& scores, std::span<const std::size_t> ground_truth);

// Writes report.json, scores.csv and ranks.csv into an existing directory.
// `extra` is merged into report.json (config echo).
void export_report(const RetrievalReport& report, const ScoreMatrix& scores,
                   const std::filesystem::path& dir, const nlohmann::json& extra = {});

nlohmann::json report_to_json(const RetrievalReport& report, const ScoreMatrix& scores);

}  // namespace tvproxy
