#include "tvproxy/retrieval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>

#include "tvproxy/error.hpp"
#include "tvproxy/parallel.hpp"

namespace tvproxy {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void require_videos(const Matrix& texts, std::span<const Matrix> videos) {
  if (texts.rows() == 0 || videos.empty()) {
    throw Error(ErrorKind::EmptyInput, "scoring needs at least one text and one video");
  }
  for (const Matrix& v : videos) {
    if (v.rows() == 0 || v.cols() != texts.cols()) {
      throw Error(ErrorKind::ShapeMismatch, "video proxy stack does not match text dim");
    }
  }
}

template <typename EntryFn>
ScoreMatrix score_pairs(const Matrix& texts, std::span<const Matrix> videos,
                        const GeneratorParams& params, double gamma, ScoreKind kind,
                        std::size_t workers, EntryFn entry) {
  require_videos(texts, videos);
  if (!std::isfinite(gamma)) throw Error(ErrorKind::InvalidConfig, "gamma must be finite");
  params.validate();
  ScoreMatrix out{Matrix(texts.rows(), videos.size()), kind, gamma, 0};
  std::atomic<std::uint64_t> invocations{0};
  parallel_for(texts.rows(), workers, [&](std::size_t i) {
    for (std::size_t j = 0; j < videos.size(); ++j) {
      try {
        const Vector proxy = generate_proxy(texts.row(i), videos[j], params);
        invocations.fetch_add(1, std::memory_order_relaxed);
        out.scores(i, j) = entry(texts.row(i), proxy, videos[j].row(0));
      } catch (const Error&) {
        rethrow_with_pair(i, j);
      }
    }
  });
  out.pipeline_invocations = invocations.load();
  return out;
}

}  // namespace

std::string to_string(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::TextOnly: return "text_only";
    case ScoreKind::Combined: return "combined";
    case ScoreKind::Factored: return "factored";
  }
  return "unknown";
}

CombinedQuery make_combined_query(std::span<const double> text_query,
                                  std::span<const double> text_proxy, double gamma) {
  const Vector tq = normalized(text_query);
  const Vector tp = normalized(text_proxy);
  CombinedQuery out;
  out.q.resize(tq.size());
  for (std::size_t c = 0; c < tq.size(); ++c) out.q[c] = tq[c] + gamma * tp[c];
  out.text_proxy_similarity = cosine_sim(text_query, text_proxy);
  return out;
}

double combined_score(std::span<const double> text_query, std::span<const double> text_proxy,
                      std::span<const double> video_feature, double gamma) {
  const double base = cosine_sim(text_query, video_feature);
  if (gamma == 0.0) return base;
  return base + gamma * cosine_sim(text_proxy, video_feature);
}

double factored_score(std::span<const double> text_query, std::span<const double> text_proxy,
                      std::span<const double> video_feature, double gamma) {
  const CombinedQuery cq = make_combined_query(text_query, text_proxy, gamma);
  const double magnitude_sq = 1.0 + gamma * gamma + 2.0 * gamma * cq.text_proxy_similarity;
  // cosine_sim raises ZeroVector when q cancels out.
  const double direction = cosine_sim(cq.q, video_feature);
  return std::sqrt(std::max(magnitude_sq, 0.0)) * direction;
}

ScoreMatrix text_only_scores(const Matrix& texts, std::span<const Matrix> videos) {
  require_videos(texts, videos);
  ScoreMatrix out{Matrix(texts.rows(), videos.size()), ScoreKind::TextOnly, 0.0, 0};
  for (std::size_t i = 0; i < texts.rows(); ++i) {
    for (std::size_t j = 0; j < videos.size(); ++j) {
      out.scores(i, j) = cosine_sim(texts.row(i), videos[j].row(0));
    }
  }
  return out;
}

ScoreMatrix combined_scores(const Matrix& texts, std::span<const Matrix> videos,
                            const GeneratorParams& params, double gamma, std::size_t workers) {
  return score_pairs(texts, videos, params, gamma, ScoreKind::Combined, workers,
                     [gamma](auto tq, const Vector& tp, auto p1) {
                       return combined_score(tq, tp, p1, gamma);
                     });
}

ScoreMatrix factored_scores(const Matrix& texts, std::span<const Matrix> videos,
                            const GeneratorParams& params, double gamma, std::size_t workers) {
  return score_pairs(texts, videos, params, gamma, ScoreKind::Factored, workers,
                     [gamma](auto tq, const Vector& tp, auto p1) {
                       return factored_score(tq, tp, p1, gamma);
                     });
}

IdentityReport identity_check(const IdentityCheckConfig& cfg) {
  if (cfg.trials < 1) throw Error(ErrorKind::InvalidConfig, "trials must be >= 1");
  if (cfg.dim < 2 || cfg.num_video_proxies < 1 || cfg.batch < 1) {
    throw Error(ErrorKind::InvalidConfig, "identity check shape");
  }
  if (!(cfg.gamma_lo <= cfg.gamma_hi) || !std::isfinite(cfg.gamma_lo) ||
      !std::isfinite(cfg.gamma_hi)) {
    throw Error(ErrorKind::InvalidConfig, "gamma range");
  }
  if (!(cfg.tolerance >= 0.0)) throw Error(ErrorKind::InvalidConfig, "tolerance must be >= 0");

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> gamma_dist(cfg.gamma_lo, cfg.gamma_hi);
  std::bernoulli_distribution coin(0.5);

  IdentityReport report;
  report.trials = cfg.trials;
  report.tolerance = cfg.tolerance;
  for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
    Matrix texts(cfg.batch, cfg.dim);
    for (double& v : texts.values()) v = gauss(rng);
    std::vector<Matrix> videos;
    for (std::size_t j = 0; j < cfg.batch; ++j) {
      Matrix stack(cfg.num_video_proxies, cfg.dim);
      for (double& v : stack.values()) v = gauss(rng);
      videos.push_back(std::move(stack));
    }
    GeneratorConfig gen;
    gen.dash_mode = coin(rng) ? DashMode::Scalar : DashMode::Vector;
    const GeneratorParams params =
        GeneratorParams::initialize(cfg.dim, cfg.num_video_proxies, gen, rng());
    const double gamma = gamma_dist(rng);

    try {
      for (std::size_t i = 0; i < cfg.batch; ++i) {
        for (std::size_t j = 0; j < cfg.batch; ++j) {
          const Vector tp = cfg.proxy_equals_query
                                ? Vector(texts.row(i).begin(), texts.row(i).end())
                                : generate_proxy(texts.row(i), videos[j], params);
          const double direct = combined_score(texts.row(i), tp, videos[j].row(0), gamma);
          const double factored = factored_score(texts.row(i), tp, videos[j].row(0), gamma);
          const CombinedQuery cq = make_combined_query(texts.row(i), tp, gamma);
          const double expected_sq = 1.0 + gamma * gamma + 2.0 * gamma * cq.text_proxy_similarity;
          report.max_abs_err = std::max(report.max_abs_err, std::abs(direct - factored));
          report.max_norm_err =
              std::max(report.max_norm_err, std::abs(dot(cq.q, cq.q) - expected_sq));
        }
      }
      ++report.compared;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ZeroVector && e.kind() != ErrorKind::DegenerateDirector) throw;
      ++report.degenerate;
    }
  }
  report.pass = report.compared > 0 && report.max_abs_err <= cfg.tolerance;
  return report;
}

RetrievalReport evaluate(const Matrix& scores, std::span<const std::size_t> ground_truth) {
  if (ground_truth.size() != scores.rows()) {
    throw Error(ErrorKind::MissingGroundTruth, std::to_string(ground_truth.size()) +
                                                   " ground-truth ids for " +
                                                   std::to_string(scores.rows()) + " texts");
  }
  if (scores.rows() == 0) throw Error(ErrorKind::EmptyInput, "no texts to evaluate");
  RetrievalReport r;
  r.ground_truth.assign(ground_truth.begin(), ground_truth.end());
  r.ranks.resize(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    if (ground_truth[i] >= scores.cols()) {
      throw Error(ErrorKind::MissingGroundTruth, "text " + std::to_string(i) +
                                                     " points at missing video " +
                                                     std::to_string(ground_truth[i]));
    }
    const double target = scores(i, ground_truth[i]);
    std::size_t above = 0;
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (scores(i, j) > target) ++above;
    }
    r.ranks[i] = above + 1;
  }
  const double n = static_cast<double>(r.ranks.size());
  auto recall = [&](std::size_t k) {
    const auto hits = std::count_if(r.ranks.begin(), r.ranks.end(),
                                    [k](std::size_t rank) { return rank <= k; });
    return 100.0 * static_cast<double>(hits) / n;
  };
  r.recall_at_1 = recall(1);
  r.recall_at_5 = recall(5);
  r.recall_at_10 = recall(10);
  std::vector<std::size_t> sorted = r.ranks;
  std::sort(sorted.begin(), sorted.end());
  r.median_rank = sorted[(sorted.size() - 1) / 2];
  double total = 0.0;
  for (std::size_t rank : r.ranks) total += static_cast<double>(rank);
  r.mean_rank = total / n;
  return r;
}

nlohmann::json report_to_json(const RetrievalReport& report, const ScoreMatrix& scores) {
  nlohmann::json j;
  j["recall_at"] = {{"1", report.recall_at_1}, {"5", report.recall_at_5}, {"10", report.recall_at_10}};
  j["mdr"] = report.median_rank;
  j["mnr"] = report.mean_rank;
  j["gamma"] = scores.gamma;
  j["n_text"] = scores.scores.rows();
  j["n_video"] = scores.scores.cols();
  j["tie_rule"] = kTieRule;
  j["score_kind"] = to_string(scores.kind);
  return j;
}

void export_report(const RetrievalReport& report, const ScoreMatrix& scores,
                   const std::filesystem::path& dir, const nlohmann::json& extra) {
  std::error_code ec;
  if (dir.empty() || !std::filesystem::is_directory(dir, ec)) {
    throw Error(ErrorKind::IoError, "report directory \"" + dir.string() + "\" does not exist");
  }
  nlohmann::json j = report_to_json(report, scores);
  if (!extra.is_null()) j["config"] = extra;

  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("report.json");
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::IoError, "write failed for report.json");
  }
  {
    auto out = open("scores.csv");
    out << "text_id";
    for (std::size_t v = 0; v < scores.scores.cols(); ++v) out << ",video_" << v;
    out << '\n';
    for (std::size_t t = 0; t < scores.scores.rows(); ++t) {
      out << t;
      for (std::size_t v = 0; v < scores.scores.cols(); ++v) {
        out << ',' << format_double(scores.scores(t, v));
      }
      out << '\n';
    }
    if (!out) throw Error(ErrorKind::IoError, "write failed for scores.csv");
  }
  {
    auto out = open("ranks.csv");
    out << "text_id,video_id,rank\n";
    for (std::size_t t = 0; t < report.ranks.size(); ++t) {
      out << t << ',' << (t < report.ground_truth.size() ? report.ground_truth[t] : 0) << ','
          << report.ranks[t] << '\n';
    }
    if (!out) throw Error(ErrorKind::IoError, "write failed for ranks.csv");
  }
}

}  // namespace tvproxy
