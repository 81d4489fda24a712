#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>

#include <json.hpp>

#include "test_support.hpp"
#include "tvproxy/dataset.hpp"
#include "tvproxy/error.hpp"
#include "tvproxy/retrieval.hpp"

using namespace tvproxy;
using tvproxy::testing::random_matrix;
using tvproxy::testing::random_vector;
using tvproxy::testing::TempDir;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected tvproxy::Error");
  return ErrorKind::IoError;
}

struct Instance {
  Matrix texts;
  std::vector<Matrix> videos;
  GeneratorParams params;
};

Instance random_instance(std::size_t nt, std::size_t nv, std::size_t d, std::size_t m,
                         std::mt19937_64& rng, DashMode mode = DashMode::Scalar) {
  GeneratorConfig cfg;
  cfg.dash_mode = mode;
  Instance inst{random_matrix(nt, d, rng), {}, GeneratorParams::initialize(d, m, cfg, rng())};
  for (std::size_t j = 0; j < nv; ++j) inst.videos.push_back(random_matrix(m, d, rng));
  return inst;
}

// A 3 x 10 matrix whose ground-truth column 0 has ranks 1, 2 and 6.
Matrix ranked_matrix() {
  Matrix s(3, 10, 0.0);
  for (std::size_t i = 0; i < 3; ++i) s(i, 0) = 0.5;
  s(1, 3) = 0.9;
  for (std::size_t j = 1; j <= 5; ++j) s(2, j) = 0.7;
  return s;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("combined_score examples") {
  // cos = 0.5 and 0.3 against p = (1, 0).
  const Vector p{1, 0};
  const Vector t_q{0.5, std::sqrt(0.75)};
  const Vector t_p{0.3, std::sqrt(0.91)};
  CHECK(std::abs(combined_score(t_q, t_p, p, 0.5) - 0.65) <= 1e-15);
  CHECK(combined_score(t_q, t_p, p, 0.0) == cosine_sim(t_q, p));
  // The proxy term is skipped entirely at gamma 0, even for a zero proxy.
  CHECK(combined_score(t_q, Vector{0, 0}, p, 0.0) == cosine_sim(t_q, p));
}

TEST_CASE("gamma 0 reproduces text-only scores bit for bit") {
  std::mt19937_64 rng(1);
  const Instance inst = random_instance(5, 7, 6, 3, rng);
  const ScoreMatrix text = text_only_scores(inst.texts, inst.videos);
  const ScoreMatrix comb = combined_scores(inst.texts, inst.videos, inst.params, 0.0);
  CHECK(comb.scores == text.scores);
  CHECK(comb.kind == ScoreKind::Combined);
  const ScoreMatrix fact = factored_scores(inst.texts, inst.videos, inst.params, 0.0);
  for (std::size_t i = 0; i < fact.scores.size(); ++i) {
    CHECK(std::abs(fact.scores.values()[i] - text.scores.values()[i]) <= 1e-15);
  }
}

TEST_CASE("combined scores use the pair-specific proxy and count invocations") {
  std::mt19937_64 rng(2);
  const Instance inst = random_instance(3, 5, 6, 3, rng, DashMode::Vector);
  const ScoreMatrix comb = combined_scores(inst.texts, inst.videos, inst.params, 0.4, 2);
  CHECK(comb.pipeline_invocations == 15);
  CHECK(comb.scores.rows() == 3);
  CHECK(comb.scores.cols() == 5);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      const Vector tp = generate_proxy(inst.texts.row(i), inst.videos[j], inst.params);
      const double expected = cosine_sim(inst.texts.row(i), inst.videos[j].row(0)) +
                              0.4 * cosine_sim(tp, inst.videos[j].row(0));
      CHECK(comb.scores(i, j) == expected);
    }
  }
}

TEST_CASE("sweep matrices depend monotonically on gamma per entry") {
  std::mt19937_64 rng(3);
  const Instance inst = random_instance(4, 6, 8, 4, rng);
  const ScoreMatrix text = text_only_scores(inst.texts, inst.videos);
  std::vector<ScoreMatrix> sweep;
  for (int step = 1; step <= 8; ++step) {
    sweep.push_back(combined_scores(inst.texts, inst.videos, inst.params, 0.1 * step));
  }
  for (std::size_t e = 0; e < text.scores.size(); ++e) {
    const double proxy_term = (sweep[0].scores.values()[e] - text.scores.values()[e]) / 0.1;
    for (std::size_t s = 1; s < sweep.size(); ++s) {
      const double diff = sweep[s].scores.values()[e] - sweep[s - 1].scores.values()[e];
      if (proxy_term > 1e-12) CHECK(diff > 0.0);
      if (proxy_term < -1e-12) CHECK(diff < 0.0);
      const double linear = text.scores.values()[e] + 0.1 * (s + 1) * proxy_term;
      CHECK(std::abs(sweep[s].scores.values()[e] - linear) <= 1e-12);
    }
  }
}

TEST_CASE("factored_score examples") {
  std::mt19937_64 rng(4);
  const Vector t_q = random_vector(5, rng), p = random_vector(5, rng);
  const Vector t_p = random_vector(5, rng);
  CHECK(std::abs(factored_score(t_q, t_p, p, 0.0) - cosine_sim(t_q, p)) <= 1e-15);

  // Collinear: sqrt(4) * cos(2 t_q_hat, p) = 2 cos(t_q, p), same as the direct form.
  Vector scaled = t_q;
  for (double& x : scaled) x *= 3.0;
  const double f = factored_score(t_q, scaled, p, 1.0);
  CHECK(std::abs(f - 2.0 * cosine_sim(t_q, p)) <= 1e-15);
  CHECK(std::abs(f - combined_score(t_q, scaled, p, 1.0)) <= 1e-15);

  CHECK(kind_of([&] { factored_score(t_q, t_q, p, -1.0); }) == ErrorKind::ZeroVector);
  CHECK(kind_of([&] { factored_score(t_q, Vector(5, 0.0), p, 0.5); }) == ErrorKind::ZeroVector);
}

TEST_CASE("factored and combined agree on 100 random d=16 instances") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> gamma(0.1, 0.8);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Instance inst = random_instance(3, 3, 16, 4, rng,
                                          trial % 2 ? DashMode::Vector : DashMode::Scalar);
    const double g = gamma(rng);
    const ScoreMatrix c = combined_scores(inst.texts, inst.videos, inst.params, g);
    const ScoreMatrix f = factored_scores(inst.texts, inst.videos, inst.params, g);
    CHECK(f.kind == ScoreKind::Factored);
    for (std::size_t i = 0; i < c.scores.size(); ++i) {
      worst = std::max(worst, std::abs(c.scores.values()[i] - f.scores.values()[i]));
    }
  }
  MESSAGE("max |factored - combined| = " << worst);
  CHECK(worst <= 1e-9);
}

TEST_CASE("combined query norm expansion") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> gamma(-2.0, 2.0);
  for (int trial = 0; trial < 500; ++trial) {
    const Vector t_q = random_vector(2 + trial % 15, rng);
    const Vector t_p = random_vector(t_q.size(), rng);
    const double g = gamma(rng);
    const CombinedQuery cq = make_combined_query(t_q, t_p, g);
    CHECK(cq.text_proxy_similarity == cosine_sim(t_q, t_p));
    const double expected = 1.0 + g * g + 2.0 * g * cq.text_proxy_similarity;
    CHECK(std::abs(dot(cq.q, cq.q) - expected) <= 1e-9);
  }
}

TEST_CASE("identity_check examples") {
  IdentityCheckConfig cfg;
  const IdentityReport ok = identity_check(cfg);
  MESSAGE("identity check max error " << ok.max_abs_err << ", norm error " << ok.max_norm_err);
  CHECK(ok.pass);
  CHECK(ok.trials == 100);
  CHECK(ok.compared + ok.degenerate == 100);
  CHECK(ok.max_norm_err <= 1e-9);

  cfg.tolerance = 0.0;
  CHECK_FALSE(identity_check(cfg).pass);

  cfg.tolerance = 1e-9;
  cfg.gamma_lo = cfg.gamma_hi = -1.0;
  cfg.proxy_equals_query = true;
  IdentityReport degenerate;
  CHECK_NOTHROW(degenerate = identity_check(cfg));
  CHECK(degenerate.degenerate == 100);
  CHECK(degenerate.compared == 0);
  CHECK_FALSE(degenerate.pass);

  cfg.trials = 0;
  CHECK(kind_of([&] { identity_check(cfg); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("evaluate examples") {
  const std::vector<std::size_t> gt0{0, 0, 0};
  const RetrievalReport r = evaluate(ranked_matrix(), gt0);
  CHECK(r.ranks == std::vector<std::size_t>{1, 2, 6});
  CHECK(std::abs(r.recall_at_1 - 100.0 / 3) <= 1e-12);
  CHECK(std::abs(r.recall_at_5 - 200.0 / 3) <= 1e-12);
  CHECK(r.recall_at_10 == 100.0);
  CHECK(r.median_rank == 2);
  CHECK(r.mean_rank == 3.0);

  const std::vector<std::size_t> diag{0, 1, 2, 3};
  const RetrievalReport perfect = evaluate(Matrix::identity(4), diag);
  CHECK(perfect.recall_at_1 == 100.0);
  CHECK(perfect.median_rank == 1);
  CHECK(perfect.mean_rank == 1.0);

  const RetrievalReport ties = evaluate(Matrix(4, 4, 0.25), diag);
  CHECK(ties.recall_at_1 == 100.0);
  CHECK(ties.ranks == std::vector<std::size_t>{1, 1, 1, 1});

  // Lower median for an even count.
  Matrix even(4, 4, 0.0);
  even(1, 0) = 1.0;
  even(2, 0) = even(2, 1) = 1.0;
  even(3, 0) = even(3, 1) = even(3, 2) = 1.0;
  CHECK(evaluate(even, diag).median_rank == 2);

  const std::vector<std::size_t> short_gt{0, 1};
  CHECK(kind_of([&] { evaluate(Matrix::identity(4), short_gt); }) ==
        ErrorKind::MissingGroundTruth);
  const std::vector<std::size_t> out_of_range{0, 1, 2, 4};
  CHECK(kind_of([&] { evaluate(Matrix::identity(4), out_of_range); }) ==
        ErrorKind::MissingGroundTruth);
}

TEST_CASE("report invariants and relabeling invariance") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nt = 1 + trial % 20, nv = 1 + (trial * 7) % 25;
    Matrix s = random_matrix(nt, nv, rng);
    // Coarse values force ties now and then.
    if (trial % 3 == 0) {
      for (double& x : s.values()) x = std::round(x);
    }
    std::vector<std::size_t> gt(nt);
    for (auto& g : gt) g = std::uniform_int_distribution<std::size_t>(0, nv - 1)(rng);
    const RetrievalReport r = evaluate(s, gt);
    CHECK(r.recall_at_1 <= r.recall_at_5);
    CHECK(r.recall_at_5 <= r.recall_at_10);
    CHECK(r.median_rank >= 1);
    CHECK(r.mean_rank >= 1.0);

    std::vector<std::size_t> perm(nv);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix ps(nt, nv);
    for (std::size_t i = 0; i < nt; ++i) {
      for (std::size_t j = 0; j < nv; ++j) ps(i, perm[j]) = s(i, j);
    }
    std::vector<std::size_t> pgt(nt);
    for (std::size_t i = 0; i < nt; ++i) pgt[i] = perm[gt[i]];
    const RetrievalReport pr = evaluate(ps, pgt);
    CHECK(pr.ranks == r.ranks);
    CHECK(pr.mean_rank == r.mean_rank);
  }
}

TEST_CASE("scaling video features leaves text-only rankings unchanged") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Instance inst = random_instance(6, 9, 8, 2, rng);
    std::vector<Matrix> scaled = inst.videos;
    for (auto& v : scaled) {
      const double c = scale(rng);
      for (double& x : v.row(0)) x *= c;
    }
    const Matrix a = text_only_scores(inst.texts, inst.videos).scores;
    const Matrix b = text_only_scores(inst.texts, scaled).scores;
    for (std::size_t i = 0; i < 6; ++i) {
      std::vector<std::size_t> oa(9), ob(9);
      std::iota(oa.begin(), oa.end(), 0);
      std::iota(ob.begin(), ob.end(), 0);
      std::sort(oa.begin(), oa.end(), [&](auto x, auto y) { return a(i, x) > a(i, y); });
      std::sort(ob.begin(), ob.end(), [&](auto x, auto y) { return b(i, x) > b(i, y); });
      CHECK(oa == ob);
    }
  }
}

TEST_CASE("export roundtrip and file shapes") {
  TempDir dir;
  const ScoreMatrix sm{Matrix{{0.9, 0.1, 0.2}, {0.3, 0.8, 0.1}, {0.5, 0.6, 0.4}},
                       ScoreKind::Combined, 0.5, 9};
  const std::vector<std::size_t> gt{0, 1, 2};
  const RetrievalReport r = evaluate(sm.scores, gt);
  export_report(r, sm, dir.path(), {{"seed", 42}});

  std::ifstream in(dir.path() / "report.json");
  const nlohmann::json j = nlohmann::json::parse(in);
  CHECK(j["recall_at"]["1"].get<double>() == r.recall_at_1);
  CHECK(j["recall_at"]["5"].get<double>() == r.recall_at_5);
  CHECK(j["recall_at"]["10"].get<double>() == r.recall_at_10);
  CHECK(j["mdr"].get<std::size_t>() == r.median_rank);
  CHECK(j["mnr"].get<double>() == r.mean_rank);
  CHECK(j["gamma"].get<double>() == 0.5);
  CHECK(j["n_text"].get<std::size_t>() == 3);
  CHECK(j["n_video"].get<std::size_t>() == 3);
  CHECK(j["tie_rule"] == "strict-greater");
  CHECK(j["config"]["seed"] == 42);

  const auto scores = lines_of(dir.path() / "scores.csv");
  REQUIRE(scores.size() == 4);
  CHECK(scores[0] == "text_id,video_0,video_1,video_2");
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK(std::count(scores[i].begin(), scores[i].end(), ',') == 3);
  }
  const auto ranks = lines_of(dir.path() / "ranks.csv");
  REQUIRE(ranks.size() == 4);
  CHECK(ranks[0] == "text_id,video_id,rank");
  CHECK(ranks[3] == "2,2,3");

  CHECK(kind_of([&] { export_report(r, sm, dir.path() / "missing"); }) == ErrorKind::IoError);
  CHECK(kind_of([&] { export_report(r, sm, ""); }) == ErrorKind::IoError);
}
