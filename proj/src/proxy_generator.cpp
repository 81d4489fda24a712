#include "tvproxy/proxy_generator.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "tvproxy/error.hpp"
#include "tvproxy/parallel.hpp"
#include "tvproxy/tensor_io.hpp"

namespace tvproxy {

namespace {

double attention_scale(std::size_t dim, bool scaled) {
  return scaled ? 1.0 / std::sqrt(static_cast<double>(dim)) : 1.0;
}

void require_square(const Matrix& m, std::size_t d, const char* name) {
  if (m.rows() != d || m.cols() != d) {
    throw Error(ErrorKind::ShapeMismatch, std::string(name) + " must be " + std::to_string(d) +
                                              "x" + std::to_string(d));
  }
}

void check_step_shapes(std::size_t dim, const Matrix& video_proxies, const ProjectionSet& proj) {
  if (video_proxies.rows() == 0) throw Error(ErrorKind::EmptyInput, "video has no proxies");
  if (video_proxies.cols() != dim) {
    throw Error(ErrorKind::ShapeMismatch, "video proxy dim " + std::to_string(video_proxies.cols()) +
                                              " vs query dim " + std::to_string(dim));
  }
  require_square(proj.w_q, dim, "W_Q");
  require_square(proj.w_k, dim, "W_K");
  require_square(proj.w_v, dim, "W_V");
}

LeaderRoundTrace run_round(std::span<const double> prev, const Matrix& video_proxies,
                           const ProjectionSet& proj, bool scaled, Vector& out) {
  check_step_shapes(prev.size(), video_proxies, proj);
  LeaderRoundTrace r;
  r.input.assign(prev.begin(), prev.end());
  r.query = vecmat(prev, proj.w_q);
  r.keys = matmul(video_proxies, proj.w_k);
  r.values = matmul(video_proxies, proj.w_v);

  const double scale = attention_scale(prev.size(), scaled);
  Vector logits(video_proxies.rows());
  for (std::size_t m = 0; m < logits.size(); ++m) logits[m] = dot(r.query, r.keys.row(m)) * scale;
  r.weights = softmax_row(logits);

  out.assign(prev.size(), 0.0);
  for (std::size_t m = 0; m < r.weights.size(); ++m) {
    const auto v = r.values.row(m);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += r.weights[m] * v[c];
  }
  for (std::size_t c = 0; c < out.size(); ++c) out[c] += r.query[c];
  return r;
}

Vector similarities(std::span<const double> text_query, const Matrix& video_proxies) {
  if (video_proxies.cols() != text_query.size()) {
    throw Error(ErrorKind::ShapeMismatch, "video proxy dim differs from query dim");
  }
  Vector s(video_proxies.rows());
  for (std::size_t m = 0; m < s.size(); ++m) s[m] = cosine_sim(text_query, video_proxies.row(m));
  return s;
}

double scalar_dash_from(std::span<const double> sims, double theta) {
  double acc = 0.0;
  for (double s : sims) acc += theta * s;
  return std::exp(acc / static_cast<double>(sims.size()));
}

Vector vector_dash_from(std::span<const double> sims, const Matrix& w_dash) {
  if (w_dash.rows() != sims.size()) {
    throw Error(ErrorKind::ShapeMismatch, "W_dash has " + std::to_string(w_dash.rows()) +
                                              " rows for " + std::to_string(sims.size()) +
                                              " similarities");
  }
  Vector ds = vecmat(sims, w_dash);
  for (double& v : ds) v = std::exp(v);
  return ds;
}

Dash make_dash(std::span<const double> sims, const GeneratorParams& params, std::size_t dim) {
  if (params.dash_mode == DashMode::Scalar) return scalar_dash_from(sims, params.theta);
  if (params.w_dash.cols() != dim) throw Error(ErrorKind::ShapeMismatch, "W_dash width");
  return vector_dash_from(sims, params.w_dash);
}

Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, stddev);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = gauss(rng);
  return m;
}

std::string tensor_name(std::size_t round, const char* which) {
  return "round" + std::to_string(round) + "." + which;
}

std::string tensor_file(const std::string& name) {
  std::string file = name;
  for (char& c : file) {
    if (c == '.') c = '_';
  }
  return file + ".tvpx";
}

}  // namespace

std::string to_string(DashMode mode) { return mode == DashMode::Scalar ? "scalar" : "vector"; }

DashMode parse_dash_mode(const std::string& text) {
  if (text == "scalar") return DashMode::Scalar;
  if (text == "vector") return DashMode::Vector;
  throw Error(ErrorKind::InvalidConfig, "dash_mode must be \"scalar\" or \"vector\", got \"" +
                                            text + "\"");
}

GeneratorParams GeneratorParams::initialize(std::size_t dim, std::size_t num_video_proxies,
                                            const GeneratorConfig& cfg, std::uint64_t seed) {
  if (cfg.k < 1) throw Error(ErrorKind::InvalidConfig, "k must be >= 1");
  if (dim < 1 || num_video_proxies < 1) {
    throw Error(ErrorKind::InvalidConfig, "dim and num_video_proxies must be >= 1");
  }
  std::mt19937_64 rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
  GeneratorParams p;
  for (std::size_t i = 0; i < cfg.k; ++i) {
    ProjectionSet proj;
    proj.w_q = normal_matrix(dim, dim, stddev, rng);
    proj.w_k = normal_matrix(dim, dim, stddev, rng);
    proj.w_v = normal_matrix(dim, dim, stddev, rng);
    p.rounds.push_back(std::move(proj));
  }
  p.w_dash = normal_matrix(num_video_proxies, dim, stddev, rng);
  p.delta = cfg.delta;
  p.eta = cfg.eta;
  p.dash_mode = cfg.dash_mode;
  p.scaled_attention = cfg.scaled_attention;
  p.theta = 1.0;
  return p;
}

void GeneratorParams::validate() const {
  if (rounds.empty()) throw Error(ErrorKind::InvalidConfig, "generator needs k >= 1 rounds");
  const std::size_t d = dim();
  for (const auto& r : rounds) {
    require_square(r.w_q, d, "W_Q");
    require_square(r.w_k, d, "W_K");
    require_square(r.w_v, d, "W_V");
    if (!all_finite(r.w_q.values()) || !all_finite(r.w_k.values()) || !all_finite(r.w_v.values())) {
      throw Error(ErrorKind::NonFiniteData, "projection weights");
    }
  }
  if (w_dash.rows() == 0 || w_dash.cols() != d) {
    throw Error(ErrorKind::ShapeMismatch, "W_dash must be M x " + std::to_string(d));
  }
  if (!all_finite(w_dash.values()) || !std::isfinite(theta) || !std::isfinite(delta) ||
      !std::isfinite(eta)) {
    throw Error(ErrorKind::NonFiniteData, "generator scalars or W_dash");
  }
}

GeneratorGrads GeneratorGrads::zeros_like(const GeneratorParams& params) {
  GeneratorGrads g;
  for (const auto& r : params.rounds) {
    g.rounds.push_back({Matrix(r.w_q.rows(), r.w_q.cols()), Matrix(r.w_k.rows(), r.w_k.cols()),
                        Matrix(r.w_v.rows(), r.w_v.cols())});
  }
  g.w_dash = Matrix(params.w_dash.rows(), params.w_dash.cols());
  return g;
}

GeneratorGrads& GeneratorGrads::operator+=(const GeneratorGrads& other) {
  auto add = [](Matrix& into, const Matrix& from) {
    auto dst = into.values();
    auto src = from.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    add(rounds[i].w_q, other.rounds[i].w_q);
    add(rounds[i].w_k, other.rounds[i].w_k);
    add(rounds[i].w_v, other.rounds[i].w_v);
  }
  theta += other.theta;
  add(w_dash, other.w_dash);
  return *this;
}

Vector leader_step(std::span<const double> prev_leader, const Matrix& video_proxies,
                   const ProjectionSet& proj, bool scaled) {
  Vector out;
  run_round(prev_leader, video_proxies, proj, scaled, out);
  return out;
}

Vector leader_path(std::span<const double> text_query, const Matrix& video_proxies,
                   const GeneratorParams& params) {
  if (params.rounds.empty()) throw Error(ErrorKind::InvalidConfig, "k must be >= 1");
  Vector leader(text_query.begin(), text_query.end());
  for (const auto& proj : params.rounds) {
    leader = leader_step(leader, video_proxies, proj, params.scaled_attention);
  }
  return leader;
}

Vector compute_director(std::span<const double> text_query, std::span<const double> leader,
                        double delta, double eta) {
  if (text_query.size() != leader.size()) {
    throw Error(ErrorKind::ShapeMismatch, "director operands differ in length");
  }
  Vector d(text_query.size());
  for (std::size_t c = 0; c < d.size(); ++c) d[c] = delta * text_query[c] - eta * leader[c];
  if (l2_norm(d) < kDirectorEpsilon) {
    throw Error(ErrorKind::DegenerateDirector, "|delta*t_q - eta*leader| below 1e-12");
  }
  return d;
}

double scalar_dash(std::span<const double> text_query, const Matrix& video_proxies, double theta) {
  return scalar_dash_from(similarities(text_query, video_proxies), theta);
}

Vector vector_dash(std::span<const double> text_query, const Matrix& video_proxies,
                   const Matrix& w_dash) {
  if (w_dash.cols() != text_query.size()) throw Error(ErrorKind::ShapeMismatch, "W_dash width");
  return vector_dash_from(similarities(text_query, video_proxies), w_dash);
}

Vector assemble_proxy(std::span<const double> text_query, std::span<const double> director,
                      const Dash& dash) {
  if (text_query.size() != director.size()) {
    throw Error(ErrorKind::ShapeMismatch, "proxy operands differ in length");
  }
  const double norm = l2_norm(director);
  if (norm < kDirectorEpsilon) throw Error(ErrorKind::DegenerateDirector, "director norm < 1e-12");
  Vector proxy(text_query.begin(), text_query.end());
  if (const double* scalar = std::get_if<double>(&dash)) {
    for (std::size_t c = 0; c < proxy.size(); ++c) proxy[c] += *scalar * (director[c] / norm);
  } else {
    const Vector& ds = std::get<Vector>(dash);
    if (ds.size() != proxy.size()) throw Error(ErrorKind::ShapeMismatch, "dash vector length");
    for (std::size_t c = 0; c < proxy.size(); ++c) proxy[c] += ds[c] * (director[c] / norm);
  }
  return proxy;
}

ProxyTrace trace_proxy(std::span<const double> text_query, const Matrix& video_proxies,
                       const GeneratorParams& params) {
  if (params.rounds.empty()) throw Error(ErrorKind::InvalidConfig, "k must be >= 1");
  ProxyTrace t;
  t.leader.assign(text_query.begin(), text_query.end());
  for (const auto& proj : params.rounds) {
    Vector next;
    t.rounds.push_back(run_round(t.leader, video_proxies, proj, params.scaled_attention, next));
    t.leader = std::move(next);
  }
  t.director = compute_director(text_query, t.leader, params.delta, params.eta);
  t.director_norm = l2_norm(t.director);
  t.similarities = similarities(text_query, video_proxies);
  t.dash = make_dash(t.similarities, params, text_query.size());
  t.proxy = assemble_proxy(text_query, t.director, t.dash);
  return t;
}

Vector generate_proxy(std::span<const double> text_query, const Matrix& video_proxies,
                      const GeneratorParams& params) {
  return trace_proxy(text_query, video_proxies, params).proxy;
}

void backprop_proxy(const ProxyTrace& trace, std::span<const double> text_query,
                    const Matrix& video_proxies, const GeneratorParams& params,
                    std::span<const double> d_proxy, GeneratorGrads& grads) {
  const std::size_t d = text_query.size();
  if (d_proxy.size() != d) throw Error(ErrorKind::ShapeMismatch, "proxy cotangent length");

  // t_p = t_q + dash * n, n = director / |director|
  Vector unit(d);
  for (std::size_t c = 0; c < d; ++c) unit[c] = trace.director[c] / trace.director_norm;
  Vector d_unit(d);
  if (const double* scalar = std::get_if<double>(&trace.dash)) {
    for (std::size_t c = 0; c < d; ++c) d_unit[c] = *scalar * d_proxy[c];
    const double d_dash = dot(d_proxy, unit);
    double sim_sum = 0.0;
    for (double s : trace.similarities) sim_sum += s;
    grads.theta += d_dash * *scalar * sim_sum / static_cast<double>(trace.similarities.size());
  } else {
    const Vector& ds = std::get<Vector>(trace.dash);
    for (std::size_t c = 0; c < d; ++c) {
      d_unit[c] = ds[c] * d_proxy[c];
      const double d_exponent = d_proxy[c] * unit[c] * ds[c];
      for (std::size_t m = 0; m < trace.similarities.size(); ++m) {
        grads.w_dash(m, c) += trace.similarities[m] * d_exponent;
      }
    }
  }

  const double radial = dot(unit, d_unit);
  Vector d_leader(d);
  for (std::size_t c = 0; c < d; ++c) {
    const double d_director = (d_unit[c] - unit[c] * radial) / trace.director_norm;
    d_leader[c] = -params.eta * d_director;
  }

  const bool scaled = params.scaled_attention;
  for (std::size_t i = trace.rounds.size(); i-- > 0;) {
    const LeaderRoundTrace& r = trace.rounds[i];
    const ProjectionSet& proj = params.rounds[i];
    ProjectionSet& g = grads.rounds[i];
    const std::size_t m_count = r.weights.size();

    Vector d_query = d_leader;  // residual path
    Vector d_weights(m_count);
    Matrix d_values(m_count, d);
    for (std::size_t m = 0; m < m_count; ++m) {
      d_weights[m] = dot(d_leader, r.values.row(m));
      for (std::size_t c = 0; c < d; ++c) d_values(m, c) = r.weights[m] * d_leader[c];
    }
    Vector d_logits = softmax_row_backward(r.weights, d_weights);
    const double scale = attention_scale(d, scaled);
    Matrix d_keys(m_count, d);
    for (std::size_t m = 0; m < m_count; ++m) {
      const double dl = d_logits[m] * scale;
      for (std::size_t c = 0; c < d; ++c) {
        d_query[c] += dl * r.keys(m, c);
        d_keys(m, c) = dl * r.query[c];
      }
    }

    const MatmulGrad gk = matmul_backward(video_proxies, proj.w_k, d_keys);
    const MatmulGrad gv = matmul_backward(video_proxies, proj.w_v, d_values);
    const VecmatGrad gq = vecmat_backward(r.input, proj.w_q, d_query);
    auto accumulate = [](Matrix& into, const Matrix& from) {
      auto dst = into.values();
      auto src = from.values();
      for (std::size_t n = 0; n < dst.size(); ++n) dst[n] += src[n];
    };
    accumulate(g.w_k, gk.d_rhs);
    accumulate(g.w_v, gv.d_rhs);
    accumulate(g.w_q, gq.d_mat);
    d_leader = gq.d_vec;
  }
}

ProxyGrid::ProxyGrid(std::size_t num_texts, std::size_t num_videos, std::size_t dim)
    : num_texts_(num_texts), num_videos_(num_videos), dim_(dim),
      data_(num_texts * num_videos * dim, 0.0) {}

std::span<const double> ProxyGrid::at(std::size_t text, std::size_t video) const {
  return {data_.data() + (text * num_videos_ + video) * dim_, dim_};
}

std::span<double> ProxyGrid::at(std::size_t text, std::size_t video) {
  return {data_.data() + (text * num_videos_ + video) * dim_, dim_};
}

void rethrow_with_pair(std::size_t text, std::size_t video) {
  const std::string where =
      "pair (text " + std::to_string(text) + ", video " + std::to_string(video) + ")";
  try {
    throw;
  } catch (const Error& e) {
    throw Error(e.kind(), where + ": " + e.what());
  }
}

ProxyGrid proxy_grid(const Matrix& text_batch, std::span<const Matrix> video_batch,
                     const GeneratorParams& params, std::size_t workers) {
  if (text_batch.rows() == 0 || video_batch.empty()) {
    throw Error(ErrorKind::EmptyInput, "proxy_grid needs nonempty batches");
  }
  ProxyGrid grid(text_batch.rows(), video_batch.size(), text_batch.cols());
  std::atomic<std::uint64_t> invocations{0};
  parallel_for(text_batch.rows(), workers, [&](std::size_t i) {
    for (std::size_t j = 0; j < video_batch.size(); ++j) {
      try {
        const Vector proxy = generate_proxy(text_batch.row(i), video_batch[j], params);
        invocations.fetch_add(1, std::memory_order_relaxed);
        std::copy(proxy.begin(), proxy.end(), grid.at(i, j).begin());
      } catch (const Error&) {
        rethrow_with_pair(i, j);
      }
    }
  });
  grid.set_pipeline_invocations(invocations.load());
  return grid;
}

void save_params(const std::filesystem::path& dir, const GeneratorParams& params,
                 double log_temperature) {
  params.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());

  nlohmann::json meta;
  meta["k"] = params.k();
  meta["dim"] = params.dim();
  meta["num_video_proxies"] = params.num_video_proxies();
  meta["delta"] = params.delta;
  meta["eta"] = params.eta;
  meta["dash_mode"] = to_string(params.dash_mode);
  meta["scaled_attention"] = params.scaled_attention;
  meta["theta"] = params.theta;
  meta["log_temperature"] = log_temperature;
  nlohmann::json files = nlohmann::json::object();
  auto put = [&](const std::string& name, const Matrix& m) {
    const std::string file = tensor_file(name);
    write_tensor(dir / file, to_tensor(m));
    files[name] = file;
  };
  for (std::size_t i = 0; i < params.k(); ++i) {
    put(tensor_name(i, "w_q"), params.rounds[i].w_q);
    put(tensor_name(i, "w_k"), params.rounds[i].w_k);
    put(tensor_name(i, "w_v"), params.rounds[i].w_v);
  }
  put("w_dash", params.w_dash);
  meta["tensors"] = files;

  std::ofstream out(dir / "params.json", std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write params.json in " + dir.string());
  out << meta.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::IoError, "write failed for params.json");
}

GeneratorParams load_params(const std::filesystem::path& dir, double* log_temperature) {
  std::ifstream in(dir / "params.json");
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + (dir / "params.json").string());
  GeneratorParams p;
  try {
    nlohmann::json meta;
    in >> meta;
    const auto k = meta.at("k").get<std::size_t>();
    p.delta = meta.at("delta").get<double>();
    p.eta = meta.at("eta").get<double>();
    p.dash_mode = parse_dash_mode(meta.at("dash_mode").get<std::string>());
    p.scaled_attention = meta.at("scaled_attention").get<bool>();
    p.theta = meta.at("theta").get<double>();
    if (log_temperature != nullptr) *log_temperature = meta.at("log_temperature").get<double>();
    const auto& files = meta.at("tensors");
    auto get = [&](const std::string& name) {
      return to_matrix(read_tensor(dir / files.at(name).get<std::string>()));
    };
    for (std::size_t i = 0; i < k; ++i) {
      p.rounds.push_back(
          {get(tensor_name(i, "w_q")), get(tensor_name(i, "w_k")), get(tensor_name(i, "w_v"))});
    }
    p.w_dash = get("w_dash");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, "params.json: " + std::string(e.what()));
  }
  p.validate();
  return p;
}

}  // namespace tvproxy
