#include "tvproxy/cli.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "tvproxy/error.hpp"
#include "tvproxy/retrieval.hpp"
#include "tvproxy/tensor_io.hpp"

namespace tvproxy {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_unsigned()) {
    throw Error(ErrorKind::InvalidConfig, key + " must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

double get_real(const json& v, const std::string& key) {
  if (!v.is_number()) throw Error(ErrorKind::InvalidConfig, key + " must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw Error(ErrorKind::InvalidConfig, key + " must be finite");
  return x;
}

bool get_flag(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw Error(ErrorKind::InvalidConfig, key + " must be true or false");
  return v.get<bool>();
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::IoError:
    case ErrorKind::BadMagic:
    case ErrorKind::UnsupportedVersion:
    case ErrorKind::UnsupportedDtype:
    case ErrorKind::TruncatedPayload:
    case ErrorKind::TrailingData:
      return kExitIo;
    case ErrorKind::DegenerateDirector:
    case ErrorKind::ZeroVector:
    case ErrorKind::NonFiniteData:
      return kExitNumeric;
    default:
      return kExitValidation;
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());
}

std::string fmt_real(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// "LO:HI:STEP" -> LO, LO+STEP, ... up to HI inclusive.
std::vector<double> parse_sweep(const std::string& range) {
  std::vector<double> parts;
  std::size_t start = 0;
  while (start <= range.size()) {
    const std::size_t colon = range.find(':', start);
    const std::string token =
        range.substr(start, colon == std::string::npos ? std::string::npos : colon - start);
    double value = 0.0;
    const auto res = std::from_chars(token.data(), token.data() + token.size(), value);
    if (token.empty() || res.ec != std::errc() || res.ptr != token.data() + token.size()) {
      throw Error(ErrorKind::InvalidConfig, "--gamma-sweep expects LO:HI:STEP, got " + range);
    }
    parts.push_back(value);
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  if (parts.size() != 3 || !(parts[2] > 0.0) || parts[0] > parts[1]) {
    throw Error(ErrorKind::InvalidConfig, "--gamma-sweep expects LO:HI:STEP with STEP > 0");
  }
  std::vector<double> gammas;
  for (std::size_t n = 0;; ++n) {
    const double g = parts[0] + static_cast<double>(n) * parts[2];
    if (g > parts[1] + 1e-9 * parts[2]) break;
    gammas.push_back(g);
  }
  return gammas;
}

struct EvalOutcome {
  RetrievalReport report;
  ScoreMatrix scores;
};

void print_metrics(std::ostream& out, const std::string& label, const RetrievalReport& r) {
  out << label << ": R@1=" << fmt_real(r.recall_at_1, 2) << " R@5=" << fmt_real(r.recall_at_5, 2)
      << " R@10=" << fmt_real(r.recall_at_10, 2) << " MdR=" << r.median_rank
      << " MnR=" << fmt_real(r.mean_rank, 2) << '\n';
}

// Options shared across subcommands; each subcommand registers what it uses.
struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string params;
  std::string report;
  std::string gamma_sweep;
  std::string inspect_path;
  std::uint64_t seed = 0;
  double gamma = 0.0;
  double tol = 0.0;
  std::uint64_t trials = 100;
  std::uint64_t workers = 1;
};

bool given(const CLI::App& sub, const std::string& flag) {
  const CLI::Option* opt = sub.get_option_no_throw(flag);
  return opt != nullptr && opt->count() > 0;
}

RunConfig resolve_config(const Options& o, const CLI::App& sub) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (given(sub, "--seed")) cfg.seed = o.seed;
  if (given(sub, "--gamma")) cfg.gamma = o.gamma;
  cfg.validate();
  return cfg;
}

int cmd_synth(const Options& o, const CLI::App& sub, std::ostream& out) {
  const RunConfig cfg = resolve_config(o, sub);
  const EmbeddingDataset ds = generate_synthetic(cfg.synth());
  save_dataset(o.out, ds);
  write_json(fs::path(o.out) / "run_config.json", cfg.to_json());
  out << "synth: wrote " << ds.size() << " pairs (d=" << ds.dim()
      << ", M=" << ds.num_video_proxies() << ") to " << o.out << '\n';
  return kExitOk;
}

int cmd_train(const Options& o, const CLI::App& sub, std::ostream& out) {
  RunConfig cfg = resolve_config(o, sub);
  const EmbeddingDataset ds = load_dataset(o.data);
  cfg.dim = ds.dim();
  cfg.num_video_proxies = ds.num_video_proxies();
  cfg.n_pairs = ds.size();
  if (cfg.batch_size > ds.size()) {
    throw Error(ErrorKind::InvalidConfig, "batch_size exceeds dataset size");
  }

  const TrainResult result = train(ds, cfg.train(o.workers), cfg.adamw());
  const fs::path run_dir = o.out;
  make_dir(run_dir);
  save_params(run_dir / "checkpoint", result.params, result.temperature.log_sigma);
  write_loss_log(run_dir / "loss_log.csv", result.log);
  write_json(run_dir / "train_config.json", cfg.to_json());

  const auto& first = result.log.front().loss;
  const auto& last = result.log.back().loss;
  out << "train: " << result.log.size() << " steps, total loss " << first.total << " -> "
      << last.total << ", sigma " << last.sigma << '\n';
  return kExitOk;
}

EvalOutcome evaluate_at(const EmbeddingDataset& ds, const GeneratorParams& params, double gamma,
                        std::size_t workers) {
  const ScoreMatrix scores =
      combined_scores(ds.text_queries(), ds.video_proxies(), params, gamma, workers);
  return {evaluate(scores.scores, ds.ground_truth()), scores};
}

int cmd_eval(const Options& o, const CLI::App& sub, std::ostream& out) {
  const RunConfig cfg = resolve_config(o, sub);
  const EmbeddingDataset ds = load_dataset(o.data);
  const GeneratorParams params = load_params(o.params);
  if (params.dim() != ds.dim() || params.num_video_proxies() != ds.num_video_proxies()) {
    throw Error(ErrorKind::ShapeMismatch, "checkpoint shape does not match dataset");
  }
  const fs::path report_dir = o.report;
  make_dir(report_dir);

  json echo = cfg.to_json();
  echo["data"] = o.data;
  echo["params"] = o.params;

  const ScoreMatrix baseline_scores = text_only_scores(ds.text_queries(), ds.video_proxies());
  const RetrievalReport baseline = evaluate(baseline_scores.scores, ds.ground_truth());
  print_metrics(out, "text-only", baseline);

  if (o.gamma_sweep.empty()) {
    const EvalOutcome r = evaluate_at(ds, params, cfg.gamma, o.workers);
    json extra = echo;
    extra["text_only"] = report_to_json(baseline, baseline_scores);
    export_report(r.report, r.scores, report_dir, extra);
    print_metrics(out, "combined gamma=" + fmt_real(cfg.gamma, 3), r.report);
    return kExitOk;
  }

  const std::vector<double> gammas = parse_sweep(o.gamma_sweep);
  std::ofstream sweep_csv(report_dir / "sweep.csv", std::ios::trunc);
  if (!sweep_csv) throw Error(ErrorKind::IoError, "cannot write sweep.csv");
  sweep_csv << "gamma,r_at_1,r_at_5,r_at_10,mdr,mnr\n";
  auto row = [&](double g, const RetrievalReport& r) {
    sweep_csv << fmt_real(g, 6) << ',' << fmt_real(r.recall_at_1, 6) << ','
              << fmt_real(r.recall_at_5, 6) << ',' << fmt_real(r.recall_at_10, 6) << ','
              << r.median_rank << ',' << fmt_real(r.mean_rank, 6) << '\n';
  };
  row(0.0, baseline);

  json sweep = json::array();
  std::size_t best = 0;
  std::vector<EvalOutcome> outcomes;
  for (std::size_t n = 0; n < gammas.size(); ++n) {
    outcomes.push_back(evaluate_at(ds, params, gammas[n], o.workers));
    const RetrievalReport& r = outcomes.back().report;
    row(gammas[n], r);
    sweep.push_back(report_to_json(r, outcomes.back().scores));
    const fs::path sub_dir = report_dir / ("gamma_" + fmt_real(gammas[n], 4));
    make_dir(sub_dir);
    json sub_extra = echo;
    sub_extra["gamma"] = gammas[n];
    export_report(r, outcomes.back().scores, sub_dir, sub_extra);
    print_metrics(out, "combined gamma=" + fmt_real(gammas[n], 3), r);
    if (r.recall_at_1 > outcomes[best].report.recall_at_1) best = n;
  }
  if (!sweep_csv) throw Error(ErrorKind::IoError, "write failed for sweep.csv");

  json extra = echo;
  extra["gamma_sweep"] = o.gamma_sweep;
  extra["text_only"] = report_to_json(baseline, baseline_scores);
  extra["sweep"] = sweep;
  export_report(outcomes[best].report, outcomes[best].scores, report_dir, extra);
  out << "best gamma=" << fmt_real(gammas[best], 3) << '\n';
  return kExitOk;
}

int cmd_gradcheck(const Options& o, const CLI::App& sub, std::ostream& out) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  cfg.validate();
  const std::uint64_t seed = given(sub, "--seed") ? o.seed : 7;
  const double tol = given(sub, "--tol") ? o.tol : 1e-4;
  bool all_pass = true;
  for (DashMode mode : {DashMode::Scalar, DashMode::Vector}) {
    TrainConfig tc = cfg.train(1);
    tc.generator.dash_mode = mode;
    const GradCheckReport r = grad_check(tc, GradCheckInstance{}, tol, seed);
    all_pass = all_pass && r.pass;
    out << "gradcheck dash=" << to_string(mode) << ": " << (r.pass ? "PASS" : "FAIL")
        << " max_rel_err=" << r.max_rel_err << " tol=" << tol << " worst=" << r.worst_param
        << " (analytic " << r.worst_analytic << ", numeric " << r.worst_numeric << ") over "
        << r.checked << " scalars\n";
  }
  return all_pass ? kExitOk : kExitNumeric;
}

int cmd_identity(const Options& o, const CLI::App& sub, std::ostream& out) {
  IdentityCheckConfig ic;
  ic.trials = o.trials;
  ic.tolerance = given(sub, "--tol") ? o.tol : 1e-9;
  ic.seed = given(sub, "--seed") ? o.seed : 0;
  const IdentityReport r = identity_check(ic);
  out << "identity-check: " << (r.pass ? "PASS" : "FAIL") << " trials=" << r.trials
      << " compared=" << r.compared << " degenerate=" << r.degenerate
      << " max_abs_err=" << r.max_abs_err << " max_norm_err=" << r.max_norm_err
      << " tol=" << r.tolerance << '\n';
  return r.pass ? kExitOk : kExitNumeric;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  const TensorHeader h = read_tensor_header(o.inspect_path);
  out << o.inspect_path << ": magic=TVPX version=" << h.version
      << " dtype=" << (h.dtype == kDtypeF64 ? "f64" : "?") << " dims=[";
  for (std::size_t i = 0; i < h.dims.size(); ++i) out << (i ? "," : "") << h.dims[i];
  out << "] header_bytes=" << h.header_bytes << " file_bytes=" << h.file_bytes << '\n';
  return kExitOk;
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, "config must be a JSON object");
  RunConfig c;
  const std::map<std::string, std::function<void(const json&)>> setters = {
      {"dim", [&](const json& v) { c.dim = get_count(v, "dim"); }},
      {"num_video_proxies", [&](const json& v) { c.num_video_proxies = get_count(v, "num_video_proxies"); }},
      {"k_iterations", [&](const json& v) { c.k_iterations = get_count(v, "k_iterations"); }},
      {"delta", [&](const json& v) { c.delta = get_real(v, "delta"); }},
      {"eta", [&](const json& v) { c.eta = get_real(v, "eta"); }},
      {"dash_mode",
       [&](const json& v) {
         if (!v.is_string()) throw Error(ErrorKind::InvalidConfig, "dash_mode must be a string");
         c.dash_mode = parse_dash_mode(v.get<std::string>());
       }},
      {"scaled_attention", [&](const json& v) { c.scaled_attention = get_flag(v, "scaled_attention"); }},
      {"alpha", [&](const json& v) { c.alpha = get_real(v, "alpha"); }},
      {"beta", [&](const json& v) { c.beta = get_real(v, "beta"); }},
      {"gamma", [&](const json& v) { c.gamma = get_real(v, "gamma"); }},
      {"lr", [&](const json& v) { c.lr = get_real(v, "lr"); }},
      {"weight_decay", [&](const json& v) { c.weight_decay = get_real(v, "weight_decay"); }},
      {"epochs", [&](const json& v) { c.epochs = get_count(v, "epochs"); }},
      {"batch_size", [&](const json& v) { c.batch_size = get_count(v, "batch_size"); }},
      {"seed",
       [&](const json& v) {
         if (!v.is_number_unsigned()) throw Error(ErrorKind::InvalidConfig, "seed must be a u64");
         c.seed = v.get<std::uint64_t>();
       }},
      {"sigma_text", [&](const json& v) { c.sigma_text = get_real(v, "sigma_text"); }},
      {"sigma_video", [&](const json& v) { c.sigma_video = get_real(v, "sigma_video"); }},
      {"sigma_corrupt", [&](const json& v) { c.sigma_corrupt = get_real(v, "sigma_corrupt"); }},
      {"n_pairs", [&](const json& v) { c.n_pairs = get_count(v, "n_pairs"); }},
  };
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw Error(ErrorKind::InvalidConfig, "unknown config key \"" + key + "\"");
    it->second(value);
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, "config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  return json{{"dim", dim},
              {"num_video_proxies", num_video_proxies},
              {"k_iterations", k_iterations},
              {"delta", delta},
              {"eta", eta},
              {"dash_mode", to_string(dash_mode)},
              {"scaled_attention", scaled_attention},
              {"alpha", alpha},
              {"beta", beta},
              {"gamma", gamma},
              {"lr", lr},
              {"weight_decay", weight_decay},
              {"epochs", epochs},
              {"batch_size", batch_size},
              {"seed", seed},
              {"sigma_text", sigma_text},
              {"sigma_video", sigma_video},
              {"sigma_corrupt", sigma_corrupt},
              {"n_pairs", n_pairs}};
}

void RunConfig::validate() const {
  synth().validate();
  if (k_iterations < 1) throw Error(ErrorKind::InvalidConfig, "k_iterations must be >= 1");
  if (epochs < 1) throw Error(ErrorKind::InvalidConfig, "epochs must be >= 1");
  if (batch_size < 2) throw Error(ErrorKind::BatchTooSmall, "batch_size must be >= 2");
  adamw().validate();
}

SynthConfig RunConfig::synth() const {
  SynthConfig s;
  s.n_pairs = n_pairs;
  s.dim = dim;
  s.num_video_proxies = num_video_proxies;
  s.sigma_text = sigma_text;
  s.sigma_video = sigma_video;
  s.sigma_corrupt = sigma_corrupt;
  s.seed = seed;
  return s;
}

GeneratorConfig RunConfig::generator() const {
  return GeneratorConfig{k_iterations, delta, eta, dash_mode, scaled_attention};
}

TrainConfig RunConfig::train(std::size_t workers) const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.seed = seed;
  t.weights = LossWeights{alpha, beta};
  t.generator = generator();
  t.workers = workers;
  return t;
}

AdamWConfig RunConfig::adamw() const {
  AdamWConfig a;
  a.lr = lr;
  a.weight_decay = weight_decay;
  return a;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text proxy generation, training and proxy-augmented retrieval", "tvproxy"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON run config; flags override its values");
  };
  auto add_seed = [&](CLI::App* s) { s->add_option("--seed", o.seed, "RNG seed (u64)"); };
  auto add_workers = [&](CLI::App* s) {
    s->add_option("--workers", o.workers, "threads for pair-local work; 1 is the reference")
        ->check(CLI::PositiveNumber);
  };

  auto* synth = app.add_subcommand("synth", "generate a planted synthetic dataset");
  add_config(synth);
  add_seed(synth);
  synth->add_option("--out", o.out, "output dataset directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train the proxy generator");
  add_config(train_cmd);
  add_seed(train_cmd);
  add_workers(train_cmd);
  train_cmd->add_option("--data", o.data, "dataset directory")->required();
  train_cmd->add_option("--out", o.out, "run directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "score and rank a dataset");
  add_config(eval_cmd);
  add_workers(eval_cmd);
  eval_cmd->add_option("--data", o.data, "dataset directory")->required();
  eval_cmd->add_option("--params", o.params, "checkpoint directory")->required();
  eval_cmd->add_option("--report", o.report, "report output directory")->required();
  auto* gamma_opt = eval_cmd->add_option("--gamma", o.gamma, "proxy score weight");
  eval_cmd->add_option("--gamma-sweep", o.gamma_sweep, "LO:HI:STEP sweep of gamma")
      ->excludes(gamma_opt);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_config(grad_cmd);
  add_seed(grad_cmd);
  grad_cmd->add_option("--tol", o.tol, "max relative error");

  auto* ident_cmd = app.add_subcommand("identity-check", "combined vs factored score identity");
  add_seed(ident_cmd);
  ident_cmd->add_option("--trials", o.trials, "random trials");
  ident_cmd->add_option("--tol", o.tol, "max absolute error");

  auto* inspect_cmd = app.add_subcommand("inspect", "print a TVPX tensor header");
  inspect_cmd->add_option("file", o.inspect_path, "tensor file")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitValidation;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, *synth, out);
    if (train_cmd->parsed()) return cmd_train(o, *train_cmd, out);
    if (eval_cmd->parsed()) return cmd_eval(o, *eval_cmd, out);
    if (grad_cmd->parsed()) return cmd_gradcheck(o, *grad_cmd, out);
    if (ident_cmd->parsed()) return cmd_identity(o, *ident_cmd, out);
    if (inspect_cmd->parsed()) return cmd_inspect(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  }
  return kExitValidation;
}

}  // namespace tvproxy
