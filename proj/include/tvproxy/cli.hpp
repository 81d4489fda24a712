#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvproxy/dataset.hpp"
#include "tvproxy/proxy_generator.hpp"
#include "tvproxy/trainer.hpp"

namespace tvproxy {

// Every knob a run can take. Defaults follow the MSRVTT setting where one
// exists (k = 2, alpha = 0.5, beta = 0.25, weight decay 0.2, scalar dash)
// and desk-scale values elsewhere.
struct RunConfig {
  std::size_t dim = 32;
  std::size_t num_video_proxies = 4;
  std::size_t k_iterations = 2;
  double delta = 1.0;
  double eta = 1.0;
  DashMode dash_mode = DashMode::Scalar;
  bool scaled_attention = false;
  double alpha = 0.5;
  double beta = 0.25;
  double gamma = 0.5;
  double lr = 1e-3;
  double weight_decay = 0.2;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  double sigma_text = 0.4;
  double sigma_video = 0.2;
  double sigma_corrupt = 0.8;
  std::size_t n_pairs = 256;

  // Rejects unknown keys and wrongly typed values; missing keys keep defaults.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void validate() const;

  SynthConfig synth() const;
  GeneratorConfig generator() const;
  TrainConfig train(std::size_t workers) const;
  AdamWConfig adamw() const;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 1,
  kExitNumeric = 2,
  kExitIo = 3,
};

// Entry point shared by the executable and the tests. args[0] is the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tvproxy
