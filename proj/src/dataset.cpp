#include "tvproxy/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include <json.hpp>

#include "tvproxy/error.hpp"
#include "tvproxy/tensor_io.hpp"

namespace tvproxy {

namespace {

constexpr const char* kTextFile = "text_queries.tvpx";
constexpr const char* kVideoFile = "video_proxies.tvpx";
constexpr const char* kManifestFile = "manifest.json";

void require_nonzero_rows(const Matrix& m, const std::string& what) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (l2_norm(m.row(r)) < kZeroNormThreshold) {
      throw Error(ErrorKind::ZeroVector, what + " row " + std::to_string(r) + " has zero norm");
    }
  }
}

void normalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const Vector unit = normalized(m.row(r));
    std::copy(unit.begin(), unit.end(), m.row(r).begin());
  }
}

}  // namespace

EmbeddingDataset::EmbeddingDataset(Matrix text_queries, std::vector<Matrix> video_proxies,
                                   std::vector<PairId> manifest)
    : text_queries_(std::move(text_queries)),
      video_proxies_(std::move(video_proxies)),
      manifest_(std::move(manifest)) {
  if (text_queries_.rows() == 0 || video_proxies_.empty()) {
    throw Error(ErrorKind::EmptyInput, "dataset needs at least one text and one video");
  }
  if (text_queries_.cols() == 0) throw Error(ErrorKind::InvalidShape, "embedding dim is zero");
  num_proxies_ = video_proxies_.front().rows();
  if (num_proxies_ == 0) throw Error(ErrorKind::InvalidShape, "videos carry no proxies");
  for (std::size_t v = 0; v < video_proxies_.size(); ++v) {
    const Matrix& p = video_proxies_[v];
    if (p.rows() != num_proxies_ || p.cols() != dim()) {
      throw Error(ErrorKind::ShapeMismatch, "video " + std::to_string(v) + " proxy stack shape");
    }
    require_nonzero_rows(p, "video " + std::to_string(v) + " proxy");
  }
  require_nonzero_rows(text_queries_, "text query");
  if (manifest_.size() != num_texts()) {
    throw Error(ErrorKind::MissingGroundTruth, "manifest has " + std::to_string(manifest_.size()) +
                                                   " pairs for " + std::to_string(num_texts()) +
                                                   " texts");
  }
  std::vector<bool> seen(num_texts(), false);
  for (const auto& pair : manifest_) {
    if (pair.text_id >= num_texts() || pair.video_id >= num_videos()) {
      throw Error(ErrorKind::MissingGroundTruth, "manifest id out of range");
    }
    if (seen[pair.text_id]) {
      throw Error(ErrorKind::MissingGroundTruth,
                  "text " + std::to_string(pair.text_id) + " listed twice");
    }
    seen[pair.text_id] = true;
  }
}

Matrix EmbeddingDataset::text_batch(std::span<const std::size_t> pair_indices) const {
  Matrix out(pair_indices.size(), dim());
  for (std::size_t b = 0; b < pair_indices.size(); ++b) {
    const auto src = text_queries_.row(manifest_.at(pair_indices[b]).text_id);
    std::copy(src.begin(), src.end(), out.row(b).begin());
  }
  return out;
}

std::vector<Matrix> EmbeddingDataset::video_batch(std::span<const std::size_t> pair_indices) const {
  std::vector<Matrix> out;
  out.reserve(pair_indices.size());
  for (std::size_t idx : pair_indices) out.push_back(video_proxies_[manifest_.at(idx).video_id]);
  return out;
}

std::vector<std::size_t> EmbeddingDataset::ground_truth() const {
  std::vector<std::size_t> gt(num_texts());
  for (const auto& pair : manifest_) gt[pair.text_id] = pair.video_id;
  return gt;
}

void SynthConfig::validate() const {
  if (n_pairs < 2) throw Error(ErrorKind::InvalidConfig, "n_pairs must be >= 2");
  if (dim < 2) throw Error(ErrorKind::InvalidConfig, "dim must be >= 2");
  if (num_video_proxies < 1) throw Error(ErrorKind::InvalidConfig, "num_video_proxies must be >= 1");
  for (double s : {sigma_text, sigma_video, sigma_corrupt}) {
    if (!(s >= 0.0) || !std::isfinite(s)) {
      throw Error(ErrorKind::InvalidConfig, "noise scales must be finite and >= 0");
    }
  }
}

EmbeddingDataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t d = cfg.dim;
  const std::size_t m_count = cfg.num_video_proxies;

  Matrix texts(cfg.n_pairs, d);
  std::vector<Matrix> videos;
  videos.reserve(cfg.n_pairs);
  std::vector<PairId> manifest;
  manifest.reserve(cfg.n_pairs);
  Vector latent(d);
  Vector view(d);

  for (std::size_t i = 0; i < cfg.n_pairs; ++i) {
    // Resample the (measure-zero) all-zero latent so every view has a direction.
    do {
      for (double& z : latent) z = gauss(rng);
    } while (l2_norm(latent) < kZeroNormThreshold);

    for (std::size_t c = 0; c < d; ++c) view[c] = latent[c] + cfg.sigma_text * gauss(rng);
    const Vector t = normalized(view);
    std::copy(t.begin(), t.end(), texts.row(i).begin());

    Matrix stack(m_count, d);
    for (std::size_t m = 0; m < m_count; ++m) {
      for (std::size_t c = 0; c < d; ++c) view[c] = latent[c] + cfg.sigma_video * gauss(rng);
      if (m == 0) {
        for (std::size_t c = 0; c < d; ++c) view[c] += cfg.sigma_corrupt * gauss(rng);
      }
      const Vector p = normalized(view);
      std::copy(p.begin(), p.end(), stack.row(m).begin());
    }
    videos.push_back(std::move(stack));
    manifest.push_back({i, i});
  }
  return EmbeddingDataset(std::move(texts), std::move(videos), std::move(manifest));
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::uint64_t seed) {
  if (batch_size < 2) throw Error(ErrorKind::BatchTooSmall, "batch size must be >= 2");
  if (batch_size > n) {
    throw Error(ErrorKind::InvalidConfig, "batch size " + std::to_string(batch_size) +
                                              " exceeds dataset size " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start + batch_size <= n; start += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> make_batches(const EmbeddingDataset& ds,
                                                   std::size_t batch_size, std::uint64_t seed) {
  return make_batches(ds.size(), batch_size, seed);
}

void save_dataset(const std::filesystem::path& dir, const EmbeddingDataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir.string() + ": " + ec.message());

  write_tensor(dir / kTextFile, to_tensor(ds.text_queries()));

  Tensor videos{{ds.num_videos(), ds.num_video_proxies(), ds.dim()}, {}};
  videos.data.reserve(videos.element_count());
  for (const Matrix& stack : ds.video_proxies()) {
    videos.data.insert(videos.data.end(), stack.values().begin(), stack.values().end());
  }
  write_tensor(dir / kVideoFile, videos);

  nlohmann::json manifest;
  manifest["dim"] = ds.dim();
  manifest["num_video_proxies"] = ds.num_video_proxies();
  manifest["text_queries"] = kTextFile;
  manifest["video_proxies"] = kVideoFile;
  manifest["pairs"] = nlohmann::json::array();
  for (const auto& p : ds.manifest()) {
    manifest["pairs"].push_back({{"text_id", p.text_id}, {"video_id", p.video_id}});
  }
  std::ofstream out(dir / kManifestFile, std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::IoError, "write failed for manifest in " + dir.string());
}

EmbeddingDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + (dir / kManifestFile).string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::IoError, "malformed manifest: " + std::string(e.what()));
  }

  std::size_t dim = 0;
  std::size_t m_count = 0;
  std::vector<PairId> pairs;
  std::string text_file = kTextFile;
  std::string video_file = kVideoFile;
  try {
    dim = manifest.at("dim").get<std::size_t>();
    m_count = manifest.at("num_video_proxies").get<std::size_t>();
    text_file = manifest.value("text_queries", text_file);
    video_file = manifest.value("video_proxies", video_file);
    for (const auto& p : manifest.at("pairs")) {
      pairs.push_back({p.at("text_id").get<std::size_t>(), p.at("video_id").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, "manifest schema: " + std::string(e.what()));
  }

  Matrix texts = to_matrix(read_tensor(dir / text_file));
  const Tensor video_tensor = read_tensor(dir / video_file);
  if (video_tensor.dims.size() != 3 || video_tensor.dims[1] != m_count ||
      video_tensor.dims[2] != dim || texts.cols() != dim) {
    throw Error(ErrorKind::ShapeMismatch, "tensor shapes disagree with manifest");
  }
  const std::size_t stack_size = m_count * dim;
  std::vector<Matrix> videos;
  videos.reserve(video_tensor.dims[0]);
  for (std::size_t v = 0; v < video_tensor.dims[0]; ++v) {
    const auto first = video_tensor.data.begin() + static_cast<std::ptrdiff_t>(v * stack_size);
    videos.emplace_back(m_count, dim, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(stack_size)));
  }

  normalize_rows(texts);
  for (Matrix& stack : videos) normalize_rows(stack);
  return EmbeddingDataset(std::move(texts), std::move(videos), std::move(pairs));
}

}  // namespace tvproxy
