#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "tvproxy/numkernel.hpp"

namespace tvproxy {

struct PairId {
  std::size_t text_id = 0;
  std::size_t video_id = 0;
  bool operator==(const PairId&) const = default;
};

// Text queries (N x d) and, per video, an M x d stack of proxy embeddings
// whose first row is the video's retrieval feature. Immutable once built.
class EmbeddingDataset {
 public:
  EmbeddingDataset(Matrix text_queries, std::vector<Matrix> video_proxies,
                   std::vector<PairId> manifest);

  std::size_t size() const noexcept { return manifest_.size(); }
  std::size_t dim() const noexcept { return text_queries_.cols(); }
  std::size_t num_video_proxies() const noexcept { return num_proxies_; }
  std::size_t num_texts() const noexcept { return text_queries_.rows(); }
  std::size_t num_videos() const noexcept { return video_proxies_.size(); }

  const Matrix& text_queries() const noexcept { return text_queries_; }
  const std::vector<Matrix>& video_proxies() const noexcept { return video_proxies_; }
  const std::vector<PairId>& manifest() const noexcept { return manifest_; }

  // Gathers the texts and videos of the given manifest entries, in order.
  Matrix text_batch(std::span<const std::size_t> pair_indices) const;
  std::vector<Matrix> video_batch(std::span<const std::size_t> pair_indices) const;

  // Ground-truth video for every text row, as needed by retrieval evaluation.
  std::vector<std::size_t> ground_truth() const;

  bool operator==(const EmbeddingDataset&) const = default;

 private:
  Matrix text_queries_;
  std::vector<Matrix> video_proxies_;
  std::vector<PairId> manifest_;
  std::size_t num_proxies_ = 0;
};

struct SynthConfig {
  std::size_t n_pairs = 256;
  std::size_t dim = 32;
  std::size_t num_video_proxies = 4;
  double sigma_text = 0.4;
  double sigma_video = 0.2;
  double sigma_corrupt = 0.8;
  std::uint64_t seed = 42;

  void validate() const;
};

// Planted pairs: a latent z per pair, a noisy text view, M noisy video views,
// and extra corruption on the first video view only.
EmbeddingDataset generate_synthetic(const SynthConfig& cfg);

// Seeded permutation of 0..n-1 cut into full batches; the remainder is dropped.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size,
                                                   std::uint64_t seed);
std::vector<std::vector<std::size_t>> make_batches(const EmbeddingDataset& ds,
                                                   std::size_t batch_size, std::uint64_t seed);

// Directory layout: text_queries.tvpx, video_proxies.tvpx, manifest.json.
void save_dataset(const std::filesystem::path& dir, const EmbeddingDataset& ds);
// Rows are L2-normalized on load so external feature dumps need no preprocessing.
EmbeddingDataset load_dataset(const std::filesystem::path& dir);

}  // namespace tvproxy
