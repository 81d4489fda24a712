#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <random>
#include <set>

#include "test_support.hpp"
#include "tvproxy/dataset.hpp"
#include "tvproxy/error.hpp"
#include "tvproxy/tensor_io.hpp"

using namespace tvproxy;
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

std::vector<unsigned char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void append_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void append_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

// Hand-built file, independent of write_tensor.
std::vector<unsigned char> raw_file(const char magic[4], std::uint32_t version, std::uint8_t dtype,
                                    const std::vector<std::uint64_t>& dims,
                                    std::size_t payload_values) {
  std::vector<unsigned char> b(magic, magic + 4);
  append_u32(b, version);
  b.push_back(dtype);
  append_u32(b, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) append_u64(b, d);
  for (std::size_t i = 0; i < payload_values; ++i) append_u64(b, std::bit_cast<std::uint64_t>(0.5 * i));
  return b;
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  if (a.dims != b.dims || a.data.size() != b.data.size()) return false;
  return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("a 2x3 tensor is 77 bytes with the TVPX magic leading") {
  TempDir dir;
  const auto path = dir.path() / "t.tvpx";
  write_tensor(path, Tensor{{2, 3}, {1, 2, 3, 4, 5, 6}});
  const auto bytes = file_bytes(path);
  REQUIRE(bytes.size() == 77);
  CHECK(bytes[0] == 0x54);
  CHECK(bytes[1] == 0x56);
  CHECK(bytes[2] == 0x50);
  CHECK(bytes[3] == 0x58);
  // version 1, dtype 1, ndims 2, dims 2 and 3, first payload value 1.0
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 1);
  CHECK(bytes[9] == 2);
  CHECK(bytes[13] == 2);
  CHECK(bytes[21] == 3);
  std::uint64_t first = 0;
  for (int i = 0; i < 8; ++i) first |= std::uint64_t{bytes[29 + i]} << (8 * i);
  CHECK(std::bit_cast<double>(first) == 1.0);

  const TensorHeader h = read_tensor_header(path);
  CHECK(h.version == 1);
  CHECK(h.dtype == 1);
  CHECK(h.dims == std::vector<std::uint64_t>{2, 3});
  CHECK(h.header_bytes == 29);
  CHECK(h.file_bytes == 77);
}

TEST_CASE("random 8x8 roundtrips to identical bits") {
  TempDir dir;
  std::mt19937_64 rng(8);
  const Tensor t{{8, 8}, random_vector(64, rng)};
  write_tensor(dir.path() / "r.tvpx", t);
  CHECK(bits_equal(read_tensor(dir.path() / "r.tvpx"), t));
}

TEST_CASE("write rejects degenerate shapes, non-finite data and missing parents") {
  TempDir dir;
  CHECK(kind_of([&] { write_tensor(dir.path() / "z.tvpx", Tensor{{0}, {}}); }) ==
        ErrorKind::InvalidShape);
  CHECK(kind_of([&] { write_tensor(dir.path() / "z.tvpx", Tensor{{}, {}}); }) ==
        ErrorKind::InvalidShape);
  CHECK(kind_of([&] { write_tensor(dir.path() / "z.tvpx", Tensor{{2, 0}, {}}); }) ==
        ErrorKind::InvalidShape);
  CHECK(kind_of([&] { write_tensor(dir.path() / "z.tvpx", Tensor{{2}, {1.0}}); }) ==
        ErrorKind::ShapeMismatch);
  CHECK(kind_of([&] {
          write_tensor(dir.path() / "n.tvpx",
                       Tensor{{2}, {1.0, std::numeric_limits<double>::quiet_NaN()}});
        }) == ErrorKind::NonFiniteData);
  CHECK(kind_of([&] {
          write_tensor(dir.path() / "i.tvpx",
                       Tensor{{1}, {std::numeric_limits<double>::infinity()}});
        }) == ErrorKind::NonFiniteData);
  CHECK(kind_of([&] { write_tensor(dir.path() / "missing" / "x.tvpx", Tensor{{1}, {1.0}}); }) ==
        ErrorKind::IoError);
}

TEST_CASE("read rejects malformed files") {
  TempDir dir;
  const auto p = dir.path() / "bad.tvpx";

  put_bytes(p, raw_file("XXXX", 1, 1, {2, 3}, 6));
  CHECK(kind_of([&] { read_tensor(p); }) == ErrorKind::BadMagic);

  put_bytes(p, raw_file("TVPX", 1, 1, {2, 3}, 5));  // 40 payload bytes
  CHECK(kind_of([&] { read_tensor(p); }) == ErrorKind::TruncatedPayload);

  put_bytes(p, raw_file("TVPX", 2, 1, {2, 3}, 6));
  CHECK(kind_of([&] { read_tensor(p); }) == ErrorKind::UnsupportedVersion);

  put_bytes(p, raw_file("TVPX", 1, 2, {2, 3}, 6));
  CHECK(kind_of([&] { read_tensor(p); }) == ErrorKind::UnsupportedDtype);

  put_bytes(p, raw_file("TVPX", 1, 1, {2, 3}, 7));
  CHECK(kind_of([&] { read_tensor(p); }) == ErrorKind::TrailingData);

  put_bytes(p, raw_file("TVPX", 1, 1, {}, 0));
  CHECK(kind_of([&] { read_tensor(p); }) == ErrorKind::InvalidShape);

  auto header_cut = raw_file("TVPX", 1, 1, {2, 3}, 0);
  header_cut.resize(15);
  put_bytes(p, header_cut);
  CHECK(kind_of([&] { read_tensor(p); }) == ErrorKind::TruncatedPayload);

  CHECK(kind_of([&] { read_tensor(dir.path() / "absent.tvpx"); }) == ErrorKind::IoError);

  put_bytes(p, raw_file("TVPX", 1, 1, {2, 3}, 6));
  const Tensor t = read_tensor(p);
  CHECK(t.dims == std::vector<std::uint64_t>{2, 3});
  CHECK(t.data == std::vector<double>{0.0, 0.5, 1.0, 1.5, 2.0, 2.5});
}

TEST_CASE("roundtrip is bit-exact for ndims 1..3 up to 1e6 elements") {
  TempDir dir;
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> exponent(-300, 300);
  std::uniform_int_distribution<std::uint64_t> extent(1, 40);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor t;
    const int nd = 1 + trial % 3;
    for (int i = 0; i < nd; ++i) t.dims.push_back(extent(rng));
    t.data = random_vector(t.element_count(), rng);
    for (double& x : t.data) x = std::ldexp(x, exponent(rng) % 64);
    if (!t.data.empty()) t.data[0] = -0.0;
    if (t.data.size() > 1) t.data[1] = std::numeric_limits<double>::denorm_min();
    const auto p = dir.path() / ("p" + std::to_string(trial) + ".tvpx");
    write_tensor(p, t);
    CHECK(bits_equal(read_tensor(p), t));
  }
  // The upper end of the size range.
  Tensor big{{100, 100, 100}, random_vector(1'000'000, rng)};
  write_tensor(dir.path() / "big.tvpx", big);
  CHECK(bits_equal(read_tensor(dir.path() / "big.tvpx"), big));
  CHECK(std::filesystem::file_size(dir.path() / "big.tvpx") == 4 + 4 + 1 + 4 + 24 + 8'000'000);
}

TEST_CASE("noiseless synthetic data makes every view equal and text-only retrieval perfect") {
  SynthConfig cfg;
  cfg.n_pairs = 64;
  cfg.dim = 16;
  cfg.sigma_text = cfg.sigma_video = cfg.sigma_corrupt = 0.0;
  const EmbeddingDataset ds = generate_synthetic(cfg);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t m = 0; m < ds.num_video_proxies(); ++m) {
      for (std::size_t c = 0; c < ds.dim(); ++c) {
        CHECK(ds.video_proxies()[i](m, c) == ds.text_queries()(i, c));
      }
    }
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::size_t best = 0;
    double best_score = -2.0;
    for (std::size_t j = 0; j < ds.size(); ++j) {
      const double s = cosine_sim(ds.text_queries().row(i), ds.video_proxies()[j].row(0));
      if (s > best_score) {
        best_score = s;
        best = j;
      }
    }
    hits += best == i;
  }
  CHECK(hits == ds.size());
}

TEST_CASE("planted corruption: the retrieval proxy is the least aligned view") {
  const EmbeddingDataset ds = generate_synthetic(SynthConfig{});
  REQUIRE(ds.size() == 256);
  REQUIRE(ds.dim() == 32);
  REQUIRE(ds.num_video_proxies() == 4);
  double clean = 0.0, corrupted = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto t = ds.text_queries().row(i);
    const Matrix& p = ds.video_proxies()[i];
    // Brute-force cosine, independent of numkernel.
    auto cosine = [](std::span<const double> a, std::span<const double> b) {
      double num = 0.0, nt = 0.0, nb = 0.0;
      for (std::size_t c = 0; c < a.size(); ++c) {
        num += a[c] * b[c];
        nt += a[c] * a[c];
        nb += b[c] * b[c];
      }
      return num / std::sqrt(nt * nb);
    };
    corrupted += cosine(t, p.row(0));
    for (std::size_t m = 1; m < p.rows(); ++m) clean += cosine(t, p.row(m)) / 3.0;
  }
  MESSAGE("mean cos to clean proxies " << clean / 256 << ", to p1 " << corrupted / 256);
  CHECK(clean / 256 > corrupted / 256);
}

TEST_CASE("synthetic generation is deterministic and seed-sensitive") {
  SynthConfig cfg;
  CHECK(generate_synthetic(cfg) == generate_synthetic(cfg));
  SynthConfig other = cfg;
  other.seed = 43;
  CHECK_FALSE(generate_synthetic(cfg) == generate_synthetic(other));
}

TEST_CASE("every synthetic embedding has unit norm") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> dim(2, 40), m(1, 6), n(2, 50);
  std::uniform_real_distribution<double> sig(0.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    SynthConfig cfg{n(rng), dim(rng), m(rng), sig(rng), sig(rng), sig(rng), rng()};
    const EmbeddingDataset ds = generate_synthetic(cfg);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(std::abs(l2_norm(ds.text_queries().row(i)) - 1.0) <= 1e-12);
      for (std::size_t r = 0; r < ds.num_video_proxies(); ++r) {
        CHECK(std::abs(l2_norm(ds.video_proxies()[i].row(r)) - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("synthetic config validation") {
  auto bad = [](auto mutate) {
    SynthConfig cfg;
    mutate(cfg);
    return kind_of([&] { generate_synthetic(cfg); });
  };
  CHECK(bad([](SynthConfig& c) { c.n_pairs = 1; }) == ErrorKind::InvalidConfig);
  CHECK(bad([](SynthConfig& c) { c.dim = 1; }) == ErrorKind::InvalidConfig);
  CHECK(bad([](SynthConfig& c) { c.num_video_proxies = 0; }) == ErrorKind::InvalidConfig);
  CHECK(bad([](SynthConfig& c) { c.sigma_text = -0.1; }) == ErrorKind::InvalidConfig);
  CHECK(bad([](SynthConfig& c) { c.sigma_corrupt = std::nan(""); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("make_batches examples") {
  const auto ten = make_batches(10, 4, 3);
  REQUIRE(ten.size() == 2);
  CHECK(ten[0].size() == 4);
  CHECK(ten[1].size() == 4);
  std::set<std::size_t> seen(ten[0].begin(), ten[0].end());
  seen.insert(ten[1].begin(), ten[1].end());
  CHECK(seen.size() == 8);

  const auto eight = make_batches(8, 8, 3);
  REQUIRE(eight.size() == 1);
  std::vector<std::size_t> all = eight[0];
  std::sort(all.begin(), all.end());
  CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});

  CHECK(make_batches(100, 7, 9) == make_batches(100, 7, 9));
  CHECK(kind_of([] { make_batches(10, 1, 0); }) == ErrorKind::BatchTooSmall);
  CHECK(kind_of([] { make_batches(10, 11, 0); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("batches hold distinct indices with no duplicates across an epoch") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> n_dist(2, 300);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = n_dist(rng);
    const std::size_t b = std::uniform_int_distribution<std::size_t>(2, n)(rng);
    const auto batches = make_batches(n, b, rng());
    CHECK(batches.size() == n / b);
    std::set<std::size_t> seen;
    for (const auto& batch : batches) {
      CHECK(batch.size() == b);
      for (std::size_t idx : batch) {
        CHECK(idx < n);
        CHECK(seen.insert(idx).second);
      }
    }
  }
}

TEST_CASE("dataset directory roundtrip and validation") {
  TempDir dir;
  SynthConfig cfg;
  cfg.n_pairs = 12;
  cfg.dim = 6;
  cfg.num_video_proxies = 3;
  const EmbeddingDataset ds = generate_synthetic(cfg);
  save_dataset(dir.path(), ds);
  CHECK(std::filesystem::exists(dir.path() / "text_queries.tvpx"));
  CHECK(std::filesystem::exists(dir.path() / "video_proxies.tvpx"));
  CHECK(std::filesystem::exists(dir.path() / "manifest.json"));
  CHECK(read_tensor_header(dir.path() / "video_proxies.tvpx").dims ==
        std::vector<std::uint64_t>{12, 3, 6});

  const EmbeddingDataset back = load_dataset(dir.path());
  CHECK(back.manifest() == ds.manifest());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t c = 0; c < ds.dim(); ++c) {
      CHECK(std::abs(back.text_queries()(i, c) - ds.text_queries()(i, c)) <= 1e-15);
    }
  }

  // Un-normalized ingestion is normalized on load.
  Tensor raw = to_tensor(Matrix(12, 6, 3.0));
  write_tensor(dir.path() / "text_queries.tvpx", raw);
  const EmbeddingDataset scaled = load_dataset(dir.path());
  CHECK(std::abs(l2_norm(scaled.text_queries().row(0)) - 1.0) <= 1e-12);

  write_tensor(dir.path() / "text_queries.tvpx", to_tensor(Matrix(12, 6, 0.0)));
  CHECK(kind_of([&] { load_dataset(dir.path()); }) == ErrorKind::ZeroVector);

  CHECK(kind_of([] {
          EmbeddingDataset(Matrix(2, 2, 1.0), {Matrix(1, 2, 1.0), Matrix(1, 2, 1.0)},
                           {{0, 0}, {1, 5}});
        }) == ErrorKind::MissingGroundTruth);
}
