#pragma once

#include "fusekit/distribution.hpp"
#include "fusekit/tensor.hpp"
#include "fusekit/tensorio.hpp"
#include "fusekit/toy_lm.hpp"
#include "oracles/lm_oracle.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

namespace support {

namespace fs = std::filesystem;

inline const fs::path kFixtures = FUSEKIT_FIXTURES_DIR;

class TempDir {
public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("fusekit-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

private:
  fs::path path_;
};

inline std::vector<std::uint8_t> bytes_of(const fs::path& p) { return fusekit::read_file_bytes(p); }

/// Every regular file below `dir`, keyed by relative path.
inline std::map<std::string, std::vector<std::uint8_t>> tree_bytes(const fs::path& dir) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) out[fs::relative(entry.path(), dir).string()] = bytes_of(entry.path());
  }
  return out;
}

using Layout = std::vector<std::pair<std::string, std::vector<std::size_t>>>;

template <typename Scalar>
fusekit::TensorMap<Scalar> random_map(std::mt19937_64& rng, const Layout& layout, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  fusekit::TensorMap<Scalar> map;
  for (const auto& [name, shape] : layout) {
    auto t = fusekit::make_tensor<Scalar>(shape);
    for (Eigen::Index i = 0; i < t.values.size(); ++i) t.values.data()[i] = static_cast<Scalar>(normal(rng));
    map.tensors.emplace(name, std::move(t));
  }
  return map;
}

/// 1 to 3 tensors, rank 1 or 2, every dimension in [1, max_dim].
inline Layout random_layout(std::mt19937_64& rng, std::size_t max_dim = 8) {
  std::uniform_int_distribution<std::size_t> dim(1, max_dim), count(1, 3), rank(1, 2);
  Layout layout;
  const auto n = count(rng);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> shape;
    const auto r = rank(rng);
    for (std::size_t k = 0; k < r; ++k) shape.push_back(dim(rng));
    layout.emplace_back("t" + std::to_string(i), shape);
  }
  return layout;
}

/// Stochastic sparse row with `support` distinct ids below `vocab`.
inline fusekit::SparseRow random_row(std::mt19937_64& rng, std::size_t vocab, std::size_t support) {
  std::vector<fusekit::TokenId> ids(vocab);
  for (std::size_t v = 0; v < vocab; ++v) ids[v] = static_cast<fusekit::TokenId>(v);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  fusekit::SparseRow row;
  double total = 0;
  for (std::size_t i = 0; i < support; ++i) {
    row.push_back({ids[i], u(rng)});
    total += row.back().prob;
  }
  for (auto& e : row) e.prob /= total;
  fusekit::canonicalize(row);
  return row;
}

/// Cuts `text` into 1 to `max_parts` non-empty pieces at random points.
inline std::vector<std::string> split_randomly(std::mt19937_64& rng, const std::string& text, std::size_t max_parts) {
  const std::size_t limit = std::min(max_parts, text.size());
  const std::size_t parts = std::uniform_int_distribution<std::size_t>(1, limit)(rng);
  std::vector<std::size_t> cuts(text.size() - 1);
  std::iota(cuts.begin(), cuts.end(), std::size_t{1});
  std::shuffle(cuts.begin(), cuts.end(), rng);
  cuts.resize(parts - 1);
  std::sort(cuts.begin(), cuts.end());
  cuts.push_back(text.size());
  std::vector<std::string> out;
  std::size_t at = 0;
  for (std::size_t c : cuts) {
    out.push_back(text.substr(at, c - at));
    at = c;
  }
  return out;
}

inline std::string random_text(std::mt19937_64& rng, std::size_t max_len, const std::string& alphabet) {
  const std::size_t len = std::uniform_int_distribution<std::size_t>(1, max_len)(rng);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) {
    s.push_back(alphabet[std::uniform_int_distribution<std::size_t>(0, alphabet.size() - 1)(rng)]);
  }
  return s;
}

inline oracle::PlainLM plain_copy(const fusekit::ToyLM<double>& m) {
  oracle::PlainLM p;
  p.V = static_cast<std::size_t>(m.vocab_size());
  p.d = static_cast<std::size_t>(m.embed_dim());
  p.h = static_cast<std::size_t>(m.hidden_dim());
  const auto grid = [](const auto& mat) {
    std::vector<std::vector<double>> g(static_cast<std::size_t>(mat.rows()),
                                       std::vector<double>(static_cast<std::size_t>(mat.cols())));
    for (Eigen::Index i = 0; i < mat.rows(); ++i) {
      for (Eigen::Index j = 0; j < mat.cols(); ++j) g[i][j] = mat(i, j);
    }
    return g;
  };
  p.embedding = grid(m.embedding);
  p.hidden = grid(m.hidden);
  p.output = grid(m.output);
  p.hidden_bias = grid(m.hidden_bias)[0];
  p.output_bias = grid(m.output_bias)[0];
  return p;
}

inline std::vector<double> flat(const fusekit::Tensor<double>& t) {
  return {t.values.data(), t.values.data() + t.values.size()};
}

/// Central finite differences of `loss(plain model)` with respect to every
/// parameter, laid out block by block like ToyLM::for_each_block.
template <typename LossFn>
std::vector<double> finite_difference_gradient(const fusekit::ToyLM<double>& model, LossFn&& loss,
                                               double step = 1e-6) {
  std::vector<double> grad;
  auto probe = model;
  probe.for_each_block([&](auto& block) {
    for (Eigen::Index i = 0; i < block.size(); ++i) {
      const double saved = block.data()[i];
      block.data()[i] = saved + step;
      const double up = loss(plain_copy(probe));
      block.data()[i] = saved - step;
      const double down = loss(plain_copy(probe));
      block.data()[i] = saved;
      grad.push_back((up - down) / (2 * step));
    }
  });
  return grad;
}

inline std::vector<double> flatten(const fusekit::ToyLM<double>& model) {
  std::vector<double> out;
  model.for_each_block([&](const auto& block) { out.insert(out.end(), block.data(), block.data() + block.size()); });
  return out;
}

/// ||a - b|| / max(||a|| + ||b||, tiny)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), 1e-300);
}

/// Dense copy of a sparse distribution matrix.
inline std::vector<std::vector<double>> dense_rows(const fusekit::DistributionMatrix& m) {
  std::vector<std::vector<double>> out(m.rows.size(), std::vector<double>(m.vocab_size, 0.0));
  for (std::size_t t = 0; t < m.rows.size(); ++t) {
    for (const auto& e : m.rows[t]) out[t][e.id] = e.prob;
  }
  return out;
}

}  // namespace support
