#pragma once

// Datasets: CIFAR-10 binary batches, synthetic two-class generators,
// stratified subsetting and train-fitted per-channel standardization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ntk/csv.hpp"
#include "ntk/error.hpp"
#include "ntk/rng.hpp"

namespace ntk {

struct DatasetMeta {
  std::string source;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::uint64_t seed = 0;
};

struct Dataset {
  Eigen::MatrixXd inputs;   // n x d
  Eigen::MatrixXd targets;  // n x k one-hot
  DatasetMeta meta;

  std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(inputs.cols()); }
  std::size_t classes() const { return static_cast<std::size_t>(targets.cols()); }

  std::vector<int> labels() const {
    std::vector<int> out(size());
    for (Eigen::Index i = 0; i < targets.rows(); ++i) {
      Eigen::Index arg = 0;
      targets.row(i).maxCoeff(&arg);
      out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
    }
    return out;
  }

  Dataset rows(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.inputs.resize(static_cast<Eigen::Index>(idx.size()), inputs.cols());
    out.targets.resize(static_cast<Eigen::Index>(idx.size()), targets.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      out.inputs.row(static_cast<Eigen::Index>(r)) = inputs.row(static_cast<Eigen::Index>(idx[r]));
      out.targets.row(static_cast<Eigen::Index>(r)) =
          targets.row(static_cast<Eigen::Index>(idx[r]));
    }
    out.meta = meta;
    return out;
  }
};

inline Eigen::MatrixXd one_hot(const std::vector<int>& labels, std::size_t classes) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()),
                                            static_cast<Eigen::Index>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i) t(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return t;
}

// ---- CIFAR-10 ------------------------------------------------------------

inline constexpr std::size_t kCifarPixels = 3072;  // 3 x 32 x 32, channel-major
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

inline Dataset load_cifar10(const std::vector<std::string>& paths) {
  std::vector<unsigned char> bytes;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<unsigned char> chunk((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (chunk.size() % kCifarRecord != 0)
      throw IoError(path + ": length " + std::to_string(chunk.size()) +
                    " is not a multiple of 3073");
    bytes.insert(bytes.end(), chunk.begin(), chunk.end());
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset d;
  d.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kCifarPixels));
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9)
      throw IoError("record " + std::to_string(i) + ": label byte " + std::to_string(rec[0]) +
                    " > 9");
    labels[i] = rec[0];
    for (std::size_t k = 0; k < kCifarPixels; ++k)
      d.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rec[1 + k] / 255.0;
  }
  d.targets = one_hot(labels, 10);
  d.meta.source = "cifar10";
  return d;
}

// ---- synthetic -----------------------------------------------------------

enum class SyntheticKind { TwoSpheres, XorClusters };

inline SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "two-spheres") return SyntheticKind::TwoSpheres;
  if (name == "xor-clusters") return SyntheticKind::XorClusters;
  throw SpecError("unknown synthetic dataset '" + name + "'");
}

// Balanced two-class data; point i has label i % 2.
// two-spheres: class 0 on the unit sphere, class 1 on radius 1.5, plus
//   isotropic noise of total scale `noise`.
// xor-clusters: class 0 around (1,1) and (-1,-1), class 1 around (1,-1) and
//   (-1,1) in the first two coordinates, other coordinates pure noise.
inline Dataset synthetic(SyntheticKind kind, std::size_t n, std::size_t d, double noise,
                         std::uint64_t seed) {
  if (n == 0 || n % 2 != 0) throw SpecError("synthetic: n must be even and positive");
  if (d < 2) throw SpecError("synthetic: d must be >= 2");
  Dataset out;
  out.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::vector<int> labels(n);
  const double noise_scale = noise / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    labels[i] = label;
    Eigen::VectorXd x(static_cast<Eigen::Index>(d));
    const std::uint64_t point_stream = 2 * i;
    const std::uint64_t noise_stream = 2 * i + 1;
    if (kind == SyntheticKind::TwoSpheres) {
      for (std::size_t k = 0; k < d; ++k)
        x(static_cast<Eigen::Index>(k)) = counter_normal(seed, point_stream, k);
      x *= (label == 0 ? 1.0 : 1.5) / x.norm();
    } else {
      x.setZero();
      const double a = ((i / 2) % 2 == 0) ? 1.0 : -1.0;
      x(0) = a;
      x(1) = label == 0 ? a : -a;
    }
    for (std::size_t k = 0; k < d; ++k)
      x(static_cast<Eigen::Index>(k)) += noise_scale * counter_normal(seed, noise_stream, k);
    out.inputs.row(static_cast<Eigen::Index>(i)) = x.transpose();
  }
  out.targets = one_hot(labels, 2);
  out.meta.source = kind == SyntheticKind::TwoSpheres ? "two-spheres" : "xor-clusters";
  out.meta.seed = seed;
  return out;
}

// ---- subsetting ----------------------------------------------------------

struct Split {
  Dataset train;
  Dataset test;
};

namespace detail {

inline void seeded_shuffle(std::vector<std::size_t>& v, std::uint64_t seed, std::uint64_t stream) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = counter_hash(seed, stream, i) % i;
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace detail

// Class-stratified disjoint train/test draw. Classes are visited round-robin
// so per-class counts differ by at most one while every class has points
// left; rows keep their original relative order.
inline Split subset(const Dataset& data, std::size_t n_train, std::size_t n_test,
                    std::uint64_t seed) {
  if (n_train + n_test > data.size())
    throw SpecError("subset: requested " + std::to_string(n_train + n_test) + " points, dataset has " +
                    std::to_string(data.size()));
  const auto labels = data.labels();
  std::vector<std::vector<std::size_t>> pools(data.classes());
  for (std::size_t i = 0; i < labels.size(); ++i) pools[static_cast<std::size_t>(labels[i])].push_back(i);
  for (std::size_t c = 0; c < pools.size(); ++c) {
    detail::seeded_shuffle(pools[c], seed, c);
    std::reverse(pools[c].begin(), pools[c].end());  // pop_back draws in shuffled order
  }
  auto draw = [&](std::size_t count) {
    std::vector<std::size_t> idx;
    std::size_t c = 0;
    while (idx.size() < count) {
      if (!pools[c].empty()) {
        idx.push_back(pools[c].back());
        pools[c].pop_back();
      }
      c = (c + 1) % pools.size();
    }
    std::sort(idx.begin(), idx.end());
    return idx;
  };
  Split s{data.rows(draw(n_train)), data.rows(draw(n_test))};
  for (auto* part : {&s.train, &s.test}) {
    part->meta.n_train = n_train;
    part->meta.n_test = n_test;
    part->meta.seed = seed;
  }
  return s;
}

// ---- preprocessing -------------------------------------------------------

// Per-channel mean/std over all pixels of a channel-major input matrix.
struct ChannelStandardizer {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::size_t channels = 1;

  static ChannelStandardizer fit(const Eigen::MatrixXd& x, std::size_t channels) {
    if (channels == 0 || x.cols() % static_cast<Eigen::Index>(channels) != 0)
      throw ShapeError("standardizer: channel count does not divide input dimension");
    ChannelStandardizer s;
    s.channels = channels;
    const Eigen::Index P = x.cols() / static_cast<Eigen::Index>(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      const auto block = x.middleCols(static_cast<Eigen::Index>(c) * P, P);
      const double m = block.mean();
      const double var = (block.array() - m).square().mean();
      s.mean.push_back(m);
      s.stddev.push_back(var > 0.0 ? std::sqrt(var) : 1.0);
    }
    return s;
  }

  void apply(Eigen::MatrixXd& x) const {
    const Eigen::Index P = x.cols() / static_cast<Eigen::Index>(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      auto block = x.middleCols(static_cast<Eigen::Index>(c) * P, P);
      block = (block.array() - mean[c]) / stddev[c];
    }
  }
};

// Fits statistics on the train split only and applies them to both.
inline ChannelStandardizer standardize(Split& split, std::size_t channels) {
  auto s = ChannelStandardizer::fit(split.train.inputs, channels);
  s.apply(split.train.inputs);
  s.apply(split.test.inputs);
  return s;
}

inline void center_targets(Dataset& d) {
  d.targets.array() -= 1.0 / static_cast<double>(d.classes());
}

// Fraction of rows whose argmax score disagrees with the argmax target. A
// single-column (+-1) target is scored by sign.
inline double classification_error(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& targets) {
  if (scores.rows() != targets.rows() || scores.cols() != targets.cols())
    throw ShapeError("classification_error: shape mismatch");
  if (scores.rows() == 0) return 0.0;
  std::size_t wrong = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    if (scores.cols() == 1) {
      wrong += (scores(i, 0) >= 0.0) != (targets(i, 0) >= 0.0);
      continue;
    }
    Eigen::Index a = 0, b = 0;
    scores.row(i).maxCoeff(&a);
    targets.row(i).maxCoeff(&b);
    wrong += a != b;
  }
  return static_cast<double>(wrong) / static_cast<double>(scores.rows());
}

// One row per test point: class scores then the argmax label.
inline CsvTable predictions_table(const Eigen::MatrixXd& scores) {
  std::vector<std::string> header;
  for (Eigen::Index c = 0; c < scores.cols(); ++c) header.push_back("score_" + std::to_string(c));
  header.push_back("label");
  CsvTable t(header);
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    std::vector<CsvCell> row;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) row.emplace_back(scores(i, c));
    Eigen::Index arg = 0;
    scores.row(i).maxCoeff(&arg);
    row.emplace_back(static_cast<long long>(arg));
    t.add_row(std::move(row));
  }
  return t;
}

}  // namespace ntk
