#pragma once

// Explicit finite-width networks at widths s·Nˡ: initialization per
// parameterization, forward pass, reverse-mode parameter gradients, Monte
// Carlo NNGP/NTK estimates, and plain minibatch SGD on an MSE loss.
//
// Activations of a batch are n x (C·P) matrices, feature index c·P + p.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ntk/csv.hpp"
#include "ntk/data.hpp"
#include "ntk/error.hpp"
#include "ntk/kernel.hpp"
#include "ntk/netspec.hpp"
#include "ntk/parallel.hpp"
#include "ntk/rng.hpp"

namespace ntk {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FiniteLayer {
  LayerKind kind = LayerKind::Dense;
  std::size_t in_features = 0;  // channels (Conv/Relu/GAP) or flat width (Dense)
  std::size_t out_features = 0;
  std::size_t pixels = 1;       // spatial size of this layer's input
  std::vector<int> offsets;     // Conv only
  // out x (in·M); column m·in + j multiplies input channel j at pixel p+offsets[m].
  RowMatrix weight;
  Vector bias;
  double weight_prefactor = 1.0;
  double bias_prefactor = 1.0;

  bool parametric() const { return kind == LayerKind::Dense || kind == LayerKind::Conv; }
  std::size_t filter_size() const { return offsets.empty() ? 1 : offsets.size(); }
  std::size_t num_parameters() const {
    return parametric() ? static_cast<std::size_t>(weight.size() + bias.size()) : 0;
  }
};

struct InitOptions {
  // Output units of the readout layer; 0 keeps the spec's readout width.
  std::size_t readout_heads = 0;
  std::size_t parameter_cap = 100'000'000;
};

// In-layer variance/prefactor placement for one affine layer.
struct AffineScaling {
  double weight_std;
  double bias_std;
  double weight_prefactor;
  double bias_prefactor;
};

inline AffineScaling affine_scaling(const AffineLayerPlan& a, std::size_t s, const Hyperparams& hp,
                                    Parameterization p) {
  const double layer_s = a.fan_in_scaled ? static_cast<double>(s) : 1.0;
  const double fan_in = static_cast<double>(a.fan_in_base) * layer_s;
  const double m = static_cast<double>(a.filter_size);
  switch (p) {
    case Parameterization::NaiveStandard:
      return {std::sqrt(hp.sigma_w_sq / (fan_in * m)), std::sqrt(hp.sigma_b_sq), 1.0, 1.0};
    case Parameterization::NTK:
      return {1.0, 1.0, std::sqrt(hp.sigma_w_sq / (fan_in * m)), std::sqrt(hp.sigma_b_sq)};
    case Parameterization::ImprovedStandard:
      return {std::sqrt(hp.sigma_w_sq / (static_cast<double>(a.fan_in_base) * m)),
              std::sqrt(hp.sigma_b_sq), 1.0 / std::sqrt(layer_s), 1.0};
  }
  return {1.0, 1.0, 1.0, 1.0};
}

struct ForwardCache {
  std::vector<Matrix> inputs;  // inputs[l] feeds layer l
  Matrix output;
};

class FiniteNet {
 public:
  static FiniteNet init(const NetworkSpec& spec, std::size_t s, std::uint64_t seed,
                        const InitOptions& opts = {}) {
    if (s == 0) throw SpecError("width scale s must be >= 1");
    const auto plan = affine_plan(spec);
    FiniteNet net;
    net.spec_ = spec;
    net.scale_ = s;
    net.seed_ = seed;

    std::size_t features = spec.input_channels();
    std::size_t pixels = spec.spatial_input() ? spec.spatial_size : 1;
    std::size_t total = 0;
    std::size_t next_affine = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      const auto& ls = spec.layers[i];
      FiniteLayer layer;
      layer.kind = ls.kind;
      layer.in_features = features;
      layer.pixels = pixels;
      switch (ls.kind) {
        case LayerKind::Relu: layer.out_features = features; break;
        case LayerKind::GlobalAvgPool:
          layer.out_features = features;
          pixels = 1;
          break;
        case LayerKind::VectorizeReadout:
          layer.out_features = features * pixels;
          features = layer.out_features;
          pixels = 1;
          break;
        case LayerKind::Dense:
        case LayerKind::Conv: {
          const auto& a = plan[next_affine++];
          if (ls.kind == LayerKind::Conv) layer.offsets = ls.filter_offsets;
          layer.out_features = a.readout
                                   ? (opts.readout_heads ? opts.readout_heads : a.out_base)
                                   : a.out_base * s;
          const std::size_t cols = features * layer.filter_size();
          const std::size_t count = layer.out_features * cols + layer.out_features;
          if (count > opts.parameter_cap - std::min(total, opts.parameter_cap))
            throw SpecError("finite net exceeds parameter cap of " +
                            std::to_string(opts.parameter_cap));
          total += count;
          const AffineScaling sc = affine_scaling(a, s, spec.hyper, spec.parameterization);
          layer.weight.resize(static_cast<Eigen::Index>(layer.out_features),
                              static_cast<Eigen::Index>(cols));
          layer.bias.resize(static_cast<Eigen::Index>(layer.out_features));
          fill_normal(std::span<double>(layer.weight.data(), static_cast<std::size_t>(layer.weight.size())),
                      seed, 2 * i, sc.weight_std);
          fill_normal(std::span<double>(layer.bias.data(), static_cast<std::size_t>(layer.bias.size())),
                      seed, 2 * i + 1, sc.bias_std);
          layer.weight_prefactor = sc.weight_prefactor;
          layer.bias_prefactor = sc.bias_prefactor;
          break;
        }
      }
      features = layer.out_features;
      net.layers_.push_back(std::move(layer));
    }
    return net;
  }

  const NetworkSpec& spec() const { return spec_; }
  std::size_t scale() const { return scale_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<FiniteLayer>& layers() const { return layers_; }
  std::vector<FiniteLayer>& mutable_layers() { return layers_; }
  std::size_t output_dim() const { return layers_.back().out_features; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.num_parameters();
    return n;
  }

  // Flat parameter vector: per affine layer, weights row-major then biases.
  std::vector<double> parameters() const {
    std::vector<double> out;
    out.reserve(num_parameters());
    for (const auto& l : layers_) {
      if (!l.parametric()) continue;
      out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
      out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
    return out;
  }

  void set_parameters(std::span<const double> flat) {
    if (flat.size() != num_parameters()) throw ShapeError("set_parameters: wrong length");
    std::size_t k = 0;
    for (auto& l : layers_) {
      if (!l.parametric()) continue;
      for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = flat[k++];
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = flat[k++];
    }
  }

  ForwardCache forward_cached(const Matrix& X) const {
    if (static_cast<std::size_t>(X.cols()) != spec_.input_dim)
      throw ShapeError("forward: input dimension " + std::to_string(X.cols()) +
                       " does not match spec input_dim " + std::to_string(spec_.input_dim));
    ForwardCache cache;
    Matrix h = X;
    for (const auto& l : layers_) {
      cache.inputs.push_back(h);
      h = apply(l, h);
    }
    cache.output = std::move(h);
    return cache;
  }

  Matrix forward(const Matrix& X) const { return forward_cached(X).output; }

  // Outputs of every layer (element l is the output of layer l).
  std::vector<Matrix> layer_outputs(const Matrix& X) const {
    auto cache = forward_cached(X);
    std::vector<Matrix> out(cache.inputs.begin() + 1, cache.inputs.end());
    out.push_back(std::move(cache.output));
    return out;
  }

  // Reverse pass from d(loss)/d(output) = grad_out (n x outputs). Calls
  // visit(layer, input, delta) for each affine layer, where delta is the
  // gradient with respect to that layer's output, row per sample.
  template <class Visit>
  void backward(const ForwardCache& cache, Matrix grad, Visit&& visit) const {
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const auto& l = layers_[li];
      const Matrix& in = cache.inputs[li];
      switch (l.kind) {
        case LayerKind::Dense:
          visit(li, l, in, grad);
          grad = l.weight_prefactor * (grad * l.weight);
          break;
        case LayerKind::Conv: {
          visit(li, l, in, grad);
          grad = conv_input_grad(l, grad);
          break;
        }
        case LayerKind::Relu:
          grad = grad.cwiseProduct((in.array() > 0.0).cast<double>().matrix());
          break;
        case LayerKind::GlobalAvgPool: {
          const auto P = static_cast<Eigen::Index>(l.pixels);
          Matrix g(grad.rows(), grad.cols() * P);
          for (Eigen::Index c = 0; c < grad.cols(); ++c)
            for (Eigen::Index p = 0; p < P; ++p) g.col(c * P + p) = grad.col(c) / static_cast<double>(P);
          grad = std::move(g);
          break;
        }
        case LayerKind::VectorizeReadout: break;
      }
    }
  }

  // Per-sample gradient of output `head` with respect to every trainable
  // parameter (n x num_parameters), ordered like parameters().
  Matrix jacobian(const Matrix& X, std::size_t head = 0) const {
    if (head >= output_dim()) throw ShapeError("jacobian: head out of range");
    const auto cache = forward_cached(X);
    Matrix seed_grad = Matrix::Zero(X.rows(), static_cast<Eigen::Index>(output_dim()));
    seed_grad.col(static_cast<Eigen::Index>(head)).setOnes();
    std::vector<std::size_t> offsets(layers_.size(), 0);
    std::size_t k = 0;
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      offsets[li] = k;
      k += layers_[li].num_parameters();
    }
    Matrix J(X.rows(), static_cast<Eigen::Index>(k));
    backward(cache, seed_grad,
             [&](std::size_t li, const FiniteLayer& l, const Matrix& in, const Matrix& delta) {
               const auto base = static_cast<Eigen::Index>(offsets[li]);
               const auto w = static_cast<Eigen::Index>(l.weight.size());
               const auto b = static_cast<Eigen::Index>(l.bias.size());
               for (Eigen::Index i = 0; i < X.rows(); ++i) {
                 const auto g = sample_param_grad(l, in.row(i), delta.row(i));
                 J.row(i).segment(base, w) = Eigen::Map<const Eigen::RowVectorXd>(g.weight.data(), w);
                 J.row(i).segment(base + w, b) = g.bias.transpose();
               }
             });
    return J;
  }

  // Empirical NTK of one output head, Σ over parameters of ∂f(x_i)∂f(x_j),
  // without materializing the Jacobian for dense layers.
  Matrix empirical_ntk(const Matrix& X, std::size_t head = 0) const {
    const auto cache = forward_cached(X);
    Matrix seed_grad = Matrix::Zero(X.rows(), static_cast<Eigen::Index>(output_dim()));
    seed_grad.col(static_cast<Eigen::Index>(head)).setOnes();
    Matrix theta = Matrix::Zero(X.rows(), X.rows());
    backward(cache, seed_grad,
             [&](std::size_t, const FiniteLayer& l, const Matrix& in, const Matrix& delta) {
               if (l.kind == LayerKind::Dense) {
                 const Matrix dd = delta * delta.transpose();
                 const Matrix yy = in * in.transpose();
                 theta += (l.weight_prefactor * l.weight_prefactor) * dd.cwiseProduct(yy);
                 theta += (l.bias_prefactor * l.bias_prefactor) * dd;
                 return;
               }
               const auto w = static_cast<Eigen::Index>(l.weight.size());
               const auto b = static_cast<Eigen::Index>(l.bias.size());
               Matrix G(X.rows(), w + b);
               for (Eigen::Index i = 0; i < X.rows(); ++i) {
                 const auto g = sample_param_grad(l, in.row(i), delta.row(i));
                 G.row(i).head(w) = Eigen::Map<const Eigen::RowVectorXd>(g.weight.data(), w);
                 G.row(i).tail(b) = g.bias.transpose();
               }
               theta += G * G.transpose();
             });
    return theta;
  }

  // Mean-over-batch gradients of an MSE-type loss whose output gradient is
  // grad_out; returned per affine layer in the same layout as the layer.
  struct LayerGrad {
    RowMatrix weight;
    Vector bias;
  };

  std::vector<LayerGrad> parameter_grads(const Matrix& X, const Matrix& grad_out) const {
    const auto cache = forward_cached(X);
    std::vector<LayerGrad> grads(layers_.size());
    backward(cache, grad_out,
             [&](std::size_t li, const FiniteLayer& l, const Matrix& in, const Matrix& delta) {
               auto& g = grads[li];
               if (l.kind == LayerKind::Dense) {
                 g.weight = l.weight_prefactor * (delta.transpose() * in);
                 g.bias = l.bias_prefactor * delta.colwise().sum().transpose();
                 return;
               }
               g.weight = RowMatrix::Zero(l.weight.rows(), l.weight.cols());
               g.bias = Vector::Zero(l.bias.size());
               for (Eigen::Index i = 0; i < X.rows(); ++i) {
                 const auto s = sample_param_grad(l, in.row(i), delta.row(i));
                 g.weight += s.weight;
                 g.bias += s.bias;
               }
             });
    return grads;
  }

 private:
  struct SampleGrad {
    RowMatrix weight;
    Vector bias;
  };

  // im2col for one sample: U(m·C + j, p) = y[j, p + offsets[m]].
  static Matrix unfold(const FiniteLayer& l, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    const auto C = static_cast<Eigen::Index>(l.in_features);
    const auto P = static_cast<Eigen::Index>(l.pixels);
    const auto M = static_cast<Eigen::Index>(l.offsets.size());
    Matrix U(C * M, P);
    for (Eigen::Index m = 0; m < M; ++m)
      for (Eigen::Index j = 0; j < C; ++j)
        for (Eigen::Index p = 0; p < P; ++p)
          U(m * C + j, p) = row(j * P + detail::wrap(p + l.offsets[static_cast<std::size_t>(m)], P));
    return U;
  }

  // delta row (out·P) as an out x P matrix.
  static Matrix as_channels(const Eigen::Ref<const Eigen::RowVectorXd>& row, Eigen::Index channels,
                            Eigen::Index pixels) {
    return Eigen::Map<const RowMatrix>(row.data(), channels, pixels);
  }

  static Matrix apply(const FiniteLayer& l, const Matrix& h) {
    switch (l.kind) {
      case LayerKind::Dense: {
        Matrix z = l.weight_prefactor * (h * l.weight.transpose());
        z.rowwise() += (l.bias_prefactor * l.bias).transpose();
        return z;
      }
      case LayerKind::Conv: {
        const auto P = static_cast<Eigen::Index>(l.pixels);
        const auto out = static_cast<Eigen::Index>(l.out_features);
        Matrix z(h.rows(), out * P);
        for (Eigen::Index i = 0; i < h.rows(); ++i) {
          Matrix zi = l.weight_prefactor * (l.weight * unfold(l, h.row(i)));
          zi.colwise() += l.bias_prefactor * l.bias;
          for (Eigen::Index c = 0; c < out; ++c)
            for (Eigen::Index p = 0; p < P; ++p) z(i, c * P + p) = zi(c, p);
        }
        return z;
      }
      case LayerKind::Relu: return h.cwiseMax(0.0);
      case LayerKind::GlobalAvgPool: {
        const auto P = static_cast<Eigen::Index>(l.pixels);
        const auto C = static_cast<Eigen::Index>(l.in_features);
        Matrix g(h.rows(), C);
        for (Eigen::Index c = 0; c < C; ++c) g.col(c) = h.middleCols(c * P, P).rowwise().mean();
        return g;
      }
      case LayerKind::VectorizeReadout: return h;
    }
    return h;
  }

  static Matrix conv_input_grad(const FiniteLayer& l, const Matrix& grad) {
    const auto C = static_cast<Eigen::Index>(l.in_features);
    const auto P = static_cast<Eigen::Index>(l.pixels);
    const auto M = static_cast<Eigen::Index>(l.offsets.size());
    const auto out = static_cast<Eigen::Index>(l.out_features);
    Matrix g = Matrix::Zero(grad.rows(), C * P);
    for (Eigen::Index i = 0; i < grad.rows(); ++i) {
      const Matrix dU = l.weight_prefactor * (l.weight.transpose() * as_channels(grad.row(i), out, P));
      for (Eigen::Index m = 0; m < M; ++m)
        for (Eigen::Index j = 0; j < C; ++j)
          for (Eigen::Index p = 0; p < P; ++p)
            g(i, j * P + detail::wrap(p + l.offsets[static_cast<std::size_t>(m)], P)) += dU(m * C + j, p);
    }
    return g;
  }

  static SampleGrad sample_param_grad(const FiniteLayer& l,
                                      const Eigen::Ref<const Eigen::RowVectorXd>& in,
                                      const Eigen::Ref<const Eigen::RowVectorXd>& delta) {
    SampleGrad g;
    if (l.kind == LayerKind::Dense) {
      g.weight = l.weight_prefactor * (delta.transpose() * in);
      g.bias = l.bias_prefactor * delta.transpose();
      return g;
    }
    const auto P = static_cast<Eigen::Index>(l.pixels);
    const Matrix dZ = as_channels(delta, static_cast<Eigen::Index>(l.out_features), P);
    g.weight = l.weight_prefactor * (dZ * unfold(l, in).transpose());
    g.bias = l.bias_prefactor * dZ.rowwise().sum();
    return g;
  }

  NetworkSpec spec_;
  std::size_t scale_ = 1;
  std::uint64_t seed_ = 0;
  std::vector<FiniteLayer> layers_;
};

// ---- Monte Carlo kernels --------------------------------------------------

struct EmpiricalKernels {
  Matrix nngp_hat;
  Matrix ntk_hat;
  std::size_t draws = 0;
  std::size_t scale_s = 1;
};

struct EmpiricalOptions {
  std::size_t threads = 1;
  // Readout units averaged in the NNGP estimate; 0 means s times the spec's
  // readout width. The NTK always uses head 0.
  std::size_t readout_heads = 0;
};

inline EmpiricalKernels empirical_kernels(const NetworkSpec& spec, const Matrix& X, std::size_t s,
                                          std::size_t R, std::uint64_t seed,
                                          const EmpiricalOptions& opts = {}) {
  if (R == 0) throw SpecError("empirical_kernels: R must be >= 1");
  const std::size_t heads =
      opts.readout_heads ? opts.readout_heads : s * spec.layers.back().base_width;
  struct Draw {
    Matrix nngp, ntk;
  };
  auto draws = ordered_parallel_map(R, opts.threads, [&](std::size_t r) {
    const auto net = FiniteNet::init(spec, s, derive_seed(seed, r), {.readout_heads = heads});
    const Matrix f = net.forward(X);
    return Draw{(f * f.transpose()) / static_cast<double>(f.cols()), net.empirical_ntk(X, 0)};
  });
  EmpiricalKernels out;
  out.nngp_hat = Matrix::Zero(X.rows(), X.rows());
  out.ntk_hat = Matrix::Zero(X.rows(), X.rows());
  for (const auto& d : draws) {
    out.nngp_hat += d.nngp;
    out.ntk_hat += d.ntk;
  }
  out.nngp_hat /= static_cast<double>(R);
  out.ntk_hat /= static_cast<double>(R);
  out.draws = R;
  out.scale_s = s;
  return out;
}

// ---- SGD -----------------------------------------------------------------

struct TrainOptions {
  double lr = 0.1;
  std::size_t batch = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  double divergence_threshold = 1e6;
};

struct TrainingRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  bool diverged = false;
};

struct TrainingTrace {
  std::vector<TrainingRecord> records;  // epoch 0 is the initialization
  bool diverged = false;

  double best_val_error() const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : records)
      if (!r.diverged && std::isfinite(r.val_acc)) best = std::min(best, 1.0 - r.val_acc);
    return best;
  }

  CsvTable table() const {
    CsvTable t({"epoch", "train_loss", "train_acc", "val_loss", "val_acc", "diverged"});
    for (const auto& r : records)
      t.add(r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.diverged);
    return t;
  }
};

// Loss is (1 / 2B) Σ_batch ||f(x) - y||²; reported losses use the whole set.
inline double mse_half(const Matrix& outputs, const Matrix& targets) {
  return 0.5 * (outputs - targets).squaredNorm() / static_cast<double>(outputs.rows());
}

inline TrainingTrace sgd_train(FiniteNet& net, const Dataset& train, const Dataset* validation,
                               const TrainOptions& opts) {
  if (train.size() == 0) throw SpecError("sgd_train: empty training set");
  if (net.output_dim() != train.classes())
    throw ShapeError("sgd_train: network has " + std::to_string(net.output_dim()) +
                     " outputs, targets have " + std::to_string(train.classes()));
  const std::size_t batch = std::clamp<std::size_t>(opts.batch, 1, train.size());
  TrainingTrace trace;

  auto record = [&](std::size_t epoch) {
    TrainingRecord r;
    r.epoch = epoch;
    const Matrix ft = net.forward(train.inputs);
    r.train_loss = mse_half(ft, train.targets);
    r.train_acc = 1.0 - classification_error(ft, train.targets);
    if (validation && validation->size() > 0) {
      const Matrix fv = net.forward(validation->inputs);
      r.val_loss = mse_half(fv, validation->targets);
      r.val_acc = 1.0 - classification_error(fv, validation->targets);
    }
    r.diverged = !std::isfinite(r.train_loss) || r.train_loss > opts.divergence_threshold;
    trace.records.push_back(r);
    trace.diverged = trace.diverged || r.diverged;
    return !r.diverged;
  };

  if (!record(0)) return trace;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    detail::seeded_shuffle(order, opts.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      const Dataset b = train.rows(idx);
      const Matrix grad_out =
          (net.forward(b.inputs) - b.targets) / static_cast<double>(idx.size());
      const auto grads = net.parameter_grads(b.inputs, grad_out);
      auto& layers = net.mutable_layers();
      for (std::size_t li = 0; li < layers.size(); ++li) {
        if (!layers[li].parametric()) continue;
        layers[li].weight -= opts.lr * grads[li].weight;
        layers[li].bias -= opts.lr * grads[li].bias;
      }
    }
    if (!record(epoch)) break;
  }
  return trace;
}

}  // namespace ntk
