#pragma once

// Network architecture, parameterization and hyperparameters shared by the
// analytic kernel engine and the finite-width networks.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ntk/error.hpp"

namespace ntk {

enum class Parameterization { NaiveStandard, NTK, ImprovedStandard };

inline constexpr Parameterization kAllParameterizations[] = {
    Parameterization::NaiveStandard, Parameterization::NTK,
    Parameterization::ImprovedStandard};

inline std::string_view to_string(Parameterization p) {
  switch (p) {
    case Parameterization::NaiveStandard: return "naive_standard";
    case Parameterization::NTK: return "ntk";
    case Parameterization::ImprovedStandard: return "improved_standard";
  }
  return "?";
}

inline Parameterization parse_parameterization(std::string_view name) {
  if (name == "naive_standard" || name == "naive") return Parameterization::NaiveStandard;
  if (name == "ntk") return Parameterization::NTK;
  if (name == "improved_standard" || name == "improved") return Parameterization::ImprovedStandard;
  throw SpecError("unknown parameterization '" + std::string(name) + "'");
}

struct Hyperparams {
  double sigma_w_sq = 2.0;
  double sigma_b_sq = 0.1;

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

enum class LayerKind { Dense, Conv, Relu, GlobalAvgPool, VectorizeReadout };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::VectorizeReadout: return "vectorize";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string_view name) {
  if (name == "dense") return LayerKind::Dense;
  if (name == "conv") return LayerKind::Conv;
  if (name == "relu") return LayerKind::Relu;
  if (name == "gap") return LayerKind::GlobalAvgPool;
  if (name == "vectorize" || name == "vec") return LayerKind::VectorizeReadout;
  throw SpecError("unknown layer kind '" + std::string(name) + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  // Output units (Dense) or output channels (Conv); 0 for non-parametric layers.
  std::size_t base_width = 0;
  // Signed pixel offsets of a Conv filter over the flat, circularly wrapped
  // pixel index.
  std::vector<int> filter_offsets;

  bool parametric() const {
    return kind == LayerKind::Dense || kind == LayerKind::Conv;
  }
  bool reduction() const {
    return kind == LayerKind::GlobalAvgPool || kind == LayerKind::VectorizeReadout;
  }

  static LayerSpec dense(std::size_t width) { return {LayerKind::Dense, width, {}}; }
  static LayerSpec conv(std::size_t channels, std::vector<int> offsets) {
    return {LayerKind::Conv, channels, std::move(offsets)};
  }
  static LayerSpec relu() { return {LayerKind::Relu, 0, {}}; }
  static LayerSpec gap() { return {LayerKind::GlobalAvgPool, 0, {}}; }
  static LayerSpec vectorize() { return {LayerKind::VectorizeReadout, 0, {}}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  Parameterization parameterization = Parameterization::ImprovedStandard;
  Hyperparams hyper;
  // Dense input size, or channels * pixels for spatial inputs (channel-major:
  // feature index c * spatial_size + p).
  std::size_t input_dim = 1;
  std::size_t spatial_size = 1;

  // Inputs are treated as C x P images iff a Conv or a spatial reduction
  // appears anywhere in the chain.
  bool spatial_input() const {
    for (const auto& l : layers)
      if (l.kind == LayerKind::Conv || l.reduction()) return true;
    return false;
  }
  std::size_t input_channels() const {
    return spatial_input() ? input_dim / spatial_size : input_dim;
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct ValidationReport {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  std::string summary() const {
    std::string out;
    for (const auto& v : violations) {
      if (!out.empty()) out += "; ";
      out += v;
    }
    return out;
  }
  friend bool operator==(const ValidationReport&, const ValidationReport&) = default;
};

inline ValidationReport validate(const NetworkSpec& spec) {
  ValidationReport report;
  auto flag = [&](std::string msg) { report.violations.push_back(std::move(msg)); };

  const auto& hp = spec.hyper;
  if (!(hp.sigma_w_sq > 0.0) || !std::isfinite(hp.sigma_w_sq)) flag("sigma_w_sq must be > 0");
  if (!(hp.sigma_b_sq >= 0.0) || !std::isfinite(hp.sigma_b_sq)) flag("sigma_b_sq must be >= 0");
  if (spec.input_dim == 0) flag("input_dim must be >= 1");
  if (spec.spatial_size == 0) flag("spatial_size must be >= 1");
  if (spec.layers.empty()) {
    flag("network has no layers");
    return report;
  }

  const bool spatial = spec.spatial_input();
  if (!spatial && spec.spatial_size != 1)
    flag("spatial_size must be 1 for networks without conv or pooling layers");
  if (spatial && spec.spatial_size > 0 && spec.input_dim % spec.spatial_size != 0)
    flag("input_dim must be a multiple of spatial_size");

  bool state_spatial = spatial;
  bool seen_reduction = false;
  std::size_t parametric = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" +
                              std::string(to_string(l.kind)) + "): ";
    if (l.parametric()) {
      ++parametric;
      if (l.base_width == 0) flag(where + "width must be >= 1");
    } else if (l.base_width != 0) {
      flag(where + "non-parametric layer carries a width");
    }
    if (l.kind != LayerKind::Conv && !l.filter_offsets.empty())
      flag(where + "filter offsets on a non-conv layer");

    switch (l.kind) {
      case LayerKind::Dense:
        if (state_spatial) flag(where + "dense layer on spatial state (missing gap/vectorize)");
        break;
      case LayerKind::Conv: {
        if (seen_reduction) flag(where + "pooling precedes conv");
        const auto& off = l.filter_offsets;
        if (off.empty()) {
          flag(where + "conv needs a nonempty offset list");
          break;
        }
        std::set<int> uniq(off.begin(), off.end());
        if (uniq.size() != off.size()) flag(where + "duplicate filter offsets");
        if (off.size() % 2 == 0) flag(where + "filter size M must be odd");
        for (int m : uniq)
          if (!uniq.count(-m)) {
            flag(where + "filter offsets must be symmetric around 0");
            break;
          }
        break;
      }
      case LayerKind::Relu:
        if (i == 0) flag(where + "activation cannot be the first layer");
        if (i + 1 == spec.layers.size()) flag(where + "activation cannot be the last layer");
        break;
      case LayerKind::GlobalAvgPool:
      case LayerKind::VectorizeReadout:
        if (seen_reduction) flag(where + "more than one spatial reduction");
        else if (!state_spatial) flag(where + "reduction on non-spatial state");
        seen_reduction = true;
        state_spatial = false;
        break;
    }
  }
  if (parametric == 0) flag("network has no parametric layer");
  if (spec.layers.back().kind != LayerKind::Dense) flag("final layer must be a dense readout");
  return report;
}

inline void require_valid(const NetworkSpec& spec) {
  auto report = validate(spec);
  if (!report.ok()) throw SpecError("invalid network spec: " + report.summary());
}

// One affine layer of a validated spec, in the form both engines consume.
struct AffineLayerPlan {
  std::size_t layer_index = 0;
  bool conv = false;
  // Baseline fan-in Nˡ: input channels for Conv, flattened width for Dense
  // (channels * pixels after a vectorize readout).
  std::size_t fan_in_base = 0;
  // False for the first affine layer, whose fan-in is the data dimension.
  bool fan_in_scaled = false;
  std::size_t out_base = 0;
  bool readout = false;
  std::size_t filter_size = 1;  // M
};

inline std::vector<AffineLayerPlan> affine_plan(const NetworkSpec& spec) {
  require_valid(spec);
  std::vector<AffineLayerPlan> plan;
  std::size_t width = spec.input_channels();
  std::size_t pixels = spec.spatial_input() ? spec.spatial_size : 1;
  bool scaled = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind == LayerKind::VectorizeReadout) {
      width *= pixels;
      pixels = 1;
    } else if (l.kind == LayerKind::GlobalAvgPool) {
      pixels = 1;
    }
    if (!l.parametric()) continue;
    AffineLayerPlan a;
    a.layer_index = i;
    a.conv = l.kind == LayerKind::Conv;
    a.fan_in_base = width;
    a.fan_in_scaled = scaled;
    a.out_base = l.base_width;
    a.filter_size = a.conv ? l.filter_offsets.size() : 1;
    plan.push_back(a);
    width = l.base_width;
    scaled = true;
  }
  plan.back().readout = true;
  return plan;
}

// Number of hidden (non-readout) affine layers, i.e. the entries a widths
// sweep assigns.
inline std::size_t hidden_layer_count(const NetworkSpec& spec) {
  std::size_t n = 0;
  for (const auto& l : spec.layers) n += l.parametric();
  return n == 0 ? 0 : n - 1;
}

inline std::vector<std::size_t> hidden_widths(const NetworkSpec& spec) {
  std::vector<std::size_t> w;
  for (const auto& l : spec.layers)
    if (l.parametric()) w.push_back(l.base_width);
  if (!w.empty()) w.pop_back();
  return w;
}

// Copy of `spec` with hidden affine widths replaced; a single value is
// broadcast to all hidden layers.
inline NetworkSpec with_hidden_widths(NetworkSpec spec, const std::vector<std::size_t>& widths) {
  const std::size_t hidden = hidden_layer_count(spec);
  if (widths.size() != 1 && widths.size() != hidden)
    throw SpecError("widths assignment has " + std::to_string(widths.size()) +
                    " entries, network has " + std::to_string(hidden) + " hidden layers");
  std::size_t seen = 0;
  for (auto& l : spec.layers) {
    if (!l.parametric() || seen == hidden) continue;
    l.base_width = widths.size() == 1 ? widths[0] : widths[seen];
    ++seen;
  }
  return spec;
}

// Depth-`depth` ReLU MLP with constant hidden width and a scalar readout.
inline NetworkSpec make_fc_spec(std::size_t input_dim, std::size_t depth, std::size_t width,
                                Parameterization p, Hyperparams hp = {},
                                std::size_t outputs = 1) {
  NetworkSpec spec;
  spec.input_dim = input_dim;
  spec.parameterization = p;
  spec.hyper = hp;
  for (std::size_t i = 0; i < depth; ++i) {
    spec.layers.push_back(LayerSpec::dense(width));
    spec.layers.push_back(LayerSpec::relu());
  }
  spec.layers.push_back(LayerSpec::dense(outputs));
  return spec;
}

// ---- structured-text (JSON) form ----------------------------------------

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["parameterization"] = std::string(to_string(spec.parameterization));
  j["sigma_w_sq"] = spec.hyper.sigma_w_sq;
  j["sigma_b_sq"] = spec.hyper.sigma_b_sq;
  j["input_dim"] = spec.input_dim;
  j["spatial_size"] = spec.spatial_size;
  auto& layers = j["layers"];
  layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json e;
    e["kind"] = std::string(to_string(l.kind));
    if (l.parametric()) e["width"] = l.base_width;
    if (l.kind == LayerKind::Conv) e["offsets"] = l.filter_offsets;
    layers.push_back(std::move(e));
  }
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  try {
    NetworkSpec spec;
    spec.parameterization =
        parse_parameterization(j.value("parameterization", std::string("improved_standard")));
    spec.hyper.sigma_w_sq = j.value("sigma_w_sq", 2.0);
    spec.hyper.sigma_b_sq = j.value("sigma_b_sq", 0.1);
    spec.input_dim = j.at("input_dim").get<std::size_t>();
    spec.spatial_size = j.value("spatial_size", std::size_t{1});
    for (const auto& e : j.at("layers")) {
      LayerSpec l;
      l.kind = parse_layer_kind(e.at("kind").get<std::string>());
      l.base_width = e.value("width", std::size_t{0});
      if (e.contains("offsets")) l.filter_offsets = e.at("offsets").get<std::vector<int>>();
      spec.layers.push_back(std::move(l));
    }
    return spec;
  } catch (const nlohmann::json::exception& ex) {
    throw SpecError(std::string("malformed network spec: ") + ex.what());
  }
}

// FNV-1a over the canonical JSON dump.
inline std::string spec_hash(const NetworkSpec& spec) {
  const std::string text = to_json(spec).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace ntk
