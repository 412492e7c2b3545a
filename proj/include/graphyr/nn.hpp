#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "graphyr/autodiff.hpp"
#include "graphyr/errors.hpp"
#include "graphyr/grid.hpp"
#include "graphyr/random.hpp"

namespace graphyr::nn {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Fan-in uniform initialization, U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
inline Tensor he_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor w(fan_in, fan_out);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& x : w.data) x = uniform(rng, -bound, bound);
  return w;
}

/// affine -> batch norm -> ReLU -> dropout -> affine. The caller applies the
/// output activation.
struct MlpBlock {
  std::size_t input = 0;
  std::size_t hidden = 0;
  std::size_t output = 0;
  double dropout = 0.0;
  Parameter w1, b1, gamma, beta, w2, b2;
  ad::BatchNormStats bn;

  MlpBlock() = default;
  MlpBlock(const std::string& name, std::size_t in, std::size_t hid, std::size_t out, double dropout_rate, Rng& rng)
      : input(in), hidden(hid), output(out), dropout(dropout_rate) {
    if (in == 0 || hid == 0 || out == 0) throw ValidationError("mlp widths must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
    w1 = Parameter(name + ".w1", he_uniform(in, hid, rng));
    b1 = Parameter(name + ".b1", Tensor(1, hid));
    gamma = Parameter(name + ".bn_scale", Tensor(1, hid, 1.0));
    beta = Parameter(name + ".bn_shift", Tensor(1, hid));
    w2 = Parameter(name + ".w2", he_uniform(hid, out, rng));
    b2 = Parameter(name + ".b2", Tensor(1, out));
    bn.running_mean = Tensor(1, hid);
    bn.running_var = Tensor(1, hid, 1.0);
  }

  std::vector<Parameter*> parameters() { return {&w1, &b1, &gamma, &beta, &w2, &b2}; }
};

enum class Mode { train, eval };

/// `rng` drives dropout and is only used in train mode.
inline Var mlp_forward(Tape& tape, MlpBlock& block, Var x, Mode mode, Rng* rng = nullptr) {
  if (x.cols() != block.input) {
    throw ValidationError("mlp input width " + std::to_string(x.cols()) + " does not match " +
                          std::to_string(block.input));
  }
  const bool train = mode == Mode::train;
  Var h = ad::add_row(ad::matmul(x, tape.param(block.w1)), tape.param(block.b1));
  h = ad::batch_norm(h, tape.param(block.gamma), tape.param(block.beta), block.bn, train);
  h = ad::relu(h);
  if (train && block.dropout > 0.0) {
    if (!rng) throw std::invalid_argument("mlp_forward: train mode with dropout needs an rng");
    h = ad::dropout(h, block.dropout, *rng);
  }
  return ad::add_row(ad::matmul(h, tape.param(block.w2)), tape.param(block.b2));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One bias-corrected Adam update using each parameter's accumulated gradient.
inline void adam_step(AdamState& state, const std::vector<Parameter*>& params) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value.rows, p->value.cols);
      state.v.emplace_back(p->value.rows, p->value.cols);
    }
  }
  if (state.m.size() != params.size()) throw ValidationError("adam: parameter count changed between steps");
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    if (!p.grad.same_shape(p.value) || !state.m[k].same_shape(p.value)) {
      throw ValidationError("adam: shape mismatch for " + p.name);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad.data[i];
      double& m = state.m[k].data[i];
      double& v = state.v[k].data[i];
      m = c.beta1 * m + (1.0 - c.beta1) * g;
      v = c.beta2 * v + (1.0 - c.beta2) * g * g;
      p.value.data[i] -= c.lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Named-array text format:
//   array <name> <rows> <cols>
//   <rows*cols values, %.17g, one row per line>

struct NamedArray {
  std::string name;
  Tensor value;
};

inline void write_array(std::ostream& os, const std::string& name, const Tensor& t) {
  os << "array " << name << " " << t.rows << " " << t.cols << "\n";
  for (std::size_t i = 0; i < t.rows; ++i) {
    for (std::size_t j = 0; j < t.cols; ++j) os << (j ? " " : "") << detail::format_double(t(i, j));
    os << "\n";
  }
}

inline NamedArray read_array(std::istream& in) {
  NamedArray a;
  std::string tag;
  std::size_t rows = 0, cols = 0;
  if (!(in >> tag >> a.name >> rows >> cols) || tag != "array") throw ParseError("checkpoint: expected array record");
  a.value = Tensor(rows, cols);
  for (auto& x : a.value.data) {
    std::string token;
    if (!(in >> token)) throw ParseError("checkpoint: array " + a.name + " is truncated");
    x = detail::parse_double(token, "checkpoint array " + a.name);
  }
  return a;
}

/// Copies a loaded array into `dst`, checking the name and shape.
inline void assign_array(const NamedArray& src, const std::string& expected_name, Tensor& dst) {
  if (src.name != expected_name) {
    throw ParseError("checkpoint: expected array " + expected_name + ", found " + src.name);
  }
  if (!src.value.same_shape(dst)) throw ParseError("checkpoint: array " + src.name + " has the wrong shape");
  dst = src.value;
}

inline void write_block(std::ostream& os, MlpBlock& b) {
  for (auto* p : b.parameters()) write_array(os, p->name, p->value);
  write_array(os, b.w1.name.substr(0, b.w1.name.size() - 3) + ".bn_mean", b.bn.running_mean);
  write_array(os, b.w1.name.substr(0, b.w1.name.size() - 3) + ".bn_var", b.bn.running_var);
}

inline void read_block(std::istream& in, MlpBlock& b) {
  for (auto* p : b.parameters()) assign_array(read_array(in), p->name, p->value);
  const std::string prefix = b.w1.name.substr(0, b.w1.name.size() - 3);
  assign_array(read_array(in), prefix + ".bn_mean", b.bn.running_mean);
  assign_array(read_array(in), prefix + ".bn_var", b.bn.running_var);
}

} // namespace graphyr::nn
