#include "mil/encoder.hpp"

#include <cmath>
#include <numbers>

#include "binio.hpp"
#include "mil/errors.hpp"
#include "mil/rng.hpp"

namespace mil::encoder {

namespace {

constexpr char kMagic[7] = "MILE1";  // 6 bytes on disk, trailing NUL included

DenseLayer he_layer(std::size_t out, std::size_t in, Rng& rng) {
  DenseLayer layer{num::Matrix(out, in), num::Matrix(1, out)};
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  for (auto& w : layer.weight.data()) w = rand_normal(rng, 0.0, stddev);
  return layer;
}

std::vector<DenseLayer> make_chain(std::size_t in, std::span<const std::size_t> hidden,
                                   std::size_t out, Rng& rng) {
  std::vector<DenseLayer> layers;
  std::size_t prev = in;
  for (std::size_t w : hidden) {
    layers.push_back(he_layer(w, prev, rng));
    prev = w;
  }
  layers.push_back(he_layer(out, prev, rng));
  return layers;
}

// Linear chain with ReLU between layers (none after the last one).
num::Matrix run_chain(const std::vector<DenseLayer>& layers, const num::Matrix& x) {
  num::Matrix h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = num::add_rowvec(num::matmul_nt(h, layers[i].weight), layers[i].bias);
    if (i + 1 < layers.size()) h = num::relu(h);
  }
  return h;
}

num::Var run_chain_on_tape(num::GradTape& tape,
                           const std::vector<std::pair<num::Var, num::Var>>& layers, num::Var x) {
  num::Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = tape.add_rowvec(tape.matmul_nt(h, layers[i].first), layers[i].second);
    if (i + 1 < layers.size()) h = tape.relu(h);
  }
  return h;
}

}  // namespace

EncoderParams init_params(const EncoderDims& dims, std::span<const std::size_t> hidden_widths,
                          std::uint64_t seed, std::span<const std::size_t> projection_hidden) {
  if (dims.input_dim == 0 || dims.embed_dim == 0 || dims.proj_dim == 0) {
    throw ConfigError("init_params: all dims must be positive");
  }
  for (std::size_t w : hidden_widths)
    if (w == 0) throw ConfigError("init_params: zero hidden width");
  for (std::size_t w : projection_hidden)
    if (w == 0) throw ConfigError("init_params: zero projection width");

  Rng rng = make_rng(seed, 0x656e63);  // "enc"
  EncoderParams p;
  p.dims = dims;
  p.feature_layers = make_chain(dims.input_dim, hidden_widths, dims.embed_dim, rng);
  p.projection_layers = make_chain(dims.embed_dim, projection_hidden, dims.proj_dim, rng);
  return p;
}

num::Matrix forward_features(const EncoderParams& p, const num::Matrix& x) {
  if (x.cols() != p.dims.input_dim) throw ShapeError("forward_features: input dim mismatch");
  return run_chain(p.feature_layers, x);
}

num::Matrix forward_projection(const EncoderParams& p, const num::Matrix& h) {
  if (h.cols() != p.dims.embed_dim) throw ShapeError("forward_projection: embed dim mismatch");
  return num::l2_normalize_rows(run_chain(p.projection_layers, h));
}

EncoderVars stage_params(num::GradTape& tape, const EncoderParams& p) {
  EncoderVars v;
  for (const auto& layer : p.feature_layers) {
    num::Var w = tape.input(layer.weight);
    num::Var b = tape.input(layer.bias);
    v.feature_layers.emplace_back(w, b);
    v.all.push_back(w);
    v.all.push_back(b);
  }
  for (const auto& layer : p.projection_layers) {
    num::Var w = tape.input(layer.weight);
    num::Var b = tape.input(layer.bias);
    v.projection_layers.emplace_back(w, b);
    v.all.push_back(w);
    v.all.push_back(b);
  }
  return v;
}

num::Var features_on_tape(num::GradTape& tape, const EncoderVars& vars, num::Var x) {
  return run_chain_on_tape(tape, vars.feature_layers, x);
}

num::Var projection_on_tape(num::GradTape& tape, const EncoderVars& vars, num::Var h) {
  return tape.l2_normalize_rows(run_chain_on_tape(tape, vars.projection_layers, h));
}

std::vector<num::Matrix*> param_refs(EncoderParams& p) {
  std::vector<num::Matrix*> refs;
  for (auto& layer : p.feature_layers) {
    refs.push_back(&layer.weight);
    refs.push_back(&layer.bias);
  }
  for (auto& layer : p.projection_layers) {
    refs.push_back(&layer.weight);
    refs.push_back(&layer.bias);
  }
  return refs;
}

SgdState make_sgd_state(double lr, double momentum, double weight_decay,
                        std::span<num::Matrix* const> params) {
  if (!(lr > 0.0)) throw ConfigError("sgd: learning rate must be positive");
  SgdState s;
  s.learning_rate = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  for (const num::Matrix* p : params) s.velocity.emplace_back(p->rows(), p->cols());
  return s;
}

void sgd_step(std::span<num::Matrix* const> params, std::span<const num::Matrix> grads,
              SgdState& state) {
  if (params.size() != grads.size() || params.size() != state.velocity.size()) {
    throw ShapeError("sgd_step: parameter/gradient count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    num::Matrix& p = *params[i];
    if (!p.same_shape(grads[i]) || !p.same_shape(state.velocity[i])) {
      throw ShapeError("sgd_step: shape mismatch");
    }
    num::Matrix& v = state.velocity[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + grads[i][j] + state.weight_decay * p[j];
      p[j] -= state.learning_rate * v[j];
    }
  }
}

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr) {
  if (total_epochs == 0) throw ConfigError("cosine_lr: total_epochs must be positive");
  if (epoch > total_epochs) throw ConfigError("cosine_lr: epoch out of range");
  const double x = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return base_lr * 0.5 * (1.0 + std::cos(x));
}

void save_checkpoint(const EncoderParams& p, const std::filesystem::path& path) {
  io::Writer w;
  w.put_bytes(kMagic, 6);
  w.put_u32(static_cast<std::uint32_t>(p.dims.input_dim));
  w.put_u32(static_cast<std::uint32_t>(p.dims.embed_dim));
  w.put_u32(static_cast<std::uint32_t>(p.dims.proj_dim));
  w.put_u32(static_cast<std::uint32_t>(p.feature_layers.size()));
  w.put_u32(static_cast<std::uint32_t>(p.projection_layers.size()));
  auto put_layers = [&](const std::vector<DenseLayer>& layers) {
    for (const auto& layer : layers) {
      w.put_u32(static_cast<std::uint32_t>(layer.weight.rows()));
      w.put_u32(static_cast<std::uint32_t>(layer.weight.cols()));
      for (double x : layer.weight.data()) w.put_f64(x);
      for (double x : layer.bias.data()) w.put_f64(x);
    }
  };
  put_layers(p.feature_layers);
  put_layers(p.projection_layers);
  w.save(path);
}

EncoderParams load_checkpoint(const std::filesystem::path& path) {
  io::Reader r(path);
  r.expect_magic(kMagic);
  EncoderParams p;
  p.dims.input_dim = r.get_u32();
  p.dims.embed_dim = r.get_u32();
  p.dims.proj_dim = r.get_u32();
  const std::uint32_t nf = r.get_u32();
  const std::uint32_t np = r.get_u32();
  auto get_layers = [&](std::uint32_t n, std::size_t in, std::size_t out) {
    std::vector<DenseLayer> layers;
    std::size_t prev = in;
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::size_t rows = r.get_u32();
      const std::size_t cols = r.get_u32();
      if (cols != prev) throw FormatError("layer dims do not compose",
                                          static_cast<long long>(r.offset()));
      DenseLayer layer{num::Matrix(rows, cols), num::Matrix(1, rows)};
      for (auto& x : layer.weight.data()) x = r.get_f64();
      for (auto& x : layer.bias.data()) x = r.get_f64();
      if (!layer.weight.all_finite() || !layer.bias.all_finite()) {
        throw FormatError("non-finite parameter", static_cast<long long>(r.offset()));
      }
      layers.push_back(std::move(layer));
      prev = rows;
    }
    if (n > 0 && prev != out) throw FormatError("chain output dim mismatch",
                                                static_cast<long long>(r.offset()));
    return layers;
  };
  p.feature_layers = get_layers(nf, p.dims.input_dim, p.dims.embed_dim);
  p.projection_layers = get_layers(np, p.dims.embed_dim, p.dims.proj_dim);
  r.expect_eof();
  return p;
}

}  // namespace mil::encoder
