#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mil/matrix.hpp"
#include "mil/tape.hpp"

namespace mil::encoder {

// Feature extractor f: R^m -> R^d and projection head psi: R^d -> R^{d'}
// (unit-norm output), both small ReLU MLPs.

struct EncoderDims {
  std::size_t input_dim = 32;   // m
  std::size_t embed_dim = 32;   // d
  std::size_t proj_dim = 16;    // d'
};

struct DenseLayer {
  num::Matrix weight;  // out x in
  num::Matrix bias;    // 1 x out
};

struct EncoderParams {
  EncoderDims dims;
  std::vector<DenseLayer> feature_layers;
  std::vector<DenseLayer> projection_layers;
};

// He-scaled Gaussian weights, zero biases; deterministic per seed.
// `projection_hidden` empty means a single linear projection layer.
EncoderParams init_params(const EncoderDims& dims, std::span<const std::size_t> hidden_widths,
                          std::uint64_t seed, std::span<const std::size_t> projection_hidden = {});

// h = f(x) for a batch of row instances; ShapeError when x.cols != m.
num::Matrix forward_features(const EncoderParams& p, const num::Matrix& x);

// z = psi(h) / ||psi(h)||, one unit-norm row per input row.
num::Matrix forward_projection(const EncoderParams& p, const num::Matrix& h);

// Tape staging for training: parameters become tape inputs in a canonical
// order (feature layers then projection layers, weight before bias).
struct EncoderVars {
  std::vector<std::pair<num::Var, num::Var>> feature_layers;
  std::vector<std::pair<num::Var, num::Var>> projection_layers;
  std::vector<num::Var> all;  // canonical parameter order
};
EncoderVars stage_params(num::GradTape& tape, const EncoderParams& p);
num::Var features_on_tape(num::GradTape& tape, const EncoderVars& vars, num::Var x);
num::Var projection_on_tape(num::GradTape& tape, const EncoderVars& vars, num::Var h);

// Mutable views over all parameters in the same canonical order as EncoderVars::all.
std::vector<num::Matrix*> param_refs(EncoderParams& p);

// SGD with momentum and decoupled-from-nothing weight decay folded into the
// gradient: v <- momentum*v + g + wd*p; p <- p - lr*v.
struct SgdState {
  double learning_rate = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<num::Matrix> velocity;
};
SgdState make_sgd_state(double lr, double momentum, double weight_decay,
                        std::span<num::Matrix* const> params);
void sgd_step(std::span<num::Matrix* const> params, std::span<const num::Matrix> grads,
              SgdState& state);

// base_lr * (1 + cos(pi * epoch / total)) / 2; ConfigError outside [0, total].
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double base_lr);

// Binary checkpoint, magic "MILE1\0"; layout documented in the README.
void save_checkpoint(const EncoderParams& p, const std::filesystem::path& path);
EncoderParams load_checkpoint(const std::filesystem::path& path);

}  // namespace mil::encoder
