#include "mil/tape.hpp"

#include <algorithm>
#include <cmath>

#include "mil/errors.hpp"

namespace mil::num {

namespace {
constexpr double kBceLo = 1e-12;
constexpr double kBceHi = 1.0 - 1e-12;
}  // namespace

Var GradTape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var GradTape::input(Matrix value) {
  Node n;
  n.op = Op::kInput;
  n.value = std::move(value);
  return push(std::move(n));
}

Var GradTape::matmul(Var a, Var b) {
  Node n;
  n.op = Op::kMatMul;
  n.a = a.idx;
  n.b = b.idx;
  n.value = num::matmul(val(a.idx), val(b.idx));
  return push(std::move(n));
}

Var GradTape::matmul_nt(Var a, Var b) {
  Node n;
  n.op = Op::kMatMulNT;
  n.a = a.idx;
  n.b = b.idx;
  n.value = num::matmul_nt(val(a.idx), val(b.idx));
  return push(std::move(n));
}

Var GradTape::transpose(Var a) {
  Node n;
  n.op = Op::kTranspose;
  n.a = a.idx;
  n.value = num::transpose(val(a.idx));
  return push(std::move(n));
}

Var GradTape::add(Var a, Var b) {
  Node n;
  n.op = Op::kAdd;
  n.a = a.idx;
  n.b = b.idx;
  n.value = num::add(val(a.idx), val(b.idx));
  return push(std::move(n));
}

Var GradTape::add_rowvec(Var a, Var bias) {
  Node n;
  n.op = Op::kAddRowVec;
  n.a = a.idx;
  n.b = bias.idx;
  n.value = num::add_rowvec(val(a.idx), val(bias.idx));
  return push(std::move(n));
}

Var GradTape::sub(Var a, Var b) {
  Node n;
  n.op = Op::kSub;
  n.a = a.idx;
  n.b = b.idx;
  n.value = num::sub(val(a.idx), val(b.idx));
  return push(std::move(n));
}

Var GradTape::scale(Var a, double c) {
  Node n;
  n.op = Op::kScale;
  n.a = a.idx;
  n.c = c;
  n.value = num::scale(val(a.idx), c);
  return push(std::move(n));
}

Var GradTape::relu(Var a) {
  Node n;
  n.op = Op::kRelu;
  n.a = a.idx;
  n.value = num::relu(val(a.idx));
  return push(std::move(n));
}

Var GradTape::tanh(Var a) {
  Node n;
  n.op = Op::kTanh;
  n.a = a.idx;
  n.value = num::tanh_ew(val(a.idx));
  return push(std::move(n));
}

Var GradTape::sigmoid(Var a) {
  Node n;
  n.op = Op::kSigmoid;
  n.a = a.idx;
  n.value = num::sigmoid_ew(val(a.idx));
  return push(std::move(n));
}

Var GradTape::l2_normalize_rows(Var a) {
  Node n;
  n.op = Op::kL2NormRows;
  n.a = a.idx;
  n.value = num::l2_normalize_rows(val(a.idx));
  return push(std::move(n));
}

Var GradTape::softmax_rows(Var a) {
  Node n;
  n.op = Op::kSoftmaxRows;
  n.a = a.idx;
  n.value = num::softmax_rows(val(a.idx));
  return push(std::move(n));
}

Var GradTape::logsumexp(Var a) {
  Node n;
  n.op = Op::kLogSumExp;
  n.a = a.idx;
  n.value = Matrix::scalar(num::logsumexp(val(a.idx).data()));
  return push(std::move(n));
}

Var GradTape::sum(Var a) {
  Node n;
  n.op = Op::kSum;
  n.a = a.idx;
  double s = 0.0;
  for (double x : val(a.idx).data()) s += x;
  n.value = Matrix::scalar(s);
  return push(std::move(n));
}

Var GradTape::mean(Var a) {
  if (val(a.idx).empty()) throw ShapeError("mean: empty input");
  Node n;
  n.op = Op::kMean;
  n.a = a.idx;
  double s = 0.0;
  for (double x : val(a.idx).data()) s += x;
  n.value = Matrix::scalar(s / static_cast<double>(val(a.idx).size()));
  return push(std::move(n));
}

Var GradTape::max_all(Var a) {
  const Matrix& x = val(a.idx);
  if (x.empty()) throw ShapeError("max_all: empty input");
  Node n;
  n.op = Op::kMax;
  n.a = a.idx;
  const auto it = std::max_element(x.data().begin(), x.data().end());
  n.c0 = static_cast<std::size_t>(it - x.data().begin());
  n.value = Matrix::scalar(*it);
  return push(std::move(n));
}

Var GradTape::gather_rows(Var a, std::vector<std::uint32_t> rows) {
  const Matrix& x = val(a.idx);
  Matrix out(rows.size(), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(x.row_span(rows[i]).data(), x.cols(), out.row_span(i).data());
  }
  Node n;
  n.op = Op::kGatherRows;
  n.a = a.idx;
  n.list = std::move(rows);
  n.value = std::move(out);
  return push(std::move(n));
}

Var GradTape::slice_cols(Var a, std::size_t c0, std::size_t c1) {
  const Matrix& x = val(a.idx);
  if (c0 > c1 || c1 > x.cols()) throw ShapeError("slice_cols: bad column range");
  Matrix out(x.rows(), c1 - c0);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = x(i, j);
  Node n;
  n.op = Op::kSliceCols;
  n.a = a.idx;
  n.c0 = c0;
  n.c1 = c1;
  n.value = std::move(out);
  return push(std::move(n));
}

Var GradTape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t rows = val(parts[0].idx).rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    if (val(p.idx).rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += val(p.idx).cols();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  Node n;
  n.op = Op::kConcatCols;
  for (Var p : parts) {
    const Matrix& x = val(p.idx);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, off + j) = x(i, j);
    off += x.cols();
    n.list.push_back(p.idx);
  }
  n.value = std::move(out);
  return push(std::move(n));
}

Var GradTape::bce_mean(Var probs, Matrix targets) {
  const Matrix& p = val(probs.idx);
  if (!p.same_shape(targets)) throw ShapeError("bce_mean: target shape mismatch");
  if (p.empty()) throw ShapeError("bce_mean: empty input");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = std::clamp(p[i], kBceLo, kBceHi);
    loss -= targets[i] * std::log(pi) + (1.0 - targets[i]) * std::log(1.0 - pi);
  }
  Node n;
  n.op = Op::kBceMean;
  n.a = probs.idx;
  n.aux = std::move(targets);
  n.value = Matrix::scalar(loss / static_cast<double>(p.size()));
  return push(std::move(n));
}

std::vector<Matrix> GradTape::gradients(Var output, std::span<const Var> wrt) const {
  const Matrix& out = val(output.idx);
  if (out.rows() != 1 || out.cols() != 1) throw ShapeError("gradients: output must be scalar");

  std::vector<Matrix> adj(nodes_.size());
  auto bump = [&](std::uint32_t i) -> Matrix& {
    if (adj[i].empty() && !nodes_[i].value.empty()) {
      adj[i] = Matrix(nodes_[i].value.rows(), nodes_[i].value.cols());
    }
    return adj[i];
  };
  bump(output.idx)[0] = 1.0;

  for (std::uint32_t i = output.idx + 1; i-- > 0;) {
    if (adj[i].empty()) continue;  // output does not depend on this node
    const Node& n = nodes_[i];
    const Matrix& g = adj[i];
    switch (n.op) {
      case Op::kInput:
        break;
      case Op::kMatMul: {
        Matrix da = num::matmul_nt(g, val(n.b));
        Matrix db = num::matmul(num::transpose(val(n.a)), g);
        bump(n.a) = num::add(bump(n.a), da);
        bump(n.b) = num::add(bump(n.b), db);
        break;
      }
      case Op::kMatMulNT: {
        Matrix da = num::matmul(g, val(n.b));
        Matrix db = num::matmul(num::transpose(g), val(n.a));
        bump(n.a) = num::add(bump(n.a), da);
        bump(n.b) = num::add(bump(n.b), db);
        break;
      }
      case Op::kTranspose:
        bump(n.a) = num::add(bump(n.a), num::transpose(g));
        break;
      case Op::kAdd:
        bump(n.a) = num::add(bump(n.a), g);
        bump(n.b) = num::add(bump(n.b), g);
        break;
      case Op::kAddRowVec: {
        bump(n.a) = num::add(bump(n.a), g);
        Matrix& db = bump(n.b);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) db[c] += g(r, c);
        break;
      }
      case Op::kSub:
        bump(n.a) = num::add(bump(n.a), g);
        bump(n.b) = num::sub(bump(n.b), g);
        break;
      case Op::kScale:
        bump(n.a) = num::add(bump(n.a), num::scale(g, n.c));
        break;
      case Op::kRelu: {
        const Matrix& x = val(n.a);
        Matrix& da = bump(n.a);
        for (std::size_t j = 0; j < x.size(); ++j)
          if (x[j] > 0.0) da[j] += g[j];
        break;
      }
      case Op::kTanh: {
        Matrix& da = bump(n.a);
        for (std::size_t j = 0; j < n.value.size(); ++j)
          da[j] += g[j] * (1.0 - n.value[j] * n.value[j]);
        break;
      }
      case Op::kSigmoid: {
        Matrix& da = bump(n.a);
        for (std::size_t j = 0; j < n.value.size(); ++j)
          da[j] += g[j] * n.value[j] * (1.0 - n.value[j]);
        break;
      }
      case Op::kL2NormRows: {
        const Matrix& x = val(n.a);
        Matrix& da = bump(n.a);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const double norm = l2_norm(x.row_span(r));
          const double gy = dot(g.row_span(r), n.value.row_span(r));
          for (std::size_t c = 0; c < x.cols(); ++c)
            da(r, c) += (g(r, c) - n.value(r, c) * gy) / norm;
        }
        break;
      }
      case Op::kSoftmaxRows: {
        Matrix& da = bump(n.a);
        for (std::size_t r = 0; r < n.value.rows(); ++r) {
          const double gy = dot(g.row_span(r), n.value.row_span(r));
          for (std::size_t c = 0; c < n.value.cols(); ++c)
            da(r, c) += n.value(r, c) * (g(r, c) - gy);
        }
        break;
      }
      case Op::kLogSumExp: {
        const Matrix& x = val(n.a);
        Matrix& da = bump(n.a);
        const double lse = n.value[0];
        for (std::size_t j = 0; j < x.size(); ++j) da[j] += g[0] * std::exp(x[j] - lse);
        break;
      }
      case Op::kSum: {
        Matrix& da = bump(n.a);
        for (auto& v : da.data()) v += g[0];
        break;
      }
      case Op::kMean: {
        Matrix& da = bump(n.a);
        const double gi = g[0] / static_cast<double>(da.size());
        for (auto& v : da.data()) v += gi;
        break;
      }
      case Op::kMax:
        bump(n.a)[n.c0] += g[0];
        break;
      case Op::kGatherRows: {
        Matrix& da = bump(n.a);
        for (std::size_t r = 0; r < n.list.size(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) da(n.list[r], c) += g(r, c);
        break;
      }
      case Op::kSliceCols: {
        Matrix& da = bump(n.a);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) da(r, n.c0 + c) += g(r, c);
        break;
      }
      case Op::kConcatCols: {
        std::size_t off = 0;
        for (std::uint32_t part : n.list) {
          Matrix& dp = bump(part);
          for (std::size_t r = 0; r < dp.rows(); ++r)
            for (std::size_t c = 0; c < dp.cols(); ++c) dp(r, c) += g(r, off + c);
          off += dp.cols();
        }
        break;
      }
      case Op::kBceMean: {
        const Matrix& p = val(n.a);
        Matrix& da = bump(n.a);
        const double gi = g[0] / static_cast<double>(p.size());
        for (std::size_t j = 0; j < p.size(); ++j) {
          if (p[j] <= kBceLo || p[j] >= kBceHi) continue;  // clamped: flat
          da[j] += gi * (p[j] - n.aux[j]) / (p[j] * (1.0 - p[j]));
        }
        break;
      }
    }
  }

  std::vector<Matrix> out_grads;
  out_grads.reserve(wrt.size());
  for (Var v : wrt) {
    if (adj[v.idx].empty()) {
      out_grads.emplace_back(nodes_[v.idx].value.rows(), nodes_[v.idx].value.cols());
    } else {
      out_grads.push_back(adj[v.idx]);
    }
  }
  return out_grads;
}

double grad_check(const ScalarFn& fn, std::span<const Matrix> params, double eps) {
  if (eps <= 0.0) throw ConfigError("grad_check: eps must be positive");

  auto eval = [&](std::span<const Matrix> p) {
    GradTape tape;
    std::vector<Var> vars;
    vars.reserve(p.size());
    for (const Matrix& m : p) vars.push_back(tape.input(m));
    Var out = fn(tape, vars);
    const Matrix& v = tape.value(out);
    if (v.rows() != 1 || v.cols() != 1) throw ShapeError("grad_check: function is not scalar");
    if (!std::isfinite(v[0])) throw NumericError("grad_check: non-finite function value");
    return v[0];
  };

  // analytic adjoints
  GradTape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& m : params) vars.push_back(tape.input(m));
  Var out = fn(tape, vars);
  if (!std::isfinite(tape.value(out)[0])) throw NumericError("grad_check: non-finite function value");
  const std::vector<Matrix> analytic = tape.gradients(out, vars);

  std::vector<Matrix> work(params.begin(), params.end());
  double max_rel = 0.0;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::size_t j = 0; j < work[p].size(); ++j) {
      const double orig = work[p][j];
      work[p][j] = orig + eps;
      const double fp = eval(work);
      work[p][j] = orig - eps;
      const double fm = eval(work);
      work[p][j] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      const double ad = analytic[p][j];
      const double denom = std::max({std::abs(fd), std::abs(ad), 1e-3});
      max_rel = std::max(max_rel, std::abs(fd - ad) / denom);
    }
  }
  return max_rel;
}

}  // namespace mil::num
