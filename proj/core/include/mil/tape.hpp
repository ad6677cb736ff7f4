#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mil/matrix.hpp"

namespace mil::num {

// Handle to a tape node.
struct Var {
  std::uint32_t idx = 0;
};

// Reverse-mode gradient tape over a fixed primitive set. Forward values are
// computed eagerly; gradients() replays the record backward and returns one
// adjoint per requested input, shaped like that input.
//
// A tape is confined to one logical thread and is typically reset per
// optimization step.
class GradTape {
 public:
  Var input(Matrix value);

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var add_rowvec(Var a, Var bias);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var relu(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var l2_normalize_rows(Var a);
  Var softmax_rows(Var a);
  Var logsumexp(Var a);  // over all entries -> 1 x 1
  Var sum(Var a);        // 1 x 1
  Var mean(Var a);       // 1 x 1
  Var max_all(Var a);    // 1 x 1; subgradient routed to the first argmax
  Var gather_rows(Var a, std::vector<std::uint32_t> rows);
  Var slice_cols(Var a, std::size_t c0, std::size_t c1);  // [c0, c1)
  Var concat_cols(std::span<const Var> parts);

  // Mean binary cross-entropy of probabilities against constant 0/1 targets.
  // Probabilities are clamped to [1e-12, 1 - 1e-12]; clamped entries get zero adjoint.
  Var bce_mean(Var probs, Matrix targets);

  const Matrix& value(Var v) const { return nodes_[v.idx].value; }
  std::size_t size() const { return nodes_.size(); }
  void reset() { nodes_.clear(); }

  // Adjoints of the scalar `output` with respect to each var in `wrt`
  // (zero matrices for vars the output does not depend on).
  std::vector<Matrix> gradients(Var output, std::span<const Var> wrt) const;

 private:
  enum class Op : std::uint8_t {
    kInput,
    kMatMul,
    kMatMulNT,
    kTranspose,
    kAdd,
    kAddRowVec,
    kSub,
    kScale,
    kRelu,
    kTanh,
    kSigmoid,
    kL2NormRows,
    kSoftmaxRows,
    kLogSumExp,
    kSum,
    kMean,
    kMax,
    kGatherRows,
    kSliceCols,
    kConcatCols,
    kBceMean,
  };

  struct Node {
    Op op = Op::kInput;
    std::uint32_t a = 0, b = 0;
    double c = 0.0;
    std::size_t c0 = 0, c1 = 0;
    std::vector<std::uint32_t> list;  // gather rows / concat operands
    Matrix aux;                       // bce targets
    Matrix value;
  };

  Var push(Node n);
  const Matrix& val(std::uint32_t i) const { return nodes_[i].value; }

  std::vector<Node> nodes_;
};

// Maximum elementwise relative error (with a small floor on the denominator)
// between tape adjoints and central finite differences of `fn` at `params`.
// `fn` must rebuild the computation from scratch on the provided tape.
// NumericError if the function value is not finite.
using ScalarFn = std::function<Var(GradTape&, std::span<const Var>)>;
double grad_check(const ScalarFn& fn, std::span<const Matrix> params, double eps);

}  // namespace mil::num
