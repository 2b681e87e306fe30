#pragma once

#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pluralfill/array.hpp"

namespace pluralfill {

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

using Inputs = std::span<const Array* const>;
/// Gradient accumulators, one per input; nullptr where no gradient is needed.
using GradSlots = std::span<Array* const>;
using ForwardFn = std::function<Array(Inputs)>;
using BackwardFn =
    std::function<void(const Array& grad_out, Inputs inputs, const Array& out, GradSlots grads)>;

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so inputs always precede their consumers.
/// Single-threaded; use one tape per concurrent computation.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value);
  Var parameter(Array value);

  /// Evaluates `forward` on the inputs' values and records the node.
  /// Throws NumericError if the result is not finite.
  /// A null `backward` makes the output a gradient barrier.
  Var apply(const char* op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  const Array& value(Var v) const;
  bool requires_grad(Var v) const;
  bool is_trainable(Var v) const;
  const char* op_name(Var v) const;
  size_t size() const { return nodes_.size(); }
  std::vector<Var> trainable_leaves();

  /// Re-evaluates every non-leaf node from the recorded leaves, in order.
  void replay();

  /// Reverse pass from a scalar ([1]-shaped) node. Returns the gradient for
  /// every trainable leaf (zeros when the leaf does not reach `output`).
  std::map<int, Array> backward(Var output) const;

 private:
  struct Node {
    const char* op = "leaf";
    std::vector<int> inputs;
    Array value;
    ForwardFn forward;
    BackwardFn backward;
    bool trainable = false;
    bool requires_grad = false;
  };
  const Node& node(Var v) const;

  std::deque<Node> nodes_;
};

/// Free-function form of Tape::backward.
std::map<int, Array> backward(const Tape& tape, Var scalar_output);

}  // namespace pluralfill
