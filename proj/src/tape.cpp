#include "pluralfill/tape.hpp"

#include "pluralfill/errors.hpp"

namespace pluralfill {

const Array& Var::value() const {
  if (!valid()) throw Error("use of an unbound Var");
  return tape->value(*this);
}

Var Tape::constant(Array value) {
  if (!value.all_finite()) throw NumericError("non-finite constant " + shape_str(value.shape()));
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::parameter(Array value) {
  if (!value.all_finite()) throw NumericError("non-finite parameter " + shape_str(value.shape()));
  Node n;
  n.value = std::move(value);
  n.trainable = true;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw Error("Var does not belong to this tape");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

const Array& Tape::value(Var v) const { return node(v).value; }
bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }
bool Tape::is_trainable(Var v) const { return node(v).trainable; }
const char* Tape::op_name(Var v) const { return node(v).op; }

std::vector<Var> Tape::trainable_leaves() {
  std::vector<Var> out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].trainable) out.push_back({this, static_cast<int>(i)});
  }
  return out;
}

Var Tape::apply(const char* op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  Node n;
  n.op = op;
  std::vector<const Array*> ins;
  ins.reserve(inputs.size());
  for (Var v : inputs) {
    const Node& src = node(v);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || src.requires_grad;
    ins.push_back(&src.value);
  }
  n.value = forward(Inputs(ins.data(), ins.size()));
  if (!n.value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op + " " +
                       shape_str(n.value.shape()));
  }
  if (!backward) n.requires_grad = false;
  n.forward = std::move(forward);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::replay() {
  std::vector<const Array*> ins;
  for (Node& n : nodes_) {
    if (!n.forward) continue;
    ins.clear();
    for (int id : n.inputs) ins.push_back(&nodes_[static_cast<size_t>(id)].value);
    n.value = n.forward(Inputs(ins.data(), ins.size()));
    if (!n.value.all_finite()) throw NumericError(std::string("non-finite replay of ") + n.op);
  }
}

std::map<int, Array> Tape::backward(Var output) const {
  const Node& out = node(output);
  if (out.value.shape() != Shape{1}) {
    throw ShapeError("backward needs a [1]-shaped output, got " + shape_str(out.value.shape()));
  }
  std::vector<Array> grads(nodes_.size());
  std::vector<bool> has(nodes_.size(), false);
  grads[static_cast<size_t>(output.id)] = Array({1}, 1.0f);
  has[static_cast<size_t>(output.id)] = true;

  std::vector<const Array*> ins;
  std::vector<Array*> slots;
  for (int id = output.id; id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (!has[static_cast<size_t>(id)] || !n.backward || !n.requires_grad) continue;
    ins.clear();
    slots.clear();
    for (int in : n.inputs) {
      const Node& src = nodes_[static_cast<size_t>(in)];
      ins.push_back(&src.value);
      if (src.requires_grad) {
        if (!has[static_cast<size_t>(in)]) {
          grads[static_cast<size_t>(in)] = Array(src.value.shape(), 0.0f);
          has[static_cast<size_t>(in)] = true;
        }
        slots.push_back(&grads[static_cast<size_t>(in)]);
      } else {
        slots.push_back(nullptr);
      }
    }
    n.backward(grads[static_cast<size_t>(id)], Inputs(ins.data(), ins.size()), n.value,
               GradSlots(slots.data(), slots.size()));
  }

  std::map<int, Array> result;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].trainable) continue;
    result.emplace(static_cast<int>(i),
                   has[i] ? std::move(grads[i]) : Array(nodes_[i].value.shape(), 0.0f));
  }
  return result;
}

std::map<int, Array> backward(const Tape& tape, Var scalar_output) {
  if (scalar_output.tape != &tape) throw Error("output was not produced on this tape");
  return tape.backward(scalar_output);
}

}  // namespace pluralfill
