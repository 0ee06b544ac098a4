#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace drm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A named trainable (or frozen) tensor. Gradients are not stored here; each
// Tape accumulates its own so independent tapes never share mutable state.
struct Parameter {
  std::string name;
  Matrix value;
  bool trainable = true;
};

// Ordered parameter registry. Insertion order is the serialization order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix value, bool trainable = true);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter& at(std::size_t i) { return params_[i]; }
  const Parameter& at(std::size_t i) const { return params_[i]; }
  std::size_t index_of(const std::string& name) const;

  // SHA-256 over names and raw values of every parameter whose name starts
  // with one of the prefixes (all parameters when the list is empty).
  std::string content_hash(std::span<const std::string> prefixes = {}) const;

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// Per-parameter gradient buffers aligned with a ParameterStore.
struct Gradients {
  std::vector<Matrix> grads;

  explicit Gradients(const ParameterStore& store);
  void add(const Gradients& other);
  void scale(double s);
  void zero();
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Reverse-mode automatic differentiation over dense row-major matrices.
// Nodes are appended in evaluation order; backward() sweeps them in reverse.
class Tape {
 public:
  explicit Tape(const ParameterStore* store = nullptr) : store_(store) {}

  Var constant(Matrix value);
  // Leaf that receives gradients; read them back with grad().
  Var input(Matrix value);
  // Leaf bound to a stored parameter. Repeated calls return the same node.
  Var param(const std::string& name);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Seeds d(out)/d(out) = 1 for a 1x1 node and propagates.
  void backward(Var scalar_out);
  // Adds an externally computed upstream gradient to v before a backward sweep.
  void seed(Var v, const Matrix& upstream);
  // Propagates already-seeded gradients.
  void backward();

  // Adds the gradient of every bound parameter into grads (indexed as in the store).
  void collect(Gradients& grads) const;

  std::size_t size() const { return nodes_.size(); }
  const ParameterStore* store() const { return store_; }

  // Node construction used by the op library.
  Var push(Matrix value, std::vector<int> parents, std::function<void(Tape&, int)> back);
  Matrix& grad_ref(int id);
  const Matrix& value_ref(int id) const { return nodes_[id].value; }
  bool needs(int id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> back;
    std::vector<int> parents;
  };

  const ParameterStore* store_;
  std::vector<Node> nodes_;
  std::map<std::size_t, int> bound_;  // store index -> node id
};

namespace ops {

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var hadamard(Var a, Var b);
// a (n x m) + row vector b (1 x m) broadcast over rows.
Var add_row(Var a, Var b);
Var gelu(Var a);
// Row-wise layer normalization with learned gain and bias (both 1 x m).
Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);
// Row-wise softmax; entries with mask == false get exactly zero weight.
// Every row must keep at least one allowed entry.
Var masked_softmax(Var logits, const BoolMatrix* mask);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var a, std::span<const int> rows);
Var l2_normalize_rows(Var a, double eps = 1e-12);
Var sum(Var a);
Var mean(Var a);
// Sum over rows of the categorical cross-entropy of softmax(logits).
Var cross_entropy_sum(Var logits, std::span<const int> labels);
// Affine layer: x W + b with W (in x out) and b (1 x out).
Var linear(Var x, Var weight, Var bias);

}  // namespace ops

// Numerically stable row softmax on plain matrices.
Matrix softmax_rows(const Matrix& logits);

}  // namespace drm
