#include "drm/autograd.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace drm {

Parameter& ParameterStore::add(const std::string& name, Matrix value, bool trainable) {
  if (index_.count(name) != 0) {
    throw std::invalid_argument("duplicate parameter: " + name);
  }
  index_[name] = params_.size();
  params_.push_back(Parameter{name, std::move(value), trainable});
  return params_.back();
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::out_of_range("unknown parameter: " + name);
  }
  return it->second;
}

Parameter& ParameterStore::get(const std::string& name) { return params_[index_of(name)]; }

const Parameter& ParameterStore::get(const std::string& name) const {
  return params_[index_of(name)];
}

std::string ParameterStore::content_hash(std::span<const std::string> prefixes) const {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& p : params_) {
    bool selected = prefixes.empty();
    for (const auto& prefix : prefixes) {
      if (p.name.rfind(prefix, 0) == 0) {
        selected = true;
        break;
      }
    }
    if (!selected) continue;
    EVP_DigestUpdate(ctx, p.name.data(), p.name.size());
    const std::int64_t shape[2] = {p.value.rows(), p.value.cols()};
    EVP_DigestUpdate(ctx, shape, sizeof(shape));
    EVP_DigestUpdate(ctx, p.value.data(), sizeof(double) * p.value.size());
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

Gradients::Gradients(const ParameterStore& store) {
  grads.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& v = store.at(i).value;
    grads.push_back(Matrix::Zero(v.rows(), v.cols()));
  }
}

void Gradients::add(const Gradients& other) {
  for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += other.grads[i];
}

void Gradients::scale(double s) {
  for (auto& g : grads) g *= s;
}

void Gradients::zero() {
  for (auto& g : grads) g.setZero();
}

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::constant(Matrix value) { return push(std::move(value), {}, nullptr); }

Var Tape::input(Matrix value) {
  Var v = push(std::move(value), {}, nullptr);
  nodes_[v.id].requires_grad = true;
  return v;
}

Var Tape::param(const std::string& name) {
  if (store_ == nullptr) throw std::logic_error("tape has no parameter store");
  const std::size_t idx = store_->index_of(name);
  auto it = bound_.find(idx);
  if (it != bound_.end()) return Var{this, it->second};
  const auto& p = store_->at(idx);
  Var v = push(p.value, {}, nullptr);
  nodes_[v.id].requires_grad = p.trainable;
  bound_[idx] = v.id;
  return v;
}

Var Tape::push(Matrix value, std::vector<int> parents, std::function<void(Tape&, int)> back) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  if (n.requires_grad) n.back = std::move(back);
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad_ref(int id) {
  auto& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::seed(Var v, const Matrix& upstream) {
  if (upstream.rows() != value(v).rows() || upstream.cols() != value(v).cols()) {
    throw std::invalid_argument("seed gradient shape mismatch");
  }
  grad_ref(v.id) += upstream;
}

void Tape::backward(Var scalar_out) {
  if (value(scalar_out).size() != 1) throw std::invalid_argument("backward needs a scalar");
  seed(scalar_out, Matrix::Ones(1, 1));
  backward();
}

void Tape::backward() {
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    auto& n = nodes_[id];
    if (!n.requires_grad || !n.back || n.grad.size() == 0) continue;
    n.back(*this, id);
  }
}

void Tape::collect(Gradients& grads) const {
  for (const auto& [idx, id] : bound_) {
    const auto& g = nodes_[id].grad;
    if (g.size() != 0) grads.grads[idx] += g;
  }
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

namespace ops {
namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("vars live on different tapes");
}

void check_shape(bool ok, const char* op) {
  if (!ok) throw std::invalid_argument(std::string("shape mismatch in ") + op);
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.cols() == b.rows(), "matmul");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    if (t.needs(ia)) t.grad_ref(ia).noalias() += g * t.value_ref(ib).transpose();
    if (t.needs(ib)) t.grad_ref(ib).noalias() += t.value_ref(ia).transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.cols() == b.cols(), "matmul_nt");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value() * b.value().transpose(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    if (t.needs(ia)) t.grad_ref(ia).noalias() += g * t.value_ref(ib);
    if (t.needs(ib)) t.grad_ref(ib).noalias() += g.transpose() * t.value_ref(ia);
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    if (t.needs(ia)) t.grad_ref(ia) += g;
    if (t.needs(ib)) t.grad_ref(ib) += g;
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    if (t.needs(ia)) t.grad_ref(ia) += g;
    if (t.needs(ib)) t.grad_ref(ib) -= g;
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.push(a.value() * s, {ia}, [ia, s](Tape& t, int self) {
    t.grad_ref(ia) += t.grad_ref(self) * s;
  });
}

Var hadamard(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.push(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    if (t.needs(ia)) t.grad_ref(ia) += g.cwiseProduct(t.value_ref(ib));
    if (t.needs(ib)) t.grad_ref(ib) += g.cwiseProduct(t.value_ref(ia));
  });
}

Var add_row(Var a, Var b) {
  check_same_tape(a, b);
  check_shape(b.rows() == 1 && a.cols() == b.cols(), "add_row");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  Matrix out = a.value();
  out.rowwise() += b.value().row(0);
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    if (t.needs(ia)) t.grad_ref(ia) += g;
    if (t.needs(ib)) t.grad_ref(ib) += g.colwise().sum();
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  });
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Matrix& x = t.value_ref(ia);
    const Matrix d = x.unaryExpr([](double v) {
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      return 0.5 * (1.0 + th) +
             0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    });
    t.grad_ref(ia) += t.grad_ref(self).cwiseProduct(d);
  });
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  check_same_tape(a, gain);
  check_same_tape(a, bias);
  check_shape(gain.rows() == 1 && gain.cols() == a.cols(), "layer_norm gain");
  check_shape(bias.rows() == 1 && bias.cols() == a.cols(), "layer_norm bias");
  Tape& t = *a.tape;
  const Matrix& x = a.value();
  const Eigen::Index n = x.rows(), m = x.cols();
  Matrix xhat(n, m);
  Vector inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std[r];
  }
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  const int ia = a.id, ig = gain.id, ib = bias.id;
  return t.push(std::move(out), {ia, ig, ib},
                [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                  int self) {
                  const Matrix& g = t.grad_ref(self);
                  if (t.needs(ig)) t.grad_ref(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.needs(ib)) t.grad_ref(ib) += g.colwise().sum();
                  if (t.needs(ia)) {
                    Matrix dxhat = g.array().rowwise() * t.value_ref(ig).row(0).array();
                    Matrix& ga = t.grad_ref(ia);
                    for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                      const double m1 = dxhat.row(r).mean();
                      const double m2 = dxhat.row(r).dot(xhat.row(r)) / dxhat.cols();
                      ga.row(r).array() +=
                          inv_std[r] *
                          (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                  }
                });
}

Var masked_softmax(Var logits, const BoolMatrix* mask) {
  Tape& t = *logits.tape;
  const Matrix& s = logits.value();
  if (mask != nullptr) {
    check_shape(mask->rows() == s.rows() && mask->cols() == s.cols(), "masked_softmax");
  }
  Matrix out = Matrix::Zero(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
      if (mask == nullptr || (*mask)(r, c)) m = std::max(m, s(r, c));
    }
    if (!std::isfinite(m)) {
      throw std::invalid_argument("attention mask row " + std::to_string(r) +
                                  " allows no keys");
    }
    double z = 0.0;
    for (Eigen::Index c = 0; c < s.cols(); ++c) {
      if (mask == nullptr || (*mask)(r, c)) {
        out(r, c) = std::exp(s(r, c) - m);
        z += out(r, c);
      }
    }
    out.row(r) /= z;
  }
  const int il = logits.id;
  return t.push(std::move(out), {il}, [il](Tape& t, int self) {
    const Matrix& y = t.value_ref(self);
    const Matrix& g = t.grad_ref(self);
    const Vector dots = g.cwiseProduct(y).rowwise().sum();
    Matrix d = g;
    d.colwise() -= dots;
    t.grad_ref(il) += y.cwiseProduct(d);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
  Tape& t = *parts[0].tape;
  const Eigen::Index n = parts[0].rows();
  Eigen::Index total = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p);
    check_shape(p.rows() == n, "concat_cols");
    total += p.cols();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Matrix out(n, total);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return t.push(std::move(out), ids, [ids, widths](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs(ids[k])) t.grad_ref(ids[k]) += g.middleCols(off, widths[k]);
      off += widths[k];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  Tape& t = *parts[0].tape;
  const Eigen::Index m = parts[0].cols();
  Eigen::Index total = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p);
    check_shape(p.cols() == m, "concat_rows");
    total += p.rows();
    ids.push_back(p.id);
    heights.push_back(p.rows());
  }
  Matrix out(total, m);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return t.push(std::move(out), ids, [ids, heights](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.needs(ids[k])) t.grad_ref(ids[k]) += g.middleRows(off, heights[k]);
      off += heights[k];
    }
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  check_shape(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols");
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.push(a.value().middleCols(start, count), {ia}, [ia, start, count](Tape& t, int self) {
    t.grad_ref(ia).middleCols(start, count) += t.grad_ref(self);
  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Tape& t = *a.tape;
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    check_shape(idx[k] >= 0 && idx[k] < a.rows(), "gather_rows");
    out.row(static_cast<Eigen::Index>(k)) = a.value().row(idx[k]);
  }
  const int ia = a.id;
  return t.push(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& t, int self) {
    const Matrix& g = t.grad_ref(self);
    Matrix& ga = t.grad_ref(ia);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      ga.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
    }
  });
}

Var l2_normalize_rows(Var a, double eps) {
  Tape& t = *a.tape;
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm().array().max(eps);
  Matrix out = x.array().colwise() / norms.array();
  const int ia = a.id;
  return t.push(std::move(out), {ia}, [ia, norms = std::move(norms)](Tape& t, int self) {
    const Matrix& y = t.value_ref(self);
    const Matrix& g = t.grad_ref(self);
    const Vector dots = g.cwiseProduct(y).rowwise().sum();
    Matrix d = g - (y.array().colwise() * dots.array()).matrix();
    t.grad_ref(ia) += (d.array().colwise() / norms.array()).matrix();
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad_ref(ia).array() += t.grad_ref(self)(0, 0);
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var cross_entropy_sum(Var logits, std::span<const int> labels) {
  check_shape(static_cast<Eigen::Index>(labels.size()) == logits.rows(), "cross_entropy_sum");
  Tape& t = *logits.tape;
  const Matrix& z = logits.value();
  Matrix probs = softmax_rows(z);
  double loss = 0.0;
  std::vector<int> y(labels.begin(), labels.end());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    if (y[r] < 0 || y[r] >= z.cols()) throw std::out_of_range("cross entropy label out of range");
    loss -= std::log(std::max(probs(r, y[r]), std::numeric_limits<double>::min()));
  }
  Matrix out(1, 1);
  out(0, 0) = loss;
  const int il = logits.id;
  return t.push(std::move(out), {il},
                [il, probs = std::move(probs), y = std::move(y)](Tape& t, int self) {
                  Matrix d = probs;
                  for (std::size_t r = 0; r < y.size(); ++r) d(r, y[r]) -= 1.0;
                  t.grad_ref(il) += d * t.grad_ref(self)(0, 0);
                });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

}  // namespace ops
}  // namespace drm
