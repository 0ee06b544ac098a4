#include "drm/contrastive.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <vector>

namespace drm {

bool has_positive_pair(std::span<const int> labels) {
  std::map<int, int> counts;
  for (int l : labels) {
    if (++counts[l] > 1) return true;
  }
  return false;
}

double contrastive_loss(const Matrix& reps, std::span<const int> labels, double tau,
                        Matrix* grad) {
  if (!(tau > 0)) throw std::invalid_argument("contrastive temperature must be positive");
  const Eigen::Index n = reps.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw std::invalid_argument("one label per representation required");
  }
  const Matrix logits = (reps * reps.transpose()) / tau;
  // coef(a, b) = dL/dlogit(a, b), accumulated for the gradient.
  Matrix coef = Matrix::Zero(n, n);
  double total = 0.0;
  int anchors = 0;
  for (Eigen::Index a = 0; a < n; ++a) {
    int positives = 0;
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index b = 0; b < n; ++b) {
      if (b == a) continue;
      m = std::max(m, logits(a, b));
      if (labels[b] == labels[a]) ++positives;
    }
    if (positives == 0) continue;
    double z = 0.0;
    for (Eigen::Index b = 0; b < n; ++b) {
      if (b != a) z += std::exp(logits(a, b) - m);
    }
    const double lse = m + std::log(z);
    double la = 0.0;
    for (Eigen::Index b = 0; b < n; ++b) {
      if (b == a) continue;
      coef(a, b) = std::exp(logits(a, b) - lse);
      if (labels[b] == labels[a]) {
        la += lse - logits(a, b);
        coef(a, b) -= 1.0 / positives;
      }
    }
    total += la / positives;
    ++anchors;
  }
  if (anchors == 0) throw std::invalid_argument("contrastive batch has no positive pair");
  if (grad != nullptr) {
    coef /= (anchors * tau);
    *grad = (coef + coef.transpose()) * reps;
  }
  return total / anchors;
}

Var contrastive_loss(Var reps, std::span<const int> labels, double tau) {
  Tape& t = *reps.tape;
  Matrix g;
  Matrix out(1, 1);
  out(0, 0) = contrastive_loss(reps.value(), labels, tau, &g);
  const int ir = reps.id;
  return t.push(std::move(out), {ir}, [ir, g = std::move(g)](Tape& t, int self) {
    t.grad_ref(ir) += g * t.grad_ref(self)(0, 0);
  });
}

}  // namespace drm
