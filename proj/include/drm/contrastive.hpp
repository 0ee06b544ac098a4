#pragma once

#include "drm/autograd.hpp"

#include <span>

namespace drm {

// Category-aware supervised contrastive loss over a batch of unit-norm rows.
//
// For anchor a with positives P(a) (same label, a excluded) and batch B(a)
// (every row but a):
//   L_a = -1/|P(a)| * sum_{p in P(a)} log( exp(<r_a, r_p>/tau) / sum_{b in B(a)} exp(<r_a, r_b>/tau) )
// The result is the mean of L_a over anchors with at least one positive.
// Throws std::invalid_argument when no anchor has a positive or tau <= 0.
double contrastive_loss(const Matrix& reps, std::span<const int> labels, double tau,
                        Matrix* grad = nullptr);

// True when at least one pair of rows shares a label.
bool has_positive_pair(std::span<const int> labels);

// Tape op wrapper: 1x1 node whose backward uses the analytic gradient.
Var contrastive_loss(Var reps, std::span<const int> labels, double tau);

}  // namespace drm
