#pragma once

#include "drm/autograd.hpp"

#include <random>
#include <string>
#include <vector>

namespace drm {

struct AttentionConfig {
  int d_model = 64;
  int heads = 4;
  int ffn_hidden = 64;
};

// Xavier-uniform weight in x out.
Matrix xavier(int in, int out, std::mt19937_64& rng);

// Registers a linear layer `<prefix>.w` (in x out) and `<prefix>.b` (1 x out).
void add_linear_params(ParameterStore& store, const std::string& prefix, int in, int out,
                       std::mt19937_64& rng);
Var apply_linear(Tape& tape, const std::string& prefix, Var x);

// Parameters of one attention unit (SA or CA): query/key/value/output
// projections, pre-norms for the query and (cross only) context streams, and a
// feed-forward block.
void add_attention_unit_params(ParameterStore& store, const std::string& prefix,
                               const AttentionConfig& cfg, bool cross, std::mt19937_64& rng);

// Two SA units and two CA units: <prefix>.sa_x, .sa_y, .ca_x, .ca_y.
void add_ha_layer_params(ParameterStore& store, const std::string& prefix,
                         const AttentionConfig& cfg, std::mt19937_64& rng);

// Captured intermediates of one multi-head attention call.
struct AttentionProbe {
  std::vector<Matrix> weights;  // per head, n_q x n_k
  Matrix head_outputs;          // concatenated per-head outputs before the output projection
};

// Multi-head scaled dot-product attention. `<prefix>.{wq,wk,wv,wo}` / `.{bq,bk,bv,bo}`.
// A query row whose mask allows no key throws.
Var multi_head_attention(Tape& tape, const std::string& prefix, int heads, Var queries,
                         Var context, const BoolMatrix* mask, AttentionProbe* probe = nullptr);

// Pre-norm transformer unit: z = x + MHA(LN(x), LN(ctx)); out = z + FFN(LN(z)).
// Self-attention when `context` is null.
Var attention_unit(Tape& tape, const std::string& prefix, int heads, Var x, const Var* context,
                   const BoolMatrix* mask, AttentionProbe* probe = nullptr);

struct StreamPair {
  Var x;
  Var y;
};

// Masks for the two cross-attention units of a hybrid layer. Null = unmasked.
struct HybridMasks {
  const BoolMatrix* x_to_y = nullptr;
  const BoolMatrix* y_to_x = nullptr;
};

struct HybridProbe {
  AttentionProbe sa_x, sa_y, ca_x, ca_y;
};

// X' = SA(X) + CA(X, Y);  Y' = SA(Y) + CA(Y, X).
StreamPair ha_layer(Tape& tape, const std::string& prefix, int heads, StreamPair in,
                    const HybridMasks& masks = {}, HybridProbe* probe = nullptr);

// Hybrid layers `<prefix>.ha<l>` plus closing norms `<prefix>.out_x` / `.out_y`.
void add_ha_stack_params(ParameterStore& store, const std::string& prefix,
                         const AttentionConfig& cfg, int layers, std::mt19937_64& rng);

// Stack of hybrid layers `<prefix>.ha<l>` for l in [0, layers). Each stream is
// layer-normalized on the way out: the additive fusion carries the residual
// twice, so the scale doubles per layer otherwise.
StreamPair ha_stack(Tape& tape, const std::string& prefix, int heads, int layers,
                    StreamPair in, const HybridMasks& masks = {},
                    std::vector<HybridProbe>* probes = nullptr);

// Entity encoder: semantic rows are projected to d by `<prefix>.sem_in`, then
// a 4-layer HA stack runs over (visual, semantic); returns X + Y of the last layer.
inline constexpr int kEntityEncoderLayers = 4;
void add_entity_encoder_params(ParameterStore& store, const std::string& prefix,
                               const AttentionConfig& cfg, int d_visual, int d_semantic,
                               std::mt19937_64& rng);
Var entity_encoder(Tape& tape, const std::string& prefix, int heads, Var visual, Var semantic);

}  // namespace drm
