#include "drm/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace drm {

Matrix xavier(int in, int out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  return w;
}

void add_linear_params(ParameterStore& store, const std::string& prefix, int in, int out,
                       std::mt19937_64& rng) {
  store.add(prefix + ".w", xavier(in, out, rng));
  store.add(prefix + ".b", Matrix::Zero(1, out));
}

Var apply_linear(Tape& tape, const std::string& prefix, Var x) {
  return ops::linear(x, tape.param(prefix + ".w"), tape.param(prefix + ".b"));
}

namespace {

void add_norm_params(ParameterStore& store, const std::string& prefix, int d) {
  store.add(prefix + ".gain", Matrix::Ones(1, d));
  store.add(prefix + ".bias", Matrix::Zero(1, d));
}

Var apply_norm(Tape& tape, const std::string& prefix, Var x) {
  return ops::layer_norm(x, tape.param(prefix + ".gain"), tape.param(prefix + ".bias"));
}

}  // namespace

void add_attention_unit_params(ParameterStore& store, const std::string& prefix,
                               const AttentionConfig& cfg, bool cross, std::mt19937_64& rng) {
  if (cfg.heads <= 0 || cfg.d_model % cfg.heads != 0) {
    throw std::invalid_argument("model dim must be divisible by the head count");
  }
  const int d = cfg.d_model;
  for (const char* name : {"q", "k", "v", "o"}) {
    store.add(prefix + ".attn.w" + name, xavier(d, d, rng));
    store.add(prefix + ".attn.b" + name, Matrix::Zero(1, d));
  }
  add_norm_params(store, prefix + ".norm_q", d);
  if (cross) add_norm_params(store, prefix + ".norm_ctx", d);
  add_norm_params(store, prefix + ".norm_ffn", d);
  add_linear_params(store, prefix + ".ffn1", d, cfg.ffn_hidden, rng);
  add_linear_params(store, prefix + ".ffn2", cfg.ffn_hidden, d, rng);
}

void add_ha_layer_params(ParameterStore& store, const std::string& prefix,
                         const AttentionConfig& cfg, std::mt19937_64& rng) {
  add_attention_unit_params(store, prefix + ".sa_x", cfg, false, rng);
  add_attention_unit_params(store, prefix + ".sa_y", cfg, false, rng);
  add_attention_unit_params(store, prefix + ".ca_x", cfg, true, rng);
  add_attention_unit_params(store, prefix + ".ca_y", cfg, true, rng);
}

Var multi_head_attention(Tape& tape, const std::string& prefix, int heads, Var queries,
                         Var context, const BoolMatrix* mask, AttentionProbe* probe) {
  const Eigen::Index d = queries.cols();
  if (context.cols() != d) throw std::invalid_argument("query/context dim mismatch");
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("dim not divisible by heads");
  if (mask != nullptr && (mask->rows() != queries.rows() || mask->cols() != context.rows())) {
    throw std::invalid_argument("attention mask shape mismatch");
  }
  auto proj = [&](Var x, const char* w, const char* b) {
    return ops::linear(x, tape.param(prefix + ".w" + w), tape.param(prefix + ".b" + b));
  };
  const Var q = proj(queries, "q", "q");
  const Var k = proj(context, "k", "k");
  const Var v = proj(context, "v", "v");
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  if (probe != nullptr) probe->weights.clear();
  for (int h = 0; h < heads; ++h) {
    const Var qh = ops::slice_cols(q, h * dh, dh);
    const Var kh = ops::slice_cols(k, h * dh, dh);
    const Var vh = ops::slice_cols(v, h * dh, dh);
    const Var weights = ops::masked_softmax(ops::scale(ops::matmul_nt(qh, kh), inv_sqrt), mask);
    if (probe != nullptr) probe->weights.push_back(weights.value());
    outs.push_back(ops::matmul(weights, vh));
  }
  const Var cat = ops::concat_cols(outs);
  if (probe != nullptr) probe->head_outputs = cat.value();
  return proj(cat, "o", "o");
}

Var attention_unit(Tape& tape, const std::string& prefix, int heads, Var x, const Var* context,
                   const BoolMatrix* mask, AttentionProbe* probe) {
  const Var q = apply_norm(tape, prefix + ".norm_q", x);
  const Var ctx = context == nullptr ? q : apply_norm(tape, prefix + ".norm_ctx", *context);
  const Var z = ops::add(x, multi_head_attention(tape, prefix + ".attn", heads, q, ctx, mask, probe));
  const Var hidden = ops::gelu(apply_linear(tape, prefix + ".ffn1",
                                            apply_norm(tape, prefix + ".norm_ffn", z)));
  return ops::add(z, apply_linear(tape, prefix + ".ffn2", hidden));
}

StreamPair ha_layer(Tape& tape, const std::string& prefix, int heads, StreamPair in,
                    const HybridMasks& masks, HybridProbe* probe) {
  if (in.x.cols() != in.y.cols()) throw std::invalid_argument("HA streams must share a dim");
  const Var sa_x = attention_unit(tape, prefix + ".sa_x", heads, in.x, nullptr, nullptr,
                                  probe ? &probe->sa_x : nullptr);
  const Var ca_x = attention_unit(tape, prefix + ".ca_x", heads, in.x, &in.y, masks.x_to_y,
                                  probe ? &probe->ca_x : nullptr);
  const Var sa_y = attention_unit(tape, prefix + ".sa_y", heads, in.y, nullptr, nullptr,
                                  probe ? &probe->sa_y : nullptr);
  const Var ca_y = attention_unit(tape, prefix + ".ca_y", heads, in.y, &in.x, masks.y_to_x,
                                  probe ? &probe->ca_y : nullptr);
  return {ops::add(sa_x, ca_x), ops::add(sa_y, ca_y)};
}

void add_ha_stack_params(ParameterStore& store, const std::string& prefix,
                         const AttentionConfig& cfg, int layers, std::mt19937_64& rng) {
  for (int l = 0; l < layers; ++l) {
    add_ha_layer_params(store, prefix + ".ha" + std::to_string(l), cfg, rng);
  }
  add_norm_params(store, prefix + ".out_x", cfg.d_model);
  add_norm_params(store, prefix + ".out_y", cfg.d_model);
}

StreamPair ha_stack(Tape& tape, const std::string& prefix, int heads, int layers,
                    StreamPair in, const HybridMasks& masks, std::vector<HybridProbe>* probes) {
  if (probes != nullptr) probes->assign(static_cast<std::size_t>(layers), HybridProbe{});
  for (int l = 0; l < layers; ++l) {
    in = ha_layer(tape, prefix + ".ha" + std::to_string(l), heads, in, masks,
                  probes ? &(*probes)[static_cast<std::size_t>(l)] : nullptr);
  }
  return {apply_norm(tape, prefix + ".out_x", in.x), apply_norm(tape, prefix + ".out_y", in.y)};
}

void add_entity_encoder_params(ParameterStore& store, const std::string& prefix,
                               const AttentionConfig& cfg, int d_visual, int d_semantic,
                               std::mt19937_64& rng) {
  if (d_visual != cfg.d_model) add_linear_params(store, prefix + ".vis_in", d_visual, cfg.d_model, rng);
  add_linear_params(store, prefix + ".sem_in", d_semantic, cfg.d_model, rng);
  add_ha_stack_params(store, prefix, cfg, kEntityEncoderLayers, rng);
}

Var entity_encoder(Tape& tape, const std::string& prefix, int heads, Var visual, Var semantic) {
  if (visual.rows() == 0) throw std::invalid_argument("entity encoder needs at least one entity");
  if (visual.rows() != semantic.rows()) {
    throw std::invalid_argument("visual and semantic entity counts differ");
  }
  const bool project_visual = tape.store()->contains(prefix + ".vis_in.w");
  const Var x0 = project_visual ? apply_linear(tape, prefix + ".vis_in", visual) : visual;
  const Var y0 = apply_linear(tape, prefix + ".sem_in", semantic);
  const StreamPair out = ha_stack(tape, prefix, heads, kEntityEncoderLayers, {x0, y0});
  return ops::add(out.x, out.y);
}

}  // namespace drm
