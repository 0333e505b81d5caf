#pragma once

// The slot attention cell: one refinement step of the fixed-point map
// f(slots, inputs), plus random slot initialization. The cell is pure; the
// key/value projections of the inputs can be hoisted by solvers via
// project_inputs().

#include <cmath>

#include "fixslot/params.hpp"
#include "fixslot/rng.hpp"
#include "fixslot/tensor.hpp"

namespace fixslot {

template <typename S>
struct SlotAttentionParams {
  static constexpr S kNormEps = S(1e-5);

  Index d = 0;       // feature width
  Index hidden = 0;  // residual MLP hidden width
  S attn_eps = S(1e-8);

  Tensor<S> w_q, w_k, w_v;                          // d x d projections
  Tensor<S> norm_input_gain, norm_input_bias;       // d
  Tensor<S> norm_slots_gain, norm_slots_bias;       // d
  Tensor<S> norm_mlp_gain, norm_mlp_bias;           // d
  Tensor<S> gru_w_update, gru_u_update, gru_b_update;
  Tensor<S> gru_w_reset, gru_u_reset, gru_b_reset;
  Tensor<S> gru_w_cand, gru_u_cand, gru_b_cand;
  Tensor<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;         // d->hidden->d
  Tensor<S> init_mu, init_log_sigma;                // d (sigma stored as log)

  static SlotAttentionParams init(Rng& rng, Index d, Index hidden = 0) {
    if (hidden == 0) hidden = 2 * d;
    SlotAttentionParams p;
    p.d = d;
    p.hidden = hidden;
    auto xavier = [&](Index in, Index out) {
      const S lim = static_cast<S>(std::sqrt(6.0 / static_cast<double>(in + out)));
      return rand_uniform<S>(rng, Shape(in, out), -lim, lim);
    };
    p.w_q = xavier(d, d);
    p.w_k = xavier(d, d);
    p.w_v = xavier(d, d);
    p.norm_input_gain = Tensor<S>::ones(Shape(d));
    p.norm_input_bias = Tensor<S>::zeros(Shape(d));
    p.norm_slots_gain = Tensor<S>::ones(Shape(d));
    p.norm_slots_bias = Tensor<S>::zeros(Shape(d));
    p.norm_mlp_gain = Tensor<S>::ones(Shape(d));
    p.norm_mlp_bias = Tensor<S>::zeros(Shape(d));
    p.gru_w_update = xavier(d, d);
    p.gru_u_update = xavier(d, d);
    p.gru_b_update = Tensor<S>::zeros(Shape(d));
    p.gru_w_reset = xavier(d, d);
    p.gru_u_reset = xavier(d, d);
    p.gru_b_reset = Tensor<S>::zeros(Shape(d));
    p.gru_w_cand = xavier(d, d);
    p.gru_u_cand = xavier(d, d);
    p.gru_b_cand = Tensor<S>::zeros(Shape(d));
    p.mlp_w1 = xavier(d, hidden);
    p.mlp_b1 = Tensor<S>::zeros(Shape(hidden));
    p.mlp_w2 = xavier(hidden, d);
    p.mlp_b2 = Tensor<S>::zeros(Shape(d));
    p.init_mu = Tensor<S>::zeros(Shape(d));
    p.init_log_sigma = Tensor<S>::zeros(Shape(d));
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& fn) {
    fn("w_q", self.w_q);
    fn("w_k", self.w_k);
    fn("w_v", self.w_v);
    fn("norm_input_gain", self.norm_input_gain);
    fn("norm_input_bias", self.norm_input_bias);
    fn("norm_slots_gain", self.norm_slots_gain);
    fn("norm_slots_bias", self.norm_slots_bias);
    fn("norm_mlp_gain", self.norm_mlp_gain);
    fn("norm_mlp_bias", self.norm_mlp_bias);
    fn("gru_w_update", self.gru_w_update);
    fn("gru_u_update", self.gru_u_update);
    fn("gru_b_update", self.gru_b_update);
    fn("gru_w_reset", self.gru_w_reset);
    fn("gru_u_reset", self.gru_u_reset);
    fn("gru_b_reset", self.gru_b_reset);
    fn("gru_w_cand", self.gru_w_cand);
    fn("gru_u_cand", self.gru_u_cand);
    fn("gru_b_cand", self.gru_b_cand);
    fn("mlp_w1", self.mlp_w1);
    fn("mlp_b1", self.mlp_b1);
    fn("mlp_w2", self.mlp_w2);
    fn("mlp_b2", self.mlp_b2);
    fn("init_mu", self.init_mu);
    fn("init_log_sigma", self.init_log_sigma);
  }
  template <typename F>
  void for_each(F&& fn) {
    visit(*this, fn);
  }
  template <typename F>
  void for_each(F&& fn) const {
    visit(*this, fn);
  }

  template <typename To>
  SlotAttentionParams<To> to() const {
    SlotAttentionParams<To> out;
    out.d = d;
    out.hidden = hidden;
    out.attn_eps = static_cast<To>(attn_eps);
    auto src = param_pointers<S>(const_cast<SlotAttentionParams&>(*this));
    auto dst = param_pointers<To>(out);
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = cast<To>(*src[i]);
    return out;
  }
};

template <typename S>
struct InputProjection {
  Tensor<S> keys;    // M x d
  Tensor<S> values;  // M x d
};

template <typename S>
InputProjection<S> project_inputs(const SlotAttentionParams<S>& p, const Tensor<S>& inputs) {
  if (inputs.rank() != 2 || inputs.shape().extent(1) != p.d)
    throw ShapeError("slot attention: inputs " + inputs.shape().str() + " do not match width " +
                     std::to_string(p.d));
  if (!inputs.all_finite()) throw NumericError("slot attention: non-finite inputs");
  auto xh = layer_norm(inputs, p.norm_input_gain, p.norm_input_bias, SlotAttentionParams<S>::kNormEps);
  return {matmul(xh, p.w_k), matmul(xh, p.w_v)};
}

template <typename S>
struct CellStep {
  Tensor<S> slots;  // K x d
  Tensor<S> attn;   // M x K, rows sum to 1
};

template <typename S>
CellStep<S> cell_step(const SlotAttentionParams<S>& p, const Tensor<S>& slots,
                      const InputProjection<S>& proj) {
  if (slots.rank() != 2 || slots.shape().extent(1) != p.d)
    throw ShapeError("slot attention: slots " + slots.shape().str() + " do not match width " +
                     std::to_string(p.d));
  if (!slots.all_finite()) throw NumericError("slot attention: non-finite slots");
  const S eps = SlotAttentionParams<S>::kNormEps;

  auto sh = layer_norm(slots, p.norm_slots_gain, p.norm_slots_bias, eps);
  auto q = matmul(sh, p.w_q);
  auto logits = scale(matmul(proj.keys, transpose(q)), S(1) / static_cast<S>(std::sqrt(double(p.d))));
  auto attn = softmax(logits, 1);  // each measurement distributes one unit over slots

  auto attn_f = add_scalar(attn, p.attn_eps);
  auto weights = div(attn_f, reduce_sum(attn_f, 0));    // weighted mean per slot
  auto updates = matmul(transpose(weights), proj.values);

  auto zg = sigmoid(add(add(matmul(updates, p.gru_w_update), matmul(slots, p.gru_u_update)), p.gru_b_update));
  auto rg = sigmoid(add(add(matmul(updates, p.gru_w_reset), matmul(slots, p.gru_u_reset)), p.gru_b_reset));
  auto cand =
      tanh(add(add(matmul(updates, p.gru_w_cand), matmul(mul(rg, slots), p.gru_u_cand)), p.gru_b_cand));
  auto next = add(cand, mul(zg, sub(slots, cand)));  // (1-z) cand + z slots

  auto mh = layer_norm(next, p.norm_mlp_gain, p.norm_mlp_bias, eps);
  auto h1 = relu(add(matmul(mh, p.mlp_w1), p.mlp_b1));
  auto out = add(next, add(matmul(h1, p.mlp_w2), p.mlp_b2));
  return {out, attn};
}

template <typename S>
CellStep<S> cell_step(const SlotAttentionParams<S>& p, const Tensor<S>& slots, const Tensor<S>& inputs) {
  return cell_step(p, slots, project_inputs(p, inputs));
}

template <typename S>
Tensor<S> sample_slot_noise(Rng& rng, Index k, Index d) {
  return randn<S>(rng, Shape(k, d));
}

// mu + sigma * noise; recorded on tape iff the parameters are attached.
template <typename S>
Tensor<S> make_slots(const SlotAttentionParams<S>& p, const Tensor<S>& noise) {
  return add(mul(noise, exp(p.init_log_sigma)), p.init_mu);
}

// Detached initial slots: initialization noise carries no gradient.
template <typename S>
Tensor<S> init_slots(Rng& rng, const SlotAttentionParams<S>& p, Index k) {
  if (k < 1) throw ContractError("init_slots: need at least one slot");
  return detach(make_slots(p, sample_slot_noise<S>(rng, k, p.d)));
}

}  // namespace fixslot
