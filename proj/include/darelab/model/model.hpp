#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "darelab/corpus/corpus.hpp"
#include "darelab/numerics/tape.hpp"

namespace darelab {

struct ModelDims {
  std::size_t vocab_size = 26;
  int null_id = 25;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t mlp_ratio = 4;
  std::size_t k_max = 16;
  bool text_pos_enc = true;
  GridDims grid;

  std::size_t d_head() const { return d_model / heads; }
  std::size_t visual_tokens() const { return grid.cells(); }
  // Throws ConfigError on inconsistent dimensions.
  void validate() const;
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

template <class T>
struct LayerWeights {
  T ln1_g, ln1_b;  // visual pre-norm
  T lnt_g, lnt_b;  // text pre-norm
  T wq, wk, wv, wo, bo;
  T ln2_g, ln2_b;
  T w1, b1, w2, b2;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln1_g", ln1_g);
    f(prefix + "ln1_b", ln1_b);
    f(prefix + "lnt_g", lnt_g);
    f(prefix + "lnt_b", lnt_b);
    f(prefix + "wq", wq);
    f(prefix + "wk", wk);
    f(prefix + "wv", wv);
    f(prefix + "wo", wo);
    f(prefix + "bo", bo);
    f(prefix + "ln2_g", ln2_g);
    f(prefix + "ln2_b", ln2_b);
    f(prefix + "w1", w1);
    f(prefix + "b1", b1);
    f(prefix + "w2", w2);
    f(prefix + "b2", b2);
  }
};

// All trainable tensors of the denoiser. Instantiated with Tensor for
// storage and with Var for a forward pass bound to a tape.
template <class T>
struct Weights {
  T tok_emb;   // vocab x d, includes the null row
  T text_pos;  // k_max x d
  T vis_pos;   // cells x d
  T in_w, in_b;
  T t_w1, t_b1, t_w2, t_b2;
  std::vector<LayerWeights<T>> layers;
  T lnf_g, lnf_b;
  T out_w, out_b;

  // Calls f(name, member) in a fixed order shared by checkpoints and the optimizer.
  template <class F>
  void visit(F&& f) {
    f("tok_emb", tok_emb);
    f("text_pos", text_pos);
    f("vis_pos", vis_pos);
    f("in_w", in_w);
    f("in_b", in_b);
    f("t_w1", t_w1);
    f("t_b1", t_b1);
    f("t_w2", t_w2);
    f("t_b2", t_b2);
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit("layer" + std::to_string(i) + ".", f);
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
    f("out_w", out_w);
    f("out_b", out_b);
  }
};

struct ModelParams {
  ModelDims dims;
  Weights<Tensor> w;

  std::vector<std::string> names();
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  std::size_t parameter_count() const;
};

using ModelVars = Weights<Var>;

// Weights ~ N(0, 0.02^2); norm gains 1; biases 0.
ModelParams init_params(std::uint64_t seed, const ModelDims& dims);

// Allocates zero tensors with the right shapes (used when loading).
ModelParams zero_params(const ModelDims& dims);

// Binds parameters as tape leaves without copying. trainable=false gives constants.
ModelVars bind_params(Tape& tape, const ModelParams& params, bool trainable);
std::vector<Var> flatten(ModelVars& vars);
// Inverse of flatten: assigns vars in visit order.
ModelVars unflatten(std::span<const Var> flat, std::size_t layers);

// Token ids plus per-position null flags. Flagged positions use the null
// embedding row but keep their text position encoding.
struct Condition {
  std::vector<int> token_ids;
  std::vector<bool> null_flags;

  std::size_t size() const { return token_ids.size(); }
  static Condition full(const Caption& caption);
  static Condition all_null(const Caption& caption);
  // Keeps positions whose keep flag is set, nulls the rest.
  static Condition keep_only(const Caption& caption, const std::vector<bool>& keep);
  std::vector<int> effective_ids(int null_id) const;
};

// Text-block slices of one layer's attention, per head.
struct TextAttention {
  std::vector<Var> a_text;  // per head: Nq x K (text columns of the softmax)
  std::vector<Var> v_text;  // per head: K x d_head (text rows of V)
};

struct ForwardGraph {
  Var u;  // frames x height x width x channels
  std::vector<TextAttention> layers;
};

// Records a forward pass on the tape of `vars`. Gradients flow only when the
// tape is recording and the vars are trainable leaves.
ForwardGraph forward(const ModelVars& vars, const ModelDims& dims, Var x_t, double t, const Condition& cond,
                     bool keep_text_attention);

struct AttnCapture {
  std::size_t layer = 0;
  Tensor a_text;      // heads x Nq x K
  Tensor v_text;      // heads x K x d_head
  Tensor a_out_text;  // heads x Nq x d_head
  bool grad_tracked = false;
};

AttnCapture capture_layer(const TextAttention& layer, std::size_t index, bool grad_tracked);

struct ForwardResult {
  Tensor u;
  std::vector<AttnCapture> captures;
};

// Gradient-free forward. Pure for fixed inputs and safe to call concurrently.
ForwardResult forward(const ModelParams& params, const Tensor& x_t, double t, const Condition& cond,
                      bool capture = false);

// Sinusoidal time features, 1 x d.
Tensor time_features(double t, std::size_t d);

}  // namespace darelab
