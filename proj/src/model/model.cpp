#include "darelab/model/model.hpp"

#include <cmath>

#include "darelab/error.hpp"

namespace darelab {

void ModelDims::validate() const {
  if (d_model == 0 || heads == 0 || layers == 0 || mlp_ratio == 0) throw ConfigError("model dims must be positive");
  if (d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
  }
  if (d_model % 2 != 0) throw ConfigError("d_model must be even for sinusoidal time features");
  if (null_id < 0 || static_cast<std::size_t>(null_id) >= vocab_size) throw ConfigError("null_id outside vocab");
  if (k_max == 0) throw ConfigError("k_max must be positive");
  if (grid.frames == 0 || grid.height == 0 || grid.width == 0 || grid.channels == 0) {
    throw ConfigError("grid dims must be positive");
  }
}

std::vector<std::string> ModelParams::names() {
  std::vector<std::string> out;
  w.visit([&](const std::string& name, Tensor&) { out.push_back(name); });
  return out;
}

std::vector<Tensor*> ModelParams::tensors() {
  std::vector<Tensor*> out;
  w.visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
  std::vector<const Tensor*> out;
  const_cast<Weights<Tensor>&>(w).visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

ModelParams zero_params(const ModelDims& dims) {
  dims.validate();
  const std::size_t d = dims.d_model;
  const std::size_t hidden = d * dims.mlp_ratio;
  const std::size_t ch = dims.grid.channels;
  ModelParams p;
  p.dims = dims;
  auto& w = p.w;
  w.tok_emb = Tensor({dims.vocab_size, d});
  w.text_pos = Tensor({dims.k_max, d});
  w.vis_pos = Tensor({dims.visual_tokens(), d});
  w.in_w = Tensor({ch, d});
  w.in_b = Tensor({1, d});
  w.t_w1 = Tensor({d, d});
  w.t_b1 = Tensor({1, d});
  w.t_w2 = Tensor({d, d});
  w.t_b2 = Tensor({1, d});
  w.layers.resize(dims.layers);
  for (auto& l : w.layers) {
    l.ln1_g = Tensor({1, d});
    l.ln1_b = Tensor({1, d});
    l.lnt_g = Tensor({1, d});
    l.lnt_b = Tensor({1, d});
    l.wq = Tensor({d, d});
    l.wk = Tensor({d, d});
    l.wv = Tensor({d, d});
    l.wo = Tensor({d, d});
    l.bo = Tensor({1, d});
    l.ln2_g = Tensor({1, d});
    l.ln2_b = Tensor({1, d});
    l.w1 = Tensor({d, hidden});
    l.b1 = Tensor({1, hidden});
    l.w2 = Tensor({hidden, d});
    l.b2 = Tensor({1, d});
  }
  w.lnf_g = Tensor({1, d});
  w.lnf_b = Tensor({1, d});
  w.out_w = Tensor({d, ch});
  w.out_b = Tensor({1, ch});
  return p;
}

ModelParams init_params(std::uint64_t seed, const ModelDims& dims) {
  ModelParams p = zero_params(dims);
  Rng rng(seed);
  p.w.visit([&](const std::string& name, Tensor& t) {
    const auto dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    const bool is_gain = leaf.size() > 2 && leaf.compare(leaf.size() - 2, 2, "_g") == 0;
    const bool is_bias = leaf.front() == 'b' || leaf.find("_b") != std::string::npos;
    if (is_gain) {
      t.fill(1.0);
    } else if (is_bias) {
      t.fill(0.0);
    } else {
      for (auto& v : t.data()) v = 0.02 * rng.normal();
    }
  });
  return p;
}

ModelVars bind_params(Tape& tape, const ModelParams& params, bool trainable) {
  ModelVars vars;
  vars.layers.resize(params.w.layers.size());
  std::vector<Var*> slots;
  vars.visit([&](const std::string&, Var& v) { slots.push_back(&v); });
  const auto tensors = params.tensors();
  for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = tape.borrow(*tensors[i], trainable);
  return vars;
}

std::vector<Var> flatten(ModelVars& vars) {
  std::vector<Var> out;
  vars.visit([&](const std::string&, Var& v) { out.push_back(v); });
  return out;
}

ModelVars unflatten(std::span<const Var> flat, std::size_t layers) {
  ModelVars vars;
  vars.layers.resize(layers);
  std::size_t i = 0;
  vars.visit([&](const std::string&, Var& v) {
    if (i >= flat.size()) throw DimensionError("unflatten: too few variables");
    v = flat[i++];
  });
  if (i != flat.size()) throw DimensionError("unflatten: too many variables");
  return vars;
}

Condition Condition::full(const Caption& caption) {
  return {caption.token_ids, std::vector<bool>(caption.size(), false)};
}

Condition Condition::all_null(const Caption& caption) {
  return {caption.token_ids, std::vector<bool>(caption.size(), true)};
}

Condition Condition::keep_only(const Caption& caption, const std::vector<bool>& keep) {
  if (keep.size() != caption.size()) throw DimensionError("keep mask length differs from caption length");
  Condition c{caption.token_ids, std::vector<bool>(caption.size())};
  for (std::size_t i = 0; i < keep.size(); ++i) c.null_flags[i] = !keep[i];
  return c;
}

std::vector<int> Condition::effective_ids(int null_id) const {
  std::vector<int> ids(token_ids);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i < null_flags.size() && null_flags[i]) ids[i] = null_id;
  }
  return ids;
}

Tensor time_features(double t, std::size_t d) {
  Tensor out({1, d});
  const std::size_t half = d / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    out[i] = std::sin(arg);
    out[half + i] = std::cos(arg);
  }
  return out;
}

ForwardGraph forward(const ModelVars& vars, const ModelDims& dims, Var x_t, double t, const Condition& cond,
                     bool keep_text_attention) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("forward: t=" + std::to_string(t) + " outside [0,1]");
  const std::size_t K = cond.size();
  if (K == 0) throw DimensionError("forward: empty condition");
  if (K > dims.k_max) throw DimensionError("forward: condition longer than k_max");
  if (cond.null_flags.size() != K) throw DimensionError("forward: null flags length differs from token count");
  if (x_t.shape() != dims.grid.shape()) {
    throw DimensionError("forward: x_t shape " + shape_str(x_t.shape()) + " expected " +
                         shape_str(dims.grid.shape()));
  }
  Tape& tape = x_t.tape();
  const std::size_t nv = dims.visual_tokens();
  const std::size_t dh = dims.d_head();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Var x = reshape(x_t, {nv, dims.grid.channels});
  Var h = add(add_row(matmul(x, vars.in_w), vars.in_b), vars.vis_pos);

  Var tf = tape.constant(time_features(t, dims.d_model));
  Var te = silu(add_row(matmul(tf, vars.t_w1), vars.t_b1));
  te = add_row(matmul(te, vars.t_w2), vars.t_b2);
  h = add_row(h, te);

  const std::vector<int> ids = cond.effective_ids(dims.null_id);
  Var text = gather_rows(vars.tok_emb, ids);
  if (dims.text_pos_enc) text = add(text, slice_rows(vars.text_pos, 0, K));

  ForwardGraph g;
  for (const auto& lw : vars.layers) {
    Var a = layer_norm(h, lw.ln1_g, lw.ln1_b);
    Var c = layer_norm(text, lw.lnt_g, lw.lnt_b);
    Var kv = concat_rows(a, c);
    Var q = scale(matmul(a, lw.wq), attn_scale);
    Var k = matmul(kv, lw.wk);
    Var v = matmul(kv, lw.wv);
    std::vector<Var> head_out;
    TextAttention ta;
    for (std::size_t hd = 0; hd < dims.heads; ++hd) {
      Var qh = slice_cols(q, hd * dh, dh);
      Var kh = slice_cols(k, hd * dh, dh);
      Var vh = slice_cols(v, hd * dh, dh);
      Var p = softmax_rows(matmul(qh, kh, false, true));
      head_out.push_back(matmul(p, vh));
      if (keep_text_attention) {
        ta.a_text.push_back(slice_cols(p, nv, K));
        ta.v_text.push_back(slice_rows(vh, nv, K));
      }
    }
    Var o = add_row(matmul(concat_cols(head_out), lw.wo), lw.bo);
    h = add(h, o);
    Var m = layer_norm(h, lw.ln2_g, lw.ln2_b);
    m = silu(add_row(matmul(m, lw.w1), lw.b1));
    m = add_row(matmul(m, lw.w2), lw.b2);
    h = add(h, m);
    if (keep_text_attention) g.layers.push_back(std::move(ta));
  }
  Var out = layer_norm(h, vars.lnf_g, vars.lnf_b);
  out = add_row(matmul(out, vars.out_w), vars.out_b);
  g.u = reshape(out, dims.grid.shape());
  return g;
}

AttnCapture capture_layer(const TextAttention& layer, std::size_t index, bool grad_tracked) {
  AttnCapture cap;
  cap.layer = index;
  cap.grad_tracked = grad_tracked;
  const std::size_t heads = layer.a_text.size();
  if (heads == 0) return cap;
  const std::size_t nq = layer.a_text[0].value().dim(0);
  const std::size_t k = layer.a_text[0].value().dim(1);
  const std::size_t dh = layer.v_text[0].value().dim(1);
  cap.a_text = Tensor({heads, nq, k});
  cap.v_text = Tensor({heads, k, dh});
  cap.a_out_text = Tensor({heads, nq, dh});
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor& a = layer.a_text[h].value();
    const Tensor& v = layer.v_text[h].value();
    const Tensor o = matmul(a, v);
    std::copy(a.data().begin(), a.data().end(), cap.a_text.data().begin() + static_cast<std::ptrdiff_t>(h * nq * k));
    std::copy(v.data().begin(), v.data().end(), cap.v_text.data().begin() + static_cast<std::ptrdiff_t>(h * k * dh));
    std::copy(o.data().begin(), o.data().end(),
              cap.a_out_text.data().begin() + static_cast<std::ptrdiff_t>(h * nq * dh));
  }
  return cap;
}

ForwardResult forward(const ModelParams& params, const Tensor& x_t, double t, const Condition& cond, bool capture) {
  Tape tape;
  Tape::NoGradScope no_grad(tape);
  const ModelVars vars = bind_params(tape, params, false);
  Var x = tape.borrow(x_t, false);
  ForwardGraph g = forward(vars, params.dims, x, t, cond, capture);
  ForwardResult r;
  r.u = g.u.value();
  for (std::size_t i = 0; i < g.layers.size(); ++i) r.captures.push_back(capture_layer(g.layers[i], i, false));
  return r;
}

}  // namespace darelab
