#include "darelab/dare/train.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "darelab/error.hpp"
#include "darelab/flow/flow.hpp"

namespace darelab {

std::string_view mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::baseline:
      return "baseline";
    case TrainMode::dr:
      return "dr";
    case TrainMode::sra:
      return "sra";
    case TrainMode::dare:
      return "dare";
  }
  return "baseline";
}

TrainMode parse_mode(std::string_view name) {
  for (TrainMode m : {TrainMode::baseline, TrainMode::dr, TrainMode::sra, TrainMode::dare}) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown mode '" + std::string(name) + "' (expected baseline, dr, sra or dare)");
}

ScheduleConfig TrainConfig::schedule() const {
  ScheduleConfig s;
  s.hbar = hbar.value_or(0.4 * static_cast<double>(total_iters));
  s.slope = slope;
  return s;
}

ModelDims TrainConfig::model_dims(const Vocab& vocab, const GridDims& grid) const {
  ModelDims d;
  d.vocab_size = vocab.size();
  d.null_id = vocab.null_id();
  d.d_model = d_model;
  d.heads = heads;
  d.layers = layers;
  d.mlp_ratio = mlp_ratio;
  d.k_max = k_max;
  d.text_pos_enc = text_pos_enc;
  d.grid = grid;
  d.validate();
  return d;
}

void TrainConfig::validate() const {
  if (total_iters == 0) throw ConfigError("total_iters must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(adam.max_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
  dr.validate();
  sra.validate();
  mask.validate();
  schedule().validate();
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

TrainConfig parse_train_config(std::string_view text) {
  TrainConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"mode", [&](auto&, auto& v) { c.mode = parse_mode(v); }},
      {"corpus", [&](auto&, auto& v) { c.corpus = v; }},
      {"total_iters", [&](auto& k, auto& v) { c.total_iters = to_uint(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.batch_size = to_uint(k, v); }},
      {"lr", [&](auto& k, auto& v) { c.lr = to_double(k, v); }},
      {"warmup_iters", [&](auto& k, auto& v) { c.warmup_iters = to_uint(k, v); }},
      {"clip_norm", [&](auto& k, auto& v) { c.adam.max_norm = to_double(k, v); }},
      {"adam_beta1", [&](auto& k, auto& v) { c.adam.beta1 = to_double(k, v); }},
      {"adam_beta2", [&](auto& k, auto& v) { c.adam.beta2 = to_double(k, v); }},
      {"adam_eps", [&](auto& k, auto& v) { c.adam.eps = to_double(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = to_uint(k, v); }},
      {"rho", [&](auto& k, auto& v) { c.dr.rho = to_double(k, v); }},
      {"pw_map_mode", [&](auto&, auto& v) { c.dr.pw_mode = parse_pw_mode(v); }},
      {"epsilon_std", [&](auto& k, auto& v) { c.sra.epsilon_std = to_double(k, v); }},
      {"hbar", [&](auto& k, auto& v) { c.hbar = to_double(k, v); }},
      {"slope", [&](auto& k, auto& v) { c.slope = to_double(k, v); }},
      {"kappa", [&](auto& k, auto& v) { c.mask.kappa = to_double(k, v); }},
      {"checkpoint_every", [&](auto& k, auto& v) { c.checkpoint_every = to_uint(k, v); }},
      {"log_every", [&](auto& k, auto& v) { c.log_every = to_uint(k, v); }},
      {"attribution_log", [&](auto& k, auto& v) { c.attribution_log = to_bool(k, v); }},
      {"d_model", [&](auto& k, auto& v) { c.d_model = to_uint(k, v); }},
      {"heads", [&](auto& k, auto& v) { c.heads = to_uint(k, v); }},
      {"layers", [&](auto& k, auto& v) { c.layers = to_uint(k, v); }},
      {"mlp_ratio", [&](auto& k, auto& v) { c.mlp_ratio = to_uint(k, v); }},
      {"k_max", [&](auto& k, auto& v) { c.k_max = to_uint(k, v); }},
      {"text_pos_enc", [&](auto& k, auto& v) { c.text_pos_enc = to_bool(k, v); }},
  };
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second(key, value);
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig c = parse_train_config(ss.str());
  if (!c.corpus.empty() && std::filesystem::path(c.corpus).is_relative()) {
    c.corpus = (path.parent_path() / c.corpus).string();
  }
  return c;
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "mode = " << mode_name(mode) << '\n'
     << "corpus = " << corpus << '\n'
     << "total_iters = " << total_iters << '\n'
     << "batch_size = " << batch_size << '\n'
     << "lr = " << fmt(lr) << '\n'
     << "warmup_iters = " << warmup_iters << '\n'
     << "clip_norm = " << fmt(adam.max_norm) << '\n'
     << "adam_beta1 = " << fmt(adam.beta1) << '\n'
     << "adam_beta2 = " << fmt(adam.beta2) << '\n'
     << "adam_eps = " << fmt(adam.eps) << '\n'
     << "seed = " << seed << '\n'
     << "rho = " << fmt(dr.rho) << '\n'
     << "pw_map_mode = " << pw_mode_name(dr.pw_mode) << '\n'
     << "epsilon_std = " << fmt(sra.epsilon_std) << '\n'
     << "hbar = " << fmt(schedule().hbar) << '\n'
     << "slope = " << fmt(slope) << '\n'
     << "kappa = " << fmt(mask.kappa) << '\n'
     << "checkpoint_every = " << checkpoint_every << '\n'
     << "log_every = " << log_every << '\n'
     << "attribution_log = " << (attribution_log ? "true" : "false") << '\n'
     << "d_model = " << d_model << '\n'
     << "heads = " << heads << '\n'
     << "layers = " << layers << '\n'
     << "mlp_ratio = " << mlp_ratio << '\n'
     << "k_max = " << k_max << '\n'
     << "text_pos_enc = " << (text_pos_enc ? "true" : "false") << '\n';
  return os.str();
}

std::string metrics_header() { return "iter,mode,alpha,lr,grad_norm,loss_total,loss_fm,loss_dr,loss_sra"; }

std::string metrics_row(const StepMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  std::ostringstream os;
  os << m.iter << ',' << mode_name(m.mode) << ',' << opt(m.alpha) << ',' << fmt(m.lr) << ',' << fmt(m.grad_norm) << ','
     << fmt(m.loss_total) << ',' << fmt(m.loss_fm) << ',' << opt(m.loss_dr) << ',' << opt(m.loss_sra);
  return os.str();
}

std::string attribution_header() { return "iter,sample,position,token_id,contribution_hex"; }

std::string attribution_row(const AttributionRecord& r) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), r.contribution, std::chars_format::hex);
  std::ostringstream os;
  os << r.iter << ',' << r.sample << ',' << r.position << ',' << r.token_id << ','
     << std::string(buf, res.ptr);
  return os.str();
}

TrainState init_train_state(const TrainConfig& cfg, const Corpus& corpus) {
  cfg.validate();
  if (corpus.vocab.size() == 0) throw ConfigError("corpus has no vocabulary header");
  TrainState s;
  s.cfg = cfg;
  s.params = init_params(cfg.seed, cfg.model_dims(corpus.vocab, corpus.dims));
  s.adam = AdamState::zeros_like(s.params.tensors());
  s.registry = Registry(corpus.vocab);
  return s;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t iter, std::size_t batch, std::size_t corpus_size) {
  if (corpus_size == 0) throw ConfigError("empty corpus");
  Rng rng = Rng::derive(seed, 2 * iter);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = static_cast<std::size_t>(rng.uniform_int(0, corpus_size - 1));
  return out;
}

namespace {

bool uses_dr(TrainMode m) { return m == TrainMode::dr || m == TrainMode::dare; }
bool uses_sra(TrainMode m) { return m == TrainMode::sra || m == TrainMode::dare; }

}  // namespace

StepMetrics train_step(TrainState& state, std::span<const Sample* const> batch, std::uint64_t iter,
                       const AttributionSink& sink) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  const TrainConfig& cfg = state.cfg;
  const ModelDims& dims = state.params.dims;
  const TrainMode mode = cfg.mode;
  StepMetrics m;
  m.iter = iter;
  m.mode = mode;
  m.lr = warmup_lr(cfg.lr, iter, cfg.warmup_iters);
  const double a = uses_sra(mode) ? alpha(static_cast<double>(iter), cfg.schedule()) : 0.0;
  if (uses_sra(mode)) m.alpha = a;

  std::vector<Tensor*> ptrs = state.params.tensors();
  std::vector<Tensor> grads;
  grads.reserve(ptrs.size());
  for (const Tensor* p : ptrs) grads.emplace_back(p->shape());

  Rng rng = Rng::derive(cfg.seed, 2 * iter + 1);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double sum_total = 0.0, sum_fm = 0.0, sum_dr = 0.0, sum_sra = 0.0;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sample& sample = *batch[b];
    if (sample.grid.shape() != dims.grid.shape()) throw DimensionError("train_step: sample grid shape differs from model");
    const double t = rng.uniform();
    Tensor eps = gaussian(rng, dims.grid.shape());
    const FlowPoint fp = make_flow_point(sample.grid, std::move(eps), t);
    const Condition cond = Condition::full(sample.caption);

    // Bookkeeping pass at t = 0 on the clean grid, no gradient.
    const ForwardResult clean = forward(state.params, fp.x, 0.0, cond, true);
    const std::vector<double> contrib = attribute_losses(clean.captures, fm_residual(clean.u, fp.v), cond, cfg.mask);
    if (sink) {
      for (std::size_t i = 0; i < cond.size(); ++i) {
        if (cond.token_ids[i] == dims.null_id) continue;
        sink({iter, b, i, cond.token_ids[i], contrib[i]});
      }
    }
    state.registry.update(cond, contrib);

    Tape tape;
    ModelVars vars = bind_params(tape, state.params, true);
    Var xt = tape.borrow(fp.x_t, false);
    const ForwardGraph live = forward(vars, dims, xt, t, cond, uses_sra(mode));
    Var l_fm = fm_loss(live.u, fp.v);
    sum_fm += l_fm.value().item();

    Var base = l_fm;
    if (uses_dr(mode)) {
      DrResult dr = dr_cfg_loss(state.params, live.u, fp, cond, state.registry, cfg.dr);
      if (dr.fallback) ++m.dr_fallbacks;
      sum_dr += dr.loss.value().item();
      base = dr.loss;
    }
    Var total = base;
    if (uses_sra(mode)) {
      SraResult sra = sra_loss(clean.captures, live, cond, state.registry, cfg.sra);
      if (sra.skipped) ++m.sra_skips;
      sum_sra += sra.loss.value().item();
      total = add(scale(sra.loss, a), scale(base, 1.0 - a));
    }
    const double tv = total.value().item();
    if (!std::isfinite(tv)) {
      throw NumericalError("non-finite loss at iter " + std::to_string(iter) + " mode " + std::string(mode_name(mode)) +
                           " sample " + std::to_string(b) + ": total=" + fmt(tv) + " fm=" + fmt(l_fm.value().item()));
    }
    sum_total += tv;
    tape.backward(total, inv_b);
    std::vector<Var> flat = flatten(vars);
    for (std::size_t i = 0; i < flat.size(); ++i) axpy(grads[i], tape.grad(flat[i]));
  }

  m.loss_total = sum_total * inv_b;
  m.loss_fm = sum_fm * inv_b;
  if (uses_dr(mode)) m.loss_dr = sum_dr * inv_b;
  if (uses_sra(mode)) m.loss_sra = sum_sra * inv_b;
  if (!std::isfinite(m.loss_total)) {
    throw NumericalError("non-finite loss at iter " + std::to_string(iter) + " mode " + std::string(mode_name(mode)));
  }
  try {
    m.grad_norm = adam_clip_update(ptrs, grads, state.adam, m.lr, cfg.adam);
  } catch (const NumericalError& e) {
    throw NumericalError("iter " + std::to_string(iter) + " mode " + std::string(mode_name(mode)) + " loss_total=" +
                         fmt(m.loss_total) + " loss_fm=" + fmt(m.loss_fm) + ": " + e.what());
  }
  state.step = iter;
  return m;
}

Checkpoint make_checkpoint(const TrainState& state) {
  Checkpoint ck;
  ck.params = state.params;
  ck.step = state.step;
  ck.vocab = state.registry.vocab();
  const auto names = const_cast<ModelParams&>(state.params).names();
  for (std::size_t i = 0; i < names.size(); ++i) ck.optimizer.push_back({"adam.m." + names[i], state.adam.m[i]});
  for (std::size_t i = 0; i < names.size(); ++i) ck.optimizer.push_back({"adam.v." + names[i], state.adam.v[i]});
  ck.optimizer.push_back({"adam.t", Tensor::scalar(static_cast<double>(state.adam.t))});
  return ck;
}

void save_train_state(const TrainState& state, const std::filesystem::path& dir) {
  save_checkpoint(dir, make_checkpoint(state));
  save_registry(state.registry, dir / "registry.json");
  std::ofstream out(dir / "config.txt", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "config.txt").string());
  out << state.cfg.to_text();
}

TrainState load_train_state(const TrainConfig& cfg, const Corpus& corpus, const std::filesystem::path& dir) {
  TrainState s = init_train_state(cfg, corpus);
  Checkpoint ck = load_checkpoint(dir);
  if (!(ck.params.dims == s.params.dims)) throw IntegrityError("checkpoint dims differ from the training config");
  if (ck.vocab.size() > 0 && !(ck.vocab == corpus.vocab)) throw IntegrityError("checkpoint vocab differs from corpus");
  s.params = std::move(ck.params);
  s.step = ck.step;
  const auto names = s.params.names();
  std::map<std::string, Tensor> opt;
  for (auto& nt : ck.optimizer) opt.emplace(nt.name, std::move(nt.value));
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto mi = opt.find("adam.m." + names[i]);
    auto vi = opt.find("adam.v." + names[i]);
    if (mi == opt.end() || vi == opt.end()) throw IntegrityError("checkpoint lacks optimizer state for " + names[i]);
    if (mi->second.shape() != s.params.tensors()[i]->shape() || vi->second.shape() != mi->second.shape()) {
      throw IntegrityError("optimizer state shape differs for " + names[i]);
    }
    s.adam.m[i] = mi->second;
    s.adam.v[i] = vi->second;
  }
  auto ti = opt.find("adam.t");
  if (ti == opt.end()) throw IntegrityError("checkpoint lacks adam.t");
  s.adam.t = static_cast<std::uint64_t>(ti->second.item());
  s.registry = load_registry(dir / "registry.json", corpus.vocab);
  return s;
}

namespace {

// Keeps the header and rows with iter <= step.
void truncate_metrics(const std::filesystem::path& path, std::uint64_t step) {
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    const auto comma = line.find(',');
    std::uint64_t it = 0;
    std::from_chars(line.data(), line.data() + (comma == std::string::npos ? line.size() : comma), it);
    if (it <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << metrics_header() << '\n';
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

TrainState run_training(const TrainConfig& cfg, const Corpus& corpus, const TrainRunOptions& opts) {
  namespace fs = std::filesystem;
  if (corpus.samples.empty()) throw ConfigError("corpus has no samples");
  std::error_code ec;
  fs::create_directories(opts.out_dir, ec);
  if (ec) throw IoError("cannot create " + opts.out_dir.string() + ": " + ec.message());

  TrainState state = opts.resume_from ? load_train_state(cfg, corpus, *opts.resume_from) : init_train_state(cfg, corpus);
  if (state.step > cfg.total_iters) throw ConfigError("checkpoint step is past total_iters");

  const fs::path metrics_path = opts.out_dir / "metrics.csv";
  const fs::path attr_path = opts.out_dir / "attribution.csv";
  std::ios::openmode mode = std::ios::trunc;
  if (opts.resume_from) {
    truncate_metrics(metrics_path, state.step);
    mode = std::ios::app;
  }
  std::ofstream metrics(metrics_path, mode);
  if (!metrics) throw IoError("cannot write " + metrics_path.string());
  if (!opts.resume_from) metrics << metrics_header() << '\n';

  std::ofstream attr;
  AttributionSink sink;
  if (cfg.attribution_log) {
    attr.open(attr_path, opts.resume_from ? std::ios::app : std::ios::trunc);
    if (!attr) throw IoError("cannot write " + attr_path.string());
    if (!opts.resume_from) attr << attribution_header() << '\n';
    sink = [&attr](const AttributionRecord& r) { attr << attribution_row(r) << '\n'; };
  }
  {
    std::ofstream c(opts.out_dir / "config.txt", std::ios::trunc);
    c << cfg.to_text();
  }

  std::vector<const Sample*> batch(cfg.batch_size);
  for (std::uint64_t iter = state.step + 1; iter <= cfg.total_iters; ++iter) {
    const auto idx = batch_indices(cfg.seed, iter, cfg.batch_size, corpus.samples.size());
    for (std::size_t b = 0; b < idx.size(); ++b) batch[b] = &corpus.samples[idx[b]];
    const StepMetrics m = train_step(state, batch, iter, sink);
    metrics << metrics_row(m) << '\n';
    if (opts.progress && cfg.log_every > 0 && iter % cfg.log_every == 0) {
      *opts.progress << "iter " << iter << '/' << cfg.total_iters << ' ' << metrics_row(m) << std::endl;
    }
    if (iter % cfg.checkpoint_every == 0 && iter != cfg.total_iters) {
      metrics.flush();
      if (attr.is_open()) attr.flush();
      save_train_state(state, opts.out_dir / "checkpoints" / ("step_" + std::to_string(iter)));
    }
  }
  metrics.flush();
  if (!metrics) throw IoError("failed writing " + metrics_path.string());
  save_train_state(state, opts.out_dir / "final");
  save_registry(state.registry, opts.out_dir / "registry.json");
  return state;
}

}  // namespace darelab
