#include "darelab/cli/commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "darelab/dare/train.hpp"
#include "darelab/error.hpp"
#include "darelab/flow/flow.hpp"
#include "darelab/model/checkpoint.hpp"
#include "darelab/registry/registry.hpp"

namespace darelab {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const IntegrityError*>(&e) || dynamic_cast<const UnsupportedVersionError*>(&e)) {
    return kExitIo;
  }
  if (dynamic_cast<const Error*>(&e)) return kExitUsage;
  return kExitIo;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << bytes;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Checkpoint load_model(const fs::path& dir) {
  Checkpoint ck = load_checkpoint(dir);
  if (ck.vocab.size() == 0) throw IntegrityError("checkpoint " + dir.string() + " carries no vocabulary");
  return ck;
}

}  // namespace

void cmd_gen_corpus(const GenCorpusOptions& opts, std::ostream& log) {
  if (opts.size == 0) throw UsageError("--size must be at least 1");
  if (!(opts.zipf_s > 0.0)) throw UsageError("--zipf-s must be positive");
  if (!(opts.noise >= 0.0)) throw UsageError("--noise must be non-negative");
  Corpus c;
  c.vocab = build_vocab(VocabConfig{});
  c.has_header = true;
  CaptionConfig cc;
  cc.zipf_s = opts.zipf_s;
  c.samples = generate_samples(c.vocab, opts.size, opts.seed, cc, opts.noise, c.dims);
  write_corpus(opts.out, c);

  std::vector<std::uint64_t> counts(c.vocab.size(), 0);
  for (const auto& s : c.samples) {
    for (int id : s.caption.token_ids) ++counts[static_cast<std::size_t>(id)];
  }
  std::uint64_t min_filler = UINT64_MAX, max_content = 0;
  log << "wrote " << c.samples.size() << " samples to " << opts.out.string() << "\n";
  log << "token frequencies:\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const Role r = c.vocab.role(static_cast<int>(i));
    if (r == Role::null) continue;
    log << "  " << c.vocab.str(static_cast<int>(i)) << " (" << role_name(r) << "): " << counts[i] << "\n";
    if (r == Role::filler) min_filler = std::min(min_filler, counts[i]);
    if (is_content(r)) max_content = std::max(max_content, counts[i]);
  }
  log << "min filler count " << min_filler << ", max content count " << max_content
      << (min_filler > max_content ? " (long-tailed)" : "") << "\n";
}

void cmd_train(const TrainOptions& opts, std::ostream& log) {
  TrainConfig cfg = load_train_config(opts.config);
  if (opts.mode) cfg.mode = parse_mode(*opts.mode);
  if (cfg.corpus.empty()) throw ConfigError("config does not name a corpus");
  if (!fs::exists(cfg.corpus)) throw IoError("corpus not found: " + cfg.corpus);
  const Corpus corpus = read_corpus(cfg.corpus);
  TrainRunOptions run;
  run.out_dir = opts.out;
  run.resume_from = opts.resume;
  run.progress = &log;
  const TrainState st = run_training(cfg, corpus, run);
  log << "trained " << mode_name(cfg.mode) << " to step " << st.step << "; outputs in " << opts.out.string() << "\n";
}

std::string encode_ppm(const Tensor& grid, std::size_t frame) {
  if (grid.rank() != 4 || grid.dim(3) < 3) throw DimensionError("encode_ppm needs a frames x height x width x >=3 grid");
  if (frame >= grid.dim(0)) throw IndexError("frame " + std::to_string(frame) + " out of range");
  const std::size_t h = grid.dim(1), w = grid.dim(2), d = grid.dim(3);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      for (std::size_t k = 0; k < 3; ++k) {
        const double v = std::clamp(grid[((frame * h + r) * w + c) * d + k], 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

PpmImage decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P6" || maxval != 255) throw ParseError("not a P6 image with maxval 255");
  in.get();
  PpmImage img{w, h, std::vector<std::uint8_t>(w * h * 3)};
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!in) throw ParseError("PPM pixel data truncated");
  return img;
}

void cmd_sample(const SampleOptions& opts, std::ostream& log) {
  if (opts.steps == 0) throw UsageError("--steps must be at least 1");
  const Checkpoint ck = load_model(opts.ckpt);
  Caption caption;
  try {
    caption = parse_caption(ck.vocab, opts.prompt);
  } catch (const ParseError& e) {
    throw UsageError(e.what());
  }
  if (caption.size() == 0) throw UsageError("empty prompt");
  if (caption.size() > ck.params.dims.k_max) throw UsageError("prompt longer than the model's k_max");
  SamplerConfig sc{opts.steps, opts.cfg_scale, opts.seed};
  const Tensor grid = euler_sample(ck.params, caption, sc);

  ensure_dir(opts.out);
  std::string raw(grid.size() * 8, '\0');
  static_assert(std::endian::native == std::endian::little, "grid.bin writer assumes a little-endian host");
  std::memcpy(raw.data(), grid.data().data(), raw.size());
  write_file(opts.out / "grid.bin", raw);
  for (std::size_t f = 0; f < grid.dim(0); ++f) {
    write_file(opts.out / ("frame_" + std::to_string(f) + ".ppm"), encode_ppm(grid, f));
  }
  const nlohmann::json run = {{"prompt", opts.prompt},     {"tokens", caption.token_ids},
                              {"steps", opts.steps},       {"cfg_scale", opts.cfg_scale},
                              {"seed", opts.seed},         {"ckpt", opts.ckpt.string()},
                              {"shape", grid.shape()},     {"checkpoint_step", ck.step}};
  write_file(opts.out / "run.json", run.dump(1) + "\n");
  const SemanticCheck chk = semantic_check(grid, ck.vocab, caption);
  log << "sampled '" << caption.text << "' (" << opts.steps << " steps, cfg " << opts.cfg_scale << ") -> "
      << opts.out.string() << "; color " << chk.color_ok << " position " << chk.position_ok << " motion "
      << chk.motion_ok << "\n";
}

EvalReport evaluate(const ModelParams& params, const Vocab& vocab, std::size_t n, std::uint64_t seed, std::size_t steps,
                    double cfg_scale) {
  if (n == 0) throw UsageError("--n must be at least 1");
  EvalReport r;
  r.n = n;
  Rng rng(seed);
  CaptionConfig cc;
  cc.k_max = params.dims.k_max;
  std::size_t c = 0, p = 0, m = 0, a = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Caption cap = sample_caption(rng, vocab, cc);
    SamplerConfig sc{steps, cfg_scale, mix64(seed ^ (0x9E3779B97F4A7C15ULL * (i + 1)))};
    const Tensor grid = euler_sample(params, cap, sc);
    const SemanticCheck chk = semantic_check(grid, vocab, cap);
    c += chk.color_ok;
    p += chk.position_ok;
    m += chk.motion_ok;
    a += chk.all();
    r.captions.push_back(cap.text);
    r.checks.push_back(chk);
  }
  const double dn = static_cast<double>(n);
  r.color = static_cast<double>(c) / dn;
  r.position = static_cast<double>(p) / dn;
  r.motion = static_cast<double>(m) / dn;
  r.all = static_cast<double>(a) / dn;
  return r;
}

EvalReport cmd_eval(const EvalOptions& opts, std::ostream& log) {
  if (opts.n == 0) throw UsageError("--n must be at least 1");
  if (opts.steps == 0) throw UsageError("--steps must be at least 1");
  const Checkpoint ck = load_model(opts.ckpt);
  EvalReport r = evaluate(ck.params, ck.vocab, opts.n, opts.seed, opts.steps, opts.cfg_scale);
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < r.n; ++i) {
    per.push_back({{"caption", r.captions[i]},
                   {"color", r.checks[i].color_ok},
                   {"position", r.checks[i].position_ok},
                   {"motion", r.checks[i].motion_ok}});
  }
  const nlohmann::json doc = {{"n", r.n},         {"color", r.color}, {"position", r.position}, {"motion", r.motion},
                              {"all", r.all},     {"seed", opts.seed}, {"steps", opts.steps},
                              {"cfg_scale", opts.cfg_scale}, {"per_caption", per}};
  const fs::path out = opts.out.empty() ? opts.ckpt / "eval.json" : opts.out;
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_file(out, doc.dump(1) + "\n");
  log << "n=" << r.n << " color=" << r.color << " position=" << r.position << " motion=" << r.motion
      << " all=" << r.all << "\n";
  return r;
}

double attention_score(const ModelParams& params, const Caption& caption, const Tensor& grid, std::size_t token_index,
                       double t_probe) {
  if (token_index >= caption.size()) {
    throw IndexError("token index " + std::to_string(token_index) + " out of range for caption of " +
                     std::to_string(caption.size()));
  }
  const ForwardResult r = forward(params, grid, t_probe, Condition::full(caption), true);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& cap : r.captures) {
    const Tensor& a = cap.a_text;
    const std::size_t k = a.dim(2);
    const std::size_t rows = a.dim(0) * a.dim(1);
    for (std::size_t i = 0; i < rows; ++i) total += a[i * k + token_index];
    count += rows;
  }
  return 100.0 * total / static_cast<double>(count);
}

void summarize(AnalysisReport& report) {
  report.fraction_improved = report.mean_delta = report.mean_score_a = report.mean_score_b = 0.0;
  if (report.rows.empty()) return;
  std::size_t improved = 0;
  for (const auto& r : report.rows) {
    improved += r.delta > 0.0;
    report.mean_delta += r.delta;
    report.mean_score_a += r.score_a;
    report.mean_score_b += r.score_b;
  }
  const double n = static_cast<double>(report.rows.size());
  report.fraction_improved = static_cast<double>(improved) / n;
  report.mean_delta /= n;
  report.mean_score_a /= n;
  report.mean_score_b /= n;
}

void write_report_csv(const AnalysisReport& report, const fs::path& path) {
  std::ostringstream os;
  os << "token,role,count,weight,score_a,score_b,delta\n";
  for (const auto& r : report.rows) {
    os << r.token << ',' << r.role << ',' << r.count << ',' << (r.weight ? fmt(*r.weight) : std::string()) << ','
       << fmt(r.score_a) << ',' << fmt(r.score_b) << ',' << fmt(r.delta) << '\n';
  }
  // Summary: count holds the row count and weight holds fraction_improved.
  os << "SUMMARY,," << report.rows.size() << ',' << fmt(report.fraction_improved) << ',' << fmt(report.mean_score_a)
     << ',' << fmt(report.mean_score_b) << ',' << fmt(report.mean_delta) << '\n';
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  write_file(path, os.str());
}

AnalysisReport read_report_csv(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "token,role,count,weight,score_a,score_b,delta") throw ParseError(path.string() + ": unexpected header");
  AnalysisReport rep;
  auto num = [&](const std::string& s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc()) throw ParseError(path.string() + ": bad number '" + s + "'");
    return v;
  };
  bool summary = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    while (f.size() < 7) f.emplace_back();
    if (f[0] == "SUMMARY") {
      rep.fraction_improved = num(f[3]);
      rep.mean_score_a = num(f[4]);
      rep.mean_score_b = num(f[5]);
      rep.mean_delta = num(f[6]);
      summary = true;
      continue;
    }
    AnalysisRow r;
    r.token = f[0];
    r.role = f[1];
    r.count = static_cast<std::uint64_t>(num(f[2]));
    if (!f[3].empty()) r.weight = num(f[3]);
    r.score_a = num(f[4]);
    r.score_b = num(f[5]);
    r.delta = num(f[6]);
    rep.rows.push_back(r);
  }
  if (!summary) throw ParseError(path.string() + ": missing SUMMARY row");
  return rep;
}

Tensor embedding_similarity(const ModelParams& params) {
  const Tensor& e = params.w.tok_emb;
  const std::size_t v = e.dim(0), d = e.dim(1);
  std::vector<double> norms(v);
  for (std::size_t i = 0; i < v; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += e.at(i, k) * e.at(i, k);
    norms[i] = std::sqrt(s);
  }
  Tensor out({v, v});
  for (std::size_t i = 0; i < v; ++i) {
    for (std::size_t j = 0; j < v; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += e.at(i, k) * e.at(j, k);
      const double den = norms[i] * norms[j];
      out.at(i, j) = den > 0.0 ? dot / den : (i == j ? 1.0 : 0.0);
    }
  }
  return out;
}

AnalysisReport cmd_analyze(const AnalyzeOptions& opts, std::ostream& log) {
  if (opts.samples_per_token == 0) throw UsageError("--samples must be at least 1");
  const Checkpoint a = load_model(opts.ckpt_a);
  const Checkpoint b = load_model(opts.ckpt_b);
  if (!(a.vocab == b.vocab)) throw ConfigError("checkpoints do not share a vocabulary");
  const Corpus corpus = read_corpus(opts.corpus);
  if (corpus.has_header && !(corpus.vocab == b.vocab)) throw ConfigError("corpus vocabulary differs from the checkpoints");
  const Vocab& vocab = b.vocab;

  std::optional<Registry> reg;
  if (fs::exists(opts.ckpt_b / "registry.json")) reg = load_registry(opts.ckpt_b / "registry.json", vocab);

  AnalysisReport rep;
  for (int id = 0; id < static_cast<int>(vocab.size()); ++id) {
    const Role role = vocab.role(id);
    if (role == Role::null) continue;
    if (!opts.all_tokens && !is_content(role)) continue;
    AnalysisRow row;
    row.token = vocab.str(id);
    row.role = std::string(role_name(role));
    if (reg) {
      const TokenStats& st = reg->stats(id);
      row.count = st.count;
      if (st.count > 0) row.weight = weight(st);
    }
    std::size_t used = 0;
    double sa = 0.0, sb = 0.0;
    for (const auto& s : corpus.samples) {
      if (used == opts.samples_per_token) break;
      const auto it = std::find(s.caption.token_ids.begin(), s.caption.token_ids.end(), id);
      if (it == s.caption.token_ids.end()) continue;
      const auto pos = static_cast<std::size_t>(it - s.caption.token_ids.begin());
      Rng unused(0);
      const Tensor clean = render(vocab, s.caption, unused, 0.0, a.params.dims.grid);
      sa += attention_score(a.params, s.caption, clean, pos);
      sb += attention_score(b.params, s.caption, clean, pos);
      ++used;
    }
    if (used == 0) {
      log << "note: no corpus sample contains '" << row.token << "', skipped\n";
      continue;
    }
    row.score_a = sa / static_cast<double>(used);
    row.score_b = sb / static_cast<double>(used);
    row.delta = row.score_b - row.score_a;
    rep.rows.push_back(row);
  }
  summarize(rep);
  write_report_csv(rep, opts.out);
  if (opts.embeddings) {
    const Tensor sim = embedding_similarity(b.params);
    std::ostringstream os;
    os << "token";
    for (const auto& t : vocab.tokens()) os << ',' << t;
    os << '\n';
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      os << vocab.str(static_cast<int>(i));
      for (std::size_t j = 0; j < vocab.size(); ++j) os << ',' << fmt(sim.at(i, j));
      os << '\n';
    }
    if (opts.embeddings->has_parent_path()) ensure_dir(opts.embeddings->parent_path());
    write_file(*opts.embeddings, os.str());
  }
  log << "tokens=" << rep.rows.size() << " fraction_improved=" << rep.fraction_improved
      << " mean_delta=" << rep.mean_delta << " mean_score_a=" << rep.mean_score_a
      << " mean_score_b=" << rep.mean_score_b << "\n";
  return rep;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"DARE flow-matching lab: corpus generation, training, sampling, evaluation and attention analysis"};
  app.require_subcommand(1);

  GenCorpusOptions gen;
  auto* g = app.add_subcommand("gen-corpus", "Generate a synthetic caption/grid corpus");
  g->add_option("--size", gen.size, "Number of samples")->required();
  g->add_option("--zipf-s", gen.zipf_s, "Zipf exponent over filler ranks")->capture_default_str();
  g->add_option("--seed", gen.seed, "Seed")->capture_default_str();
  g->add_option("--noise", gen.noise, "Gaussian noise sigma")->capture_default_str();
  g->add_option("--out", gen.out, "Output corpus file")->required();

  TrainOptions tr;
  std::string resume;
  std::string mode;
  auto* t = app.add_subcommand("train", "Train a denoiser");
  t->add_option("--config", tr.config, "key = value config file")->required();
  t->add_option("--mode", mode, "baseline | dr | sra | dare (overrides the config)");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--resume", resume, "Checkpoint directory to resume from");

  SampleOptions sa;
  auto* s = app.add_subcommand("sample", "Generate a grid for a prompt");
  s->add_option("--ckpt", sa.ckpt, "Checkpoint directory")->required();
  s->add_option("--prompt", sa.prompt, "Whitespace separated tokens")->required();
  s->add_option("--steps", sa.steps, "Euler steps")->capture_default_str();
  s->add_option("--cfg-scale", sa.cfg_scale, "Guidance scale")->capture_default_str();
  s->add_option("--seed", sa.seed, "Noise seed")->capture_default_str();
  s->add_option("--out", sa.out, "Output directory")->required();

  EvalOptions ev;
  std::string eval_out;
  auto* e = app.add_subcommand("eval", "Semantic pass rates on random captions");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
  e->add_option("--n", ev.n, "Number of captions")->capture_default_str();
  e->add_option("--seed", ev.seed, "Seed")->capture_default_str();
  e->add_option("--steps", ev.steps, "Euler steps")->capture_default_str();
  e->add_option("--cfg-scale", ev.cfg_scale, "Guidance scale")->capture_default_str();
  e->add_option("--out", eval_out, "eval.json path (default <ckpt>/eval.json)");

  AnalyzeOptions an;
  std::string emb;
  auto* a = app.add_subcommand("analyze", "Compare token attention scores of two checkpoints");
  a->add_option("--ckpt-a", an.ckpt_a, "Reference checkpoint")->required();
  a->add_option("--ckpt-b", an.ckpt_b, "Compared checkpoint")->required();
  a->add_option("--corpus", an.corpus, "Corpus file")->required();
  a->add_option("--out", an.out, "report.csv path")->required();
  a->add_option("--embeddings", emb, "Also write the token embedding cosine matrix here");
  a->add_option("--samples", an.samples_per_token, "Corpus samples per token")->capture_default_str();
  a->add_flag("--all-tokens", an.all_tokens, "Include filler tokens");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g->parsed()) {
      cmd_gen_corpus(gen, out);
    } else if (t->parsed()) {
      if (!mode.empty()) tr.mode = mode;
      if (!resume.empty()) tr.resume = resume;
      cmd_train(tr, out);
    } else if (s->parsed()) {
      cmd_sample(sa, out);
    } else if (e->parsed()) {
      if (!eval_out.empty()) ev.out = eval_out;
      cmd_eval(ev, out);
    } else if (a->parsed()) {
      if (!emb.empty()) an.embeddings = emb;
      cmd_analyze(an, out);
    }
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return exit_code_for(ex);
  }
  return kExitOk;
}

}  // namespace darelab
