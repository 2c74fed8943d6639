// Single command-line entry point for the layered AMR parsing toolkit:
//   convert  PENMAN corpora <-> variable-free form files <-> marker strings
//   mask     dump the structural attention mask of one form record
//   train    fit the toy encoder-decoder on a parallel corpus
//   decode   constrained beam search from a checkpoint
//   eval     exact graph-overlap score of predictions against gold
//   fuzz     randomized property suites with reproducer seeds
//
// Exit codes: 0 success, 1 data error, 2 configuration error,
// 3 property violation. CHAFORM_LOG={0,1,2} controls stderr verbosity.

#include <CLI11.hpp>

#include <chaform/beam_decode.hpp>
#include <chaform/smatch.hpp>
#include <chaform/train.hpp>
#include <chaform/train_data.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace chaform;

int log_level() {
  static int lvl = [] {
    const char* v = std::getenv("CHAFORM_LOG");
    return v ? std::atoi(v) : 0;
  }();
  return lvl;
}

void logmsg(int lvl, const std::string& msg) {
  if (log_level() >= lvl) std::cerr << "[chaform] " << msg << "\n";
}

std::ifstream open_in(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open input file: " + path);
  return f;
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream f(path, mode);
  if (!f) throw std::runtime_error("cannot open output file: " + path);
  return f;
}

// ---- convert ----

struct ConvertOpts {
  std::string in, out, direction = "to-form", kind = "single";
  bool strict = false;
};

int cmd_convert(const ConvertOpts& o) {
  std::ifstream in = open_in(o.in);
  std::ostringstream buf;
  int errors = 0;
  auto diag = [&](int line, const std::string& msg) {
    std::cerr << o.in << ":" << line << ": " << msg << "\n";
    ++errors;
  };
  const FormKind kind = form_kind_from_string(o.kind);

  if (o.direction == "to-form") {
    for (const CorpusRecord& rec : read_corpus(in)) {
      try {
        AmrGraph g = record_graph(rec);
        TargetForm f = linearize(g, kind);
        buf << form_to_json(f).dump() << '\n';
      } catch (const std::exception& e) {
        diag(rec.line, e.what());
        if (o.strict) return 1;
      }
    }
  } else {
    // line-oriented form input for to-penman / to-marker
    std::string line;
    std::vector<CorpusRecord> out_records;
    int ln = 0;
    while (std::getline(in, line)) {
      ++ln;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        TargetForm f = form_from_json(nlohmann::json::parse(line));
        if (o.direction == "to-penman") {
          CorpusRecord r;
          r.penman = serialize_penman(delinearize(f));
          out_records.push_back(std::move(r));
        } else {  // to-marker
          buf << to_marker_string(f) << '\n';
        }
      } catch (const std::exception& e) {
        diag(ln, e.what());
        if (o.strict) return 1;
      }
    }
    if (o.direction == "to-penman") write_corpus(buf, out_records);
  }

  std::ofstream out = open_out(o.out);
  out << buf.str();
  logmsg(1, "convert " + o.direction + ": wrote " + o.out +
                (errors ? " with " + std::to_string(errors) + " record error(s)" : ""));
  return errors ? 1 : 0;
}

// ---- mask ----

struct MaskOpts {
  std::string in, variant = "standard", pgm;
  int index = 0;
};

int cmd_mask(const MaskOpts& o) {
  std::ifstream in = open_in(o.in);
  std::vector<TargetForm> forms = read_forms(in);
  if (o.index < 0 || o.index >= static_cast<int>(forms.size()))
    throw std::runtime_error("record index " + std::to_string(o.index) + " out of range (file has " +
                             std::to_string(forms.size()) + " records)");
  const TargetForm& f = forms[static_cast<std::size_t>(o.index)];
  ChaMask m = build_mask(f, mask_variant_from_string(o.variant));
  std::cout << ascii_grid(m);
  if (!o.pgm.empty()) {
    std::ofstream p = open_out(o.pgm, std::ios::binary);
    write_pgm(m, p);
    logmsg(1, "mask: wrote " + o.pgm);
  }
  return 0;
}

// ---- shared config plumbing ----

template <typename T>
void maybe_set(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void apply_model_json(const nlohmann::json& j, ModelConfig& cfg) {
  maybe_set(j, "d_model", cfg.d_model);
  maybe_set(j, "n_layers", cfg.n_layers);
  maybe_set(j, "n_heads", cfg.n_heads);
  maybe_set(j, "ffn_dim", cfg.ffn_dim);
  maybe_set(j, "max_len", cfg.max_len);
  maybe_set(j, "adapter_dim", cfg.adapter_dim);
  maybe_set(j, "adapter_heads", cfg.adapter_heads);
  maybe_set(j, "inplace_heads", cfg.inplace_heads);
  maybe_set(j, "pointer_heads", cfg.pointer_heads);
  maybe_set(j, "pointer_alpha", cfg.pointer_alpha);
  maybe_set(j, "adapter_full_causal", cfg.adapter_full_causal);
  if (j.contains("placement")) cfg.placement = placement_from_string(j.at("placement").get<std::string>());
  if (j.contains("kind")) cfg.kind = form_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("mask_variant"))
    cfg.mask_variant = mask_variant_from_string(j.at("mask_variant").get<std::string>());
}

void apply_train_json(const nlohmann::json& j, TrainConfig& tc) {
  maybe_set(j, "steps", tc.steps);
  maybe_set(j, "batch_size", tc.batch_size);
  maybe_set(j, "lr", tc.lr);
  maybe_set(j, "warmup", tc.warmup);
  maybe_set(j, "weight_decay", tc.weight_decay);
  maybe_set(j, "seed", tc.seed);
  maybe_set(j, "early_stop", tc.early_stop);
  maybe_set(j, "check_every", tc.check_every);
}

// ---- train ----

struct TrainOpts {
  std::string corpus, checkpoint, trace, config;
  std::string kind = "single", placement = "parallel", variant = "standard";
  int d_model = -1, layers = -1, heads = -1, ffn_dim = -1, max_len = -1;
  int adapter_dim = -1, adapter_heads = -1, inplace_heads = -1, pointer_heads = -1;
  double alpha = -1;
  int steps = -1, batch = -1, warmup = -1, check_every = -1;
  double lr = -1, weight_decay = -1;
  std::uint64_t seed = 0;
  bool no_early_stop = false;
  CLI::App* sub = nullptr;  // to test which flags were given
};

int cmd_train(const TrainOpts& o) {
  ModelConfig cfg;
  TrainConfig tc;
  if (!o.config.empty()) {
    std::ifstream cf = open_in(o.config);
    nlohmann::json j = nlohmann::json::parse(cf);
    if (j.contains("model")) apply_model_json(j.at("model"), cfg);
    if (j.contains("train")) apply_train_json(j.at("train"), tc);
  }
  auto given = [&](const std::string& flag) { return o.sub->count(flag) > 0; };
  if (given("--kind")) cfg.kind = form_kind_from_string(o.kind);
  if (given("--placement")) cfg.placement = placement_from_string(o.placement);
  if (given("--variant")) cfg.mask_variant = mask_variant_from_string(o.variant);
  if (given("--d-model")) cfg.d_model = o.d_model;
  if (given("--layers")) cfg.n_layers = o.layers;
  if (given("--heads")) cfg.n_heads = o.heads;
  if (given("--ffn-dim")) cfg.ffn_dim = o.ffn_dim;
  if (given("--max-len")) cfg.max_len = o.max_len;
  if (given("--adapter-dim")) cfg.adapter_dim = o.adapter_dim;
  if (given("--adapter-heads")) cfg.adapter_heads = o.adapter_heads;
  if (given("--inplace-heads")) cfg.inplace_heads = o.inplace_heads;
  if (given("--pointer-heads")) cfg.pointer_heads = o.pointer_heads;
  if (given("--alpha")) cfg.pointer_alpha = o.alpha;
  if (given("--steps")) tc.steps = o.steps;
  if (given("--batch")) tc.batch_size = o.batch;
  if (given("--lr")) tc.lr = o.lr;
  if (given("--warmup")) tc.warmup = o.warmup;
  if (given("--weight-decay")) tc.weight_decay = o.weight_decay;
  if (given("--check-every")) tc.check_every = o.check_every;
  if (given("--seed")) tc.seed = o.seed;
  if (o.no_early_stop) tc.early_stop = false;

  std::ifstream in = open_in(o.corpus);
  std::vector<ParallelExample> data = load_parallel_corpus(in, cfg.kind);
  if (data.empty()) throw std::runtime_error("training corpus is empty: " + o.corpus);

  std::vector<std::vector<std::string>> sources;
  std::vector<TargetForm> forms;
  for (const auto& ex : data) {
    sources.push_back(ex.source);
    forms.push_back(ex.form);
  }
  Vocab vocab = Vocab::build(sources, forms);
  cfg.validate();  // fail before the heavy work; Model validates again
  Model model(cfg, vocab, tc.seed);
  std::vector<EncodedExample> encoded;
  for (std::size_t i = 0; i < data.size(); ++i)
    encoded.push_back(build_example(vocab, model.cfg, sources[i], forms[i]));

  logmsg(1, "train: " + std::to_string(encoded.size()) + " examples, vocab " +
                std::to_string(vocab.size()) + ", d_model " + std::to_string(model.cfg.d_model));
  std::ostream* log = log_level() >= 2 ? &std::cerr : nullptr;
  TrainResult r = train_model(model, encoded, tc, log);

  save_checkpoint(model, o.checkpoint);
  if (!o.trace.empty()) write_trace(o.trace, r.trace);
  std::cout << "steps " << r.steps_run << (r.early_stopped ? " (early stop)" : "") << ", accuracy "
            << r.final_accuracy.overall() << ", checkpoint " << o.checkpoint << "\n";
  return 0;
}

// ---- decode ----

struct DecodeOpts {
  std::string checkpoint, in, out;
  int beam = 1, max_tokens = 0;
};

int cmd_decode(const DecodeOpts& o) {
  Model model = load_checkpoint(o.checkpoint);
  std::ifstream in = open_in(o.in);
  std::vector<CorpusRecord> records = read_corpus(in);
  std::vector<CorpusRecord> out_records;
  int errors = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const CorpusRecord& rec = records[i];
    CorpusRecord pr;
    if (auto it = rec.meta.find("id"); it != rec.meta.end()) pr.meta["id"] = it->second;
    auto snt = rec.meta.find("snt");
    if (snt == rec.meta.end()) {
      std::cerr << o.in << ":" << rec.line << ": record has no ::snt metadata\n";
      ++errors;
      continue;
    }
    pr.meta["snt"] = snt->second;
    try {
      DecodeResult r = beam_decode(model, split_words(snt->second), {o.beam, o.max_tokens});
      if (r.complete) {
        pr.penman = serialize_penman(delinearize(r.forms[0].form));
      } else {
        pr.penman = "( n0 / amr-empty )";
        pr.meta["status"] = "partial";
        logmsg(1, "decode: record " + std::to_string(i) + " did not complete; emitting placeholder");
      }
    } catch (const std::exception& e) {
      std::cerr << o.in << ":" << rec.line << ": " << e.what() << "\n";
      pr.penman = "( n0 / amr-empty )";
      pr.meta["status"] = "error";
      ++errors;
    }
    out_records.push_back(std::move(pr));
  }
  std::ofstream out = open_out(o.out);
  write_corpus(out, out_records);
  logmsg(1, "decode: wrote " + std::to_string(out_records.size()) + " records to " + o.out);
  return errors ? 1 : 0;
}

// ---- eval ----

struct EvalOpts {
  std::string pred, gold, out;
};

int cmd_eval(const EvalOpts& o) {
  std::ifstream pf = open_in(o.pred);
  std::ifstream gf = open_in(o.gold);
  std::vector<CorpusRecord> pred_records = read_corpus(pf);
  std::vector<CorpusRecord> gold_records = read_corpus(gf);
  if (pred_records.size() != gold_records.size())
    throw std::runtime_error("prediction/gold record counts differ: " +
                             std::to_string(pred_records.size()) + " vs " +
                             std::to_string(gold_records.size()));

  std::vector<std::optional<AmrGraph>> preds;
  std::vector<AmrGraph> golds;
  for (std::size_t i = 0; i < gold_records.size(); ++i) {
    golds.push_back(record_graph(gold_records[i]));  // gold must parse: data error otherwise
    try {
      preds.emplace_back(record_graph(pred_records[i]));
    } catch (const std::exception& e) {
      logmsg(1, "eval: prediction " + std::to_string(i) + " unparseable (" + e.what() +
                    "), scored as empty");
      preds.emplace_back(std::nullopt);
    }
  }
  SmatchResult r = corpus_score(preds, golds);
  nlohmann::json j{{"precision", r.precision},
                   {"recall", r.recall},
                   {"f1", r.f1},
                   {"matched", r.matched},
                   {"pred_triples", r.pred_triples},
                   {"gold_triples", r.gold_triples},
                   {"records", gold_records.size()}};
  std::string text = j.dump(2) + "\n";
  if (o.out.empty()) {
    std::cout << text;
  } else {
    std::ofstream out = open_out(o.out);
    out << text;
  }
  return 0;
}

// ---- fuzz ----

struct FuzzOpts {
  std::string suite = "all";
  int cases = 200;
  std::uint64_t seed = 1;
};

int violation(const std::string& suite, std::uint64_t seed, const std::string& msg) {
  std::cerr << "property violation in suite '" << suite << "' (reproducer seed " << seed << "): "
            << msg << "\n";
  std::cerr << "reproduce with: chaform fuzz --suite " << suite << " --seed " << seed
            << " --cases 1\n";
  return 3;
}

int fuzz_roundtrip(int cases, std::uint64_t seed) {
  for (int i = 0; i < cases; ++i) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    AmrGraph g = random_graph(s, 12, 3);
    for (FormKind kind : {FormKind::SingleDown, FormKind::DoubleDown, FormKind::BottomUp}) {
      try {
        TargetForm f = linearize(g, kind);
        validate_form(f);
        if (!(form_from_json(form_to_json(f)) == f))
          return violation("roundtrip", s, "form JSON round-trip changed the record");
        AmrGraph back = delinearize(f);
        if (smatch_small(back, g).f1 != 1.0)
          return violation("roundtrip", s,
                           "delinearized graph differs (" + to_string(kind) + " form)");
      } catch (const std::exception& e) {
        return violation("roundtrip", s, e.what());
      }
    }
  }
  logmsg(1, "fuzz roundtrip: " + std::to_string(cases) + " cases ok");
  return 0;
}

int fuzz_masks(int cases, std::uint64_t seed) {
  for (int i = 0; i < cases; ++i) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    AmrGraph g = random_graph(s, 12, 3);
    for (FormKind kind : {FormKind::SingleDown, FormKind::DoubleDown, FormKind::BottomUp}) {
      try {
        TargetForm f = linearize(g, kind);
        ChaMask batch = build_mask(f);
        StackState st{kind, MaskVariant::Standard, {}, {}, 0};
        for (std::size_t t = 0; t < f.tokens.size(); ++t) {
          std::vector<int> row = incremental_step(
              st, f.tokens[t], f.struct_ptr.empty() ? -1 : f.struct_ptr[t]);
          if (row != batch.row(static_cast<int>(t)))
            return violation("masks", s, "incremental row " + std::to_string(t) +
                                             " differs from the batch mask (" + to_string(kind) +
                                             ")");
        }
        if (kind == FormKind::SingleDown) {
          build_mask(f, MaskVariant::ComposeAsExpand);
          build_mask(f, MaskVariant::ExpandAsCausal);
        }
      } catch (const std::exception& e) {
        return violation("masks", s, e.what());
      }
    }
  }
  logmsg(1, "fuzz masks: " + std::to_string(cases) + " cases ok");
  return 0;
}

int fuzz_decode(int cases, std::uint64_t seed) {
  int done = 0;
  for (std::uint64_t chunk = 0; done < cases; ++chunk) {
    const std::uint64_t s = seed + chunk * 1000;
    try {
      ModelConfig cfg;
      cfg.d_model = 16;
      cfg.n_layers = 1;
      cfg.n_heads = 2;
      cfg.max_len = 96;
      cfg.adapter_dim = 8;
      cfg.adapter_heads = 2;
      cfg.pointer_heads = 1;
      cfg.kind = static_cast<FormKind>(chunk % 3);
      std::vector<CorpusRecord> recs = make_synthetic_corpus(4, s, 6, 2);
      std::vector<std::vector<std::string>> sources;
      std::vector<TargetForm> forms;
      for (const auto& rec : recs) {
        sources.push_back(split_words(rec.meta.at("snt")));
        forms.push_back(linearize(record_graph(rec), cfg.kind));
      }
      Vocab vocab = Vocab::build(sources, forms);
      Model model(cfg, vocab, s ^ 0x5bd1e995);
      for (const auto& src : sources) {
        if (done >= cases) break;
        ++done;
        DecodeResult r = beam_decode(model, src, {2, 0});
        if (r.complete) {
          for (const ScoredForm& sf : r.forms) {
            validate_form(sf.form);   // throws on violation
            delinearize(sf.form);     // throws on violation
            if (!sf.complete) return violation("decode", s, "completed form not flagged complete");
          }
        } else if (!r.forms.empty() && r.forms[0].complete) {
          return violation("decode", s, "partial result flagged complete");
        }
      }
    } catch (const std::exception& e) {
      return violation("decode", s, e.what());
    }
  }
  logmsg(1, "fuzz decode: " + std::to_string(done) + " cases ok");
  return 0;
}

int cmd_fuzz(const FuzzOpts& o) {
  if (o.cases <= 0) throw ConfigError("--cases must be positive");
  int rc = 0;
  if (o.suite == "roundtrip" || o.suite == "all") rc = fuzz_roundtrip(o.cases, o.seed);
  if (rc == 0 && (o.suite == "masks" || o.suite == "all")) rc = fuzz_masks(o.cases, o.seed);
  if (rc == 0 && (o.suite == "decode" || o.suite == "all"))
    rc = fuzz_decode(std::min(o.cases, 64), o.seed);
  if (rc == 0) std::cout << "fuzz " << o.suite << ": ok\n";
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layered variable-free AMR parsing toolkit"};
  app.require_subcommand(1);

  ConvertOpts co;
  CLI::App* convert = app.add_subcommand("convert", "convert between PENMAN corpora and form files");
  convert->add_option("--in", co.in, "input file")->required();
  convert->add_option("--out", co.out, "output file")->required();
  convert->add_option("--direction", co.direction, "conversion direction")
      ->check(CLI::IsMember({"to-form", "to-penman", "to-marker"}));
  convert->add_option("--kind", co.kind, "form kind for to-form")
      ->check(CLI::IsMember({"single", "double", "bottomup"}));
  convert->add_flag("--strict", co.strict, "abort on the first record error");

  MaskOpts mo;
  CLI::App* mask = app.add_subcommand("mask", "dump the attention mask of one form record");
  mask->add_option("--in", mo.in, "form file (JSON lines)")->required();
  mask->add_option("--index", mo.index, "record index (default 0)");
  mask->add_option("--variant", mo.variant, "mask variant")
      ->check(CLI::IsMember({"standard", "compose-as-expand", "expand-as-causal"}));
  mask->add_option("--pgm", mo.pgm, "also write a PGM image here");

  TrainOpts to;
  CLI::App* train = app.add_subcommand("train", "train the toy model on a parallel corpus");
  train->add_option("--corpus", to.corpus, "corpus with ::snt metadata")->required();
  train->add_option("--checkpoint", to.checkpoint, "checkpoint output path")->required();
  train->add_option("--trace", to.trace, "CSV loss trace output path");
  train->add_option("--config", to.config, "JSON config file; flags win");
  train->add_option("--kind", to.kind, "form kind")
      ->check(CLI::IsMember({"single", "double", "bottomup"}));
  train->add_option("--placement", to.placement, "adapter placement")
      ->check(CLI::IsMember({"parallel", "pipeline", "inplace", "none"}));
  train->add_option("--variant", to.variant, "mask variant")
      ->check(CLI::IsMember({"standard", "compose-as-expand", "expand-as-causal"}));
  train->add_option("--d-model", to.d_model, "model width");
  train->add_option("--layers", to.layers, "encoder/decoder layers");
  train->add_option("--heads", to.heads, "attention heads");
  train->add_option("--ffn-dim", to.ffn_dim, "feed-forward width (0 = 2*d_model)");
  train->add_option("--max-len", to.max_len, "maximum sequence length");
  train->add_option("--adapter-dim", to.adapter_dim, "adapter width (0 = d_model/2)");
  train->add_option("--adapter-heads", to.adapter_heads, "adapter attention heads");
  train->add_option("--inplace-heads", to.inplace_heads, "decoder heads remasked when inplace");
  train->add_option("--pointer-heads", to.pointer_heads, "pointer heads per layer group");
  train->add_option("--alpha", to.alpha, "pointer loss weight");
  train->add_option("--steps", to.steps, "training steps");
  train->add_option("--batch", to.batch, "batch size");
  train->add_option("--lr", to.lr, "peak learning rate");
  train->add_option("--warmup", to.warmup, "warmup steps");
  train->add_option("--weight-decay", to.weight_decay, "decoupled weight decay");
  train->add_option("--check-every", to.check_every, "early-stop probe cadence");
  train->add_option("--seed", to.seed, "seed for init and batching");
  train->add_flag("--no-early-stop", to.no_early_stop, "run all steps");
  to.sub = train;

  DecodeOpts dopt;
  CLI::App* decode = app.add_subcommand("decode", "beam-decode a corpus with a checkpoint");
  decode->add_option("--checkpoint", dopt.checkpoint, "checkpoint path")->required();
  decode->add_option("--in", dopt.in, "corpus with ::snt metadata")->required();
  decode->add_option("--out", dopt.out, "output PENMAN corpus")->required();
  decode->add_option("--beam", dopt.beam, "beam width (default 1)");
  decode->add_option("--max-tokens", dopt.max_tokens, "token budget (0 = model limit)");

  EvalOpts eo;
  CLI::App* eval = app.add_subcommand("eval", "score predictions against gold graphs");
  eval->add_option("--pred", eo.pred, "predicted corpus")->required();
  eval->add_option("--gold", eo.gold, "gold corpus")->required();
  eval->add_option("--out", eo.out, "write the JSON report here instead of stdout");

  FuzzOpts fo;
  CLI::App* fuzz = app.add_subcommand("fuzz", "randomized property suites");
  fuzz->add_option("--suite", fo.suite, "suite to run")
      ->check(CLI::IsMember({"roundtrip", "masks", "decode", "all"}));
  fuzz->add_option("--cases", fo.cases, "case budget per suite");
  fuzz->add_option("--seed", fo.seed, "base seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad flags are configuration errors
  }

  try {
    if (convert->parsed()) return cmd_convert(co);
    if (mask->parsed()) return cmd_mask(mo);
    if (train->parsed()) return cmd_train(to);
    if (decode->parsed()) return cmd_decode(dopt);
    if (eval->parsed()) return cmd_eval(eo);
    if (fuzz->parsed()) return cmd_fuzz(fo);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
