#include <catch2/catch_amalgamated.hpp>

#include <chaform/beam_decode.hpp>
#include <chaform/smatch.hpp>
#include <chaform/train.hpp>

#include <algorithm>
#include <functional>

using namespace chaform;

namespace {

ModelConfig small_config(FormKind kind) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_len = 64;
  cfg.placement = Placement::Parallel;
  cfg.adapter_dim = 8;
  cfg.adapter_heads = 2;
  cfg.pointer_heads = 1;
  cfg.kind = kind;
  return cfg;
}

struct Task {
  Vocab vocab;
  std::vector<std::vector<std::string>> sources;
  std::vector<TargetForm> forms;
  std::vector<AmrGraph> graphs;
  std::vector<EncodedExample> examples;
};

Task make_task(const ModelConfig& cfg, int count, std::uint64_t seed) {
  std::vector<CorpusRecord> records = make_synthetic_corpus(count, seed, 5, 1);
  Task t;
  for (const auto& rec : records) {
    t.graphs.push_back(record_graph(rec));
    t.sources.push_back(split_words(rec.meta.at("snt")));
    t.forms.push_back(linearize(t.graphs.back(), cfg.kind));
  }
  t.vocab = Vocab::build(t.sources, t.forms);
  for (std::size_t i = 0; i < t.forms.size(); ++i)
    t.examples.push_back(build_example(t.vocab, cfg, t.sources[i], t.forms[i]));
  return t;
}

// Replays a gold form through the hypothesis state machine, asserting the
// gold continuation is never filtered and its pointers are always legal.
Hypothesis replay(const Vocab& vocab, const TargetForm& form) {
  Hypothesis h = Hypothesis::start(vocab, form.kind, MaskVariant::Standard);
  for (std::size_t i = 0; i < form.tokens.size(); ++i) {
    const Token& tok = form.tokens[i];
    INFO("position " << i << " token " << tok.surface());
    REQUIRE(candidate_filter(h, tok));
    const int coref = form.coref[i];
    if (coref >= 0) {
      std::vector<int> cands = coref_candidates(h, tok.text);
      REQUIRE(std::find(cands.begin(), cands.end(), coref) != cands.end());
    }
    int sptr = -1;
    if (tok.type == TokenType::Reduce) {
      sptr = form.struct_ptr[i];
      REQUIRE(struct_target(h) == sptr);
    }
    commit_token(h, tok, vocab.id(tok.surface()), coref, sptr);
  }
  REQUIRE(eos_allowed(h));
  return h;
}

bool reproduces_all(const Model& m, const Task& t, int beam) {
  for (std::size_t i = 0; i < t.forms.size(); ++i) {
    DecodeResult r = beam_decode(m, t.sources[i], {beam, 0});
    if (!r.complete) return false;
    if (beam == 1) {
      if (!(r.forms[0].form == t.forms[i])) return false;
    } else if (!std::any_of(r.forms.begin(), r.forms.end(),
                            [&](const ScoredForm& sf) { return sf.form == t.forms[i]; })) {
      return false;
    }
  }
  return true;
}

// Trains until the goal predicate holds: one early-stopping run to token
// accuracy 1.0, then short bursts so probabilities dominate (argmax equality
// alone does not decide a beam that also sums pointer log-probabilities).
void train_until(Model& m, const Task& t, std::uint64_t seed, const std::function<bool()>& goal) {
  TrainConfig tc;
  tc.steps = 600;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  tc.warmup = 20;
  tc.seed = seed;
  tc.check_every = 20;
  train_model(m, t.examples, tc);
  for (int phase = 0; phase < 8 && !goal(); ++phase) {
    TrainConfig extra;
    extra.steps = 200;
    extra.batch_size = 4;
    extra.lr = 1e-3;
    extra.warmup = 0;
    extra.seed = seed + 1000 + static_cast<std::uint64_t>(phase);
    extra.early_stop = false;
    train_model(m, t.examples, extra);
  }
}

const Token kOpen = Token::open();
const Token kClose = Token::close();
const Token kClose1 = Token::close_compose();
const Token kClose2 = Token::close_expand();
const Token kReduce = Token::reduce();

}  // namespace

TEST_CASE("candidate filtering enforces the top-down bracket grammar") {
  AmrGraph g = parse_penman("( a / alpha :arg0 ( b / beta ) :arg1 ( g / gamma :arg2 b ) )");
  TargetForm f = linearize(g, FormKind::SingleDown);
  Vocab vocab = Vocab::build({{"alpha", "beta", "gamma"}}, {f});

  Hypothesis h = Hypothesis::start(vocab, FormKind::SingleDown, MaskVariant::Standard);
  const Token alpha = Token::concept_token("alpha");
  const Token beta = Token::concept_token("beta");
  const Token rel = Token::relation(":arg0");
  const Token lit = Token::constant("42");

  // only an opening bracket can start a form
  REQUIRE(candidate_filter(h, kOpen));
  REQUIRE_FALSE(candidate_filter(h, alpha));
  REQUIRE_FALSE(candidate_filter(h, kClose));
  REQUIRE_FALSE(candidate_filter(h, rel));
  REQUIRE_FALSE(eos_allowed(h));

  commit_token(h, kOpen, vocab.id("("));
  // a node label must follow its bracket
  REQUIRE(candidate_filter(h, alpha));
  REQUIRE_FALSE(candidate_filter(h, kOpen));
  REQUIRE_FALSE(candidate_filter(h, kClose));
  REQUIRE_FALSE(candidate_filter(h, lit));

  commit_token(h, alpha, vocab.id("alpha"));
  // inside a node body: close (balance 1) or a relation
  REQUIRE(candidate_filter(h, kClose));
  REQUIRE(candidate_filter(h, rel));
  REQUIRE_FALSE(candidate_filter(h, kOpen));
  REQUIRE_FALSE(candidate_filter(h, beta));

  commit_token(h, rel, vocab.id(":arg0"));
  // value position: nested node, constant, or duplicate with an antecedent
  REQUIRE(candidate_filter(h, kOpen));
  REQUIRE(candidate_filter(h, lit));
  REQUIRE(candidate_filter(h, alpha));        // alpha was mentioned
  REQUIRE_FALSE(candidate_filter(h, beta));   // beta was not
  REQUIRE_FALSE(candidate_filter(h, kClose));
  REQUIRE_FALSE(candidate_filter(h, rel));

  commit_token(h, kOpen, vocab.id("("));
  commit_token(h, beta, vocab.id("beta"));
  commit_token(h, kClose, vocab.id(")"));
  commit_token(h, Token::relation(":arg1"), vocab.id(":arg1"));

  // the duplicate must point at the correct earlier mention
  REQUIRE(coref_candidates(h, "beta") == std::vector<int>{4});
  REQUIRE(coref_candidates(h, "gamma").empty());
  Hypothesis bad = h;
  REQUIRE_THROWS_AS(commit_token(bad, beta, vocab.id("beta"), 0), DecodeError);
  commit_token(h, beta, vocab.id("beta"), 4);

  commit_token(h, kClose, vocab.id(")"));
  // the root is closed: nothing but end-of-sequence remains
  REQUIRE(eos_allowed(h));
  REQUIRE_FALSE(candidate_filter(h, kClose));  // balance would go negative
  REQUIRE_FALSE(candidate_filter(h, kOpen));
  REQUIRE_FALSE(candidate_filter(h, rel));
}

TEST_CASE("candidate filtering pairs the two-stage close brackets") {
  AmrGraph g = parse_penman("( a / alpha )");
  TargetForm f = linearize(g, FormKind::DoubleDown);
  Vocab vocab = Vocab::build({{"alpha"}}, {f});

  Hypothesis h = Hypothesis::start(vocab, FormKind::DoubleDown, MaskVariant::Standard);
  commit_token(h, kOpen, vocab.id("("));
  commit_token(h, Token::concept_token("alpha"), vocab.id("alpha"));

  // only the compose half may appear first; the plain close is alien here
  REQUIRE(candidate_filter(h, kClose1));
  REQUIRE_FALSE(candidate_filter(h, kClose));
  REQUIRE_FALSE(candidate_filter(h, kClose2));

  commit_token(h, kClose1, vocab.id(")₁"));
  // after the compose half, the expand half is the only legal continuation
  REQUIRE(candidate_filter(h, kClose2));
  REQUIRE_FALSE(candidate_filter(h, kClose1));
  REQUIRE_FALSE(candidate_filter(h, kOpen));
  REQUIRE_FALSE(candidate_filter(h, Token::concept_token("alpha")));
  REQUIRE_FALSE(candidate_filter(h, Token::relation(":arg0")));
  REQUIRE_FALSE(eos_allowed(h));

  commit_token(h, kClose2, vocab.id(")₂"));
  REQUIRE(eos_allowed(h));
}

TEST_CASE("candidate filtering enforces the bottom-up stack discipline") {
  AmrGraph g = parse_penman("( a / alpha :arg0 ( b / beta ) :arg1 b )");
  TargetForm f = linearize(g, FormKind::BottomUp);
  Vocab vocab = Vocab::build({{"alpha", "beta"}}, {f});

  const Token alpha = Token::concept_token("alpha");
  const Token beta = Token::concept_token("beta");
  const Token rel0 = Token::relation(":arg0");
  const Token rel1 = Token::relation(":arg1");

  Hypothesis h = Hypothesis::start(vocab, FormKind::BottomUp, MaskVariant::Standard);
  REQUIRE(candidate_filter(h, alpha));
  REQUIRE_FALSE(candidate_filter(h, rel0));
  REQUIRE_FALSE(candidate_filter(h, kReduce));
  REQUIRE_FALSE(candidate_filter(h, Token::constant("42")));
  REQUIRE_FALSE(candidate_filter(h, kOpen));

  commit_token(h, alpha, vocab.id("alpha"));  // items: [fresh alpha]
  REQUIRE(candidate_filter(h, rel0));
  REQUIRE(candidate_filter(h, kReduce));  // a leaf may compose immediately
  REQUIRE(struct_target(h) == 0);
  REQUIRE_FALSE(candidate_filter(h, beta));
  REQUIRE_FALSE(eos_allowed(h));

  commit_token(h, rel0, vocab.id(":arg0"));  // items: [fresh alpha, rel]
  REQUIRE(candidate_filter(h, beta));
  REQUIRE(candidate_filter(h, Token::constant("42")));
  REQUIRE_FALSE(candidate_filter(h, rel1));
  REQUIRE_FALSE(candidate_filter(h, kReduce));
  // alpha's span is still open, so a duplicate of it cannot point anywhere
  REQUIRE(coref_candidates(h, "alpha").empty());
  Hypothesis bad = h;
  REQUIRE_THROWS_AS(commit_token(bad, alpha, vocab.id("alpha"), 0), DecodeError);

  commit_token(h, beta, vocab.id("beta"));  // items: [fresh alpha, rel, fresh beta]
  REQUIRE(struct_target(h) == 2);           // innermost open span composes first
  Hypothesis wrong = h;
  REQUIRE_THROWS_AS(commit_token(wrong, kReduce, vocab.id("■"), -1, 0), DecodeError);
  commit_token(h, kReduce, vocab.id("■"), -1, 2);  // items: [fresh alpha, rel, done]
  REQUIRE(h.items.size() == 3);

  // beta is composed now, so a duplicate may point at it
  REQUIRE(coref_candidates(h, "beta") == std::vector<int>{2});
  REQUIRE(candidate_filter(h, kReduce));  // the root span may compose too
  commit_token(h, rel1, vocab.id(":arg1"));
  commit_token(h, beta, vocab.id("beta"), 2);  // duplicate mention
  REQUIRE(struct_target(h) == 0);
  commit_token(h, kReduce, vocab.id("■"), -1, 0);
  REQUIRE(h.items.size() == 1);
  REQUIRE(eos_allowed(h));
  REQUIRE_FALSE(candidate_filter(h, rel0));
  REQUIRE_FALSE(candidate_filter(h, kReduce));
  REQUIRE_FALSE(candidate_filter(h, alpha));

  // the assembled layers match the linearizer's gold form exactly
  REQUIRE(form_of(h) == f);
}

TEST_CASE("gold replay is never filtered and matches batch encodings") {
  for (FormKind kind : {FormKind::SingleDown, FormKind::DoubleDown, FormKind::BottomUp}) {
    ModelConfig cfg = small_config(kind);
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
      AmrGraph g = random_graph(seed * 7 + 1, 8, 2);
      TargetForm form = linearize(g, kind);
      if (static_cast<int>(form.tokens.size()) + 2 > cfg.max_len) continue;
      std::vector<std::string> src = dfs_concept_sentence(g);
      Vocab vocab = Vocab::build({src}, {form});
      EncodedExample ex = build_example(vocab, cfg, src, form);

      Hypothesis h = replay(vocab, form);
      REQUIRE(form_of(h) == form);
      REQUIRE(h.dec_ids == ex.dec_ids);
      REQUIRE(h.coref_in == ex.coref_in);
      REQUIRE(h.struct_in == ex.struct_in);

      // token-at-a-time mask rows equal the batch mask
      nn::MaskMat batch = decoder_cha_mask(form, MaskVariant::Standard);
      REQUIRE(static_cast<int>(h.mask_rows.size()) == batch.rows);
      for (int i = 0; i < batch.rows; ++i) {
        std::vector<int> expect;
        for (int j = 0; j < batch.cols; ++j)
          if (batch.at(i, j)) expect.push_back(j);
        REQUIRE(h.mask_rows[static_cast<std::size_t>(i)] == expect);
      }
    }
  }
}

TEST_CASE("beam-1 decoding reproduces an overfit corpus exactly") {
  for (FormKind kind : {FormKind::SingleDown, FormKind::DoubleDown}) {
    ModelConfig cfg = small_config(kind);
    Task t = make_task(cfg, 4, 47);
    Model m(cfg, t.vocab, 11);
    train_until(m, t, 13, [&] { return reproduces_all(m, t, 1); });
    REQUIRE(reproduces_all(m, t, 1));

    bool saw_pointer = false;
    for (std::size_t i = 0; i < t.sources.size(); ++i) {
      DecodeResult r = beam_decode(m, t.sources[i], {1, 0});
      REQUIRE(r.complete);
      const ScoredForm& top = r.forms[0];
      REQUIRE(top.complete);
      REQUIRE(top.form == t.forms[i]);
      REQUIRE(top.score == top.lp_base + top.lp_coref + top.lp_struct);
      REQUIRE(top.score <= 0.0);
      // the decoded graph matches gold structure perfectly
      SmatchResult sm = smatch_small(delinearize(top.form), t.graphs[i]);
      REQUIRE(sm.f1 == 1.0);
      if (top.lp_coref != 0.0) saw_pointer = true;

      // a wider beam never returns a worse best hypothesis
      DecodeResult r4 = beam_decode(m, t.sources[i], {4, 0});
      REQUIRE(r4.complete);
      REQUIRE(r4.forms[0].score >= top.score - 1e-12);
      for (std::size_t k = 1; k < r4.forms.size(); ++k)
        REQUIRE(r4.forms[k - 1].score >= r4.forms[k].score);
    }
    REQUIRE(saw_pointer);  // the corpus exercises the coreference layer
  }
}

TEST_CASE("bottom-up beam search keeps the gold parse among completions") {
  ModelConfig cfg = small_config(FormKind::BottomUp);
  Task t = make_task(cfg, 4, 47);
  Model m(cfg, t.vocab, 9);
  train_until(m, t, 21, [&] { return reproduces_all(m, t, 4); });
  REQUIRE(reproduces_all(m, t, 4));

  for (std::size_t i = 0; i < t.sources.size(); ++i) {
    DecodeResult r = beam_decode(m, t.sources[i], {4, 0});
    REQUIRE(r.complete);
    // every completed candidate delinearizes (constraints make this so)
    for (const ScoredForm& sf : r.forms) {
      REQUIRE(sf.complete);
      REQUIRE_NOTHROW(delinearize(sf.form));
    }
  }
}

TEST_CASE("random-weight decoding yields valid forms or flagged partials") {
  int completed = 0;
  for (FormKind kind : {FormKind::SingleDown, FormKind::DoubleDown, FormKind::BottomUp}) {
    ModelConfig cfg = small_config(kind);
    Task t = make_task(cfg, 3, 100 + static_cast<std::uint64_t>(kind));
    for (std::uint64_t model_seed : {1ULL, 2ULL}) {
      Model m(cfg, t.vocab, model_seed);
      for (const auto& src : t.sources) {
        DecodeResult r = beam_decode(m, src, {2, 0});
        if (r.complete) {
          ++completed;
          for (const ScoredForm& sf : r.forms) {
            REQUIRE(sf.complete);
            REQUIRE(sf.form.kind == kind);
            REQUIRE_NOTHROW(validate_form(sf.form));
            REQUIRE_NOTHROW(delinearize(sf.form));
            REQUIRE(sf.score == sf.lp_base + sf.lp_coref + sf.lp_struct);
            REQUIRE(sf.score <= 1e-9);
          }
          for (std::size_t k = 1; k < r.forms.size(); ++k)
            REQUIRE(r.forms[k - 1].score >= r.forms[k].score);
        } else {
          REQUIRE(r.forms.size() <= 1);
          if (!r.forms.empty()) REQUIRE_FALSE(r.forms[0].complete);
        }
      }
    }
  }
  REQUIRE(completed > 0);
}

TEST_CASE("beam options: width must be positive, budget truncates") {
  ModelConfig cfg = small_config(FormKind::SingleDown);
  Task t = make_task(cfg, 2, 90);
  Model m(cfg, t.vocab, 3);

  REQUIRE_THROWS_AS(beam_decode(m, t.sources[0], {0, 0}), DecodeError);
  REQUIRE_THROWS_AS(beam_decode(m, t.sources[0], {1, -2}), DecodeError);

  // two tokens cannot hold even the smallest bracketed node
  DecodeResult r = beam_decode(m, t.sources[0], {2, 2});
  REQUIRE_FALSE(r.complete);
  REQUIRE(r.forms.size() == 1);
  REQUIRE_FALSE(r.forms[0].complete);
  REQUIRE(r.forms[0].form.tokens.size() <= 2);
}
