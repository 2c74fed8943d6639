#pragma once

// Toy encoder–decoder transformer (float64, post-layer-norm) for parsing
// sentences into structured target forms. Decoder layers can carry a
// structure-aware attention adapter in one of three placements, or replace
// designated self-attention heads with the structural mask directly. A
// pointer net (averaged attention heads of the top decoder layer) predicts
// coreference and, for bottom-up forms, structural reduce targets.

#include <chaform/autodiff.hpp>
#include <chaform/cha_mask.hpp>
#include <chaform/target_form.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace chaform {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelError : std::runtime_error {
  explicit ModelError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Placement { Parallel, Pipeline, Inplace, None };

inline std::string placement_to_string(Placement p) {
  switch (p) {
    case Placement::Parallel: return "parallel";
    case Placement::Pipeline: return "pipeline";
    case Placement::Inplace: return "inplace";
    case Placement::None: return "none";
  }
  return "?";
}

inline Placement placement_from_string(const std::string& s) {
  if (s == "parallel") return Placement::Parallel;
  if (s == "pipeline") return Placement::Pipeline;
  if (s == "inplace") return Placement::Inplace;
  if (s == "none") return Placement::None;
  throw ConfigError("unknown placement: " + s);
}

struct ModelConfig {
  int vocab_size = 0;  // filled in from the vocabulary at model construction
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_dim = 0;     // 0 -> 2*d_model
  int max_len = 160;   // positions available to either side
  Placement placement = Placement::Parallel;
  int adapter_dim = 0;    // 0 -> d_model/2
  int adapter_heads = 4;
  int inplace_heads = 2;  // heads given the structural mask under Inplace
  int pointer_heads = 2;  // heads averaged into the pointer distribution
  double pointer_alpha = 0.075;
  FormKind kind = FormKind::SingleDown;
  MaskVariant mask_variant = MaskVariant::Standard;
  bool adapter_full_causal = false;  // ablation: adapter sees a plain causal mask

  int ffn_dim_or_default() const { return ffn_dim > 0 ? ffn_dim : 2 * d_model; }
  int adapter_dim_or_default() const { return adapter_dim > 0 ? adapter_dim : d_model / 2; }
  // heads reserved for pointer distributions in the top decoder layer
  int pointer_group_size() const {
    return kind == FormKind::BottomUp ? 2 * pointer_heads : pointer_heads;
  }

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) throw ConfigError("model dims must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (max_len < 2) throw ConfigError("max_len too small");
    if (pointer_alpha < 0) throw ConfigError("pointer loss weight must be >= 0");
    if (pointer_heads < 1 || pointer_heads > n_heads) throw ConfigError("pointer head count out of range");
    if (pointer_group_size() > n_heads)
      throw ConfigError("bottom-up forms need 2*pointer_heads <= n_heads");
    if (placement == Placement::Inplace) {
      if (inplace_heads < 0 || inplace_heads > n_heads)
        throw ConfigError("inplace-replaced head count out of range");
      if (inplace_heads + pointer_group_size() > n_heads)
        throw ConfigError("inplace-replaced heads would overlap the pointer heads");
    }
    if (placement == Placement::Parallel || placement == Placement::Pipeline) {
      int da = adapter_dim_or_default();
      if (da <= 0 || adapter_heads <= 0) throw ConfigError("adapter dims must be positive");
      if (da % adapter_heads != 0) throw ConfigError("adapter_dim must be divisible by adapter_heads");
    }
    if (mask_variant != MaskVariant::Standard && kind != FormKind::SingleDown)
      throw ConfigError("mask variants are defined for single-bracket forms only");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"vocab_size", vocab_size},
                          {"d_model", d_model},
                          {"n_layers", n_layers},
                          {"n_heads", n_heads},
                          {"ffn_dim", ffn_dim},
                          {"max_len", max_len},
                          {"placement", placement_to_string(placement)},
                          {"adapter_dim", adapter_dim},
                          {"adapter_heads", adapter_heads},
                          {"inplace_heads", inplace_heads},
                          {"pointer_heads", pointer_heads},
                          {"pointer_alpha", pointer_alpha},
                          {"kind", to_string(kind)},
                          {"mask_variant", to_string(mask_variant)},
                          {"adapter_full_causal", adapter_full_causal}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.placement = placement_from_string(j.at("placement").get<std::string>());
    c.adapter_dim = j.at("adapter_dim").get<int>();
    c.adapter_heads = j.at("adapter_heads").get<int>();
    c.inplace_heads = j.at("inplace_heads").get<int>();
    c.pointer_heads = j.at("pointer_heads").get<int>();
    c.pointer_alpha = j.at("pointer_alpha").get<double>();
    c.kind = form_kind_from_string(j.at("kind").get<std::string>());
    c.mask_variant = mask_variant_from_string(j.at("mask_variant").get<std::string>());
    c.adapter_full_causal = j.at("adapter_full_causal").get<bool>();
    return c;
  }
};

// ---- vocabulary ----

struct Vocab {
  std::vector<std::string> items;
  std::map<std::string, int> index;

  int add(const std::string& s) {
    auto it = index.find(s);
    if (it != index.end()) return it->second;
    int id = static_cast<int>(items.size());
    items.push_back(s);
    index.emplace(s, id);
    return id;
  }
  int id(const std::string& s) const {
    auto it = index.find(s);
    return it == index.end() ? unk() : it->second;
  }
  int size() const { return static_cast<int>(items.size()); }
  int bos() const { return 0; }
  int eos() const { return 1; }
  int unk() const { return 2; }

  // specials + structural tokens + sorted corpus tokens (sorted for
  // determinism independent of corpus order)
  static Vocab build(const std::vector<std::vector<std::string>>& sources,
                     const std::vector<TargetForm>& targets) {
    Vocab v;
    v.add("<s>");
    v.add("</s>");
    v.add("<unk>");
    for (const char* s : {"(", ")", ")₁", ")₂", "■"}) v.add(s);
    std::set<std::string> rest;
    for (const auto& toks : sources) rest.insert(toks.begin(), toks.end());
    for (const auto& f : targets)
      for (const auto& t : f.tokens) rest.insert(t.surface());
    for (const auto& s : rest) v.add(s);
    return v;
  }
};

// ---- parameter store ----

enum class Init { Xavier, Zero, One };

class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  nn::Var make(const std::string& name, int rows, int cols, Init init) {
    if (by_name_.count(name)) throw std::logic_error("duplicate parameter: " + name);
    nn::Mat m;
    switch (init) {
      case Init::Zero: m = nn::Mat::Zero(rows, cols); break;
      case Init::One: m = nn::Mat::Ones(rows, cols); break;
      case Init::Xavier: {
        // per-parameter stream derived from (seed, name): initial values are
        // independent of allocation order, so configs that add or drop
        // parameter groups leave the shared ones bit-identical
        std::mt19937_64 rng(seed_ * 0x9e3779b97f4a7c15ULL ^ fnv1a(name));
        double limit = std::sqrt(6.0 / (rows + cols));
        m.resize(rows, cols);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) m(i, j) = (unit(rng) * 2.0 - 1.0) * limit;
        break;
      }
    }
    nn::Var v = nn::parameter(std::move(m));
    by_name_.emplace(name, v);
    list_.emplace_back(name, v);
    return v;
  }

  const nn::Var& get(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::logic_error("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  const std::vector<std::pair<std::string, nn::Var>>& entries() const { return list_; }
  std::size_t count() const { return list_.size(); }

  static std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  }
  static double unit(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);  // [0,1)
  }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, nn::Var>> list_;
  std::map<std::string, nn::Var> by_name_;
};

// ---- mask plumbing ----

inline nn::MaskMat to_mask_mat(const ChaMask& m) {
  nn::MaskMat out(m.n, m.n);
  for (int i = 0; i < m.n; ++i)
    for (int j = 0; j < m.n; ++j)
      if (m.visible(i, j)) out.set(i, j);
  return out;
}

inline nn::MaskMat mask_from_rows(const std::vector<std::vector<int>>& rows) {
  int n = static_cast<int>(rows.size());
  nn::MaskMat out(n, n);
  for (int i = 0; i < n; ++i)
    for (int j : rows[i]) out.set(i, j);
  return out;
}

// structural mask over the decoder input stream: a start-of-sequence token
// followed by the form tokens (struct pointers shift by one accordingly)
inline nn::MaskMat decoder_cha_mask(const TargetForm& form, MaskVariant variant) {
  StackState st{form.kind, variant, {}, {}, 0};
  std::vector<std::vector<int>> rows;
  rows.push_back(incremental_step(st, Token::concept_token("<s>")));
  for (std::size_t i = 0; i < form.tokens.size(); ++i) {
    int sp = form.struct_ptr.empty() || form.struct_ptr[i] < 0 ? -1 : form.struct_ptr[i] + 1;
    rows.push_back(incremental_step(st, form.tokens[i], sp));
  }
  return mask_from_rows(rows);
}

// ---- teacher-forcing example ----

struct EncodedExample {
  std::vector<int> src_ids;    // source tokens + end marker
  std::vector<int> dec_ids;    // start marker + form tokens
  std::vector<int> labels;     // form tokens + end marker (one per decoder row)
  std::vector<int> coref_in;   // input-side pointer index per decoder position, -1 if none
  std::vector<int> struct_in;  // input-side reduce-target index, -1 if none
  std::vector<int> coref_tgt;  // supervision: row i predicts this pointer, -1 if none
  std::vector<int> struct_tgt;
  nn::MaskMat cha;     // structural mask over decoder positions
  nn::MaskMat causal;  // plain causal mask over decoder positions
};

inline EncodedExample build_example(const Vocab& vocab, const ModelConfig& cfg,
                                    const std::vector<std::string>& src_tokens,
                                    const TargetForm& form) {
  if (form.kind != cfg.kind) throw ModelError("form kind does not match model configuration");
  const int n = static_cast<int>(form.tokens.size());
  EncodedExample ex;
  for (const auto& t : src_tokens) ex.src_ids.push_back(vocab.id(t));
  ex.src_ids.push_back(vocab.eos());
  ex.dec_ids.push_back(vocab.bos());
  for (const auto& t : form.tokens) ex.dec_ids.push_back(vocab.id(t.surface()));
  if (static_cast<int>(ex.dec_ids.size()) > cfg.max_len ||
      static_cast<int>(ex.src_ids.size()) > cfg.max_len)
    throw ModelError("sequence exceeds the configured maximum length");

  ex.labels.assign(ex.dec_ids.begin() + 1, ex.dec_ids.end());
  ex.labels.push_back(vocab.eos());

  ex.coref_in.assign(n + 1, -1);
  ex.struct_in.assign(n + 1, -1);
  ex.coref_tgt.assign(n + 1, -1);
  ex.struct_tgt.assign(n + 1, -1);
  for (int i = 0; i < n; ++i) {
    if (form.coref[i] >= 0) {
      ex.coref_in[i + 1] = form.coref[i] + 1;  // antecedent in decoder coordinates
      ex.coref_tgt[i] = form.coref[i] + 1;     // row i predicts token i and its pointer
    }
    if (!form.struct_ptr.empty() && form.struct_ptr[i] >= 0) {
      ex.struct_in[i + 1] = form.struct_ptr[i] + 1;
      ex.struct_tgt[i] = form.struct_ptr[i] + 1;
    }
  }
  ex.cha = decoder_cha_mask(form, cfg.mask_variant);
  ex.causal = nn::MaskMat::causal(n + 1);
  return ex;
}

// ---- losses ----

struct LossBreakdown {
  double seq2seq = 0;
  double pointer = 0;
  double total = 0;
  int token_count = 0;
  int pointer_count = 0;
  nn::Var total_var;  // scalar node; run backward() on it to populate gradients
};

// ---- the model ----

class Model {
 public:
  ModelConfig cfg;
  Vocab vocab;
  ParamStore params;

  Model(ModelConfig config, Vocab v, std::uint64_t seed)
      : cfg(std::move(config)), vocab(std::move(v)), params(seed) {
    cfg.vocab_size = vocab.size();
    cfg.validate();
    if (cfg.vocab_size < 3) throw ConfigError("vocabulary too small");
    allocate();
  }

  // --- embedding ---

  nn::Var embed_source(const std::vector<int>& ids) const {
    return add(rows_gather(P("tok_emb"), ids), rows_gather(P("enc_pos_emb"), positions(ids.size())));
  }

  // token + position embeddings, plus pointer-feature vectors at positions
  // that carry a backward pointer (zero rows elsewhere)
  nn::Var embed_targets(const std::vector<int>& ids, const std::vector<int>& coref_in,
                        const std::vector<int>& struct_in) const {
    const std::size_t nsz = ids.size();
    if (coref_in.size() != nsz || struct_in.size() != nsz)
      throw ModelError("pointer layers must match the token layer in length");
    nn::Var x = add(rows_gather(P("tok_emb"), ids), rows_gather(P("dec_pos_emb"), positions(nsz)));
    x = add_pointer_features(x, ids, coref_in, "mlp_p");
    if (cfg.kind == FormKind::BottomUp) x = add_pointer_features(x, ids, struct_in, "mlp_s");
    return x;
  }

  // --- encoder ---

  nn::Var encode(const std::vector<int>& src_ids) const {
    if (src_ids.empty()) throw ModelError("empty source sequence");
    const int n = static_cast<int>(src_ids.size());
    nn::MaskMat full = nn::MaskMat::full(n, n);
    std::vector<const nn::MaskMat*> masks(cfg.n_heads, &full);
    nn::Var h = embed_source(src_ids);
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::string p = "enc" + std::to_string(l);
      auto sa = attention(h, h, p + ".attn", masks, nullptr);
      h = ln(add(h, sa), p + ".ln1");
      h = ln(add(h, ffn(h, p + ".ffn")), p + ".ln2");
    }
    return h;
  }

  // --- decoder ---

  struct DecodeOut {
    nn::Var hidden;        // top decoder states
    nn::Var logits;        // next-token scores per row
    nn::Var coref_probs;   // mean pointer distribution per row
    nn::Var struct_probs;  // only for bottom-up forms
    std::vector<nn::Var> top_self_probs;  // per-head self-attention rows, top layer
  };

  DecodeOut forward_decoder(const nn::Var& enc_out, const std::vector<int>& dec_ids,
                            const std::vector<int>& coref_in, const std::vector<int>& struct_in,
                            const nn::MaskMat& cha) const {
    const int n = static_cast<int>(dec_ids.size());
    if (cha.rows != n || cha.cols != n) throw ModelError("structural mask shape mismatch");
    nn::MaskMat causal = nn::MaskMat::causal(n);
    nn::MaskMat cross = nn::MaskMat::full(n, static_cast<int>(enc_out->value.rows()));
    const nn::MaskMat& adapter_mask = cfg.adapter_full_causal ? causal : cha;

    std::vector<const nn::MaskMat*> self_masks(cfg.n_heads, &causal);
    if (cfg.placement == Placement::Inplace)
      for (int h = cfg.n_heads - cfg.inplace_heads; h < cfg.n_heads; ++h) self_masks[h] = &cha;
    std::vector<const nn::MaskMat*> cross_masks(cfg.n_heads, &cross);

    nn::Var h = embed_targets(dec_ids, coref_in, struct_in);
    std::vector<nn::Var> top_head_probs;
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::string p = "dec" + std::to_string(l);
      bool top = (l == cfg.n_layers - 1);
      nn::Var sa = attention(h, h, p + ".self", self_masks, top ? &top_head_probs : nullptr);
      nn::Var sum = add(h, sa);
      if (cfg.placement == Placement::Parallel)
        sum = add(sum, adapter_forward(h, adapter_mask, p + ".ad"));
      else if (cfg.placement == Placement::Pipeline)
        sum = add(sum, adapter_forward(sa, adapter_mask, p + ".ad"));
      h = ln(sum, p + ".ln1");
      h = ln(add(h, attention(h, enc_out, p + ".cross", cross_masks, nullptr)), p + ".ln2");
      h = ln(add(h, ffn(h, p + ".ffn")), p + ".ln3");
    }

    DecodeOut out;
    out.hidden = h;
    out.logits = add_bias(matmul(h, P("out.w")), P("out.b"));
    out.coref_probs = mean_heads(top_head_probs, 0, cfg.pointer_heads);
    if (cfg.kind == FormKind::BottomUp)
      out.struct_probs = mean_heads(top_head_probs, cfg.pointer_heads, cfg.pointer_heads);
    out.top_self_probs = std::move(top_head_probs);
    return out;
  }

  DecodeOut forward_example(const EncodedExample& ex) const {
    return forward_decoder(encode(ex.src_ids), ex.dec_ids, ex.coref_in, ex.struct_in, ex.cha);
  }

  // shared-parameter adapter block; pass `capture_probs` to inspect the
  // attention distributions (used by structural-visibility tests)
  nn::Var adapter_forward(const nn::Var& h, const nn::MaskMat& mask, const std::string& prefix,
                          std::vector<nn::Var>* capture_probs = nullptr) const {
    const int da = cfg.adapter_dim_or_default();
    const int dh = da / cfg.adapter_heads;
    nn::Var x1 = gelu(add_bias(matmul(h, P(prefix + ".ffn1.w")), P(prefix + ".ffn1.b")));
    nn::Var q = matmul(x1, P(prefix + ".wq"));
    nn::Var k = matmul(x1, P(prefix + ".wk"));
    nn::Var v = matmul(x1, P(prefix + ".wv"));
    std::vector<nn::Var> heads;
    for (int hd = 0; hd < cfg.adapter_heads; ++hd) {
      nn::Var scores = scale(matmul_nt(slice_cols(q, hd * dh, dh), slice_cols(k, hd * dh, dh)),
                             1.0 / std::sqrt(static_cast<double>(dh)));
      nn::Var probs = softmax_masked(scores, mask);
      if (capture_probs) capture_probs->push_back(probs);
      heads.push_back(matmul(probs, slice_cols(v, hd * dh, dh)));
    }
    nn::Var x2 = cfg.adapter_heads == 1 ? heads[0] : concat_cols(heads);
    nn::Var normed = ln(add(x1, x2), prefix + ".ln");
    return add_bias(matmul(normed, P(prefix + ".ffn2.w")), P(prefix + ".ffn2.b"));
  }

  // --- loss ---

  LossBreakdown loss_on_batch(const std::vector<EncodedExample>& batch) const {
    if (batch.empty()) throw ModelError("empty batch");
    nn::Var ce_total, ptr_total;
    int n_tokens = 0, n_pointers = 0;
    for (const EncodedExample& ex : batch) {
      DecodeOut out = forward_example(ex);
      int cnt = 0;
      nn::Var ce = nn::cross_entropy_sum(out.logits, ex.labels, &cnt);
      n_tokens += cnt;
      ce_total = ce_total ? add(ce_total, ce) : ce;
      n_pointers += accumulate_pointer_nll(out.coref_probs, ex.coref_tgt, ptr_total);
      if (cfg.kind == FormKind::BottomUp)
        n_pointers += accumulate_pointer_nll(out.struct_probs, ex.struct_tgt, ptr_total);
    }
    LossBreakdown lb;
    lb.token_count = n_tokens;
    lb.pointer_count = n_pointers;
    nn::Var seq = scale(ce_total, 1.0 / n_tokens);
    lb.seq2seq = nn::item(seq);
    if (n_pointers > 0) {
      nn::Var ptr = scale(ptr_total, 1.0 / n_pointers);
      lb.pointer = nn::item(ptr);
      lb.total_var = add(seq, scale(ptr, cfg.pointer_alpha));
    } else {
      lb.pointer = 0.0;
      lb.total_var = seq;  // no pointer positions: nothing flows through that path
    }
    lb.total = nn::item(lb.total_var);
    return lb;
  }

  // --- helpers exposed for tests and the training/decoding layers ---

  const nn::Var& P(const std::string& name) const { return params.get(name); }

  nn::Var attention(const nn::Var& q_in, const nn::Var& kv_in, const std::string& prefix,
                    const std::vector<const nn::MaskMat*>& head_masks,
                    std::vector<nn::Var>* capture_probs) const {
    const int dh = cfg.d_model / cfg.n_heads;
    nn::Var q = add_bias(matmul(q_in, P(prefix + ".wq")), P(prefix + ".bq"));
    nn::Var k = add_bias(matmul(kv_in, P(prefix + ".wk")), P(prefix + ".bk"));
    nn::Var v = add_bias(matmul(kv_in, P(prefix + ".wv")), P(prefix + ".bv"));
    std::vector<nn::Var> heads;
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      nn::Var scores = scale(matmul_nt(slice_cols(q, hd * dh, dh), slice_cols(k, hd * dh, dh)),
                             1.0 / std::sqrt(static_cast<double>(dh)));
      nn::Var probs = softmax_masked(scores, *head_masks[static_cast<std::size_t>(hd)]);
      if (capture_probs) capture_probs->push_back(probs);
      heads.push_back(matmul(probs, slice_cols(v, hd * dh, dh)));
    }
    nn::Var cat = cfg.n_heads == 1 ? heads[0] : concat_cols(heads);
    return add_bias(matmul(cat, P(prefix + ".wo")), P(prefix + ".bo"));
  }

 private:
  std::vector<int> positions(std::size_t n) const {
    if (static_cast<int>(n) > cfg.max_len)
      throw ModelError("sequence exceeds the configured maximum length");
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    return p;
  }

  nn::Var ln(const nn::Var& x, const std::string& prefix) const {
    return nn::layernorm(x, P(prefix + ".g"), P(prefix + ".b"));
  }

  nn::Var ffn(const nn::Var& x, const std::string& prefix) const {
    nn::Var h = gelu(add_bias(matmul(x, P(prefix + ".w1")), P(prefix + ".b1")));
    return add_bias(matmul(h, P(prefix + ".w2")), P(prefix + ".b2"));
  }

  nn::Var add_pointer_features(const nn::Var& x, const std::vector<int>& ids,
                               const std::vector<int>& ptr, const std::string& mlp) const {
    const int n = static_cast<int>(ids.size());
    bool any = false;
    std::vector<int> tok_at(n, 0), pos_at(n, 0);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      if (ptr[i] < 0) continue;
      if (ptr[i] >= i) throw ModelError("pointer index out of range (must precede its position)");
      tok_at[i] = ids[static_cast<std::size_t>(ptr[i])];
      pos_at[i] = ptr[i];
      keep[static_cast<std::size_t>(i)] = 1;
      any = true;
    }
    if (!any) return x;
    nn::Var feats = nn::concat_cols(
        {rows_gather(P("tok_emb"), tok_at), rows_gather(P("dec_pos_emb"), pos_at)});
    nn::Var h = gelu(add_bias(matmul(feats, P(mlp + ".w1")), P(mlp + ".b1")));
    nn::Var off = add_bias(matmul(h, P(mlp + ".w2")), P(mlp + ".b2"));
    return add(x, row_mask(off, keep));
  }

  static nn::Var mean_heads(const std::vector<nn::Var>& probs, int first, int count) {
    nn::Var sum = probs[static_cast<std::size_t>(first)];
    for (int h = first + 1; h < first + count; ++h)
      sum = add(sum, probs[static_cast<std::size_t>(h)]);
    return count == 1 ? sum : scale(sum, 1.0 / count);
  }

  static int accumulate_pointer_nll(const nn::Var& probs, const std::vector<int>& targets,
                                    nn::Var& total) {
    bool any = false;
    for (int t : targets) any = any || t >= 0;
    if (!any) return 0;
    int cnt = 0;
    nn::Var nll = nn::pointer_nll_sum(probs, targets, &cnt);
    total = total ? add(total, nll) : nll;
    return cnt;
  }

  void allocate() {
    const int d = cfg.d_model, V = cfg.vocab_size, f = cfg.ffn_dim_or_default();
    params.make("tok_emb", V, d, Init::Xavier);
    params.make("enc_pos_emb", cfg.max_len, d, Init::Xavier);
    params.make("dec_pos_emb", cfg.max_len, d, Init::Xavier);
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::string p = "enc" + std::to_string(l);
      alloc_attention(p + ".attn", d);
      alloc_ln(p + ".ln1", d);
      alloc_ffn(p + ".ffn", d, f);
      alloc_ln(p + ".ln2", d);
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::string p = "dec" + std::to_string(l);
      alloc_attention(p + ".self", d);
      if (cfg.placement == Placement::Parallel || cfg.placement == Placement::Pipeline)
        alloc_adapter(p + ".ad", d);
      alloc_ln(p + ".ln1", d);
      alloc_attention(p + ".cross", d);
      alloc_ln(p + ".ln2", d);
      alloc_ffn(p + ".ffn", d, f);
      alloc_ln(p + ".ln3", d);
    }
    alloc_pointer_mlp("mlp_p", d);
    if (cfg.kind == FormKind::BottomUp) alloc_pointer_mlp("mlp_s", d);
    params.make("out.w", d, V, Init::Xavier);
    params.make("out.b", 1, V, Init::Zero);
  }

  void alloc_attention(const std::string& p, int d) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) params.make(p + w, d, d, Init::Xavier);
    for (const char* b : {".bq", ".bk", ".bv", ".bo"}) params.make(p + b, 1, d, Init::Zero);
  }
  void alloc_ln(const std::string& p, int d) {
    params.make(p + ".g", 1, d, Init::One);
    params.make(p + ".b", 1, d, Init::Zero);
  }
  void alloc_ffn(const std::string& p, int d, int f) {
    params.make(p + ".w1", d, f, Init::Xavier);
    params.make(p + ".b1", 1, f, Init::Zero);
    params.make(p + ".w2", f, d, Init::Xavier);
    params.make(p + ".b2", 1, d, Init::Zero);
  }
  void alloc_adapter(const std::string& p, int d) {
    const int da = cfg.adapter_dim_or_default();
    params.make(p + ".ffn1.w", d, da, Init::Xavier);
    params.make(p + ".ffn1.b", 1, da, Init::Zero);
    for (const char* w : {".wq", ".wk", ".wv"}) params.make(p + w, da, da, Init::Xavier);
    alloc_ln(p + ".ln", da);
    params.make(p + ".ffn2.w", da, d, Init::Zero);  // inert adapter at initialization
    params.make(p + ".ffn2.b", 1, d, Init::Zero);
  }
  void alloc_pointer_mlp(const std::string& p, int d) {
    params.make(p + ".w1", 2 * d, d, Init::Xavier);
    params.make(p + ".b1", 1, d, Init::Zero);
    params.make(p + ".w2", d, d, Init::Zero);  // pointer features vanish at initialization
    params.make(p + ".b2", 1, d, Init::Zero);
  }
};

// ---- checkpoints ----

inline void save_checkpoint(const Model& model, const std::string& path) {
  nlohmann::json j;
  j["format"] = "chaform-checkpoint";
  j["version"] = 1;
  j["config"] = model.cfg.to_json();
  j["vocab"] = model.vocab.items;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, var] : model.params.entries()) {
    nlohmann::json entry;
    entry["rows"] = var->value.rows();
    entry["cols"] = var->value.cols();
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(var->value.size()));
    for (Eigen::Index i = 0; i < var->value.rows(); ++i)
      for (Eigen::Index jj = 0; jj < var->value.cols(); ++jj) data.push_back(var->value(i, jj));
    entry["data"] = std::move(data);
    params[name] = std::move(entry);
  }
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw ModelError("cannot write checkpoint: " + path);
  out << j.dump() << "\n";
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot read checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("malformed checkpoint: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "chaform-checkpoint")
      throw ModelError("not a checkpoint file");
    if (j.at("version").get<int>() != 1) throw ModelError("unsupported checkpoint version");
    ModelConfig cfg = ModelConfig::from_json(j.at("config"));
    Vocab vocab;
    for (const auto& s : j.at("vocab")) vocab.add(s.get<std::string>());
    if (vocab.size() != cfg.vocab_size) throw ModelError("checkpoint vocabulary size mismatch");
    Model model(cfg, vocab, 0);
    const auto& params = j.at("params");
    if (params.size() != model.params.count())
      throw ModelError("checkpoint parameter set mismatch");
    for (const auto& [name, var] : model.params.entries()) {
      if (!params.contains(name)) throw ModelError("checkpoint missing parameter: " + name);
      const auto& entry = params.at(name);
      Eigen::Index rows = entry.at("rows").get<Eigen::Index>();
      Eigen::Index cols = entry.at("cols").get<Eigen::Index>();
      if (rows != var->value.rows() || cols != var->value.cols())
        throw ModelError("checkpoint shape mismatch for " + name);
      const auto& data = entry.at("data");
      if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw ModelError("checkpoint data size mismatch for " + name);
      std::size_t idx = 0;
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) var->value(r, c) = data[idx++].get<double>();
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace chaform
