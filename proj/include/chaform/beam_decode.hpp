#pragma once

// Constrained beam search over the layered target forms. Hypotheses carry
// the grammar state of their form kind (bracket slots for top-down, a typed
// item stack for bottom-up), the incremental structural-mask state, and
// per-layer cumulative log-probabilities. Candidate filtering guarantees
// every completed hypothesis is well-formed; outputs are still validated and
// delinearized before being returned, never trusted.

#include <chaform/decoder_model.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace chaform {

struct DecodeError : std::runtime_error {
  explicit DecodeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DecodeOptions {
  int beam = 1;
  int max_tokens = 0;  // 0 -> model max_len - 1
};

// grammar slot for top-down kinds
enum class Slot { Root, NodeLabel, NodeBody, Value, PendingClose2, Done };

// typed stack entry for bottom-up kinds (mirrors the delinearizer)
struct StackItem {
  int idx = 0;  // form token index
  enum Kind { Fresh, Dup, Const, Rel, Done } kind = Fresh;
  std::string text;
};

struct Hypothesis {
  FormKind kind = FormKind::SingleDown;
  // form layers (form coordinates)
  std::vector<Token> tokens;
  std::vector<int> coref;
  std::vector<int> sptr;
  // decoder-side state (position 0 is the start token)
  std::vector<int> dec_ids;
  std::vector<int> coref_in, struct_in;
  StackState mstate;
  std::vector<std::vector<int>> mask_rows;
  // cumulative per-layer log-probabilities
  double lp_base = 0, lp_coref = 0, lp_struct = 0;
  bool complete = false;
  // top-down grammar
  Slot slot = Slot::Root;
  int balance = 0;
  // bottom-up grammar
  std::vector<StackItem> items;
  // concept mentions a new duplicate may point at: (form index, label)
  std::vector<std::pair<int, std::string>> antecedents;

  double score() const { return lp_base + lp_coref + lp_struct; }

  static Hypothesis start(const Vocab& vocab, FormKind kind, MaskVariant variant) {
    Hypothesis h;
    h.kind = kind;
    h.mstate = StackState{kind, variant, {}, {}, 0};
    h.mask_rows.push_back(incremental_step(h.mstate, Token::concept_token("<s>")));
    h.dec_ids.push_back(vocab.bos());
    h.coref_in.push_back(-1);
    h.struct_in.push_back(-1);
    return h;
  }
};

// deterministic beam ordering: score, then shorter, then lexicographic ids
inline bool hyp_better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score() != b.score()) return a.score() > b.score();
  if (a.dec_ids.size() != b.dec_ids.size()) return a.dec_ids.size() < b.dec_ids.size();
  return a.dec_ids < b.dec_ids;
}

namespace detail_decode {

inline bool has_fresh(const std::vector<StackItem>& items) {
  for (const StackItem& it : items)
    if (it.kind == StackItem::Fresh) return true;
  return false;
}

inline bool is_value_kind(StackItem::Kind k) {
  return k == StackItem::Done || k == StackItem::Dup || k == StackItem::Const;
}

}  // namespace detail_decode

// earlier mentions a duplicate of `label` may legally point at
inline std::vector<int> coref_candidates(const Hypothesis& h, const std::string& label) {
  std::vector<int> out;
  for (const auto& [idx, text] : h.antecedents)
    if (text == label) out.push_back(idx);
  return out;
}

// the unique legal reduce target in the current state, or -1
inline int struct_target(const Hypothesis& h) {
  if (h.items.empty() || h.items.back().kind == StackItem::Rel) return -1;
  for (auto it = h.items.rbegin(); it != h.items.rend(); ++it)
    if (it->kind == StackItem::Fresh) return it->idx;
  return -1;
}

// may the base layer continue with `tok`? (pointer availability included:
// a duplicate concept needs at least one same-label antecedent)
inline bool candidate_filter(const Hypothesis& h, const Token& tok) {
  switch (h.kind) {
    case FormKind::SingleDown:
    case FormKind::DoubleDown: {
      const bool dd = h.kind == FormKind::DoubleDown;
      switch (tok.type) {
        case TokenType::Open:
          return h.slot == Slot::Root || h.slot == Slot::Value;
        case TokenType::Close:
          return !dd && h.slot == Slot::NodeBody && h.balance > 0;
        case TokenType::CloseCompose:
          return dd && h.slot == Slot::NodeBody && h.balance > 0;
        case TokenType::CloseExpand:
          return dd && h.slot == Slot::PendingClose2;
        case TokenType::Concept:
          if (h.slot == Slot::NodeLabel) return true;
          return h.slot == Slot::Value && !coref_candidates(h, tok.text).empty();
        case TokenType::Constant:
          return h.slot == Slot::Value;
        case TokenType::Relation:
          return h.slot == Slot::NodeBody;
        case TokenType::Reduce:
          return false;
      }
      return false;
    }
    case FormKind::BottomUp: {
      const bool value_pos = !h.items.empty() && h.items.back().kind == StackItem::Rel;
      switch (tok.type) {
        case TokenType::Concept:
          // fresh label at the start or after a relation; duplicates are a
          // separate interpretation handled by the expansion step
          return h.items.empty() || value_pos;
        case TokenType::Constant:
          return value_pos;
        case TokenType::Relation:
          return !h.items.empty() && !value_pos && detail_decode::has_fresh(h.items);
        case TokenType::Reduce:
          return struct_target(h) >= 0;
        default:
          return false;
      }
    }
  }
  return false;
}

inline bool eos_allowed(const Hypothesis& h) {
  if (h.kind == FormKind::BottomUp)
    return h.items.size() == 1 && h.items.back().kind == StackItem::Done;
  return h.slot == Slot::Done;
}

// advances the mask state by one token (struct pointer in form coordinates)
// and returns the visible columns of the new decoder row
inline const std::vector<int>& incremental_cha_context(Hypothesis& h, const Token& tok,
                                                       int struct_form_idx = -1) {
  int sp = struct_form_idx < 0 ? -1 : struct_form_idx + 1;
  h.mask_rows.push_back(incremental_step(h.mstate, tok, sp));
  return h.mask_rows.back();
}

// Commits one token with its pointer choices, updating every layer of state.
// Throws if the transition is not legal — callers must pre-filter; replaying
// gold forms through this function is the filter-soundness check.
inline void commit_token(Hypothesis& h, const Token& tok, int vocab_id, int coref_tgt = -1,
                         int struct_tgt = -1) {
  if (!candidate_filter(h, tok)) throw DecodeError("illegal continuation: " + tok.surface());
  const int idx = static_cast<int>(h.tokens.size());

  switch (h.kind) {
    case FormKind::SingleDown:
    case FormKind::DoubleDown:
      switch (tok.type) {
        case TokenType::Open:
          ++h.balance;
          h.slot = Slot::NodeLabel;
          break;
        case TokenType::Concept:
          if (h.slot == Slot::NodeLabel) {
            if (coref_tgt >= 0) throw DecodeError("fresh mention cannot carry a pointer");
          } else {
            std::vector<int> cands = coref_candidates(h, tok.text);
            if (std::find(cands.begin(), cands.end(), coref_tgt) == cands.end())
              throw DecodeError("duplicate mention needs a valid antecedent");
          }
          h.antecedents.emplace_back(idx, tok.text);
          h.slot = Slot::NodeBody;
          break;
        case TokenType::Constant:
          h.slot = Slot::NodeBody;
          break;
        case TokenType::Relation:
          h.slot = Slot::Value;
          break;
        case TokenType::Close:
        case TokenType::CloseExpand:
          --h.balance;
          h.slot = h.balance == 0 ? Slot::Done : Slot::NodeBody;
          break;
        case TokenType::CloseCompose:
          h.slot = Slot::PendingClose2;
          break;
        default:
          throw DecodeError("illegal continuation: " + tok.surface());
      }
      break;

    case FormKind::BottomUp:
      switch (tok.type) {
        case TokenType::Concept:
          if (coref_tgt >= 0) {
            std::vector<int> cands = coref_candidates(h, tok.text);
            if (std::find(cands.begin(), cands.end(), coref_tgt) == cands.end())
              throw DecodeError("duplicate mention needs a valid antecedent");
            h.items.push_back({idx, StackItem::Dup, tok.text});
            h.antecedents.emplace_back(idx, tok.text);
          } else {
            if (!h.items.empty() && h.items.back().kind != StackItem::Rel)
              throw DecodeError("fresh concept only at label or value positions");
            h.items.push_back({idx, StackItem::Fresh, tok.text});
          }
          break;
        case TokenType::Constant:
          h.items.push_back({idx, StackItem::Const, tok.text});
          break;
        case TokenType::Relation:
          h.items.push_back({idx, StackItem::Rel, tok.text});
          break;
        case TokenType::Reduce: {
          int expect = struct_target(h);
          if (struct_tgt != expect) throw DecodeError("reduce target must be the open span head");
          std::string label;
          while (!h.items.empty() && h.items.back().idx >= struct_tgt) {
            if (h.items.back().idx == struct_tgt) label = h.items.back().text;
            h.items.pop_back();
          }
          h.items.push_back({idx, StackItem::Done, ""});
          h.antecedents.emplace_back(struct_tgt, label);  // node is now composed
          break;
        }
        default:
          throw DecodeError("illegal continuation: " + tok.surface());
      }
      break;
  }

  incremental_cha_context(h, tok, tok.type == TokenType::Reduce ? struct_tgt : -1);
  h.tokens.push_back(tok);
  h.coref.push_back(coref_tgt);
  h.sptr.push_back(tok.type == TokenType::Reduce ? struct_tgt : -1);
  h.dec_ids.push_back(vocab_id);
  h.coref_in.push_back(coref_tgt < 0 ? -1 : coref_tgt + 1);
  h.struct_in.push_back(tok.type == TokenType::Reduce && struct_tgt >= 0 ? struct_tgt + 1 : -1);
}

inline TargetForm form_of(const Hypothesis& h) {
  TargetForm f;
  f.kind = h.kind;
  f.tokens = h.tokens;
  f.coref = h.coref;
  if (h.kind == FormKind::BottomUp) f.struct_ptr = h.sptr;
  return f;
}

struct ScoredForm {
  TargetForm form;
  double score = 0;
  double lp_base = 0, lp_coref = 0, lp_struct = 0;
  bool complete = false;
};

struct DecodeResult {
  std::vector<ScoredForm> forms;  // best first; may hold one partial if none completed
  bool complete = false;
  int invalid_completed = 0;  // completed hypotheses rejected by validation
};

namespace detail_decode {

struct StepScores {
  Eigen::RowVectorXd log_probs;   // next-token log-probabilities
  Eigen::RowVectorXd coref_row;   // pointer probabilities over decoder positions
  Eigen::RowVectorXd struct_row;  // bottom-up only
};

inline StepScores score_step(const Model& model, const nn::Var& enc, const Hypothesis& h) {
  Model::DecodeOut out = model.forward_decoder(enc, h.dec_ids, h.coref_in, h.struct_in,
                                               mask_from_rows(h.mask_rows));
  const Eigen::Index last = out.logits->value.rows() - 1;
  Eigen::RowVectorXd row = out.logits->value.row(last);
  double mx = row.maxCoeff();
  double lse = std::log((row.array() - mx).exp().sum()) + mx;
  StepScores ss;
  ss.log_probs = (row.array() - lse).matrix();
  ss.coref_row = out.coref_probs->value.row(last);
  if (model.cfg.kind == FormKind::BottomUp) ss.struct_row = out.struct_probs->value.row(last);
  return ss;
}

inline double safe_log(double p) { return std::log(std::max(p, 1e-300)); }

// argmax of the pointer row over the allowed form indices
inline std::pair<int, double> best_pointer(const Eigen::RowVectorXd& row,
                                           const std::vector<int>& candidates) {
  int best = -1;
  double best_p = -1;
  for (int c : candidates) {
    double p = row(c + 1);  // decoder coordinates
    if (p > best_p) {
      best_p = p;
      best = c;
    }
  }
  return {best, safe_log(best_p)};
}

}  // namespace detail_decode

inline DecodeResult beam_decode(const Model& model, const std::vector<std::string>& src_tokens,
                                const DecodeOptions& opt) {
  if (opt.beam < 1) throw DecodeError("beam width must be >= 1");
  if (opt.max_tokens < 0) throw DecodeError("token budget must be >= 0");
  nn::NoGradGuard guard;
  const Vocab& vocab = model.vocab;
  const int B = opt.beam;
  int cap = model.cfg.max_len - 1;
  if (opt.max_tokens > 0) cap = std::min(cap, opt.max_tokens);

  // classify every vocabulary entry once; specials are handled separately
  std::vector<std::optional<Token>> toks(static_cast<std::size_t>(vocab.size()));
  for (int v = 3; v < vocab.size(); ++v) {
    try {
      toks[static_cast<std::size_t>(v)] = token_from_surface(vocab.items[static_cast<std::size_t>(v)]);
    } catch (const FormError&) {
      // unclassifiable entries are never candidates
    }
  }

  std::vector<int> src_ids;
  for (const auto& t : src_tokens) src_ids.push_back(vocab.id(t));
  src_ids.push_back(vocab.eos());
  nn::Var enc = model.encode(src_ids);

  std::vector<Hypothesis> live{Hypothesis::start(vocab, model.cfg.kind, model.cfg.mask_variant)};
  std::vector<Hypothesis> done;
  std::vector<Hypothesis> pool;  // last scored generation, for the partial fallback

  while (!live.empty()) {
    pool = live;
    std::vector<Hypothesis> next;
    for (const Hypothesis& h : live) {
      detail_decode::StepScores ss = detail_decode::score_step(model, enc, h);
      if (eos_allowed(h)) {
        Hypothesis d = h;
        d.lp_base += ss.log_probs(vocab.eos());
        d.complete = true;
        done.push_back(std::move(d));
      }
      if (static_cast<int>(h.tokens.size()) >= cap) continue;

      for (int v = 3; v < vocab.size(); ++v) {
        const auto& maybe = toks[static_cast<std::size_t>(v)];
        if (!maybe || !candidate_filter(h, *maybe)) continue;
        const Token& tok = *maybe;
        const double lp = ss.log_probs(v);

        if (tok.type == TokenType::Concept) {
          bool fresh_ok, dup_ok;
          if (h.kind == FormKind::BottomUp) {
            fresh_ok = h.items.empty() || h.items.back().kind == StackItem::Rel;
            dup_ok = !h.items.empty() && h.items.back().kind == StackItem::Rel &&
                     !coref_candidates(h, tok.text).empty();
          } else {
            fresh_ok = h.slot == Slot::NodeLabel;
            dup_ok = h.slot == Slot::Value && !coref_candidates(h, tok.text).empty();
          }
          if (fresh_ok) {
            Hypothesis n = h;
            commit_token(n, tok, v);
            n.lp_base += lp;
            next.push_back(std::move(n));
          }
          if (dup_ok) {
            auto [target, lp_ptr] = detail_decode::best_pointer(ss.coref_row,
                                                                coref_candidates(h, tok.text));
            Hypothesis n = h;
            commit_token(n, tok, v, target);
            n.lp_base += lp;
            n.lp_coref += lp_ptr;
            next.push_back(std::move(n));
          }
        } else if (tok.type == TokenType::Reduce) {
          int target = struct_target(h);
          Hypothesis n = h;
          commit_token(n, tok, v, -1, target);
          n.lp_base += lp;
          n.lp_struct += detail_decode::safe_log(ss.struct_row(target + 1));
          next.push_back(std::move(n));
        } else {
          Hypothesis n = h;
          commit_token(n, tok, v);
          n.lp_base += lp;
          next.push_back(std::move(n));
        }
      }
    }

    std::sort(next.begin(), next.end(), hyp_better);
    if (static_cast<int>(next.size()) > B) next.resize(static_cast<std::size_t>(B));
    std::sort(done.begin(), done.end(), hyp_better);
    if (static_cast<int>(done.size()) > B) done.resize(static_cast<std::size_t>(B));
    live = std::move(next);

    // no future extension can beat the kept completions (scores only decay)
    if (static_cast<int>(done.size()) >= B &&
        (live.empty() || !hyp_better(live.front(), done.back())))
      break;
  }

  DecodeResult res;
  for (const Hypothesis& d : done) {
    TargetForm f = form_of(d);
    try {
      validate_form(f);
      delinearize(f);
    } catch (const FormError&) {
      ++res.invalid_completed;
      continue;
    }
    res.forms.push_back({std::move(f), d.score(), d.lp_base, d.lp_coref, d.lp_struct, true});
  }
  res.complete = !res.forms.empty();
  if (!res.complete) {
    // best partial, flagged: callers decide how to degrade
    if (live.empty()) live = std::move(pool);
    const Hypothesis* best = nullptr;
    for (const Hypothesis& h : live)
      if (!best || hyp_better(h, *best)) best = &h;
    for (const Hypothesis& d : done)
      if (!best || hyp_better(d, *best)) best = &d;
    if (best)
      res.forms.push_back({form_of(*best), best->score(), best->lp_base, best->lp_coref,
                           best->lp_struct, false});
  }
  return res;
}

}  // namespace chaform
