#pragma once

// Variable-free target forms for AMR graphs, as multi-layer sequences:
// a base token layer plus aligned coreference-pointer and (for the bottom-up
// kind) structure-pointer layers.
//
//   SingleDown : ( concept :role value ... )          top-down, one bracket
//   DoubleDown : every ')' split into ')1' ')2'       top-down, close pair
//   BottomUp   : children first, '#' reduce marker    shift-reduce style
//
// coref[i] >= 0 marks token i as a duplicate mention pointing at an earlier
// mention of the same concept; struct_ptr[i] >= 0 marks a reduce token and
// names the first token of the span it composes.

#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chaform/amr_graph.hpp"

namespace chaform {

struct FormError : std::runtime_error {
  std::size_t index;
  FormError(const std::string& msg, std::size_t idx)
      : std::runtime_error(msg + " (at form index " + std::to_string(idx) + ")"), index(idx) {}
};

enum class TokenType { Open, Close, CloseCompose, CloseExpand, Reduce, Relation, Concept, Constant };

enum class FormKind { SingleDown, DoubleDown, BottomUp };

inline std::string to_string(FormKind k) {
  switch (k) {
    case FormKind::SingleDown: return "single";
    case FormKind::DoubleDown: return "double";
    case FormKind::BottomUp: return "bottomup";
  }
  return "?";
}

inline FormKind form_kind_from_string(const std::string& s) {
  if (s == "single") return FormKind::SingleDown;
  if (s == "double") return FormKind::DoubleDown;
  if (s == "bottomup") return FormKind::BottomUp;
  throw std::invalid_argument("unknown form kind '" + s + "'");
}

struct Token {
  TokenType type = TokenType::Concept;
  std::string text;  // empty for structural tokens

  bool operator==(const Token&) const = default;

  std::string surface() const {
    switch (type) {
      case TokenType::Open: return "(";
      case TokenType::Close: return ")";
      case TokenType::CloseCompose: return ")₁";  // )₁
      case TokenType::CloseExpand: return ")₂";   // )₂
      case TokenType::Reduce: return "■";         // ■
      default: return text;
    }
  }

  static Token open() { return {TokenType::Open, ""}; }
  static Token close() { return {TokenType::Close, ""}; }
  static Token close_compose() { return {TokenType::CloseCompose, ""}; }
  static Token close_expand() { return {TokenType::CloseExpand, ""}; }
  static Token reduce() { return {TokenType::Reduce, ""}; }
  static Token relation(std::string r) { return {TokenType::Relation, std::move(r)}; }
  static Token concept_token(std::string c) { return {TokenType::Concept, std::move(c)}; }
  static Token constant(std::string c) { return {TokenType::Constant, std::move(c)}; }
};

// Recovers the token type from its surface string (used for JSON round-trips
// and for interpreting decoded vocabulary items).
inline Token token_from_surface(const std::string& s) {
  if (s == "(") return Token::open();
  if (s == ")") return Token::close();
  if (s == ")₁") return Token::close_compose();
  if (s == ")₂") return Token::close_expand();
  if (s == "■") return Token::reduce();
  if (!s.empty() && s.front() == ':') return Token::relation(s);
  if (is_constant_literal(s)) return Token::constant(s);
  return Token::concept_token(s);
}

struct TargetForm {
  FormKind kind = FormKind::SingleDown;
  std::vector<Token> tokens;
  std::vector<int> coref;       // aligned with tokens; -1 = no pointer
  std::vector<int> struct_ptr;  // BottomUp only; empty otherwise

  bool operator==(const TargetForm&) const = default;
};

inline void validate_form(const TargetForm& f) {
  const std::size_t n = f.tokens.size();
  if (f.coref.size() != n) throw FormError("coref layer length mismatch", 0);
  const bool bu = f.kind == FormKind::BottomUp;
  if (bu ? f.struct_ptr.size() != n : !f.struct_ptr.empty())
    throw FormError("struct layer length mismatch", 0);

  long balance = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Token& t = f.tokens[i];
    switch (t.type) {
      case TokenType::Open:
        if (bu) throw FormError("'(' not allowed in bottom-up forms", i);
        ++balance;
        break;
      case TokenType::Close:
        if (f.kind != FormKind::SingleDown) throw FormError("')' only allowed in single-close forms", i);
        --balance;
        break;
      case TokenType::CloseCompose:
        if (f.kind != FormKind::DoubleDown) throw FormError("')1' only allowed in double-close forms", i);
        --balance;
        if (i + 1 >= n || f.tokens[i + 1].type != TokenType::CloseExpand)
          throw FormError("')1' not followed by ')2'", i);
        break;
      case TokenType::CloseExpand:
        if (f.kind != FormKind::DoubleDown) throw FormError("')2' only allowed in double-close forms", i);
        if (i == 0 || f.tokens[i - 1].type != TokenType::CloseCompose)
          throw FormError("')2' not preceded by ')1'", i);
        break;
      case TokenType::Reduce:
        if (!bu) throw FormError("reduce token only allowed in bottom-up forms", i);
        break;
      default:
        break;
    }
    if (balance < 0) throw FormError("unbalanced form: close without open", i);

    int c = f.coref[i];
    if (c != -1) {
      if (c < 0 || static_cast<std::size_t>(c) >= i)
        throw FormError("coref pointer must reference an earlier token", i);
      if (t.type != TokenType::Concept || f.tokens[c].type != TokenType::Concept ||
          f.tokens[c].text != t.text)
        throw FormError("coref pointer must link identical concept tokens", i);
    }
    if (bu) {
      int s = f.struct_ptr[i];
      if (t.type == TokenType::Reduce) {
        if (s < 0 || static_cast<std::size_t>(s) >= i + 1)
          throw FormError("reduce token requires a struct pointer into the prefix", i);
        if (f.tokens[s].type == TokenType::Relation)
          throw FormError("struct pointer must not target a relation", i);
      } else if (s != -1) {
        throw FormError("struct pointer only allowed on reduce tokens", i);
      }
    }
  }
  if (balance != 0) throw FormError("unbalanced form: " + std::to_string(balance) + " unclosed", n ? n - 1 : 0);
}

// ---- SingleDown <-> DoubleDown ----

// Splits every ')' into the pair ')1' ')2'. Also returns nothing extra: coref
// pointers are remapped through the index shift.
inline TargetForm to_double_down(const TargetForm& f) {
  if (f.kind != FormKind::SingleDown)
    throw FormError("to_double_down expects a single-close form", 0);
  TargetForm out;
  out.kind = FormKind::DoubleDown;
  std::vector<int> newpos(f.tokens.size());
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    newpos[i] = static_cast<int>(out.tokens.size());
    if (f.tokens[i].type == TokenType::Close) {
      out.tokens.push_back(Token::close_compose());
      out.coref.push_back(-1);
      out.tokens.push_back(Token::close_expand());
      out.coref.push_back(-1);
    } else {
      out.tokens.push_back(f.tokens[i]);
      out.coref.push_back(-1);
    }
  }
  for (std::size_t i = 0; i < f.tokens.size(); ++i)
    if (f.coref[i] >= 0) out.coref[newpos[i]] = newpos[f.coref[i]];
  return out;
}

// Inverse of to_double_down; `oldpos`, when given, receives for every output
// index the originating double-close index (used to re-anchor error reports).
inline TargetForm from_double_down(const TargetForm& f, std::vector<int>* oldpos = nullptr) {
  if (f.kind != FormKind::DoubleDown)
    throw FormError("from_double_down expects a double-close form", 0);
  validate_form(f);
  TargetForm out;
  out.kind = FormKind::SingleDown;
  std::vector<int> newpos(f.tokens.size(), -1);
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    if (f.tokens[i].type == TokenType::CloseExpand) continue;  // dropped
    newpos[i] = static_cast<int>(out.tokens.size());
    if (oldpos) oldpos->push_back(static_cast<int>(i));
    out.tokens.push_back(f.tokens[i].type == TokenType::CloseCompose ? Token::close()
                                                                     : f.tokens[i]);
    out.coref.push_back(-1);
  }
  for (std::size_t i = 0; i < f.tokens.size(); ++i)
    if (f.coref[i] >= 0) out.coref[newpos[i]] = newpos[f.coref[i]];
  return out;
}

// ---- linearize ----

inline TargetForm linearize(const AmrGraph& g, FormKind kind) {
  if (kind == FormKind::DoubleDown) return to_double_down(linearize(g, FormKind::SingleDown));
  ReplicatedTree rep = replicate_referents(g);
  std::map<std::string, std::string> dup_ante;
  for (const CorefLink& l : rep.coref_links) dup_ante[l.duplicate] = l.antecedent;
  auto adj = adjacency(rep.tree);

  TargetForm f;
  f.kind = kind;
  const bool bu = kind == FormKind::BottomUp;
  auto push = [&](Token t, int coref = -1, int sp = -1) {
    f.tokens.push_back(std::move(t));
    f.coref.push_back(coref);
    f.struct_ptr.push_back(sp);
  };
  std::map<std::string, int> label_index;  // copy var -> its concept token index

  std::function<void(const std::string&)> emit = [&](const std::string& v) {
    const std::string& label = rep.tree.nodes.at(v);
    auto dit = dup_ante.find(v);
    if (dit != dup_ante.end()) {
      // duplicate mention: bare concept + pointer to the antecedent's token
      label_index[v] = static_cast<int>(f.tokens.size());
      push(Token::concept_token(label), label_index.at(dit->second));
      return;
    }
    if (!bu) push(Token::open());
    label_index[v] = static_cast<int>(f.tokens.size());
    push(Token::concept_token(label));
    auto ait = adj.find(v);
    if (ait != adj.end()) {
      for (const Edge* e : ait->second) {
        push(Token::relation(e->role));
        if (e->target_is_constant)
          push(Token::constant(e->target));
        else
          emit(e->target);
      }
    }
    if (bu)
      push(Token::reduce(), -1, label_index.at(v));
    else
      push(Token::close());
  };
  emit(rep.tree.top);
  if (!bu) f.struct_ptr.clear();
  validate_form(f);
  return f;
}

// ---- delinearize ----

namespace detail {

struct SingleDownReader {
  const TargetForm& f;
  std::size_t pos = 0;
  int counter = 0;
  AmrGraph g;
  std::map<std::size_t, std::string> tok_var;  // concept token index -> variable

  const Token& cur() const {
    if (pos >= f.tokens.size())
      throw FormError("unbalanced form: unexpected end of tokens", f.tokens.size());
    return f.tokens[pos];
  }

  std::string parse_node() {
    if (cur().type != TokenType::Open) throw FormError("expected '('", pos);
    ++pos;
    if (cur().type != TokenType::Concept) throw FormError("expected concept after '('", pos);
    std::string var = "n" + std::to_string(counter++);
    g.nodes[var] = cur().text;
    tok_var[pos] = var;
    ++pos;
    while (cur().type != TokenType::Close) {
      if (cur().type != TokenType::Relation)
        throw FormError("expected relation or ')'", pos);
      std::string role = cur().text;
      ++pos;
      switch (cur().type) {
        case TokenType::Open: {
          std::string child = parse_node();
          g.edges.push_back({var, role, false, child});
          break;
        }
        case TokenType::Concept: {
          if (f.coref[pos] < 0)
            throw FormError("duplicate mention without a coreference pointer", pos);
          auto it = tok_var.find(static_cast<std::size_t>(f.coref[pos]));
          if (it == tok_var.end())
            throw FormError("dangling coreference pointer", pos);
          tok_var[pos] = it->second;
          g.edges.push_back({var, role, false, it->second});
          ++pos;
          break;
        }
        case TokenType::Constant:
          g.edges.push_back({var, role, true, cur().text});
          ++pos;
          break;
        default:
          throw FormError("relation with no following value", pos);
      }
    }
    ++pos;  // ')'
    return var;
  }
};

inline AmrGraph delinearize_bottom_up(const TargetForm& f) {
  struct Item {
    std::size_t idx;
    enum Kind { Fresh, Dup, Const, Rel, Done } kind;
    std::string text;
    std::string var;
  };
  std::vector<Item> items;
  std::map<std::size_t, std::string> tok_var;
  AmrGraph g;
  int counter = 0;
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    const Token& t = f.tokens[i];
    switch (t.type) {
      case TokenType::Reduce: {
        std::size_t s = static_cast<std::size_t>(f.struct_ptr[i]);
        std::vector<Item> span;
        while (!items.empty() && items.back().idx >= s) {
          span.push_back(items.back());
          items.pop_back();
        }
        std::reverse(span.begin(), span.end());
        if (span.empty() || span.front().idx != s)
          throw FormError("struct pointer targets a composed or invalid index", i);
        if (span.front().kind != Item::Fresh)
          throw FormError("reduce span must start with a fresh concept", i);
        std::string var = "n" + std::to_string(counter++);
        g.nodes[var] = span.front().text;
        tok_var[span.front().idx] = var;
        for (std::size_t j = 1; j < span.size(); j += 2) {
          if (span[j].kind != Item::Rel)
            throw FormError("expected relation inside reduce span", span[j].idx);
          if (j + 1 >= span.size())
            throw FormError("relation with no following value", span[j].idx);
          const Item& val = span[j + 1];
          switch (val.kind) {
            case Item::Done:
            case Item::Dup:
              g.edges.push_back({var, span[j].text, false, val.var});
              break;
            case Item::Const:
              g.edges.push_back({var, span[j].text, true, val.text});
              break;
            default:
              throw FormError("concept inside reduce span was never reduced", val.idx);
          }
        }
        items.push_back({i, Item::Done, "", var});
        break;
      }
      case TokenType::Concept: {
        if (f.coref[i] >= 0) {
          auto it = tok_var.find(static_cast<std::size_t>(f.coref[i]));
          if (it == tok_var.end())
            throw FormError("coreference pointer into an open span", i);
          tok_var[i] = it->second;
          items.push_back({i, Item::Dup, t.text, it->second});
        } else {
          items.push_back({i, Item::Fresh, t.text, ""});
        }
        break;
      }
      case TokenType::Relation:
        items.push_back({i, Item::Rel, t.text, ""});
        break;
      case TokenType::Constant:
        items.push_back({i, Item::Const, t.text, ""});
        break;
      default:
        throw FormError("token not allowed in bottom-up form", i);
    }
  }
  if (items.size() != 1 || items.back().kind != Item::Done)
    throw FormError("form does not reduce to a single root",
                    items.empty() ? 0 : items.back().idx);
  g.top = items.back().var;
  validate(g);
  return g;
}

}  // namespace detail

inline AmrGraph delinearize(const TargetForm& f) {
  validate_form(f);
  switch (f.kind) {
    case FormKind::SingleDown: {
      detail::SingleDownReader r{f};
      std::string top = r.parse_node();
      if (r.pos != f.tokens.size())
        throw FormError("trailing tokens after root", r.pos);
      r.g.top = top;
      validate(r.g);
      return r.g;
    }
    case FormKind::DoubleDown: {
      std::vector<int> oldpos;
      TargetForm sd = from_double_down(f, &oldpos);
      try {
        return delinearize(sd);
      } catch (const FormError& e) {
        std::size_t idx = e.index < oldpos.size() ? static_cast<std::size_t>(oldpos[e.index])
                                                  : f.tokens.size();
        std::string msg = e.what();
        msg = msg.substr(0, msg.rfind(" (at form index"));
        throw FormError(msg, idx);
      }
    }
    case FormKind::BottomUp:
      return detail::delinearize_bottom_up(f);
  }
  throw FormError("unknown form kind", 0);
}

// ---- flat single-layer rendering (variables reinserted as <Rk> markers) ----

// Renders a top-down form the way a single-sequence system would write it:
// every definition gets an explicit <Rk> marker after '(' and duplicate
// mentions are replaced by their marker.
inline std::string to_marker_string(const TargetForm& f) {
  if (f.kind == FormKind::BottomUp)
    throw FormError("marker rendering is defined for top-down forms", 0);
  TargetForm sd = f.kind == FormKind::DoubleDown ? from_double_down(f) : f;
  validate_form(sd);
  std::map<int, int> marker;  // concept token index -> marker id
  int next = 0;
  std::vector<std::string> out;
  for (std::size_t i = 0; i < sd.tokens.size(); ++i) {
    const Token& t = sd.tokens[i];
    if (t.type == TokenType::Open) {
      bool defines = i + 1 < sd.tokens.size() &&
                     sd.tokens[i + 1].type == TokenType::Concept && sd.coref[i + 1] < 0;
      out.push_back("(");
      if (defines) {
        marker[static_cast<int>(i + 1)] = next;
        out.push_back("<R" + std::to_string(next++) + ">");
      }
    } else if (t.type == TokenType::Concept && sd.coref[i] >= 0) {
      int j = sd.coref[i];
      while (sd.coref[j] >= 0) j = sd.coref[j];  // follow the chain to the definition
      marker[static_cast<int>(i)] = marker.at(j);
      out.push_back("<R" + std::to_string(marker.at(j)) + ">");
    } else {
      out.push_back(t.surface());
    }
  }
  std::string s;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (i) s += ' ';
    s += out[i];
  }
  return s;
}

// ---- JSON-lines IO ----
// {"kind":"single","tokens":["(", "alpha", ...],"coref":[null,...],"struct":null}

inline nlohmann::json form_to_json(const TargetForm& f) {
  nlohmann::json j;
  j["kind"] = to_string(f.kind);
  nlohmann::json toks = nlohmann::json::array();
  for (const Token& t : f.tokens) toks.push_back(t.surface());
  j["tokens"] = std::move(toks);
  nlohmann::json coref = nlohmann::json::array();
  for (int c : f.coref) coref.push_back(c < 0 ? nlohmann::json() : nlohmann::json(c));
  j["coref"] = std::move(coref);
  if (f.kind == FormKind::BottomUp) {
    nlohmann::json sp = nlohmann::json::array();
    for (int s : f.struct_ptr) sp.push_back(s < 0 ? nlohmann::json() : nlohmann::json(s));
    j["struct"] = std::move(sp);
  } else {
    j["struct"] = nullptr;
  }
  return j;
}

inline TargetForm form_from_json(const nlohmann::json& j) {
  TargetForm f;
  f.kind = form_kind_from_string(j.at("kind").get<std::string>());
  for (const auto& t : j.at("tokens")) f.tokens.push_back(token_from_surface(t.get<std::string>()));
  for (const auto& c : j.at("coref")) f.coref.push_back(c.is_null() ? -1 : c.get<int>());
  if (j.contains("struct") && !j.at("struct").is_null())
    for (const auto& s : j.at("struct")) f.struct_ptr.push_back(s.is_null() ? -1 : s.get<int>());
  validate_form(f);
  return f;
}

inline void write_forms(std::ostream& out, const std::vector<TargetForm>& forms) {
  for (const TargetForm& f : forms) out << form_to_json(f).dump() << '\n';
}

inline std::vector<TargetForm> read_forms(std::istream& in) {
  std::vector<TargetForm> forms;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      forms.push_back(form_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormError(std::string("bad form record on line ") + std::to_string(lineno) +
                          ": " + e.what(),
                      0);
    }
  }
  return forms;
}

}  // namespace chaform
