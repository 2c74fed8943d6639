#pragma once

// AMR graphs: labelled rooted digraphs with variable nodes, constant leaves,
// PENMAN text (de)serialization, triple extraction, referent replication
// (graph -> tree + coref links) and seeded random graph generation.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace chaform {

struct ParseError : std::runtime_error {
  std::size_t index;  // token index into the tokenized input
  ParseError(const std::string& msg, std::size_t idx)
      : std::runtime_error(msg + " (at token " + std::to_string(idx) + ")"), index(idx) {}
};

struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Edge {
  std::string source;      // variable id
  std::string role;        // ":arg0", ":mod", ... (lower-cased)
  bool target_is_constant = false;
  std::string target;      // variable id, or constant literal (quotes kept)

  bool operator==(const Edge&) const = default;
};

// nodes: variable -> concept. Edge order is significant: it fixes the child
// order used by serialization and linearization.
struct AmrGraph {
  std::map<std::string, std::string> nodes;
  std::vector<Edge> edges;
  std::string top;
};

inline bool is_constant_literal(const std::string& s) {
  if (s.empty()) return false;
  if (s.front() == '"') return true;
  if (s == "-" || s == "+") return true;
  char c = s.front();
  if (std::isdigit(static_cast<unsigned char>(c))) return true;
  if ((c == '-' || c == '+') && s.size() > 1 &&
      std::isdigit(static_cast<unsigned char>(s[1])))
    return true;
  return false;
}

inline std::string lowercased(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Splits PENMAN text into tokens. '(' ')' '/' are self-delimiting; quoted
// strings are kept as single tokens (quotes included).
inline std::vector<std::string> penman_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (c == '(' || c == ')' || c == '/') {
      out.emplace_back(1, c);
      ++i;
    } else if (c == '"') {
      std::size_t j = i + 1;
      while (j < text.size() && text[j] != '"') ++j;
      if (j >= text.size()) throw ParseError("unterminated string literal", out.size());
      out.push_back(text.substr(i, j - i + 1));
      i = j + 1;
    } else {
      std::size_t j = i;
      while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) &&
             text[j] != '(' && text[j] != ')' && text[j] != '/' && text[j] != '"')
        ++j;
      out.push_back(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

inline void validate(const AmrGraph& g) {
  if (g.nodes.empty()) throw ValidationError("graph has no nodes");
  if (!g.nodes.count(g.top)) throw ValidationError("top variable '" + g.top + "' is not a node");
  for (const Edge& e : g.edges) {
    if (!g.nodes.count(e.source))
      throw ValidationError("edge source '" + e.source + "' is not a node");
    if (!e.target_is_constant && !g.nodes.count(e.target))
      throw ValidationError("edge target '" + e.target + "' is not a node");
    if (e.role.empty() || e.role.front() != ':')
      throw ValidationError("role '" + e.role + "' does not start with ':'");
  }
  // every node reachable from top
  std::set<std::string> seen{g.top};
  std::vector<std::string> todo{g.top};
  while (!todo.empty()) {
    std::string v = todo.back();
    todo.pop_back();
    for (const Edge& e : g.edges)
      if (e.source == v && !e.target_is_constant && seen.insert(e.target).second)
        todo.push_back(e.target);
  }
  for (const auto& [var, label] : g.nodes)
    if (!seen.count(var))
      throw ValidationError("node '" + var + "' is unreachable from top");
}

namespace detail {

struct PenmanParser {
  const std::vector<std::string>& toks;
  std::size_t pos = 0;
  std::set<std::string> defined;
  AmrGraph g;

  explicit PenmanParser(const std::vector<std::string>& t) : toks(t) {
    // pre-pass: collect variable definitions "( var /"
    for (std::size_t i = 0; i + 2 < toks.size(); ++i) {
      if (toks[i] == "(" && toks[i + 2] == "/") {
        const std::string& var = toks[i + 1];
        if (var == "(" || var == ")" || var == "/")
          throw ParseError("malformed node: bad variable name", i + 1);
        if (!defined.insert(var).second)
          throw ParseError("duplicate variable definition '" + var + "'", i + 1);
      }
    }
  }

  bool eof() const { return pos >= toks.size(); }
  const std::string& cur() const {
    if (eof()) throw ParseError("unbalanced parentheses: unexpected end of input", toks.size());
    return toks[pos];
  }

  std::string parse_node() {
    if (cur() != "(") throw ParseError("expected '('", pos);
    ++pos;
    if (cur() == ")") throw ParseError("empty node", pos);
    std::string var = cur();
    if (var == "(" || var == "/") throw ParseError("malformed node: expected variable", pos);
    ++pos;
    if (cur() != "/") throw ParseError("malformed node: expected '/' after variable", pos);
    ++pos;
    const std::string& label = cur();
    if (label == "(" || label == ")" || label == "/")
      throw ParseError("malformed node: expected concept after '/'", pos);
    g.nodes[var] = label;
    ++pos;
    while (cur() != ")") {
      std::string role = cur();
      if (role.front() != ':') throw ParseError("expected role or ')'", pos);
      role = lowercased(role);
      ++pos;
      if (cur() == "(") {
        // reserve the slot so edges stay in text order
        g.edges.push_back({var, role, false, ""});
        std::size_t slot = g.edges.size() - 1;
        std::string child = parse_node();
        g.edges[slot].target = child;
      } else {
        const std::string& atom = cur();
        if (atom == ")" || atom == "/" || atom.front() == ':')
          throw ParseError("expected value after role '" + role + "'", pos);
        if (defined.count(atom)) {
          g.edges.push_back({var, role, false, atom});
        } else if (is_constant_literal(atom)) {
          g.edges.push_back({var, role, true, atom});
        } else {
          throw ParseError("reference to undefined variable '" + atom + "'", pos);
        }
        ++pos;
      }
    }
    ++pos;  // ')'
    return var;
  }
};

}  // namespace detail

inline AmrGraph parse_penman(const std::string& text) {
  std::vector<std::string> toks = penman_tokens(text);
  if (toks.empty()) throw ParseError("empty input", 0);
  detail::PenmanParser p(toks);
  p.g.top = p.parse_node();
  if (p.pos != toks.size()) throw ParseError("trailing tokens after root node", p.pos);
  validate(p.g);
  return p.g;
}

// Per-source adjacency in edge-list order.
inline std::map<std::string, std::vector<const Edge*>> adjacency(const AmrGraph& g) {
  std::map<std::string, std::vector<const Edge*>> adj;
  for (const Edge& e : g.edges) adj[e.source].push_back(&e);
  return adj;
}

// DFS from top; the first visit of each node prints its definition, later
// visits print the bare variable. Single-space separated.
inline std::string serialize_penman(const AmrGraph& g) {
  validate(g);
  auto adj = adjacency(g);
  std::set<std::string> printed;
  std::vector<std::string> out;
  std::function<void(const std::string&)> emit = [&](const std::string& v) {
    if (!printed.insert(v).second) {
      out.push_back(v);
      return;
    }
    out.push_back("(");
    out.push_back(v);
    out.push_back("/");
    out.push_back(g.nodes.at(v));
    auto it = adj.find(v);
    if (it != adj.end()) {
      for (const Edge* e : it->second) {
        out.push_back(e->role);
        if (e->target_is_constant)
          out.push_back(e->target);
        else
          emit(e->target);
      }
    }
    out.push_back(")");
  };
  emit(g.top);
  std::string s;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (i) s += ' ';
    s += out[i];
  }
  return s;
}

using Triple = std::array<std::string, 3>;

// (var, "instance", concept) per node; (top, "TOP", concept); (src, role, tgt)
// per edge. Roles keep their ':' so they cannot collide with "instance"/"TOP".
inline std::set<Triple> triples(const AmrGraph& g) {
  std::set<Triple> t;
  for (const auto& [var, label] : g.nodes) t.insert({var, "instance", label});
  t.insert({g.top, "TOP", g.nodes.at(g.top)});
  for (const Edge& e : g.edges) t.insert({e.source, e.role, e.target});
  return t;
}

struct CorefLink {
  std::string duplicate;   // the copy minted for a repeat visit
  std::string antecedent;  // nearest preceding copy of the same original node
};

struct ReplicatedTree {
  AmrGraph tree;                      // a tree: every node has in-degree <= 1
  std::vector<CorefLink> coref_links; // chains duplicates to their antecedents
};

// Unrolls a graph into a tree by copying each re-visited node as a fresh leaf.
// Copies are named n0, n1, ... in DFS visit order; subtrees hang off the first
// mention only; each duplicate links to the nearest preceding copy.
inline ReplicatedTree replicate_referents(const AmrGraph& g) {
  validate(g);
  auto adj = adjacency(g);
  ReplicatedTree out;
  int counter = 0;
  std::map<std::string, std::string> last_copy;  // original var -> latest copy
  std::function<std::string(const std::string&)> visit = [&](const std::string& v) {
    std::string id = "n" + std::to_string(counter++);
    out.tree.nodes[id] = g.nodes.at(v);
    auto it = last_copy.find(v);
    if (it != last_copy.end()) {
      out.coref_links.push_back({id, it->second});
      it->second = id;
      return id;  // duplicate: leaf copy, no children
    }
    last_copy[v] = id;
    auto ait = adj.find(v);
    if (ait != adj.end()) {
      for (const Edge* e : ait->second) {
        if (e->target_is_constant) {
          out.tree.edges.push_back({id, e->role, true, e->target});
        } else {
          out.tree.edges.push_back({id, e->role, false, ""});
          std::size_t slot = out.tree.edges.size() - 1;
          std::string child = visit(e->target);
          out.tree.edges[slot].target = child;
        }
      }
    }
    return id;
  };
  out.tree.top = visit(g.top);
  return out;
}

namespace detail {

inline std::uint64_t rnd_below(std::mt19937_64& rng, std::uint64_t n) {
  return n ? rng() % n : 0;  // modulo bias is irrelevant at these sizes
}

inline const std::vector<std::string>& concept_pool() {
  static const std::vector<std::string> pool = {
      "alpha",   "beta",    "gamma",   "delta",   "epsilon", "zeta",
      "eta",     "theta",   "iota",    "kappa",   "lambda",  "mu",
      "nu",      "xi",      "omicron", "pi",      "rho",     "sigma",
      "tau",     "upsilon", "phi",     "chi",     "psi",     "omega",
      "want-01", "go-02",   "see-01",  "say-01",  "dog",     "boy",
      "girl",    "city",    "country", "person",  "thing",   "eat-01",
      "run-02",  "book",    "house",   "water"};
  return pool;
}

inline const std::vector<std::string>& role_pool() {
  static const std::vector<std::string> pool = {
      ":arg0", ":arg1", ":arg2", ":arg3", ":arg4",  ":mod",
      ":time", ":manner", ":location", ":domain", ":arg1-of", ":poss"};
  return pool;
}

}  // namespace detail

// Seeded random DAG: a random tree over 1..max_nodes nodes plus up to
// max_reentrancies forward (s < t) extra edges, occasional constant leaves.
// Variables are renamed n0, n1, ... in DFS order; always validates.
inline AmrGraph random_graph(std::uint64_t seed, int max_nodes, int max_reentrancies) {
  if (max_nodes < 1) throw std::invalid_argument("random_graph: max_nodes must be >= 1");
  std::mt19937_64 rng(seed);
  const auto& concepts = detail::concept_pool();
  const auto& roles = detail::role_pool();
  int n = 1 + static_cast<int>(detail::rnd_below(rng, static_cast<std::uint64_t>(max_nodes)));

  AmrGraph g;
  std::vector<std::string> var(n);
  for (int i = 0; i < n; ++i) {
    var[i] = "t" + std::to_string(i);
    g.nodes[var[i]] = concepts[detail::rnd_below(rng, concepts.size())];
  }
  g.top = var[0];
  for (int i = 1; i < n; ++i) {
    int parent = static_cast<int>(detail::rnd_below(rng, static_cast<std::uint64_t>(i)));
    g.edges.push_back({var[parent], roles[detail::rnd_below(rng, roles.size())], false, var[i]});
  }
  // constant attributes
  for (int i = 0; i < n; ++i) {
    if (detail::rnd_below(rng, 5) == 0) {
      static const std::vector<std::string> const_roles = {":quant", ":value", ":polarity"};
      static const std::vector<std::string> const_vals = {"2", "42", "-", "\"name\"", "3.5", "+"};
      g.edges.push_back({var[i], const_roles[detail::rnd_below(rng, 3)], true,
                         const_vals[detail::rnd_below(rng, const_vals.size())]});
    }
  }
  // reentrancies: extra forward edges s < t, skipping exact duplicates
  if (n >= 2 && max_reentrancies > 0) {
    int want = static_cast<int>(detail::rnd_below(rng, static_cast<std::uint64_t>(max_reentrancies + 1)));
    for (int k = 0; k < want; ++k) {
      int s = static_cast<int>(detail::rnd_below(rng, static_cast<std::uint64_t>(n - 1)));
      int t = s + 1 + static_cast<int>(detail::rnd_below(rng, static_cast<std::uint64_t>(n - 1 - s)));
      Edge e{var[s], roles[detail::rnd_below(rng, roles.size())], false, var[t]};
      if (std::find(g.edges.begin(), g.edges.end(), e) == g.edges.end()) g.edges.push_back(e);
    }
  }

  // rename to n0.. in DFS order
  auto adj = adjacency(g);
  std::map<std::string, std::string> rename;
  int next = 0;
  std::function<void(const std::string&)> dfs = [&](const std::string& v) {
    if (rename.count(v)) return;
    rename[v] = "n" + std::to_string(next++);
    auto it = adj.find(v);
    if (it != adj.end())
      for (const Edge* e : it->second)
        if (!e->target_is_constant) dfs(e->target);
  };
  dfs(g.top);
  AmrGraph out;
  for (const auto& [v, c] : g.nodes) out.nodes[rename.at(v)] = c;
  for (const Edge& e : g.edges)
    out.edges.push_back({rename.at(e.source), e.role, e.target_is_constant,
                         e.target_is_constant ? e.target : rename.at(e.target)});
  out.top = rename.at(g.top);
  validate(out);
  return out;
}

// ---- corpus files: blank-line separated records, '# ::key value' metadata ----

struct CorpusRecord {
  std::map<std::string, std::string> meta;  // e.g. meta["snt"]
  std::string penman;
  int line = 0;  // first line of the record in its source stream (1-based; 0 = unknown)
};

inline std::vector<CorpusRecord> read_corpus(std::istream& in) {
  std::vector<CorpusRecord> records;
  CorpusRecord cur;
  std::string line;
  int line_no = 0;
  auto flush = [&] {
    if (!cur.penman.empty() || !cur.meta.empty()) records.push_back(cur);
    cur = CorpusRecord{};
  };
  while (std::getline(in, line)) {
    ++line_no;
    // trim trailing \r
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string stripped = line;
    std::size_t a = stripped.find_first_not_of(" \t");
    if (a == std::string::npos) {
      flush();
      continue;
    }
    if (cur.line == 0) cur.line = line_no;
    if (stripped[a] == '#') {
      std::size_t k = stripped.find("::", a);
      if (k != std::string::npos) {
        std::size_t ke = stripped.find(' ', k + 2);
        std::string key = stripped.substr(k + 2, ke == std::string::npos ? std::string::npos : ke - k - 2);
        std::string val = ke == std::string::npos ? "" : stripped.substr(ke + 1);
        cur.meta[key] = val;
      }
      continue;
    }
    if (!cur.penman.empty()) cur.penman += ' ';
    cur.penman += stripped.substr(a);
  }
  flush();
  return records;
}

inline void write_corpus(std::ostream& out, const std::vector<CorpusRecord>& records) {
  for (const CorpusRecord& r : records) {
    for (const auto& [k, v] : r.meta) out << "# ::" << k << ' ' << v << '\n';
    out << r.penman << "\n\n";
  }
}

// Parses a record's PENMAN and drops :wiki attributes (constant-valued only).
inline AmrGraph record_graph(const CorpusRecord& r, bool strip_wiki = true) {
  AmrGraph g = parse_penman(r.penman);
  if (strip_wiki) {
    auto& e = g.edges;
    e.erase(std::remove_if(e.begin(), e.end(),
                           [](const Edge& x) { return x.role == ":wiki" && x.target_is_constant; }),
            e.end());
  }
  return g;
}

}  // namespace chaform
