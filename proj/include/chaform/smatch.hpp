#pragma once

// Exact Smatch for small graphs: branch-and-bound over injective variable
// mappings, maximizing matched triples. No hill climbing, no restarts — the
// returned score is the true optimum.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "chaform/amr_graph.hpp"

namespace chaform {

struct SmatchError : std::runtime_error {
  explicit SmatchError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SmatchResult {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int matched = 0;
  int pred_triples = 0;
  int gold_triples = 0;
  std::map<std::string, std::string> best_mapping;  // pred var -> gold var
};

namespace detail {

struct SmatchSearch {
  // triples of the side being mapped, with variable slots resolved to indices
  struct T {
    int s;            // var index (always a var)
    std::string rel;
    int o;            // var index or -1
    std::string olit; // literal when o == -1
  };
  std::vector<std::string> vars_a, vars_b;
  std::vector<T> ta;
  std::set<Triple> tb;
  std::map<std::string, int> aidx;
  std::set<std::string> bvars;
  // per a-var: triples whose last undecided endpoint is that var
  std::vector<std::vector<int>> pending_of;
  std::vector<int> assign;     // a var index -> b var index or -1
  std::vector<char> used_b;
  int best = -1;
  std::vector<int> best_assign;
  long ops = 0;
  long budget = 0;

  bool triple_matches(const T& t) const {
    const std::string& s = vars_b[assign[t.s]];
    std::string o = t.o >= 0 ? vars_b[assign[t.o]] : t.olit;
    return tb.count({s, t.rel, o}) != 0;
  }

  // number of a-triples with every var endpoint assigned and matching in b
  void search(int depth, int matched, int undecided, const std::vector<std::vector<int>>& order) {
    if (++ops > budget) throw SmatchError("graph too large for exact mode");
    if (matched + undecided <= best) return;  // admissible bound
    if (depth == static_cast<int>(vars_a.size())) {
      if (matched > best) {
        best = matched;
        best_assign = assign;
      }
      return;
    }
    int v = depth;  // assign a-vars in index order
    for (int b : order[v]) {
      if (used_b[b]) continue;
      assign[v] = b;
      used_b[b] = 1;
      int add = 0, settle = 0;
      for (int ti : pending_of[v]) {
        const T& t = ta[ti];
        bool ready = assign[t.s] >= 0 && (t.o < 0 || assign[t.o] >= 0);
        if (ready) {
          ++settle;
          if (triple_matches(t)) ++add;
        }
      }
      // triples become "decided" only when their last var endpoint lands; a
      // triple appears in pending_of for each of its var endpoints, so guard
      // with the readiness check above and count each settle exactly once.
      search(depth + 1, matched + add, undecided - settle, order);
      used_b[b] = 0;
      assign[v] = -1;
      if (best == static_cast<int>(ta.size())) return;  // cannot improve
    }
    // leaving v unassigned is never better when |vars_a| <= |vars_b| (every
    // extension of a partial map keeps previously matched triples), so we
    // always assign; injectivity is guaranteed by used_b.
  }
};

}  // namespace detail

// Exact maximum triple overlap between g1 (prediction) and g2 (gold).
// Unconditionally fast when min(#nodes) <= 8; beyond that an operation budget
// applies and exhaustion raises "graph too large for exact mode".
inline SmatchResult smatch_small(const AmrGraph& g1, const AmrGraph& g2,
                                 long budget = 50'000'000) {
  std::set<Triple> t1 = triples(g1), t2 = triples(g2);
  // map the smaller variable set into the larger one
  bool swapped = g1.nodes.size() > g2.nodes.size();
  const AmrGraph& ga = swapped ? g2 : g1;
  const AmrGraph& gb = swapped ? g1 : g2;
  const std::set<Triple>& taset = swapped ? t2 : t1;
  const std::set<Triple>& tbset = swapped ? t1 : t2;

  detail::SmatchSearch s;
  s.budget = budget;
  for (const auto& [v, c] : ga.nodes) {
    s.aidx[v] = static_cast<int>(s.vars_a.size());
    s.vars_a.push_back(v);
  }
  for (const auto& [v, c] : gb.nodes) {
    s.bvars.insert(v);
    s.vars_b.push_back(v);
  }
  s.tb = tbset;
  int undecided = 0;
  s.pending_of.resize(s.vars_a.size());
  for (const Triple& t : taset) {
    detail::SmatchSearch::T tt;
    tt.s = s.aidx.at(t[0]);
    tt.rel = t[1];
    if (t[1][0] == ':' && !is_constant_literal(t[2]) && s.aidx.count(t[2])) {
      tt.o = s.aidx.at(t[2]);
    } else {
      tt.o = -1;
      tt.olit = t[2];
    }
    int ti = static_cast<int>(s.ta.size());
    s.ta.push_back(tt);
    s.pending_of[tt.s].push_back(ti);
    if (tt.o >= 0 && tt.o != tt.s) s.pending_of[tt.o].push_back(ti);
    ++undecided;
  }
  s.assign.assign(s.vars_a.size(), -1);
  s.used_b.assign(s.vars_b.size(), 0);

  // candidate order: same-concept gold vars first (greedy dive finds the
  // perfect mapping of isomorphic graphs immediately)
  std::vector<std::vector<int>> order(s.vars_a.size());
  for (std::size_t i = 0; i < s.vars_a.size(); ++i) {
    const std::string& ca = ga.nodes.at(s.vars_a[i]);
    std::vector<int> same, other;
    for (std::size_t j = 0; j < s.vars_b.size(); ++j) {
      if (gb.nodes.at(s.vars_b[j]) == ca)
        same.push_back(static_cast<int>(j));
      else
        other.push_back(static_cast<int>(j));
    }
    order[i] = same;
    order[i].insert(order[i].end(), other.begin(), other.end());
  }
  s.best = -1;
  s.search(0, 0, undecided, order);

  SmatchResult r;
  r.matched = std::max(0, s.best);
  r.pred_triples = static_cast<int>(t1.size());
  r.gold_triples = static_cast<int>(t2.size());
  r.precision = r.pred_triples ? static_cast<double>(r.matched) / r.pred_triples : 0.0;
  r.recall = r.gold_triples ? static_cast<double>(r.matched) / r.gold_triples : 0.0;
  r.f1 = (r.precision + r.recall) > 0
             ? 2 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  for (std::size_t i = 0; i < s.best_assign.size(); ++i) {
    if (s.best_assign[i] < 0) continue;
    const std::string& a = s.vars_a[i];
    const std::string& b = s.vars_b[s.best_assign[i]];
    if (swapped)
      r.best_mapping[b] = a;  // keep direction pred -> gold
    else
      r.best_mapping[a] = b;
  }
  return r;
}

// Micro-averaged corpus score. A missing prediction (nullopt: unparseable)
// contributes zero matches and zero predicted triples but its gold triples
// still count in the recall denominator.
inline SmatchResult corpus_score(const std::vector<std::optional<AmrGraph>>& preds,
                                 const std::vector<AmrGraph>& golds,
                                 long budget = 50'000'000) {
  if (preds.size() != golds.size())
    throw SmatchError("record count mismatch: " + std::to_string(preds.size()) +
                      " predictions vs " + std::to_string(golds.size()) + " gold");
  if (golds.empty()) throw SmatchError("empty corpus");
  SmatchResult total;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    total.gold_triples += static_cast<int>(triples(golds[i]).size());
    if (!preds[i]) continue;
    SmatchResult r = smatch_small(*preds[i], golds[i], budget);
    total.matched += r.matched;
    total.pred_triples += r.pred_triples;
  }
  total.precision = total.pred_triples ? static_cast<double>(total.matched) / total.pred_triples : 0.0;
  total.recall = total.gold_triples ? static_cast<double>(total.matched) / total.gold_triples : 0.0;
  total.f1 = (total.precision + total.recall) > 0
                 ? 2 * total.precision * total.recall / (total.precision + total.recall)
                 : 0.0;
  return total;
}

}  // namespace chaform
