#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "chaform/amr_graph.hpp"
#include "chaform/smatch.hpp"
#include "chaform/target_form.hpp"

using namespace chaform;

namespace {

const char* kThreeNode = "( a / alpha :arg0 ( b / beta ) :arg1 ( g / gamma :arg2 b ) )";

// independent oracle: enumerate every injective mapping small -> large
// directly over triple sets (no pruning, no shared code paths)
int brute_force_matched(const AmrGraph& g1, const AmrGraph& g2) {
  const AmrGraph& a = g1.nodes.size() <= g2.nodes.size() ? g1 : g2;
  const AmrGraph& b = g1.nodes.size() <= g2.nodes.size() ? g2 : g1;
  std::vector<std::string> va, vb;
  for (const auto& [v, c] : a.nodes) va.push_back(v);
  for (const auto& [v, c] : b.nodes) vb.push_back(v);
  std::set<Triple> ta = triples(a), tb = triples(b);
  std::sort(vb.begin(), vb.end());
  int best = 0;
  std::vector<int> pick(vb.size());
  std::iota(pick.begin(), pick.end(), 0);
  // all permutations of b-vars; use the first |va| as the image
  do {
    std::map<std::string, std::string> m;
    for (std::size_t i = 0; i < va.size(); ++i) m[va[i]] = vb[pick[i]];
    int matched = 0;
    for (const Triple& t : ta) {
      std::string s = m.at(t[0]);
      std::string o = m.count(t[2]) ? m.at(t[2]) : t[2];
      if (tb.count({s, t[1], o})) ++matched;
    }
    best = std::max(best, matched);
  } while (std::next_permutation(pick.begin(), pick.end()));
  return best;
}

AmrGraph renamed(const AmrGraph& g, const std::string& prefix) {
  AmrGraph out;
  std::map<std::string, std::string> m;
  int i = 0;
  for (const auto& [v, c] : g.nodes) m[v] = prefix + std::to_string(i++);
  for (const auto& [v, c] : g.nodes) out.nodes[m[v]] = c;
  for (const Edge& e : g.edges)
    out.edges.push_back({m.at(e.source), e.role, e.target_is_constant,
                         e.target_is_constant ? e.target : m.at(e.target)});
  out.top = m.at(g.top);
  return out;
}

}  // namespace

TEST_CASE("identical graphs score 1.0", "[smatch]") {
  AmrGraph g = parse_penman(kThreeNode);
  SmatchResult r = smatch_small(g, g);
  CHECK(r.f1 == 1.0);
  CHECK(r.matched == 7);
  CHECK(r.best_mapping.at("a") == "a");
}

TEST_CASE("one changed role costs exactly one triple", "[smatch]") {
  AmrGraph g = parse_penman(kThreeNode);
  AmrGraph h = g;
  h.edges[2].role = ":mod";
  SmatchResult r = smatch_small(g, h);
  CHECK(r.matched == 6);
  CHECK(r.precision == Catch::Approx(6.0 / 7.0));
  CHECK(r.recall == Catch::Approx(6.0 / 7.0));
  CHECK(r.f1 == Catch::Approx(6.0 / 7.0));
}

TEST_CASE("form round-trip scores 1.0 against the source graph", "[smatch]") {
  AmrGraph g = parse_penman(kThreeNode);
  CHECK(smatch_small(delinearize(linearize(g, FormKind::SingleDown)), g).f1 == 1.0);
}

TEST_CASE("renaming invariance and symmetry", "[smatch][property]") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    AmrGraph g = random_graph(seed, 8, 2);
    CHECK(smatch_small(g, renamed(g, "z")).f1 == 1.0);
    AmrGraph h = random_graph(seed + 1000, 8, 2);
    CHECK(smatch_small(g, h).f1 == Catch::Approx(smatch_small(h, g).f1));
  }
}

TEST_CASE("branch-and-bound equals exhaustive enumeration on small graphs", "[smatch][property]") {
  for (std::uint64_t seed = 0; seed < 120; ++seed) {
    AmrGraph g = random_graph(seed, 5, 2);
    AmrGraph h = random_graph(seed * 31 + 17, 5, 2);
    INFO("seed " << seed);
    REQUIRE(smatch_small(g, h).matched == brute_force_matched(g, h));
  }
}

TEST_CASE("mapping direction is prediction to gold", "[smatch]") {
  AmrGraph pred = parse_penman("( p1 / thing :mod ( p2 / other ) )");
  AmrGraph gold = parse_penman("( q1 / thing :mod ( q2 / other ) )");
  SmatchResult r = smatch_small(pred, gold);
  CHECK(r.best_mapping.at("p1") == "q1");
  CHECK(r.best_mapping.at("p2") == "q2");
  // and with sizes flipped the direction is preserved
  AmrGraph pred2 = parse_penman("( p1 / thing :mod ( p2 / other ) :mod ( p3 / extra ) )");
  SmatchResult r2 = smatch_small(pred2, gold);
  CHECK(r2.best_mapping.at("p1") == "q1");
}

TEST_CASE("budget exhaustion reports graphs too large", "[smatch]") {
  // ten-node chains: the search needs more than three recursive steps
  std::string chain = "( v9 / c9 )";
  for (int i = 8; i >= 0; --i)
    chain = "( v" + std::to_string(i) + " / c" + std::to_string(i) + " :arg0 " + chain + " )";
  AmrGraph g = parse_penman(chain);
  CHECK_THROWS_WITH(smatch_small(g, renamed(g, "w"), 3),
                    Catch::Matchers::ContainsSubstring("too large"));
}

TEST_CASE("corpus_score micro-averages and tolerates missing predictions", "[smatch]") {
  std::vector<AmrGraph> golds;
  for (std::uint64_t seed = 0; seed < 4; ++seed) golds.push_back(random_graph(seed + 50, 6, 1));
  std::vector<std::optional<AmrGraph>> preds(golds.begin(), golds.end());
  CHECK(corpus_score(preds, golds).f1 == 1.0);

  // half the records become single-node dummies: hand-computable ratio
  AmrGraph dummy = parse_penman("( d / dummy )");
  std::vector<AmrGraph> golds4;
  for (int i = 0; i < 4; ++i) golds4.push_back(parse_penman(kThreeNode));
  std::vector<std::optional<AmrGraph>> preds4 = {golds4[0], golds4[1], dummy, dummy};
  SmatchResult r = corpus_score(preds4, golds4);
  // matched = 7+7+0+0; pred triples = 7+7+2+2; gold = 28
  CHECK(r.precision == Catch::Approx(14.0 / 18.0));
  CHECK(r.recall == Catch::Approx(14.0 / 28.0));
  CHECK(r.f1 > 0.0);
  CHECK(r.f1 < 1.0);
  double p = 14.0 / 18.0, q = 14.0 / 28.0;
  CHECK(r.f1 == Catch::Approx(2 * p * q / (p + q)));

  // unparseable predictions keep their gold triples in the denominator
  std::vector<std::optional<AmrGraph>> missing = {golds4[0], std::nullopt, golds4[2], golds4[3]};
  SmatchResult rm = corpus_score(missing, golds4);
  CHECK(rm.matched == 21);
  CHECK(rm.recall == Catch::Approx(21.0 / 28.0));
  CHECK(rm.precision == 1.0);

  CHECK_THROWS_AS(corpus_score({}, {}), SmatchError);
  std::vector<std::optional<AmrGraph>> one = {golds4[0]};
  CHECK_THROWS_AS(corpus_score(one, golds4), SmatchError);
}
