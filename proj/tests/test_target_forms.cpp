#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "chaform/amr_graph.hpp"
#include "chaform/smatch.hpp"
#include "chaform/target_form.hpp"

using namespace chaform;

namespace {

const char* kThreeNode = "( a / alpha :arg0 ( b / beta ) :arg1 ( g / gamma :arg2 b ) )";
const char* kFiveNode =
    "( l / like-01 :arg0 ( p / person :arg1-of ( e / employ-01 ) ) "
    ":arg1 ( t / tour-01 :arg0 p :arg1 ( c / city ) ) )";

std::vector<std::string> surfaces(const TargetForm& f) {
  std::vector<std::string> out;
  for (const Token& t : f.tokens) out.push_back(t.surface());
  return out;
}

}  // namespace

TEST_CASE("linearize SingleDown matches the 13-token fixture", "[forms]") {
  TargetForm f = linearize(parse_penman(kThreeNode), FormKind::SingleDown);
  CHECK(surfaces(f) == std::vector<std::string>{"(", "alpha", ":arg0", "(", "beta", ")", ":arg1",
                                                "(", "gamma", ":arg2", "beta", ")", ")"});
  REQUIRE(f.tokens.size() == 13);
  for (std::size_t i = 0; i < 13; ++i) CHECK(f.coref[i] == (i == 10 ? 4 : -1));
  CHECK(f.struct_ptr.empty());
}

TEST_CASE("to_double_down duplicates closes and remaps pointers", "[forms]") {
  TargetForm sd = linearize(parse_penman(kThreeNode), FormKind::SingleDown);
  TargetForm dd = linearize(parse_penman(kThreeNode), FormKind::DoubleDown);
  CHECK(dd == to_double_down(sd));
  REQUIRE(dd.tokens.size() == 16);
  CHECK(dd.tokens[5].type == TokenType::CloseCompose);
  CHECK(dd.tokens[6].type == TokenType::CloseExpand);
  for (std::size_t i = 0; i < 16; ++i) CHECK(dd.coref[i] == (i == 11 ? 4 : -1));

  TargetForm tiny = linearize(parse_penman("( x / thing )"), FormKind::DoubleDown);
  CHECK(surfaces(tiny) == std::vector<std::string>{"(", "thing", ")₁", ")₂"});
}

TEST_CASE("from_double_down inverts to_double_down exactly", "[forms][property]") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    TargetForm sd = linearize(random_graph(seed, 10, 3), FormKind::SingleDown);
    CHECK(from_double_down(to_double_down(sd)) == sd);
  }
}

TEST_CASE("linearize BottomUp matches the 10-token fixture", "[forms]") {
  TargetForm f = linearize(parse_penman(kThreeNode), FormKind::BottomUp);
  CHECK(surfaces(f) == std::vector<std::string>{"alpha", ":arg0", "beta", "■", ":arg1",
                                                "gamma", ":arg2", "beta", "■", "■"});
  REQUIRE(f.tokens.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(f.coref[i] == (i == 7 ? 2 : -1));
  std::vector<int> want_sp(10, -1);
  want_sp[3] = 2;
  want_sp[8] = 5;
  want_sp[9] = 0;
  CHECK(f.struct_ptr == want_sp);
}

TEST_CASE("single-node linearizations", "[forms]") {
  AmrGraph g = parse_penman("( x / thing )");
  TargetForm sd = linearize(g, FormKind::SingleDown);
  CHECK(surfaces(sd) == std::vector<std::string>{"(", "thing", ")"});
  CHECK(sd.coref == std::vector<int>{-1, -1, -1});
  TargetForm bu = linearize(g, FormKind::BottomUp);
  CHECK(surfaces(bu) == std::vector<std::string>{"thing", "■"});
  CHECK(bu.struct_ptr == std::vector<int>{-1, 0});
}

TEST_CASE("delinearize recovers the original graph", "[forms]") {
  AmrGraph g = parse_penman(kThreeNode);
  for (FormKind k : {FormKind::SingleDown, FormKind::DoubleDown, FormKind::BottomUp}) {
    AmrGraph back = delinearize(linearize(g, k));
    CHECK(smatch_small(back, g).f1 == 1.0);
  }
  AmrGraph one = delinearize(linearize(parse_penman("( x / thing )"), FormKind::SingleDown));
  CHECK(one.nodes == std::map<std::string, std::string>{{"n0", "thing"}});
}

TEST_CASE("delinearize∘linearize round-trips random graphs", "[forms][property]") {
  for (std::uint64_t seed = 0; seed < 150; ++seed) {
    AmrGraph g = random_graph(seed, 10, 3);
    for (FormKind k : {FormKind::SingleDown, FormKind::DoubleDown, FormKind::BottomUp}) {
      INFO("seed " << seed << " kind " << to_string(k));
      REQUIRE(smatch_small(delinearize(linearize(g, k)), g).f1 == 1.0);
    }
  }
}

TEST_CASE("form length relations across kinds", "[forms][property]") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    AmrGraph g = random_graph(seed, 10, 3);
    TargetForm sd = linearize(g, FormKind::SingleDown);
    TargetForm dd = linearize(g, FormKind::DoubleDown);
    TargetForm bu = linearize(g, FormKind::BottomUp);
    std::size_t closes = 0, opens = 0;
    for (const Token& t : sd.tokens) {
      closes += t.type == TokenType::Close;
      opens += t.type == TokenType::Open;
    }
    CHECK(dd.tokens.size() == sd.tokens.size() + closes);
    CHECK(bu.tokens.size() == sd.tokens.size() - opens);
    // pointer layers only link identical concepts
    for (std::size_t i = 0; i < bu.tokens.size(); ++i)
      if (bu.coref[i] >= 0) {
        CHECK(bu.tokens[i].type == TokenType::Concept);
        CHECK(bu.tokens[bu.coref[i]].text == bu.tokens[i].text);
      }
  }
}

TEST_CASE("marker rendering reinstates explicit variables", "[forms]") {
  TargetForm f = linearize(parse_penman(kThreeNode), FormKind::SingleDown);
  CHECK(to_marker_string(f) ==
        "( <R0> alpha :arg0 ( <R1> beta ) :arg1 ( <R2> gamma :arg2 <R1> ) )");
  CHECK(to_marker_string(linearize(parse_penman("( x / thing )"), FormKind::SingleDown)) ==
        "( <R0> thing )");
  std::string five = to_marker_string(linearize(parse_penman(kFiveNode), FormKind::SingleDown));
  std::size_t uses = 0;
  for (std::size_t p = five.find("<R1>"); p != std::string::npos; p = five.find("<R1>", p + 1)) ++uses;
  CHECK(uses == 2);  // person defined once, referenced once
  CHECK_THROWS_AS(to_marker_string(linearize(parse_penman(kThreeNode), FormKind::BottomUp)), FormError);
}

TEST_CASE("validate_form rejects inconsistent layers", "[forms]") {
  TargetForm f = linearize(parse_penman(kThreeNode), FormKind::SingleDown);
  {
    TargetForm bad = f;
    bad.coref[10] = 8;  // gamma, not beta
    CHECK_THROWS_AS(validate_form(bad), FormError);
  }
  {
    TargetForm bad = f;
    bad.tokens.pop_back();
    bad.coref.pop_back();
    CHECK_THROWS_AS(validate_form(bad), FormError);  // unbalanced
  }
  {
    TargetForm bad = f;
    bad.coref[10] = 10;  // self-reference
    CHECK_THROWS_AS(validate_form(bad), FormError);
  }
  {
    TargetForm bad = linearize(parse_penman(kThreeNode), FormKind::BottomUp);
    bad.struct_ptr[4] = 1;  // pointer on a non-reduce token
    CHECK_THROWS_AS(validate_form(bad), FormError);
  }
  {
    TargetForm bad = linearize(parse_penman(kThreeNode), FormKind::DoubleDown);
    bad.tokens[6] = Token::concept_token("x");  // breaks the )1 )2 pairing
    CHECK_THROWS_AS(validate_form(bad), FormError);
  }
}

TEST_CASE("delinearize reports offending indices", "[forms]") {
  // relation with no following value: ( thing :mod )
  TargetForm f;
  f.kind = FormKind::SingleDown;
  f.tokens = {Token::open(), Token::concept_token("thing"), Token::relation(":mod"), Token::close()};
  f.coref = {-1, -1, -1, -1};
  try {
    delinearize(f);
    FAIL("expected FormError");
  } catch (const FormError& e) {
    CHECK(e.index == 3);
  }

  // duplicate mention without pointer
  TargetForm g;
  g.kind = FormKind::SingleDown;
  g.tokens = {Token::open(), Token::concept_token("a"), Token::relation(":mod"), Token::concept_token("a"),
              Token::close()};
  g.coref = {-1, -1, -1, -1, -1};
  try {
    delinearize(g);
    FAIL("expected FormError");
  } catch (const FormError& e) {
    CHECK(e.index == 3);
  }

  // bottom-up: form must reduce to a single root
  TargetForm h;
  h.kind = FormKind::BottomUp;
  h.tokens = {Token::concept_token("a"), Token::reduce(), Token::concept_token("b"), Token::reduce()};
  h.coref = {-1, -1, -1, -1};
  h.struct_ptr = {-1, 0, -1, 2};
  CHECK_THROWS_AS(delinearize(h), FormError);

  // bottom-up: reduce span must start with a fresh concept
  TargetForm k;
  k.kind = FormKind::BottomUp;
  k.tokens = {Token::concept_token("a"), Token::reduce(), Token::concept_token("b"), Token::reduce()};
  k.coref = {-1, -1, -1, -1};
  k.struct_ptr = {-1, 0, -1, 1};  // span starts at the first reduce
  CHECK_THROWS_AS(delinearize(k), FormError);
}

TEST_CASE("forms serialize to JSON lines and back", "[forms]") {
  std::vector<TargetForm> forms;
  AmrGraph g = parse_penman(kThreeNode);
  for (FormKind k : {FormKind::SingleDown, FormKind::DoubleDown, FormKind::BottomUp})
    forms.push_back(linearize(g, k));
  std::stringstream ss;
  write_forms(ss, forms);
  // spot-check the wire format of the first record
  std::string line;
  std::getline(ss, line);
  auto j = nlohmann::json::parse(line);
  CHECK(j["kind"] == "single");
  CHECK(j["tokens"][0] == "(");
  CHECK(j["coref"][10] == 4);
  CHECK(j["struct"].is_null());
  ss.clear();
  ss.seekg(0);
  CHECK(read_forms(ss) == forms);
}

TEST_CASE("constants are never coref targets and never replicated", "[forms][property]") {
  AmrGraph g = parse_penman("( a / alpha :quant 3 :arg0 ( b / beta :quant 3 ) )");
  TargetForm f = linearize(g, FormKind::SingleDown);
  for (std::size_t i = 0; i < f.tokens.size(); ++i) {
    if (f.tokens[i].type == TokenType::Constant) CHECK(f.coref[i] == -1);
  }
  AmrGraph back = delinearize(f);
  int count = 0;
  for (const Edge& e : back.edges) count += e.target_is_constant;
  CHECK(count == 2);  // both constants survive independently
}
