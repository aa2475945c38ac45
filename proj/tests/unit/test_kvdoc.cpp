#include <doctest.h>

#include <cmath>
#include <limits>

#include "bagforge/errors.hpp"
#include "bagforge/kvdoc.hpp"
#include "support/tmpdir.hpp"

using namespace bagforge;

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.0, 0.0}) {
    CHECK(parse_double(format_double(v), "v") == v);
  }
  CHECK(format_double(0.5) == "0.5");
  CHECK(format_fixed(72.5249, 2) == "72.52");
}

TEST_CASE("number and boolean parsing rejects garbage") {
  CHECK(parse_int(" 42 ", "n") == 42);
  CHECK_THROWS_AS(parse_int("4x", "n"), ValidationError);
  CHECK_THROWS_AS(parse_double("", "x"), ValidationError);
  CHECK(parse_bool("true", "b"));
  CHECK_FALSE(parse_bool("0", "b"));
  CHECK_THROWS_AS(parse_bool("maybe", "b"), ValidationError);
}

TEST_CASE("kvdoc keeps insertion order and replaces in place") {
  KvDoc doc;
  doc.set("b", 1);
  doc.set("a", std::string("x"));
  doc.set("b", 2);
  REQUIRE(doc.entries().size() == 2);
  CHECK(doc.entries()[0].first == "b");
  CHECK(doc.get_int("b", 0) == 2);
  CHECK(doc.serialize() == "b = 2\na = x\n");
}

TEST_CASE("kvdoc parse handles comments and blank lines") {
  const KvDoc doc = KvDoc::parse("# comment\n\nname = slide one \nvalue=3.5\n");
  CHECK(doc.at("name") == "slide one");
  CHECK(doc.get_double("value", 0) == 3.5);
  CHECK(doc.get_string("missing", "fb") == "fb");
  CHECK_THROWS_AS(doc.at("missing"), ValidationError);
  CHECK_THROWS_AS(KvDoc::parse("no separator\n"), ValidationError);
}

TEST_CASE("kvdoc save and load") {
  TempDir dir;
  KvDoc doc;
  doc.set("pi", 3.141592653589793);
  doc.set("flag", true);
  doc.save(dir / "doc.txt");
  const KvDoc back = KvDoc::load(dir / "doc.txt");
  CHECK(back.get_double("pi", 0) == 3.141592653589793);
  CHECK(back.get_bool("flag", false));
  CHECK_THROWS_AS(KvDoc::load(dir / "absent.txt"), IoError);
}

TEST_CASE("csv rows use RFC 4180 quoting") {
  const auto cells = parse_csv_row(R"(a,"b,c","d""e",)", 1);
  REQUIRE(cells.size() == 4);
  CHECK(cells[1] == "b,c");
  CHECK(cells[2] == "d\"e");
  CHECK(cells[3].empty());
  CHECK(csv_cell("x,y") == "\"x,y\"");
  CHECK(csv_cell("plain") == "plain");
  CHECK_THROWS_WITH_AS(parse_csv_row("\"open", 7), "csv line 7: unterminated quote", ValidationError);
}
