#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>

#include "relkd/synth_data.hpp"

using namespace relkd;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "relkd_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.n_concepts = 10;
  s.samples_per_concept = 20;
  s.seed = 4;
  return s;
}

}  // namespace

TEST_CASE("generation shapes and labels") {
  const auto d = generate(small_spec());
  CHECK(d.size() == 200);
  CHECK(d.image.cols() == 32);
  CHECK(d.text.cols() == 24);
  CHECK(d.n_concepts == 10);
  std::map<int, int> counts;
  for (int l : d.labels) ++counts[l];
  CHECK(counts.size() == 10);
  for (const auto& [l, c] : counts) CHECK(c == 20);
}

TEST_CASE("generation is deterministic in the seed") {
  CHECK(generate(small_spec()) == generate(small_spec()));
  auto other = small_spec();
  other.seed = 5;
  CHECK_FALSE(generate(small_spec()) == generate(other));
}

TEST_CASE("zero noise makes same-concept rows identical") {
  auto s = small_spec();
  s.noise_sigma = 0.0;
  const auto d = generate(s);
  CHECK(d.image.row(0)[3] == d.image.row(19)[3]);
  CHECK(d.text.row(20)[1] == d.text.row(39)[1]);
  CHECK(d.image.row(0)[3] != d.image.row(20)[3]);
}

TEST_CASE("split sizes and stratification") {
  SyntheticSpec s;
  s.n_concepts = 40;
  s.samples_per_concept = 50;
  const auto parts = split(generate(s), SplitFractions{}, 9);
  CHECK(parts.train.size() == 1600);
  CHECK(parts.val.size() == 200);
  CHECK(parts.test.size() == 200);
  std::map<int, int> per_concept;
  for (int l : parts.val.labels) ++per_concept[l];
  CHECK(per_concept.size() == 40);
  for (const auto& [l, c] : per_concept) CHECK(c == 5);
  for (auto sp : parts.train.splits) CHECK(sp == Split::train);
  for (auto sp : parts.test.splits) CHECK(sp == Split::test);
}

TEST_CASE("split partitions the rows without overlap") {
  const auto d = generate(small_spec());
  const auto parts = split(d, SplitFractions{0.7, 0.2, 0.1}, 1);
  CHECK(parts.train.size() + parts.val.size() + parts.test.size() == d.size());
  CHECK(parts.train.size() == 140);
  CHECK(parts.val.size() == 40);
  const auto again = split(d, SplitFractions{0.7, 0.2, 0.1}, 1);
  CHECK(again.val == parts.val);
}

TEST_CASE("split rejects bad fractions and empty splits") {
  const auto d = generate(small_spec());
  CHECK_THROWS_AS(split(d, SplitFractions{0.5, 0.2, 0.2}, 0), ConfigError);
  CHECK_THROWS_AS(split(d, SplitFractions{1.0, 0.0, 0.0}, 0), ConfigError);
  auto tiny = small_spec();
  tiny.n_concepts = 1;
  tiny.samples_per_concept = 3;
  CHECK_THROWS_AS(split(generate(tiny), SplitFractions{0.98, 0.01, 0.01}, 0), ConfigError);
}

TEST_CASE("jsonl save and load round-trip exactly") {
  const auto parts = split(generate(small_spec()), SplitFractions{}, 2);
  const auto merged = merge(parts);
  const auto path = temp_path("roundtrip.jsonl");
  save(merged, path.string());
  const auto back = load(path.string());
  CHECK(back == merged);
  CHECK(back.subset(Split::val) == parts.val);
}

TEST_CASE("load reports the failing line") {
  const auto path = temp_path("broken.jsonl");
  {
    std::ofstream out(path);
    out << R"({"img":[1,2],"txt":[3],"label":0,"split":"train"})" << "\n";
    out << R"({"img":[1,2],"txt":[3],"label":1,"spl)" << "\n";
  }
  try {
    load(path.string());
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }

  {
    std::ofstream out(path);
    out << R"({"img":[1,2],"txt":[3],"label":0,"split":"train"})" << "\n\n";
    out << R"({"img":[1],"txt":[3],"label":0,"split":"train"})" << "\n";
  }
  try {
    load(path.string());
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("empty file gives an empty dataset") {
  const auto path = temp_path("empty.jsonl");
  { std::ofstream out(path); }
  CHECK(load(path.string()).size() == 0);
  CHECK_THROWS_AS(load(temp_path("missing.jsonl").string() + ".nope"), DataError);
}

TEST_CASE("spec validation") {
  auto s = small_spec();
  s.latent_dim = 0;
  CHECK_THROWS_AS(generate(s), ConfigError);
  s = small_spec();
  s.noise_sigma = -1.0;
  CHECK_THROWS_AS(generate(s), ConfigError);
}
